use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use lprnet::ctc::{beam_search, greedy_decode_with_prob};
use lprnet::flops::{count, Convention};
use lprnet::io::{spec_from_config, WeightStore};
use lprnet::layers::Mode;
use lprnet::model::{CharSetSource, Model, ModelConfig, Variant};
use lprnet::synth::{render, GlyphAtlas, RenderConfig};
use lprnet::tensor::Tensor;
use lprnet_ffi::*;

const CONFIG: &str = "variant = reduced\ncharset = digits\nwidth_divisor = 8\n";

fn model_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Reduced,
        charset: CharSetSource::Digits,
        width_divisor: 8,
        ..ModelConfig::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: CString,
    weights: CString,
    model: Model<f32>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("model.cfg");
    let weights = dir.path().join("weights.lprw");
    std::fs::write(&config, CONFIG).unwrap();
    let model = Model::<f32>::build(spec_from_config(model_config(), None).unwrap(), 11).unwrap();
    WeightStore::from_model(&model).save(&weights).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    Fixture {
        config: c(&config),
        weights: c(&weights),
        model,
        _dir: dir,
    }
}

fn plate(model: &Model<f32>, text: &str, seed: u64) -> (Tensor<f32>, Vec<u8>) {
    let cs = model.charset();
    let img = render(&cs.encode(text).unwrap(), &GlyphAtlas::new(cs), seed, &RenderConfig::default())
        .unwrap()
        .image;
    let (h, w) = (24, 94);
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] = (img.at(0, c, y, x) * 255.0).round() as u8;
            }
        }
    }
    (img, rgb)
}

fn open(f: &Fixture) -> *mut LprRecognizer {
    let mut rec = ptr::null_mut();
    let st = unsafe { lpr_recognizer_open(f.config.as_ptr(), f.weights.as_ptr(), &mut rec) };
    assert_eq!(st, LprStatus::Ok);
    assert!(!rec.is_null());
    rec
}

fn last_error() -> String {
    let p = lpr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn greedy_recognition_matches_library() {
    let f = fixture();
    let rec = open(&f);
    for (i, text) in ["12345", "90210", "55555"].iter().enumerate() {
        let (img, rgb) = plate(&f.model, text, i as u64);
        let mut label = ptr::null_mut();
        let mut prob = 0.0;
        let st = unsafe { lpr_recognize(rec, rgb.as_ptr(), 94, 24, ptr::null(), &mut label, &mut prob) };
        assert_eq!(st, LprStatus::Ok);
        let got = unsafe { CStr::from_ptr(label) }.to_str().unwrap().to_string();
        unsafe { lpr_string_free(label) };
        let probs = f.model.forward(&img, Mode::Infer).unwrap();
        let (want, p) = greedy_decode_with_prob(&probs[0]);
        assert_eq!(got, f.model.charset().decode(&want));
        assert!((prob - p).abs() < 1e-12);
    }
    unsafe { lpr_recognizer_free(rec) };
}

#[test]
fn beam_recognition_with_templates() {
    let f = fixture();
    let rec = open(&f);
    let (img, rgb) = plate(&f.model, "31415", 3);
    let templates = CString::new("D D D D D\n").unwrap();
    let opts = LprDecodeOptions {
        decoder: LprDecoder::Beam,
        beam_width: 8,
        templates: templates.as_ptr(),
    };
    let mut label = ptr::null_mut();
    let st = unsafe { lpr_recognize(rec, rgb.as_ptr(), 94, 24, &opts, &mut label, ptr::null_mut()) };
    assert_eq!(st, LprStatus::Ok);
    let got = unsafe { CStr::from_ptr(label) }.to_str().unwrap().to_string();
    unsafe { lpr_string_free(label) };
    let probs = f.model.forward(&img, Mode::Infer).unwrap();
    let cands = beam_search(&probs[0], 8).unwrap();
    let set = lprnet::postfilter::TemplateSet::digits();
    let want = lprnet::postfilter::post_filter(&cands, &set, f.model.charset()).unwrap();
    assert_eq!(got, f.model.charset().decode(&want));

    let bad = LprDecodeOptions {
        decoder: LprDecoder::Beam,
        beam_width: 0,
        templates: ptr::null(),
    };
    let st = unsafe { lpr_recognize(rec, rgb.as_ptr(), 94, 24, &bad, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, LprStatus::InvalidArgument);
    unsafe { lpr_recognizer_free(rec) };
}

#[test]
fn probabilities_round_trip_and_buffer_check() {
    let f = fixture();
    let rec = open(&f);
    let (mut steps, mut classes) = (0, 0);
    assert_eq!(unsafe { lpr_recognizer_dims(rec, &mut steps, &mut classes) }, LprStatus::Ok);
    assert_eq!((steps, classes), (f.model.sequence_len(), 11));
    let (img, rgb) = plate(&f.model, "00000", 5);
    let mut written = 0;
    let mut small = vec![0f32; 4];
    let st = unsafe { lpr_probabilities(rec, rgb.as_ptr(), 94, 24, small.as_mut_ptr(), small.len(), &mut written) };
    assert_eq!(st, LprStatus::BufferTooSmall);
    assert_eq!(written, steps * classes);
    let mut buf = vec![0f32; written];
    let st = unsafe { lpr_probabilities(rec, rgb.as_ptr(), 94, 24, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(st, LprStatus::Ok);
    let probs = f.model.forward(&img, Mode::Infer).unwrap();
    for (a, b) in buf.iter().zip(probs[0].data()) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
    for row in buf.chunks(classes) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-4);
    }
    unsafe { lpr_recognizer_free(rec) };
}

#[test]
fn flops_match_library_counter() {
    let f = fixture();
    let rec = open(&f);
    let mut out = LprFlops::default();
    assert_eq!(unsafe { lpr_flops(rec, &mut out) }, LprStatus::Ok);
    let c = count(&f.model).unwrap();
    assert_eq!(out.macs, c.macs());
    assert_eq!(out.flops, c.total(Convention::TwoPerMac));
    assert_eq!(out.aux, c.aux());
    unsafe { lpr_recognizer_free(rec) };
}

#[test]
fn error_codes_and_messages() {
    let f = fixture();
    let mut rec = ptr::null_mut();
    let missing = CString::new("/nonexistent/weights.lprw").unwrap();
    let st = unsafe { lpr_recognizer_open(f.config.as_ptr(), missing.as_ptr(), &mut rec) };
    assert_eq!(st, LprStatus::Io);
    assert!(rec.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { lpr_recognizer_open(ptr::null(), f.weights.as_ptr(), &mut rec) };
    assert_eq!(st, LprStatus::NullPointer);
    assert!(last_error().contains("config"));

    // weights for a different architecture
    let st = unsafe { lpr_recognizer_open(f.weights.as_ptr(), f.weights.as_ptr(), &mut rec) };
    assert_ne!(st, LprStatus::Ok);

    let rec = open(&f);
    assert!(lpr_last_error().is_null());
    let rgb = vec![0u8; 10 * 10 * 3];
    let st = unsafe { lpr_recognize(rec, rgb.as_ptr(), 10, 10, ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, LprStatus::Shape);
    assert!(last_error().contains("94x24"));
    let st = unsafe { lpr_recognize(rec, ptr::null(), 94, 24, ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, LprStatus::NullPointer);
    let st = unsafe { lpr_recognize(ptr::null(), rgb.as_ptr(), 94, 24, ptr::null(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, LprStatus::NullPointer);
    unsafe {
        lpr_recognizer_free(rec);
        lpr_recognizer_free(ptr::null_mut());
        lpr_string_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lprnet.h")).unwrap();
    for name in [
        "LprRecognizer",
        "lpr_recognizer_open",
        "lpr_recognizer_free",
        "lpr_recognize",
        "lpr_probabilities",
        "lpr_flops",
        "lpr_string_free",
        "lpr_last_error",
        "LPR_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    let version = unsafe { CStr::from_ptr(lpr_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
