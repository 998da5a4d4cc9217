//! File formats: the `LPRW` weight container, binary PPM images, dataset
//! directories and model configs.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CharSet, CharSetSource, Model, ModelConfig, NetworkSpec};
use crate::synth::PlateSample;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"LPRW";
const VERSION: u32 = 1;
const MAX_DIMS: usize = 4;

/// One named tensor of a [`WeightStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name too long".into()));
        }
        if dims.len() > MAX_DIMS || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Format(format!("tensor {name:?} has unsupported dims {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "tensor {name:?}: {} values for dims {dims:?}",
                data.len()
            )));
        }
        self.entries.push(WeightEntry { name, dims, data });
        Ok(())
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every parameter and running statistic of `model`.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut store = WeightStore::new();
        for p in model.params() {
            store
                .push(p.name, p.dims, p.data.to_vec())
                .expect("model tensors are uniquely named");
        }
        store
    }

    /// Overwrites the tensors of `model`; names, order and dims must match.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<()> {
        let views: Vec<_> = self
            .entries
            .iter()
            .map(|e| crate::model::ParamView {
                name: e.name.clone(),
                dims: e.dims.clone(),
                trainable: true,
                data: &e.data[..],
            })
            .collect();
        model.load_params(&views)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("weight file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("weight file checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            if ndim > MAX_DIMS {
                return Err(Error::Format(format!("tensor {name:?} has {ndim} dims")));
            }
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some())
                .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            store.push(name, dims, data)?;
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        WeightStore::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("weight file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

/// Encodes a `1 x 3 x H x W` image in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::Shape(format!("PPM needs a single RGB image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PPM header truncated".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format("bad number in PPM header".into()))
}

/// Decodes a binary (P6, maxval 255) PPM to a `1 x 3 x H x W` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("only binary P6 PPM images are supported".into()));
    }
    let w = ppm_number(bytes, &mut pos)?;
    let h = ppm_number(bytes, &mut pos)?;
    let maxval = ppm_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .filter(|&n| n <= 1 << 30)
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("PPM raster truncated".into()))?;
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.set(0, c, i / w, i % w, v as f32 / 255.0);
        }
    }
    Ok(t)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

/// Writes `images/NNNNNN.ppm` and `labels.tsv` (index, label) under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[PlateSample], charset: &CharSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut tsv = fs::File::create(dir.join("labels.tsv"))?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(dir.join("images").join(format!("{i:06}.ppm")), &s.image)?;
        writeln!(tsv, "{i:06}\t{}", charset.decode(&s.label))?;
    }
    Ok(())
}

/// Reads back a directory written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>, charset: &CharSet) -> Result<Vec<PlateSample>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("labels.tsv"))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("labels.tsv line {}: expected index<TAB>label", n + 1)))?;
        if !seen.insert(idx.to_string()) {
            return Err(Error::Format(format!("labels.tsv: duplicate index {idx}")));
        }
        out.push(PlateSample {
            image: read_ppm(dir.join("images").join(format!("{idx}.ppm")))?,
            label: charset.encode(label)?,
            augment: None,
        });
    }
    Ok(out)
}

/// Loads a model config and resolves its character set, relative paths
/// being taken from the config file's directory.
pub fn load_spec(config_path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = config_path.as_ref();
    let config = ModelConfig::parse(&fs::read_to_string(path)?)?;
    spec_from_config(config, path.parent())
}

pub fn spec_from_config(config: ModelConfig, base: Option<&Path>) -> Result<NetworkSpec> {
    let charset = match &config.charset {
        CharSetSource::Chinese => CharSet::chinese(),
        CharSetSource::Digits => CharSet::digits(),
        CharSetSource::File(p) => {
            let full = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            };
            CharSet::parse(&fs::read_to_string(full)?)?
        }
    };
    NetworkSpec::lprnet(config, charset)
}
