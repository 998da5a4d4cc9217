//! Synthetic plate images: a dot-matrix glyph renderer, random affine
//! augmentation and labelled dataset generation.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::Label;
use crate::error::{Error, Result};
use crate::model::{CharSet, INPUT_DIMS};
use crate::postfilter::TemplateSet;
use crate::tensor::{Shape, Tensor};

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

/// 5x7 dot-matrix font; each row is 5 bits, most significant bit leftmost.
const FONT: [(char, [u8; GLYPH_ROWS]); 36] = [
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
];

/// A 5x7 binary bitmap.
pub type Glyph = [u8; GLYPH_ROWS];

fn font_glyph(symbol: &str) -> Option<Glyph> {
    let mut chars = symbol.chars();
    let c = chars.next()?;
    if chars.next().is_some() {
        return None;
    }
    FONT.iter().find(|(f, _)| *f == c).map(|(_, g)| *g)
}

fn symbol_seed(symbol: &str) -> u64 {
    symbol
        .bytes()
        .fold(0x9e37_79b9_7f4a_7c15, |h: u64, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One bitmap per symbol of a character set. Symbols outside the built-in
/// font (province logograms, custom symbols) get random placeholder
/// bitmaps seeded by the symbol itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphAtlas {
    glyphs: Vec<Glyph>,
}

impl GlyphAtlas {
    pub fn new(charset: &CharSet) -> Self {
        let mut glyphs: Vec<Option<Glyph>> = charset.symbols().iter().map(|s| font_glyph(s)).collect();
        let mut taken: HashSet<Glyph> = glyphs.iter().flatten().copied().collect();
        for (i, slot) in glyphs.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(symbol_seed(&charset.symbols()[i]));
            let glyph = loop {
                let mut g = [0u8; GLYPH_ROWS];
                for row in &mut g {
                    *row = rng.random_range(0..32u8);
                }
                // placeholders get a solid top bar so they read as one block
                g[0] = 0b11111;
                let ink = g.iter().map(|r| r.count_ones()).sum::<u32>();
                if (12..=26).contains(&ink) && taken.insert(g) {
                    break g;
                }
            };
            *slot = Some(glyph);
        }
        GlyphAtlas {
            glyphs: glyphs.into_iter().map(|g| g.expect("every slot filled")).collect(),
        }
    }

    pub fn glyph(&self, class: usize) -> Option<&Glyph> {
        self.glyphs.get(class)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

/// Affine augmentation actually applied to a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shift: (f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: 1.0,
            shift: (0.0, 0.0),
        }
    }
}

/// Ranges the augmentation draws from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 5.0,
            scale: (0.9, 1.1),
            max_shift: 2.0,
        }
    }
}

/// Rendering options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Maximum random offset, in pixels, of each glyph from its slot.
    pub jitter: i32,
    /// Whole-plate misalignment, as left by an imprecise plate detector.
    pub pose: Option<AugmentConfig>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            noise: 0.03,
            jitter: 1,
            pose: None,
        }
    }
}

/// A rendered plate: image `1 x 3 x 24 x 94` in `[0, 1]` and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateSample {
    pub image: Tensor<f32>,
    pub label: Label,
    pub augment: Option<AugmentParams>,
}

/// Background and ink colours of common plate types.
const SCHEMES: [([f64; 3], [f64; 3]); 4] = [
    ([0.08, 0.22, 0.72], [0.95, 0.95, 0.95]),
    ([0.92, 0.76, 0.12], [0.06, 0.06, 0.06]),
    ([0.45, 0.82, 0.45], [0.06, 0.06, 0.06]),
    ([0.93, 0.93, 0.93], [0.06, 0.06, 0.06]),
];

/// Draws `label` onto a plate. The result depends only on the label and
/// `style_seed`.
pub fn render(label: &[usize], atlas: &GlyphAtlas, style_seed: u64, cfg: &RenderConfig) -> Result<PlateSample> {
    let (_, h, w) = INPUT_DIMS;
    let glyphs = label
        .iter()
        .map(|&k| {
            atlas
                .glyph(k)
                .ok_or_else(|| Error::InvalidArgument(format!("class {k} has no glyph")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let (bg, ink) = SCHEMES[rng.random_range(0..SCHEMES.len())];
    let tint = |c: [f64; 3], rng: &mut ChaCha8Rng| c.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    let bg = tint(bg, &mut rng);
    let ink = tint(ink, &mut rng);
    // left-to-right illumination falloff
    let light = (rng.random_range(0.85..1.0), rng.random_range(0.85..1.0));
    let mut mask = vec![false; h * w];
    let margin = 4usize;
    let n = glyphs.len().max(1);
    let cell = (w - 2 * margin) as f64 / n as f64;
    let sx = if cell >= 11.0 { 2 } else { 1 };
    let (gw, gh) = (GLYPH_COLS * sx, GLYPH_ROWS * 2);
    for (i, g) in glyphs.iter().enumerate() {
        let j = cfg.jitter;
        let (dx, dy) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        let x0 = (margin as f64 + i as f64 * cell + (cell - gw as f64) / 2.0).round() as i32 + dx;
        let y0 = ((h - gh) / 2) as i32 + dy;
        for (r, bits) in g.iter().enumerate() {
            for c in 0..GLYPH_COLS {
                if bits >> (GLYPH_COLS - 1 - c) & 1 == 0 {
                    continue;
                }
                for yy in 0..2 {
                    for xx in 0..sx {
                        let y = y0 + (2 * r + yy) as i32;
                        let x = x0 + (sx * c + xx) as i32;
                        if (0..h as i32).contains(&y) && (0..w as i32).contains(&x) {
                            mask[y as usize * w + x as usize] = true;
                        }
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let base = if mask[y * w + x] { ink[c] } else { bg[c] };
                let t = x as f64 / (w - 1) as f64;
                let lit = base * (light.0 + (light.1 - light.0) * t);
                let v = if cfg.noise > 0.0 {
                    lit + noise.sample(&mut rng)
                } else {
                    lit
                };
                // quantized as if read from an 8-bit image
                let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                image.set(0, c, y, x, f32::from(q) / 255.0);
            }
        }
    }
    if let Some(pose) = &cfg.pose {
        let p = sample_augment(pose, &mut rng);
        image = apply_affine(&image, &p).map(|v| (v * 255.0).round() / 255.0);
    }
    Ok(PlateSample {
        image,
        label: label.to_vec(),
        augment: None,
    })
}

/// Warps `image` by rotation and scale about its centre followed by a
/// shift, sampling bilinearly with edge clamping.
pub fn apply_affine(image: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let s = image.shape();
    let (cx, cy) = ((s.w as f64 - 1.0) / 2.0, (s.h as f64 - 1.0) / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let mut out = Tensor::zeros(s);
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    for y in 0..s.h {
        for x in 0..s.w {
            // inverse map from output to source coordinates
            let u = (x as f64 - cx - p.shift.0) / p.scale;
            let v = (y as f64 - cy - p.shift.1) / p.scale;
            let sx = cos * u + sin * v + cx;
            let sy = -sin * u + cos * v + cy;
            let (fx, fy) = (sx.floor(), sy.floor());
            let (wx, wy) = (sx - fx, sy - fy);
            let (x0, y0) = (fx as isize, fy as isize);
            let (xa, xb) = (clamp(x0, s.w), clamp(x0 + 1, s.w));
            let (ya, yb) = (clamp(y0, s.h), clamp(y0 + 1, s.h));
            for n in 0..s.n {
                for c in 0..s.c {
                    let at = |yy, xx| image.at(n, c, yy, xx) as f64;
                    let val = (1.0 - wy) * ((1.0 - wx) * at(ya, xa) + wx * at(ya, xb))
                        + wy * ((1.0 - wx) * at(yb, xa) + wx * at(yb, xb));
                    out.set(n, c, y, x, val as f32);
                }
            }
        }
    }
    out
}

/// Draws augmentation parameters from `cfg`.
pub fn sample_augment<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let sym = |m: f64, rng: &mut R| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rotation_deg = sym(cfg.max_rotation_deg, rng);
    let scale = if cfg.scale.1 > cfg.scale.0 {
        rng.random_range(cfg.scale.0..=cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let shift = (sym(cfg.max_shift, rng), sym(cfg.max_shift, rng));
    AugmentParams {
        rotation_deg,
        scale,
        shift,
    }
}

/// Random affine copy of `sample`; the label is untouched.
pub fn augment<R: Rng>(sample: &PlateSample, cfg: &AugmentConfig, rng: &mut R) -> PlateSample {
    let p = sample_augment(cfg, rng);
    PlateSample {
        image: apply_affine(&sample.image, &p),
        label: sample.label.clone(),
        augment: Some(p),
    }
}

/// A label drawn uniformly: a random template, then for each token a
/// random symbol of the character set that fits it.
pub fn sample_label<R: Rng>(templates: &TemplateSet, charset: &CharSet, rng: &mut R) -> Result<Label> {
    let t = templates
        .templates()
        .choose(rng)
        .ok_or_else(|| Error::Config("empty template set".into()))?;
    t.tokens()
        .iter()
        .map(|tok| {
            let options: Vec<usize> = (0..charset.symbols().len())
                .filter(|&k| tok.accepts(&charset.symbols()[k]))
                .collect();
            options
                .choose(rng)
                .copied()
                .ok_or_else(|| Error::Config(format!("no symbol of the character set fits token {tok}")))
        })
        .collect()
}

/// Dataset generation settings.
#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub count: usize,
    /// Fraction of samples in the training subset.
    pub train_fraction: f64,
    pub seed: u64,
    pub render: RenderConfig,
}

/// `count` rendered plates with distinct labels where the label space
/// allows, split deterministically into training and validation subsets.
pub fn make_dataset(
    cfg: &DatasetConfig,
    templates: &TemplateSet,
    charset: &CharSet,
) -> Result<(Vec<PlateSample>, Vec<PlateSample>)> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} outside [0, 1]",
            cfg.train_fraction
        )));
    }
    let atlas = GlyphAtlas::new(charset);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::with_capacity(cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while labels.len() < cfg.count {
        let label = sample_label(templates, charset, &mut rng)?;
        attempts += 1;
        // once distinct labels become too hard to find, allow repeats
        if seen.insert(label.clone()) || attempts > 20 * cfg.count {
            labels.push(label);
        }
    }
    let n_train = (cfg.count as f64 * cfg.train_fraction).round() as usize;
    let samples = labels
        .iter()
        .map(|l| render(l, &atlas, rng.random(), &cfg.render))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = samples.into_iter();
    let train = samples.by_ref().take(n_train).collect();
    Ok((train, samples.collect()))
}

/// Stacks single-image samples into one batch tensor.
pub fn stack_images(samples: &[&PlateSample]) -> Result<Tensor<f32>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}
