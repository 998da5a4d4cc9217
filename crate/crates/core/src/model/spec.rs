use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::PoolParams;
use crate::model::CharSet;
use crate::tensor::{Shape, Window};

/// Input image size: 3 x 24 x 94 (RGB, height 24, width 94).
pub const INPUT_DIMS: (usize, usize, usize) = (3, 24, 94);

/// Backbone variant. `Reduced` uses 2x2 strides in the downsampling pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Basic,
    Reduced,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "reduced" => Ok(Variant::Reduced),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Basic => "basic",
            Variant::Reduced => "reduced",
        })
    }
}

/// Where the character set comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CharSetSource {
    Chinese,
    Digits,
    File(PathBuf),
}

impl fmt::Display for CharSetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CharSetSource::Chinese => f.write_str("chinese"),
            CharSetSource::Digits => f.write_str("digits"),
            CharSetSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// The plain-text model configuration (`key = value` lines).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub use_stn: bool,
    pub use_global_context: bool,
    pub charset: CharSetSource,
    /// Divides every backbone channel count; 1 gives the full-size network.
    pub width_divisor: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Basic,
            use_stn: true,
            use_global_context: true,
            charset: CharSetSource::Chinese,
            width_divisor: 1,
            dropout: 0.5,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl ModelConfig {
    /// Parses `key = value` lines. Unset keys keep their defaults; `#`
    /// starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            match key {
                "variant" => cfg.variant = value.parse()?,
                "use_stn" => cfg.use_stn = parse_bool(key, value)?,
                "use_global_context" => cfg.use_global_context = parse_bool(key, value)?,
                "charset" => {
                    cfg.charset = match value {
                        "chinese" => CharSetSource::Chinese,
                        "digits" => CharSetSource::Digits,
                        path => CharSetSource::File(PathBuf::from(path)),
                    }
                }
                "width_divisor" => {
                    cfg.width_divisor = value
                        .parse()
                        .map_err(|_| Error::Config(format!("width_divisor: bad value {value:?}")))?
                }
                "dropout" => {
                    cfg.dropout = value
                        .parse()
                        .map_err(|_| Error::Config(format!("dropout: bad value {value:?}")))?
                }
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\nuse_stn = {}\nuse_global_context = {}\ncharset = {}\nwidth_divisor = {}\ndropout = {}\n",
            self.variant,
            self.use_stn,
            self.use_global_context,
            self.charset,
            self.width_divisor,
            self.dropout
        )
    }
}

/// One entry of a network description.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Localization network plus affine warp of the input image.
    Stn,
    Conv {
        out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        batch_norm: bool,
        relu: bool,
    },
    /// Max pooling down to `out` channels (channel groups are max-reduced too).
    MaxPool {
        out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    },
    /// 1x1 -> 3x1 -> 1x3 -> 1x1 factorized block, each convolution followed
    /// by batch norm and ReLU.
    SmallBasicBlock { out: usize },
    Dropout { ratio: f64 },
    /// Global average pool, dense layer, tile, concatenate: doubles channels.
    GlobalContext,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Stn => "stn",
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::SmallBasicBlock { .. } => "small_basic_block",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::GlobalContext => "global_context",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }
}

/// A layer with its per-image input and output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

/// Declarative network description; drives both execution and FLOP counting.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub config: ModelConfig,
    pub charset: CharSet,
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

fn conv(out: usize, kernel: (usize, usize), pad: (usize, usize)) -> LayerKind {
    LayerKind::Conv {
        out,
        kernel,
        stride: (1, 1),
        pad,
        bias: false,
        batch_norm: true,
        relu: true,
    }
}

fn pool(out: usize, stride: (usize, usize)) -> LayerKind {
    LayerKind::MaxPool {
        out,
        kernel: (3, 3),
        stride,
        pad: (1, 1),
    }
}

impl NetworkSpec {
    /// The recognition network described by `config`.
    pub fn lprnet(config: ModelConfig, charset: CharSet) -> Result<Self> {
        let d = config.width_divisor;
        if d == 0 || 64 % d != 0 || (128 / d) % 4 != 0 {
            return Err(Error::Config(format!(
                "width_divisor {d} must divide 64 and leave 128/d divisible by 4"
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let down = match config.variant {
            Variant::Basic => (2, 1),
            Variant::Reduced => (2, 2),
        };
        let mut layers = Vec::new();
        if config.use_stn {
            layers.push(LayerSpec::new("stn", LayerKind::Stn));
        }
        layers.extend([
            LayerSpec::new("conv1", conv(64 / d, (3, 3), (1, 1))),
            LayerSpec::new("pool1", pool(64 / d, (1, 1))),
            LayerSpec::new("sbb1", LayerKind::SmallBasicBlock { out: 128 / d }),
            LayerSpec::new("pool2", pool(64 / d, down)),
            LayerSpec::new("sbb2", LayerKind::SmallBasicBlock { out: 256 / d }),
            LayerSpec::new("sbb3", LayerKind::SmallBasicBlock { out: 256 / d }),
            LayerSpec::new("pool3", pool(64 / d, down)),
            LayerSpec::new("drop1", LayerKind::Dropout { ratio: config.dropout }),
            LayerSpec::new("conv2", conv(256 / d, (4, 1), (0, 0))),
            LayerSpec::new("drop2", LayerKind::Dropout { ratio: config.dropout }),
        ]);
        if config.use_global_context {
            layers.push(LayerSpec::new("gc", LayerKind::GlobalContext));
        }
        layers.push(LayerSpec::new(
            "head",
            LayerKind::Conv {
                out: charset.len(),
                kernel: (1, 13),
                stride: (1, 1),
                pad: (0, 6),
                bias: true,
                batch_norm: false,
                relu: false,
            },
        ));
        let spec = NetworkSpec {
            config,
            charset,
            input: INPUT_DIMS,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// An arbitrary layer chain (used for analysis and tests).
    pub fn custom(input: (usize, usize, usize), layers: Vec<LayerSpec>, charset: CharSet) -> Self {
        NetworkSpec {
            config: ModelConfig::default(),
            charset,
            input,
            layers,
        }
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(1, self.input.0, self.input.1, self.input.2)
    }

    /// Propagates shapes through the chain, rejecting inconsistent layers.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let mut shape = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut names = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name {:?}", layer.name)));
            }
            let ctx = |e: Error| Error::Config(format!("layer {:?}: {e}", layer.name));
            let next = match &layer.kind {
                LayerKind::Stn => {
                    if i != 0 {
                        return Err(Error::Config("the spatial transformer must be the first layer".into()));
                    }
                    shape
                }
                LayerKind::Conv {
                    out, kernel, stride, pad, ..
                } => {
                    if *out == 0 {
                        return Err(ctx(Error::Config("zero output channels".into())));
                    }
                    let (h, w) = Window::new(*kernel, *stride, *pad)
                        .output_size(shape.h, shape.w)
                        .map_err(ctx)?;
                    Shape::new(1, *out, h, w)
                }
                LayerKind::MaxPool {
                    out, kernel, stride, pad,
                } => PoolParams::new(Window::new(*kernel, *stride, *pad), *out)
                    .output_shape(shape)
                    .map_err(ctx)?,
                LayerKind::SmallBasicBlock { out } => {
                    if *out == 0 || out % 4 != 0 {
                        return Err(ctx(Error::Config(format!(
                            "block width {out} is not a positive multiple of 4"
                        ))));
                    }
                    shape.with_c(*out)
                }
                LayerKind::Dropout { ratio } => {
                    if !(0.0..1.0).contains(ratio) {
                        return Err(ctx(Error::Config(format!("dropout {ratio} outside [0, 1)"))));
                    }
                    shape
                }
                LayerKind::GlobalContext => shape.with_c(2 * shape.c),
            };
            out.push(ResolvedLayer {
                name: layer.name.clone(),
                kind: layer.kind.clone(),
                input: shape,
                output: next,
            });
            shape = next;
        }
        Ok(out)
    }

    /// Shape-checks the chain and that the head emits one channel per class.
    pub fn validate(&self) -> Result<Vec<ResolvedLayer>> {
        let resolved = self.resolve()?;
        let last = resolved
            .last()
            .map(|l| l.output)
            .unwrap_or_else(|| self.input_shape());
        if last.c != self.charset.len() {
            return Err(Error::Config(format!(
                "network emits {} channels but the character set has {} classes",
                last.c,
                self.charset.len()
            )));
        }
        Ok(resolved)
    }

    /// Length of the emitted probability sequence.
    pub fn sequence_len(&self) -> Result<usize> {
        Ok(self.resolve()?.last().map_or(self.input.2, |l| l.output.w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(variant: Variant, stn: bool, gc: bool) -> NetworkSpec {
        let cfg = ModelConfig {
            variant,
            use_stn: stn,
            use_global_context: gc,
            ..ModelConfig::default()
        };
        NetworkSpec::lprnet(cfg, CharSet::chinese()).unwrap()
    }

    #[test]
    fn basic_shape_table() {
        let r = spec(Variant::Basic, true, true).validate().unwrap();
        let table: Vec<(&str, (usize, usize, usize))> = r
            .iter()
            .map(|l| (l.name.as_str(), (l.output.c, l.output.h, l.output.w)))
            .collect();
        assert_eq!(
            table,
            vec![
                ("stn", (3, 24, 94)),
                ("conv1", (64, 24, 94)),
                ("pool1", (64, 24, 94)),
                ("sbb1", (128, 24, 94)),
                ("pool2", (64, 12, 94)),
                ("sbb2", (256, 12, 94)),
                ("sbb3", (256, 12, 94)),
                ("pool3", (64, 6, 94)),
                ("drop1", (64, 6, 94)),
                ("conv2", (256, 3, 94)),
                ("drop2", (256, 3, 94)),
                ("gc", (512, 3, 94)),
                ("head", (66, 3, 94)),
            ]
        );
    }

    #[test]
    fn reduced_sequence_length() {
        assert_eq!(spec(Variant::Reduced, false, true).sequence_len().unwrap(), 24);
        assert_eq!(spec(Variant::Basic, false, false).sequence_len().unwrap(), 94);
    }

    #[test]
    fn global_context_doubles_head_input() {
        let head_in = |gc| spec(Variant::Basic, false, gc).resolve().unwrap().last().unwrap().input.c;
        assert_eq!(head_in(false), 256);
        assert_eq!(head_in(true), 512);
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        let bad = NetworkSpec::custom(
            (3, 24, 94),
            vec![LayerSpec::new("p", pool(2, (1, 1)))],
            CharSet::digits(),
        );
        assert!(bad.resolve().is_err());
        let wrong_head = NetworkSpec::custom(
            (3, 24, 94),
            vec![LayerSpec::new("c", conv(5, (3, 3), (1, 1)))],
            CharSet::digits(),
        );
        assert!(wrong_head.resolve().is_ok());
        assert!(wrong_head.validate().is_err());
        let late_stn = NetworkSpec::custom(
            (3, 24, 94),
            vec![
                LayerSpec::new("c", conv(3, (3, 3), (1, 1))),
                LayerSpec::new("stn", LayerKind::Stn),
            ],
            CharSet::digits(),
        );
        assert!(late_stn.resolve().is_err());
        let cfg = ModelConfig {
            width_divisor: 3,
            ..ModelConfig::default()
        };
        assert!(NetworkSpec::lprnet(cfg, CharSet::chinese()).is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = ModelConfig {
            variant: Variant::Reduced,
            use_stn: false,
            use_global_context: true,
            charset: CharSetSource::File("chars.txt".into()),
            width_divisor: 8,
            dropout: 0.25,
        };
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let parsed = ModelConfig::parse("# toy\nvariant=reduced # inline\ncharset = digits\n").unwrap();
        assert_eq!(parsed.variant, Variant::Reduced);
        assert_eq!(parsed.charset, CharSetSource::Digits);
        assert!(ModelConfig::parse("colour = red").is_err());
        assert!(ModelConfig::parse("use_stn = maybe").is_err());
        assert!(ModelConfig::parse("variant").is_err());
    }
}
