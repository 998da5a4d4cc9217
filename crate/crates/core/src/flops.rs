//! Static operation counts for one forward pass of a single image.
//!
//! Convolutions and dense layers make up the headline total. Pooling, batch
//! norm, activations, sampling and reductions are counted at one operation
//! per output element in a separate auxiliary bucket.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model, NetworkSpec};
use crate::stn::{LOCNET_CHANNELS, LOCNET_HIDDEN};
use crate::tensor::{Real, Shape, Window};

/// How a multiply-accumulate is converted to floating-point operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    /// Two operations per multiply-accumulate, plus bias additions.
    TwoPerMac,
    /// One operation per multiply-accumulate.
    OnePerMac,
}

/// One row of the breakdown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: String,
    /// `conv` and `dense` rows are compute; everything else is auxiliary.
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub macs: u64,
    /// `2 * macs + bias additions` for compute rows, output elements for
    /// auxiliary rows.
    pub flops: u64,
}

impl LayerCount {
    pub fn is_compute(&self) -> bool {
        matches!(self.kind.as_str(), "conv" | "dense")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub records: Vec<LayerCount>,
}

impl OpCount {
    pub fn macs(&self) -> u64 {
        self.records.iter().filter(|r| r.is_compute()).map(|r| r.macs).sum()
    }

    /// Headline total over compute rows.
    pub fn total(&self, convention: Convention) -> u64 {
        let compute = self.records.iter().filter(|r| r.is_compute());
        match convention {
            Convention::TwoPerMac => compute.map(|r| r.flops).sum(),
            Convention::OnePerMac => compute.map(|r| r.macs).sum(),
        }
    }

    pub fn aux(&self) -> u64 {
        self.records.iter().filter(|r| !r.is_compute()).map(|r| r.flops).sum()
    }

    /// Totals of rows whose layer name is `prefix` or starts with `prefix.`.
    pub fn layer_total(&self, prefix: &str, convention: Convention) -> u64 {
        let dotted = format!("{prefix}.");
        OpCount {
            records: self
                .records
                .iter()
                .filter(|r| r.layer == prefix || r.layer.starts_with(&dotted))
                .cloned()
                .collect(),
        }
        .total(convention)
    }
}

struct Counter {
    records: Vec<LayerCount>,
}

impl Counter {
    fn conv(&mut self, layer: &str, c_in: usize, out: Shape, kernel: (usize, usize), bias: bool) {
        let macs = (kernel.0 * kernel.1 * c_in) as u64 * out.sample_len() as u64;
        let bias_adds = if bias { out.sample_len() as u64 } else { 0 };
        self.push(layer, "conv", c_in, out, macs, 2 * macs + bias_adds);
    }

    fn dense(&self, layer: &str, inputs: usize, outputs: usize) -> LayerCount {
        let macs = (inputs * outputs) as u64;
        LayerCount {
            layer: layer.to_string(),
            kind: "dense".into(),
            c_in: inputs,
            c_out: outputs,
            h_out: 1,
            w_out: 1,
            macs,
            flops: 2 * macs + outputs as u64,
        }
    }

    fn aux(&mut self, layer: &str, kind: &str, c_in: usize, out: Shape) {
        self.push(layer, kind, c_in, out, 0, out.sample_len() as u64);
    }

    fn push(&mut self, layer: &str, kind: &str, c_in: usize, out: Shape, macs: u64, flops: u64) {
        self.records.push(LayerCount {
            layer: layer.to_string(),
            kind: kind.to_string(),
            c_in,
            c_out: out.c,
            h_out: out.h,
            w_out: out.w,
            macs,
            flops,
        });
    }
}

fn locnet_counts(counter: &mut Counter, input: (usize, usize, usize)) -> Result<()> {
    let (c, h, w) = input;
    let (ph, pw) = Window::new((3, 3), (2, 2), (1, 1)).output_size(h, w)?;
    counter.aux("stn.pool", "avgpool", c, Shape::new(1, c, ph, pw));
    let mut flat = 0;
    for (name, stride) in [("stn.branch_a", 3), ("stn.branch_b", 5)] {
        let (oh, ow) = Window::new((5, 5), (stride, stride), (0, 0)).output_size(ph, pw)?;
        let out = Shape::new(1, LOCNET_CHANNELS, oh, ow);
        counter.conv(name, c, out, (5, 5), true);
        counter.aux(&format!("{name}.relu"), "relu", LOCNET_CHANNELS, out);
        flat += out.sample_len();
    }
    let fc1 = counter.dense("stn.fc1", flat, LOCNET_HIDDEN);
    counter.records.push(fc1);
    counter.aux("stn.fc1.tanh", "tanh", LOCNET_HIDDEN, Shape::new(1, LOCNET_HIDDEN, 1, 1));
    let fc2 = counter.dense("stn.fc2", LOCNET_HIDDEN, 6);
    counter.records.push(fc2);
    counter.aux("stn.fc2.tanh", "tanh", 6, Shape::new(1, 6, 1, 1));
    counter.aux("stn.sampler", "sampler", c, Shape::new(1, c, h, w));
    Ok(())
}

/// Counts for a network description; weights play no part.
pub fn count_spec(spec: &NetworkSpec) -> Result<OpCount> {
    let table = spec.resolve()?;
    let mut counter = Counter { records: Vec::new() };
    for r in &table {
        let name = r.name.as_str();
        let c_in = r.input.c;
        match &r.kind {
            LayerKind::Stn => locnet_counts(&mut counter, spec.input)?,
            LayerKind::Conv {
                kernel,
                bias,
                batch_norm,
                relu,
                ..
            } => {
                counter.conv(name, c_in, r.output, *kernel, *bias);
                if *batch_norm {
                    counter.aux(&format!("{name}.bn"), "batchnorm", r.output.c, r.output);
                }
                if *relu {
                    counter.aux(&format!("{name}.relu"), "relu", r.output.c, r.output);
                }
            }
            LayerKind::MaxPool { .. } => counter.aux(name, "maxpool", c_in, r.output),
            LayerKind::SmallBasicBlock { out } => {
                let mid = out / 4;
                let (h, w) = (r.output.h, r.output.w);
                let units = [
                    ("conv1", c_in, mid, (1, 1)),
                    ("conv2", mid, mid, (3, 1)),
                    ("conv3", mid, mid, (1, 3)),
                    ("conv4", mid, *out, (1, 1)),
                ];
                for (unit, ci, co, k) in units {
                    let unit_name = format!("{name}.{unit}");
                    let shape = Shape::new(1, co, h, w);
                    counter.conv(&unit_name, ci, shape, k, false);
                    counter.aux(&format!("{unit_name}.bn"), "batchnorm", co, shape);
                    counter.aux(&format!("{unit_name}.relu"), "relu", co, shape);
                }
            }
            // the identity at inference time
            LayerKind::Dropout { .. } => {}
            LayerKind::GlobalContext => {
                counter.aux(&format!("{name}.pool"), "avgpool", c_in, Shape::new(1, c_in, 1, 1));
                let dense = counter.dense(&format!("{name}.dense"), c_in, c_in);
                counter.records.push(dense);
            }
        }
    }
    Ok(OpCount {
        records: counter.records,
    })
}

pub fn count<F: Real>(model: &Model<F>) -> Result<OpCount> {
    count_spec(model.spec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

const CSV_HEADER: &str = "layer_id,kind,c_in,c_out,h_out,w_out,macs,flops";

fn giga(v: u64) -> f64 {
    v as f64 / 1e9
}

/// Per-layer breakdown followed by totals under both conventions.
pub fn report(counts: &OpCount, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for r in &counts.records {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.layer, r.kind, r.c_in, r.c_out, r.h_out, r.w_out, r.macs, r.flops
                );
            }
        }
        ReportFormat::Table => {
            let _ = writeln!(
                s,
                "{:<22} {:<10} {:>6} {:>6} {:>5} {:>5} {:>14} {:>14}",
                "layer", "kind", "c_in", "c_out", "h", "w", "macs", "flops"
            );
            for r in &counts.records {
                let _ = writeln!(
                    s,
                    "{:<22} {:<10} {:>6} {:>6} {:>5} {:>5} {:>14} {:>14}",
                    r.layer, r.kind, r.c_in, r.c_out, r.h_out, r.w_out, r.macs, r.flops
                );
            }
            let two = counts.total(Convention::TwoPerMac);
            let one = counts.total(Convention::OnePerMac);
            let _ = writeln!(s, "total (2 per MAC): {two} ({:.3} GFLOPs)", giga(two));
            let _ = writeln!(s, "total (1 per MAC): {one} ({:.3} GFLOPs)", giga(one));
            let _ = writeln!(s, "auxiliary (excluded): {}", counts.aux());
        }
    }
    s
}

/// Reads back the output of [`report`] in CSV form.
pub fn parse_csv(text: &str) -> Result<OpCount> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format("missing op-count CSV header".into())),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("row {}: expected 8 fields", i + 1)));
        }
        let num = |j: usize| -> Result<u64> {
            f[j].trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad number {:?}", i + 1, f[j])))
        };
        records.push(LayerCount {
            layer: f[0].to_string(),
            kind: f[1].to_string(),
            c_in: num(2)? as usize,
            c_out: num(3)? as usize,
            h_out: num(4)? as usize,
            w_out: num(5)? as usize,
            macs: num(6)?,
            flops: num(7)?,
        });
    }
    Ok(OpCount { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CharSet, LayerSpec, ModelConfig, Variant};

    fn lprnet(variant: Variant, stn: bool, gc: bool) -> NetworkSpec {
        let cfg = ModelConfig {
            variant,
            use_stn: stn,
            use_global_context: gc,
            ..ModelConfig::default()
        };
        NetworkSpec::lprnet(cfg, CharSet::chinese()).unwrap()
    }

    fn conv_layer(out: usize, kernel: (usize, usize), pad: (usize, usize), bias: bool) -> LayerKind {
        LayerKind::Conv {
            out,
            kernel,
            stride: (1, 1),
            pad,
            bias,
            batch_norm: false,
            relu: false,
        }
    }

    #[test]
    fn single_pointwise_conv_is_two_flops() {
        let spec = NetworkSpec::custom(
            (1, 1, 1),
            vec![LayerSpec::new("c", conv_layer(1, (1, 1), (0, 0), false))],
            CharSet::new(["a"]).unwrap(),
        );
        let c = count_spec(&spec).unwrap();
        assert_eq!(c.total(Convention::TwoPerMac), 2);
        assert_eq!(c.total(Convention::OnePerMac), 1);
        assert_eq!(report(&c, ReportFormat::Csv).lines().count(), 2);
    }

    #[test]
    fn conv_formula_against_loop_oracle() {
        let spec = NetworkSpec::custom(
            (3, 7, 9),
            vec![LayerSpec::new("c", conv_layer(5, (3, 2), (1, 0), true))],
            CharSet::new(["a", "b", "c", "d"]).unwrap(),
        );
        let c = count_spec(&spec).unwrap();
        // one multiply and one add per tap, one add per bias
        let (ho, wo) = (7, 8);
        let mut oracle = 0u64;
        for _ in 0..5 * ho * wo {
            for _ in 0..3 * 3 * 2 {
                oracle += 2;
            }
            oracle += 1;
        }
        assert_eq!(c.total(Convention::TwoPerMac), oracle);
    }

    #[test]
    fn block_is_sum_of_its_convolutions() {
        let c = count_spec(&lprnet(Variant::Basic, false, false)).unwrap();
        let units: u64 = (1..=4).map(|i| c.layer_total(&format!("sbb1.conv{i}"), Convention::TwoPerMac)).sum();
        assert_eq!(c.layer_total("sbb1", Convention::TwoPerMac), units);
        // 1x1 to 32, 3x1, 1x3, 1x1 to 128 over 24x94, input 64 channels
        let plane = 24 * 94;
        let expect = 2 * plane * (64 * 32 + 3 * 32 * 32 + 3 * 32 * 32 + 32 * 128);
        assert_eq!(units, expect as u64);
    }

    #[test]
    fn variant_ratio_and_scale() {
        let basic = count_spec(&lprnet(Variant::Basic, true, true)).unwrap();
        let reduced = count_spec(&lprnet(Variant::Reduced, true, true)).unwrap();
        for conv in [Convention::TwoPerMac, Convention::OnePerMac] {
            let ratio = reduced.total(conv) as f64 / basic.total(conv) as f64;
            assert!(ratio > 0.3 && ratio < 0.6, "{ratio}");
        }
        let g = giga(basic.total(Convention::TwoPerMac));
        assert!(g > 0.17 && g < 0.68, "{g}");
    }

    #[test]
    fn toggles_reduce_the_total() {
        let full = count_spec(&lprnet(Variant::Basic, true, true)).unwrap();
        let no_gc = count_spec(&lprnet(Variant::Basic, true, false)).unwrap();
        let no_stn = count_spec(&lprnet(Variant::Basic, false, true)).unwrap();
        assert!(no_gc.total(Convention::TwoPerMac) < full.total(Convention::TwoPerMac));
        assert!(no_stn.total(Convention::TwoPerMac) < full.total(Convention::TwoPerMac));
    }

    #[test]
    fn report_round_trip_and_edge_cases() {
        let c = count_spec(&lprnet(Variant::Reduced, true, true)).unwrap();
        let csv = report(&c, ReportFormat::Csv);
        assert_eq!(parse_csv(&csv).unwrap(), c);
        assert_eq!(report(&c, ReportFormat::Table), report(&c, ReportFormat::Table));
        let empty = OpCount::default();
        assert_eq!(empty.total(Convention::TwoPerMac), 0);
        assert_eq!(report(&empty, ReportFormat::Csv).lines().count(), 1);
        assert!(parse_csv("nope\n").is_err());
    }
}
