//! Connectionist temporal classification: loss with exact gradients, greedy
//! decoding and prefix beam search.
//!
//! Throughout, a sequence has `T` steps over `C` classes and the blank is the
//! last class, `C - 1`. All recursions run in log space in `f64`.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Matrix, Real};

/// Class indices of a decoded or target sequence (never contains the blank).
pub type Label = Vec<usize>;

/// Per-step class distributions: `steps` rows of `classes` probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSequence {
    steps: usize,
    classes: usize,
    data: Vec<f64>,
}

const ROW_TOLERANCE: f64 = 1e-6;

impl ProbSequence {
    /// Checks that every row is a distribution (sums to 1 within 1e-6).
    pub fn new(steps: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return arg_err("a probability sequence needs at least one symbol and the blank");
        }
        if steps.checked_mul(classes) != Some(data.len()) {
            return shape_err(format!("{} values for {steps}x{classes} probabilities", data.len()));
        }
        for (t, row) in data.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return arg_err(format!("row {t} is not a probability distribution"));
            }
        }
        Ok(ProbSequence {
            steps,
            classes,
            data,
        })
    }

    /// Row-wise softmax of `steps x classes` logits.
    pub fn from_logits<F: Real>(logits: &Matrix<F>) -> Self {
        let classes = logits.cols();
        let mut data = Vec::with_capacity(logits.rows() * classes);
        for t in 0..logits.rows() {
            let row: Vec<f64> = logits.row(t).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        ProbSequence {
            steps: logits.rows(),
            classes,
            data,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn log_probs(&self) -> Vec<f64> {
        self.data.iter().map(|p| p.ln()).collect()
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Label {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Number of adjacent equal pairs; each forces an extra blank step.
fn repeats(label: &[usize]) -> usize {
    label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label(label: &[usize], steps: usize, classes: usize) -> Result<()> {
    let blank = classes - 1;
    if let Some(&bad) = label.iter().find(|&&k| k >= blank) {
        return arg_err(format!("label class {bad} is the blank or out of range (blank = {blank})"));
    }
    let r = repeats(label);
    if label.len() + r > steps {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: r,
            steps,
        });
    }
    Ok(())
}

/// Forward variables over the blank-extended label: `T x (2L + 1)` log
/// probabilities, `-inf` for unreachable states.
#[derive(Clone, Debug)]
pub struct CtcAlpha {
    pub steps: usize,
    pub states: usize,
    pub log_alpha: Vec<f64>,
}

fn extended(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &k in label {
        ext.push(k);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_table(lp: &[f64], steps: usize, classes: usize, ext: &[usize]) -> CtcAlpha {
    let blank = classes - 1;
    let n = ext.len();
    let mut a = vec![f64::NEG_INFINITY; steps * n];
    if steps > 0 {
        a[0] = lp[blank];
        if n > 1 {
            a[1] = lp[ext[1]];
        }
    }
    for t in 1..steps {
        let (prev, cur) = a.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..n {
            let mut v = prev[s];
            if s >= 1 {
                v = lse2(v, prev[s - 1]);
            }
            if can_skip(ext, s, blank) {
                v = lse2(v, prev[s - 2]);
            }
            cur[s] = v + row[ext[s]];
        }
    }
    CtcAlpha {
        steps,
        states: n,
        log_alpha: a,
    }
}

fn total_log_prob(alpha: &CtcAlpha) -> f64 {
    let n = alpha.states;
    let last = &alpha.log_alpha[(alpha.steps - 1) * n..];
    if n == 1 {
        last[0]
    } else {
        lse2(last[n - 1], last[n - 2])
    }
}

/// Loss and its gradient with respect to the pre-softmax logits.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub loss: f64,
    /// `steps x classes`, row-major.
    pub grad: Vec<f64>,
}

fn ctc_from_log_probs(lp: &[f64], steps: usize, classes: usize, label: &[usize]) -> Result<CtcLoss> {
    check_label(label, steps, classes)?;
    let blank = classes - 1;
    let ext = extended(label, blank);
    let n = ext.len();
    let alpha = forward_table(lp, steps, classes, &ext);
    let log_p = total_log_prob(&alpha);
    if !log_p.is_finite() {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: repeats(label),
            steps,
        });
    }
    // beta excludes the emission at its own step
    let mut beta = vec![f64::NEG_INFINITY; steps * n];
    beta[(steps - 1) * n + n - 1] = 0.0;
    if n > 1 {
        beta[(steps - 1) * n + n - 2] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        let next_row = &lp[(t + 1) * classes..(t + 2) * classes];
        for s in 0..n {
            let nb = &beta[(t + 1) * n..(t + 2) * n];
            let mut v = nb[s] + next_row[ext[s]];
            if s + 1 < n {
                v = lse2(v, nb[s + 1] + next_row[ext[s + 1]]);
            }
            if s + 2 < n && can_skip(&ext, s + 2, blank) {
                v = lse2(v, nb[s + 2] + next_row[ext[s + 2]]);
            }
            beta[t * n + s] = v;
        }
    }
    let mut grad = vec![0.0; steps * classes];
    for t in 0..steps {
        let mut occ = vec![f64::NEG_INFINITY; classes];
        for s in 0..n {
            let v = alpha.log_alpha[t * n + s] + beta[t * n + s];
            occ[ext[s]] = lse2(occ[ext[s]], v);
        }
        for k in 0..classes {
            let y = lp[t * classes + k].exp();
            grad[t * classes + k] = y - (occ[k] - log_p).exp();
        }
    }
    Ok(CtcLoss { loss: -log_p, grad })
}

/// `-ln p(label | probs)` and its gradient with respect to the logits that
/// produced `probs` through a softmax.
pub fn ctc_loss(probs: &ProbSequence, label: &[usize]) -> Result<CtcLoss> {
    ctc_from_log_probs(&probs.log_probs(), probs.steps, probs.classes, label)
}

/// As [`ctc_loss`], starting from raw `steps x classes` logits.
pub fn ctc_loss_logits(logits: &Matrix<f64>, label: &[usize]) -> Result<CtcLoss> {
    let lp = crate::layers::log_softmax_rows(logits);
    if logits.cols() < 2 {
        return arg_err("logits need at least one symbol and the blank");
    }
    ctc_from_log_probs(lp.data(), logits.rows(), logits.cols(), label)
}

/// Forward-variable table for `label`.
pub fn ctc_alpha(probs: &ProbSequence, label: &[usize]) -> Result<CtcAlpha> {
    check_label(label, probs.steps, probs.classes)?;
    Ok(forward_table(&probs.log_probs(), probs.steps, probs.classes, &extended(label, probs.blank())))
}

/// Total probability of `label`: the sum over every path collapsing to it.
/// Infeasible labels have probability zero.
pub fn label_probability(probs: &ProbSequence, label: &[usize]) -> Result<f64> {
    match ctc_alpha(probs, label) {
        Ok(alpha) => Ok(total_log_prob(&alpha).exp()),
        Err(Error::InfeasibleLabel { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Per-step argmax (ties go to the lower class), then collapse.
pub fn greedy_decode(probs: &ProbSequence) -> Label {
    greedy_decode_with_prob(probs).0
}

/// Greedy decoding plus the probability of the argmax path.
pub fn greedy_decode_with_prob(probs: &ProbSequence) -> (Label, f64) {
    let mut path = Vec::with_capacity(probs.steps);
    let mut log_p = 0.0;
    for t in 0..probs.steps {
        let row = probs.row(t);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        log_p += row[best].ln();
        path.push(best);
    }
    (collapse(&path, probs.blank()), log_p.exp())
}

/// A beam-search prefix with its probability mass split by whether the
/// contributing paths end in a blank.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub prefix: Label,
    pub p_blank: f64,
    pub p_nonblank: f64,
}

impl Hypothesis {
    pub fn total(&self) -> f64 {
        self.p_blank + self.p_nonblank
    }
}

pub const DEFAULT_BEAM_WIDTH: usize = 25;

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    nonblank: f64,
}

impl Mass {
    const ZERO: Mass = Mass {
        blank: f64::NEG_INFINITY,
        nonblank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        lse2(self.blank, self.nonblank)
    }
}

fn rank(a: &(Label, Mass), b: &(Label, Mass)) -> Ordering {
    b.1.total()
        .partial_cmp(&a.1.total())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search. Returns up to `beam_width` hypotheses ranked by total
/// probability (ties broken by label order).
pub fn beam_search_hypotheses(probs: &ProbSequence, beam_width: usize) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return arg_err("beam width must be at least 1");
    }
    let blank = probs.blank();
    let lp = probs.log_probs();
    let mut beams: Vec<(Label, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            nonblank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..probs.steps {
        let row = &lp[t * probs.classes..(t + 1) * probs.classes];
        let mut next: HashMap<Label, Mass> = HashMap::with_capacity(beams.len() * probs.classes);
        for (prefix, mass) in &beams {
            let total = mass.total();
            let last = prefix.last().copied();
            for (k, &p) in row.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                if k == blank {
                    let e = next.entry(prefix.clone()).or_insert(Mass::ZERO);
                    e.blank = lse2(e.blank, total + p);
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(k);
                if Some(k) == last {
                    // a repeat only extends the prefix across a blank
                    let e = next.entry(extended).or_insert(Mass::ZERO);
                    e.nonblank = lse2(e.nonblank, mass.blank + p);
                    let e = next.entry(prefix.clone()).or_insert(Mass::ZERO);
                    e.nonblank = lse2(e.nonblank, mass.nonblank + p);
                } else {
                    let e = next.entry(extended).or_insert(Mass::ZERO);
                    e.nonblank = lse2(e.nonblank, total + p);
                }
            }
        }
        let mut ranked: Vec<(Label, Mass)> = next.into_iter().collect();
        ranked.sort_by(rank);
        ranked.truncate(beam_width);
        beams = ranked;
    }
    beams.sort_by(rank);
    Ok(beams
        .into_iter()
        .map(|(prefix, m)| Hypothesis {
            prefix,
            p_blank: m.blank.exp(),
            p_nonblank: m.nonblank.exp(),
        })
        .collect())
}

/// Prefix beam search returning `(label, total probability)` pairs, best first.
pub fn beam_search(probs: &ProbSequence, beam_width: usize) -> Result<Vec<(Label, f64)>> {
    Ok(beam_search_hypotheses(probs, beam_width)?
        .into_iter()
        .map(|h| {
            let p = h.total();
            (h.prefix, p)
        })
        .collect())
}
