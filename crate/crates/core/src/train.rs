//! Training: Adam with a step learning-rate schedule, gradient noise, a
//! delayed spatial transformer, evaluation and the toggle ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ctc::{beam_search, ctc_loss_logits, greedy_decode, greedy_decode_with_prob, Label, ProbSequence};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{CharSet, ForwardOptions, Gradients, Model, ModelConfig, NetworkSpec};
use crate::postfilter::{post_filter, TemplateSet};
use crate::synth::{augment, make_dataset, stack_images, AugmentConfig, DatasetConfig, PlateSample};
use crate::tensor::{Matrix, Real, Tensor};

/// Iteration counts of the full-length schedule; shorter runs keep their
/// proportions.
pub const FULL_ITERATIONS: usize = 250_000;
pub const FULL_LR_DROP_EVERY: usize = 100_000;
pub const FULL_STN_ENABLE_AT: usize = 5_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian noise added to every gradient
    /// element.
    pub grad_noise: f64,
    /// The learning rate is divided by `lr_drop_factor` every this many
    /// iterations.
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub iterations: usize,
    /// Until this iteration the spatial transformer is bypassed.
    pub stn_enable_at: usize,
    /// Per-sample random affine augmentation, if any.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Measure validation accuracy every this many iterations (0: only at
    /// the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            grad_noise: 1e-3,
            lr_drop_every: FULL_LR_DROP_EVERY,
            lr_drop_factor: 10.0,
            iterations: FULL_ITERATIONS,
            stn_enable_at: FULL_STN_ENABLE_AT,
            augment: Some(AugmentConfig::default()),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// The default schedule compressed to `iterations`, keeping the learning
    /// rate drops and the transformer delay at the same relative positions.
    pub fn scaled(iterations: usize) -> Self {
        let scale = |n: usize| ((n as f64 * iterations as f64 / FULL_ITERATIONS as f64).round() as usize).max(1);
        TrainConfig {
            iterations,
            lr_drop_every: scale(FULL_LR_DROP_EVERY),
            stn_enable_at: scale(FULL_STN_ENABLE_AT).min(iterations),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.iterations == 0 || self.lr_drop_every == 0 {
            return bad("batch size, iterations and lr_drop_every must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_drop_factor > 0.0) || !(self.grad_noise >= 0.0) {
            return bad("learning rate and drop factor must be positive, noise non-negative");
        }
        if self.stn_enable_at > self.iterations {
            return bad("stn_enable_at exceeds the number of iterations");
        }
        Ok(())
    }

    /// Learning rate used at (zero-based) iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.learning_rate / self.lr_drop_factor.powi((iter / self.lr_drop_every) as i32)
    }
}

/// Adam moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Adam with per-tensor step counts, so tensors that start receiving
/// gradients late get their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update of `params` in place.
    pub fn update<F: Real>(&self, params: &mut [F], grad: &[F], moments: &mut Moments, lr: f64) {
        moments.step += 1;
        let t = moments.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i].to_f64().unwrap_or(f64::NAN);
            let m = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
            moments.m[i] = m;
            moments.v[i] = v;
            let delta = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            let p = params[i].to_f64().unwrap_or(f64::NAN) - delta;
            params[i] = F::from_f64(p).unwrap_or_else(F::nan);
        }
    }

    /// Updates every trainable tensor of `model` that has a gradient.
    pub fn step<F: Real>(&mut self, model: &mut Model<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        for slot in model.params_mut() {
            if !slot.trainable {
                continue;
            }
            let Some(g) = grads.get(&slot.name) else { continue };
            if g.len() != slot.data.len() {
                return Err(Error::Shape(format!("gradient for {} has the wrong length", slot.name)));
            }
            let mut moments = self.state.remove(&slot.name).unwrap_or_else(|| Moments::new(g.len()));
            self.update(slot.data, g, &mut moments, lr);
            self.state.insert(slot.name.clone(), moments);
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,lr,loss,val_accuracy\n");
        for r in &self.records {
            let acc = r.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{:.6},{}", r.iteration, r.lr, r.loss, acc);
        }
        s
    }

    /// Last measured validation accuracy.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_accuracy)
    }
}

/// Notifications emitted while training.
pub enum TrainEvent<'a> {
    Progress(&'a LogRecord),
    Checkpoint { iteration: usize, model: &'a Model<f32> },
}

/// How probability sequences become labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Greedy,
    /// Prefix beam search, then template post-filtering when templates are
    /// given.
    Beam {
        width: usize,
        templates: Option<TemplateSet>,
    },
}

/// Decodes one sequence; returns the label and its probability under the
/// decoder (the argmax-path probability for greedy decoding).
pub fn decode(probs: &ProbSequence, decoder: &Decoder, model_charset: &crate::model::CharSet) -> Result<(Label, f64)> {
    match decoder {
        Decoder::Greedy => Ok(greedy_decode_with_prob(probs)),
        Decoder::Beam { width, templates } => {
            let cands = beam_search(probs, *width)?;
            match templates {
                Some(ts) => {
                    let label = post_filter(&cands, ts, model_charset)?;
                    let p = cands.iter().find(|(l, _)| *l == label).map_or(0.0, |c| c.1);
                    Ok((label, p))
                }
                None => Ok(cands.into_iter().next().unwrap_or_default()),
            }
        }
    }
}

const EVAL_CHUNK: usize = 64;

/// Decoded labels of `samples` in inference mode.
pub fn predict(model: &Model<f32>, samples: &[PlateSample], decoder: &Decoder) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&PlateSample> = chunk.iter().collect();
        for probs in model.forward(&stack_images(&refs)?, Mode::Infer)? {
            out.push(match decoder {
                Decoder::Greedy => greedy_decode(&probs),
                _ => decode(&probs, decoder, model.charset())?.0,
            });
        }
    }
    Ok(out)
}

/// Fraction of samples whose decoded label equals the ground truth exactly.
pub fn evaluate(model: &Model<f32>, samples: &[PlateSample], decoder: &Decoder) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let predicted = predict(model, samples, decoder)?;
    let hits = predicted.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Mean CTC loss of a batch and its gradient with respect to every logit.
pub fn batch_ctc<F: Real>(logits: &[Matrix<F>], labels: &[&Label]) -> Result<(f64, Vec<Matrix<F>>)> {
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, label) in logits.iter().zip(labels) {
        let data: Vec<f64> = l.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let ctc = ctc_loss_logits(&Matrix::from_vec(l.rows(), l.cols(), data)?, label)?;
        total += ctc.loss;
        let g = ctc.grad.iter().map(|&v| F::from_f64(v / n).unwrap_or_else(F::nan)).collect();
        grads.push(Matrix::from_vec(l.rows(), l.cols(), g)?);
    }
    Ok((total / n, grads))
}

fn iteration_seed(seed: u64, iter: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (iter as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Trains `model` in place on `train_set`, measuring greedy exact-match
/// accuracy on `val_set`. `on_event` sees progress records and checkpoints;
/// returning an error from it stops training.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[PlateSample],
    val_set: &[PlateSample],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5_a5a5);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a_5a5a);
    let noise = Normal::new(0.0, cfg.grad_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut adam = Adam::default();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for iter in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let augmented: Vec<PlateSample>;
        let images: Tensor<f32> = match &cfg.augment {
            Some(a) => {
                augmented = batch.iter().map(|s| augment(s, a, &mut aug_rng)).collect();
                stack_images(&augmented.iter().collect::<Vec<_>>())?
            }
            None => stack_images(&batch)?,
        };
        let opts = ForwardOptions {
            mode: Mode::Train,
            stn_active: iter >= cfg.stn_enable_at,
            seed: iteration_seed(cfg.seed, iter),
        };
        let (logits, cache) = model.logits(&images, &opts)?;
        let labels: Vec<&Label> = batch.iter().map(|s| &s.label).collect();
        let (loss, grad_logits) = batch_ctc(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss });
        }
        let mut grads = model.backward(&cache, &grad_logits)?;
        model.commit_running_stats(&cache);
        if cfg.grad_noise > 0.0 {
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v += noise.sample(&mut noise_rng) as f32;
                }
            }
        }
        let lr = cfg.lr_at(iter);
        adam.step(model, &grads, lr)?;
        let done = iter + 1;
        let eval_now = done == cfg.iterations || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let val_accuracy = if eval_now && !val_set.is_empty() {
            Some(evaluate(model, val_set, &Decoder::Greedy)?)
        } else {
            None
        };
        let record = LogRecord {
            iteration: done,
            lr,
            loss,
            val_accuracy,
        };
        on_event(TrainEvent::Progress(&record))?;
        log.records.push(record);
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            on_event(TrainEvent::Checkpoint {
                iteration: done,
                model,
            })?;
        }
    }
    Ok(log)
}

/// Settings for the toggle ablation: each seed trains a baseline, a run
/// without global context and a run without augmentation.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub charset: CharSet,
    pub templates: TemplateSet,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub beam_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub greedy_accuracy: f64,
    pub beam_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

pub const ABLATION_VARIANTS: [&str; 3] = ["baseline", "no_global_context", "no_augmentation"];

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationReport {
    /// Median greedy and beam accuracy of one variant across seeds.
    pub fn median(&self, variant: &str) -> Option<(f64, f64)> {
        let runs: Vec<&AblationRun> = self.runs.iter().filter(|r| r.variant == variant).collect();
        Some((
            median(runs.iter().map(|r| r.greedy_accuracy).collect())?,
            median(runs.iter().map(|r| r.beam_accuracy).collect())?,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,greedy_accuracy,beam_postfilter_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", r.variant, r.seed, r.greedy_accuracy, r.beam_accuracy);
        }
        for v in ABLATION_VARIANTS {
            if let Some((g, b)) = self.median(v) {
                let _ = writeln!(s, "{v},median,{g:.6},{b:.6}");
            }
        }
        s
    }
}

/// Runs every variant for every seed. Each seed draws its own dataset,
/// shared by the variants so that they are compared on the same data.
pub fn run_ablation(cfg: &AblationConfig, on_run: &mut dyn FnMut(&AblationRun)) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        let charset = &cfg.charset;
        let data_cfg = DatasetConfig {
            seed: cfg.dataset.seed ^ seed.wrapping_mul(0x2545_f491_4f6c_dd1d),
            ..cfg.dataset.clone()
        };
        let (train_set, val_set) = make_dataset(&data_cfg, &cfg.templates, charset)?;
        for variant in ABLATION_VARIANTS {
            let mut model_cfg = cfg.model.clone();
            let mut train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            match variant {
                "no_global_context" => model_cfg.use_global_context = false,
                "no_augmentation" => train_cfg.augment = None,
                _ => {}
            }
            let spec = NetworkSpec::lprnet(model_cfg, charset.clone())?;
            let mut model = Model::<f32>::build(spec, seed)?;
            train(&mut model, &train_set, &val_set, &train_cfg, &mut |_| Ok(()))?;
            let run = AblationRun {
                variant: variant.to_string(),
                seed,
                greedy_accuracy: evaluate(&model, &val_set, &Decoder::Greedy)?,
                beam_accuracy: evaluate(
                    &model,
                    &val_set,
                    &Decoder::Beam {
                        width: cfg.beam_width,
                        templates: Some(cfg.templates.clone()),
                    },
                )?,
            };
            on_run(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}
