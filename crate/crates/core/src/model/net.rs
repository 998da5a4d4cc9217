use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::ProbSequence;
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    batchnorm_apply, batchnorm_backward, conv::conv2d_backward_impl, conv2d_forward, dense_backward,
    dense_forward, dropout, dropout_backward, maxpool_backward, maxpool_forward, relu_backward,
    BatchNormCache, BatchNormParams, ConvParams, DenseParams, DropoutMask, Mode, PoolParams,
};
use crate::model::{CharSet, LayerKind, NetworkSpec, ResolvedLayer};
use crate::stn::{he_uniform, spatial_transform, spatial_transform_backward, AffineParams, LocNet, LocNetCache};
use crate::tensor::{relu, Matrix, Real, Shape, Tensor, Window};

/// Gradient of a scalar loss for every trainable parameter, keyed by name.
pub type Gradients<F> = BTreeMap<String, Vec<F>>;

/// Stable 64-bit hash of a layer name, mixed into seeds so that each layer
/// draws from its own random stream.
pub(crate) fn name_seed(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Convolution, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
struct ConvUnit<F> {
    conv: ConvParams<F>,
    bn: Option<BatchNormParams<F>>,
    relu: bool,
}

#[derive(Clone, Debug)]
struct UnitCache<F> {
    input: Tensor<F>,
    bn: Option<BatchNormCache<F>>,
    output: Tensor<F>,
}

impl<F: Real> ConvUnit<F> {
    #[allow(clippy::too_many_arguments)]
    fn init(
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        batch_norm: bool,
        relu: bool,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_seed(name));
        let weight = he_uniform(Shape::new(c_out, c_in, kernel.0, kernel.1), c_in * kernel.0 * kernel.1, &mut rng);
        Ok(ConvUnit {
            conv: ConvParams::new(weight, bias.then(|| vec![F::zero(); c_out]), stride, pad)?,
            bn: batch_norm.then(|| BatchNormParams::new(c_out)),
            relu,
        })
    }

    fn forward(&self, x: Tensor<F>, mode: Mode, keep: bool) -> Result<(Tensor<F>, Option<UnitCache<F>>)> {
        let mut y = conv2d_forward(&x, &self.conv)?;
        let mut bn_cache = None;
        if let Some(bn) = &self.bn {
            let (z, c) = batchnorm_apply(&y, bn, mode)?;
            y = z;
            bn_cache = Some(c);
        }
        if self.relu {
            y = relu(&y);
        }
        let cache = keep.then(|| UnitCache {
            input: x,
            bn: bn_cache,
            output: y.clone(),
        });
        Ok((y, cache))
    }

    fn backward(
        &self,
        name: &str,
        cache: &UnitCache<F>,
        grad: Tensor<F>,
        need_input_grad: bool,
        grads: &mut Gradients<F>,
    ) -> Result<Tensor<F>> {
        let mut g = grad;
        if self.relu {
            g = relu_backward(&cache.output, &g)?;
        }
        if let (Some(bn), Some(bc)) = (&self.bn, &cache.bn) {
            let bg = batchnorm_backward(bn, bc, &g)?;
            grads.insert(format!("{name}.bn.gamma"), bg.grad_gamma);
            grads.insert(format!("{name}.bn.beta"), bg.grad_beta);
            g = bg.grad_x;
        }
        let cg = conv2d_backward_impl(&cache.input, &self.conv, &g, need_input_grad)?;
        grads.insert(format!("{name}.weight"), cg.grad_w.into_vec());
        if let Some(b) = cg.grad_b {
            grads.insert(format!("{name}.bias"), b);
        }
        Ok(cg.grad_x)
    }

    fn commit(&mut self, cache: &UnitCache<F>) {
        if let (Some(bn), Some(bc)) = (&mut self.bn, &cache.bn) {
            bn.update_running(bc);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer<F> {
    Conv(ConvUnit<F>),
    MaxPool(PoolParams),
    Block(Vec<ConvUnit<F>>),
    Dropout(f64),
    GlobalContext(DenseParams<F>),
}

#[derive(Clone, Debug)]
enum LayerCache<F> {
    Conv(UnitCache<F>),
    MaxPool { input: Shape, argmax: Vec<usize> },
    Block(Vec<UnitCache<F>>),
    Dropout(Option<DropoutMask<F>>),
    GlobalContext { pooled: Matrix<F>, channels: usize },
}

#[derive(Clone, Debug)]
struct StnCache<F> {
    image: Tensor<F>,
    thetas: Vec<AffineParams<F>>,
    loc: LocNetCache<F>,
}

/// Everything [`Model::backward`] and [`Model::commit_running_stats`] need
/// from a forward pass, plus the shapes observed at every layer.
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    mode: Mode,
    stn: Option<StnCache<F>>,
    layers: Vec<LayerCache<F>>,
    head: Shape,
    /// Output shape of every layer, in order, for the whole batch.
    pub shapes: Vec<(String, Shape)>,
}

/// Per-call forward settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When false the spatial transformer is skipped as if it were the
    /// identity (used to hold it back early in training).
    pub stn_active: bool,
    /// Seeds every dropout mask of the pass.
    pub seed: u64,
}

impl ForwardOptions {
    pub fn infer() -> Self {
        ForwardOptions {
            mode: Mode::Infer,
            stn_active: true,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            stn_active: true,
            seed,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug)]
pub struct ParamView<'a, F> {
    pub name: String,
    pub dims: Vec<usize>,
    /// False for batch-norm running statistics.
    pub trainable: bool,
    pub data: &'a [F],
}

#[derive(Debug)]
pub struct ParamSlot<'a, F> {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
    pub data: &'a mut [F],
}

fn conv_dims<F: Real>(t: &Tensor<F>) -> Vec<usize> {
    let s = t.shape();
    vec![s.n, s.c, s.h, s.w]
}

fn unit_views<'a, F: Real>(name: &str, u: &'a ConvUnit<F>, out: &mut Vec<ParamView<'a, F>>) {
    let mut push = |suffix: &str, dims: Vec<usize>, trainable: bool, data: &'a [F]| {
        out.push(ParamView {
            name: format!("{name}.{suffix}"),
            dims,
            trainable,
            data,
        })
    };
    push("weight", conv_dims(&u.conv.weight), true, u.conv.weight.data());
    if let Some(b) = &u.conv.bias {
        push("bias", vec![b.len()], true, b);
    }
    if let Some(bn) = &u.bn {
        let c = bn.channels();
        push("bn.gamma", vec![c], true, &bn.gamma);
        push("bn.beta", vec![c], true, &bn.beta);
        push("bn.running_mean", vec![c], false, &bn.running_mean);
        push("bn.running_var", vec![c], false, &bn.running_var);
    }
}

fn unit_slots<'a, F: Real>(name: &str, u: &'a mut ConvUnit<F>, out: &mut Vec<ParamSlot<'a, F>>) {
    let mut push = |suffix: &str, dims: Vec<usize>, trainable: bool, data: &'a mut [F]| {
        out.push(ParamSlot {
            name: format!("{name}.{suffix}"),
            dims,
            trainable,
            data,
        })
    };
    let dims = conv_dims(&u.conv.weight);
    push("weight", dims, true, u.conv.weight.data_mut());
    if let Some(b) = &mut u.conv.bias {
        push("bias", vec![b.len()], true, b);
    }
    if let Some(bn) = &mut u.bn {
        let c = bn.channels();
        push("bn.gamma", vec![c], true, &mut bn.gamma);
        push("bn.beta", vec![c], true, &mut bn.beta);
        push("bn.running_mean", vec![c], false, &mut bn.running_mean);
        push("bn.running_var", vec![c], false, &mut bn.running_var);
    }
}

/// Names of the four convolutions inside a small basic block.
const BLOCK_UNITS: [&str; 4] = ["conv1", "conv2", "conv3", "conv4"];

/// The executable network: optional spatial transformer, backbone, optional
/// global context and the sequence head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F = f32> {
    spec: NetworkSpec,
    table: Vec<ResolvedLayer>,
    stn: Option<LocNet<F>>,
    layers: Vec<(String, Layer<F>)>,
}

impl<F: Real> Model<F> {
    /// Validates `spec` and initializes weights: He-uniform convolutions and
    /// dense layers, zero biases, unit batch-norm scales, and a zero final
    /// localization layer so the transformer starts as the identity.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let table = spec.validate()?;
        let mut stn = None;
        let mut layers = Vec::new();
        for r in &table {
            let name = r.name.as_str();
            let c_in = r.input.c;
            let layer = match &r.kind {
                LayerKind::Stn => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_seed(name));
                    stn = Some(LocNet::new(spec.input, spec.config.dropout, &mut rng)?);
                    continue;
                }
                LayerKind::Conv {
                    out,
                    kernel,
                    stride,
                    pad,
                    bias,
                    batch_norm,
                    relu,
                } => Layer::Conv(ConvUnit::init(
                    seed,
                    name,
                    c_in,
                    *out,
                    *kernel,
                    *stride,
                    *pad,
                    *bias,
                    *batch_norm,
                    *relu,
                )?),
                LayerKind::MaxPool {
                    out,
                    kernel,
                    stride,
                    pad,
                } => Layer::MaxPool(PoolParams::new(Window::new(*kernel, *stride, *pad), *out)),
                LayerKind::SmallBasicBlock { out } => {
                    let mid = out / 4;
                    let geometry = [
                        (c_in, mid, (1, 1), (0, 0)),
                        (mid, mid, (3, 1), (1, 0)),
                        (mid, mid, (1, 3), (0, 1)),
                        (mid, *out, (1, 1), (0, 0)),
                    ];
                    let units = geometry
                        .iter()
                        .zip(BLOCK_UNITS)
                        .map(|(&(ci, co, k, p), unit)| {
                            ConvUnit::init(seed, &format!("{name}.{unit}"), ci, co, k, (1, 1), p, false, true, true)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Layer::Block(units)
                }
                LayerKind::Dropout { ratio } => Layer::Dropout(*ratio),
                LayerKind::GlobalContext => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_seed(name));
                    let w = he_uniform::<F, _>(Shape::new(1, 1, c_in, c_in), c_in, &mut rng);
                    Layer::GlobalContext(DenseParams::new(
                        Matrix::from_vec(c_in, c_in, w.into_vec())?,
                        vec![F::zero(); c_in],
                    )?)
                }
            };
            layers.push((r.name.clone(), layer));
        }
        Ok(Model {
            spec,
            table,
            stn,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn charset(&self) -> &CharSet {
        &self.spec.charset
    }

    /// Build-time shape table (batch size 1).
    pub fn shape_table(&self) -> &[ResolvedLayer] {
        &self.table
    }

    pub fn sequence_len(&self) -> usize {
        self.table.last().map_or(0, |l| l.output.w)
    }

    pub fn classes(&self) -> usize {
        self.spec.charset.len()
    }

    pub fn has_stn(&self) -> bool {
        self.stn.is_some()
    }

    pub fn locnet(&self) -> Option<&LocNet<F>> {
        self.stn.as_ref()
    }

    fn check_input(&self, images: &Tensor<F>) -> Result<()> {
        let s = images.shape();
        let (c, h, w) = self.spec.input;
        if (s.c, s.h, s.w) != (c, h, w) || s.n == 0 {
            return shape_err(format!("model expects N x {c} x {h} x {w} images, got {s}"));
        }
        Ok(())
    }

    /// Per-image `T x C` logits, and the cache for a backward pass.
    pub fn logits(&self, images: &Tensor<F>, opts: &ForwardOptions) -> Result<(Vec<Matrix<F>>, ForwardCache<F>)> {
        let (logits, cache) = self.run(images, opts, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Inference-mode logits without retaining intermediates.
    pub fn infer_logits(&self, images: &Tensor<F>) -> Result<Vec<Matrix<F>>> {
        Ok(self.run(images, &ForwardOptions::infer(), false)?.0)
    }

    /// Per-image probability sequences. Train mode normalizes with batch
    /// statistics and applies dropout (seed 0) but changes no state.
    pub fn forward(&self, images: &Tensor<F>, mode: Mode) -> Result<Vec<ProbSequence>> {
        let logits = match mode {
            Mode::Infer => self.infer_logits(images)?,
            Mode::Train => self.logits(images, &ForwardOptions::train(0))?.0,
        };
        Ok(logits.iter().map(ProbSequence::from_logits).collect())
    }

    /// Layer output shapes observed while running `images` in inference mode.
    pub fn trace_shapes(&self, images: &Tensor<F>) -> Result<Vec<(String, Shape)>> {
        Ok(self.logits(images, &ForwardOptions::infer())?.1.shapes)
    }

    fn run(
        &self,
        images: &Tensor<F>,
        opts: &ForwardOptions,
        keep: bool,
    ) -> Result<(Vec<Matrix<F>>, Option<ForwardCache<F>>)> {
        self.check_input(images)?;
        let mode = opts.mode;
        let mut shapes = Vec::new();
        let mut stn_cache = None;
        let mut x = match (&self.stn, opts.stn_active) {
            (Some(loc), true) => {
                let (thetas, lc) = loc.forward_cached(images, mode, opts.seed ^ name_seed("stn"))?;
                let warped = spatial_transform(images, &thetas)?;
                if keep {
                    stn_cache = Some(StnCache {
                        image: images.clone(),
                        thetas,
                        loc: lc,
                    });
                }
                warped
            }
            _ => images.clone(),
        };
        if self.stn.is_some() {
            shapes.push(("stn".to_string(), x.shape()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for (name, layer) in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv(u) => {
                    let (y, c) = u.forward(x, mode, keep)?;
                    (y, c.map(LayerCache::Conv))
                }
                Layer::MaxPool(p) => {
                    let (y, argmax) = maxpool_forward(&x, p)?;
                    let c = keep.then(|| LayerCache::MaxPool {
                        input: x.shape(),
                        argmax,
                    });
                    (y, c)
                }
                Layer::Block(units) => {
                    let mut unit_caches = Vec::with_capacity(units.len());
                    for u in units {
                        let (y, c) = u.forward(x, mode, keep)?;
                        unit_caches.extend(c);
                        x = y;
                    }
                    (x, keep.then_some(LayerCache::Block(unit_caches)))
                }
                Layer::Dropout(ratio) => {
                    let (y, mask) = dropout(&x, *ratio, mode, opts.seed ^ name_seed(name))?;
                    (y, keep.then_some(LayerCache::Dropout(mask)))
                }
                Layer::GlobalContext(dense) => {
                    let (y, pooled) = global_context_forward(&x, dense)?;
                    let c = keep.then(|| LayerCache::GlobalContext {
                        pooled,
                        channels: x.shape().c,
                    });
                    (y, c)
                }
            };
            shapes.push((name.clone(), y.shape()));
            caches.extend(cache);
            x = y;
        }
        let head = x.shape();
        let logits = (0..head.n).map(|n| height_mean(&x, n)).collect();
        let cache = keep.then(|| ForwardCache {
            mode,
            stn: stn_cache,
            layers: caches,
            head,
            shapes,
        });
        Ok((logits, cache))
    }

    /// Parameter gradients given the loss gradient with respect to each
    /// image's logits.
    pub fn backward(&self, cache: &ForwardCache<F>, grad_logits: &[Matrix<F>]) -> Result<Gradients<F>> {
        let head = cache.head;
        if grad_logits.len() != head.n || cache.layers.len() != self.layers.len() {
            return shape_err("logit gradients do not match the cached forward pass");
        }
        let mut g = Tensor::zeros(head);
        let inv_h = F::one() / F::from_usize(head.h).unwrap();
        for (n, gm) in grad_logits.iter().enumerate() {
            if gm.rows() != head.w || gm.cols() != head.c {
                return shape_err("logit gradient has the wrong size");
            }
            for k in 0..head.c {
                for h in 0..head.h {
                    for t in 0..head.w {
                        g.set(n, k, h, t, gm.get(t, k) * inv_h);
                    }
                }
            }
        }
        let mut grads = Gradients::new();
        for (i, ((name, layer), lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let need = i > 0 || cache.stn.is_some();
            g = match (layer, lc) {
                (Layer::Conv(u), LayerCache::Conv(c)) => u.backward(name, c, g, need, &mut grads)?,
                (Layer::MaxPool(_), LayerCache::MaxPool { input, argmax }) => maxpool_backward(*input, argmax, &g)?,
                (Layer::Block(units), LayerCache::Block(cs)) => {
                    for (j, (u, c)) in units.iter().zip(cs).enumerate().rev() {
                        g = u.backward(&format!("{name}.{}", BLOCK_UNITS[j]), c, g, need || j > 0, &mut grads)?;
                    }
                    g
                }
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => dropout_backward(mask.as_ref(), &g)?,
                (Layer::GlobalContext(dense), LayerCache::GlobalContext { pooled, channels }) => {
                    global_context_backward(name, dense, pooled, *channels, &g, &mut grads)?
                }
                _ => return shape_err("cache does not match the layer list"),
            };
        }
        if let (Some(loc), Some(sc)) = (&self.stn, &cache.stn) {
            let (_, grad_theta) = spatial_transform_backward(&sc.image, &sc.thetas, &g)?;
            let lg = loc.backward(&sc.loc, &grad_theta)?;
            grads.insert("stn.branch_a.weight".into(), lg.branch_a_w.into_vec());
            grads.insert("stn.branch_a.bias".into(), lg.branch_a_b);
            grads.insert("stn.branch_b.weight".into(), lg.branch_b_w.into_vec());
            grads.insert("stn.branch_b.bias".into(), lg.branch_b_b);
            grads.insert("stn.fc1.weight".into(), lg.fc1_w.into_vec());
            grads.insert("stn.fc1.bias".into(), lg.fc1_b);
            grads.insert("stn.fc2.weight".into(), lg.fc2_w.into_vec());
            grads.insert("stn.fc2.bias".into(), lg.fc2_b);
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a train-mode pass into every batch
    /// norm's running estimates.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        for ((_, layer), lc) in self.layers.iter_mut().zip(&cache.layers) {
            match (layer, lc) {
                (Layer::Conv(u), LayerCache::Conv(c)) => u.commit(c),
                (Layer::Block(units), LayerCache::Block(cs)) => {
                    for (u, c) in units.iter_mut().zip(cs) {
                        u.commit(c);
                    }
                }
                _ => {}
            }
        }
    }

    /// Every parameter tensor, trainable or not, in a fixed order.
    pub fn params(&self) -> Vec<ParamView<'_, F>> {
        let mut out = Vec::new();
        if let Some(loc) = &self.stn {
            let (ba, bb) = (bias_of(&loc.branch_a), bias_of(&loc.branch_b));
            let entries: [(&str, Vec<usize>, &[F]); 8] = [
                ("stn.branch_a.weight", conv_dims(&loc.branch_a.weight), loc.branch_a.weight.data()),
                ("stn.branch_a.bias", vec![ba.len()], ba),
                ("stn.branch_b.weight", conv_dims(&loc.branch_b.weight), loc.branch_b.weight.data()),
                ("stn.branch_b.bias", vec![bb.len()], bb),
                ("stn.fc1.weight", mat_dims(&loc.fc1.weight), loc.fc1.weight.data()),
                ("stn.fc1.bias", vec![loc.fc1.bias.len()], &loc.fc1.bias),
                ("stn.fc2.weight", mat_dims(&loc.fc2.weight), loc.fc2.weight.data()),
                ("stn.fc2.bias", vec![loc.fc2.bias.len()], &loc.fc2.bias),
            ];
            out.extend(entries.into_iter().map(|(name, dims, data)| ParamView {
                name: name.to_string(),
                dims,
                trainable: true,
                data,
            }));
        }
        for (name, layer) in &self.layers {
            match layer {
                Layer::Conv(u) => unit_views(name, u, &mut out),
                Layer::Block(units) => {
                    for (u, unit) in units.iter().zip(BLOCK_UNITS) {
                        unit_views(&format!("{name}.{unit}"), u, &mut out);
                    }
                }
                Layer::GlobalContext(d) => {
                    out.push(ParamView {
                        name: format!("{name}.weight"),
                        dims: mat_dims(&d.weight),
                        trainable: true,
                        data: d.weight.data(),
                    });
                    out.push(ParamView {
                        name: format!("{name}.bias"),
                        dims: vec![d.bias.len()],
                        trainable: true,
                        data: &d.bias,
                    });
                }
                Layer::MaxPool(_) | Layer::Dropout(_) => {}
            }
        }
        out
    }

    /// Mutable access to the same tensors as [`Model::params`], same order.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, F>> {
        let mut out = Vec::new();
        if let Some(loc) = &mut self.stn {
            let slot = |name: &str, dims: Vec<usize>, data| ParamSlot {
                name: name.to_string(),
                dims,
                trainable: true,
                data,
            };
            let (da, db) = (conv_dims(&loc.branch_a.weight), conv_dims(&loc.branch_b.weight));
            let (d1, d2) = (mat_dims(&loc.fc1.weight), mat_dims(&loc.fc2.weight));
            out.push(slot("stn.branch_a.weight", da, loc.branch_a.weight.data_mut()));
            let b = loc.branch_a.bias.get_or_insert_with(Vec::new);
            out.push(slot("stn.branch_a.bias", vec![b.len()], b));
            out.push(slot("stn.branch_b.weight", db, loc.branch_b.weight.data_mut()));
            let b = loc.branch_b.bias.get_or_insert_with(Vec::new);
            out.push(slot("stn.branch_b.bias", vec![b.len()], b));
            out.push(slot("stn.fc1.weight", d1, loc.fc1.weight.data_mut()));
            out.push(slot("stn.fc1.bias", vec![loc.fc1.bias.len()], &mut loc.fc1.bias));
            out.push(slot("stn.fc2.weight", d2, loc.fc2.weight.data_mut()));
            out.push(slot("stn.fc2.bias", vec![loc.fc2.bias.len()], &mut loc.fc2.bias));
        }
        for (name, layer) in &mut self.layers {
            match layer {
                Layer::Conv(u) => unit_slots(name, u, &mut out),
                Layer::Block(units) => {
                    for (u, unit) in units.iter_mut().zip(BLOCK_UNITS) {
                        unit_slots(&format!("{name}.{unit}"), u, &mut out);
                    }
                }
                Layer::GlobalContext(d) => {
                    let dims = mat_dims(&d.weight);
                    out.push(ParamSlot {
                        name: format!("{name}.weight"),
                        dims,
                        trainable: true,
                        data: d.weight.data_mut(),
                    });
                    out.push(ParamSlot {
                        name: format!("{name}.bias"),
                        dims: vec![d.bias.len()],
                        trainable: true,
                        data: &mut d.bias,
                    });
                }
                Layer::MaxPool(_) | Layer::Dropout(_) => {}
            }
        }
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    /// Copies every tensor from `source`, which must have identical names
    /// and sizes.
    pub fn load_params<G: Real>(&mut self, source: &[ParamView<'_, G>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != source.len() {
            return Err(Error::Format(format!(
                "model has {} tensors, source has {}",
                slots.len(),
                source.len()
            )));
        }
        for (slot, src) in slots.iter_mut().zip(source) {
            if slot.name != src.name || slot.dims != src.dims {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name, src.dims, slot.name, slot.dims
                )));
            }
            for (d, s) in slot.data.iter_mut().zip(src.data) {
                *d = F::from_f64(s.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(F::nan);
            }
        }
        Ok(())
    }

    /// The same network in another precision.
    pub fn cast<G: Real>(&self) -> Result<Model<G>> {
        let mut m = Model::<G>::build(self.spec.clone(), 0)?;
        m.load_params(&self.params())?;
        Ok(m)
    }
}

fn bias_of<F>(c: &ConvParams<F>) -> &[F] {
    c.bias.as_deref().unwrap_or(&[])
}

fn mat_dims<F: Real>(m: &Matrix<F>) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

/// `T x C` matrix of the head output for batch item `n`, averaged over height.
fn height_mean<F: Real>(y: &Tensor<F>, n: usize) -> Matrix<F> {
    let s = y.shape();
    let inv_h = F::one() / F::from_usize(s.h).unwrap();
    let mut m = Matrix::zeros(s.w, s.c);
    for k in 0..s.c {
        for h in 0..s.h {
            for t in 0..s.w {
                let v = m.get(t, k) + y.at(n, k, h, t);
                m.set(t, k, v);
            }
        }
    }
    m.data_mut().iter_mut().for_each(|v| *v *= inv_h);
    m
}

/// Global average pool, dense `C -> C`, tile over the map and append as `C`
/// extra channels. Also returns the pooled `N x C` matrix.
pub fn global_context_forward<F: Real>(x: &Tensor<F>, dense: &DenseParams<F>) -> Result<(Tensor<F>, Matrix<F>)> {
    let s = x.shape();
    if dense.in_features() != s.c || dense.out_features() != s.c {
        return shape_err(format!("global context over {} channels applied to {s}", dense.in_features()));
    }
    let plane = s.plane();
    let inv = F::one() / F::from_usize(plane).unwrap();
    let mut pooled = Matrix::zeros(s.n, s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            let sum: F = x.data()[off..off + plane].iter().copied().sum();
            pooled.set(n, c, sum * inv);
        }
    }
    let ctx = dense_forward(&pooled, dense)?;
    let out_shape = s.with_c(2 * s.c);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        data.extend_from_slice(x.sample(n));
        for c in 0..s.c {
            data.extend(std::iter::repeat_n(ctx.get(n, c), plane));
        }
    }
    Ok((Tensor::from_vec(out_shape, data)?, pooled))
}

fn global_context_backward<F: Real>(
    name: &str,
    dense: &DenseParams<F>,
    pooled: &Matrix<F>,
    channels: usize,
    grad: &Tensor<F>,
    grads: &mut Gradients<F>,
) -> Result<Tensor<F>> {
    let s = grad.shape();
    if s.c != 2 * channels {
        return shape_err("global-context gradient shape mismatch");
    }
    let plane = s.plane();
    let mut g_ctx = Matrix::zeros(s.n, channels);
    for n in 0..s.n {
        for c in 0..channels {
            let off = (n * s.c + channels + c) * plane;
            g_ctx.set(n, c, grad.data()[off..off + plane].iter().copied().sum());
        }
    }
    let dg = dense_backward(pooled, dense, &g_ctx)?;
    grads.insert(format!("{name}.weight"), dg.grad_w.into_vec());
    grads.insert(format!("{name}.bias"), dg.grad_b);
    let inv = F::one() / F::from_usize(plane).unwrap();
    let xs = s.with_c(channels);
    let mut gx = Tensor::zeros(xs);
    for n in 0..s.n {
        for c in 0..channels {
            let src = (n * s.c + c) * plane;
            let dst = (n * channels + c) * plane;
            let spread = dg.grad_x.get(n, c) * inv;
            for i in 0..plane {
                gx.data_mut()[dst + i] = grad.data()[src + i] + spread;
            }
        }
    }
    Ok(gx)
}
