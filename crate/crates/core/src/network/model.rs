//! Instantiated networks: layer stack + classifier head, with unified
//! train/eval forwards, backprop, and a named-parameter registry.
//!
//! Parameter names are stable across runs: `layer{i}.weights` /
//! `layer{i}.kernels` for TWTA layers (indexed by spec position),
//! `layer{i}.logits.task{t}` for per-task winner logits, and `head.weight` /
//! `head.bias`. Checkpoints, gradients, and the SGD step all speak this
//! naming scheme.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{glorot_normal, gumbel_noise, RngStream, Tensor};
use crate::network::spec::{LayerSpec, ModelSpec};
use crate::twta::{
    ConvCache, DenseCache, DiscreteMask, TwtaConvLayer, TwtaDenseLayer, WinnerSample,
};

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(TwtaDenseLayer),
    Conv(TwtaConvLayer),
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub(crate) weight: Tensor, // [features, classes]
    pub(crate) bias: Tensor,   // [classes]
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>, // head excluded; indices match spec positions
    head: Head,
    registered: BTreeSet<usize>,
}

/// Named gradients, one entry per trainable tensor of the active task.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    by_name: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) -> Result<()> {
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate gradient name {name}")));
        }
        self.by_name.insert(name, grad);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Per-layer forward state for one training batch. The chain holds one item
/// per non-head layer, in layer order.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    task: usize,
    items: Vec<CacheItem>,
    head_input: Tensor, // [B, features]
}

#[derive(Debug, Clone)]
enum CacheItem {
    Dense(DenseCache),
    Conv(ConvCache),
    Pool(PoolCache),
    Flatten(Vec<usize>), // pre-flatten shape, batch dim included
}

#[derive(Debug, Clone)]
pub(crate) struct PoolCache {
    in_shape: Vec<usize>,      // [B, H, L, C]
    argmax: Vec<usize>,        // flat input index per output element
    out_shape: Vec<usize>,
}

impl ForwardCache {
    pub fn task(&self) -> usize {
        self.task
    }

    pub fn chain_len(&self) -> usize {
        self.items.len()
    }

    /// Winner samples drawn for this batch, one per TWTA layer in order.
    pub fn samples(&self) -> Vec<&WinnerSample> {
        self.items
            .iter()
            .filter_map(|item| match item {
                CacheItem::Dense(c) => Some(c.sample()),
                CacheItem::Conv(c) => Some(c.sample()),
                _ => None,
            })
            .collect()
    }
}

pub fn build_model(spec: &ModelSpec, rng: &mut RngStream) -> Result<Model> {
    let trace = spec.validate()?;
    let mut layers = Vec::new();
    let mut head = None;
    for (ls, shapes) in spec.layers.iter().zip(&trace) {
        match *ls {
            LayerSpec::TwtaDense {
                in_dim,
                blocks,
                units,
            } => layers.push(Layer::Dense(TwtaDenseLayer::new(in_dim, blocks, units, rng)?)),
            LayerSpec::TwtaConv {
                kernel_h,
                kernel_l,
                in_channels,
                kernels,
                maps,
            } => layers.push(Layer::Conv(TwtaConvLayer::new(
                kernels, kernel_h, kernel_l, in_channels, maps, rng,
            )?)),
            LayerSpec::MaxPool2 => layers.push(Layer::MaxPool2),
            LayerSpec::Flatten => layers.push(Layer::Flatten),
            LayerSpec::Head { classes } => {
                let features = shapes.input[0];
                head = Some(Head {
                    weight: glorot_normal(vec![features, classes], features, classes, rng)?,
                    bias: Tensor::zeros(vec![classes]),
                });
            }
        }
    }
    Ok(Model {
        spec: spec.clone(),
        layers,
        head: head.expect("validate guarantees a head"),
        registered: BTreeSet::new(),
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head.weight, &self.head.bias)
    }

    pub fn total_classes(&self) -> usize {
        self.spec.total_classes
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.registered.iter().copied()
    }

    pub fn is_registered(&self, task: usize) -> bool {
        self.registered.contains(&task)
    }

    fn check_registered(&self, task: usize) -> Result<()> {
        if !self.is_registered(task) {
            return Err(Error::UnknownTask(task));
        }
        Ok(())
    }

    pub fn twta_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense(_) | Layer::Conv(_)))
            .count()
    }

    /// Give `task` fresh winner logits in every TWTA layer. Atomic: fails
    /// before touching anything if the task already exists.
    pub fn register_task(&mut self, task: usize, rng: &mut RngStream) -> Result<()> {
        if self.registered.contains(&task) {
            return Err(Error::TaskAlreadyRegistered(task));
        }
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => l.register_task(task, rng)?,
                Layer::Conv(l) => l.register_task(task, rng)?,
                _ => {}
            }
        }
        self.registered.insert(task);
        Ok(())
    }

    /// Per-layer argmax winner masks for a task, TWTA layers in order.
    pub fn winner_masks(&self, task: usize) -> Result<Vec<DiscreteMask>> {
        self.check_registered(task)?;
        let mut masks = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => masks.push(l.winner_mask(task)?),
                Layer::Conv(l) => masks.push(l.winner_mask(task)?),
                _ => {}
            }
        }
        Ok(masks)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let want = &self.spec.input_shape;
        if batch.ndim() != want.len() + 1 || &batch.shape()[1..] != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model batch input",
                left: batch.shape().to_vec(),
                right: want.clone(),
            });
        }
        Ok(batch.shape()[0])
    }

    /// Training forward: draws one winner sample per TWTA layer (shared by
    /// the whole batch) and returns raw head logits `[B, classes]`.
    pub fn forward_train(
        &self,
        batch: &Tensor,
        task: usize,
        tau: f32,
        rng: &mut RngStream,
    ) -> Result<(Tensor, ForwardCache)> {
        let mut gumbels = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => gumbels.push(gumbel_noise(vec![l.blocks(), l.units()], rng)),
                Layer::Conv(l) => {
                    gumbels.push(gumbel_noise(vec![l.kernel_count(), l.maps()], rng))
                }
                _ => {}
            }
        }
        self.forward_train_with_gumbels(batch, task, tau, &gumbels)
    }

    /// Training forward under caller-supplied Gumbel noise (one tensor per
    /// TWTA layer, in order). Lets gradient checks perturb logits while the
    /// noise stays frozen.
    pub fn forward_train_with_gumbels(
        &self,
        batch: &Tensor,
        task: usize,
        tau: f32,
        gumbels: &[Tensor],
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_registered(task)?;
        if gumbels.len() != self.twta_layer_count() {
            return Err(Error::Contract(format!(
                "expected {} gumbel tensors (one per TWTA layer), got {}",
                self.twta_layer_count(),
                gumbels.len()
            )));
        }
        let mut samples = Vec::with_capacity(gumbels.len());
        let mut gi = 0;
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    samples.push(WinnerSample::from_parts(
                        l.logits().get(task)?,
                        &gumbels[gi],
                        tau,
                    )?);
                    gi += 1;
                }
                Layer::Conv(l) => {
                    samples.push(WinnerSample::from_parts(
                        l.logits().get(task)?,
                        &gumbels[gi],
                        tau,
                    )?);
                    gi += 1;
                }
                _ => {}
            }
        }
        self.forward_train_with_samples(batch, task, &samples)
    }

    /// Training forward under fully explicit winner samples (one per TWTA
    /// layer, in order). Besides serving the gumbel path above, this lets a
    /// replay scheme push stored examples through a one-hot sample of the
    /// mask they were learnt under.
    pub fn forward_train_with_samples(
        &self,
        batch: &Tensor,
        task: usize,
        samples: &[WinnerSample],
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_registered(task)?;
        let bsz = self.check_batch(batch)?;
        if samples.len() != self.twta_layer_count() {
            return Err(Error::Contract(format!(
                "expected {} winner samples (one per TWTA layer), got {}",
                self.twta_layer_count(),
                samples.len()
            )));
        }
        let mut cur = batch.clone();
        let mut items = Vec::with_capacity(self.layers.len());
        let mut si = 0;
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(l) => {
                    let (y, cache) = l.forward_train_batch(&cur, &samples[si])?;
                    si += 1;
                    items.push(CacheItem::Dense(cache));
                    y
                }
                Layer::Conv(l) => {
                    let (y, cache) = l.forward_train_batch(&cur, &samples[si])?;
                    si += 1;
                    items.push(CacheItem::Conv(cache));
                    y
                }
                Layer::MaxPool2 => {
                    let (y, cache) = maxpool2_forward_batch(&cur)?;
                    items.push(CacheItem::Pool(cache));
                    y
                }
                Layer::Flatten => {
                    let shape = cur.shape().to_vec();
                    items.push(CacheItem::Flatten(shape.clone()));
                    cur.reshaped(vec![bsz, shape[1..].iter().product()])?
                }
            };
        }
        let logits = head_forward_batch(&cur, &self.head.weight, &self.head.bias)?;
        let cache = ForwardCache {
            task,
            items,
            head_input: cur,
        };
        Ok((logits, cache))
    }

    /// One-hot winner samples for a registered task, one per TWTA layer in
    /// order — the degenerate samples under which a training forward agrees
    /// bitwise with `forward_eval_batch`.
    pub fn one_hot_samples(&self, task: usize) -> Result<Vec<WinnerSample>> {
        self.check_registered(task)?;
        let mut out = Vec::with_capacity(self.twta_layer_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense(l) => {
                    out.push(WinnerSample::one_hot(&l.winner_mask(task)?, l.units()))
                }
                Layer::Conv(l) => {
                    out.push(WinnerSample::one_hot(&l.winner_mask(task)?, l.maps()))
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Inference forward for a batch: every TWTA layer runs under its
    /// discrete winner mask for `task`. Pure — no RNG, no state.
    pub fn forward_eval_batch(&self, batch: &Tensor, task: usize) -> Result<Tensor> {
        self.check_registered(task)?;
        let bsz = self.check_batch(batch)?;
        let mut cur = batch.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(l) => l.forward_eval_batch(&cur, &l.winner_mask(task)?)?,
                Layer::Conv(l) => l.forward_eval_batch(&cur, &l.winner_mask(task)?)?,
                Layer::MaxPool2 => maxpool2_forward_batch(&cur)?.0,
                Layer::Flatten => {
                    let shape = cur.shape().to_vec();
                    cur.reshaped(vec![bsz, shape[1..].iter().product()])?
                }
            };
        }
        head_forward_batch(&cur, &self.head.weight, &self.head.bias)
    }

    /// Single-example inference: input shaped like `spec.input_shape`,
    /// output `[classes]`.
    pub fn forward_eval(&self, input: &Tensor, task: usize) -> Result<Tensor> {
        let (logits, _) = self.forward_eval_traced(input, task)?;
        Ok(logits)
    }

    /// Single-example inference that also returns every layer's activation
    /// (head excluded), for structural audits.
    pub fn forward_eval_traced(&self, input: &Tensor, task: usize) -> Result<(Tensor, Vec<Tensor>)> {
        if input.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model eval input",
                left: input.shape().to_vec(),
                right: self.spec.input_shape.clone(),
            });
        }
        self.check_registered(task)?;
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let mut cur = Tensor::from_vec(shape, input.data().to_vec())?;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(l) => l.forward_eval_batch(&cur, &l.winner_mask(task)?)?,
                Layer::Conv(l) => l.forward_eval_batch(&cur, &l.winner_mask(task)?)?,
                Layer::MaxPool2 => maxpool2_forward_batch(&cur)?.0,
                Layer::Flatten => {
                    let s = cur.shape().to_vec();
                    cur.reshaped(vec![1, s[1..].iter().product()])?
                }
            };
            let squeezed = cur
                .clone()
                .reshaped(cur.shape()[1..].to_vec())?;
            trace.push(squeezed);
        }
        let logits = head_forward_batch(&cur, &self.head.weight, &self.head.bias)?;
        Ok((logits.reshaped(vec![self.spec.total_classes])?, trace))
    }

    /// Backprop through the whole stack. Yields one named gradient per
    /// trainable tensor of the cache's task: layer weights (masked per the
    /// TWTA rule), that task's logits, and the unmasked head.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
        eps_g: f32,
    ) -> Result<GradientSet> {
        self.check_registered(cache.task)?;
        if cache.items.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "cache chain length {} does not match the model's {} layers",
                cache.items.len(),
                self.layers.len()
            )));
        }
        let bsz = cache.head_input.shape()[0];
        let features = cache.head_input.shape()[1];
        let classes = self.spec.total_classes;
        if d_logits.shape() != [bsz, classes] {
            return Err(Error::ShapeMismatch {
                op: "model backward",
                left: d_logits.shape().to_vec(),
                right: vec![bsz, classes],
            });
        }

        let mut grads = GradientSet::new();
        let hw = self.head.weight.data();
        let hin = cache.head_input.data();
        let dld = d_logits.data();

        let mut d_hw = Tensor::zeros(vec![features, classes]);
        for f in 0..features {
            for k in 0..classes {
                let mut acc = 0.0f64;
                for b in 0..bsz {
                    acc += hin[b * features + f] as f64 * dld[b * classes + k] as f64;
                }
                d_hw.data_mut()[f * classes + k] = acc as f32;
            }
        }
        let mut d_hb = Tensor::zeros(vec![classes]);
        for k in 0..classes {
            let mut acc = 0.0f64;
            for b in 0..bsz {
                acc += dld[b * classes + k] as f64;
            }
            d_hb.data_mut()[k] = acc as f32;
        }
        let mut d = Tensor::zeros(vec![bsz, features]);
        for b in 0..bsz {
            for f in 0..features {
                let mut acc = 0.0f64;
                for k in 0..classes {
                    acc += hw[f * classes + k] as f64 * dld[b * classes + k] as f64;
                }
                d.data_mut()[b * features + f] = acc as f32;
            }
        }
        grads.insert("head.weight".into(), d_hw)?;
        grads.insert("head.bias".into(), d_hb)?;

        for (idx, (layer, item)) in self.layers.iter().zip(&cache.items).enumerate().rev() {
            d = match (layer, item) {
                (Layer::Dense(l), CacheItem::Dense(c)) => {
                    let g = l.backward_batch(c, &d, eps_g)?;
                    grads.insert(format!("layer{idx}.weights"), g.weights)?;
                    grads.insert(format!("layer{idx}.logits.task{}", cache.task), g.logits)?;
                    g.input
                }
                (Layer::Conv(l), CacheItem::Conv(c)) => {
                    let g = l.backward_batch(c, &d, eps_g)?;
                    grads.insert(format!("layer{idx}.kernels"), g.kernels)?;
                    grads.insert(format!("layer{idx}.logits.task{}", cache.task), g.logits)?;
                    g.input
                }
                (Layer::MaxPool2, CacheItem::Pool(c)) => maxpool2_backward_batch(c, &d)?,
                (Layer::Flatten, CacheItem::Flatten(shape)) => d.reshaped(shape.clone())?,
                _ => {
                    return Err(Error::Contract(format!(
                        "cache item at layer {idx} does not match the layer kind"
                    )))
                }
            };
        }
        Ok(grads)
    }

    /// Visit persistent parameters (layer weights + head) in registry order;
    /// with `include_logits`, also every task's winner logits.
    pub fn visit_params(
        &self,
        include_logits: bool,
        f: &mut dyn FnMut(&str, &Tensor) -> Result<()>,
    ) -> Result<()> {
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(l) => {
                    f(&format!("layer{idx}.weights"), l.weights())?;
                    if include_logits {
                        for t in l.logits().tasks().collect::<Vec<_>>() {
                            f(&format!("layer{idx}.logits.task{t}"), l.logits().get(t)?)?;
                        }
                    }
                }
                Layer::Conv(l) => {
                    f(&format!("layer{idx}.kernels"), l.kernels())?;
                    if include_logits {
                        for t in l.logits().tasks().collect::<Vec<_>>() {
                            f(&format!("layer{idx}.logits.task{t}"), l.logits().get(t)?)?;
                        }
                    }
                }
                _ => {}
            }
        }
        f("head.weight", &self.head.weight)?;
        f("head.bias", &self.head.bias)
    }

    /// Mutable visit over the same tensors as `visit_params`.
    pub fn visit_params_mut(
        &mut self,
        include_logits: bool,
        f: &mut dyn FnMut(&str, &mut Tensor) -> Result<()>,
    ) -> Result<()> {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(l) => {
                    f(&format!("layer{idx}.weights"), l.weights_mut())?;
                    if include_logits {
                        for t in l.logits().tasks().collect::<Vec<_>>() {
                            f(&format!("layer{idx}.logits.task{t}"), l.logits_mut().get_mut(t)?)?;
                        }
                    }
                }
                Layer::Conv(l) => {
                    f(&format!("layer{idx}.kernels"), l.kernels_mut())?;
                    if include_logits {
                        for t in l.logits().tasks().collect::<Vec<_>>() {
                            f(&format!("layer{idx}.logits.task{t}"), l.logits_mut().get_mut(t)?)?;
                        }
                    }
                }
                _ => {}
            }
        }
        f("head.weight", &mut self.head.weight)?;
        f("head.bias", &mut self.head.bias)
    }

    /// Mutable visit over the tensors trained for `task`: persistent weights
    /// plus that task's logits only. Matches `backward`'s gradient names
    /// one for one.
    pub fn visit_trainable_mut(
        &mut self,
        task: usize,
        f: &mut dyn FnMut(&str, &mut Tensor) -> Result<()>,
    ) -> Result<()> {
        if !self.registered.contains(&task) {
            return Err(Error::UnknownTask(task));
        }
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(l) => {
                    f(&format!("layer{idx}.weights"), l.weights_mut())?;
                    f(&format!("layer{idx}.logits.task{task}"), l.logits_mut().get_mut(task)?)?;
                }
                Layer::Conv(l) => {
                    f(&format!("layer{idx}.kernels"), l.kernels_mut())?;
                    f(&format!("layer{idx}.logits.task{task}"), l.logits_mut().get_mut(task)?)?;
                }
                _ => {}
            }
        }
        f("head.weight", &mut self.head.weight)?;
        f("head.bias", &mut self.head.bias)
    }

    /// Persistent registry as (name, tensor) pairs, in visit order.
    pub fn registry(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(false, &mut |name, t| {
            out.push((name.to_string(), t.clone()));
            Ok(())
        })
        .expect("infallible closure");
        out
    }

    /// Total persistent parameter count (registry sum).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(false, &mut |_, t| {
            n += t.len();
            Ok(())
        })
        .expect("infallible closure");
        n
    }
}

/// Head logits for a `[B, F]` batch: f64 accumulation seeded with the bias,
/// ascending feature order. The pruned export calls this same function, so
/// full and pruned heads agree bitwise.
pub(crate) fn head_forward_batch(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.ndim() != 2 || weight.ndim() != 2 || input.shape()[1] != weight.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "head forward",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let (bsz, features) = (input.shape()[0], input.shape()[1]);
    let classes = weight.shape()[1];
    if bias.shape() != [classes] {
        return Err(Error::ShapeMismatch {
            op: "head bias",
            left: bias.shape().to_vec(),
            right: vec![classes],
        });
    }
    let mut out = Tensor::zeros(vec![bsz, classes]);
    for b in 0..bsz {
        for k in 0..classes {
            let mut acc = bias.data()[k] as f64;
            for f in 0..features {
                acc += input.data()[b * features + f] as f64
                    * weight.data()[f * classes + k] as f64;
            }
            out.data_mut()[b * classes + k] = acc as f32;
        }
    }
    Ok(out)
}

/// 2x2/stride-2 max pooling over `[B, H, L, C]`; odd trailing rows/columns
/// are dropped. Ties keep the first element in window scan order.
pub(crate) fn maxpool2_forward_batch(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    if input.ndim() != 4 || input.shape()[1] < 2 || input.shape()[2] < 2 {
        return Err(Error::Geometry(format!(
            "maxpool2 needs [B, H>=2, L>=2, C], got {:?}",
            input.shape()
        )));
    }
    let (bsz, h, l, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (oh, ol) = (h / 2, l / 2);
    let mut out = Tensor::zeros(vec![bsz, oh, ol, c]);
    let mut argmax = vec![0usize; out.len()];
    let xd = input.data();
    for b in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ol {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * l + 2 * ox) * c + ch;
                    let mut best = xd[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((b * h + 2 * oy + dy) * l + 2 * ox + dx) * c + ch;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + oy) * ol + ox) * c + ch;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let cache = PoolCache {
        in_shape: input.shape().to_vec(),
        argmax,
        out_shape: out.shape().to_vec(),
    };
    Ok((out, cache))
}

/// Routes each output gradient to its argmax input position. Windows do not
/// overlap, so every input receives at most one contribution.
fn maxpool2_backward_batch(cache: &PoolCache, d_out: &Tensor) -> Result<Tensor> {
    if d_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "maxpool2 backward",
            left: d_out.shape().to_vec(),
            right: cache.out_shape.clone(),
        });
    }
    let mut d_in = Tensor::zeros(cache.in_shape.clone());
    for (o, &src) in cache.argmax.iter().enumerate() {
        d_in.data_mut()[src] += d_out.data()[o];
    }
    Ok(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamLabel;

    fn mlp_spec() -> ModelSpec {
        ModelSpec {
            input_shape: vec![12],
            layers: vec![
                LayerSpec::TwtaDense {
                    in_dim: 12,
                    blocks: 4,
                    units: 3,
                },
                LayerSpec::TwtaDense {
                    in_dim: 12,
                    blocks: 2,
                    units: 2,
                },
                LayerSpec::Head { classes: 5 },
            ],
            total_classes: 5,
        }
    }

    fn conv_spec() -> ModelSpec {
        ModelSpec {
            input_shape: vec![6, 6, 1],
            layers: vec![
                LayerSpec::TwtaConv {
                    kernel_h: 3,
                    kernel_l: 3,
                    in_channels: 1,
                    kernels: 2,
                    maps: 2,
                },
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Head { classes: 3 },
            ],
            total_classes: 3,
        }
    }

    fn ready_model(spec: &ModelSpec, seed: u64) -> Model {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 0);
        let mut model = build_model(spec, &mut rng).unwrap();
        let mut reg = RngStream::with_salt(seed, StreamLabel::Init, 1);
        model.register_task(0, &mut reg).unwrap();
        model
    }

    fn rand_batch(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 404);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let spec = conv_spec();
        let a = ready_model(&spec, 7);
        let b = ready_model(&spec, 7);
        for ((an, at), (bn, bt)) in a.registry().iter().zip(b.registry().iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "tensor {an} differs");
        }
    }

    #[test]
    fn registry_sums_to_closed_form_param_count() {
        for spec in [mlp_spec(), conv_spec()] {
            let model = ready_model(&spec, 3);
            assert_eq!(model.param_count(), spec.param_count().unwrap());
        }
    }

    #[test]
    fn identical_batch_rows_produce_identical_logit_rows() {
        let model = ready_model(&mlp_spec(), 11);
        let row = rand_batch(vec![12], 1);
        let mut data = row.data().to_vec();
        data.extend_from_slice(row.data());
        data.extend_from_slice(row.data());
        let batch = Tensor::from_vec(vec![3, 12], data).unwrap();
        let mut rng = RngStream::new(2, StreamLabel::Gumbel);
        let (logits, _) = model.forward_train(&batch, 0, 0.5, &mut rng).unwrap();
        let first = &logits.data()[0..5];
        assert_eq!(&logits.data()[5..10], first);
        assert_eq!(&logits.data()[10..15], first);
    }

    #[test]
    fn single_example_batch_keeps_batch_dim() {
        let model = ready_model(&mlp_spec(), 13);
        let batch = rand_batch(vec![1, 12], 2);
        let mut rng = RngStream::new(3, StreamLabel::Gumbel);
        let (logits, cache) = model.forward_train(&batch, 0, 0.67, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[1, 5]);
        assert_eq!(cache.chain_len(), 2);
    }

    #[test]
    fn cold_noiseless_train_forward_approaches_eval() {
        // With zero Gumbel noise and tau = 0.001, the relaxed sample is
        // one-hot at the posterior argmax, so the train path must land on
        // the eval path to within relaxation crumbs.
        let model = ready_model(&conv_spec(), 17);
        let x = rand_batch(vec![6, 6, 1], 3);
        let batch = Tensor::from_vec(vec![1, 6, 6, 1], x.data().to_vec()).unwrap();
        let zero_noise = vec![Tensor::zeros(vec![2, 2])];
        let (train_logits, _) = model
            .forward_train_with_gumbels(&batch, 0, 0.001, &zero_noise)
            .unwrap();
        let eval_logits = model.forward_eval(&x, 0).unwrap();
        for k in 0..3 {
            assert!(
                (train_logits.data()[k] - eval_logits.data()[k]).abs() < 1e-4,
                "class {k}: train {} vs eval {}",
                train_logits.data()[k],
                eval_logits.data()[k]
            );
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let model = ready_model(&conv_spec(), 19);
        let x = rand_batch(vec![6, 6, 1], 4);
        let a = model.forward_eval(&x, 0).unwrap();
        let b = model.forward_eval(&x, 0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn unregistered_task_is_refused() {
        let model = ready_model(&mlp_spec(), 23);
        let x = rand_batch(vec![12], 5);
        assert!(matches!(
            model.forward_eval(&x, 9).unwrap_err(),
            Error::UnknownTask(9)
        ));
        let batch = Tensor::from_vec(vec![1, 12], x.data().to_vec()).unwrap();
        let mut rng = RngStream::new(1, StreamLabel::Gumbel);
        assert!(model.forward_train(&batch, 9, 0.5, &mut rng).is_err());
    }

    #[test]
    fn zero_upstream_gradient_zeroes_the_whole_set() {
        let model = ready_model(&conv_spec(), 29);
        let batch = rand_batch(vec![2, 6, 6, 1], 6);
        let mut rng = RngStream::new(4, StreamLabel::Gumbel);
        let (_, cache) = model.forward_train(&batch, 0, 0.5, &mut rng).unwrap();
        let grads = model
            .backward(&cache, &Tensor::zeros(vec![2, 3]), 1e-3)
            .unwrap();
        for (name, g) in grads.iter() {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} has nonzero grads");
        }
    }

    #[test]
    fn gradient_names_match_trainable_registry() {
        let model = ready_model(&conv_spec(), 31);
        let batch = rand_batch(vec![2, 6, 6, 1], 7);
        let mut rng = RngStream::new(5, StreamLabel::Gumbel);
        let (logits, cache) = model.forward_train(&batch, 0, 0.5, &mut rng).unwrap();
        let grads = model.backward(&cache, &logits, 1e-3).unwrap();

        let mut trainable = Vec::new();
        let mut m = model.clone();
        m.visit_trainable_mut(0, &mut |name, t| {
            trainable.push((name.to_string(), t.shape().to_vec()));
            Ok(())
        })
        .unwrap();
        assert_eq!(grads.len(), trainable.len());
        for (name, shape) in &trainable {
            let g = grads.get(name).unwrap_or_else(|| panic!("missing grad {name}"));
            assert_eq!(g.shape(), shape.as_slice(), "{name} shape");
        }
    }

    /// Full-chain finite-difference check through conv, pool, flatten, and
    /// head, loss = sum(logits^2)/2, frozen Gumbel noise.
    #[test]
    fn conv_stack_backward_matches_finite_differences() {
        let spec = conv_spec();
        let model = ready_model(&spec, 37);
        let batch = rand_batch(vec![2, 6, 6, 1], 8);
        let tau = 0.6f32;
        let mut grng = RngStream::new(6, StreamLabel::Gumbel);
        let gumbels = vec![gumbel_noise(vec![2, 2], &mut grng)];

        let loss = |m: &Model| -> f64 {
            let (logits, _) = m
                .forward_train_with_gumbels(&batch, 0, tau, &gumbels)
                .unwrap();
            logits.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 2.0
        };
        let (logits, cache) = model
            .forward_train_with_gumbels(&batch, 0, tau, &gumbels)
            .unwrap();
        let grads = model.backward(&cache, &logits, 0.0).unwrap();

        let names: Vec<String> = grads.names().map(String::from).collect();
        for name in &names {
            let len = grads.get(name).unwrap().len();
            for idx in 0..len {
                let mut base = 0.0f32;
                let mut mp = model.clone();
                mp.visit_trainable_mut(0, &mut |n, t| {
                    if n == name {
                        base = t.data()[idx];
                        t.data_mut()[idx] = base + 1e-3;
                    }
                    Ok(())
                })
                .unwrap();
                let mut mm = model.clone();
                mm.visit_trainable_mut(0, &mut |n, t| {
                    if n == name {
                        t.data_mut()[idx] = base - 1e-3;
                    }
                    Ok(())
                })
                .unwrap();
                let denom = (base + 1e-3) as f64 - (base - 1e-3) as f64;
                let numeric = (loss(&mp) - loss(&mm)) / denom;
                let analytic = grads.get(name).unwrap().data()[idx] as f64;
                let tol = 1e-4 + 1e-3 * analytic.abs().max(numeric.abs());
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "{name}[{idx}]: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn eval_trace_has_structural_zero_pattern() {
        let model = ready_model(&mlp_spec(), 41);
        let x = rand_batch(vec![12], 9);
        let (_, trace) = model.forward_eval_traced(&x, 0).unwrap();
        // Layer 0: 4 blocks of 3 units -> 4 * 2 zeros; layer 1: 2 * 1.
        let zeros0 = trace[0].data().iter().filter(|&&v| v == 0.0).count();
        let zeros1 = trace[1].data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros0, 4 * 2);
        assert_eq!(zeros1, 2 * 1);
    }

    #[test]
    fn maxpool_picks_window_maxima_and_routes_gradients() {
        let input = Tensor::from_vec(
            vec![1, 2, 4, 1],
            vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 9.0],
        )
        .unwrap();
        let (out, cache) = maxpool2_forward_batch(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 1]);
        assert_eq!(out.data(), &[5.0, 9.0]);
        let d_out = Tensor::from_vec(vec![1, 1, 2, 1], vec![0.5, -2.0]).unwrap();
        let d_in = maxpool2_backward_batch(&cache, &d_out).unwrap();
        assert_eq!(
            d_in.data(),
            &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, -2.0]
        );
    }

    #[test]
    fn maxpool_tie_keeps_first_in_scan_order() {
        let input = Tensor::from_vec(vec![1, 2, 2, 1], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let (out, cache) = maxpool2_forward_batch(&input).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(cache.argmax, vec![0]);
    }

    #[test]
    fn register_is_atomic_and_rejects_duplicates() {
        let mut model = ready_model(&mlp_spec(), 43);
        let mut rng = RngStream::new(7, StreamLabel::Init);
        assert!(matches!(
            model.register_task(0, &mut rng),
            Err(Error::TaskAlreadyRegistered(0))
        ));
        model.register_task(1, &mut rng).unwrap();
        assert_eq!(model.tasks().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn model_is_shareable_across_threads() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<Model>();
    }
}
