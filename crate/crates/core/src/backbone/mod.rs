//! Feed-forward feature extractor with hand-written backprop.
//!
//! Each layer is `dense -> [batch norm] -> [relu]`. Batch normalization runs
//! in one of two inference modes: conventional (running statistics) or
//! transductive (statistics of the batch being embedded, which for few-shot
//! episodes is the support and query sets together). Training always uses
//! batch statistics and folds them into the running estimates.

mod checkpoint;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{from_json, load_checkpoint, save_checkpoint, to_json, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// How batch normalization computes its statistics outside of training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Running statistics accumulated during training.
    Conventional,
    /// Statistics of the batch itself (support and query together).
    Transductive,
}

impl BnMode {
    pub fn short_name(self) -> &'static str {
        match self {
            BnMode::Conventional => "cbn",
            BnMode::Transductive => "tbn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input dimension, hidden widths, then the output (feature) dimension.
    pub layer_sizes: Vec<usize>,
    pub batch_norm: bool,
    pub momentum: f64,
    pub bn_eps: f64,
}

impl BackboneConfig {
    /// Two hidden layers of width 64, output dimension 16.
    pub fn mlp(input_dim: usize) -> Self {
        Self {
            layer_sizes: vec![input_dim, 64, 64, 16],
            batch_norm: true,
            momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum,
            eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Weights and normalization state of the feature extractor.
#[derive(Debug)]
pub struct BackboneParams {
    layers: Vec<Layer>,
    // identifies this parameter set for cache validation; bumped by every update
    id: u64,
    generation: u64,
}

impl Clone for BackboneParams {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for BackboneParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Where batch normalization takes its statistics from during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stats {
    Batch,
    Running,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Array2<f64>,
    // normalized pre-activation (x-hat); None when the layer has no BN
    normalized: Option<Array2<f64>>,
    batch_mean: Option<Array1<f64>>,
    batch_var: Option<Array1<f64>>,
    inv_std: Option<Array1<f64>>,
    // output of the affine/BN stage, before relu
    pre_activation: Array2<f64>,
}

/// Intermediates of one forward pass, consumed by [`BackboneParams::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    params_id: u64,
    generation: u64,
    training: bool,
    stats: Stats,
    batch_size: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn training(&self) -> bool {
        self.training
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// Gradients of a scalar loss with respect to every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<LayerGradients>,
}

impl ParamGradients {
    pub fn zeros_like(params: &BackboneParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    gamma: l.norm.as_ref().map(|n| Array1::zeros(n.gamma.len())),
                    beta: l.norm.as_ref().map(|n| Array1::zeros(n.beta.len())),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension {
                what: "gradient layer count",
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.raw_dim() != b.weight.raw_dim() {
                return Err(Error::Input("gradient shapes differ".into()));
            }
            a.weight += &b.weight;
            a.bias += &b.bias;
            if let (Some(x), Some(y)) = (a.gamma.as_mut(), b.gamma.as_ref()) {
                *x += y;
            }
            if let (Some(x), Some(y)) = (a.beta.as_mut(), b.beta.as_ref()) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Visit every gradient tensor as a flat slice, in the same order as
    /// [`BackboneParams::visit_trainable_mut`].
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        for (l, g) in self.layers.iter().enumerate() {
            f(&format!("layer{l}.weight"), g.weight.as_standard_layout().as_slice().expect("standard layout"));
            f(&format!("layer{l}.bias"), g.bias.as_standard_layout().as_slice().expect("standard layout"));
            if let Some(gamma) = &g.gamma {
                f(&format!("layer{l}.gamma"), gamma.as_standard_layout().as_slice().expect("standard layout"));
            }
            if let Some(beta) = &g.beta {
                f(&format!("layer{l}.beta"), beta.as_standard_layout().as_slice().expect("standard layout"));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

impl BackboneParams {
    /// He-style uniform initialization from a seeded generator.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        if config.layer_sizes.len() < 2 || config.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must list at least input and output, all positive: {:?}",
                config.layer_sizes
            )));
        }
        if !(config.momentum > 0.0 && config.momentum < 1.0) {
            return Err(Error::Config(format!(
                "batch-norm momentum must lie in (0, 1), got {}",
                config.momentum
            )));
        }
        if !(config.bn_eps > 0.0) {
            return Err(Error::Config("batch-norm eps must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = config.layer_sizes.len() - 1;
        let layers = config
            .layer_sizes
            .windows(2)
            .enumerate()
            .map(|(idx, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
                let hidden = idx + 1 < n_layers;
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    norm: (hidden && config.batch_norm)
                        .then(|| BatchNorm::new(fan_out, config.momentum, config.bn_eps)),
                    relu: hidden,
                }
            })
            .collect();
        Ok(Self::from_layers(layers))
    }

    /// A single `d x d` identity layer, optionally followed by batch norm
    /// (unit scale, zero shift, running mean 0 and variance 1).
    pub fn identity(dim: usize, batch_norm: bool) -> Self {
        Self::from_layers(vec![Layer {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            norm: batch_norm.then(|| BatchNorm::new(dim, 0.1, 1e-5)),
            relu: false,
        }])
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.norm.is_some())
    }

    /// Checks that consecutive layer shapes chain and BN state is valid.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Checkpoint("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Checkpoint(format!("layer {i}: bias length mismatch")));
            }
            if i > 0 && self.layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: input {} does not match previous output {}",
                    l.in_dim(),
                    self.layers[i - 1].out_dim()
                )));
            }
            if let Some(n) = &l.norm {
                let w = l.out_dim();
                if [n.gamma.len(), n.beta.len(), n.running_mean.len(), n.running_var.len()]
                    .iter()
                    .any(|&len| len != w)
                {
                    return Err(Error::Checkpoint(format!("layer {i}: batch-norm width mismatch")));
                }
                if n.running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::Checkpoint(format!(
                        "layer {i}: running variance must be positive"
                    )));
                }
                if !(n.momentum > 0.0 && n.momentum < 1.0) || !(n.eps > 0.0) {
                    return Err(Error::Checkpoint(format!("layer {i}: bad momentum or eps")));
                }
            }
        }
        Ok(())
    }

    /// Forward pass. With `training` set, batch statistics are used and folded
    /// into the running estimates; otherwise `mode` decides.
    pub fn forward(
        &mut self,
        batch: ArrayView2<f64>,
        mode: BnMode,
        training: bool,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache) = self.forward_pure(batch, mode, training)?;
        if training {
            self.absorb_batch_stats(&cache);
        }
        Ok((out, cache))
    }

    /// Same as [`forward`](Self::forward) but never touches running statistics.
    pub fn forward_pure(
        &self,
        batch: ArrayView2<f64>,
        mode: BnMode,
        training: bool,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let stats = if training || mode == BnMode::Transductive {
            Stats::Batch
        } else {
            Stats::Running
        };
        self.run(batch, stats, training)
    }

    /// Inference-only embedding.
    pub fn embed(&self, batch: ArrayView2<f64>, mode: BnMode) -> Result<Array2<f64>> {
        Ok(self.forward_pure(batch, mode, false)?.0)
    }

    fn run(&self, batch: ArrayView2<f64>, stats: Stats, training: bool) -> Result<(Array2<f64>, ForwardCache)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                what: "batch feature dimension",
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        let n = batch.nrows();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if stats == Stats::Batch && self.has_batch_norm() && n < 2 {
            return Err(Error::Input(
                "batch statistics need at least 2 samples (variance undefined)".into(),
            ));
        }

        let mut x = batch.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = x;
            let mut h = input.dot(&layer.weight) + &layer.bias;
            let mut cache = LayerCache {
                input,
                normalized: None,
                batch_mean: None,
                batch_var: None,
                inv_std: None,
                pre_activation: Array2::zeros((0, 0)),
            };
            if let Some(bn) = &layer.norm {
                let (mean, var) = match stats {
                    Stats::Batch => {
                        let mean = h.mean_axis(Axis(0)).expect("non-empty batch");
                        let var = (&h - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty");
                        (mean, var)
                    }
                    Stats::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                let xhat = (&h - &mean) * &inv_std;
                h = &xhat * &bn.gamma + &bn.beta;
                cache.normalized = Some(xhat);
                cache.inv_std = Some(inv_std);
                if stats == Stats::Batch {
                    cache.batch_mean = Some(mean);
                    cache.batch_var = Some(var);
                }
            }
            cache.pre_activation = h.clone();
            if layer.relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
            caches.push(cache);
            x = h;
        }
        Ok((
            x,
            ForwardCache {
                params_id: self.id,
                generation: self.generation,
                training,
                stats,
                batch_size: n,
                layers: caches,
            },
        ))
    }

    /// Fold the batch statistics recorded in `cache` into the running estimates
    /// (exponential moving average; unbiased variance).
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.stats != Stats::Batch || cache.params_id != self.id {
            return;
        }
        let n = cache.batch_size as f64;
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some(mean), Some(var)) =
                (layer.norm.as_mut(), lc.batch_mean.as_ref(), lc.batch_var.as_ref())
            {
                let m = bn.momentum;
                bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
                let unbiased = var * (n / (n - 1.0));
                bn.running_var = &bn.running_var * (1.0 - m) + &unbiased * m;
            }
        }
    }

    /// Backpropagate `grad_output` (dLoss/dOutput) through a training-mode pass.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> Result<ParamGradients> {
        if !cache.training {
            return Err(Error::StaleCache("cache was not produced in training mode".into()));
        }
        if cache.params_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count differs".into()));
        }
        if grad_output.dim() != (cache.batch_size, self.output_dim()) {
            return Err(Error::StaleCache(format!(
                "grad_output shape {:?} does not match batch {} x {}",
                grad_output.dim(),
                cache.batch_size,
                self.output_dim()
            )));
        }

        let n = cache.batch_size as f64;
        let mut grad = grad_output.to_owned();
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if layer.relu {
                grad.zip_mut_with(&lc.pre_activation, |g, z| {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let (mut g_gamma, mut g_beta) = (None, None);
            if let Some(bn) = &layer.norm {
                let xhat = lc.normalized.as_ref().expect("bn cache");
                let inv_std = lc.inv_std.as_ref().expect("bn cache");
                g_gamma = Some((&grad * xhat).sum_axis(Axis(0)));
                g_beta = Some(grad.sum_axis(Axis(0)));
                let dxhat = &grad * &bn.gamma;
                grad = match cache.stats {
                    Stats::Batch => {
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                        let centered = &dxhat * n - &sum_d - &(xhat * &sum_dx);
                        centered * &(inv_std / n)
                    }
                    Stats::Running => dxhat * inv_std,
                };
            }
            let g_weight = lc.input.t().dot(&grad);
            let g_bias = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weight.t());
            out.push(LayerGradients {
                weight: g_weight,
                bias: g_bias,
                gamma: g_gamma,
                beta: g_beta,
            });
        }
        out.reverse();
        Ok(ParamGradients { layers: out })
    }

    /// Plain gradient step on all trainable tensors. Running statistics are
    /// left alone.
    pub fn sgd_step(&mut self, grads: &ParamGradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradients".into()));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Dimension {
                what: "gradient layer count",
                expected: self.layers.len(),
                got: grads.layers.len(),
            });
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            if l.weight.raw_dim() != g.weight.raw_dim()
                || l.bias.len() != g.bias.len()
                || l.norm.is_some() != g.gamma.is_some()
            {
                return Err(Error::Input("gradient shapes do not match parameters".into()));
            }
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.scaled_add(-lr, &g.weight);
            l.bias.scaled_add(-lr, &g.bias);
            if let (Some(bn), Some(gg), Some(gb)) = (l.norm.as_mut(), &g.gamma, &g.beta) {
                bn.gamma.scaled_add(-lr, gg);
                bn.beta.scaled_add(-lr, gb);
            }
        }
        self.generation += 1;
        Ok(())
    }

    /// Visit every trainable tensor as a mutable flat slice.
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        self.generation += 1;
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), l.weight.as_slice_mut().expect("standard layout"));
            f(&format!("layer{i}.bias"), l.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = l.norm.as_mut() {
                f(&format!("layer{i}.gamma"), bn.gamma.as_slice_mut().expect("standard layout"));
                f(&format!("layer{i}.beta"), bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn batch(seed: u64, n: usize, d: usize, scale: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    fn small_config(d_in: usize) -> BackboneConfig {
        BackboneConfig {
            layer_sizes: vec![d_in, 5, 4, 3],
            ..BackboneConfig::mlp(d_in)
        }
    }

    /// Scalar loss used by the finite-difference checks: sum(out * weights).
    fn probe_loss(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (out * w).sum()
    }

    #[test]
    fn identity_passes_input_through() {
        let p = BackboneParams::identity(4, false);
        let x = batch(1, 6, 4, 3.0);
        assert_eq!(p.embed(x.view(), BnMode::Conventional).unwrap(), x);
        assert_eq!(p.embed(x.view(), BnMode::Transductive).unwrap(), x);
    }

    #[test]
    fn transductive_bn_matches_definition() {
        let mut p = BackboneParams::init(&small_config(6), 7).unwrap();
        for layer in p.layers_mut() {
            if let Some(bn) = layer.norm.as_mut() {
                bn.gamma.fill(1.7);
                bn.beta.fill(-0.4);
                // drop the relu so the post-BN activations are the output of this probe
                layer.relu = false;
            }
        }
        let x = batch(2, 12, 6, 4.0);
        let (_, cache) = p.forward_pure(x.view(), BnMode::Transductive, false).unwrap();
        for lc in cache.layers.iter().filter(|lc| lc.normalized.is_some()) {
            let y = &lc.pre_activation;
            let mean = y.mean_axis(Axis(0)).unwrap();
            let std = y.std_axis(Axis(0), 0.0);
            let var_in = lc.batch_var.as_ref().unwrap();
            for k in 0..y.ncols() {
                // skip near-constant features where eps dominates the variance
                if var_in[k] < 1e-2 {
                    continue;
                }
                assert!((mean[k] + 0.4).abs() < 1e-5, "mean {}", mean[k]);
                let expected = 1.7 * (var_in[k] / (var_in[k] + 1e-5)).sqrt();
                assert!((std[k] - expected).abs() < 1e-9);
                assert!((std[k] - 1.7).abs() < 1e-5 * 1.7 / var_in[k].min(1.0));
            }
        }
    }

    #[test]
    fn transductive_needs_two_samples() {
        let p = BackboneParams::init(&small_config(3), 1).unwrap();
        let x = batch(3, 1, 3, 1.0);
        assert!(p.embed(x.view(), BnMode::Transductive).is_err());
        assert!(p.embed(x.view(), BnMode::Conventional).is_ok());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = BackboneConfig::mlp(8);
        let a = BackboneParams::init(&cfg, 42).unwrap();
        let b = BackboneParams::init(&cfg, 42).unwrap();
        let x = batch(9, 10, 8, 1.0);
        let ya = a.embed(x.view(), BnMode::Transductive).unwrap();
        let yb = b.embed(x.view(), BnMode::Transductive).unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn training_updates_running_stats_inference_does_not() {
        let mut p = BackboneParams::init(&small_config(3), 4).unwrap();
        let before = p.layers()[0].norm.clone().unwrap();
        let x = batch(5, 8, 3, 2.0);
        p.forward(x.view(), BnMode::Transductive, false).unwrap();
        assert_eq!(p.layers()[0].norm.as_ref().unwrap(), &before);
        let (_, cache) = p.forward(x.view(), BnMode::Conventional, true).unwrap();
        let after = p.layers()[0].norm.clone().unwrap();
        let h = x.dot(&p.layers()[0].weight) + &p.layers()[0].bias;
        let mean = h.mean_axis(Axis(0)).unwrap();
        let var = h.var_axis(Axis(0), 1.0);
        for k in 0..mean.len() {
            assert!((after.running_mean[k] - 0.1 * mean[k]).abs() < 1e-12);
            assert!((after.running_var[k] - (0.9 + 0.1 * var[k])).abs() < 1e-12);
        }
        assert!(cache.training());
    }

    #[test]
    fn conventional_inference_is_per_sample() {
        let p = BackboneParams::init(&small_config(4), 11).unwrap();
        let shared = batch(1, 1, 4, 1.0);
        let mut a = batch(2, 5, 4, 1.0);
        let mut b = batch(3, 7, 4, 5.0);
        a.row_mut(2).assign(&shared.row(0));
        b.row_mut(6).assign(&shared.row(0));
        let ya = p.embed(a.view(), BnMode::Conventional).unwrap();
        let yb = p.embed(b.view(), BnMode::Conventional).unwrap();
        assert_eq!(ya.row(2), yb.row(6));
    }

    #[test]
    fn transductive_couples_support_to_query() {
        let p = BackboneParams::init(&small_config(4), 12).unwrap();
        let mut joint = batch(4, 9, 4, 1.0);
        let before = p.embed(joint.view(), BnMode::Transductive).unwrap();
        // rows 0..3 are "support", perturb one "query" row
        joint.row_mut(7).mapv_inplace(|v| v + 3.0);
        let after = p.embed(joint.view(), BnMode::Transductive).unwrap();
        let moved = (0..3).any(|i| {
            before
                .row(i)
                .iter()
                .zip(after.row(i))
                .any(|(u, v)| (u - v).abs() > 1e-8)
        });
        assert!(moved);
    }

    #[test]
    fn zero_grad_output_gives_zero_gradients() {
        let mut p = BackboneParams::init(&small_config(3), 2).unwrap();
        let x = batch(1, 6, 3, 1.0);
        let (out, cache) = p.forward(x.view(), BnMode::Conventional, true).unwrap();
        let g = p.backward(&cache, Array2::zeros(out.raw_dim()).view()).unwrap();
        g.visit(|_, s| assert!(s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn linear_least_squares_gradient() {
        // One linear layer, loss = 0.5 * ||X W + b - Y||^2.
        let x = batch(1, 7, 3, 1.0);
        let y = batch(2, 7, 2, 1.0);
        let w = batch(3, 3, 2, 1.0);
        let b = ndarray::array![0.3, -0.2];
        let p = BackboneParams::from_layers(vec![Layer {
            weight: w.clone(),
            bias: b.clone(),
            norm: None,
            relu: false,
        }]);
        let (out, cache) = p.forward_pure(x.view(), BnMode::Conventional, true).unwrap();
        let residual = &out - &y;
        let g = p.backward(&cache, residual.view()).unwrap();
        let expected_w = x.t().dot(&(x.dot(&w) + &b - &y));
        let expected_b = (x.dot(&w) + &b - &y).sum_axis(Axis(0));
        for (u, v) in g.layers[0].weight.iter().zip(expected_w.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        for (u, v) in g.layers[0].bias.iter().zip(expected_b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn fd_check(cfg: &BackboneConfig, seed: u64) {
        let mut p = BackboneParams::init(cfg, seed).unwrap();
        // give BN non-trivial affine params
        for (i, layer) in p.layers_mut().iter_mut().enumerate() {
            if let Some(bn) = layer.norm.as_mut() {
                bn.gamma.mapv_inplace(|g| g + 0.1 * (i as f64 + 1.0));
                bn.beta.mapv_inplace(|b| b - 0.05);
            }
        }
        let x = batch(seed + 100, 6, cfg.layer_sizes[0], 1.0);
        let probe = batch(seed + 200, 6, *cfg.layer_sizes.last().unwrap(), 1.0);
        let (_, cache) = p.forward_pure(x.view(), BnMode::Transductive, true).unwrap();
        let analytic = p.backward(&cache, probe.view()).unwrap();

        let mut flat_analytic = Vec::new();
        analytic.visit(|name, s| flat_analytic.push((name.to_string(), s.to_vec())));

        let h = 1e-4;
        let mut numeric: Vec<Vec<f64>> = flat_analytic.iter().map(|(_, v)| vec![0.0; v.len()]).collect();
        for (t, slot) in numeric.iter_mut().enumerate() {
            for (k, out) in slot.iter_mut().enumerate() {
                let eval_at = |delta: f64| {
                    let mut q = p.clone();
                    let mut idx = 0;
                    q.visit_trainable_mut(|_, s| {
                        if idx == t {
                            s[k] += delta;
                        }
                        idx += 1;
                    });
                    let (out, _) = q.forward_pure(x.view(), BnMode::Transductive, true).unwrap();
                    probe_loss(&out, &probe)
                };
                *out = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            }
        }
        for ((name, a), n) in flat_analytic.iter().zip(&numeric) {
            let diff: f64 = a.iter().zip(n).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|u| u * u).sum::<f64>().sqrt().max(n.iter().map(|u| u * u).sum::<f64>().sqrt());
            let rel = diff / scale.max(1e-6);
            assert!(rel < 1e-4, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn finite_difference_two_layer_with_bn() {
        let cfg = BackboneConfig {
            layer_sizes: vec![4, 6, 3],
            ..BackboneConfig::mlp(4)
        };
        fd_check(&cfg, 3);
    }

    #[test]
    fn finite_difference_default_depth() {
        fd_check(&small_config(5), 8);
    }

    #[test]
    fn backward_rejects_stale_and_inference_caches() {
        let mut p = BackboneParams::init(&small_config(3), 2).unwrap();
        let x = batch(1, 6, 3, 1.0);
        let (out, infer_cache) = p.forward_pure(x.view(), BnMode::Transductive, false).unwrap();
        assert!(matches!(p.backward(&infer_cache, out.view()), Err(Error::StaleCache(_))));

        let (out, cache) = p.forward(x.view(), BnMode::Conventional, true).unwrap();
        let g = p.backward(&cache, out.view()).unwrap();
        p.sgd_step(&g, 0.01).unwrap();
        assert!(matches!(p.backward(&cache, out.view()), Err(Error::StaleCache(_))));

        let other = p.clone();
        let (out, cache) = p.forward(x.view(), BnMode::Conventional, true).unwrap();
        assert!(matches!(other.backward(&cache, out.view()), Err(Error::StaleCache(_))));
        let wrong = Array2::zeros((5, 3));
        assert!(matches!(p.backward(&cache, wrong.view()), Err(Error::StaleCache(_))));
    }

    #[test]
    fn sgd_zero_grads_unchanged() {
        let mut p = BackboneParams::init(&small_config(3), 5).unwrap();
        let before = p.clone();
        p.sgd_step(&ParamGradients::zeros_like(&p), 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_unit_step_on_params_zeroes_weights() {
        let mut p = BackboneParams::init(&small_config(3), 5).unwrap();
        let mut g = ParamGradients::zeros_like(&p);
        for (gl, l) in g.layers.iter_mut().zip(p.layers()) {
            gl.weight.assign(&l.weight);
            gl.bias.assign(&l.bias);
            if let Some(bn) = &l.norm {
                gl.gamma.as_mut().unwrap().assign(&bn.gamma);
                gl.beta.as_mut().unwrap().assign(&bn.beta);
            }
        }
        let running_before: Vec<_> = p.layers().iter().map(|l| l.norm.as_ref().map(|n| n.running_var.clone())).collect();
        p.sgd_step(&g, 1.0).unwrap();
        p.visit_trainable_mut(|_, s| assert!(s.iter().all(|v| *v == 0.0)));
        let running_after: Vec<_> = p.layers().iter().map(|l| l.norm.as_ref().map(|n| n.running_var.clone())).collect();
        assert_eq!(running_before, running_after);
    }

    #[test]
    fn sgd_two_half_steps_equal_one_step() {
        let mut p = BackboneParams::init(&small_config(3), 6).unwrap();
        let x = batch(1, 6, 3, 1.0);
        let (out, cache) = p.forward_pure(x.view(), BnMode::Conventional, true).unwrap();
        let g = p.backward(&cache, out.view()).unwrap();
        let mut once = p.clone();
        once.sgd_step(&g, 0.2).unwrap();
        p.sgd_step(&g, 0.1).unwrap();
        p.sgd_step(&g, 0.1).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        once.visit_trainable_mut(|_, s| a.extend_from_slice(s));
        p.visit_trainable_mut(|_, s| b.extend_from_slice(s));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = BackboneParams::init(&small_config(3), 5).unwrap();
        let mut g = ParamGradients::zeros_like(&p);
        g.layers[1].bias[0] = f64::NAN;
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::NonFinite(_))));
        let g = ParamGradients::zeros_like(&p);
        assert!(p.sgd_step(&g, -1.0).is_err());
    }

    #[test]
    fn init_validates_config() {
        let mut cfg = BackboneConfig::mlp(4);
        cfg.momentum = 1.0;
        assert!(BackboneParams::init(&cfg, 0).is_err());
        cfg = BackboneConfig::mlp(4);
        cfg.layer_sizes = vec![4];
        assert!(BackboneParams::init(&cfg, 0).is_err());
    }
}
