//! Time-delay network: a stack of temporal convolutions, each followed by
//! batch normalization and (except the last) ReLU.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cast, Scalar};
use crate::error::{LidError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdnnConfig {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    pub contexts: Vec<usize>,
    pub dilations: Vec<usize>,
    pub strides: Vec<usize>,
    pub bn_eps: f64,
}

impl Default for TdnnConfig {
    /// Five 256-wide layers and a 32-wide output layer; contexts 3,3,3,1,1,1.
    fn default() -> Self {
        TdnnConfig {
            input_dim: 16,
            layer_dims: vec![256, 256, 256, 256, 256, 32],
            contexts: vec![3, 3, 3, 1, 1, 1],
            dilations: vec![1; 6],
            strides: vec![1; 6],
            bn_eps: 1e-5,
        }
    }
}

impl TdnnConfig {
    /// Default architecture with the output layer sized to `n_classes`.
    pub fn for_classes(n_classes: usize) -> Self {
        let mut cfg = Self::default();
        *cfg.layer_dims.last_mut().unwrap() = n_classes;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_dims.len();
        if n < 2 {
            return Err(LidError::Config(
                "a TDNN needs at least two layers (representation + output)".into(),
            ));
        }
        if self.contexts.len() != n || self.dilations.len() != n || self.strides.len() != n {
            return Err(LidError::Config(
                "layer_dims, contexts, dilations and strides must have equal length".into(),
            ));
        }
        if self.input_dim == 0
            || self.layer_dims.contains(&0)
            || self.contexts.contains(&0)
            || self.dilations.contains(&0)
            || self.strides.contains(&0)
        {
            return Err(LidError::Config("all TDNN sizes must be positive".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(LidError::Config("bn_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn representation_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    /// Output frames for `t` input frames, or `None` if the input is too short.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for i in 0..self.layer_dims.len() {
            let span = (self.contexts[i] - 1) * self.dilations[i] + 1;
            if len < span {
                return None;
            }
            len = (len - span) / self.strides[i] + 1;
        }
        Some(len)
    }

    /// Closed-form trainable parameter count: per layer
    /// `context·in·out` weights, `out` biases, `2·out` batch-norm scale/shift.
    pub fn parameter_count(&self) -> usize {
        let mut in_dim = self.input_dim;
        let mut total = 0;
        for (i, &out) in self.layer_dims.iter().enumerate() {
            total += self.contexts[i] * in_dim * out + out + 2 * out;
            in_dim = out;
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdnnLayer<F> {
    pub context: usize,
    pub dilation: usize,
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `(context·in_dim) × out_dim`; rows `j·in_dim..(j+1)·in_dim` hold tap `j`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Scalar> TdnnLayer<F> {
    fn new(context: usize, dilation: usize, stride: usize, in_dim: usize, out_dim: usize) -> Self {
        TdnnLayer {
            context,
            dilation,
            stride,
            in_dim,
            out_dim,
            weight: Array2::zeros((context * in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
            gamma: Array1::ones(out_dim),
            beta: Array1::zeros(out_dim),
            running_mean: Array1::zeros(out_dim),
            running_var: Array1::ones(out_dim),
        }
    }

    fn out_len(&self, t: usize) -> usize {
        (t - (self.context - 1) * self.dilation - 1) / self.stride + 1
    }

    fn tap<'a>(&self, x: &'a Array2<F>, j: usize, t_out: usize) -> ArrayView2<'a, F> {
        let off = j * self.dilation;
        let end = off + (t_out - 1) * self.stride + 1;
        x.slice(s![off..end;self.stride, ..])
    }

    /// Affine temporal convolution of one sequence.
    fn conv(&self, x: &Array2<F>) -> Array2<F> {
        let t_out = self.out_len(x.nrows());
        let mut z = Array2::zeros((t_out, self.out_dim));
        z += &self.bias;
        for j in 0..self.context {
            let w = self.weight.slice(s![j * self.in_dim..(j + 1) * self.in_dim, ..]);
            general_mat_mul(F::one(), &self.tap(x, j, t_out), &w, F::one(), &mut z);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.gamma.len() + self.beta.len()
    }
}

/// Output of one forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct TdnnOutput<F> {
    /// Final-layer activations after batch norm (softmax inputs), T′ × classes.
    pub logits: Array2<F>,
    /// Post-activation output of the last hidden layer, T′ × repr dim.
    pub representation: Array2<F>,
}

impl<F: Scalar> TdnnOutput<F> {
    /// Row-wise softmax of the logits, computed in `f64`.
    pub fn posterior(&self) -> Array2<f64> {
        softmax_rows(&self.logits.mapv(|v| v.to_f64().unwrap()))
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Per-layer quantities kept for the backward pass.
pub struct LayerCache<F> {
    input: Vec<Array2<F>>,
    xhat: Vec<Array2<F>>,
    inv_std: Array1<F>,
}

/// Everything the backward pass needs from a training-mode forward pass.
pub struct BatchCache<F> {
    layers: Vec<LayerCache<F>>,
    pub logits: Vec<Array2<F>>,
    /// Per layer: batch mean and unbiased batch variance.
    pub batch_stats: Vec<(Array1<F>, Array1<F>)>,
}

impl<F: Scalar> BatchCache<F> {
    /// Smallest |γ·x̂ + β| feeding any ReLU. Finite-difference checks are
    /// only meaningful when this exceeds the step size.
    pub fn relu_margin(&self, net: &Tdnn<F>) -> f64 {
        let n = net.layers.len();
        let mut m = f64::INFINITY;
        for (lc, l) in self.layers[..n - 1].iter().zip(&net.layers) {
            for xh in &lc.xhat {
                ndarray::Zip::from(xh)
                    .and_broadcast(&l.gamma)
                    .and_broadcast(&l.beta)
                    .for_each(|&x, &g, &b| m = m.min((g * x + b).to_f64().unwrap().abs()));
            }
        }
        m
    }
}

/// Gradients mirroring the trainable parameters of each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct Tdnn<F> {
    pub config: TdnnConfig,
    pub layers: Vec<TdnnLayer<F>>,
}

fn relu_inplace<F: Scalar>(a: &mut Array2<F>) {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

impl<F: Scalar> Tdnn<F> {
    /// Zero weights, unit batch-norm scale; see [`Tdnn::init`].
    pub fn zeros(config: TdnnConfig) -> Result<Self> {
        config.validate()?;
        let mut in_dim = config.input_dim;
        let layers = (0..config.layer_dims.len())
            .map(|i| {
                let out = config.layer_dims[i];
                let l = TdnnLayer::new(
                    config.contexts[i],
                    config.dilations[i],
                    config.strides[i],
                    in_dim,
                    out,
                );
                in_dim = out;
                l
            })
            .collect();
        Ok(Tdnn { config, layers })
    }

    /// He-uniform fan-in initialization of the convolution weights.
    pub fn init(config: TdnnConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.context * layer.in_dim) as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| cast(rng.random_range(-bound..bound)));
        }
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(TdnnLayer::param_count).sum()
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(LidError::Shape(format!(
                "expected {}-dim frames, got {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        if self.config.output_len(x.nrows()).is_none_or(|t| t == 0) {
            return Err(LidError::Shape(format!(
                "{} frames are too few for the network's temporal context",
                x.nrows()
            )));
        }
        Ok(())
    }

    /// Forward pass over one sequence. In [`Mode::Train`] the sequence's own
    /// frames form the normalization batch and running statistics are not
    /// touched, so this is a pure function in both modes.
    pub fn forward(&self, x: ArrayView2<F>, mode: Mode) -> Result<TdnnOutput<F>> {
        self.check_input(&x)?;
        match mode {
            Mode::Eval => Ok(self.forward_eval(x)),
            Mode::Train => {
                let cache = self.forward_train(&[x.to_owned()])?;
                let logits = cache.logits.into_iter().next().unwrap();
                let n = self.layers.len();
                let repr_cache = &cache.layers[n - 1];
                Ok(TdnnOutput {
                    logits,
                    representation: repr_cache.input[0].clone(),
                })
            }
        }
    }

    fn forward_eval(&self, x: ArrayView2<F>) -> TdnnOutput<F> {
        let n = self.layers.len();
        let mut a = x.to_owned();
        let mut representation = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.conv(&a);
            let eps = cast::<F>(self.config.bn_eps);
            let scale: Array1<F> = layer
                .gamma
                .iter()
                .zip(&layer.running_var)
                .map(|(&g, &v)| g / (v + eps).sqrt())
                .collect();
            let shift: Array1<F> = layer
                .beta
                .iter()
                .zip(&layer.running_mean)
                .zip(&scale)
                .map(|((&b, &m), &s)| b - m * s)
                .collect();
            z *= &scale;
            z += &shift;
            if i + 1 < n {
                relu_inplace(&mut z);
            }
            if i + 2 == n {
                representation = Some(z.clone());
            }
            a = z;
        }
        TdnnOutput {
            logits: a,
            representation: representation.expect("at least two layers"),
        }
    }

    /// Training-mode forward pass over a batch of equal-config sequences.
    /// Batch-norm statistics pool every frame of every sequence.
    pub fn forward_train(&self, xs: &[Array2<F>]) -> Result<BatchCache<F>> {
        if xs.is_empty() {
            return Err(LidError::EmptyInput("empty training batch".into()));
        }
        for x in xs {
            self.check_input(&x.view())?;
        }
        let n = self.layers.len();
        let eps = self.config.bn_eps;
        let mut acts: Vec<Array2<F>> = xs.to_vec();
        let mut layers = Vec::with_capacity(n);
        let mut batch_stats = Vec::with_capacity(n);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut zs: Vec<Array2<F>> = acts.par_iter().map(|x| layer.conv(x)).collect();
            let rows: usize = zs.iter().map(|z| z.nrows()).sum();
            let mut sum = vec![0.0f64; layer.out_dim];
            for z in &zs {
                for row in z.rows() {
                    for (s, v) in sum.iter_mut().zip(row) {
                        *s += v.to_f64().unwrap();
                    }
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
            let mut sq = vec![0.0f64; layer.out_dim];
            for z in &zs {
                for row in z.rows() {
                    for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                        let d = v.to_f64().unwrap() - m;
                        *s += d * d;
                    }
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
            let unbiased: Array1<F> = sq
                .iter()
                .map(|s| cast(s / (rows.max(2) - 1) as f64))
                .collect();
            let inv_std: Array1<F> = var.iter().map(|v| cast(1.0 / (v + eps).sqrt())).collect();
            let mean_f: Array1<F> = mean.iter().map(|&m| cast(m)).collect();
            zs.par_iter_mut().for_each(|z| {
                *z -= &mean_f;
                *z *= &inv_std;
            });
            let xhat = zs;
            let last = i + 1 == n;
            let outs: Vec<Array2<F>> = xhat
                .par_iter()
                .map(|xh| {
                    let mut y = xh * &layer.gamma;
                    y += &layer.beta;
                    if !last {
                        relu_inplace(&mut y);
                    }
                    y
                })
                .collect();
            let input = std::mem::replace(&mut acts, outs);
            layers.push(LayerCache {
                input,
                xhat,
                inv_std,
            });
            batch_stats.push((mean_f, unbiased));
        }
        Ok(BatchCache {
            layers,
            logits: acts,
            batch_stats,
        })
    }

    /// Reverse-mode gradients of a scalar loss given `d loss / d logits`.
    pub fn backward(&self, cache: &BatchCache<F>, dlogits: Vec<Array2<F>>) -> Vec<LayerGrads<F>> {
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrads<F>>> = vec![None; n];
        let mut upstream = dlogits;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let lc = &cache.layers[i];
            let last = i + 1 == n;

            // Through ReLU (mask recomputed from x̂) and the batch-norm affine.
            let dy: Vec<Array2<F>> = upstream
                .into_par_iter()
                .zip(lc.xhat.par_iter())
                .map(|(mut d, xh)| {
                    if !last {
                        ndarray::Zip::from(&mut d).and(xh).and_broadcast(&layer.gamma).and_broadcast(&layer.beta).for_each(
                            |d, &x, &g, &b| {
                                if g * x + b <= F::zero() {
                                    *d = F::zero();
                                }
                            },
                        );
                    }
                    d
                })
                .collect();

            let rows: usize = dy.iter().map(|d| d.nrows()).sum();
            let mut dbeta = vec![0.0f64; layer.out_dim];
            let mut dgamma = vec![0.0f64; layer.out_dim];
            for (d, xh) in dy.iter().zip(&lc.xhat) {
                for (drow, xrow) in d.rows().into_iter().zip(xh.rows()) {
                    for o in 0..layer.out_dim {
                        let dv = drow[o].to_f64().unwrap();
                        dbeta[o] += dv;
                        dgamma[o] += dv * xrow[o].to_f64().unwrap();
                    }
                }
            }
            // dx̂ = dy·γ, so Σdx̂ = γ·dβ and Σ(dx̂ ⊙ x̂) = γ·dγ.
            let nf = rows as f64;
            let mean_dxhat: Array1<F> = (0..layer.out_dim)
                .map(|o| cast(layer.gamma[o].to_f64().unwrap() * dbeta[o] / nf))
                .collect();
            let mean_dxhat_xhat: Array1<F> = (0..layer.out_dim)
                .map(|o| cast(layer.gamma[o].to_f64().unwrap() * dgamma[o] / nf))
                .collect();
            let dz: Vec<Array2<F>> = dy
                .into_par_iter()
                .zip(lc.xhat.par_iter())
                .map(|(d, xh)| {
                    let mut dz = d;
                    ndarray::Zip::from(&mut dz)
                        .and(xh)
                        .and_broadcast(&layer.gamma)
                        .and_broadcast(&lc.inv_std)
                        .and_broadcast(&mean_dxhat)
                        .and_broadcast(&mean_dxhat_xhat)
                        .for_each(|dz, &x, &g, &inv, &m1, &m2| {
                            // inv_std · (dx̂ − mean(dx̂) − x̂·mean(dx̂ ⊙ x̂)), with dx̂ = dy·γ
                            *dz = inv * (*dz * g - m1 - x * m2);
                        });
                    dz
                })
                .collect();

            // Convolution: weights, bias, and the gradient flowing to the input.
            let t_out = dz[0].nrows();
            let mut dweight = Array2::<F>::zeros(layer.weight.raw_dim());
            const CHUNK: usize = 8;
            let partials: Vec<Array2<F>> = lc
                .input
                .par_chunks(CHUNK)
                .zip(dz.par_chunks(CHUNK))
                .map(|(xs, ds)| {
                    let mut dw = Array2::<F>::zeros(layer.weight.raw_dim());
                    for (x, d) in xs.iter().zip(ds) {
                        for j in 0..layer.context {
                            let mut block =
                                dw.slice_mut(s![j * layer.in_dim..(j + 1) * layer.in_dim, ..]);
                            general_mat_mul(F::one(), &layer.tap(x, j, t_out).t(), d, F::one(), &mut block);
                        }
                    }
                    dw
                })
                .collect();
            for p in partials {
                dweight += &p;
            }
            let mut dbias = Array1::<F>::zeros(layer.out_dim);
            for d in &dz {
                dbias += &d.sum_axis(Axis(0));
            }

            upstream = if i > 0 {
                lc.input
                    .par_iter()
                    .zip(dz.par_iter())
                    .map(|(x, d)| {
                        let mut dx = Array2::<F>::zeros(x.raw_dim());
                        for j in 0..layer.context {
                            let off = j * layer.dilation;
                            let end = off + (t_out - 1) * layer.stride + 1;
                            let w = layer
                                .weight
                                .slice(s![j * layer.in_dim..(j + 1) * layer.in_dim, ..]);
                            let mut dst = dx.slice_mut(s![off..end;layer.stride, ..]);
                            general_mat_mul(F::one(), d, &w.t(), F::one(), &mut dst);
                        }
                        dx
                    })
                    .collect()
            } else {
                Vec::new()
            };

            grads[i] = Some(LayerGrads {
                weight: dweight,
                bias: dbias,
                gamma: dgamma.iter().map(|&v| cast(v)).collect(),
                beta: dbeta.iter().map(|&v| cast(v)).collect(),
            });
        }
        grads.into_iter().map(|g| g.unwrap()).collect()
    }

    /// Blends batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(Array1<F>, Array1<F>)], momentum: f64) {
        let m: F = cast(momentum);
        let keep = F::one() - m;
        for (layer, (mean, var)) in self.layers.iter_mut().zip(stats) {
            layer.running_mean = &layer.running_mean * keep + mean * m;
            layer.running_var = &layer.running_var * keep + var * m;
        }
    }
}

/// Mean frame-level cross-entropy of softmax(logits) against per-sequence
/// labels broadcast to every frame, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &[Array2<F>],
    labels: &[usize],
) -> (f64, Vec<Array2<F>>) {
    let total: usize = logits.iter().map(|l| l.nrows()).sum();
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let p = softmax_rows(&l.mapv(|v| v.to_f64().unwrap()));
        let mut g = Array2::<F>::zeros(l.raw_dim());
        for (t, row) in p.rows().into_iter().enumerate() {
            loss -= row[y].max(1e-300).ln();
            for (c, &pc) in row.iter().enumerate() {
                let target = if c == y { 1.0 } else { 0.0 };
                g[[t, c]] = cast((pc - target) / total as f64);
            }
        }
        grads.push(g);
    }
    (loss / total as f64, grads)
}
