use serde::{Deserialize, Serialize};

use super::{cast, LayerGrads, Scalar, Tdnn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to convolution weights only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every trainable tensor, in declaration order.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

fn tensors_mut<F: Scalar>(net: &mut Tdnn<F>) -> Vec<(&mut [F], bool)> {
    let mut out = Vec::new();
    for l in &mut net.layers {
        out.push((l.weight.as_slice_mut().unwrap(), true));
        out.push((l.bias.as_slice_mut().unwrap(), false));
        out.push((l.gamma.as_slice_mut().unwrap(), false));
        out.push((l.beta.as_slice_mut().unwrap(), false));
    }
    out
}

fn grad_slices<F: Scalar>(grads: &[LayerGrads<F>]) -> Vec<&[F]> {
    let mut out = Vec::new();
    for g in grads {
        out.push(g.weight.as_slice().unwrap());
        out.push(g.bias.as_slice().unwrap());
        out.push(g.gamma.as_slice().unwrap());
        out.push(g.beta.as_slice().unwrap());
    }
    out
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, net: &Tdnn<F>) -> Self {
        let sizes: Vec<usize> = net
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len(), l.gamma.len(), l.beta.len()])
            .collect();
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn update(&mut self, net: &mut Tdnn<F>, grads: &[LayerGrads<F>]) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2): (F, F) = (cast(c.beta1), cast(c.beta2));
        let (lr, eps) = (c.lr, c.eps);
        let decay: F = cast(1.0 - c.lr * c.weight_decay);
        let step_size: F = cast(lr / bc1);
        let sqrt_bc2: F = cast(bc2.sqrt());
        let eps: F = cast(eps);
        let gs = grad_slices(grads);
        for (k, ((p, decayed), g)) in tensors_mut(net).into_iter().zip(gs).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                if decayed {
                    p[i] = p[i] * decay;
                }
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                p[i] = p[i] - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
        }
    }
}
