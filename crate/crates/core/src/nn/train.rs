use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, AdamW, AdamWConfig, LayerGrads, Mode, Scalar, Tdnn};
use crate::error::{LidError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 512,
            epochs: 15,
            seed: 0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(LidError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(LidError::Config("bn_momentum must lie in [0, 1]".into()));
        }
        if !(self.bn_eps > 0.0) || !(self.optimizer.lr > 0.0) {
            return Err(LidError::Config("bn_eps and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub batches: usize,
}

/// Mean of the frame posteriors.
pub fn average_posterior(posterior: &Array2<f64>) -> Result<Array1<f64>> {
    posterior
        .mean_axis(Axis(0))
        .ok_or_else(|| LidError::EmptyInput("posterior has no frames".into()))
}

fn max_abs_grad<F: Scalar>(grads: &[LayerGrads<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| {
            g.weight
                .iter()
                .chain(&g.bias)
                .chain(&g.gamma)
                .chain(&g.beta)
                .map(|v| v.to_f64().unwrap().abs())
        })
        .fold(0.0, |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) })
}

pub struct Trainer<F> {
    pub net: Tdnn<F>,
    pub config: TrainConfig,
    opt: AdamW<F>,
    batches_seen: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(mut net: Tdnn<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.config.bn_eps = config.bn_eps;
        let opt = AdamW::new(config.optimizer.clone(), &net);
        Ok(Trainer {
            net,
            config,
            opt,
            batches_seen: 0,
        })
    }

    /// Batch order for `epoch`, a pure function of the seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
    }

    /// One pass over the data; returns the mean batch loss.
    pub fn train_epoch(
        &mut self,
        features: &[Array2<F>],
        labels: &[usize],
        epoch: usize,
    ) -> Result<EpochStats> {
        if features.len() != labels.len() {
            return Err(LidError::Shape("features and labels differ in length".into()));
        }
        if features.is_empty() {
            return Err(LidError::EmptyInput("no training segments".into()));
        }
        let classes = self.net.config.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(LidError::Shape(format!("label {bad} out of range for {classes} classes")));
        }
        let order = self.epoch_order(features.len(), epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let xs: Vec<Array2<F>> = chunk.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let cache = self.net.forward_train(&xs)?;
            let (loss, dlogits) = softmax_cross_entropy(&cache.logits, &ys);
            let grads = self.net.backward(&cache, dlogits);
            let max_grad = max_abs_grad(&grads);
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(LidError::NonFiniteLoss {
                    batch: self.batches_seen,
                    loss,
                    max_grad,
                });
            }
            self.opt.update(&mut self.net, &grads);
            self.net
                .update_running_stats(&cache.batch_stats, self.config.bn_momentum);
            self.batches_seen += 1;
            total += loss;
            batches += 1;
        }
        Ok(EpochStats {
            epoch,
            train_loss: total / batches as f64,
            batches,
        })
    }

    /// Eval-mode mean frame loss and segment accuracy (argmax of the
    /// time-averaged posterior).
    pub fn evaluate(&self, features: &[Array2<F>], labels: &[usize]) -> Result<(f64, f64)> {
        evaluate(&self.net, features, labels)
    }
}

pub(crate) fn evaluate<F: Scalar>(
    net: &Tdnn<F>,
    features: &[Array2<F>],
    labels: &[usize],
) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    if features.is_empty() {
        return Err(LidError::EmptyInput("no evaluation segments".into()));
    }
    let per: Vec<(f64, bool)> = features
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let out = net.forward(x.view(), Mode::Eval)?;
            let (loss, _) = softmax_cross_entropy(std::slice::from_ref(&out.logits), &[y]);
            let avg = average_posterior(&out.posterior())?;
            let pred = argmax(avg.as_slice().unwrap());
            Ok((loss, pred == y))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().filter(|p| p.1).count() as f64 / n,
    ))
}

/// Index of the maximum; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::TdnnConfig;
    use rand::Rng;

    fn small_config() -> TdnnConfig {
        TdnnConfig {
            input_dim: 4,
            layer_dims: vec![8, 8, 2],
            contexts: vec![3, 1, 1],
            dilations: vec![1; 3],
            strides: vec![1; 3],
            bn_eps: 1e-5,
        }
    }

    /// Two classes whose frames differ in mean along the first dimension.
    fn separable(n: usize, seed: u64) -> (Vec<Array2<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let shift = if y == 0 { -1.0 } else { 1.0 };
            xs.push(Array2::from_shape_fn((20, 4), |(_, d)| {
                rng.random_range(-1.0f32..1.0) + if d == 0 { shift } else { 0.0 }
            }));
            ys.push(y);
        }
        (xs, ys)
    }

    fn train(seed: u64, epochs: usize) -> (Trainer<f32>, Vec<f64>) {
        let (xs, ys) = separable(64, 11);
        let net = Tdnn::init(small_config(), seed).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(net, cfg).unwrap();
        let losses = (0..epochs)
            .map(|e| t.train_epoch(&xs, &ys, e).unwrap().train_loss)
            .collect();
        (t, losses)
    }

    #[test]
    fn loss_decreases_and_separable_task_is_learned() {
        let (t, losses) = train(1, 15);
        assert!(losses[14] < losses[0], "{losses:?}");
        let (xs, ys) = separable(40, 99);
        let (_, acc) = t.evaluate(&xs, &ys).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (a, la) = train(4, 3);
        let (b, lb) = train(4, 3);
        assert_eq!(la, lb);
        for (x, y) in a.net.layers.iter().zip(&b.net.layers) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn batch_size_one_is_rejected() {
        let net = Tdnn::<f32>::init(small_config(), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(Trainer::new(net, cfg), Err(LidError::Config(_))));
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let (mut xs, ys) = separable(4, 1);
        xs[0][[3, 1]] = f32::NAN;
        let net = Tdnn::init(small_config(), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(net, cfg).unwrap();
        match t.train_epoch(&xs, &ys, 0) {
            Err(LidError::NonFiniteLoss { batch, .. }) => assert_eq!(batch, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn average_posterior_examples() {
        let same = ndarray::array![[0.2, 0.8], [0.2, 0.8]];
        assert_eq!(average_posterior(&same).unwrap(), ndarray::array![0.2, 0.8]);
        let onehots = ndarray::array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            average_posterior(&onehots).unwrap(),
            ndarray::array![0.5, 0.0, 0.5]
        );
        assert!(matches!(
            average_posterior(&Array2::zeros((0, 3))),
            Err(LidError::EmptyInput(_))
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.3]), 1);
    }

    proptest::proptest! {
        #[test]
        fn averaged_posterior_sums_to_one(seed in 0u64..500, rows in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = Array2::from_shape_fn((rows, 32), |_| rng.random_range(-8.0..8.0));
            let p = crate::nn::softmax_rows(&l);
            let avg = average_posterior(&p).unwrap();
            proptest::prop_assert!((avg.sum() - 1.0).abs() < 1e-6);
        }
    }
}
