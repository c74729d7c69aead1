//! MAP estimation under an isotropic Gaussian prior.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{invalid, Error, Result};
use crate::likelihood::Likelihood;
use crate::network::MlpNetwork;

/// Above this size training switches from full batch to minibatches.
pub const FULL_BATCH_LIMIT: usize = 2000;
pub const DEFAULT_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    /// Epochs at which the learning rate is multiplied by `factor`.
    pub epochs: Vec<usize>,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` picks full batch for small data and 512 otherwise.
    pub batch_size: Option<usize>,
    pub delta: f64,
    pub lr_decay: Option<LrDecay>,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 10_000, batch_size: None, delta: 1.0, lr_decay: None, seed: 0 }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return invalid(format!("prior precision must be positive, got {}", self.delta));
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning rate must be positive");
        }
        if self.batch_size == Some(0) {
            return invalid("batch size must be positive");
        }
        Ok(())
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(n),
            None if n <= FULL_BATCH_LIMIT => n,
            None => DEFAULT_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    #[serde(skip)]
    pub theta: DVector<f64>,
    /// Mean per-example negative log joint for each epoch, evaluated on the
    /// batches as they were visited.
    pub trace: Vec<f64>,
    /// Norm of the full-data log-joint gradient at the final iterate.
    pub grad_norm: f64,
}

/// log N(θ; 0, δ⁻¹I).
pub fn log_prior(theta: &DVector<f64>, delta: f64) -> f64 {
    let p = theta.len() as f64;
    0.5 * p * (delta.ln() - (2.0 * std::f64::consts::PI).ln()) - 0.5 * delta * theta.norm_squared()
}

/// Σ_n log p(y_n | f(x_n, θ)) + log N(θ; 0, δ⁻¹I).
pub fn log_joint(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, delta: f64, theta: &DVector<f64>) -> Result<f64> {
    let f = net.forward(theta, &data.inputs)?;
    Ok(lik.log_lik_sum(&f, &data.targets)? + log_prior(theta, delta))
}

/// Log joint and its gradient with respect to θ.
pub fn log_joint_grad(
    net: &MlpNetwork,
    lik: &Likelihood,
    data: &Dataset,
    delta: f64,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let (f, cache) = net.forward_cached(theta, &data.inputs)?;
    let (ll, r) = lik.log_lik_and_residuals(&f, &data.targets)?;
    let mut g = net.backward(theta, &cache, &r)?;
    g.axpy(-delta, theta, 1.0);
    Ok((ll + log_prior(theta, delta), g))
}

pub fn map_train(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, cfg: &MapConfig) -> Result<TrainResult> {
    map_train_from(net, lik, data, cfg, net.init(cfg.seed))
}

/// Adam on −(1/N)·log joint starting from `theta`. The prior enters every
/// step as weight decay δ/N.
pub fn map_train_from(
    net: &MlpNetwork,
    lik: &Likelihood,
    data: &Dataset,
    cfg: &MapConfig,
    theta: DVector<f64>,
) -> Result<TrainResult> {
    cfg.validate()?;
    lik.validate()?;
    if data.is_empty() {
        return Err(Error::NoRows);
    }
    let n = data.len();
    let batch = cfg.effective_batch(n);
    let full_batch = batch >= n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(theta.len());
    let mut theta = theta;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    let weight_decay = cfg.delta / n as f64;

    for epoch in 0..cfg.epochs {
        if let Some(decay) = &cfg.lr_decay {
            if decay.epochs.contains(&epoch) {
                lr *= decay.factor;
            }
        }
        let mut epoch_obj = 0.0;
        if full_batch {
            let (f, cache) = net.forward_cached(&theta, &data.inputs)?;
            let (ll, r) = lik.log_lik_and_residuals(&f, &data.targets)?;
            let mut g = net.backward(&theta, &cache, &r)?;
            g.scale_mut(-1.0 / n as f64);
            g.axpy(weight_decay, &theta, 1.0);
            epoch_obj = -ll / n as f64 + 0.5 * weight_decay * theta.norm_squared();
            adam.step(&mut theta, &g, lr);
        } else {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let part = data.subset(chunk);
                let b = chunk.len() as f64;
                let (f, cache) = net.forward_cached(&theta, &part.inputs)?;
                let (ll, r) = lik.log_lik_and_residuals(&f, &part.targets)?;
                let mut g = net.backward(&theta, &cache, &r)?;
                g.scale_mut(-1.0 / b);
                g.axpy(weight_decay, &theta, 1.0);
                epoch_obj += (-ll / b + 0.5 * weight_decay * theta.norm_squared()) * b / n as f64;
                adam.step(&mut theta, &g, lr);
            }
        }
        if !epoch_obj.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { epoch });
        }
        trace.push(epoch_obj);
    }
    let (_, g) = log_joint_grad(net, lik, data, cfg.delta, &theta)?;
    Ok(TrainResult { theta, trace, grad_norm: g.norm() })
}

/// Adaptive-moment optimizer state with the usual defaults.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(p: usize) -> Self {
        Self { m: DVector::zeros(p), v: DVector::zeros(p), t: 0 }
    }

    /// One descent step along gradient `g`.
    pub(crate) fn step(&mut self, theta: &mut DVector<f64>, g: &DVector<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            let gi = g[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use nalgebra::DMatrix;

    fn small_problem() -> (MlpNetwork, Dataset) {
        let net = MlpNetwork::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        let x = DMatrix::from_fn(12, 2, |i, j| ((i * 2 + j) as f64 * 0.91).sin() * 2.0);
        let labels = (0..12).map(|i| usize::from(x[(i, 0)] + 0.3 * x[(i, 1)] > 0.0)).collect();
        (net, Dataset::classification(x, labels, 2).unwrap())
    }

    #[test]
    fn log_joint_at_zero_parameters() {
        let (net, data) = small_problem();
        let theta = DVector::zeros(net.num_params());
        let delta: f64 = 2.5;
        let p = net.num_params() as f64;
        let expect = 12.0 * 0.5f64.ln() + 0.5 * p * (delta.ln() - (2.0 * std::f64::consts::PI).ln());
        let got = log_joint(&net, &Likelihood::Bernoulli, &data, delta, &theta).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn prior_term_is_quadratic() {
        let (net, data) = small_problem();
        let theta = net.init(3);
        let a = log_joint(&net, &Likelihood::Bernoulli, &data, 1.0, &theta).unwrap();
        let b = log_joint(&net, &Likelihood::Bernoulli, &data, 3.0, &theta).unwrap();
        let p = net.num_params() as f64;
        let expect = -theta.norm_squared() + 0.5 * p * 3f64.ln();
        assert!(((b - a) - expect).abs() < 1e-10);
    }

    #[test]
    fn log_joint_gradient_matches_finite_differences() {
        let (net, data) = small_problem();
        let theta = net.init(4);
        let (_, g) = log_joint_grad(&net, &Likelihood::Bernoulli, &data, 0.7, &theta).unwrap();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (log_joint(&net, &Likelihood::Bernoulli, &data, 0.7, &tp).unwrap()
                - log_joint(&net, &Likelihood::Bernoulli, &data, 0.7, &tm).unwrap())
                / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-5, "{i}: {} vs {fd}", g[i]);
        }
    }

    fn separable_two_points() -> (MlpNetwork, Dataset) {
        let net = MlpNetwork::new(vec![1, 1], Activation::Tanh).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        (net, Dataset::classification(x, vec![0, 1], 2).unwrap())
    }

    #[test]
    fn logistic_regression_converges() {
        let (net, data) = separable_two_points();
        let cfg = MapConfig { learning_rate: 1e-2, epochs: 10_000, delta: 1.0, ..Default::default() };
        let res = map_train(&net, &Likelihood::Bernoulli, &data, &cfg).unwrap();
        assert!(res.grad_norm <= 1e-4, "gradient norm {}", res.grad_norm);

        // independent oracle: plain gradient ascent for a long time
        let mut theta = DVector::zeros(2);
        for _ in 0..200_000 {
            let (_, g) = log_joint_grad(&net, &Likelihood::Bernoulli, &data, 1.0, &theta).unwrap();
            theta += g * 0.05;
        }
        let oracle = log_joint(&net, &Likelihood::Bernoulli, &data, 1.0, &theta).unwrap();
        let found = log_joint(&net, &Likelihood::Bernoulli, &data, 1.0, &res.theta).unwrap();
        assert!((oracle - found).abs() < 1e-6, "{oracle} vs {found}");
    }

    #[test]
    fn strong_prior_pins_parameters() {
        let (net, data) = small_problem();
        let cfg = MapConfig { learning_rate: 1e-2, epochs: 3000, delta: 1e6, ..Default::default() };
        let res = map_train(&net, &Likelihood::Bernoulli, &data, &cfg).unwrap();
        assert!(res.theta.norm() <= 1e-2, "{}", res.theta.norm());
    }

    #[test]
    fn training_is_deterministic_and_minibatch_works() {
        let (net, data) = small_problem();
        let cfg = MapConfig { epochs: 50, batch_size: Some(5), seed: 9, ..Default::default() };
        let a = map_train(&net, &Likelihood::Bernoulli, &data, &cfg).unwrap();
        let b = map_train(&net, &Likelihood::Bernoulli, &data, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.trace.len(), 50);
    }

    #[test]
    fn non_finite_objective_reports_epoch() {
        let (net, data) = small_problem();
        let cfg = MapConfig { learning_rate: 1e300, epochs: 20, ..Default::default() };
        match map_train(&net, &Likelihood::Bernoulli, &data, &cfg) {
            Err(Error::NonFinite { epoch }) => assert!(epoch < 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let (net, data) = small_problem();
        let cfg = MapConfig { delta: 0.0, ..Default::default() };
        assert!(map_train(&net, &Likelihood::Bernoulli, &data, &cfg).is_err());
        let cfg = MapConfig { epochs: 0, ..Default::default() };
        assert!(map_train(&net, &Likelihood::Bernoulli, &data, &cfg).is_err());
    }
}
