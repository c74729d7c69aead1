//! Brute-force oracles for small models: a normalized grid posterior, a
//! plain HMC sampler and a Laplace approximation with the exact Hessian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::Curvature;
use crate::datasets::{make_toy, Dataset, ToyKind};
use crate::error::{invalid, Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{sym_eigen, symmetrize};
use crate::network::{Activation, MlpNetwork};
use crate::posterior::GaussianPosterior;
use crate::training::{log_joint, log_joint_grad};

pub const MAX_GRID_DIM: usize = 3;
pub const MAX_GRID_RESOLUTION: usize = 500;
pub const EXACT_HESSIAN_MAX_PARAMS: usize = 50;
const HESSIAN_STEP: f64 = 1e-4;
const EIGEN_FLOOR: f64 = 1e-8;

/// Log density tabulated on a tensor grid and normalized under the
/// trapezoid rule.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub axes: Vec<Vec<f64>>,
    /// Normalized log density at every grid point, first axis fastest.
    pub log_density: Vec<f64>,
    weights: Vec<f64>,
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { axis[i] - axis[i - 1] } else { 0.0 };
            let right = if i + 1 < n { axis[i + 1] - axis[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

pub fn grid_posterior(logpost: impl Fn(&[f64]) -> f64, ranges: &[(f64, f64)], resolution: usize) -> Result<GridPosterior> {
    let d = ranges.len();
    if d == 0 || d > MAX_GRID_DIM {
        return invalid(format!("grid posterior supports 1 to {MAX_GRID_DIM} dimensions, got {d}"));
    }
    if !(2..=MAX_GRID_RESOLUTION).contains(&resolution) {
        return invalid(format!("grid resolution must be in 2..={MAX_GRID_RESOLUTION}"));
    }
    if ranges.iter().any(|(lo, hi)| !(hi > lo)) {
        return invalid("every grid range needs lo < hi");
    }
    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi)| (0..resolution).map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64).collect())
        .collect();
    let axis_w: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let total = resolution.pow(d as u32);
    let mut point = vec![0.0; d];
    let mut log_density = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rest = flat;
        let mut w = 1.0;
        for k in 0..d {
            let i = rest % resolution;
            rest /= resolution;
            point[k] = axes[k][i];
            w *= axis_w[k][i];
        }
        log_density.push(logpost(&point));
        weights.push(w);
    }
    let max = log_density.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return invalid("log density is -inf or NaN on the whole grid");
    }
    let z: f64 = log_density.iter().zip(&weights).map(|(l, w)| w * (l - max).exp()).sum();
    let log_z = max + z.ln();
    for l in &mut log_density {
        *l -= log_z;
    }
    Ok(GridPosterior { axes, log_density, weights })
}

impl GridPosterior {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let r = self.axes[0].len();
        let mut rest = flat;
        self.axes
            .iter()
            .map(|a| {
                let i = rest % r;
                rest /= r;
                a[i]
            })
            .collect()
    }

    /// Quadrature weight times density at every grid point; sums to one.
    pub fn masses(&self) -> Vec<f64> {
        self.log_density.iter().zip(&self.weights).map(|(l, w)| w * l.exp()).collect()
    }

    /// ∫ g(θ) p(θ) dθ by the trapezoid rule.
    pub fn expectation(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.masses().iter().enumerate().map(|(i, m)| if *m > 0.0 { m * g(&self.point(i)) } else { 0.0 }).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.expectation(|t| t[k])).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        DMatrix::from_fn(d, d, |a, b| self.expectation(|t| (t[a] - mu[a]) * (t[b] - mu[b])))
    }

    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.expectation(|t| if pred(t) { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub num_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { step_size: 0.05, leapfrog_steps: 20, num_samples: 100_000, burn_in: 10_000, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct HmcResult {
    /// One sample per row.
    pub samples: DMatrix<f64>,
    pub acceptance_rate: f64,
    /// Mean |ΔH| over trajectories.
    pub mean_energy_drift: f64,
}

/// HMC with unit mass; `logpost` returns the log density and its gradient.
pub fn hmc_sample(logpost: impl Fn(&[f64]) -> (f64, Vec<f64>), init: &[f64], cfg: &HmcConfig) -> Result<HmcResult> {
    if !(cfg.step_size > 0.0) || cfg.leapfrog_steps == 0 || cfg.num_samples == 0 {
        return invalid("HMC needs a positive step size, leapfrog steps and samples");
    }
    let d = init.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init.to_vec();
    let (mut lp, mut grad) = logpost(&theta);
    if !lp.is_finite() {
        return invalid("HMC initial point has non-finite log density");
    }
    let total = cfg.burn_in + cfg.num_samples;
    let mut samples = DMatrix::zeros(cfg.num_samples, d);
    let (mut accepted, mut drift) = (0usize, 0.0);
    let eps = cfg.step_size;
    for it in 0..total {
        let mut p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let h0 = -lp + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let mut q = theta.clone();
        let mut g = grad.clone();
        let mut lq = lp;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * eps * gi;
        }
        for step in 0..cfg.leapfrog_steps {
            for (qi, pi) in q.iter_mut().zip(&p) {
                *qi += eps * pi;
            }
            let (l, gn) = logpost(&q);
            lq = l;
            g = gn;
            let scale = if step + 1 == cfg.leapfrog_steps { 0.5 } else { 1.0 };
            for (pi, gi) in p.iter_mut().zip(&g) {
                *pi += scale * eps * gi;
            }
        }
        let h1 = -lq + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let dh = h1 - h0;
        if dh.is_finite() {
            drift += dh.abs();
        }
        if dh.is_finite() && rng.gen::<f64>().ln() < -dh {
            theta = q;
            lp = lq;
            grad = g;
            if it >= cfg.burn_in {
                accepted += 1;
            }
        }
        if it >= cfg.burn_in {
            samples.row_mut(it - cfg.burn_in).copy_from_slice(&theta);
        }
    }
    let acceptance_rate = accepted as f64 / cfg.num_samples as f64;
    if acceptance_rate < 0.1 {
        return invalid(format!("HMC acceptance rate {acceptance_rate:.3} is below 0.1; use a smaller step size"));
    }
    Ok(HmcResult { samples, acceptance_rate, mean_energy_drift: drift / total as f64 })
}

/// Laplace approximation whose precision is the finite-difference Hessian of
/// the negative log joint, including the network-curvature term the GGN
/// drops. Eigenvalues below 1e-8 are floored.
pub fn exact_hessian_laplace(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, delta: f64, theta: &DVector<f64>) -> Result<GaussianPosterior> {
    let p = net.num_params();
    if p > EXACT_HESSIAN_MAX_PARAMS {
        return invalid(format!("exact Hessian needs at most {EXACT_HESSIAN_MAX_PARAMS} parameters, network has {p}"));
    }
    let mut h = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += HESSIAN_STEP;
        tm[i] -= HESSIAN_STEP;
        let gp = log_joint_grad(net, lik, data, delta, &tp)?.1;
        let gm = log_joint_grad(net, lik, data, delta, &tm)?.1;
        h.set_column(i, &((gm - gp) / (2.0 * HESSIAN_STEP)));
    }
    symmetrize(&mut h);
    let (values, vectors) = sym_eigen(&h);
    let floored = values.iter().filter(|v| **v < EIGEN_FLOOR).count();
    if floored * 2 > p {
        return Err(Error::Numerical(format!(
            "{floored} of {p} Hessian eigenvalues are not positive; θ is not near a mode"
        )));
    }
    let clipped = values.map(|v| v.max(EIGEN_FLOOR));
    let mut prec = &vectors * DMatrix::from_diagonal(&clipped) * vectors.transpose();
    symmetrize(&mut prec);
    let curvature = prec - DMatrix::identity(p, p) * delta;
    GaussianPosterior::new(theta.clone(), theta.clone(), Curvature::Full(curvature), delta, false)
}

/// The single-unit classifier f(x) = 5·tanh(w·x + b) on the step data, with
/// parameters ordered (w, b) and a unit Gaussian prior.
pub fn toy1d_model() -> (MlpNetwork, Likelihood, Dataset) {
    let net = MlpNetwork::new(vec![1, 1], Activation::Tanh)
        .expect("valid sizes")
        .with_output_scale(5.0)
        .with_output_activation();
    let data = make_toy(ToyKind::Step1d, 0);
    (net, Likelihood::Bernoulli, data)
}

/// Log posterior (unnormalized) of a small network at a parameter point.
pub fn log_posterior_fn<'a>(net: &'a MlpNetwork, lik: &'a Likelihood, data: &'a Dataset, delta: f64) -> impl Fn(&[f64]) -> f64 + 'a {
    move |t| log_joint(net, lik, data, delta, &DVector::from_column_slice(t)).unwrap_or(f64::NEG_INFINITY)
}

pub fn log_posterior_grad_fn<'a>(
    net: &'a MlpNetwork,
    lik: &'a Likelihood,
    data: &'a Dataset,
    delta: f64,
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a {
    move |t| match log_joint_grad(net, lik, data, delta, &DVector::from_column_slice(t)) {
        Ok((v, g)) => (v, g.iter().copied().collect()),
        Err(_) => (f64::NEG_INFINITY, vec![0.0; t.len()]),
    }
}

/// Total-variation distance between HMC samples and the grid posterior on
/// a `bins`^d histogram over the grid's ranges (2-d only).
pub fn tv_distance_2d(grid: &GridPosterior, samples: &DMatrix<f64>, bins: usize) -> Result<f64> {
    if grid.dim() != 2 || samples.ncols() != 2 {
        return invalid("total-variation comparison is implemented for two dimensions");
    }
    let lo: Vec<f64> = grid.axes.iter().map(|a| a[0]).collect();
    let hi: Vec<f64> = grid.axes.iter().map(|a| a[a.len() - 1]).collect();
    let bin_of = |t: &[f64]| -> Option<usize> {
        let mut idx = 0;
        for k in (0..2).rev() {
            if t[k] < lo[k] || t[k] > hi[k] {
                return None;
            }
            let b = (((t[k] - lo[k]) / (hi[k] - lo[k]) * bins as f64) as usize).min(bins - 1);
            idx = idx * bins + b;
        }
        Some(idx)
    };
    let mut p_grid = vec![0.0; bins * bins];
    for (i, m) in grid.masses().iter().enumerate() {
        if let Some(b) = bin_of(&grid.point(i)) {
            p_grid[b] += m;
        }
    }
    let mut p_hmc = vec![0.0; bins * bins];
    let s = samples.nrows() as f64;
    let mut outside = 0.0;
    for row in samples.row_iter() {
        match bin_of(&[row[0], row[1]]) {
            Some(b) => p_hmc[b] += 1.0 / s,
            None => outside += 1.0 / s,
        }
    }
    Ok(0.5 * (p_grid.iter().zip(&p_hmc).map(|(a, b)| (a - b).abs()).sum::<f64>() + outside))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{ggn, CurvatureMode};
    use crate::likelihood::sigmoid;
    use crate::linalg::max_abs_diff;
    use crate::posterior::laplace_posterior;
    use crate::training::{map_train, MapConfig};

    fn std_normal(t: &[f64]) -> f64 {
        -0.5 * t.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn grid_normal_moments() {
        let g = grid_posterior(std_normal, &[(-8.0, 8.0)], 400).unwrap();
        assert!(g.mean()[0].abs() < 1e-3);
        assert!((g.covariance()[(0, 0)] - 1.0).abs() < 1e-2);
        assert!((g.masses().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_symmetric_target_centers() {
        let g = grid_posterior(|t| -((t[0] - 1.0).powi(4)) - (t[1] + 0.5).powi(2), &[(-2.0, 4.0), (-3.5, 2.5)], 201).unwrap();
        let m = g.mean();
        assert!((m[0] - 1.0).abs() < 1e-9 && (m[1] + 0.5).abs() < 1e-9);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(grid_posterior(std_normal, &[(0.0, 1.0); 4], 10).is_err());
        assert!(grid_posterior(std_normal, &[(0.0, 1.0)], 501).is_err());
        assert!(grid_posterior(|_| f64::NEG_INFINITY, &[(0.0, 1.0)], 10).is_err());
    }

    #[test]
    fn hmc_standard_normal_moments() {
        let target = |t: &[f64]| (std_normal(t), t.iter().map(|v| -v).collect());
        let r = hmc_sample(target, &[0.0, 0.0], &HmcConfig::default()).unwrap();
        for k in 0..2 {
            let col = r.samples.column(k);
            let mean = col.mean();
            let var = col.variance();
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
        assert!(r.mean_energy_drift < 0.2);
        let again = hmc_sample(target, &[0.0, 0.0], &HmcConfig { num_samples: 100, burn_in: 0, ..Default::default() }).unwrap();
        let twice = hmc_sample(target, &[0.0, 0.0], &HmcConfig { num_samples: 100, burn_in: 0, ..Default::default() }).unwrap();
        assert_eq!(again.samples, twice.samples);
    }

    #[test]
    fn hmc_rejects_huge_steps() {
        let target = |t: &[f64]| (-50.0 * t[0] * t[0], vec![-100.0 * t[0]]);
        let cfg = HmcConfig { step_size: 1.0, num_samples: 500, burn_in: 0, ..Default::default() };
        assert!(hmc_sample(target, &[0.1], &cfg).is_err());
    }

    #[test]
    fn toy_posterior_lives_on_positive_slopes() {
        let (net, lik, data) = toy1d_model();
        assert_eq!(net.forward_one(&DVector::from_vec(vec![3.0, 0.0]), &[0.0]).unwrap(), vec![0.0]);
        let g = grid_posterior(log_posterior_fn(&net, &lik, &data, 1.0), &[(-4.0, 6.0), (-5.0, 5.0)], 200).unwrap();
        assert!(g.mass_where(|t| t[0] < 0.0) <= 1e-3);
        // predictive mean of class 1 increases in x
        let mut prev = 0.0;
        for i in 0..30 {
            let x = -7.0 + 14.0 * i as f64 / 29.0;
            let m = g.expectation(|t| sigmoid(5.0 * (t[0] * x + t[1]).tanh()));
            assert!(m >= prev - 1e-12);
            prev = m;
        }
    }

    #[test]
    fn exact_hessian_equals_ggn_for_linear_gaussian() {
        let net = MlpNetwork::new(vec![2, 1], Activation::Tanh).unwrap();
        let x = DMatrix::from_fn(8, 2, |i, j| ((i * 2 + j) as f64).sin());
        let y = DMatrix::from_fn(8, 1, |i, _| (i as f64).cos());
        let data = Dataset::regression(x, y).unwrap();
        let lik = Likelihood::Gaussian { noise_var: 0.5 };
        let theta = net.init(0);
        let exact = exact_hessian_laplace(&net, &lik, &data, 1.0, &theta).unwrap();
        let curv = ggn(&net, &lik, &data, &theta, CurvatureMode::Full).unwrap();
        let lap = laplace_posterior(theta, curv, 1.0, false).unwrap();
        assert!(max_abs_diff(&exact.dense_precision(), &lap.dense_precision()) < 1e-6);
    }

    #[test]
    fn toy_full_hessian_differs_from_ggn() {
        let (net, lik, data) = toy1d_model();
        let cfg = MapConfig { learning_rate: 1e-2, epochs: 5000, ..Default::default() };
        let theta = map_train_to_mode(&net, &lik, &data, &cfg);
        let exact = exact_hessian_laplace(&net, &lik, &data, 1.0, &theta).unwrap();
        let p = exact.dense_precision();
        assert!(max_abs_diff(&p, &p.transpose()) < 1e-6);
        let curv = ggn(&net, &lik, &data, &theta, CurvatureMode::Full).unwrap();
        let lap = laplace_posterior(theta.clone(), curv, 1.0, false).unwrap();
        let (a, b) = (exact.dense_covariance(), lap.dense_covariance());
        let rel = (&a - &b).amax() / b.amax();
        assert!(rel > 1e-3, "relative difference {rel}");
        assert_eq!(exact.mean, theta);
    }

    fn map_train_to_mode(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, cfg: &MapConfig) -> DVector<f64> {
        let mut theta = map_train(net, lik, data, cfg).unwrap().theta;
        // polish with Newton on the exact Hessian so the gradient vanishes
        for _ in 0..20 {
            let (_, g) = log_joint_grad(net, lik, data, 1.0, &theta).unwrap();
            let post = exact_hessian_laplace(net, lik, data, 1.0, &theta).unwrap();
            let step = post.covariance_apply(&DMatrix::from_column_slice(g.len(), 1, g.as_slice()));
            theta += step.column(0);
        }
        theta
    }
}
