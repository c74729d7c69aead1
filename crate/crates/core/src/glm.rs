//! The network linearized at θ*, its predictive distribution, the nonlinear
//! sampling baseline, and posterior refinement inside the linear model.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::{noise_seeds, Curvature};
use crate::datasets::{Dataset, Targets};
use crate::error::{invalid, shape, Error, Result};
use crate::likelihood::{copy_row, log_softmax, sigmoid, softmax, target_at, Likelihood, Predictive, Target};
use crate::linalg::{gemm_into, matmul, psd_factor, Cholesky};
use crate::network::MlpNetwork;
use crate::posterior::GaussianPosterior;
use crate::training::{log_prior, Adam};

const CHUNK: usize = 256;
/// Output dimension up to which latent samples use the full covariance.
pub const FULL_OUTPUT_COV_LIMIT: usize = 16;
/// Largest N·C handled by full-covariance variational refinement.
pub const NGVI_FULL_LIMIT: usize = 4000;

/// Independent per-index seed stream derived from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// f_lin(x, θ) = f(x, θ*) + J_θ*(x)(θ − θ*).
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    pub net: MlpNetwork,
    pub theta_star: DVector<f64>,
}

pub fn linearize(net: &MlpNetwork, theta_star: &DVector<f64>) -> Result<LinearizedModel> {
    if theta_star.len() != net.num_params() {
        return shape("θ* does not match the network");
    }
    Ok(LinearizedModel { net: net.clone(), theta_star: theta_star.clone() })
}

impl LinearizedModel {
    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// f(X, θ*) (N × C) and the stacked Jacobians (P × N·C).
    pub fn outputs_and_jacobians(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let f = self.net.forward(&self.theta_star, x)?;
        let jt = self.net.jacobians_t(&self.theta_star, x)?;
        Ok((f, jt))
    }

    pub fn f_lin(&self, theta: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (f, jt) = self.outputs_and_jacobians(x)?;
        Ok(add_shift(&f, &jt, &(theta - &self.theta_star)))
    }
}

/// F + reshape(Jtᵀ d) with rows per example.
fn add_shift(f: &DMatrix<f64>, jt: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let c = f.ncols();
    let s = jt.tr_mul(d);
    DMatrix::from_fn(f.nrows(), c, |n, k| f[(n, k)] + s[n * c + k])
}

/// The linear model evaluated on a fixed dataset: outputs at θ* and the
/// stacked Jacobians.
#[derive(Debug, Clone)]
pub struct GlmDesign {
    pub theta_star: DVector<f64>,
    pub f0: DMatrix<f64>,
    pub jt: DMatrix<f64>,
    pub targets: Targets,
}

impl GlmDesign {
    pub fn new(lin: &LinearizedModel, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::NoRows);
        }
        let (f0, jt) = lin.outputs_and_jacobians(&data.inputs)?;
        Ok(Self { theta_star: lin.theta_star.clone(), f0, jt, targets: data.targets.clone() })
    }

    pub fn len(&self) -> usize {
        self.f0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn outputs(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        add_shift(&self.f0, &self.jt, &(theta - &self.theta_star))
    }

    pub fn log_joint(&self, lik: &Likelihood, delta: f64, theta: &DVector<f64>) -> Result<f64> {
        Ok(lik.log_lik_sum(&self.outputs(theta), &self.targets)? + log_prior(theta, delta))
    }

    pub fn log_joint_grad(&self, lik: &Likelihood, delta: f64, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let f = self.outputs(theta);
        let (ll, r) = lik.log_lik_and_residuals(&f, &self.targets)?;
        let rv = DVector::from_iterator(r.len(), r.transpose().iter().copied());
        let mut g = &self.jt * rv;
        g.axpy(-delta, theta, 1.0);
        Ok((ll + log_prior(theta, delta), g))
    }

    /// GGN factor Jᵀ·blockdiag(L_n) with L_n Lₙᵀ = Λ(f_lin(x_n, θ)).
    pub fn ggn_factor(&self, lik: &Likelihood, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.outputs(theta);
        let (_, v) = noise_seeds(lik, &f)?;
        let c = f.ncols();
        let mut ut = DMatrix::zeros(self.jt.nrows(), self.jt.ncols());
        for n in 0..f.nrows() {
            // columns n·C..: J_nᵀ L_n
            let l = DMatrix::from_fn(c, c, |a, k| v[(n * c + k, a)]);
            let cols = self.jt.columns(n * c, c);
            let mut out = ut.columns_mut(n * c, c);
            gemm_into(1.0, cols, false, l.as_view(), false, 0.0, out.as_view_mut());
        }
        Ok(ut)
    }
}

/// Σ_n log p(y_n | f_lin(x_n, θ)) + log N(θ; 0, δ⁻¹I).
pub fn glm_log_joint(lin: &LinearizedModel, lik: &Likelihood, data: &Dataset, delta: f64, theta: &DVector<f64>) -> Result<f64> {
    GlmDesign::new(lin, data)?.log_joint(lik, delta, theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Output distributions of the linear model under `posterior` at the rows
/// of `x`: mean f(x,θ*) + J(μ − θ*), covariance J Σ Jᵀ.
pub fn glm_output_distribution(lin: &LinearizedModel, posterior: &GaussianPosterior, x: &DMatrix<f64>) -> Result<Vec<OutputGaussian>> {
    let c = lin.output_dim();
    let shift = &posterior.mean - &lin.theta_star;
    let mut out = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(CHUNK) {
        let len = CHUNK.min(x.nrows() - start);
        let xs = x.rows(start, len).into_owned();
        let (f, jt) = lin.outputs_and_jacobians(&xs)?;
        let means = add_shift(&f, &jt, &shift);
        let covs = posterior.output_covariances(&jt, c)?;
        for (n, cov) in covs.into_iter().enumerate() {
            out.push(OutputGaussian { mean: means.row(n).transpose(), cov });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputCov {
    /// Full covariance for C ≤ 16, diagonal above.
    Auto,
    Full,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveConfig {
    pub samples: usize,
    pub seed: u64,
    pub output_cov: OutputCov,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        Self { samples: 1000, seed: 0, output_cov: OutputCov::Auto }
    }
}

/// S × C latent draws from one output Gaussian.
pub fn sample_latents(out: &OutputGaussian, samples: usize, seed: u64, mode: OutputCov) -> DMatrix<f64> {
    let c = out.mean.len();
    let full = match mode {
        OutputCov::Auto => c <= FULL_OUTPUT_COV_LIMIT,
        OutputCov::Full => true,
        OutputCov::Diagonal => false,
    };
    let factor = if full || c == 1 {
        psd_factor(&out.cov)
    } else {
        DMatrix::from_diagonal(&out.cov.diagonal().map(|v| v.max(0.0).sqrt()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(c, samples, |_, _| StandardNormal.sample(&mut rng));
    let mut f = &factor * z;
    for mut col in f.column_iter_mut() {
        col += &out.mean;
    }
    f.transpose()
}

/// Predictive from output Gaussians: sampled latents mixed through the
/// inverse link; closed form for the Gaussian likelihood.
pub fn latent_predictive(lik: &Likelihood, outs: &[OutputGaussian], cfg: &PredictiveConfig) -> Result<Vec<Predictive>> {
    if cfg.samples == 0 {
        return invalid("need at least one sample");
    }
    outs.iter()
        .enumerate()
        .map(|(n, o)| match lik {
            Likelihood::Gaussian { noise_var } => Ok(Predictive::Gaussian {
                mean: o.mean.iter().copied().collect(),
                var: o.cov.diagonal().iter().map(|v| v + noise_var).collect(),
            }),
            _ => lik.predictive_mix(&sample_latents(o, cfg.samples, derive_seed(cfg.seed, n as u64), cfg.output_cov)),
        })
        .collect()
}

pub fn glm_predictive_batch(
    lin: &LinearizedModel,
    posterior: &GaussianPosterior,
    lik: &Likelihood,
    x: &DMatrix<f64>,
    cfg: &PredictiveConfig,
) -> Result<Vec<Predictive>> {
    latent_predictive(lik, &glm_output_distribution(lin, posterior, x)?, cfg)
}

pub fn glm_predictive(
    lin: &LinearizedModel,
    posterior: &GaussianPosterior,
    lik: &Likelihood,
    x: &[f64],
    cfg: &PredictiveConfig,
) -> Result<Predictive> {
    Ok(glm_predictive_batch(lin, posterior, lik, &DMatrix::from_row_slice(1, x.len(), x), cfg)?.remove(0))
}

/// Network outputs for S posterior draws shared across inputs; entry n is
/// the S × C matrix of f(x_n, θ_s).
pub fn bnn_latent_samples(
    net: &MlpNetwork,
    posterior: &GaussianPosterior,
    x: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    let draws = posterior.sample_columns(samples, seed)?;
    let c = net.output_dim();
    let mut out = vec![DMatrix::zeros(samples, c); x.nrows()];
    for s in 0..samples {
        let theta = draws.column(s).into_owned();
        let f = net.forward(&theta, x)?;
        for (n, o) in out.iter_mut().enumerate() {
            for k in 0..c {
                o[(s, k)] = f[(n, k)];
            }
        }
    }
    Ok(out)
}

/// Monte Carlo average of p(y | f(x, θ_s)) with θ_s drawn from the posterior.
pub fn bnn_predictive_batch(
    net: &MlpNetwork,
    posterior: &GaussianPosterior,
    lik: &Likelihood,
    x: &DMatrix<f64>,
    cfg: &PredictiveConfig,
) -> Result<Vec<Predictive>> {
    bnn_latent_samples(net, posterior, x, cfg.samples, cfg.seed)?.iter().map(|f| lik.predictive_mix(f)).collect()
}

pub fn bnn_predictive(
    net: &MlpNetwork,
    posterior: &GaussianPosterior,
    lik: &Likelihood,
    x: &[f64],
    cfg: &PredictiveConfig,
) -> Result<Predictive> {
    Ok(bnn_predictive_batch(net, posterior, lik, &DMatrix::from_row_slice(1, x.len(), x), cfg)?.remove(0))
}

/// Plug-in prediction g⁻¹(f(x, θ)).
pub fn map_predictive_batch(net: &MlpNetwork, theta: &DVector<f64>, lik: &Likelihood, x: &DMatrix<f64>) -> Result<Vec<Predictive>> {
    let f = net.forward(theta, x)?;
    (0..f.nrows())
        .map(|n| lik.predictive_mix(&f.rows(n, 1).into_owned()))
        .collect()
}

/// Stacks classification predictives into an N × K probability matrix.
pub fn probs_matrix(preds: &[Predictive]) -> Result<DMatrix<f64>> {
    let k = preds.first().and_then(|p| p.probs()).map_or(0, <[f64]>::len);
    let mut m = DMatrix::zeros(preds.len(), k);
    for (n, p) in preds.iter().enumerate() {
        let probs = p.probs().ok_or_else(|| Error::InvalidInput("predictive is not a class distribution".into()))?;
        for (j, v) in probs.iter().enumerate() {
            m[(n, j)] = *v;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplaceOptimizer {
    Adam,
    /// Damped Newton steps with the GGN of the linear model.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceRefineConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: LaplaceOptimizer,
}

impl Default for LaplaceRefineConfig {
    fn default() -> Self {
        Self { iterations: 1000, learning_rate: 1e-3, optimizer: LaplaceOptimizer::Adam }
    }
}

#[derive(Debug, Clone)]
pub struct Refined {
    pub posterior: GaussianPosterior,
    /// Objective per iteration: GLM log joint (Laplace) or ELBO (variational).
    pub trace: Vec<f64>,
}

/// Maximizes the GLM log joint from θ* and places a Laplace posterior at the
/// best iterate, with Λ evaluated at the refined outputs and Jacobians kept
/// at θ*.
pub fn glm_refine_laplace(
    lin: &LinearizedModel,
    lik: &Likelihood,
    data: &Dataset,
    delta: f64,
    cfg: &LaplaceRefineConfig,
) -> Result<Refined> {
    let design = GlmDesign::new(lin, data)?;
    glm_refine_laplace_design(&design, lik, delta, cfg)
}

pub fn glm_refine_laplace_design(design: &GlmDesign, lik: &Likelihood, delta: f64, cfg: &LaplaceRefineConfig) -> Result<Refined> {
    if !(delta > 0.0) {
        return invalid("prior precision must be positive");
    }
    let n = design.len() as f64;
    let mut theta = design.theta_star.clone();
    let (mut obj, mut grad) = design.log_joint_grad(lik, delta, &theta)?;
    let mut best = (obj, theta.clone());
    let mut trace = vec![obj];
    let mut adam = Adam::new(theta.len());
    for it in 0..cfg.iterations {
        match cfg.optimizer {
            LaplaceOptimizer::Adam => {
                adam.step(&mut theta, &(&grad * (-1.0 / n)), cfg.learning_rate);
            }
            LaplaceOptimizer::Newton => {
                let ut = design.ggn_factor(lik, &theta)?;
                let post = GaussianPosterior::new(theta.clone(), theta.clone(), Curvature::Gram { ut }, delta, false)?;
                let step = post.covariance_apply(&DMatrix::from_column_slice(theta.len(), 1, grad.as_slice()));
                let step = step.column(0).into_owned();
                let mut t = 1.0;
                loop {
                    let cand = &theta + &step * t;
                    let v = design.log_joint(lik, delta, &cand)?;
                    if v >= obj || t < 1e-6 {
                        theta = cand;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        let (o, g) = design.log_joint_grad(lik, delta, &theta)?;
        if !o.is_finite() {
            return Err(Error::NonFinite { epoch: it });
        }
        obj = o;
        grad = g;
        trace.push(obj);
        if obj > best.0 {
            best = (obj, theta.clone());
        }
        if cfg.optimizer == LaplaceOptimizer::Newton && grad.norm() < 1e-10 {
            break;
        }
    }
    let theta_hat = best.1;
    let ut = design.ggn_factor(lik, &theta_hat)?;
    let posterior = GaussianPosterior::new(theta_hat, design.theta_star.clone(), Curvature::Gram { ut }, delta, false)?;
    Ok(Refined { posterior, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgviStructure {
    Full,
    Diag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgviConfig {
    pub iterations: usize,
    /// Natural-gradient step β; `None` uses 1e-3 (full) or 1e-2 (diag).
    pub learning_rate: Option<f64>,
    /// Monte Carlo draws (antithetic pairs) for categorical expectations.
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for NgviConfig {
    fn default() -> Self {
        Self { iterations: 250, learning_rate: None, mc_samples: 8, seed: 0 }
    }
}

impl NgviConfig {
    pub fn step(&self, structure: NgviStructure) -> f64 {
        self.learning_rate.unwrap_or(match structure {
            NgviStructure::Full => 1e-3,
            NgviStructure::Diag => 1e-2,
        })
    }
}

/// Gauss-Hermite rule (nodes, weights/√π) for E[g(z)], z ~ N(0, 1) via
/// g(√2·x).
fn gauss_hermite() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 20;
        let mut jac = DMatrix::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jac[(i, i - 1)] = b;
            jac[(i - 1, i)] = b;
        }
        let eig = jac.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> =
            (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        (pairs.iter().map(|p| p.0 * std::f64::consts::SQRT_2).collect(), pairs.iter().map(|p| p.1).collect())
    })
}

/// Expected log likelihood, residual and noise of one example when its
/// latent is N(mean, cov).
struct Expectation {
    log_lik: f64,
    residual: DVector<f64>,
    noise: DMatrix<f64>,
}

fn expect_terms(lik: &Likelihood, y: &Target, mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha8Rng, mc: usize) -> Result<Expectation> {
    let c = mean.len();
    match (*lik, y) {
        (Likelihood::Gaussian { noise_var }, Target::Real(t)) => {
            let mut ll = 0.0;
            let mut r = DVector::zeros(c);
            for k in 0..c {
                let d = t[k] - mean[k];
                ll += -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln() - 0.5 * (d * d + cov[(k, k)]) / noise_var;
                r[k] = d / noise_var;
            }
            Ok(Expectation { log_lik: ll, residual: r, noise: DMatrix::identity(c, c) / noise_var })
        }
        (Likelihood::Bernoulli, Target::Class(label)) => {
            let (nodes, weights) = gauss_hermite();
            let sd = cov[(0, 0)].max(0.0).sqrt();
            let (mut ll, mut r, mut lam) = (0.0, 0.0, 0.0);
            for (z, w) in nodes.iter().zip(weights) {
                let f = mean[0] + sd * z;
                let p = sigmoid(f);
                ll += w * lik.log_lik(y, &[f])?;
                r += w * (*label as f64 - p);
                lam += w * p * (1.0 - p);
            }
            Ok(Expectation { log_lik: ll, residual: DVector::from_element(1, r), noise: DMatrix::from_element(1, 1, lam) })
        }
        (Likelihood::Categorical { .. }, Target::Class(label)) => {
            let factor = psd_factor(cov);
            let pairs = (mc / 2).max(1);
            let mut ll = 0.0;
            let mut r = DVector::zeros(c);
            let mut lam = DMatrix::zeros(c, c);
            for _ in 0..pairs {
                let z = DVector::from_fn(c, |_, _| StandardNormal.sample(rng));
                let dz = &factor * z;
                for sign in [1.0, -1.0] {
                    let f: Vec<f64> = (0..c).map(|k| mean[k] + sign * dz[k]).collect();
                    let p = softmax(&f);
                    ll += log_softmax(&f)[*label];
                    for a in 0..c {
                        r[a] += if a == *label { 1.0 } else { 0.0 } - p[a];
                        for b in 0..c {
                            lam[(a, b)] += if a == b { p[a] } else { 0.0 } - p[a] * p[b];
                        }
                    }
                }
            }
            let m = (2 * pairs) as f64;
            Ok(Expectation { log_lik: ll / m, residual: r / m, noise: lam / m })
        }
        _ => invalid("target kind does not match the likelihood"),
    }
}

fn kl_to_prior(delta: f64, mean: &DVector<f64>, trace_cov: f64, log_det_prec: f64) -> f64 {
    let p = mean.len() as f64;
    0.5 * (delta * trace_cov + delta * mean.norm_squared() - p - p * delta.ln() + log_det_prec)
}

/// Natural-gradient variational inference in the GLM, started from the
/// Laplace-GGN posterior at θ*. The precision keeps the form
/// δI + Σ_n J_nᵀ A_n J_n with A_n ← (1−β)A_n + β E_q[Λ_n], and the mean moves
/// by β Σ (Σ_n J_nᵀ E_q[r_n] − δ m).
pub fn glm_refine_ngvi(
    lin: &LinearizedModel,
    lik: &Likelihood,
    data: &Dataset,
    delta: f64,
    cfg: &NgviConfig,
    structure: NgviStructure,
) -> Result<Refined> {
    let design = GlmDesign::new(lin, data)?;
    glm_refine_ngvi_design(&design, lik, delta, cfg, structure)
}

pub fn glm_refine_ngvi_design(
    design: &GlmDesign,
    lik: &Likelihood,
    delta: f64,
    cfg: &NgviConfig,
    structure: NgviStructure,
) -> Result<Refined> {
    if !(delta > 0.0) {
        return invalid("prior precision must be positive");
    }
    match structure {
        NgviStructure::Full => ngvi_full(design, lik, delta, cfg),
        NgviStructure::Diag => ngvi_diag(design, lik, delta, cfg),
    }
}

/// Blockwise square roots F_n (F Fᵀ = A_n) laid out as an NC × C stack.
fn block_factors(a: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    a.iter().map(psd_factor).collect()
}

/// K B for block-diagonal B given by `f` (C × C blocks).
fn right_blockdiag(k: &DMatrix<f64>, f: &[DMatrix<f64>], c: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k.nrows(), k.ncols());
    for (n, fb) in f.iter().enumerate() {
        let cols = k.columns(n * c, c);
        gemm_into(1.0, cols, false, fb.as_view(), false, 0.0, out.columns_mut(n * c, c));
    }
    out
}

/// Bᵀ v for a stacked vector.
fn blockdiag_t_vec(f: &[DMatrix<f64>], v: &DVector<f64>, c: usize) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (n, fb) in f.iter().enumerate() {
        let seg = fb.tr_mul(&v.rows(n * c, c));
        out.rows_mut(n * c, c).copy_from(&seg);
    }
    out
}

fn blockdiag_vec(f: &[DMatrix<f64>], v: &DVector<f64>, c: usize) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (n, fb) in f.iter().enumerate() {
        let seg = fb * v.rows(n * c, c);
        out.rows_mut(n * c, c).copy_from(&seg);
    }
    out
}

/// Posterior state in the N·C-dimensional output space.
struct FullState {
    factors: Vec<DMatrix<f64>>,
    inner: Cholesky,
    marg_cov: Vec<DMatrix<f64>>,
}

fn full_state(k0: &DMatrix<f64>, a: &[DMatrix<f64>], delta: f64, c: usize, iteration: usize) -> Result<FullState> {
    let r = k0.nrows();
    let factors = block_factors(a);
    let kb = right_blockdiag(k0, &factors, c);
    // inner = δI + Bᵀ K0 B
    let mut inner = right_blockdiag(&kb.transpose(), &factors, c);
    for i in 0..r {
        inner[(i, i)] += delta;
    }
    crate::linalg::symmetrize(&mut inner);
    let chol = Cholesky::new(&inner)
        .ok_or_else(|| Error::Numerical(format!("variational precision lost positive definiteness at iteration {iteration}")))?;
    // J Σ Jᵀ = (K0 − K0 B inner⁻¹ Bᵀ K0) / δ, diagonal blocks only
    let x = chol.solve_lower(&kb.transpose());
    let marg_cov = (0..r / c)
        .map(|n| {
            DMatrix::from_fn(c, c, |i, j| {
                let (p, q) = (n * c + i, n * c + j);
                (k0[(p, q)] - x.column(p).dot(&x.column(q))) / delta
            })
        })
        .collect();
    Ok(FullState { factors, inner: chol, marg_cov })
}

fn ngvi_full(design: &GlmDesign, lik: &Likelihood, delta: f64, cfg: &NgviConfig) -> Result<Refined> {
    let c = design.f0.ncols();
    let n = design.len();
    let r = n * c;
    if r > NGVI_FULL_LIMIT {
        return invalid(format!("full-covariance refinement on {r} outputs exceeds {NGVI_FULL_LIMIT}; use the diagonal structure"));
    }
    let p = design.jt.nrows();
    let beta = cfg.step(NgviStructure::Full);
    let k0 = matmul(&design.jt, true, &design.jt, false);
    let mut a: Vec<DMatrix<f64>> = {
        let mut fr = vec![0.0; c];
        (0..n)
            .map(|i| {
                copy_row(&design.f0, i, &mut fr);
                lik.noise(&fr)
            })
            .collect::<Result<_>>()?
    };
    let mut m = design.theta_star.clone();
    let mut state = full_state(&k0, &a, delta, c, 0)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);

    let elbo_and_terms = |m: &DVector<f64>, state: &FullState, it: usize| -> Result<(f64, Vec<Expectation>)> {
        let means = design.outputs(m);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, it as u64));
        let mut ell = 0.0;
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let e = expect_terms(lik, &target_at(&design.targets, i), &means.row(i).transpose(), &state.marg_cov[i], &mut rng, cfg.mc_samples)?;
            ell += e.log_lik;
            terms.push(e);
        }
        let trace_cov = (p as f64 - r as f64) / delta + state.inner.inverse_trace();
        let log_det = (p as f64 - r as f64) * delta.ln() + state.inner.log_det();
        Ok((ell - kl_to_prior(delta, m, trace_cov, log_det), terms))
    };

    for it in 0..cfg.iterations {
        let (elbo, terms) = elbo_and_terms(&m, &state, it)?;
        trace.push(elbo);
        for (ai, e) in a.iter_mut().zip(&terms) {
            *ai = &*ai * (1.0 - beta) + &e.noise * beta;
        }
        state = full_state(&k0, &a, delta, c, it + 1)?;
        // v = Jᵀ E[r] − δ m, then m += β Σ v with the updated precision
        let e = DVector::from_iterator(r, terms.iter().flat_map(|t| t.residual.iter().copied()));
        let mut v = &design.jt * e;
        v.axpy(-delta, &m, 1.0);
        let jv = design.jt.tr_mul(&v);
        let s = state.inner.solve_vec(&blockdiag_t_vec(&state.factors, &jv, c));
        let correction = &design.jt * blockdiag_vec(&state.factors, &s, c);
        let step = (v - correction) / delta;
        m.axpy(beta, &step, 1.0);
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { epoch: it });
        }
    }
    let (elbo, _) = elbo_and_terms(&m, &state, cfg.iterations)?;
    trace.push(elbo);

    let mut ut = DMatrix::zeros(p, r);
    for (i, f) in state.factors.iter().enumerate() {
        gemm_into(1.0, design.jt.columns(i * c, c), false, f.as_view(), false, 0.0, ut.columns_mut(i * c, c));
    }
    let posterior = GaussianPosterior::new(m, design.theta_star.clone(), Curvature::Gram { ut }, delta, false)?;
    Ok(Refined { posterior, trace })
}

fn ngvi_diag(design: &GlmDesign, lik: &Likelihood, delta: f64, cfg: &NgviConfig) -> Result<Refined> {
    let c = design.f0.ncols();
    let n = design.len();
    let p = design.jt.nrows();
    let beta = cfg.step(NgviStructure::Diag);
    let jt = &design.jt;

    // diag(Σ_n J_nᵀ A_n J_n)
    let ggn_diag = |blocks: &[DMatrix<f64>]| -> DVector<f64> {
        let mut g = DVector::zeros(p);
        for (i, blk) in blocks.iter().enumerate() {
            for a in 0..c {
                for b in 0..c {
                    let w = blk[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    let (ca, cb) = (jt.column(i * c + a), jt.column(i * c + b));
                    for q in 0..p {
                        g[q] += w * ca[q] * cb[q];
                    }
                }
            }
        }
        g
    };

    let lam0: Vec<DMatrix<f64>> = {
        let mut fr = vec![0.0; c];
        (0..n)
            .map(|i| {
                copy_row(&design.f0, i, &mut fr);
                lik.noise(&fr)
            })
            .collect::<Result<_>>()?
    };
    let mut prec = ggn_diag(&lam0).add_scalar(delta);
    let mut m = design.theta_star.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);

    let elbo_and_terms = |m: &DVector<f64>, prec: &DVector<f64>, it: usize| -> Result<(f64, Vec<Expectation>)> {
        let means = design.outputs(m);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, it as u64));
        let mut ell = 0.0;
        let mut terms = Vec::with_capacity(n);
        for i in 0..n {
            let cov = DMatrix::from_fn(c, c, |a, b| {
                let (ca, cb) = (jt.column(i * c + a), jt.column(i * c + b));
                (0..p).map(|q| ca[q] * cb[q] / prec[q]).sum()
            });
            let e = expect_terms(lik, &target_at(&design.targets, i), &means.row(i).transpose(), &cov, &mut rng, cfg.mc_samples)?;
            ell += e.log_lik;
            terms.push(e);
        }
        let trace_cov = prec.iter().map(|v| 1.0 / v).sum();
        let log_det = prec.iter().map(|v| v.ln()).sum();
        Ok((ell - kl_to_prior(delta, m, trace_cov, log_det), terms))
    };

    for it in 0..cfg.iterations {
        let (elbo, terms) = elbo_and_terms(&m, &prec, it)?;
        trace.push(elbo);
        let noise: Vec<DMatrix<f64>> = terms.iter().map(|t| t.noise.clone()).collect();
        prec = prec * (1.0 - beta) + ggn_diag(&noise).add_scalar(delta) * beta;
        if let Some(bad) = prec.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Numerical(format!("diagonal precision entry {bad} not positive at iteration {it}")));
        }
        let e = DVector::from_iterator(n * c, terms.iter().flat_map(|t| t.residual.iter().copied()));
        let mut v = jt * e;
        v.axpy(-delta, &m, 1.0);
        m += v.component_div(&prec) * beta;
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { epoch: it });
        }
    }
    let (elbo, _) = elbo_and_terms(&m, &prec, cfg.iterations)?;
    trace.push(elbo);
    let posterior = GaussianPosterior::new(m, design.theta_star.clone(), Curvature::Diag(prec.add_scalar(-delta)), delta, false)?;
    Ok(Refined { posterior, trace })
}
