//! Function-space view of the linearized network: a GP with kernel
//! δ⁻¹ J(x) J(x')ᵀ, Laplace posterior on a random subset of the data.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curvature::noise_seeds;
use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::glm::{latent_predictive, LinearizedModel, OutputGaussian, PredictiveConfig};
use crate::likelihood::{Likelihood, Predictive};
use crate::linalg::{matmul, symmetrize, Cholesky};

const CHUNK: usize = 256;

/// How outputs share the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputCoupling {
    /// One GP per output; cross-output kernel entries are dropped.
    #[default]
    Independent,
    /// Full NC × NC kernel, the exact dual of the parametric model.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub delta: f64,
    /// Multiplier on δ; `None` uses N/M.
    pub scale: Option<f64>,
    /// Subset size M; `None` keeps all points.
    pub subset_size: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub coupling: OutputCoupling,
}

impl KernelConfig {
    pub fn new(delta: f64) -> Self {
        Self { delta, scale: None, subset_size: None, seed: 0, coupling: OutputCoupling::Independent }
    }
}

/// Kernel matrix between two Jacobian stacks (P × N₁C and P × N₂C).
fn kernel_from_jacobians(jt1: &DMatrix<f64>, jt2: &DMatrix<f64>, delta_eff: f64, c: usize, coupling: OutputCoupling) -> DMatrix<f64> {
    let mut k = matmul(jt1, true, jt2, false) / delta_eff;
    if coupling == OutputCoupling::Independent && c > 1 {
        for j in 0..k.ncols() {
            for i in 0..k.nrows() {
                if i % c != j % c {
                    k[(i, j)] = 0.0;
                }
            }
        }
    }
    k
}

/// k(x, x') = δ_eff⁻¹ J(x) J(x')ᵀ as an N₁C × N₂C matrix whose (n, m) block
/// is the C × C kernel between x_n and x'_m.
pub fn kernel(lin: &LinearizedModel, delta_eff: f64, x1: &DMatrix<f64>, x2: &DMatrix<f64>, coupling: OutputCoupling) -> Result<DMatrix<f64>> {
    if !(delta_eff > 0.0) {
        return invalid("kernel prior precision must be positive");
    }
    let j1 = lin.net.jacobians_t(&lin.theta_star, x1)?;
    let j2 = lin.net.jacobians_t(&lin.theta_star, x2)?;
    Ok(kernel_from_jacobians(&j1, &j2, delta_eff, lin.output_dim(), coupling))
}

#[derive(Debug, Clone)]
pub struct GpSodPosterior {
    pub lin: LinearizedModel,
    pub indices: Vec<usize>,
    pub inputs: DMatrix<f64>,
    pub delta_eff: f64,
    pub coupling: OutputCoupling,
    pub k_mm: DMatrix<f64>,
    jt_m: DMatrix<f64>,
    /// Blockwise B with B Bᵀ = L_MM, stored as MC × C row blocks.
    noise_factor: DMatrix<f64>,
    /// Cholesky of I + Bᵀ K_MM B; (K + L⁻¹)⁻¹ = B (I + Bᵀ K B)⁻¹ Bᵀ without inverting L.
    inner: Cholesky,
}

/// Random subset of size M (sorted indices) with seeded draw.
pub fn draw_subset(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return invalid(format!("subset size {m} must be in 1..={n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn gp_fit_sod(lin: &LinearizedModel, lik: &Likelihood, data: &Dataset, cfg: &KernelConfig) -> Result<GpSodPosterior> {
    let n = data.len();
    let m = cfg.subset_size.unwrap_or(n);
    let indices = draw_subset(n, m, cfg.seed)?;
    let scale = cfg.scale.unwrap_or(n as f64 / m as f64);
    if !(scale > 0.0) || !(cfg.delta > 0.0) {
        return invalid("prior precision and its scale must be positive");
    }
    let delta_eff = cfg.delta * scale;
    let sub = data.subset(&indices);
    let c = lin.output_dim();
    let (f, jt_m) = lin.outputs_and_jacobians(&sub.inputs)?;
    let k_mm = kernel_from_jacobians(&jt_m, &jt_m, delta_eff, c, cfg.coupling);

    // rows m·C + k of `seeds` hold L_m[:, k]ᵀ, so B = seedsᵀ blockwise
    let (_, seeds) = noise_seeds(lik, &f)?;
    let mut noise_factor = DMatrix::zeros(m * c, c);
    for i in 0..m {
        for a in 0..c {
            for k in 0..c {
                noise_factor[(i * c + a, k)] = seeds[(i * c + k, a)];
            }
        }
    }
    let kb = right_blockdiag(&k_mm, &noise_factor, c);
    let mut inner = right_blockdiag(&kb.transpose(), &noise_factor, c);
    for i in 0..m * c {
        inner[(i, i)] += 1.0;
    }
    symmetrize(&mut inner);
    let inner = Cholesky::new_jittered(&inner)?;
    Ok(GpSodPosterior {
        lin: lin.clone(),
        indices,
        inputs: sub.inputs,
        delta_eff,
        coupling: cfg.coupling,
        k_mm,
        jt_m,
        noise_factor,
        inner,
    })
}

/// K · blockdiag(B_m) with B_m the C × C block m of `factor`.
fn right_blockdiag(k: &DMatrix<f64>, factor: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k.nrows(), k.ncols());
    for m in 0..factor.nrows() / c {
        let blk = factor.rows(m * c, c);
        let prod = k.columns(m * c, c) * blk;
        out.columns_mut(m * c, c).copy_from(&prod);
    }
    out
}

impl GpSodPosterior {
    pub fn subset_size(&self) -> usize {
        self.indices.len()
    }

    /// Applies (K_MM + L_MM⁻¹)⁻¹ to the columns of `v` (MC × K).
    pub fn solve(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.lin.output_dim();
        let s = self.inner.solve(&blockdiag_t_left(&self.noise_factor, v, c));
        blockdiag_left(&self.noise_factor, &s, c)
    }

    /// Latent mean f(x, θ*) and covariance K** − K*M (K_MM + L_MM⁻¹)⁻¹ K_M*.
    pub fn output_distribution(&self, x: &DMatrix<f64>) -> Result<Vec<OutputGaussian>> {
        let c = self.lin.output_dim();
        let mut out = Vec::with_capacity(x.nrows());
        for start in (0..x.nrows()).step_by(CHUNK) {
            let len = CHUNK.min(x.nrows() - start);
            let xs = x.rows(start, len).into_owned();
            let (f, jt) = self.lin.outputs_and_jacobians(&xs)?;
            let k_ms = kernel_from_jacobians(&self.jt_m, &jt, self.delta_eff, c, self.coupling);
            // whitened gain W = L⁻¹ Bᵀ K_M*, so the gain is Wᵀ W
            let w = self.inner.solve_lower(&blockdiag_t_left(&self.noise_factor, &k_ms, c));
            for n in 0..len {
                let jn = jt.columns(n * c, c).into_owned();
                let prior = kernel_from_jacobians(&jn, &jn, self.delta_eff, c, self.coupling);
                let wn = w.columns(n * c, c);
                let mut cov = prior - wn.transpose() * wn;
                symmetrize(&mut cov);
                out.push(OutputGaussian { mean: f.row(n).transpose(), cov });
            }
        }
        Ok(out)
    }
}

/// blockdiag(B) · s for an MC × K matrix `s`.
fn blockdiag_left(factor: &DMatrix<f64>, s: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for m in 0..factor.nrows() / c {
        let prod = factor.rows(m * c, c) * s.rows(m * c, c);
        out.rows_mut(m * c, c).copy_from(&prod);
    }
    out
}

fn blockdiag_t_left(factor: &DMatrix<f64>, s: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(s.nrows(), s.ncols());
    for m in 0..factor.nrows() / c {
        let prod = factor.rows(m * c, c).tr_mul(&s.rows(m * c, c));
        out.rows_mut(m * c, c).copy_from(&prod);
    }
    out
}

pub fn gp_predictive_batch(gp: &GpSodPosterior, lik: &Likelihood, x: &DMatrix<f64>, cfg: &PredictiveConfig) -> Result<Vec<Predictive>> {
    latent_predictive(lik, &gp.output_distribution(x)?, cfg)
}

pub fn gp_predictive(gp: &GpSodPosterior, lik: &Likelihood, x: &[f64], cfg: &PredictiveConfig) -> Result<Predictive> {
    Ok(gp_predictive_batch(gp, lik, &DMatrix::from_row_slice(1, x.len(), x), cfg)?.remove(0))
}
