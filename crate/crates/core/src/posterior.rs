//! Gaussian posteriors N(μ, (G + δI)⁻¹) over network parameters, for every
//! curvature structure.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::curvature::{kfac_precision, Curvature, CurvatureHeader, KfacPrecision};
use crate::error::{invalid, shape, Result};
use crate::linalg::{gemm_into, Cholesky};

const MAGIC: &[u8; 8] = b"LLPOST01";

#[derive(Debug, Clone)]
enum Factor {
    /// Cholesky factor of the dense precision.
    Dense(Cholesky),
    /// Precision diagonal.
    Diag(DVector<f64>),
    Kfac(KfacPrecision),
    /// Precision δI + ut utᵀ; `inner` factors δI + utᵀ ut in the
    /// R-dimensional column space.
    Gram { inner: Cholesky },
}

#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    /// Point the curvature (and any linearized model) was built at. Equals
    /// the mean unless the posterior was refined.
    pub linearization: DVector<f64>,
    pub delta: f64,
    pub dampened: bool,
    pub curvature: Curvature,
    factor: Factor,
}

/// Laplace posterior with precision `curvature + δI`. KFAC curvature uses
/// the exact eigenbasis construction unless `dampened` is set.
pub fn laplace_posterior(mean: DVector<f64>, curvature: Curvature, delta: f64, dampened: bool) -> Result<GaussianPosterior> {
    let lin = mean.clone();
    GaussianPosterior::new(mean, lin, curvature, delta, dampened)
}

impl GaussianPosterior {
    pub fn new(
        mean: DVector<f64>,
        linearization: DVector<f64>,
        curvature: Curvature,
        delta: f64,
        dampened: bool,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return invalid(format!("prior precision must be positive, got {delta}"));
        }
        let p = curvature.num_params();
        if mean.len() != p || linearization.len() != p {
            return shape(format!("posterior mean has length {} but the curvature covers {p} parameters", mean.len()));
        }
        let factor = match &curvature {
            Curvature::Full(g) => Factor::Dense(Cholesky::new_jittered(&(g + DMatrix::identity(p, p) * delta))?),
            Curvature::Diag(g) => Factor::Diag(g.add_scalar(delta)),
            Curvature::Kfac(layers) => Factor::Kfac(kfac_precision(layers, delta, dampened)?),
            Curvature::Gram { ut } => {
                let r = ut.ncols();
                if r >= p {
                    // more factor columns than parameters: the dense route is cheaper
                    let g = curvature.dense();
                    Factor::Dense(Cholesky::new_jittered(&(g + DMatrix::identity(p, p) * delta))?)
                } else {
                    let mut inner = DMatrix::identity(r, r) * delta;
                    gemm_into(1.0, ut.as_view(), true, ut.as_view(), false, 1.0, inner.as_view_mut());
                    crate::linalg::symmetrize(&mut inner);
                    Factor::Gram { inner: Cholesky::new_jittered(&inner)? }
                }
            }
        };
        Ok(Self { mean, linearization, delta, dampened, curvature, factor })
    }

    pub fn num_params(&self) -> usize {
        self.mean.len()
    }

    /// Same precision, different mean.
    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.num_params() {
            return shape("mean length does not match the posterior");
        }
        self.mean = mean;
        Ok(self)
    }

    fn gram_ut(&self) -> &DMatrix<f64> {
        match &self.curvature {
            Curvature::Gram { ut } => ut,
            _ => unreachable!("gram factor without gram curvature"),
        }
    }

    /// Σ v for every column of `v` (P × K).
    pub fn covariance_apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Dense(chol) => chol.solve(v),
            Factor::Diag(prec) => DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / prec[i]),
            Factor::Kfac(k) => k.apply_spectral(v, |l| 1.0 / l),
            Factor::Gram { inner } => {
                let ut = self.gram_ut();
                let w = crate::linalg::matmul(ut, true, v, false);
                let s = inner.solve(&w);
                let mut out = v.clone();
                gemm_into(-1.0, ut.as_view(), false, s.as_view(), false, 1.0, out.as_view_mut());
                out / self.delta
            }
        }
    }

    /// Π v with Π the posterior precision.
    pub fn precision_apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            Factor::Dense(chol) => {
                let l = chol.l();
                l * (l.transpose() * v)
            }
            Factor::Diag(prec) => DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * prec[i]),
            Factor::Kfac(k) => k.apply_spectral(v, |l| l),
            Factor::Gram { .. } => {
                let ut = self.gram_ut();
                let w = crate::linalg::matmul(ut, true, v, false);
                let mut out = v * self.delta;
                gemm_into(1.0, ut.as_view(), false, w.as_view(), false, 1.0, out.as_view_mut());
                out
            }
        }
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let p = self.num_params();
        self.covariance_apply(&DMatrix::identity(p, p))
    }

    pub fn dense_precision(&self) -> DMatrix<f64> {
        let p = self.num_params();
        self.precision_apply(&DMatrix::identity(p, p))
    }

    pub fn log_det_precision(&self) -> f64 {
        match &self.factor {
            Factor::Dense(chol) => chol.log_det(),
            Factor::Diag(prec) => prec.iter().map(|v| v.ln()).sum(),
            Factor::Kfac(k) => k.log_det(),
            Factor::Gram { inner } => {
                let (p, r) = (self.num_params() as f64, inner.dim() as f64);
                (p - r) * self.delta.ln() + inner.log_det()
            }
        }
    }

    pub fn trace_covariance(&self) -> f64 {
        match &self.factor {
            Factor::Dense(chol) => chol.inverse_trace(),
            Factor::Diag(prec) => prec.iter().map(|v| 1.0 / v).sum(),
            Factor::Kfac(k) => k.layers.iter().map(|l| l.values.iter().map(|v| 1.0 / v).sum::<f64>()).sum(),
            Factor::Gram { inner } => {
                let (p, r) = (self.num_params() as f64, inner.dim() as f64);
                (p - r) / self.delta + inner.inverse_trace()
            }
        }
    }

    /// Returns (Y, C) with jtᵀ Σ jt = Yᵀ Y − Cᵀ C; C only arises for the
    /// Gram form.
    fn whiten(&self, jt: &DMatrix<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match &self.factor {
            Factor::Dense(chol) => (chol.solve_lower(jt), None),
            Factor::Diag(prec) => (DMatrix::from_fn(jt.nrows(), jt.ncols(), |i, j| jt[(i, j)] / prec[i].sqrt()), None),
            Factor::Kfac(k) => (k.apply_spectral(jt, |l| 1.0 / l.sqrt()), None),
            Factor::Gram { inner } => {
                let ut = self.gram_ut();
                let s = self.delta.sqrt();
                let w = crate::linalg::matmul(ut, true, jt, false);
                (jt / s, Some(inner.solve_lower(&w) / s))
            }
        }
    }

    /// J Σ Jᵀ for `jt` = Jᵀ (P × K), split into consecutive diagonal blocks
    /// of width `block`.
    pub fn output_covariances(&self, jt: &DMatrix<f64>, block: usize) -> Result<Vec<DMatrix<f64>>> {
        if jt.nrows() != self.num_params() {
            return shape(format!("Jacobian has {} rows, posterior has {} parameters", jt.nrows(), self.num_params()));
        }
        if block == 0 || jt.ncols() % block != 0 {
            return shape("Jacobian columns are not a whole number of blocks");
        }
        let (y, corr) = self.whiten(jt);
        let blocks = jt.ncols() / block;
        Ok((0..blocks)
            .map(|b| {
                let cols = b * block;
                let mut m = DMatrix::from_fn(block, block, |i, j| y.column(cols + i).dot(&y.column(cols + j)));
                if let Some(c) = &corr {
                    for i in 0..block {
                        for j in 0..block {
                            m[(i, j)] -= c.column(cols + i).dot(&c.column(cols + j));
                        }
                    }
                }
                // keep exact symmetry
                for i in 0..block {
                    for j in 0..i {
                        let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                        m[(i, j)] = v;
                        m[(j, i)] = v;
                    }
                }
                m
            })
            .collect())
    }

    /// J Σ Jᵀ for a single C × P matrix J.
    pub fn covariance_quadform(&self, j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let jt = j.transpose();
        Ok(self.output_covariances(&jt, jt.ncols().max(1))?.remove(0))
    }

    /// Draws as the columns of a P × S matrix.
    pub fn sample_columns(&self, s: usize, seed: u64) -> Result<DMatrix<f64>> {
        if s == 0 {
            return invalid("need at least one sample");
        }
        let p = self.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        let z = normal(p, s);
        let mut draws = match &self.factor {
            Factor::Dense(chol) => chol.solve_upper(&z),
            Factor::Diag(prec) => DMatrix::from_fn(p, s, |i, j| z[(i, j)] / prec[i].sqrt()),
            Factor::Kfac(k) => k.apply_spectral(&z, |l| 1.0 / l.sqrt()),
            Factor::Gram { inner } => {
                // Σ(√δ z₀ + U z₁) has covariance Σ (δI + UUᵀ) Σ = Σ
                let ut = self.gram_ut();
                let z1 = normal(inner.dim(), s);
                let mut v = z * self.delta.sqrt();
                gemm_into(1.0, ut.as_view(), false, z1.as_view(), false, 1.0, v.as_view_mut());
                self.covariance_apply(&v)
            }
        };
        for mut col in draws.column_iter_mut() {
            col += &self.mean;
        }
        Ok(draws)
    }

    /// S × P matrix of draws from N(μ, Σ).
    pub fn sample(&self, s: usize, seed: u64) -> Result<DMatrix<f64>> {
        Ok(self.sample_columns(s, seed)?.transpose())
    }

    /// Stores curvature, mean, linearization point, δ and the dampening flag.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (curvature, mut payload) = self.curvature.to_parts();
        let header = PosteriorHeader { curvature, delta: self.delta, dampened: self.dampened, num_params: self.num_params() };
        payload.extend_from_slice(self.mean.as_slice());
        payload.extend_from_slice(self.linearization.as_slice());
        write_artifact(path, MAGIC, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GaussianPosterior> {
        let (header, payload): (PosteriorHeader, Vec<f64>) = read_artifact(path, MAGIC)?;
        let p = header.num_params;
        if payload.len() < 2 * p {
            return shape("truncated posterior payload");
        }
        let split = payload.len() - 2 * p;
        let curvature = Curvature::from_parts(&header.curvature, &payload[..split])?;
        let mean = DVector::from_column_slice(&payload[split..split + p]);
        let lin = DVector::from_column_slice(&payload[split + p..]);
        GaussianPosterior::new(mean, lin, curvature, header.delta, header.dampened)
    }
}

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    curvature: CurvatureHeader,
    delta: f64,
    dampened: bool,
    num_params: usize,
}
