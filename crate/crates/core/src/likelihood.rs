//! Observation models p(y | f) with their residual, noise and inverse link.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datasets::Targets;
use crate::error::{invalid, shape, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian { noise_var: f64 },
    /// Binary labels with a single logit.
    Bernoulli,
    Categorical { num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Real(Vec<f64>),
}

/// Result of mixing per-sample predictions.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    Probs(Vec<f64>),
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
}

impl Predictive {
    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Predictive::Probs(p) => Some(p),
            Predictive::Gaussian { .. } => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x) without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    f.iter().map(|v| v - lse).collect()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Likelihood::Gaussian { noise_var } if !(noise_var > 0.0 && noise_var.is_finite()) => {
                invalid(format!("noise variance must be positive, got {noise_var}"))
            }
            Likelihood::Categorical { num_classes } if num_classes < 2 => {
                invalid("categorical likelihood needs at least 2 classes")
            }
            _ => Ok(()),
        }
    }

    /// Network output width this likelihood expects, when fixed by the family.
    pub fn latent_dim(&self) -> Option<usize> {
        match *self {
            Likelihood::Gaussian { .. } => None,
            Likelihood::Bernoulli => Some(1),
            Likelihood::Categorical { num_classes } => Some(num_classes),
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Likelihood::Gaussian { .. })
    }

    /// Length of the class probability vector (2 for Bernoulli).
    pub fn num_probs(&self) -> usize {
        match *self {
            Likelihood::Gaussian { .. } => 0,
            Likelihood::Bernoulli => 2,
            Likelihood::Categorical { num_classes } => num_classes,
        }
    }

    fn check_f(&self, f: &[f64]) -> Result<()> {
        match self.latent_dim() {
            Some(c) if c != f.len() => shape(format!("expected {c} latent outputs, got {}", f.len())),
            _ if f.is_empty() => shape("empty latent vector"),
            _ => Ok(()),
        }
    }

    fn class_label(&self, y: &Target) -> Result<usize> {
        let limit = self.num_probs();
        match y {
            Target::Class(c) if *c < limit => Ok(*c),
            Target::Class(c) => invalid(format!("label {c} invalid for {limit} classes")),
            Target::Real(_) => invalid("classification likelihood needs a class label"),
        }
    }

    fn real_target<'a>(&self, y: &'a Target, f: &[f64]) -> Result<&'a [f64]> {
        match y {
            Target::Real(v) if v.len() == f.len() => Ok(v),
            Target::Real(v) => shape(format!("target width {} but {} outputs", v.len(), f.len())),
            Target::Class(_) => invalid("gaussian likelihood needs a real target"),
        }
    }

    pub fn log_lik(&self, y: &Target, f: &[f64]) -> Result<f64> {
        self.check_f(f)?;
        Ok(match *self {
            Likelihood::Gaussian { noise_var } => {
                let y = self.real_target(y, f)?;
                gaussian_log_lik(noise_var, y, f)
            }
            Likelihood::Bernoulli => bernoulli_log_lik(self.class_label(y)?, f[0]),
            Likelihood::Categorical { .. } => log_softmax(f)[self.class_label(y)?],
        })
    }

    /// Gradient of `log_lik` with respect to f.
    pub fn residual(&self, y: &Target, f: &[f64]) -> Result<Vec<f64>> {
        self.check_f(f)?;
        Ok(match *self {
            Likelihood::Gaussian { noise_var } => {
                let y = self.real_target(y, f)?;
                y.iter().zip(f).map(|(y, f)| (y - f) / noise_var).collect()
            }
            Likelihood::Bernoulli => vec![self.class_label(y)? as f64 - sigmoid(f[0])],
            Likelihood::Categorical { .. } => {
                let c = self.class_label(y)?;
                let mut r: Vec<f64> = softmax(f).iter().map(|p| -p).collect();
                r[c] += 1.0;
                r
            }
        })
    }

    /// Negative Hessian of `log_lik` with respect to f; label independent.
    pub fn noise(&self, f: &[f64]) -> Result<DMatrix<f64>> {
        self.check_f(f)?;
        Ok(match *self {
            Likelihood::Gaussian { noise_var } => DMatrix::identity(f.len(), f.len()) / noise_var,
            Likelihood::Bernoulli => {
                let p = sigmoid(f[0]);
                DMatrix::from_element(1, 1, p * (1.0 - p))
            }
            Likelihood::Categorical { .. } => {
                let p = softmax(f);
                let c = p.len();
                DMatrix::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
            }
        })
    }

    /// Square factor L of the noise, with L Lᵀ = Λ.
    pub fn noise_factor(&self, f: &[f64]) -> Result<DMatrix<f64>> {
        self.check_f(f)?;
        Ok(match *self {
            Likelihood::Gaussian { noise_var } => DMatrix::identity(f.len(), f.len()) / noise_var.sqrt(),
            Likelihood::Bernoulli => {
                let p = sigmoid(f[0]);
                DMatrix::from_element(1, 1, (p * (1.0 - p)).sqrt())
            }
            Likelihood::Categorical { .. } => {
                // (diag √p − p √pᵀ)(diag √p − √p pᵀ) = diag p − p pᵀ since Σp = 1
                let p = softmax(f);
                let s: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
                let c = p.len();
                DMatrix::from_fn(c, c, |i, j| if i == j { s[i] } else { 0.0 } - p[i] * s[j])
            }
        })
    }

    /// g⁻¹(f): class probabilities, or the mean for the Gaussian family.
    pub fn inverse_link(&self, f: &[f64]) -> Vec<f64> {
        match self {
            Likelihood::Gaussian { .. } => f.to_vec(),
            Likelihood::Bernoulli => {
                let p = sigmoid(f[0]);
                vec![1.0 - p, p]
            }
            Likelihood::Categorical { .. } => softmax(f),
        }
    }

    /// Averages g⁻¹ over the rows of `f_samples` (S×C). For the Gaussian
    /// family returns the mixture mean and total variance σ² + Var_s(f_s).
    pub fn predictive_mix(&self, f_samples: &DMatrix<f64>) -> Result<Predictive> {
        let s = f_samples.nrows();
        if s == 0 {
            return invalid("empty sample set");
        }
        let mut row = vec![0.0; f_samples.ncols()];
        match *self {
            Likelihood::Gaussian { noise_var } => {
                let c = f_samples.ncols();
                let mean: Vec<f64> = (0..c).map(|j| f_samples.column(j).sum() / s as f64).collect();
                let var = (0..c)
                    .map(|j| {
                        let m = mean[j];
                        noise_var + f_samples.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / s as f64
                    })
                    .collect();
                Ok(Predictive::Gaussian { mean, var })
            }
            _ => {
                let mut acc = vec![0.0; self.num_probs()];
                for i in 0..s {
                    row.iter_mut().zip(f_samples.row(i).iter()).for_each(|(r, v)| *r = *v);
                    self.check_f(&row)?;
                    for (a, p) in acc.iter_mut().zip(self.inverse_link(&row)) {
                        *a += p;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= s as f64);
                // renormalize away accumulated rounding
                let total: f64 = acc.iter().sum();
                acc.iter_mut().for_each(|a| *a /= total);
                Ok(Predictive::Probs(acc))
            }
        }
    }

    /// Σ_n log p(y_n | F_n) over the rows of `f`.
    pub fn log_lik_sum(&self, f: &DMatrix<f64>, targets: &Targets) -> Result<f64> {
        check_rows(f, targets)?;
        let mut total = 0.0;
        let mut row = vec![0.0; f.ncols()];
        for n in 0..f.nrows() {
            copy_row(f, n, &mut row);
            total += self.log_lik(&target_at(targets, n), &row)?;
        }
        Ok(total)
    }

    /// Σ_n log p(y_n | F_n) together with the stacked residuals.
    pub fn log_lik_and_residuals(&self, f: &DMatrix<f64>, targets: &Targets) -> Result<(f64, DMatrix<f64>)> {
        check_rows(f, targets)?;
        match (self, targets) {
            (Likelihood::Bernoulli, Targets::Classes { labels, .. }) => {
                if f.ncols() != 1 {
                    return shape("bernoulli likelihood needs one latent output");
                }
                let mut total = 0.0;
                let mut r = DMatrix::zeros(f.nrows(), 1);
                for (n, &y) in labels.iter().enumerate() {
                    if y > 1 {
                        return invalid(format!("label {y} invalid for 2 classes"));
                    }
                    let v = f[(n, 0)];
                    total += bernoulli_log_lik(y, v);
                    r[(n, 0)] = y as f64 - sigmoid(v);
                }
                Ok((total, r))
            }
            _ => Ok((self.log_lik_sum(f, targets)?, self.residuals(f, targets)?)),
        }
    }

    /// Residuals stacked as an N×C matrix.
    pub fn residuals(&self, f: &DMatrix<f64>, targets: &Targets) -> Result<DMatrix<f64>> {
        check_rows(f, targets)?;
        let mut out = DMatrix::zeros(f.nrows(), f.ncols());
        let mut row = vec![0.0; f.ncols()];
        for n in 0..f.nrows() {
            copy_row(f, n, &mut row);
            let r = self.residual(&target_at(targets, n), &row)?;
            for (j, v) in r.into_iter().enumerate() {
                out[(n, j)] = v;
            }
        }
        Ok(out)
    }
}

fn gaussian_log_lik(noise_var: f64, y: &[f64], f: &[f64]) -> f64 {
    let sq: f64 = y.iter().zip(f).map(|(y, f)| (y - f) * (y - f)).sum();
    -0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI * noise_var).ln() - 0.5 * sq / noise_var
}

fn bernoulli_log_lik(y: usize, f: f64) -> f64 {
    if y == 1 {
        log_sigmoid(f)
    } else {
        log_sigmoid(-f)
    }
}

pub(crate) fn target_at(targets: &Targets, n: usize) -> Target {
    match targets {
        Targets::Classes { labels, .. } => Target::Class(labels[n]),
        Targets::Real(t) => Target::Real(t.row(n).iter().copied().collect()),
    }
}

pub(crate) fn copy_row(m: &DMatrix<f64>, n: usize, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = m[(n, j)];
    }
}

fn check_rows(f: &DMatrix<f64>, targets: &Targets) -> Result<()> {
    let n = match targets {
        Targets::Classes { labels, .. } => labels.len(),
        Targets::Real(t) => t.nrows(),
    };
    if n != f.nrows() {
        return Err(Error::Shape(format!("{} outputs for {n} targets", f.nrows())));
    }
    Ok(())
}
