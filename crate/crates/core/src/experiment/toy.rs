use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sweep::csv_err;
use super::{fit_posterior, lin_grid, vstack};
use crate::curvature::CurvatureMode;
use crate::datasets::{make_toy, split_stratified, Dataset, SplitSpec, ToyKind};
use crate::error::{invalid, Error, Result};
use crate::glm::{
    bnn_latent_samples, derive_seed, glm_output_distribution, glm_predictive_batch, glm_refine_ngvi, linearize, map_predictive_batch,
    probs_matrix, sample_latents, NgviConfig, NgviStructure, OutputCov, OutputGaussian, PredictiveConfig,
};
use crate::gp::{gp_fit_sod, KernelConfig};
use crate::likelihood::{sigmoid, Likelihood};
use crate::metrics::{entropy, evaluate, variance_decomposition, VarianceSplit};
use crate::network::{Activation, MlpNetwork};
use crate::posterior::GaussianPosterior;
use crate::reference::{
    exact_hessian_laplace, grid_posterior, hmc_sample, log_posterior_fn, log_posterior_grad_fn, toy1d_model, tv_distance_2d, GridPosterior,
    HmcConfig,
};
use crate::training::{map_train, LrDecay, MapConfig};

const GRID_RESOLUTION: usize = 400;
const PREACTIVATION_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Grid posterior of a two-parameter binary model over [−h, h]² with
/// h = 8·max(1, δ^(-1/2)).
fn toy_grid(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, delta: f64) -> Result<GridPosterior> {
    if net.num_params() != 2 || *lik != Likelihood::Bernoulli {
        return invalid("the grid oracle covers two-parameter binary models");
    }
    let h = 8.0 * delta.powf(-0.5).max(1.0);
    grid_posterior(log_posterior_fn(net, lik, data, delta), &[(-h, h), (-h, h)], GRID_RESOLUTION)
}

/// E[p(y=1 | x, θ)] over a parameter sample weighted by `weights`.
fn weighted_predictive(net: &MlpNetwork, points: impl Iterator<Item = (Vec<f64>, f64)>, xs: &[f64]) -> Result<Vec<f64>> {
    let x = DMatrix::from_column_slice(xs.len(), 1, xs);
    let mut acc = vec![0.0; xs.len()];
    for (theta, w) in points {
        if w == 0.0 {
            continue;
        }
        let f = net.forward(&DVector::from_vec(theta), &x)?;
        for (a, v) in acc.iter_mut().zip(f.iter()) {
            *a += w * sigmoid(*v);
        }
    }
    Ok(acc)
}

/// Grid-oracle predictive p(y=1 | x) of a two-parameter binary model with
/// one input.
pub fn toy_grid_predictive(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, delta: f64, xs: &[f64]) -> Result<Vec<f64>> {
    let grid = toy_grid(net, lik, data, delta)?;
    let masses = grid.masses();
    weighted_predictive(net, masses.iter().enumerate().map(|(i, m)| (grid.point(i), *m)), xs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major.
    pub cov: Vec<Vec<f64>>,
}

impl GaussianSummary {
    fn new(mean: &[f64], cov: &DMatrix<f64>) -> Self {
        Self { mean: mean.to_vec(), cov: cov.row_iter().map(|r| r.iter().copied().collect()).collect() }
    }

    fn of_posterior(p: &GaussianPosterior) -> Self {
        Self::new(p.mean.as_slice(), &p.dense_covariance())
    }

    fn of_samples(s: &DMatrix<f64>) -> Self {
        let n = s.nrows() as f64;
        let mean: Vec<f64> = s.column_iter().map(|c| c.sum() / n).collect();
        let centred = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] - mean[j]);
        Self::new(&mean, &(centred.transpose() * &centred / (n - 1.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toy1dConfig {
    pub delta: f64,
    /// Training schedule; `delta` and `seed` come from this config.
    pub map: MapConfig,
    pub hmc: HmcConfig,
    /// Monte Carlo draws for the BNN and GLM predictives.
    pub samples: usize,
    pub x_points: usize,
    pub x_range: (f64, f64),
    /// Input where the BNN predictive density is histogrammed.
    pub probe_x: f64,
    pub density_bins: usize,
    pub ngvi: NgviConfig,
    pub seed: u64,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            map: MapConfig { learning_rate: 1e-2, epochs: 10_000, ..Default::default() },
            hmc: HmcConfig::default(),
            samples: 10_000,
            x_points: 50,
            x_range: (-7.0, 7.0),
            probe_x: 3.0,
            density_bins: 20,
            ngvi: NgviConfig { iterations: 500, learning_rate: Some(0.5), ..Default::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy1dCurvePoint {
    pub x: f64,
    pub grid: f64,
    pub hmc: f64,
    pub map: f64,
    pub bnn: f64,
    pub glm: f64,
    pub glm_ngvi: f64,
    /// Predictives under the exact-Hessian Laplace posterior.
    pub bnn_full: f64,
    pub glm_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreactivationQuantiles {
    pub x: f64,
    pub laplace: Vec<f64>,
    pub hmc: Vec<f64>,
}

/// Two local maxima of a histogram and the deepest valley between them,
/// depth relative to the lower peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    pub left_peak: usize,
    pub right_peak: usize,
    pub valley: usize,
    pub relative_depth: f64,
}

impl Bimodality {
    /// Pair of local maxima with the deepest relative valley, if any.
    pub fn of(h: &[usize]) -> Option<Self> {
        let n = h.len();
        let is_max = |k: usize| {
            let l = if k > 0 { h[k - 1] } else { 0 };
            let r = if k + 1 < n { h[k + 1] } else { 0 };
            h[k] > l && h[k] >= r
        };
        let peaks: Vec<usize> = (0..n).filter(|&k| is_max(k)).collect();
        let mut best: Option<Self> = None;
        for (a, &i) in peaks.iter().enumerate() {
            for &j in &peaks[a + 1..] {
                let valley = (i..=j).min_by_key(|&k| h[k]).expect("nonempty range");
                let depth = 1.0 - h[valley] as f64 / h[i].min(h[j]) as f64;
                if best.is_none_or(|b| depth > b.relative_depth) {
                    best = Some(Self { left_peak: i, right_peak: j, valley, relative_depth: depth });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toy1dReport {
    pub delta: f64,
    pub theta_map: Vec<f64>,
    pub laplace_ggn: GaussianSummary,
    pub laplace_full: GaussianSummary,
    pub glm_ngvi: GaussianSummary,
    pub grid: GaussianSummary,
    pub hmc: GaussianSummary,
    pub hmc_acceptance: f64,
    pub hmc_energy_drift: f64,
    pub hmc_tv_to_grid: f64,
    pub grid_mass_w_negative: f64,
    /// Φ(−μ_w/σ_w) under the Laplace-GGN posterior.
    pub laplace_mass_w_negative: f64,
    pub curves: Vec<Toy1dCurvePoint>,
    pub preactivation_quantiles: Vec<PreactivationQuantiles>,
    pub glm_max_abs_error: f64,
    pub glm_ngvi_max_abs_error: f64,
    pub bnn_max_abs_error: f64,
    pub probe_x: f64,
    pub probe_grid: f64,
    pub probe_glm: f64,
    pub probe_bnn: f64,
    /// Counts of p(y=1 | probe_x, θ_s) over equal bins on [0, 1].
    pub probe_bnn_histogram: Vec<usize>,
    pub probe_bimodality: Option<Bimodality>,
}

impl Toy1dReport {
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.curves {
            w.serialize(p).map_err(csv_err)?;
        }
        csv_string(w)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    String::from_utf8(w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?).map_err(|e| Error::Numerical(e.to_string()))
}

fn quantiles(mut v: Vec<f64>, qs: &[f64]) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    qs.iter()
        .map(|q| {
            let pos = q * (n - 1) as f64;
            let (lo, t) = (pos.floor() as usize, pos.fract());
            v[lo] + t * (v[(lo + 1).min(n - 1)] - v[lo])
        })
        .collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf, absolute error below 1.5e-7
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * z);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-z * z).exp();
    0.5 * (1.0 + erf.copysign(x))
}

fn class1(probs: &DMatrix<f64>) -> Vec<f64> {
    probs.column(1).iter().copied().collect()
}

/// The single-unit step problem end to end: MAP, Laplace-GGN, exact-Hessian
/// Laplace, grid and HMC oracles, NGVI in the GLM, and predictive curves.
pub fn run_toy1d(cfg: &Toy1dConfig) -> Result<Toy1dReport> {
    if !(cfg.delta > 0.0) || cfg.samples < 2 || cfg.x_points < 2 || cfg.density_bins < 3 {
        return invalid("toy1d needs δ > 0, two or more samples and x points, and three or more bins");
    }
    let (net, lik, data) = toy1d_model();
    let delta = cfg.delta;
    let map = MapConfig { delta, seed: cfg.seed, ..cfg.map.clone() };
    let theta = map_train(&net, &lik, &data, &map)?.theta;
    let ggn_post = fit_posterior(&net, &lik, &data, &theta, delta, CurvatureMode::Full, false)?;
    let full_post = exact_hessian_laplace(&net, &lik, &data, delta, &theta)?;
    let lin = linearize(&net, &theta)?;
    let ngvi = glm_refine_ngvi(&lin, &lik, &data, delta, &cfg.ngvi, NgviStructure::Full)?.posterior;

    let grid = toy_grid(&net, &lik, &data, delta)?;
    let hmc = hmc_sample(log_posterior_grad_fn(&net, &lik, &data, delta), theta.as_slice(), &cfg.hmc)?;
    let tv = tv_distance_2d(&grid, &hmc.samples, 50)?;

    let xs = lin_grid(cfg.x_range.0, cfg.x_range.1, cfg.x_points);
    let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let pc = PredictiveConfig { samples: cfg.samples, seed: cfg.seed, output_cov: OutputCov::Auto };
    let masses = grid.masses();
    let grid_curve = weighted_predictive(&net, masses.iter().enumerate().map(|(i, m)| (grid.point(i), *m)), &xs)?;
    let s = hmc.samples.nrows() as f64;
    let hmc_curve = weighted_predictive(&net, hmc.samples.row_iter().map(|r| (r.iter().copied().collect(), 1.0 / s)), &xs)?;
    let map_curve = class1(&probs_matrix(&map_predictive_batch(&net, &theta, &lik, &x)?)?);
    let bnn_mean = |post: &GaussianPosterior| -> Result<Vec<f64>> {
        let f = bnn_latent_samples(&net, post, &x, cfg.samples, cfg.seed)?;
        Ok(f.iter().map(|m| m.iter().map(|v| sigmoid(*v)).sum::<f64>() / cfg.samples as f64).collect())
    };
    let glm_mean = |post: &GaussianPosterior| -> Result<Vec<f64>> { Ok(class1(&probs_matrix(&glm_predictive_batch(&lin, post, &lik, &x, &pc)?)?)) };
    let (bnn, glm, glm_ngvi) = (bnn_mean(&ggn_post)?, glm_mean(&ggn_post)?, glm_mean(&ngvi)?);
    let (bnn_full, glm_full) = (bnn_mean(&full_post)?, glm_mean(&full_post)?);

    let max_err = |v: &[f64]| v.iter().zip(&grid_curve).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let curves = (0..xs.len())
        .map(|i| Toy1dCurvePoint {
            x: xs[i],
            grid: grid_curve[i],
            hmc: hmc_curve[i],
            map: map_curve[i],
            bnn: bnn[i],
            glm: glm[i],
            glm_ngvi: glm_ngvi[i],
            bnn_full: bnn_full[i],
            glm_full: glm_full[i],
        })
        .collect();

    let laplace_draws = ggn_post.sample(cfg.samples, derive_seed(cfg.seed, 1))?;
    let preact = |draws: &DMatrix<f64>, x: f64| quantiles(draws.row_iter().map(|r| r[0] * x + r[1]).collect(), &PREACTIVATION_QUANTILES);
    let preactivation_quantiles =
        xs.iter().map(|&x| PreactivationQuantiles { x, laplace: preact(&laplace_draws, x), hmc: preact(&hmc.samples, x) }).collect();

    let probe = DMatrix::from_element(1, 1, cfg.probe_x);
    let probe_f = bnn_latent_samples(&net, &ggn_post, &probe, cfg.samples, cfg.seed)?.remove(0);
    let probe_p: Vec<f64> = probe_f.iter().map(|v| sigmoid(*v)).collect();
    let probe_bnn_histogram = crate::metrics::histogram(&probe_p, 0.0, 1.0, cfg.density_bins);
    let probe_glm = class1(&probs_matrix(&glm_predictive_batch(&lin, &ggn_post, &lik, &probe, &pc)?)?)[0];
    let probe_grid = weighted_predictive(&net, masses.iter().enumerate().map(|(i, m)| (grid.point(i), *m)), &[cfg.probe_x])?[0];

    let cov = ggn_post.dense_covariance();
    Ok(Toy1dReport {
        delta,
        theta_map: theta.iter().copied().collect(),
        laplace_ggn: GaussianSummary::of_posterior(&ggn_post),
        laplace_full: GaussianSummary::of_posterior(&full_post),
        glm_ngvi: GaussianSummary::of_posterior(&ngvi),
        grid: GaussianSummary::new(&grid.mean(), &grid.covariance()),
        hmc: GaussianSummary::of_samples(&hmc.samples),
        hmc_acceptance: hmc.acceptance_rate,
        hmc_energy_drift: hmc.mean_energy_drift,
        hmc_tv_to_grid: tv,
        grid_mass_w_negative: grid.mass_where(|t| t[0] < 0.0),
        laplace_mass_w_negative: std_normal_cdf(-theta[0] / cov[(0, 0)].sqrt()),
        glm_max_abs_error: max_err(&glm),
        glm_ngvi_max_abs_error: max_err(&glm_ngvi),
        bnn_max_abs_error: max_err(&bnn),
        curves,
        preactivation_quantiles,
        probe_x: cfg.probe_x,
        probe_grid,
        probe_glm,
        probe_bnn: probe_p.iter().sum::<f64>() / probe_p.len() as f64,
        probe_bimodality: Bimodality::of(&probe_bnn_histogram),
        probe_bnn_histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BananaConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub hidden: Vec<usize>,
    pub deltas: Vec<f64>,
    pub map: MapConfig,
    pub samples: usize,
    pub grid_size: usize,
    /// The grid spans [−extent, extent]².
    pub extent: f64,
    /// Distance of the far probe beyond the largest training x₁.
    pub outside_distance: f64,
}

impl Default for BananaConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.05,
            valid_fraction: 0.05,
            hidden: vec![50, 50],
            deltas: lin_grid(0.1, 2.0, 10),
            map: MapConfig {
                learning_rate: 1e-2,
                epochs: 3000,
                batch_size: None,
                delta: 1.0,
                lr_decay: Some(LrDecay { epochs: vec![2400, 2800], factor: 0.1 }),
                seed: 0,
            },
            samples: 1000,
            grid_size: 100,
            extent: 4.0,
            outside_distance: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BananaMethod {
    pub method: String,
    pub mean_entropy: f64,
    /// Row-major maps over the grid, index iy·G + ix.
    pub prob: Vec<f64>,
    pub entropy: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub centroid: VarianceSplit,
    pub outside: VarianceSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BananaReport {
    pub train_size: usize,
    pub valid_size: usize,
    pub deltas: Vec<f64>,
    /// MAP validation NLL per δ.
    pub valid_nll: Vec<f64>,
    pub delta: f64,
    pub axis: Vec<f64>,
    pub centroid: [f64; 2],
    pub outside_point: [f64; 2],
    pub methods: Vec<BananaMethod>,
}

impl BananaReport {
    pub fn method(&self, name: &str) -> Option<&BananaMethod> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// method,x1,x2,prob,entropy,epistemic,aleatoric
    pub fn maps_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "x1", "x2", "prob", "entropy", "epistemic", "aleatoric"]).map_err(csv_err)?;
        let g = self.axis.len();
        for m in &self.methods {
            for (k, p) in m.prob.iter().enumerate() {
                w.write_record([
                    m.method.clone(),
                    self.axis[k % g].to_string(),
                    self.axis[k / g].to_string(),
                    p.to_string(),
                    m.entropy[k].to_string(),
                    m.epistemic[k].to_string(),
                    m.aleatoric[k].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        csv_string(w)
    }
}

/// Per-point class-1 probability samples, one row per point.
fn probability_samples_from_outputs(outs: &[OutputGaussian], samples: usize, seed: u64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(outs.len(), samples);
    for (n, o) in outs.iter().enumerate() {
        let f = sample_latents(o, samples, derive_seed(seed, n as u64), OutputCov::Auto);
        for s in 0..samples {
            p[(n, s)] = sigmoid(f[(s, 0)]);
        }
    }
    p
}

const BNN_CHUNK: usize = 1000;

fn bnn_probability_samples(net: &MlpNetwork, post: &GaussianPosterior, x: &DMatrix<f64>, samples: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut p = DMatrix::zeros(x.nrows(), samples);
    let mut start = 0;
    while start < x.nrows() {
        let len = BNN_CHUNK.min(x.nrows() - start);
        // the same seed draws the same θ_s for every chunk
        let f = bnn_latent_samples(net, post, &x.rows(start, len).into_owned(), samples, seed)?;
        for (n, m) in f.iter().enumerate() {
            for s in 0..samples {
                p[(start + n, s)] = sigmoid(m[(s, 0)]);
            }
        }
        start += len;
    }
    Ok(p)
}

fn banana_method(name: &str, p: &DMatrix<f64>, n_grid: usize) -> Result<BananaMethod> {
    let mut splits = Vec::with_capacity(p.nrows());
    for row in p.row_iter() {
        let v: Vec<f64> = row.iter().copied().collect();
        splits.push(if v.len() == 1 {
            VarianceSplit { aleatoric: v[0] * (1.0 - v[0]), epistemic: 0.0, total: v[0] * (1.0 - v[0]) }
        } else {
            variance_decomposition(&v)?
        });
    }
    let prob: Vec<f64> = p.row_iter().take(n_grid).map(|r| r.mean()).collect();
    let ent: Vec<f64> = prob.iter().map(|q| entropy(&[1.0 - q, *q])).collect();
    Ok(BananaMethod {
        method: name.into(),
        mean_entropy: ent.iter().sum::<f64>() / n_grid as f64,
        entropy: ent,
        prob,
        epistemic: splits[..n_grid].iter().map(|s| s.epistemic).collect(),
        aleatoric: splits[..n_grid].iter().map(|s| s.aleatoric).collect(),
        centroid: splits[n_grid],
        outside: splits[n_grid + 1],
    })
}

/// Two-crescent protocol: δ picked for the MAP network on a small
/// validation split, then MAP, BNN, GLM and GP predictives mapped over a
/// square input grid with their aleatoric/epistemic variance split.
pub fn run_banana(cfg: &BananaConfig) -> Result<BananaReport> {
    let (ft, fv) = (cfg.train_fraction, cfg.valid_fraction);
    if cfg.deltas.is_empty() || cfg.deltas.iter().any(|d| !(*d > 0.0)) {
        return invalid("δ grid must be nonempty and positive");
    }
    if cfg.samples < 2 || cfg.grid_size < 2 || !(cfg.extent > 0.0) {
        return invalid("need two or more samples, a grid of two or more points and a positive extent");
    }
    let data = make_toy(ToyKind::Banana, cfg.seed);
    let (train, valid, _) = split_stratified(&data, &SplitSpec::new((ft, fv, 1.0 - ft - fv), cfg.seed, true)?)?;
    let lik = Likelihood::Bernoulli;
    let mut sizes = vec![2];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let net = MlpNetwork::new(sizes, Activation::Tanh)?;

    let mut valid_nll = Vec::with_capacity(cfg.deltas.len());
    let mut best: Option<(f64, usize, DVector<f64>)> = None;
    for (i, &delta) in cfg.deltas.iter().enumerate() {
        let theta = map_train(&net, &lik, &train, &MapConfig { delta, seed: cfg.seed, ..cfg.map.clone() })?.theta;
        let probs = probs_matrix(&map_predictive_batch(&net, &theta, &lik, &valid.inputs)?)?;
        let nll = evaluate(&probs, valid.labels().unwrap_or_default())?.nll;
        valid_nll.push(nll);
        if best.as_ref().is_none_or(|b| nll < b.0) {
            best = Some((nll, i, theta));
        }
    }
    let (_, i, theta) = best.expect("nonempty grid");
    let delta = cfg.deltas[i];

    let axis = lin_grid(-cfg.extent, cfg.extent, cfg.grid_size);
    let g = axis.len();
    let n_grid = g * g;
    let points = DMatrix::from_fn(n_grid, 2, |k, j| if j == 0 { axis[k % g] } else { axis[k / g] });
    let centroid = [train.inputs.column(0).mean(), train.inputs.column(1).mean()];
    let outside_point = [train.inputs.column(0).max() + cfg.outside_distance, centroid[1]];
    let extra = DMatrix::from_row_slice(2, 2, &[centroid[0], centroid[1], outside_point[0], outside_point[1]]);
    let x = vstack(&points, &extra);

    let post = fit_posterior(&net, &lik, &train, &theta, delta, CurvatureMode::Full, false)?;
    let lin = linearize(&net, &theta)?;
    let map_p = net.forward(&theta, &x)?.map(sigmoid);
    let bnn_p = bnn_probability_samples(&net, &post, &x, cfg.samples, cfg.seed)?;
    let glm_p = probability_samples_from_outputs(&glm_output_distribution(&lin, &post, &x)?, cfg.samples, cfg.seed);
    let gp = gp_fit_sod(&lin, &lik, &train, &KernelConfig { seed: cfg.seed, ..KernelConfig::new(delta) })?;
    let gp_p = probability_samples_from_outputs(&gp.output_distribution(&x)?, cfg.samples, cfg.seed);

    let methods = vec![
        banana_method("map", &map_p, n_grid)?,
        banana_method("bnn", &bnn_p, n_grid)?,
        banana_method("glm", &glm_p, n_grid)?,
        banana_method("gp", &gp_p, n_grid)?,
    ];
    Ok(BananaReport {
        train_size: train.len(),
        valid_size: valid.len(),
        deltas: cfg.deltas.clone(),
        valid_nll,
        delta,
        axis,
        centroid,
        outside_point,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bimodality_examples() {
        let b = Bimodality::of(&[10, 4, 1, 3, 20]).unwrap();
        assert_eq!((b.left_peak, b.right_peak, b.valley), (0, 4, 2));
        assert!((b.relative_depth - 0.9).abs() < 1e-12);
        assert!(Bimodality::of(&[1, 2, 3, 2, 1]).is_none());
        // a plateau is one peak at its left end
        assert!(Bimodality::of(&[1, 5, 5, 1]).is_none());
    }

    #[test]
    fn quantiles_interpolate() {
        let q = quantiles(vec![3.0, 1.0, 2.0, 4.0, 5.0], &[0.0, 0.5, 0.25, 1.0]);
        assert_eq!(q, vec![1.0, 3.0, 2.0, 5.0]);
    }

    #[test]
    fn normal_cdf_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((std_normal_cdf(1.96) - 0.975_002_1).abs() < 2e-7);
        assert!((std_normal_cdf(-1.0) - 0.158_655_25).abs() < 2e-7);
    }

    #[test]
    fn grid_predictive_is_monotone_on_the_step_toy() {
        let (net, lik, data) = toy1d_model();
        let xs = lin_grid(-7.0, 7.0, 15);
        let p = toy_grid_predictive(&net, &lik, &data, 1.0, &xs).unwrap();
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
        assert!((p[7] - 0.5).abs() < 1e-9, "odd symmetry puts 0.5 at x = 0");
    }

    #[test]
    fn small_banana_run_has_consistent_maps() {
        let cfg = BananaConfig {
            hidden: vec![10],
            deltas: vec![0.5, 1.0],
            map: MapConfig { learning_rate: 1e-2, epochs: 200, ..Default::default() },
            samples: 50,
            grid_size: 8,
            ..Default::default()
        };
        let r = run_banana(&cfg).unwrap();
        assert_eq!(r.train_size, 265);
        assert_eq!(r.methods.len(), 4);
        for m in &r.methods {
            assert_eq!(m.prob.len(), 64);
            for k in 0..64 {
                assert!((m.aleatoric[k] + m.epistemic[k] - m.prob[k] * (1.0 - m.prob[k])).abs() < 1e-12);
            }
        }
        assert!(r.method("map").unwrap().epistemic.iter().all(|v| *v == 0.0));
        assert_eq!(r.maps_csv().unwrap().lines().count(), 1 + 4 * 64);
    }
}
