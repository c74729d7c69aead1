//! Experiment pipelines: the JSON configuration, δ sweeps with validation
//! selection, OOD entropy comparison and the two synthetic protocols.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curvature::{ggn, CurvatureMode, FULL_PARAM_CAP};
use crate::datasets::{load_csv, make_toy, split_stratified, Dataset, SplitSpec, Standardizer, TaskKind, ToyKind};
use crate::error::{invalid, Error, Result};
use crate::glm::{
    bnn_predictive_batch, derive_seed, glm_predictive_batch, linearize, map_predictive_batch, probs_matrix, LaplaceRefineConfig,
    LinearizedModel, NgviConfig, OutputCov, PredictiveConfig,
};
use crate::gp::{gp_fit_sod, gp_predictive_batch, KernelConfig, OutputCoupling};
use crate::likelihood::Likelihood;
use crate::network::{Activation, MlpNetwork};
use crate::posterior::{laplace_posterior, GaussianPosterior};
use crate::training::MapConfig;

mod ood;
mod sweep;
mod toy;

pub use ood::{run_ood, OodMethod, OodReport, OOD_BINS};
pub use toy::PreactivationQuantiles;

pub use sweep::{
    run_sweep, CellFailure, CellRecord, CellMetrics, CurvePoint, MeanSe, MethodSummary, MetricSummary, OracleComparison, SweepReport,
};
pub use toy::{
    run_banana, run_toy1d, toy_grid_predictive, BananaConfig, BananaMethod, BananaReport, Bimodality, GaussianSummary, Toy1dConfig,
    Toy1dCurvePoint, Toy1dReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Numeric CSV with a header row; the label column defaults to the last.
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<usize>,
    },
    Toy {
        toy: ToyKind,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Toy { toy: ToyKind::Banana, seed: 0 }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv { path, label_column } => load_csv(path, *label_column, TaskKind::Classification),
            DataSource::Toy { toy, seed } => Ok(make_toy(*toy, *seed)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
            DataSource::Toy { toy, .. } => serde_json::to_value(toy).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictiveKind {
    Map,
    Bnn,
    Glm,
    Gp,
}

impl PredictiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictiveKind::Map => "map",
            PredictiveKind::Bnn => "bnn",
            PredictiveKind::Glm => "glm",
            PredictiveKind::Gp => "gp",
        }
    }
}

impl std::str::FromStr for PredictiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(PredictiveKind::Map),
            "bnn" => Ok(PredictiveKind::Bnn),
            "glm" => Ok(PredictiveKind::Glm),
            "gp" => Ok(PredictiveKind::Gp),
            other => invalid(format!("unknown predictive '{other}' (map, bnn, glm, gp)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefinementKind {
    None,
    Laplace,
    NgviFull,
    NgviDiag,
}

impl RefinementKind {
    /// Method label used in reports.
    pub fn name(self) -> &'static str {
        match self {
            RefinementKind::None => "glm",
            RefinementKind::Laplace => "glm_refine_laplace",
            RefinementKind::NgviFull => "glm_refine_ngvi_full",
            RefinementKind::NgviDiag => "glm_refine_ngvi_diag",
        }
    }
}

impl std::str::FromStr for RefinementKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RefinementKind::None),
            "laplace" => Ok(RefinementKind::Laplace),
            "ngvi-full" => Ok(RefinementKind::NgviFull),
            "ngvi-diag" => Ok(RefinementKind::NgviDiag),
            other => invalid(format!("unknown refinement '{other}' (none, laplace, ngvi-full, ngvi-diag)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_scale: f64,
    pub output_activation: bool,
    /// `None` picks Bernoulli for two classes and categorical otherwise.
    pub likelihood: Option<Likelihood>,
    /// Training schedule; its `delta` and `seed` are replaced per cell.
    pub map: MapConfig,
    /// Train each split once at the first δ, then continue from the previous
    /// δ's solution for this many epochs.
    pub warm_start_steps: Option<usize>,
    pub curvature: CurvatureMode,
    pub dampened: bool,
    pub predictives: Vec<PredictiveKind>,
    pub refinements: Vec<RefinementKind>,
    pub deltas: Vec<f64>,
    pub samples: usize,
    pub gp_subset: Option<usize>,
    pub gp_scale: Option<f64>,
    pub gp_coupling: OutputCoupling,
    /// One split per seed.
    pub seeds: Vec<u64>,
    /// Train/valid/test fractions; `None` uses all data for all three.
    pub split: Option<(f64, f64, f64)>,
    pub standardize: bool,
    pub laplace_refine: LaplaceRefineConfig,
    pub ngvi: NgviConfig,
    /// Directory for trained parameters keyed by a hash of everything that
    /// determines them.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DataSource::default(),
            hidden: vec![50, 50],
            activation: Activation::Tanh,
            output_scale: 1.0,
            output_activation: false,
            likelihood: None,
            map: MapConfig::default(),
            warm_start_steps: None,
            curvature: CurvatureMode::Full,
            dampened: false,
            predictives: vec![PredictiveKind::Map, PredictiveKind::Bnn, PredictiveKind::Glm],
            refinements: Vec::new(),
            deltas: log_grid(1e-2, 1e2, 10),
            samples: 1000,
            gp_subset: None,
            gp_scale: None,
            gp_coupling: OutputCoupling::Independent,
            seeds: (0..10).collect(),
            split: Some((0.7, 0.15, 0.15)),
            standardize: true,
            laplace_refine: LaplaceRefineConfig::default(),
            ngvi: NgviConfig::default(),
            cache_dir: None,
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    lin_grid(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn lin_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() {
            return invalid("δ grid is empty");
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return invalid(format!("prior precision {d} must be positive"));
        }
        if self.seeds.is_empty() {
            return invalid("need at least one seed");
        }
        if self.samples == 0 {
            return invalid("need at least one Monte Carlo sample");
        }
        if self.predictives.is_empty() {
            return invalid("no predictive requested");
        }
        if self.hidden.contains(&0) {
            return invalid("hidden layers must have at least one unit");
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return invalid("output scale must be positive");
        }
        if self.curvature == CurvatureMode::Gram {
            return invalid("curvature must be full, diag or kfac");
        }
        let refines = self.refinements.iter().any(|r| *r != RefinementKind::None);
        if refines && !self.predictives.contains(&PredictiveKind::Glm) {
            return invalid("refinements run at the GLM-selected δ and need the glm predictive");
        }
        if self.gp_subset == Some(0) {
            return invalid("GP subset must be nonempty");
        }
        if let Some(s) = self.gp_scale {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("GP prior scale {s} must be positive"));
            }
        }
        if self.warm_start_steps == Some(0) {
            return invalid("warm-start epochs must be positive");
        }
        MapConfig { delta: 1.0, ..self.map.clone() }.validate()?;
        if let Some(ratios) = self.split {
            SplitSpec::new(ratios, 0, true)?;
        }
        if let Some(lik) = &self.likelihood {
            lik.validate()?;
            if !lik.is_classification() {
                return invalid("experiments evaluate classification likelihoods only");
            }
        }
        if let DataSource::Csv { path, .. } = &self.dataset {
            if !path.is_file() {
                return invalid(format!("dataset file {} does not exist", path.display()));
            }
        }
        Ok(())
    }

    pub fn likelihood_for(&self, data: &Dataset) -> Result<Likelihood> {
        let c = data.num_classes();
        if c < 2 {
            return invalid("classification needs at least two classes");
        }
        match self.likelihood {
            None if c == 2 => Ok(Likelihood::Bernoulli),
            None => Ok(Likelihood::Categorical { num_classes: c }),
            Some(Likelihood::Bernoulli) if c == 2 => Ok(Likelihood::Bernoulli),
            Some(Likelihood::Categorical { num_classes }) if num_classes == c => Ok(Likelihood::Categorical { num_classes }),
            Some(other) => invalid(format!("likelihood {other:?} does not fit {c} classes")),
        }
    }

    pub fn network_for(&self, input_dim: usize, lik: &Likelihood) -> Result<MlpNetwork> {
        let out = lik.latent_dim().unwrap_or(1);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(out);
        let mut net = MlpNetwork::new(sizes, self.activation)?.with_output_scale(self.output_scale);
        if self.output_activation {
            net = net.with_output_activation();
        }
        Ok(net)
    }

    pub(crate) fn predictive_config(&self, seed: u64) -> PredictiveConfig {
        PredictiveConfig { samples: self.samples, seed, output_cov: OutputCov::Auto }
    }

    pub(crate) fn kernel_config(&self, delta: f64, seed: u64) -> KernelConfig {
        KernelConfig { delta, scale: self.gp_scale, subset_size: self.gp_subset, seed, coupling: self.gp_coupling }
    }
}

/// Train, validation and test parts of one split after optional
/// standardization with training statistics.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
}

pub fn prepare_split(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<PreparedSplit> {
    let (train, valid, test) = match cfg.split {
        Some(ratios) => split_stratified(data, &SplitSpec::new(ratios, seed, true)?)?,
        None => (data.clone(), data.clone(), data.clone()),
    };
    if !cfg.standardize {
        return Ok(PreparedSplit { train, valid, test, standardizer: None });
    }
    let s = Standardizer::fit(&train);
    Ok(PreparedSplit { train: s.transform(&train)?, valid: s.transform(&valid)?, test: s.transform(&test)?, standardizer: Some(s) })
}

/// Laplace-GGN posterior at θ. Full curvature is kept in its Gram form when
/// the stacked Jacobian has fewer columns than parameters, or when a dense
/// matrix would exceed the size cap.
pub fn fit_posterior(
    net: &MlpNetwork,
    lik: &Likelihood,
    train: &Dataset,
    theta: &DVector<f64>,
    delta: f64,
    mode: CurvatureMode,
    dampened: bool,
) -> Result<GaussianPosterior> {
    let p = net.num_params();
    let r = train.len() * net.output_dim();
    let mode = match mode {
        CurvatureMode::Full if r < p || p > FULL_PARAM_CAP => CurvatureMode::Gram,
        m => m,
    };
    laplace_posterior(theta.clone(), ggn(net, lik, train, theta, mode)?, delta, dampened)
}

/// Evaluates the predictives of one trained model. The Laplace posterior is
/// fitted on first use unless one is supplied.
pub struct Predictor<'a> {
    pub net: &'a MlpNetwork,
    pub lik: &'a Likelihood,
    pub train: &'a Dataset,
    pub theta: DVector<f64>,
    pub delta: f64,
    pub posterior: Option<GaussianPosterior>,
    lin: Option<LinearizedModel>,
}

impl<'a> Predictor<'a> {
    /// `theta` is the linearization point θ*.
    pub fn new(net: &'a MlpNetwork, lik: &'a Likelihood, train: &'a Dataset, theta: DVector<f64>, delta: f64) -> Self {
        Self { net, lik, train, theta, delta, posterior: None, lin: None }
    }

    pub fn with_posterior(mut self, posterior: GaussianPosterior) -> Self {
        self.posterior = Some(posterior);
        self
    }

    fn ensure_posterior(&mut self, cfg: &ExperimentConfig) -> Result<&GaussianPosterior> {
        if self.posterior.is_none() {
            self.posterior = Some(fit_posterior(self.net, self.lik, self.train, &self.theta, self.delta, cfg.curvature, cfg.dampened)?);
        }
        Ok(self.posterior.as_ref().expect("just set"))
    }

    fn ensure_lin(&mut self) -> Result<&LinearizedModel> {
        if self.lin.is_none() {
            self.lin = Some(linearize(self.net, &self.theta)?);
        }
        Ok(self.lin.as_ref().expect("just set"))
    }

    /// N × K class probabilities of one predictive.
    pub fn probs(&mut self, cfg: &ExperimentConfig, kind: PredictiveKind, x: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
        let pc = cfg.predictive_config(seed);
        let preds = match kind {
            PredictiveKind::Map => map_predictive_batch(self.net, &self.theta, self.lik, x)?,
            PredictiveKind::Bnn => {
                self.ensure_posterior(cfg)?;
                bnn_predictive_batch(self.net, self.posterior.as_ref().expect("fitted"), self.lik, x, &pc)?
            }
            PredictiveKind::Glm => {
                self.ensure_posterior(cfg)?;
                self.ensure_lin()?;
                glm_predictive_batch(self.lin.as_ref().expect("set"), self.posterior.as_ref().expect("fitted"), self.lik, x, &pc)?
            }
            PredictiveKind::Gp => {
                let kc = cfg.kernel_config(self.delta, seed);
                let (lik, train) = (self.lik, self.train);
                let gp = gp_fit_sod(self.ensure_lin()?, lik, train, &kc)?;
                gp_predictive_batch(&gp, lik, x, &pc)?
            }
        };
        probs_matrix(&preds)
    }
}

/// Rows of `a` followed by rows of `b`.
pub(crate) fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    m.rows_mut(0, a.nrows()).copy_from(a);
    m.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    m
}

/// Seed of a (split, δ, purpose) triple.
pub(crate) fn cell_seed(seed: u64, delta_index: usize, purpose: u64) -> u64 {
    derive_seed(derive_seed(seed, delta_index as u64), purpose)
}
