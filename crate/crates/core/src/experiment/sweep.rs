use std::path::PathBuf;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::toy::toy_grid_predictive;
use super::{cell_seed, prepare_split, vstack, DataSource, ExperimentConfig, Predictor, PreparedSplit, PredictiveKind, RefinementKind};
use crate::datasets::{Dataset, ToyKind};
use crate::error::{Error, Result};
use crate::glm::{
    glm_predictive_batch, glm_refine_laplace_design, glm_refine_ngvi_design, linearize, probs_matrix, GlmDesign, NgviStructure,
};
use crate::likelihood::Likelihood;
use crate::metrics::{evaluate, EvalReport};
use crate::network::MlpNetwork;
use crate::training::{map_train_from, MapConfig};

/// Inputs of the grid-oracle comparison on the step toy.
const ORACLE_POINTS: usize = 50;
const ORACLE_RANGE: (f64, f64) = (-7.0, 7.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub nll: f64,
    pub accuracy: f64,
    pub ece: f64,
}

impl From<&EvalReport> for CellMetrics {
    fn from(r: &EvalReport) -> Self {
        Self { nll: r.nll, accuracy: r.accuracy, ece: r.ece }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub delta: f64,
    pub method: String,
    pub valid: CellMetrics,
    pub test: CellMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub seed: u64,
    pub delta: f64,
    /// "train", a predictive name or a refinement name.
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Sample standard deviation over √n; zero for a single value.
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub nll: MeanSe,
    pub accuracy: MeanSe,
    pub ece: MeanSe,
}

impl MetricSummary {
    fn of(ms: &[CellMetrics]) -> Self {
        let col = |f: fn(&CellMetrics) -> f64| MeanSe::of(&ms.iter().map(f).collect::<Vec<_>>());
        Self { nll: col(|m| m.nll), accuracy: col(|m| m.accuracy), ece: col(|m| m.ece) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub delta: f64,
    pub valid_nll: MeanSe,
    pub test: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// Per-δ averages over seeds; empty for refinements, which only run at
    /// the GLM-selected δ.
    pub curve: Vec<CurvePoint>,
    /// δ* per seed (validation NLL, ties to the smaller δ).
    pub selected_deltas: Vec<f64>,
    pub test: MetricSummary,
}

/// Max-abs gap between a predictive mean and the grid-oracle predictive on
/// the step toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub seed: u64,
    pub delta: f64,
    pub method: String,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dataset: String,
    pub num_classes: usize,
    pub input_dim: usize,
    pub num_params: usize,
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodSummary>,
    pub cells: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    pub complete: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub oracle: Vec<OracleComparison>,
}

impl SweepReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Long-format per-δ curves: method,delta,valid_nll,test_nll,test_nll_se,test_accuracy,test_ece.
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "delta", "valid_nll", "test_nll", "test_nll_se", "test_accuracy", "test_ece"])
            .map_err(csv_err)?;
        for m in &self.methods {
            for c in &m.curve {
                w.write_record([
                    m.method.clone(),
                    c.delta.to_string(),
                    c.valid_nll.mean.to_string(),
                    c.test.nll.mean.to_string(),
                    c.test.nll.se.to_string(),
                    c.test.accuracy.mean.to_string(),
                    c.test.ece.mean.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?).map_err(|e| Error::Numerical(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Shared, read-only state of a sweep.
pub(crate) struct SweepSetup {
    pub data: Dataset,
    pub lik: Likelihood,
    pub net: MlpNetwork,
}

impl SweepSetup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = cfg.dataset.load()?;
        for w in &data.warnings {
            warn!("{w}");
        }
        let lik = cfg.likelihood_for(&data)?;
        let net = cfg.network_for(data.input_dim(), &lik)?;
        Ok(Self { data, lik, net })
    }
}

/// Result of the δ chain on one split.
pub(crate) struct SeedOutcome {
    pub split: PreparedSplit,
    /// θ* per δ, `None` where training failed.
    pub thetas: Vec<Option<DVector<f64>>>,
    pub records: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    pub oracle: Vec<OracleComparison>,
}

impl SeedOutcome {
    /// Index of δ* for a method, by validation NLL with ties to the smaller δ.
    pub fn selected(&self, cfg: &ExperimentConfig, method: &str) -> Option<usize> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.valid.nll.is_finite())
            .map(|r| (delta_index(cfg, r.delta), r.valid.nll, r.delta))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)))
            .map(|t| t.0)
    }
}

fn delta_index(cfg: &ExperimentConfig, delta: f64) -> usize {
    cfg.deltas.iter().position(|d| *d == delta).unwrap_or(usize::MAX)
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn cache_path(cfg: &ExperimentConfig, seed: u64, i: usize) -> Option<PathBuf> {
    let dir = cfg.cache_dir.as_ref()?;
    let chain = if cfg.warm_start_steps.is_some() { &cfg.deltas[..=i] } else { &cfg.deltas[i..=i] };
    let key = serde_json::json!({
        "dataset": cfg.dataset, "hidden": cfg.hidden, "activation": cfg.activation,
        "output_scale": cfg.output_scale, "output_activation": cfg.output_activation,
        "likelihood": cfg.likelihood, "map": cfg.map, "warm_start_steps": cfg.warm_start_steps,
        "split": cfg.split, "standardize": cfg.standardize, "seed": seed, "deltas": chain,
    });
    Some(dir.join(format!("theta_{:016x}.bin", fnv1a(key.to_string().as_bytes()))))
}

fn train_cell(
    cfg: &ExperimentConfig,
    setup: &SweepSetup,
    train: &Dataset,
    seed: u64,
    i: usize,
    prev: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let cached = cache_path(cfg, seed, i);
    if let Some(path) = cached.as_ref().filter(|p| p.is_file()) {
        let (net, theta) = MlpNetwork::load_params(path)?;
        if net == setup.net {
            return Ok(theta);
        }
    }
    let mut map = MapConfig { delta: cfg.deltas[i], seed, ..cfg.map.clone() };
    let start = match (cfg.warm_start_steps, prev) {
        (Some(steps), Some(theta)) => {
            map.epochs = steps;
            // the decay schedule belongs to the first run
            map.lr_decay = None;
            theta.clone()
        }
        _ => setup.net.init(seed),
    };
    let theta = map_train_from(&setup.net, &setup.lik, train, &map, start)?.theta;
    if let Some(path) = cached {
        std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
        setup.net.save_params(&theta, &path)?;
    }
    Ok(theta)
}

fn split_metrics(probs: &DMatrix<f64>, valid: &Dataset, test: &Dataset) -> Result<(CellMetrics, CellMetrics)> {
    let nv = valid.len();
    let v = evaluate(&probs.rows(0, nv).into_owned(), valid.labels().unwrap_or_default())?;
    let t = evaluate(&probs.rows(nv, test.len()).into_owned(), test.labels().unwrap_or_default())?;
    Ok(((&v).into(), (&t).into()))
}

fn is_step_toy(cfg: &ExperimentConfig, net: &MlpNetwork) -> bool {
    matches!(cfg.dataset, DataSource::Toy { toy: ToyKind::Step1d, .. }) && net.num_params() == 2
}

/// Trains the δ chain on one split and evaluates every requested
/// predictive on its validation and test parts.
pub(crate) fn run_seed(cfg: &ExperimentConfig, setup: &SweepSetup, seed: u64) -> Result<SeedOutcome> {
    let split = prepare_split(cfg, &setup.data, seed)?;
    let x = vstack(&split.valid.inputs, &split.test.inputs);
    let mut out = SeedOutcome { split: split.clone(), thetas: Vec::new(), records: Vec::new(), failures: Vec::new(), oracle: Vec::new() };
    let fail = |delta: f64, stage: &str, e: &Error| {
        warn!("seed {seed}, δ {delta}: {stage} failed: {e}");
        CellFailure { seed, delta, stage: stage.to_owned(), error: e.to_string() }
    };
    let oracle_x = DMatrix::from_column_slice(
        ORACLE_POINTS,
        1,
        &super::lin_grid(ORACLE_RANGE.0, ORACLE_RANGE.1, ORACLE_POINTS),
    );
    for (i, &delta) in cfg.deltas.iter().enumerate() {
        let prev = out.thetas.last().and_then(Option::as_ref);
        let theta = match train_cell(cfg, setup, &split.train, seed, i, prev) {
            Ok(t) => t,
            Err(e) => {
                out.failures.push(fail(delta, "train", &e));
                out.thetas.push(None);
                continue;
            }
        };
        info!("seed {seed}, δ {delta:.4}: trained");
        let mut model = Predictor::new(&setup.net, &setup.lik, &split.train, theta.clone(), delta);
        for (k, &kind) in cfg.predictives.iter().enumerate() {
            let pseed = cell_seed(seed, i, k as u64);
            match model.probs(cfg, kind, &x, pseed).and_then(|p| split_metrics(&p, &split.valid, &split.test)) {
                Ok((valid, test)) => out.records.push(CellRecord { seed, delta, method: kind.name().into(), valid, test }),
                Err(e) => out.failures.push(fail(delta, kind.name(), &e)),
            }
        }
        if is_step_toy(cfg, &setup.net) {
            let truth = toy_grid_predictive(&setup.net, &setup.lik, &split.train, delta, oracle_x.as_slice());
            for (k, &kind) in cfg.predictives.iter().enumerate() {
                let p = truth.as_ref().map_err(|e| Error::Numerical(e.to_string())).and_then(|truth| {
                    let probs = model.probs(cfg, kind, &oracle_x, cell_seed(seed, i, k as u64))?;
                    Ok(truth.iter().enumerate().map(|(n, g)| (g - probs[(n, 1)]).abs()).fold(0.0, f64::max))
                });
                match p {
                    Ok(max_abs_error) => out.oracle.push(OracleComparison { seed, delta, method: kind.name().into(), max_abs_error }),
                    Err(e) => out.failures.push(fail(delta, "oracle", &e)),
                }
            }
        }
        out.thetas.push(Some(theta));
    }

    let refinements: Vec<RefinementKind> = cfg.refinements.iter().copied().filter(|r| *r != RefinementKind::None).collect();
    if refinements.is_empty() {
        return Ok(out);
    }
    let Some(i) = out.selected(cfg, PredictiveKind::Glm.name()) else {
        return Ok(out);
    };
    let delta = cfg.deltas[i];
    let theta = out.thetas[i].clone().expect("selected cells were trained");
    let prepared = linearize(&setup.net, &theta).and_then(|lin| {
        let design = GlmDesign::new(&lin, &split.train)?;
        Ok((lin, design))
    });
    let (lin, design) = match prepared {
        Ok(v) => v,
        Err(e) => {
            out.failures.push(fail(delta, "refine", &e));
            return Ok(out);
        }
    };
    for (k, r) in refinements.iter().enumerate() {
        let refined = match r {
            RefinementKind::Laplace => glm_refine_laplace_design(&design, &setup.lik, delta, &cfg.laplace_refine),
            RefinementKind::NgviFull => glm_refine_ngvi_design(&design, &setup.lik, delta, &cfg.ngvi, NgviStructure::Full),
            RefinementKind::NgviDiag => glm_refine_ngvi_design(&design, &setup.lik, delta, &cfg.ngvi, NgviStructure::Diag),
            RefinementKind::None => unreachable!("filtered"),
        };
        let pc = cfg.predictive_config(cell_seed(seed, i, 100 + k as u64));
        let metrics = refined.and_then(|rf| {
            let probs = probs_matrix(&glm_predictive_batch(&lin, &rf.posterior, &setup.lik, &x, &pc)?)?;
            split_metrics(&probs, &split.valid, &split.test)
        });
        match metrics {
            Ok((valid, test)) => out.records.push(CellRecord { seed, delta, method: r.name().into(), valid, test }),
            Err(e) => out.failures.push(fail(delta, r.name(), &e)),
        }
    }
    Ok(out)
}

/// Methods in report order: requested predictives, then refinements.
fn method_names(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut names: Vec<&'static str> = cfg.predictives.iter().map(|p| p.name()).collect();
    names.extend(cfg.refinements.iter().filter(|r| **r != RefinementKind::None).map(|r| r.name()));
    names
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let setup = SweepSetup::new(cfg)?;
    if cfg.deltas.iter().enumerate().any(|(i, d)| cfg.deltas[..i].contains(d)) {
        return Err(Error::InvalidInput("δ grid contains duplicates".into()));
    }
    let outcomes: Vec<Result<SeedOutcome>> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, &setup, s)).collect();
    let mut seeds_out = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        seeds_out.push(o?);
    }
    let names = method_names(cfg);
    let method_pos = |m: &str| names.iter().position(|n| *n == m).unwrap_or(usize::MAX);

    let mut methods = Vec::with_capacity(names.len());
    for name in &names {
        let is_base = cfg.predictives.iter().any(|p| p.name() == *name);
        let curve = if is_base {
            cfg.deltas
                .iter()
                .map(|&delta| {
                    let cells: Vec<&CellRecord> =
                        seeds_out.iter().flat_map(|o| &o.records).filter(|r| r.method == *name && r.delta == delta).collect();
                    CurvePoint {
                        delta,
                        valid_nll: MeanSe::of(&cells.iter().map(|r| r.valid.nll).collect::<Vec<_>>()),
                        test: MetricSummary::of(&cells.iter().map(|r| r.test).collect::<Vec<_>>()),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut selected_deltas = Vec::new();
        let mut selected = Vec::new();
        for o in &seeds_out {
            let pick = if is_base {
                o.selected(cfg, name).and_then(|i| o.records.iter().find(|r| r.method == *name && r.delta == cfg.deltas[i]))
            } else {
                o.records.iter().find(|r| r.method == *name)
            };
            if let Some(r) = pick {
                selected_deltas.push(r.delta);
                selected.push(r.test);
            }
        }
        methods.push(MethodSummary { method: (*name).to_owned(), curve, selected_deltas, test: MetricSummary::of(&selected) });
    }

    let seed_pos = |s: u64| cfg.seeds.iter().position(|x| *x == s).unwrap_or(usize::MAX);
    let mut cells: Vec<CellRecord> = seeds_out.iter().flat_map(|o| o.records.iter().cloned()).collect();
    cells.sort_by_key(|r| (delta_index(cfg, r.delta), seed_pos(r.seed), method_pos(&r.method)));
    let mut failures: Vec<CellFailure> = seeds_out.iter().flat_map(|o| o.failures.iter().cloned()).collect();
    failures.sort_by_key(|f| (delta_index(cfg, f.delta), seed_pos(f.seed)));
    let mut oracle: Vec<OracleComparison> = seeds_out.iter().flat_map(|o| o.oracle.iter().cloned()).collect();
    oracle.sort_by_key(|c| (delta_index(cfg, c.delta), seed_pos(c.seed), method_pos(&c.method)));

    Ok(SweepReport {
        dataset: cfg.dataset.name(),
        num_classes: setup.data.num_classes(),
        input_dim: setup.data.input_dim(),
        num_params: setup.net.num_params(),
        deltas: cfg.deltas.clone(),
        seeds: cfg.seeds.clone(),
        methods,
        complete: failures.is_empty(),
        cells,
        failures,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ToyKind;
    use crate::network::Activation;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DataSource::Toy { toy: ToyKind::Blobs, seed: 3 },
            hidden: vec![8],
            map: MapConfig { learning_rate: 1e-2, epochs: 150, ..Default::default() },
            deltas: vec![0.1, 1.0, 10.0],
            seeds: vec![0, 1],
            samples: 50,
            predictives: vec![PredictiveKind::Map, PredictiveKind::Bnn, PredictiveKind::Glm, PredictiveKind::Gp],
            gp_subset: Some(60),
            warm_start_steps: Some(50),
            ..Default::default()
        }
    }

    #[test]
    fn mean_se_examples() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanSe::of(&[4.0]).se, 0.0);
    }

    #[test]
    fn sweep_covers_every_cell_and_is_deterministic() {
        let cfg = small_cfg();
        let a = run_sweep(&cfg).unwrap();
        assert!(a.complete, "{:?}", a.failures);
        assert_eq!(a.cells.len(), 3 * 2 * 4);
        assert_eq!(a.methods.len(), 4);
        for m in &a.methods {
            assert_eq!(m.curve.len(), 3);
            assert_eq!(m.selected_deltas.len(), 2);
            assert!(m.test.nll.mean.is_finite());
        }
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let csv = a.curves_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn selection_prefers_smaller_delta_on_ties() {
        let cfg = ExperimentConfig { deltas: vec![1.0, 2.0, 3.0], ..small_cfg() };
        let m = CellMetrics { nll: 0.5, accuracy: 1.0, ece: 0.0 };
        let rec = |delta: f64, nll: f64| CellRecord { seed: 0, delta, method: "glm".into(), valid: CellMetrics { nll, ..m }, test: m };
        let data = crate::datasets::make_toy(ToyKind::Step1d, 0);
        let split = PreparedSplit { train: data.clone(), valid: data.clone(), test: data, standardizer: None };
        let o = SeedOutcome {
            split,
            thetas: vec![],
            records: vec![rec(3.0, 0.2), rec(2.0, 0.2), rec(1.0, 0.4)],
            failures: vec![],
            oracle: vec![],
        };
        assert_eq!(o.selected(&cfg, "glm"), Some(1));
        assert_eq!(o.selected(&cfg, "bnn"), None);
    }

    #[test]
    fn cached_parameters_reproduce_the_fresh_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { cache_dir: Some(dir.path().to_owned()), seeds: vec![0], ..small_cfg() };
        let fresh = run_sweep(&cfg).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin")).count(), 3);
        let reused = run_sweep(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&fresh).unwrap(), serde_json::to_string(&reused).unwrap());
    }

    #[test]
    fn refinements_run_at_the_glm_choice() {
        let cfg = ExperimentConfig {
            predictives: vec![PredictiveKind::Glm],
            refinements: vec![RefinementKind::Laplace, RefinementKind::NgviFull, RefinementKind::NgviDiag],
            laplace_refine: crate::glm::LaplaceRefineConfig { iterations: 20, ..Default::default() },
            ngvi: crate::glm::NgviConfig { iterations: 5, ..Default::default() },
            ..small_cfg()
        };
        let r = run_sweep(&cfg).unwrap();
        assert!(r.complete, "{:?}", r.failures);
        let glm = r.method("glm").unwrap();
        for name in ["glm_refine_laplace", "glm_refine_ngvi_full", "glm_refine_ngvi_diag"] {
            let m = r.method(name).unwrap();
            assert_eq!(m.selected_deltas, glm.selected_deltas);
            assert!(m.curve.is_empty());
        }
    }

    #[test]
    fn step_toy_sweep_reports_oracle_fields() {
        let cfg = ExperimentConfig {
            dataset: DataSource::Toy { toy: ToyKind::Step1d, seed: 0 },
            hidden: vec![],
            output_scale: 5.0,
            output_activation: true,
            activation: Activation::Tanh,
            map: MapConfig { learning_rate: 1e-2, epochs: 3000, ..Default::default() },
            deltas: vec![1.0],
            seeds: vec![0],
            split: None,
            standardize: false,
            samples: 2000,
            predictives: vec![PredictiveKind::Map, PredictiveKind::Glm],
            ..Default::default()
        };
        let r = run_sweep(&cfg).unwrap();
        assert_eq!(r.num_params, 2);
        assert_eq!(r.oracle.len(), 2);
        assert!(r.oracle.iter().all(|o| o.max_abs_error.is_finite() && o.max_abs_error < 0.5));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let bad = [
            ExperimentConfig { deltas: vec![], ..small_cfg() },
            ExperimentConfig { deltas: vec![1.0, -1.0], ..small_cfg() },
            ExperimentConfig { deltas: vec![1.0, 1.0], ..small_cfg() },
            ExperimentConfig { refinements: vec![RefinementKind::Laplace], predictives: vec![PredictiveKind::Bnn], ..small_cfg() },
            ExperimentConfig { dataset: DataSource::Csv { path: "/nonexistent.csv".into(), label_column: None }, ..small_cfg() },
        ];
        for cfg in bad {
            let e = run_sweep(&cfg).unwrap_err();
            assert!(e.is_config_error(), "{e}");
        }
    }
}
