use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use linlap::curvature::CurvatureMode;
use linlap::datasets::{Dataset, ToyKind};
use linlap::error::{Error, Result};
use linlap::experiment::{
    fit_posterior, prepare_split, run_banana, run_ood, run_sweep, run_toy1d, BananaConfig, DataSource, ExperimentConfig, PredictiveKind,
    Predictor, PreparedSplit, RefinementKind, Toy1dConfig,
};
use linlap::glm::{glm_refine_laplace, glm_refine_ngvi, linearize, NgviStructure};
use linlap::likelihood::Likelihood;
use linlap::metrics::evaluate;
use linlap::network::MlpNetwork;
use linlap::posterior::GaussianPosterior;
use linlap::training::{map_train, MapConfig};

#[derive(Parser)]
#[command(name = "linlap", version, about = "Laplace-GGN posteriors with BNN, GLM and GP predictives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train θ* at one δ and start a run directory.
    Train(TrainArgs),
    /// Curvature and Laplace posterior at θ*.
    Curvature(CurvatureArgs),
    /// Predictive probabilities on a split or a CSV of inputs.
    Predict(PredictArgs),
    /// Re-infer the posterior in the linearized model.
    Refine(RefineArgs),
    /// NLL, accuracy and ECE on the validation and test parts.
    Evaluate(EvaluateArgs),
    /// δ sweep over seeds with validation selection.
    Sweep(ExperimentArgs),
    /// Entropy comparison between in- and out-of-distribution inputs.
    Ood(OodArgs),
    /// The one-unit step problem with grid and HMC oracles.
    Toy1d(ProtocolArgs),
    /// The two-crescent uncertainty maps.
    Banana(ProtocolArgs),
}

/// Flags shared by commands that read an experiment config; a flag beats
/// the file, which beats the defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV dataset, label in the last column.
    #[arg(long, conflicts_with = "toy")]
    dataset: Option<PathBuf>,
    /// Synthetic dataset: step1d, banana, blobs or ring.
    #[arg(long)]
    toy: Option<String>,
    /// Prior precision grid (repeatable).
    #[arg(long = "delta")]
    deltas: Vec<f64>,
    /// Split seeds (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// full, diag or kfac.
    #[arg(long)]
    curvature: Option<String>,
    #[arg(long)]
    dampened: bool,
    /// map, bnn, glm or gp (repeatable).
    #[arg(long = "predictive")]
    predictives: Vec<String>,
    /// none, laplace, ngvi-full or ngvi-diag (repeatable).
    #[arg(long = "refinement")]
    refinements: Vec<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    gp_subset: Option<usize>,
    #[arg(long)]
    gp_scale: Option<f64>,
    #[arg(long)]
    warm_start_steps: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(p) = &self.dataset {
            cfg.dataset = DataSource::Csv { path: p.clone(), label_column: None };
        }
        if let Some(t) = &self.toy {
            cfg.dataset = DataSource::Toy { toy: t.parse()?, seed: 0 };
        }
        if !self.deltas.is_empty() {
            cfg.deltas = self.deltas.clone();
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(e) = self.epochs {
            cfg.map.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            cfg.map.learning_rate = lr;
        }
        if let Some(c) = &self.curvature {
            cfg.curvature = c.parse()?;
        }
        cfg.dampened |= self.dampened;
        if !self.predictives.is_empty() {
            cfg.predictives = self.predictives.iter().map(|p| p.parse()).collect::<Result<_>>()?;
        }
        if !self.refinements.is_empty() {
            cfg.refinements = self.refinements.iter().map(|r| r.parse()).collect::<Result<_>>()?;
        }
        cfg.samples = self.samples.unwrap_or(cfg.samples);
        cfg.gp_subset = self.gp_subset.or(cfg.gp_subset);
        cfg.gp_scale = self.gp_scale.or(cfg.gp_scale);
        cfg.warm_start_steps = self.warm_start_steps.or(cfg.warm_start_steps);
        cfg.cache_dir = self.cache_dir.clone().or(cfg.cache_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        self.apply(base)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct CurvatureArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// full, diag or kfac; defaults to the run's config.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dampened: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value = "glm")]
    predictive: String,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gp_subset: Option<usize>,
    #[arg(long)]
    gp_scale: Option<f64>,
    /// CSV of raw inputs with a header row; defaults to the test split.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// laplace, ngvi-full or ngvi-diag.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// map, bnn, glm or gp (repeatable); defaults to the run's config.
    #[arg(long = "predictive")]
    predictives: Vec<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gp_subset: Option<usize>,
    #[arg(long)]
    gp_scale: Option<f64>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct OodArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// `toy:<kind>[:<seed>]` or a CSV path.
    #[arg(long)]
    ood: String,
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct ProtocolArgs {
    /// Protocol config (JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Curvature(a) => curvature(a),
        Command::Predict(a) => predict(a),
        Command::Refine(a) => refine(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Ood(a) => ood(a),
        Command::Toy1d(a) => toy1d(a),
        Command::Banana(a) => banana(a),
    }
}

struct RunDir(PathBuf);

impl RunDir {
    fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path.join("plots"))?;
        Ok(Self(path.to_owned()))
    }

    fn open(path: &Path) -> Result<Self> {
        if !path.join("config.json").is_file() {
            return Err(Error::InvalidInput(format!("{} is not a run directory (no config.json)", path.display())));
        }
        Self::create(path)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn write_json(&self, name: &str, v: &impl serde::Serialize) -> Result<()> {
        std::fs::write(self.file(name), serde_json::to_string_pretty(v)? + "\n")?;
        Ok(())
    }

    fn write_plot(&self, name: &str, csv: &str) -> Result<()> {
        std::fs::write(self.0.join("plots").join(name), csv)?;
        Ok(())
    }

    /// Adds one command's section to report.json.
    fn report_section(&self, key: &str, v: Value) -> Result<()> {
        let path = self.file("report.json");
        let mut report: serde_json::Map<String, Value> = match std::fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).unwrap_or_default(),
            Err(_) => Default::default(),
        };
        report.insert(key.to_owned(), v);
        self.write_json("report.json", &report)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(self.file("config.json"))?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Data, split and model of a single-run directory.
struct Run {
    dir: RunDir,
    cfg: ExperimentConfig,
    lik: Likelihood,
    net: MlpNetwork,
    split: PreparedSplit,
}

impl Run {
    fn open(path: &Path) -> Result<Self> {
        let dir = RunDir::open(path)?;
        let cfg = dir.config()?;
        let data = cfg.dataset.load()?;
        let lik = cfg.likelihood_for(&data)?;
        let net = cfg.network_for(data.input_dim(), &lik)?;
        let split = prepare_split(&cfg, &data, cfg.seeds[0])?;
        Ok(Self { dir, cfg, lik, net, split })
    }

    fn delta(&self) -> f64 {
        self.cfg.deltas[0]
    }

    fn theta(&self) -> Result<DVector<f64>> {
        let (net, theta) = MlpNetwork::load_params(self.dir.file("theta.bin"))?;
        if net != self.net {
            return Err(Error::InvalidInput("theta.bin was trained for a different network".into()));
        }
        Ok(theta)
    }

    fn posterior(&self) -> Result<Option<GaussianPosterior>> {
        let path = self.dir.file("posterior.bin");
        if path.is_file() {
            Ok(Some(GaussianPosterior::load(path)?))
        } else {
            Ok(None)
        }
    }

    fn predictor(&self) -> Result<Predictor<'_>> {
        let p = Predictor::new(&self.net, &self.lik, &self.split.train, self.theta()?, self.delta());
        Ok(match self.posterior()? {
            Some(post) => p.with_posterior(post),
            None => p,
        })
    }

    fn with_predictive_flags(&mut self, samples: Option<usize>, gp_subset: Option<usize>, gp_scale: Option<f64>) {
        self.cfg.samples = samples.unwrap_or(self.cfg.samples);
        self.cfg.gp_subset = gp_subset.or(self.cfg.gp_subset);
        self.cfg.gp_scale = gp_scale.or(self.cfg.gp_scale);
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.load()?;
    cfg.deltas.truncate(1);
    cfg.seeds.truncate(1);
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_json("config.json", &cfg)?;
    let run = Run::open(&a.run_dir)?;
    let map = MapConfig { delta: run.delta(), seed: cfg.seeds[0], ..cfg.map.clone() };
    info!("training {} parameters on {} examples at δ = {}", run.net.num_params(), run.split.train.len(), map.delta);
    let result = map_train(&run.net, &run.lik, &run.split.train, &map)?;
    run.net.save_params(&result.theta, dir.file("theta.bin"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in result.trace.iter().enumerate() {
        csv += &format!("{},{}\n", i + 1, l);
    }
    dir.write_plot("train_trace.csv", &csv)?;
    dir.report_section(
        "train",
        json!({
            "delta": map.delta, "seed": map.seed, "num_params": run.net.num_params(),
            "train_size": run.split.train.len(), "final_loss": result.trace.last(), "grad_norm": result.grad_norm,
        }),
    )
}

fn curvature(a: CurvatureArgs) -> Result<()> {
    let mut run = Run::open(&a.run_dir)?;
    if let Some(m) = &a.mode {
        run.cfg.curvature = m.parse()?;
    }
    run.cfg.dampened |= a.dampened;
    if run.cfg.curvature == CurvatureMode::Gram {
        return Err(Error::InvalidInput("curvature must be full, diag or kfac".into()));
    }
    let theta = run.theta()?;
    let post = fit_posterior(&run.net, &run.lik, &run.split.train, &theta, run.delta(), run.cfg.curvature, run.cfg.dampened)?;
    post.curvature.save(run.dir.file("curvature.bin"))?;
    post.save(run.dir.file("posterior.bin"))?;
    run.dir.write_json("config.json", &run.cfg)?;
    run.dir.report_section(
        "curvature",
        json!({
            "mode": run.cfg.curvature, "dampened": run.cfg.dampened, "delta": run.delta(),
            "log_det_precision": post.log_det_precision(), "trace_covariance": post.trace_covariance(),
        }),
    )
}

fn refine(a: RefineArgs) -> Result<()> {
    let run = Run::open(&a.run_dir)?;
    let kind: RefinementKind = a.kind.parse()?;
    let theta = run.theta()?;
    let lin = linearize(&run.net, &theta)?;
    let refined = match kind {
        RefinementKind::None => return Err(Error::InvalidInput("nothing to refine with 'none'".into())),
        RefinementKind::Laplace => {
            let mut c = run.cfg.laplace_refine;
            c.iterations = a.iterations.unwrap_or(c.iterations);
            c.learning_rate = a.learning_rate.unwrap_or(c.learning_rate);
            glm_refine_laplace(&lin, &run.lik, &run.split.train, run.delta(), &c)?
        }
        RefinementKind::NgviFull | RefinementKind::NgviDiag => {
            let mut c = run.cfg.ngvi;
            c.iterations = a.iterations.unwrap_or(c.iterations);
            c.learning_rate = a.learning_rate.or(c.learning_rate);
            let s = if kind == RefinementKind::NgviFull { NgviStructure::Full } else { NgviStructure::Diag };
            glm_refine_ngvi(&lin, &run.lik, &run.split.train, run.delta(), &c, s)?
        }
    };
    refined.posterior.save(run.dir.file("posterior.bin"))?;
    let mut csv = String::from("iteration,objective\n");
    for (i, v) in refined.trace.iter().enumerate() {
        csv += &format!("{i},{v}\n");
    }
    run.dir.write_plot("refine_trace.csv", &csv)?;
    run.dir.report_section(
        "refine",
        json!({
            "kind": kind, "delta": run.delta(), "iterations": refined.trace.len() - 1,
            "initial_objective": refined.trace.first(), "final_objective": refined.trace.last(),
        }),
    )
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut run = Run::open(&a.run_dir)?;
    run.with_predictive_flags(a.samples, a.gp_subset, a.gp_scale);
    let kind: PredictiveKind = a.predictive.parse()?;
    let inputs = match &a.input {
        Some(p) => {
            let raw = read_inputs(p, run.split.train.input_dim())?;
            match &run.split.standardizer {
                Some(s) => s.transform_inputs(&raw),
                None => raw,
            }
        }
        None => run.split.test.inputs.clone(),
    };
    let seed = a.seed.unwrap_or(0);
    let probs = run.predictor()?.probs(&run.cfg, kind, &inputs, seed)?;
    let mut csv = (0..probs.ncols()).map(|k| format!("p{k}")).collect::<Vec<_>>().join(",") + "\n";
    for row in probs.row_iter() {
        csv += &(row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n");
    }
    let name = format!("predict_{}.csv", kind.name());
    run.dir.write_plot(&name, &csv)?;
    run.dir.report_section(
        "predict",
        json!({ "predictive": kind, "count": probs.nrows(), "samples": run.cfg.samples, "seed": seed, "output": format!("plots/{name}") }),
    )
}

/// Reads a numeric CSV with a header row whose first `dim` columns are inputs.
fn read_inputs(path: &Path, dim: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
        if rec.len() < dim {
            return Err(Error::Parse { row: i + 1, msg: format!("{} columns, need {dim}", rec.len()) });
        }
        for f in rec.iter().take(dim) {
            values.push(f.trim().parse::<f64>().map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::NoRows);
    }
    Ok(DMatrix::from_row_slice(rows, dim, &values))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut run = Run::open(&a.run_dir)?;
    run.with_predictive_flags(a.samples, a.gp_subset, a.gp_scale);
    let kinds: Vec<PredictiveKind> = if a.predictives.is_empty() {
        run.cfg.predictives.clone()
    } else {
        a.predictives.iter().map(|p| p.parse()).collect::<Result<_>>()?
    };
    let seed = a.seed.unwrap_or(0);
    let mut predictor = run.predictor()?;
    let mut out = serde_json::Map::new();
    for kind in kinds {
        let mut section = serde_json::Map::new();
        for (name, part) in [("valid", &run.split.valid), ("test", &run.split.test)] {
            section.insert(name.into(), metrics_json(&mut predictor, &run.cfg, kind, part, seed)?);
        }
        out.insert(kind.name().into(), Value::Object(section));
    }
    run.dir.report_section("evaluate", Value::Object(out))
}

fn metrics_json(p: &mut Predictor<'_>, cfg: &ExperimentConfig, kind: PredictiveKind, part: &Dataset, seed: u64) -> Result<Value> {
    let probs = p.probs(cfg, kind, &part.inputs, seed)?;
    let mut r = evaluate(&probs, part.labels().unwrap_or_default())?;
    r.entropies.clear();
    Ok(serde_json::to_value(r)?)
}

fn sweep(a: ExperimentArgs) -> Result<()> {
    let cfg = a.overrides.load()?;
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_json("config.json", &cfg)?;
    let report = run_sweep(&cfg)?;
    dir.write_json("report.json", &report)?;
    dir.write_plot("sweep_curves.csv", &report.curves_csv()?)?;
    if !report.complete {
        log::warn!("{} cells failed; see report.json", report.failures.len());
    }
    Ok(())
}

fn parse_source(s: &str) -> Result<DataSource> {
    match s.strip_prefix("toy:") {
        Some(rest) => {
            let mut parts = rest.splitn(2, ':');
            let toy: ToyKind = parts.next().unwrap_or_default().parse()?;
            let seed = match parts.next() {
                Some(v) => v.parse().map_err(|_| Error::InvalidInput(format!("bad seed in '{s}'")))?,
                None => 0,
            };
            Ok(DataSource::Toy { toy, seed })
        }
        None => Ok(DataSource::Csv { path: s.into(), label_column: None }),
    }
}

fn ood(a: OodArgs) -> Result<()> {
    let cfg = a.overrides.load()?;
    let source = parse_source(&a.ood)?;
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_json("config.json", &json!({ "experiment": cfg, "ood": source }))?;
    let report = run_ood(&cfg, &source)?;
    dir.write_json("report.json", &report)?;
    dir.write_plot("ood_histograms.csv", &report.histograms_csv()?)
}

fn protocol_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn toy1d(a: ProtocolArgs) -> Result<()> {
    let mut cfg: Toy1dConfig = protocol_config(&a.config)?;
    cfg.samples = a.samples.unwrap_or(cfg.samples);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_json("config.json", &cfg)?;
    let report = run_toy1d(&cfg)?;
    dir.write_json("report.json", &report)?;
    dir.write_plot("toy1d_curves.csv", &report.curves_csv()?)
}

fn banana(a: ProtocolArgs) -> Result<()> {
    let mut cfg: BananaConfig = protocol_config(&a.config)?;
    cfg.samples = a.samples.unwrap_or(cfg.samples);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let dir = RunDir::create(&a.run_dir)?;
    dir.write_json("config.json", &cfg)?;
    let report = run_banana(&cfg)?;
    dir.write_json("report.json", &report)?;
    dir.write_plot("banana_maps.csv", &report.maps_csv()?)
}
