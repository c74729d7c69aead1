use serde::{Deserialize, Serialize};

use super::sweep::{csv_err, run_seed, SweepSetup};
use super::{cell_seed, vstack, DataSource, ExperimentConfig, Predictor};
use crate::error::{Error, Result};
use crate::metrics::{entropy, histogram, ood_auc};

pub const OOD_BINS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodMethod {
    pub method: String,
    /// δ* chosen on the validation split.
    pub delta: f64,
    pub auc: f64,
    pub id_mean_entropy: f64,
    pub ood_mean_entropy: f64,
    /// Counts over `OOD_BINS` equal bins on [0, ln C].
    pub id_histogram: Vec<usize>,
    pub ood_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub id_dataset: String,
    pub ood_dataset: String,
    pub seed: u64,
    pub num_classes: usize,
    pub id_count: usize,
    pub ood_count: usize,
    pub max_entropy: f64,
    pub methods: Vec<OodMethod>,
}

impl OodReport {
    pub fn method(&self, name: &str) -> Option<&OodMethod> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// method,bin_lo,bin_hi,id_count,ood_count
    pub fn histograms_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "bin_lo", "bin_hi", "id_count", "ood_count"]).map_err(csv_err)?;
        let width = self.max_entropy / OOD_BINS as f64;
        for m in &self.methods {
            for b in 0..OOD_BINS {
                w.write_record([
                    m.method.clone(),
                    (b as f64 * width).to_string(),
                    ((b + 1) as f64 * width).to_string(),
                    m.id_histogram[b].to_string(),
                    m.ood_histogram[b].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?).map_err(|e| Error::Numerical(e.to_string()))
    }
}

/// Trains on the first seed's split of the in-distribution data, picks δ per
/// predictive on validation NLL, and compares predictive entropies on the
/// ID test part against the whole OOD set.
pub fn run_ood(cfg: &ExperimentConfig, ood: &DataSource) -> Result<OodReport> {
    let cfg = ExperimentConfig { refinements: Vec::new(), ..cfg.clone() };
    let setup = SweepSetup::new(&cfg)?;
    let ood_data = ood.load()?;
    if ood_data.input_dim() != setup.data.input_dim() {
        return Err(Error::Shape(format!(
            "OOD inputs have {} features, in-distribution data {}",
            ood_data.input_dim(),
            setup.data.input_dim()
        )));
    }
    let seed = cfg.seeds[0];
    let outcome = run_seed(&cfg, &setup, seed)?;
    let split = &outcome.split;
    let ood_x = match &split.standardizer {
        Some(s) => s.transform_inputs(&ood_data.inputs),
        None => ood_data.inputs.clone(),
    };
    let x = vstack(&split.test.inputs, &ood_x);
    let n_id = split.test.len();
    let c = setup.data.num_classes();
    let max_entropy = (c as f64).ln();

    let mut methods = Vec::with_capacity(cfg.predictives.len());
    for (k, &kind) in cfg.predictives.iter().enumerate() {
        let i = outcome
            .selected(&cfg, kind.name())
            .ok_or_else(|| Error::Numerical(format!("no δ succeeded for the {} predictive", kind.name())))?;
        let theta = outcome.thetas[i].clone().expect("selected cells were trained");
        let mut model = Predictor::new(&setup.net, &setup.lik, &split.train, theta, cfg.deltas[i]);
        let probs = model.probs(&cfg, kind, &x, cell_seed(seed, i, 200 + k as u64))?;
        let ent: Vec<f64> = probs.row_iter().map(|r| entropy(&r.iter().copied().collect::<Vec<_>>())).collect();
        let (id, oo) = ent.split_at(n_id);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        methods.push(OodMethod {
            method: kind.name().into(),
            delta: cfg.deltas[i],
            auc: ood_auc(id, oo)?,
            id_mean_entropy: mean(id),
            ood_mean_entropy: mean(oo),
            id_histogram: histogram(id, 0.0, max_entropy, OOD_BINS),
            ood_histogram: histogram(oo, 0.0, max_entropy, OOD_BINS),
        });
    }
    Ok(OodReport {
        id_dataset: cfg.dataset.name(),
        ood_dataset: ood.name(),
        seed,
        num_classes: c,
        id_count: n_id,
        ood_count: ood_data.len(),
        max_entropy,
        methods,
    })
}
