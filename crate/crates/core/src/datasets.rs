//! Tabular datasets: CSV loading, stratified splitting, standardization and
//! the synthetic toy problems.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::likelihood::Target;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    /// One row per example.
    Real(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×D, one example per row.
    pub inputs: DMatrix<f64>,
    pub targets: Targets,
    /// Non-fatal notes produced while loading (e.g. label remapping).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl Dataset {
    pub fn classification(inputs: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return shape(format!("{} input rows but {} labels", inputs.nrows(), labels.len()));
        }
        if num_classes == 0 {
            return invalid("num_classes must be at least 1");
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Self { inputs, targets: Targets::Classes { labels, num_classes }, warnings: Vec::new() })
    }

    pub fn regression(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return shape(format!("{} input rows but {} target rows", inputs.nrows(), targets.nrows()));
        }
        Ok(Self { inputs, targets: Targets::Real(targets), warnings: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Number of classes, or the target width for regression.
    pub fn num_classes(&self) -> usize {
        match &self.targets {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Real(t) => t.ncols(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    pub fn target(&self, n: usize) -> Target {
        crate::likelihood::target_at(&self.targets, n)
    }

    pub fn input(&self, n: usize) -> Vec<f64> {
        self.inputs.row(n).iter().copied().collect()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let inputs = self.inputs.select_rows(indices.iter());
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real(t) => Targets::Real(t.select_rows(indices.iter())),
        };
        Dataset { inputs, targets, warnings: Vec::new() }
    }

    pub fn with_inputs(&self, inputs: DMatrix<f64>) -> Result<Dataset> {
        if inputs.nrows() != self.len() {
            return shape("replacement inputs must keep the row count");
        }
        Ok(Dataset { inputs, targets: self.targets.clone(), warnings: self.warnings.clone() })
    }
}

/// Loads a comma-separated file. A header row is detected when the first row
/// does not parse as numbers. `label_column` defaults to the last column.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<usize>, task: TaskKind) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.as_ref().display())))?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse { row: i + 1, msg: e.to_string() })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push(record.iter().map(str::to_owned).collect());
    }
    let header = rows
        .first()
        .map(|r| r.iter().any(|f| f.parse::<f64>().is_err()))
        .unwrap_or(false);
    let first_data_row = usize::from(header);
    let data_rows = &rows[first_data_row.min(rows.len())..];
    if data_rows.is_empty() {
        return Err(Error::NoRows);
    }
    let width = data_rows[0].len();
    if width < 2 {
        return Err(Error::Parse { row: first_data_row + 1, msg: "need at least one feature and a label".into() });
    }
    let label_col = label_column.unwrap_or(width - 1);
    if label_col >= width {
        return invalid(format!("label column {label_col} out of range for {width} columns"));
    }

    let n = data_rows.len();
    let d = width - 1;
    let mut inputs = DMatrix::zeros(n, d);
    let mut raw_labels = Vec::with_capacity(n);
    for (i, row) in data_rows.iter().enumerate() {
        let row_number = first_data_row + i + 1;
        if row.len() != width {
            return Err(Error::Parse {
                row: row_number,
                msg: format!("expected {width} fields, found {}", row.len()),
            });
        }
        let mut col = 0;
        for (j, field) in row.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                row: row_number,
                msg: format!("column {j}: '{field}' is not numeric"),
            })?;
            if j == label_col {
                raw_labels.push(value);
            } else {
                inputs[(i, col)] = value;
                col += 1;
            }
        }
    }

    match task {
        TaskKind::Regression => {
            let targets = DMatrix::from_column_slice(n, 1, &raw_labels);
            Dataset::regression(inputs, targets)
        }
        TaskKind::Classification => {
            let mut labels = Vec::with_capacity(n);
            for (i, &v) in raw_labels.iter().enumerate() {
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(Error::Parse {
                        row: first_data_row + i + 1,
                        msg: format!("label {v} is not a non-negative integer"),
                    });
                }
                labels.push(v as usize);
            }
            let (labels, num_classes, warning) = remap_labels(&labels);
            let mut data = Dataset::classification(inputs, labels, num_classes)?;
            if let Some(w) = warning {
                log::warn!("{w}");
                data.warnings.push(w);
            }
            Ok(data)
        }
    }
}

/// Maps the distinct labels onto `0..C` in increasing order. Returns a warning
/// when the original labels were not already `0..C`.
pub fn remap_labels(labels: &[usize]) -> (Vec<usize>, usize, Option<String>) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let contiguous = distinct.iter().enumerate().all(|(i, &v)| i == v);
    if contiguous {
        let c = distinct.last().map_or(1, |&m| m + 1);
        return (labels.to_vec(), c, None);
    }
    let map: BTreeMap<usize, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let remapped = labels.iter().map(|v| map[v]).collect();
    let warning = format!("non-contiguous class labels {distinct:?} remapped to 0..{}", distinct.len());
    (remapped, distinct.len(), Some(warning))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(ratios: (f64, f64, f64), seed: u64, stratified: bool) -> Result<Self> {
        let spec = Self { ratios, seed, stratified };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.ratios;
        for r in [a, b, c] {
            if !(r > 0.0 && r < 1.0) {
                return invalid(format!("split ratio {r} not in (0, 1)"));
            }
        }
        if ((a + b + c) - 1.0).abs() > 1e-12 {
            return invalid(format!("split ratios sum to {}", a + b + c));
        }
        Ok(())
    }
}

/// Sorted row indices of the three parts of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(data: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = data.len();
    let n_train = (spec.ratios.0 * n as f64).round() as usize;
    let n_valid = (spec.ratios.1 * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return invalid(format!("{n} rows are too few for ratios {:?}", spec.ratios));
    }
    let sizes = [n_train, n_valid, n - n_train - n_valid];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut parts: [Vec<usize>; 3] = Default::default();
    match (spec.stratified, data.labels()) {
        (true, Some(labels)) => {
            let num_classes = data.num_classes();
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
            for (i, &y) in labels.iter().enumerate() {
                members[y].push(i);
            }
            for (c, m) in members.iter().enumerate() {
                if !m.is_empty() && m.len() < 3 {
                    return invalid(format!("class {c} has {} members; stratification needs 3", m.len()));
                }
            }
            let counts: Vec<usize> = members.iter().map(Vec::len).collect();
            let alloc = controlled_rounding(&counts, &sizes, n);
            for (c, m) in members.iter_mut().enumerate() {
                m.shuffle(&mut rng);
                let mut start = 0;
                for (s, part) in parts.iter_mut().enumerate() {
                    part.extend_from_slice(&m[start..start + alloc[c][s]]);
                    start += alloc[c][s];
                }
            }
        }
        (true, None) => return invalid("stratified split requires class labels"),
        (false, _) => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let mut start = 0;
            for (s, part) in parts.iter_mut().enumerate() {
                part.extend_from_slice(&all[start..start + sizes[s]]);
                start += sizes[s];
            }
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, valid, test] = parts;
    Ok(SplitIndices { train, valid, test })
}

pub fn split_stratified(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(data, spec)?;
    Ok((data.subset(&idx.train), data.subset(&idx.valid), data.subset(&idx.test)))
}

/// Rounds the class-by-split table `count[c] * size[s] / n` to integers that
/// keep both margins, moving each entry by less than one. The residual units
/// are placed by augmenting paths on the bipartite class/split graph.
fn controlled_rounding(counts: &[usize], sizes: &[usize; 3], n: usize) -> Vec<[usize; 3]> {
    let ideal = |c: usize, s: usize| counts[c] as f64 * sizes[s] as f64 / n as f64;
    let mut alloc: Vec<[usize; 3]> = counts
        .iter()
        .enumerate()
        .map(|(c, _)| [0, 1, 2].map(|s| ideal(c, s).floor() as usize))
        .collect();
    // fractional cells may take one extra unit
    let can_add: Vec<[bool; 3]> = counts
        .iter()
        .enumerate()
        .map(|(c, _)| [0, 1, 2].map(|s| ideal(c, s).fract() > 1e-12))
        .collect();
    let mut added = vec![[false; 3]; counts.len()];
    let mut row_need: Vec<usize> = counts.iter().zip(&alloc).map(|(&n_c, a)| n_c - a.iter().sum::<usize>()).collect();
    let mut col_need: [usize; 3] = [0, 1, 2].map(|s| sizes[s] - alloc.iter().map(|a| a[s]).sum::<usize>());

    // Each augmentation moves one unit from a class with spare members to a
    // split with spare capacity, possibly re-routing earlier units.
    loop {
        let Some(start) = (0..counts.len()).find(|&c| row_need[c] > 0) else { break };
        // BFS over classes; edges class->split via addable cells not yet used,
        // split->class via cells already used (to re-route).
        let mut prev_class: Vec<Option<(usize, usize)>> = vec![None; counts.len()];
        let mut prev_split: [Option<usize>; 3] = [None; 3];
        let mut visited_class = vec![false; counts.len()];
        visited_class[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut found = None;
        while let Some(c) = queue.pop_front() {
            for s in 0..3 {
                if can_add[c][s] && !added[c][s] && prev_split[s].is_none() {
                    prev_split[s] = Some(c);
                    if col_need[s] > 0 {
                        found = Some(s);
                        break;
                    }
                    for c2 in 0..counts.len() {
                        if added[c2][s] && !visited_class[c2] {
                            visited_class[c2] = true;
                            prev_class[c2] = Some((s, c));
                            queue.push_back(c2);
                        }
                    }
                }
            }
            if found.is_some() {
                break;
            }
        }
        let Some(mut s) = found else { break };
        col_need[s] -= 1;
        loop {
            let c = prev_split[s].expect("path");
            added[c][s] = true;
            match prev_class[c] {
                Some((s_prev, _)) => {
                    added[c][s_prev] = false;
                    s = s_prev;
                }
                None => {
                    row_need[c] -= 1;
                    break;
                }
            }
        }
    }
    for (c, a) in alloc.iter_mut().enumerate() {
        for s in 0..3 {
            if added[c][s] {
                a[s] += 1;
            }
        }
    }
    // any remainder (not reachable for consistent margins) goes to the largest split
    for (c, a) in alloc.iter_mut().enumerate() {
        let missing = counts[c] - a.iter().sum::<usize>();
        a[0] += missing;
    }
    alloc
}

/// Per-feature affine standardization fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant features get unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len().max(1) as f64;
        let d = data.input_dim();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let col = data.inputs.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn transform_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn inverse_transform_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.std[j] + self.mean[j])
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.input_dim() != self.mean.len() {
            return shape(format!("standardizer fitted on {} features, data has {}", self.mean.len(), data.input_dim()));
        }
        data.with_inputs(self.transform_inputs(&data.inputs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Step1d,
    Banana,
    /// Three Gaussian clusters in the plane.
    Blobs,
    /// Unlabelled points on an annulus far outside the blobs.
    Ring,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step1d" => Ok(ToyKind::Step1d),
            "banana" => Ok(ToyKind::Banana),
            "blobs" => Ok(ToyKind::Blobs),
            "ring" => Ok(ToyKind::Ring),
            other => invalid(format!("unknown toy dataset '{other}'")),
        }
    }
}

/// Size of the full synthetic banana sample.
pub const BANANA_SIZE: usize = 5300;

pub fn make_toy(kind: ToyKind, seed: u64) -> Dataset {
    match kind {
        ToyKind::Step1d => {
            let xs = [-6.0, -4.0, -2.0, 2.0, 4.0, 6.0];
            let labels = xs.iter().map(|&x| usize::from(x > 0.0)).collect();
            Dataset::classification(DMatrix::from_column_slice(6, 1, &xs), labels, 2).expect("static toy")
        }
        ToyKind::Banana => banana(BANANA_SIZE, seed),
        ToyKind::Blobs => blobs(BLOBS_SIZE, seed),
        ToyKind::Ring => ring(RING_SIZE, seed),
    }
}

pub const BLOBS_SIZE: usize = 1500;
pub const RING_SIZE: usize = 600;

/// Clusters of spread 0.5 centred at radius 2 and angles 0, 2π/3, 4π/3.
fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let mut inputs = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 3;
        let a = 2.0 * std::f64::consts::PI * y as f64 / 3.0;
        inputs[(i, 0)] = 2.0 * a.cos() + noise.sample(&mut rng);
        inputs[(i, 1)] = 2.0 * a.sin() + noise.sample(&mut rng);
        labels.push(y);
    }
    Dataset::classification(inputs, labels, 3).expect("labels in range")
}

/// Uniform angle, radius in [7, 9]; every label is 0 over three classes so
/// the set pairs with `blobs`.
fn ring(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = Uniform::new(0.0, 2.0 * std::f64::consts::PI);
    let radius = Uniform::new(7.0, 9.0);
    let mut inputs = DMatrix::zeros(n, 2);
    for i in 0..n {
        let (a, r) = (angle.sample(&mut rng), radius.sample(&mut rng));
        inputs[(i, 0)] = r * a.cos();
        inputs[(i, 1)] = r * a.sin();
    }
    Dataset::classification(inputs, vec![0; n], 3).expect("labels in range")
}

/// Two interleaved crescents with Gaussian noise, spanning roughly [-3, 3]².
fn banana(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = Uniform::new(0.0, std::f64::consts::PI);
    let noise = Normal::new(0.0, 0.25).expect("valid normal");
    let mut inputs = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let t = angle.sample(&mut rng);
        let (x1, x2) = if y == 0 {
            (2.0 * t.cos() - 0.75, 2.0 * t.sin() - 0.6)
        } else {
            (0.75 - 2.0 * t.cos(), 0.6 - 2.0 * t.sin())
        };
        inputs[(i, 0)] = x1 + noise.sample(&mut rng);
        inputs[(i, 1)] = x2 + noise.sample(&mut rng);
        labels.push(y);
    }
    Dataset::classification(inputs, labels, 2).expect("labels in range")
}

/// Uniformly chosen `fraction` of the rows (at least one), sorted.
pub fn subsample(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("fraction {fraction} not in (0, 1]"));
    }
    let k = ((data.len() as f64 * fraction).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(data.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn balanced(n: usize) -> Dataset {
        let inputs = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::classification(inputs, labels, 2).unwrap()
    }

    #[test]
    fn three_row_csv() {
        let f = write_csv("1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n");
        let d = load_csv(f.path(), None, TaskKind::Classification).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.labels().unwrap(), &[0, 1, 0]);
        assert_eq!(d.inputs[(2, 1)], 6.0);
    }

    #[test]
    fn header_is_detected_and_label_column_selectable() {
        let f = write_csv("y,a,b\n1,0.5,0.25\n0,1.5,2.5\n");
        let d = load_csv(f.path(), Some(0), TaskKind::Classification).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels().unwrap(), &[1, 0]);
        assert_eq!(d.inputs[(1, 1)], 2.5);
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_csv("");
        assert!(matches!(load_csv(f.path(), None, TaskKind::Classification), Err(Error::NoRows)));
        let f = write_csv("a,b,label\n");
        assert!(matches!(load_csv(f.path(), None, TaskKind::Classification), Err(Error::NoRows)));
    }

    #[test]
    fn malformed_row_names_the_row() {
        let f = write_csv("1,2,0\n3,x,1\n");
        match load_csv(f.path(), None, TaskKind::Classification) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("1,2,0\n3,1\n");
        assert!(matches!(load_csv(f.path(), None, TaskKind::Classification), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn non_contiguous_labels_are_remapped_with_warning() {
        let f = write_csv("1,0\n2,2\n3,0\n");
        let d = load_csv(f.path(), None, TaskKind::Classification).unwrap();
        assert_eq!(d.labels().unwrap(), &[0, 1, 0]);
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn balanced_split_sizes() {
        let d = balanced(100);
        let spec = SplitSpec::new((0.7, 0.15, 0.15), 7, true).unwrap();
        let (tr, va, te) = split_stratified(&d, &spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (70, 15, 15));
        let ones = tr.labels().unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 35);
    }

    #[test]
    fn split_is_deterministic() {
        let d = balanced(90);
        let spec = SplitSpec::new((0.7, 0.15, 0.15), 7, true).unwrap();
        assert_eq!(split_indices(&d, &spec).unwrap(), split_indices(&d, &spec).unwrap());
        let other = SplitSpec::new((0.7, 0.15, 0.15), 8, true).unwrap();
        assert_ne!(split_indices(&d, &spec).unwrap(), split_indices(&d, &other).unwrap());
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(SplitSpec::new((1.0, 0.0, 0.0), 1, true).is_err());
        assert!(SplitSpec::new((0.5, 0.3, 0.3), 1, true).is_err());
    }

    #[test]
    fn tiny_class_rejected_under_stratification() {
        let inputs = DMatrix::zeros(10, 1);
        let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let d = Dataset::classification(inputs, labels, 2).unwrap();
        let spec = SplitSpec::new((0.6, 0.2, 0.2), 1, true).unwrap();
        assert!(split_indices(&d, &spec).is_err());
        let spec = SplitSpec::new((0.6, 0.2, 0.2), 1, false).unwrap();
        assert!(split_indices(&d, &spec).is_ok());
    }

    #[test]
    fn step_toy() {
        let d = make_toy(ToyKind::Step1d, 0);
        assert_eq!((d.len(), d.input_dim(), d.num_classes()), (6, 1, 2));
        assert_eq!(d.inputs[(0, 0)], -6.0);
        assert_eq!(d.labels().unwrap()[0], 0);
        assert_eq!(d.labels().unwrap().iter().sum::<usize>(), 3);
    }

    #[test]
    fn banana_is_deterministic() {
        let a = make_toy(ToyKind::Banana, 1);
        let b = make_toy(ToyKind::Banana, 1);
        assert_eq!(a, b);
        assert_eq!(a.len(), BANANA_SIZE);
        assert!("spiral".parse::<ToyKind>().is_err());
    }

    #[test]
    fn ring_lies_outside_blobs() {
        let b = make_toy(ToyKind::Blobs, 0);
        let r = make_toy(ToyKind::Ring, 0);
        let radius = |d: &Dataset, i: usize| d.inputs.row(i).norm();
        assert_eq!((b.num_classes(), r.num_classes(), b.len(), r.len()), (3, 3, BLOBS_SIZE, RING_SIZE));
        assert!((0..r.len()).all(|i| (7.0..=9.0).contains(&radius(&r, i))));
        let far = (0..b.len()).filter(|&i| radius(&b, i) > 5.0).count();
        assert!(far < 5, "{far} blob points beyond radius 5");
    }

    #[test]
    fn standardizer_fits_train_statistics() {
        let d = balanced(40);
        let s = Standardizer::fit(&d);
        let t = s.transform(&d).unwrap();
        for j in 0..2 {
            let col = t.inputs.column(j);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-6);
        }
        let back = s.inverse_transform_inputs(&t.inputs);
        assert!(back.iter().zip(d.inputs.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
