//! Generalized Gauss-Newton curvature Σ_n J_nᵀ Λ_n J_n in full, diagonal,
//! Kronecker-factored and Gram (Jacobian-factor) form.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_artifact, write_artifact};
use crate::datasets::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::likelihood::{copy_row, Likelihood};
use crate::linalg::{clip_psd, gemm_into, gram_t, symmetrize, sym_eigen};
use crate::network::{ForwardCache, LayerShape, MlpNetwork};

/// Largest parameter count accepted by dense full-mode curvature.
pub const FULL_PARAM_CAP: usize = 5000;
/// Dense curvatures up to this size are projected onto the PSD cone.
pub const CLIP_PARAM_LIMIT: usize = 1000;
const CHUNK: usize = 256;
const MAGIC: &[u8; 8] = b"LLCURV01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureMode {
    Full,
    Diag,
    Kfac,
    /// Exact full GGN kept as its stacked Jacobian factor.
    Gram,
}

impl std::str::FromStr for CurvatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CurvatureMode::Full),
            "diag" => Ok(CurvatureMode::Diag),
            "kfac" => Ok(CurvatureMode::Kfac),
            "gram" => Ok(CurvatureMode::Gram),
            other => invalid(format!("unknown curvature mode '{other}'")),
        }
    }
}

/// Kronecker factors of one layer with their cached eigenpairs.
#[derive(Debug, Clone)]
pub struct KfacLayer {
    pub shape: LayerShape,
    /// N^(-1/2) Σ_n ã ãᵀ over bias-augmented inputs, (D_in+1)².
    pub q: DMatrix<f64>,
    /// N^(-1/2) Σ_n R_nᵀ Λ_n R_n with R_n = ∂f/∂z for this layer's
    /// pre-activations.
    pub w: DMatrix<f64>,
    pub q_values: DVector<f64>,
    pub q_vectors: DMatrix<f64>,
    pub w_values: DVector<f64>,
    pub w_vectors: DMatrix<f64>,
}

impl KfacLayer {
    pub fn new(shape: LayerShape, q: DMatrix<f64>, w: DMatrix<f64>) -> Self {
        let (mut q_values, q_vectors) = sym_eigen(&q);
        let (mut w_values, w_vectors) = sym_eigen(&w);
        q_values.apply(|v| *v = v.max(0.0));
        w_values.apply(|v| *v = v.max(0.0));
        Self { shape, q, w, q_values, q_vectors, w_values, w_vectors }
    }
}

#[derive(Debug, Clone)]
pub enum Curvature {
    Full(DMatrix<f64>),
    Diag(DVector<f64>),
    Kfac(Vec<KfacLayer>),
    /// G = U Uᵀ with `ut` the P × R matrix whose columns are the rows of the
    /// stacked factor L_nᵀ J_n.
    Gram { ut: DMatrix<f64> },
}

impl Curvature {
    pub fn mode(&self) -> CurvatureMode {
        match self {
            Curvature::Full(_) => CurvatureMode::Full,
            Curvature::Diag(_) => CurvatureMode::Diag,
            Curvature::Kfac(_) => CurvatureMode::Kfac,
            Curvature::Gram { .. } => CurvatureMode::Gram,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Curvature::Full(g) => g.nrows(),
            Curvature::Diag(g) => g.len(),
            Curvature::Kfac(layers) => layers.iter().map(|l| l.shape.num_params()).sum(),
            Curvature::Gram { ut } => ut.nrows(),
        }
    }

    /// Zero curvature in the given structure, i.e. no data.
    pub fn zeros(net: &MlpNetwork, mode: CurvatureMode) -> Curvature {
        let p = net.num_params();
        match mode {
            CurvatureMode::Full => Curvature::Full(DMatrix::zeros(p, p)),
            CurvatureMode::Diag => Curvature::Diag(DVector::zeros(p)),
            CurvatureMode::Gram => Curvature::Gram { ut: DMatrix::zeros(p, 0) },
            CurvatureMode::Kfac => Curvature::Kfac(
                net.layers()
                    .into_iter()
                    .map(|s| KfacLayer::new(s, DMatrix::zeros(s.d_in + 1, s.d_in + 1), DMatrix::zeros(s.d_out, s.d_out)))
                    .collect(),
            ),
        }
    }

    /// Dense P × P matrix represented by this curvature (for small problems).
    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Curvature::Full(g) => g.clone(),
            Curvature::Diag(g) => DMatrix::from_diagonal(g),
            Curvature::Gram { ut } => gram(ut),
            Curvature::Kfac(layers) => {
                let p = self.num_params();
                let mut out = DMatrix::zeros(p, p);
                for layer in layers {
                    let block = crate::linalg::kron(&layer.q, &layer.w);
                    let n = block.nrows();
                    for a in 0..n {
                        for b in 0..n {
                            out[(layer.shape.kron_index(a), layer.shape.kron_index(b))] = block[(a, b)];
                        }
                    }
                }
                out
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (header, payload) = self.to_parts();
        write_artifact(path, MAGIC, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Curvature> {
        let (header, payload): (CurvatureHeader, Vec<f64>) = read_artifact(path, MAGIC)?;
        Curvature::from_parts(&header, &payload)
    }

    pub(crate) fn to_parts(&self) -> (CurvatureHeader, Vec<f64>) {
        let p = self.num_params();
        match self {
            Curvature::Full(g) => (CurvatureHeader { mode: CurvatureMode::Full, num_params: p, cols: p, layers: vec![] }, g.as_slice().to_vec()),
            Curvature::Diag(g) => (CurvatureHeader { mode: CurvatureMode::Diag, num_params: p, cols: 1, layers: vec![] }, g.as_slice().to_vec()),
            Curvature::Gram { ut } => (
                CurvatureHeader { mode: CurvatureMode::Gram, num_params: p, cols: ut.ncols(), layers: vec![] },
                ut.as_slice().to_vec(),
            ),
            Curvature::Kfac(layers) => {
                let mut payload = Vec::new();
                let mut shapes = Vec::new();
                for l in layers {
                    shapes.push([l.shape.d_in, l.shape.d_out, l.shape.offset]);
                    payload.extend_from_slice(l.q.as_slice());
                    payload.extend_from_slice(l.w.as_slice());
                }
                (CurvatureHeader { mode: CurvatureMode::Kfac, num_params: p, cols: 0, layers: shapes }, payload)
            }
        }
    }

    pub(crate) fn from_parts(header: &CurvatureHeader, payload: &[f64]) -> Result<Curvature> {
        let p = header.num_params;
        let need = |n: usize| -> Result<()> {
            if payload.len() != n {
                return shape(format!("curvature payload has {} values, expected {n}", payload.len()));
            }
            Ok(())
        };
        Ok(match header.mode {
            CurvatureMode::Full => {
                need(p * p)?;
                Curvature::Full(DMatrix::from_column_slice(p, p, payload))
            }
            CurvatureMode::Diag => {
                need(p)?;
                Curvature::Diag(DVector::from_column_slice(payload))
            }
            CurvatureMode::Gram => {
                need(p * header.cols)?;
                Curvature::Gram { ut: DMatrix::from_column_slice(p, header.cols, payload) }
            }
            CurvatureMode::Kfac => {
                let mut layers = Vec::new();
                let mut at = 0;
                for &[d_in, d_out, offset] in &header.layers {
                    let nq = (d_in + 1) * (d_in + 1);
                    let nw = d_out * d_out;
                    if payload.len() < at + nq + nw {
                        return shape("truncated kfac payload");
                    }
                    let q = DMatrix::from_column_slice(d_in + 1, d_in + 1, &payload[at..at + nq]);
                    let w = DMatrix::from_column_slice(d_out, d_out, &payload[at + nq..at + nq + nw]);
                    at += nq + nw;
                    layers.push(KfacLayer::new(LayerShape { d_in, d_out, offset }, q, w));
                }
                need(at)?;
                Curvature::Kfac(layers)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CurvatureHeader {
    mode: CurvatureMode,
    num_params: usize,
    cols: usize,
    /// (D_in, D_out, offset) per layer for Kronecker factors.
    layers: Vec<[usize; 3]>,
}

fn gram(ut: &DMatrix<f64>) -> DMatrix<f64> {
    let p = ut.nrows();
    let mut g = DMatrix::zeros(p, p);
    gemm_into(1.0, ut.as_view(), false, ut.as_view(), true, 0.0, g.as_view_mut());
    symmetrize(&mut g);
    g
}

/// Output covectors L_n[:, k] for every example, with LLᵀ = Λ(f_n); row
/// n·C + k of the result belongs to example n.
pub(crate) fn noise_seeds(lik: &Likelihood, f: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let (n, c) = f.shape();
    let mut rows = Vec::with_capacity(n * c);
    let mut v = DMatrix::zeros(n * c, c);
    let mut fr = vec![0.0; c];
    for i in 0..n {
        copy_row(f, i, &mut fr);
        let l = lik.noise_factor(&fr)?;
        for k in 0..c {
            rows.push(i);
            for j in 0..c {
                v[(i * c + k, j)] = l[(j, k)];
            }
        }
    }
    Ok((rows, v))
}

fn check_inputs(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, theta: &DVector<f64>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::NoRows);
    }
    if let Some(c) = lik.latent_dim() {
        if c != net.output_dim() {
            return shape(format!("likelihood expects {c} outputs, network has {}", net.output_dim()));
        }
    }
    if theta.len() != net.num_params() {
        return shape("θ does not match the network");
    }
    Ok(())
}

fn chunk_cache(
    net: &MlpNetwork,
    lik: &Likelihood,
    data: &Dataset,
    theta: &DVector<f64>,
    range: std::ops::Range<usize>,
) -> Result<(ForwardCache, Vec<usize>, DMatrix<f64>)> {
    let x = data.inputs.rows(range.start, range.len()).into_owned();
    let (f, cache) = net.forward_cached(theta, &x)?;
    let (rows, v) = noise_seeds(lik, &f)?;
    Ok((cache, rows, v))
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(move |s| s..(s + CHUNK).min(n))
}

/// Stacked factor Uᵀ (P × N·C) with G = Uᵀ-columns outer products summed.
pub fn ggn_factor(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_inputs(net, lik, data, theta)?;
    let c = net.output_dim();
    let mut ut = DMatrix::zeros(net.num_params(), data.len() * c);
    for range in chunks(data.len()) {
        let (cache, rows, v) = chunk_cache(net, lik, data, theta, range.clone())?;
        let part = net.vjp_columns(theta, &cache, &rows, &v)?;
        ut.columns_mut(range.start * c, part.ncols()).copy_from(&part);
    }
    Ok(ut)
}

pub fn ggn(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, theta: &DVector<f64>, mode: CurvatureMode) -> Result<Curvature> {
    ggn_capped(net, lik, data, theta, mode, FULL_PARAM_CAP)
}

pub fn ggn_capped(
    net: &MlpNetwork,
    lik: &Likelihood,
    data: &Dataset,
    theta: &DVector<f64>,
    mode: CurvatureMode,
    full_cap: usize,
) -> Result<Curvature> {
    check_inputs(net, lik, data, theta)?;
    let p = net.num_params();
    match mode {
        CurvatureMode::Kfac => kfac(net, lik, data, theta),
        CurvatureMode::Gram => Ok(Curvature::Gram { ut: ggn_factor(net, lik, data, theta)? }),
        CurvatureMode::Full => {
            if p > full_cap {
                return invalid(format!(
                    "full curvature needs a dense {p}×{p} matrix (cap {full_cap}); use kfac curvature instead"
                ));
            }
            let mut g = DMatrix::zeros(p, p);
            for range in chunks(data.len()) {
                let (cache, rows, v) = chunk_cache(net, lik, data, theta, range)?;
                let ut = net.vjp_columns(theta, &cache, &rows, &v)?;
                gemm_into(1.0, ut.as_view(), false, ut.as_view(), true, 1.0, g.as_view_mut());
            }
            symmetrize(&mut g);
            if p <= CLIP_PARAM_LIMIT {
                g = clip_psd(&g);
            }
            Ok(Curvature::Full(g))
        }
        CurvatureMode::Diag => {
            let mut g = DVector::zeros(p);
            for range in chunks(data.len()) {
                let (cache, rows, v) = chunk_cache(net, lik, data, theta, range)?;
                let ut = net.vjp_columns(theta, &cache, &rows, &v)?;
                for col in ut.column_iter() {
                    for (gi, u) in g.iter_mut().zip(col.iter()) {
                        *gi += u * u;
                    }
                }
            }
            Ok(Curvature::Diag(g))
        }
    }
}

/// Kronecker-factored GGN: per layer the input second moments times the
/// backpropagated output noise, each summed over examples and scaled by
/// N^(-1/2).
pub fn kfac(net: &MlpNetwork, lik: &Likelihood, data: &Dataset, theta: &DVector<f64>) -> Result<Curvature> {
    check_inputs(net, lik, data, theta)?;
    let shapes = net.layers();
    let mut qs: Vec<DMatrix<f64>> = shapes.iter().map(|s| DMatrix::zeros(s.d_in + 1, s.d_in + 1)).collect();
    let mut ws: Vec<DMatrix<f64>> = shapes.iter().map(|s| DMatrix::zeros(s.d_out, s.d_out)).collect();
    for range in chunks(data.len()) {
        let (cache, rows, v) = chunk_cache(net, lik, data, theta, range)?;
        let dz = net.preactivation_cotangents(theta, &cache, &rows, &v)?;
        for l in 0..shapes.len() {
            let a = cache.augmented_input(l);
            gemm_into(1.0, a.as_view(), true, a.as_view(), false, 1.0, qs[l].as_view_mut());
            gemm_into(1.0, dz[l].as_view(), true, dz[l].as_view(), false, 1.0, ws[l].as_view_mut());
        }
    }
    // The product of plain sums counts every example N times; splitting the
    // normalization evenly keeps Q⊗W = N·E[Q]⊗E[W].
    let norm = 1.0 / (data.len() as f64).sqrt();
    Ok(Curvature::Kfac(
        shapes
            .into_iter()
            .zip(qs.into_iter().zip(ws))
            .map(|(s, (mut q, mut w))| {
                q *= norm;
                w *= norm;
                symmetrize(&mut q);
                symmetrize(&mut w);
                KfacLayer::new(s, q, w)
            })
            .collect(),
    ))
}

/// Per-layer factors (Q⁽ⁿ⁾, W⁽ⁿ⁾) of a single example; their Kronecker
/// product is that example's exact GGN block for the layer.
pub fn kfac_point_factors(
    net: &MlpNetwork,
    lik: &Likelihood,
    theta: &DVector<f64>,
    x: &[f64],
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let (f, cache) = net.forward_cached(theta, &xm)?;
    let (rows, v) = noise_seeds(lik, &f)?;
    let dz = net.preactivation_cotangents(theta, &cache, &rows, &v)?;
    Ok((0..net.num_layers()).map(|l| (gram_t(&cache.augmented_input(l)), gram_t(&dz[l]))).collect())
}

/// Precision Q⊗W + δI (or its dampened variant) of one layer in the shared
/// eigenbasis M_Q ⊗ M_W.
#[derive(Debug, Clone)]
pub struct KfacPrecisionLayer {
    pub shape: LayerShape,
    pub q_vectors: DMatrix<f64>,
    pub w_vectors: DMatrix<f64>,
    /// Eigenvalue of basis vector (o, i), stored as D_out × (D_in+1).
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct KfacPrecision {
    pub layers: Vec<KfacPrecisionLayer>,
}

/// Undampened: eigenvalues d_Q[i]·d_W[o] + δ, i.e. exactly Q⊗W + δI.
/// Dampened: (d_Q[i] + √δ)(d_W[o] + √δ), i.e. (Q + √δI) ⊗ (W + √δI).
pub fn kfac_precision(layers: &[KfacLayer], delta: f64, dampened: bool) -> Result<KfacPrecision> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return invalid(format!("prior precision must be non-negative, got {delta}"));
    }
    let sd = delta.sqrt();
    Ok(KfacPrecision {
        layers: layers
            .iter()
            .map(|l| {
                let values = DMatrix::from_fn(l.shape.d_out, l.shape.d_in + 1, |o, i| {
                    let (dq, dw) = (l.q_values[i], l.w_values[o]);
                    if dampened {
                        (dq + sd) * (dw + sd)
                    } else {
                        dq * dw + delta
                    }
                });
                KfacPrecisionLayer { shape: l.shape, q_vectors: l.q_vectors.clone(), w_vectors: l.w_vectors.clone(), values }
            })
            .collect(),
    })
}

impl KfacPrecision {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.shape.num_params()).sum()
    }

    /// Applies M h(D) Mᵀ blockwise to every column of `v` (P × K).
    pub fn apply_spectral(&self, v: &DMatrix<f64>, h: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for layer in &self.layers {
            let s = layer.shape;
            let scale = layer.values.map(&h);
            let mut z = DMatrix::zeros(s.d_out, s.d_in + 1);
            let mut t1 = DMatrix::zeros(s.d_out, s.d_in + 1);
            let mut t2 = DMatrix::zeros(s.d_out, s.d_in + 1);
            for k in 0..v.ncols() {
                let col = v.column(k);
                for i in 0..=s.d_in {
                    for o in 0..s.d_out {
                        z[(o, i)] = col[s.param_index(o, i)];
                    }
                }
                // Y = M_Wᵀ Z M_Q, scaled, mapped back as M_W Y M_Qᵀ
                gemm_into(1.0, layer.w_vectors.as_view(), true, z.as_view(), false, 0.0, t1.as_view_mut());
                gemm_into(1.0, t1.as_view(), false, layer.q_vectors.as_view(), false, 0.0, t2.as_view_mut());
                t2.component_mul_assign(&scale);
                gemm_into(1.0, layer.w_vectors.as_view(), false, t2.as_view(), false, 0.0, t1.as_view_mut());
                gemm_into(1.0, t1.as_view(), false, layer.q_vectors.as_view(), true, 0.0, z.as_view_mut());
                let mut oc = out.column_mut(k);
                for i in 0..=s.d_in {
                    for o in 0..s.d_out {
                        oc[s.param_index(o, i)] = z[(o, i)];
                    }
                }
            }
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let p = self.num_params();
        self.apply_spectral(&DMatrix::identity(p, p), |v| v)
    }

    pub fn log_det(&self) -> f64 {
        self.layers.iter().map(|l| l.values.iter().map(|v| v.ln()).sum::<f64>()).sum()
    }
}
