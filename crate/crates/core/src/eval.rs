//! Frozen-feature evaluation: embedding tables, a softmax-regression probe
//! and collapse diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::event::{load_manifest, EventError};
use crate::grad::Tensor;
use crate::model::{encode, project_batch, read_checkpoint, ModelError, ModelState};
use crate::trainer::{Dataset, TrainError};
use crate::viewgen::{full_view, ViewConfig, ViewError};

pub const ETAB_MAGIC: &[u8; 4] = b"ETAB";
const ETAB_HEADER: usize = 4 + 8 + 4 + 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding table is unlabeled")]
    UnlabeledData,
    #[error("zero-norm embedding row {0}")]
    DegenerateRow(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("bad ETAB magic")]
    BadMagic,
    #[error("truncated ETAB: {0}")]
    Truncated(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a table's rows came from. Not serialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

/// `N × D` row-major features with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub n: usize,
    pub d: usize,
    pub rows: Vec<f64>,
    pub labels: Option<Vec<u32>>,
    pub provenance: Option<Provenance>,
}

impl EmbeddingTable {
    pub fn new(n: usize, d: usize, rows: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self, EvalError> {
        if rows.len() != n * d {
            return Err(EvalError::InvalidTable(format!("{} values for {n}x{d}", rows.len())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::InvalidTable("non-finite feature".into()));
        }
        if labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(EvalError::InvalidTable("label count differs from row count".into()));
        }
        Ok(Self {
            n,
            d,
            rows,
            labels,
            provenance: None,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

pub fn encode_etab(tab: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(ETAB_HEADER + 8 * tab.rows.len() + 4 * tab.n);
    out.extend_from_slice(ETAB_MAGIC);
    out.extend_from_slice(&(tab.n as u64).to_le_bytes());
    out.extend_from_slice(&(tab.d as u32).to_le_bytes());
    out.push(u8::from(tab.labels.is_some()));
    for v in &tab.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &tab.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_etab(bytes: &[u8]) -> Result<EmbeddingTable, EvalError> {
    if bytes.len() < 4 || &bytes[..4] != ETAB_MAGIC {
        return Err(EvalError::BadMagic);
    }
    if bytes.len() < ETAB_HEADER {
        return Err(EvalError::Truncated("header".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let labeled = match bytes[16] {
        0 => false,
        1 => true,
        b => return Err(EvalError::InvalidTable(format!("has_labels byte {b}"))),
    };
    let expected = ETAB_HEADER as u128 + 8 * n as u128 * d as u128 + if labeled { 4 * n as u128 } else { 0 };
    if expected != bytes.len() as u128 {
        return Err(EvalError::Truncated(format!("{n}x{d} needs {expected} bytes, found {}", bytes.len())));
    }
    let (n, d) = (n as usize, d as usize);
    let body = &bytes[ETAB_HEADER..];
    let rows: Vec<f64> = body[..8 * n * d]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = labeled.then(|| {
        body[8 * n * d..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    EmbeddingTable::new(n, d, rows, labels)
}

pub fn write_etab(path: impl AsRef<Path>, tab: &EmbeddingTable) -> Result<(), EvalError> {
    fs::write(path, encode_etab(tab))?;
    Ok(())
}

pub fn read_etab(path: impl AsRef<Path>) -> Result<EmbeddingTable, EvalError> {
    decode_etab(&fs::read(path)?)
}

/// Which representation [`embed`] extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedOutput {
    /// Pooled encoder features, `D` columns.
    Features,
    /// Event projection head output, `E` columns.
    EventHead,
}

/// Embeds every stream of `data` through the frozen online branch using
/// the full patch set of the un-augmented stream at `(out_w, out_h)`.
pub fn embed(
    state: &ModelState,
    data: &Dataset,
    vcfg: &ViewConfig,
    out_width: u32,
    out_height: u32,
    which: EmbedOutput,
) -> Result<EmbeddingTable, EvalError> {
    let dims = &state.dims;
    if vcfg.patch_size != dims.patch_size {
        return Err(EvalError::DimMismatch(format!(
            "view patch size {} vs checkpoint {}",
            vcfg.patch_size, dims.patch_size
        )));
    }
    let feats = data
        .streams
        .par_iter()
        .map(|s| -> Result<Vec<f64>, EvalError> {
            let set = full_view(s, out_width, out_height, vcfg)?;
            Ok(encode(&state.online.encoder, dims, &set)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = feats.len();
    let flat: Vec<f64> = feats.into_iter().flatten().collect();
    let (d, rows) = match which {
        EmbedOutput::Features => (dims.embed_dim, flat),
        EmbedOutput::EventHead => {
            let out = project_batch(&state.online.evt_head, &Tensor::matrix(n, dims.embed_dim, flat))?;
            (dims.proj_dim, out.into_data())
        }
    };
    EmbeddingTable::new(n, d, rows, data.labels.clone())
}

/// [`embed`] from a checkpoint file and a manifest.
pub fn embed_dataset(
    checkpoint: &Path,
    manifest: &Path,
    vcfg: &ViewConfig,
    out_width: u32,
    out_height: u32,
    which: EmbedOutput,
) -> Result<EmbeddingTable, EvalError> {
    let state = read_checkpoint(checkpoint)?;
    let data = Dataset::load(&load_manifest(manifest)?, state.dims.proj_dim)?;
    let mut tab = embed(&state, &data, vcfg, out_width, out_height, which)?;
    tab.provenance = Some(Provenance {
        checkpoint: checkpoint.to_path_buf(),
        manifest: manifest.to_path_buf(),
    });
    Ok(tab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.1 }
    }
}

/// Trains a single linear layer with softmax cross-entropy by full-batch
/// gradient descent on `train` and returns top-1 accuracy on `test`.
///
/// Features are standardized with the training mean and standard
/// deviation; weights start at zero, so the result is deterministic.
pub fn linear_probe(train: &EmbeddingTable, test: &EmbeddingTable, cfg: &ProbeConfig) -> Result<f64, EvalError> {
    let (ytr, yte) = match (&train.labels, &test.labels) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(EvalError::UnlabeledData),
    };
    if train.d != test.d {
        return Err(EvalError::DimMismatch(format!("train D={} vs test D={}", train.d, test.d)));
    }
    if train.n == 0 || test.n == 0 {
        return Err(EvalError::InvalidTable("empty table".into()));
    }
    let d = train.d;
    let k = ytr.iter().chain(yte).copied().max().unwrap() as usize + 1;

    let mut mean = vec![0.0; d];
    for i in 0..train.n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / train.n as f64;
        }
    }
    let mut std = vec![0.0; d];
    for i in 0..train.n {
        for ((s, v), m) in std.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / train.n as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|s| if s > 1e-24 { s.sqrt() } else { 1.0 }).collect();
    let standardize = |tab: &EmbeddingTable| -> Tensor {
        let mut x = tab.rows.clone();
        for row in x.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
        Tensor::matrix(tab.n, d, x)
    };
    let (xtr, xte) = (standardize(train), standardize(test));
    let xtr_t = xtr.transpose();

    let mut w = Tensor::zeros(&[d, k]);
    let mut b = vec![0.0; k];
    let logits = |x: &Tensor, w: &Tensor, b: &[f64]| -> Tensor {
        let mut z = x.matmul(w);
        for row in z.data_mut().chunks_mut(k) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        z
    };
    for _ in 0..cfg.epochs {
        let mut g = logits(&xtr, &w, &b);
        // Softmax minus one-hot, averaged over the batch.
        for (row, &y) in g.data_mut().chunks_mut(k).zip(ytr) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - max).exp() / z - f64::from(u8::from(c == y as usize))) / train.n as f64;
            }
        }
        let gw = xtr_t.matmul(&g);
        for (wv, gv) in w.data_mut().iter_mut().zip(gw.data()) {
            *wv -= cfg.lr * gv;
        }
        for row in g.data().chunks(k) {
            for (bb, gv) in b.iter_mut().zip(row) {
                *bb -= cfg.lr * gv;
            }
        }
    }
    let z = logits(&xte, &w, &b);
    let correct = z
        .data()
        .chunks(k)
        .zip(yte)
        .filter(|(row, &y)| {
            let best = (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            best == y as usize
        })
        .count();
    Ok(correct as f64 / test.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseMetrics {
    /// Mean cosine over unordered pairs of distinct rows.
    pub mean_pairwise_cos: f64,
    /// Smallest population standard deviation over columns.
    pub per_dim_std_min: f64,
    /// `exp(H(p))` with `p` the singular values of the raw rows scaled to sum 1.
    pub effective_rank: f64,
}

pub fn collapse_metrics(tab: &EmbeddingTable) -> Result<CollapseMetrics, EvalError> {
    if tab.n < 2 {
        return Err(EvalError::InvalidTable("collapse metrics need at least two rows".into()));
    }
    let (n, d) = (tab.n, tab.d);
    let mut unit = Vec::with_capacity(n * d);
    for i in 0..n {
        let r = tab.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EvalError::DegenerateRow(i));
        }
        unit.extend(r.iter().map(|v| v / norm));
    }
    let u = Tensor::matrix(n, d, unit);
    let gram = u.matmul(&u.transpose());
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += gram.data()[i * n + j];
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mean_pairwise_cos = (sum / pairs).clamp(-1.0, 1.0);

    let per_dim_std_min = (0..d)
        .map(|c| {
            let mean = (0..n).map(|i| tab.rows[i * d + c]).sum::<f64>() / n as f64;
            ((0..n).map(|i| (tab.rows[i * d + c] - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .fold(f64::INFINITY, f64::min);

    let sv = DMatrix::from_row_slice(n, d, &tab.rows).singular_values();
    let total: f64 = sv.iter().sum();
    let entropy: f64 = sv
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(CollapseMetrics {
        mean_pairwise_cos,
        per_dim_std_min,
        effective_rank: entropy.exp(),
    })
}
