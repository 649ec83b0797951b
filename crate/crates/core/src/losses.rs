//! Contrastive objectives: InfoNCE, the teacher-projected event loss, the
//! event–teacher InfoNCE and the KL alignment of in-batch similarity
//! distributions.
//!
//! All losses are built on a [`Tape`] so they can be differentiated with
//! respect to the online branch. Keys from the momentum branch and teacher
//! embeddings enter as constants and never receive gradients. Negatives
//! are the other elements of the batch.

use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Which teacher vector each key is projected onto in [`l_evt`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyProjection {
    /// Key `j` onto its own teacher `y_j`.
    OwnTeacher,
    /// Every key onto the query's teacher `y_i`.
    QueryTeacher,
}

/// The event-discrimination term used by [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventLoss {
    /// InfoNCE between teacher-projected query and key embeddings.
    Projection,
    /// Plain InfoNCE between normalized query and key embeddings (the
    /// collapsing baseline).
    Vanilla,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub key_projection: KeyProjection,
    pub event_loss: EventLoss,
    /// L2-normalize `q^img` before the event–teacher InfoNCE and the
    /// pairwise scores.
    pub normalize_img: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda1: 2.0,
            key_projection: KeyProjection::OwnTeacher,
            event_loss: EventLoss::Projection,
            normalize_img: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "lambda1 must be non-negative, got {}",
                self.lambda1
            )));
        }
        Ok(())
    }
}

/// One batch of embeddings, all `[B, E]`.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    pub q_evt: Var,
    /// Momentum-branch keys; constant.
    pub k_evt: Var,
    pub q_img: Var,
    /// Unit-norm teacher rows; constant.
    pub y: Var,
}

impl BatchEmbeddings {
    pub fn new(tape: &Tape, q_evt: Var, k_evt: Var, q_img: Var, y: Var) -> Result<Self, LossError> {
        let shape = tape.value(q_evt).shape().to_vec();
        if shape.len() != 2 || shape[0] < 2 {
            return Err(LossError::InvalidBatch(format!(
                "embeddings must be [B, E] with B >= 2, got {shape:?}"
            )));
        }
        for (name, v) in [("k_evt", k_evt), ("q_img", q_img), ("y", y)] {
            if tape.value(v).shape() != shape.as_slice() {
                return Err(LossError::InvalidBatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    tape.value(v).shape()
                )));
            }
        }
        for (name, v) in [("k_evt", k_evt), ("y", y)] {
            if tape.requires_grad(v) {
                return Err(LossError::InvalidBatch(format!("{name} must be a constant")));
            }
        }
        let yt = tape.value(y);
        for i in 0..yt.rows() {
            let n = yt.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() >= 1e-9 {
                return Err(LossError::InvalidBatch(format!("teacher row {i} has norm {n}")));
            }
        }
        Ok(Self { q_evt, k_evt, q_img, y })
    }

    pub fn batch_size(&self, tape: &Tape) -> usize {
        tape.value(self.q_evt).rows()
    }
}

fn as_row(tape: &mut Tape, v: Var) -> Result<Var, GradError> {
    let t = tape.value(v);
    match t.rank() {
        1 => {
            let n = t.len();
            tape.reshape(v, &[1, n])
        }
        _ => Ok(v),
    }
}

/// Mean over rows of `-log softmax(logits / tau)[i, positives[i]]`.
pub fn nce_from_logits(tape: &mut Tape, logits: Var, positives: &[usize], tau: f64) -> Result<Var, LossError> {
    let (b, m) = (tape.value(logits).rows(), tape.value(logits).cols());
    if positives.len() != b || positives.iter().any(|&p| p >= m) {
        return Err(LossError::InvalidBatch(format!(
            "{} positives for a [{b}, {m}] logit matrix",
            positives.len()
        )));
    }
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let log_probs = tape.log_softmax_rows(scaled)?;
    let mut mask = Tensor::zeros(&[b, m]);
    for (i, &p) in positives.iter().enumerate() {
        mask.data_mut()[i * m + p] = 1.0;
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / b as f64)?)
}

/// InfoNCE for a batch of queries `[B, E]` against keys `[M, E]`; query
/// `i`'s positive is key `positives[i]`, all other keys are negatives.
pub fn info_nce_rows(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    positives: &[usize],
    tau: f64,
    normalize_inputs: bool,
) -> Result<Var, LossError> {
    let (q, k) = if normalize_inputs {
        (tape.l2_normalize_rows(queries)?, tape.l2_normalize_rows(keys)?)
    } else {
        (queries, keys)
    };
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    nce_from_logits(tape, logits, positives, tau)
}

/// `-log( exp(q·k_pos/τ) / Σ_j exp(q·k_j/τ) )`, max-shifted.
pub fn info_nce(
    tape: &mut Tape,
    q: Var,
    keys: Var,
    pos: usize,
    tau: f64,
    normalize_inputs: bool,
) -> Result<Var, LossError> {
    let q = as_row(tape, q)?;
    if tape.value(q).rows() != 1 {
        return Err(LossError::InvalidBatch("info_nce takes a single query".into()));
    }
    let keys = as_row(tape, keys)?;
    if tape.value(keys).rows() == 0 {
        return Err(LossError::InvalidBatch("info_nce needs at least one key".into()));
    }
    info_nce_rows(tape, q, keys, &[pos], tau, normalize_inputs)
}

/// `ζ(v1, v2) = (v1·v2) · v2/‖v2‖` for vectors.
pub fn zeta(tape: &mut Tape, v1: Var, v2: Var) -> Result<Var, LossError> {
    let e = tape.value(v1).len();
    let s = tape.dot(v1, v2)?;
    let s = tape.reshape(s, &[1, 1])?;
    let dir = tape.l2_normalize(v2)?;
    let dir = tape.reshape(dir, &[1, e])?;
    let out = tape.matmul(s, dir)?;
    Ok(tape.reshape(out, &[e])?)
}

/// Row `i` of the result is `ζ(v_i, basis_i)`.
pub fn zeta_rows(tape: &mut Tape, v: Var, basis: Var) -> Result<Var, LossError> {
    let b = tape.value(v).rows();
    if tape.value(basis).shape() != tape.value(v).shape() {
        return Err(LossError::InvalidBatch("zeta_rows needs equal shapes".into()));
    }
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let vi = tape.slice_rows(v, i, i + 1)?;
        let yi = tape.slice_rows(basis, i, i + 1)?;
        let yt = tape.transpose(yi)?;
        let s = tape.matmul(vi, yt)?;
        let dir = tape.l2_normalize_rows(yi)?;
        rows.push(tape.matmul(s, dir)?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// Event embedding projection loss.
///
/// `q^evt` and `k^evt` rows are L2-normalized, projected onto teacher
/// directions with [`zeta`], and compared with InfoNCE without
/// re-normalizing the projections.
pub fn l_evt(tape: &mut Tape, batch: &BatchEmbeddings, tau: f64, mode: KeyProjection) -> Result<Var, LossError> {
    let b = batch.batch_size(tape);
    let qn = tape.l2_normalize_rows(batch.q_evt)?;
    let kn = tape.l2_normalize_rows(batch.k_evt)?;
    let positives: Vec<usize> = (0..b).collect();
    match mode {
        KeyProjection::OwnTeacher => {
            let zq = zeta_rows(tape, qn, batch.y)?;
            let zk = zeta_rows(tape, kn, batch.y)?;
            info_nce_rows(tape, zq, zk, &positives, tau, false)
        }
        KeyProjection::QueryTeacher => {
            let zq = zeta_rows(tape, qn, batch.y)?;
            let mut logit_rows = Vec::with_capacity(b);
            for i in 0..b {
                let yi = tape.slice_rows(batch.y, i, i + 1)?;
                let repeated = tape.gather_rows(yi, &vec![0; b])?;
                let zk = zeta_rows(tape, kn, repeated)?;
                let zqi = tape.slice_rows(zq, i, i + 1)?;
                let zkt = tape.transpose(zk)?;
                logit_rows.push(tape.matmul(zqi, zkt)?);
            }
            let logits = tape.concat_rows(&logit_rows)?;
            nce_from_logits(tape, logits, &positives, tau)
        }
    }
}

/// The baseline `L_nce(q^evt, {k^evt})` on normalized embeddings.
pub fn l_evt_vanilla(tape: &mut Tape, batch: &BatchEmbeddings, tau: f64) -> Result<Var, LossError> {
    let positives: Vec<usize> = (0..batch.batch_size(tape)).collect();
    info_nce_rows(tape, batch.q_evt, batch.k_evt, &positives, tau, true)
}

/// InfoNCE between `q^img` rows and the teacher rows of the batch.
pub fn l_rgb(tape: &mut Tape, batch: &BatchEmbeddings, tau: f64, normalize_img: bool) -> Result<Var, LossError> {
    let positives: Vec<usize> = (0..batch.batch_size(tape)).collect();
    let q = if normalize_img {
        tape.l2_normalize_rows(batch.q_img)?
    } else {
        batch.q_img
    };
    info_nce_rows(tape, q, batch.y, &positives, tau, false)
}

/// Row-stochastic `s_ij = softmax_j(m̂_i · m̂_j / τ)`, diagonal included.
pub fn pairwise_scores(tape: &mut Tape, m: Var, tau: f64) -> Result<Var, LossError> {
    if tape.value(m).rank() != 2 || tape.value(m).rows() < 2 {
        return Err(LossError::InvalidBatch("pairwise_scores needs at least two rows".into()));
    }
    let mn = tape.l2_normalize_rows(m)?;
    pairwise_scores_normalized(tape, mn, tau)
}

fn pairwise_scores_normalized(tape: &mut Tape, mn: Var, tau: f64) -> Result<Var, LossError> {
    let mt = tape.transpose(mn)?;
    let sims = tape.matmul(mn, mt)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    Ok(tape.softmax_rows(scaled)?)
}

/// `Σ_i Σ_j s^q_ij · log(s^q_ij / s^y_ij)`.
pub fn l_kl(tape: &mut Tape, s_q: Var, s_y: Var) -> Result<Var, LossError> {
    let lq = tape.log(s_q)?;
    let ly = tape.log(s_y)?;
    let diff = tape.sub(lq, ly)?;
    let terms = tape.mul(s_q, diff)?;
    Ok(tape.sum(terms)?)
}

/// Total loss and the value of each term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub l_evt: f64,
    pub l_rgb: f64,
    pub l_kl: f64,
    pub l_total: f64,
}

/// `L_evt + L_RGB + λ₁·L_kl`, with τ shared by every term.
pub fn total_loss(tape: &mut Tape, batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossTerms, LossError> {
    cfg.validate()?;
    let evt = match cfg.event_loss {
        EventLoss::Projection => l_evt(tape, batch, cfg.tau, cfg.key_projection)?,
        EventLoss::Vanilla => l_evt_vanilla(tape, batch, cfg.tau)?,
    };
    let rgb = l_rgb(tape, batch, cfg.tau, cfg.normalize_img)?;
    let s_q = if cfg.normalize_img {
        pairwise_scores(tape, batch.q_img, cfg.tau)?
    } else {
        pairwise_scores_normalized(tape, batch.q_img, cfg.tau)?
    };
    let s_y = pairwise_scores(tape, batch.y, cfg.tau)?;
    let kl = l_kl(tape, s_q, s_y)?;
    let sum = tape.add(evt, rgb)?;
    let weighted = tape.scale(kl, cfg.lambda1)?;
    let total = tape.add(sum, weighted)?;
    Ok(LossTerms {
        total,
        l_evt: tape.value(evt).item(),
        l_rgb: tape.value(rgb).item(),
        l_kl: tape.value(kl).item(),
        l_total: tape.value(total).item(),
    })
}
