//! Patch encoder, projection heads, the momentum branch and their file formats.
//!
//! The encoder embeds each kept patch as `patch · W_proj + pos[index]`,
//! runs a per-patch `D → 4D → D` ReLU MLP, and mean-pools over the set.
//! Heads are `D → D → E` ReLU MLPs. Weights multiply from the right
//! (`x · W`, with `W` stored `[in, out]`).
//!
//! Parameter order, used by the optimizer, EMA and checkpoints:
//!
//! 1. online encoder: `patch_proj`, `pos_table`, `mlp_in.weight`, `mlp_in.bias`,
//!    `mlp_out.weight`, `mlp_out.bias`
//! 2. online event head: `hidden.weight`, `hidden.bias`, `out.weight`, `out.bias`
//! 3. online image head: same four tensors
//! 4. momentum encoder (as 1), 5. momentum event head (as 2)
//! 6. first moments of the 16 online tensors, 7. second moments
//!
//! EVCK layout: `"EVCK" | version u32 | P u32 | L u32 | D u32 | E u32 | step u64 |`
//! followed by every tensor above as raw little-endian fp64, shapes implied
//! by the dims.
//!
//! TVEC layout: `"TVEC" | dim u32 | dim × fp64`.

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};
use crate::rng::rng_from;
use crate::viewgen::{Patch, PatchSet, CHANNELS};

pub const HIDDEN_RATIO: usize = 4;
pub const EVCK_MAGIC: &[u8; 4] = b"EVCK";
pub const EVCK_VERSION: u32 = 1;
pub const TVEC_MAGIC: &[u8; 4] = b"TVEC";
/// Teacher vectors within this distance of unit norm are re-normalized on load.
pub const TEACHER_RENORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("bad magic: expected {0:?}")]
    BadMagic(&'static str),
    #[error("truncated or oversized file: {0}")]
    Truncated(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("teacher embedding norm {0} is not unit")]
    NotUnitNorm(f64),
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub patch_size: usize,
    /// `L`, the full patch grid size.
    pub num_patches: usize,
    /// `D`.
    pub embed_dim: usize,
    /// `E`, shared by both heads and the teacher embeddings.
    pub proj_dim: usize,
}

impl ModelDims {
    pub fn patch_len(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        HIDDEN_RATIO * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.num_patches == 0 || self.embed_dim == 0 || self.proj_dim == 0 {
            return Err(ModelError::InvalidDims(format!("{self:?} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_proj: Tensor,
    pub pos_table: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Linear,
    pub out: Linear,
}

/// Fixed-order access to a group of parameter tensors.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamGroup for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.patch_proj,
            &self.pos_table,
            &self.mlp_in.weight,
            &self.mlp_in.bias,
            &self.mlp_out.weight,
            &self.mlp_out.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.patch_proj,
            &mut self.pos_table,
            &mut self.mlp_in.weight,
            &mut self.mlp_in.bias,
            &mut self.mlp_out.weight,
            &mut self.mlp_out.bias,
        ]
    }
}

impl ParamGroup for HeadParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.hidden.weight, &self.hidden.bias, &self.out.weight, &self.out.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }
}

impl EncoderParams {
    fn zeros(d: &ModelDims) -> Self {
        Self {
            patch_proj: Tensor::zeros(&[d.patch_len(), d.embed_dim]),
            pos_table: Tensor::zeros(&[d.num_patches, d.embed_dim]),
            mlp_in: Linear::zeros(d.embed_dim, d.hidden_dim()),
            mlp_out: Linear::zeros(d.hidden_dim(), d.embed_dim),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            patch_proj: reg(&self.patch_proj),
            pos_table: reg(&self.pos_table),
            w_in: reg(&self.mlp_in.weight),
            b_in: reg(&self.mlp_in.bias),
            w_out: reg(&self.mlp_out.weight),
            b_out: reg(&self.mlp_out.bias),
        }
    }
}

impl HeadParams {
    fn zeros(d: &ModelDims) -> Self {
        Self {
            hidden: Linear::zeros(d.embed_dim, d.embed_dim),
            out: Linear::zeros(d.embed_dim, d.proj_dim),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        HeadVars {
            w_hidden: reg(&self.hidden.weight),
            b_hidden: reg(&self.hidden.bias),
            w_out: reg(&self.out.weight),
            b_out: reg(&self.out.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub patch_proj: Var,
    pub pos_table: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl EncoderVars {
    pub fn all(&self) -> [Var; 6] {
        [self.patch_proj, self.pos_table, self.w_in, self.b_in, self.w_out, self.b_out]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_hidden: Var,
    pub b_hidden: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl HeadVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w_hidden, self.b_hidden, self.w_out, self.b_out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineParams {
    pub encoder: EncoderParams,
    pub evt_head: HeadParams,
    pub img_head: HeadParams,
}

impl ParamGroup for OnlineParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.evt_head.tensors());
        v.extend(self.img_head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.evt_head.tensors_mut());
        v.extend(self.img_head.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumParams {
    pub encoder: EncoderParams,
    pub evt_head: HeadParams,
}

impl ParamGroup for MomentumParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.evt_head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.evt_head.tensors_mut());
        v
    }
}

/// Everything a training run carries from step to step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub online: OnlineParams,
    pub momentum: MomentumParams,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl ModelState {
    fn zeros(dims: ModelDims) -> Self {
        let online = OnlineParams {
            encoder: EncoderParams::zeros(&dims),
            evt_head: HeadParams::zeros(&dims),
            img_head: HeadParams::zeros(&dims),
        };
        let momentum = MomentumParams {
            encoder: online.encoder.clone(),
            evt_head: online.evt_head.clone(),
        };
        let moments: Vec<Tensor> = online.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            dims,
            online,
            momentum,
            first_moment: moments.clone(),
            second_moment: moments,
            step: 0,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.online.tensors().iter().map(|t| t.len()).sum()
    }
}

fn xavier_fill(t: &mut Tensor, rng: &mut impl Rng) {
    let (fan_in, fan_out) = (t.rows(), t.cols());
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases, momentum
/// branch an exact copy, zero optimizer moments, step 0.
pub fn init_model(seed: u64, dims: ModelDims) -> Result<ModelState, ModelError> {
    dims.validate()?;
    let mut state = ModelState::zeros(dims);
    let mut rng = rng_from(seed, &[0x1417]);
    for t in state.online.tensors_mut() {
        if t.rank() == 2 {
            xavier_fill(t, &mut rng);
        }
    }
    state.momentum = MomentumParams {
        encoder: state.online.encoder.clone(),
        evt_head: state.online.evt_head.clone(),
    };
    Ok(state)
}

fn check_set(dims: &ModelDims, set: &PatchSet) -> Result<(), ModelError> {
    if set.patch_size != dims.patch_size || set.num_patches() != dims.num_patches {
        return Err(ModelError::GeometryMismatch(format!(
            "patch set with P={} L={} for model P={} L={}",
            set.patch_size,
            set.num_patches(),
            dims.patch_size,
            dims.num_patches
        )));
    }
    check_patches(dims, &set.patches)
}

fn check_patches(dims: &ModelDims, patches: &[Patch]) -> Result<(), ModelError> {
    if patches.is_empty() {
        return Err(ModelError::GeometryMismatch("empty patch set".into()));
    }
    for p in patches {
        if p.values.len() != dims.patch_len() || p.index >= dims.num_patches {
            return Err(ModelError::GeometryMismatch(format!(
                "patch {} with {} values (expected index < {} and {} values)",
                p.index,
                p.values.len(),
                dims.num_patches,
                dims.patch_len()
            )));
        }
    }
    Ok(())
}

/// Encodes each patch list to a row of a `[B, D]` matrix on `tape`.
pub fn encoder_forward_patches(
    tape: &mut Tape,
    enc: &EncoderVars,
    dims: &ModelDims,
    sets: &[&[Patch]],
) -> Result<Var, ModelError> {
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut x = Vec::with_capacity(total * dims.patch_len());
    let mut idx = Vec::with_capacity(total);
    let mut pool = vec![0.0; sets.len() * total];
    let mut offset = 0;
    for (b, patches) in sets.iter().enumerate() {
        check_patches(dims, patches)?;
        let w = 1.0 / patches.len() as f64;
        for p in patches.iter() {
            x.extend_from_slice(&p.values);
            idx.push(p.index);
            pool[b * total + offset] = w;
            offset += 1;
        }
    }
    let x = tape.constant(Tensor::matrix(total, dims.patch_len(), x));
    let pool = tape.constant(Tensor::matrix(sets.len(), total, pool));

    let tokens = tape.matmul(x, enc.patch_proj)?;
    let pos = tape.gather_rows(enc.pos_table, &idx)?;
    let h = tape.add(tokens, pos)?;
    let h = tape.matmul(h, enc.w_in)?;
    let h = tape.broadcast_add_row(h, enc.b_in)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, enc.w_out)?;
    let h = tape.broadcast_add_row(h, enc.b_out)?;
    Ok(tape.matmul(pool, h)?)
}

pub fn encoder_forward(
    tape: &mut Tape,
    enc: &EncoderVars,
    dims: &ModelDims,
    sets: &[&PatchSet],
) -> Result<Var, ModelError> {
    for s in sets {
        check_set(dims, s)?;
    }
    let lists: Vec<&[Patch]> = sets.iter().map(|s| s.patches.as_slice()).collect();
    encoder_forward_patches(tape, enc, dims, &lists)
}

/// `[B, D] → [B, E]`.
pub fn head_forward(tape: &mut Tape, head: &HeadVars, feats: Var) -> Result<Var, ModelError> {
    let h = tape.matmul(feats, head.w_hidden)?;
    let h = tape.broadcast_add_row(h, head.b_hidden)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, head.w_out)?;
    Ok(tape.broadcast_add_row(h, head.b_out)?)
}

/// Pooled features for a single patch set.
pub fn encode(params: &EncoderParams, dims: &ModelDims, x: &PatchSet) -> Result<Vec<f64>, ModelError> {
    check_set(dims, x)?;
    encode_patches(params, dims, &x.patches)
}

/// Like [`encode`] over a bare patch list, in whatever order it is given.
pub fn encode_patches(params: &EncoderParams, dims: &ModelDims, patches: &[Patch]) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::no_grad();
    let vars = params.register(&mut tape, false);
    let f = encoder_forward_patches(&mut tape, &vars, dims, &[patches])?;
    Ok(tape.value(f).data().to_vec())
}

/// Head output for each row of `feats` (`[B, D]`).
pub fn project_batch(head: &HeadParams, feats: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::no_grad();
    let vars = head.register(&mut tape, false);
    let f = tape.constant(feats.clone());
    let out = head_forward(&mut tape, &vars, f)?;
    Ok(tape.value(out).clone())
}

pub fn project(head: &HeadParams, feat: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(project_batch(head, &Tensor::matrix(1, feat.len(), feat.to_vec()))?.into_data())
}

/// `θ_m ← m·θ_m + (1−m)·θ_e`, evaluated as `m * tm + (1.0 - m) * te` per element.
pub fn ema_update(state: &mut ModelState, m: f64) {
    let online: Vec<&Tensor> = state
        .online
        .encoder
        .tensors()
        .into_iter()
        .chain(state.online.evt_head.tensors())
        .collect();
    for (tm, te) in state.momentum.tensors_mut().into_iter().zip(online) {
        for (a, &b) in tm.data_mut().iter_mut().zip(te.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
}

/// A unit-norm teacher vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbedding(Vec<f64>);

impl TeacherEmbedding {
    /// Accepts vectors within `1e-9` of unit norm as-is.
    pub fn new(v: Vec<f64>) -> Result<Self, ModelError> {
        let n = norm(&v);
        if (n - 1.0).abs() >= 1e-9 || !n.is_finite() {
            return Err(ModelError::NotUnitNorm(n));
        }
        Ok(Self(v))
    }

    /// Re-normalizes vectors within [`TEACHER_RENORM_TOL`] of unit norm and
    /// rejects everything else.
    pub fn from_raw(v: Vec<f64>) -> Result<Self, ModelError> {
        let n = norm(&v);
        if !((n - 1.0).abs() <= TEACHER_RENORM_TOL) {
            return Err(ModelError::NotUnitNorm(n));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn encode_tvec(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * v.len());
    out.extend_from_slice(TVEC_MAGIC);
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tvec(bytes: &[u8]) -> Result<Vec<f64>, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != TVEC_MAGIC {
        return Err(ModelError::BadMagic("TVEC"));
    }
    if bytes.len() < 8 {
        return Err(ModelError::Truncated("TVEC header".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 8 * dim {
        return Err(ModelError::Truncated(format!(
            "TVEC with dim {dim} has {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_teacher(path: impl AsRef<Path>) -> Result<TeacherEmbedding, ModelError> {
    TeacherEmbedding::from_raw(decode_tvec(&fs::read(path)?)?)
}

pub fn write_teacher(path: impl AsRef<Path>, y: &TeacherEmbedding) -> Result<(), ModelError> {
    fs::write(path, encode_tvec(y.as_slice()))?;
    Ok(())
}

fn checkpoint_tensors(state: &ModelState) -> Vec<&Tensor> {
    let mut v = state.online.tensors();
    v.extend(state.momentum.tensors());
    v.extend(state.first_moment.iter());
    v.extend(state.second_moment.iter());
    v
}

/// magic, version, four dims, step.
const EVCK_HEADER: usize = 4 + 4 + 16 + 8;

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let d = &state.dims;
    let tensors = checkpoint_tensors(state);
    let n: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(EVCK_HEADER + 8 * n);
    out.extend_from_slice(EVCK_MAGIC);
    out.extend_from_slice(&EVCK_VERSION.to_le_bytes());
    for v in [d.patch_size, d.num_patches, d.embed_dim, d.proj_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&state.step.to_le_bytes());
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != EVCK_MAGIC {
        return Err(ModelError::BadMagic("EVCK"));
    }
    if bytes.len() < EVCK_HEADER {
        return Err(ModelError::Truncated("EVCK header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != EVCK_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let dims = ModelDims {
        patch_size: u32_at(8) as usize,
        num_patches: u32_at(12) as usize,
        embed_dim: u32_at(16) as usize,
        proj_dim: u32_at(20) as usize,
    };
    dims.validate()?;
    let step = u64::from_le_bytes(bytes[24..32].try_into().unwrap());

    // Sizes from the header alone; guards against absurd dims before allocating.
    let p = dims.patch_len() as u128;
    let (l, dd, e, h) = (
        dims.num_patches as u128,
        dims.embed_dim as u128,
        dims.proj_dim as u128,
        dims.hidden_dim() as u128,
    );
    let enc = p * dd + l * dd + dd * h + h + h * dd + dd;
    let head = dd * dd + dd + dd * e + e;
    let expected = EVCK_HEADER as u128 + 8 * (3 * (enc + 2 * head) + enc + head);
    if expected != bytes.len() as u128 {
        return Err(ModelError::Truncated(format!(
            "EVCK for {dims:?} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }

    let mut state = ModelState::zeros(dims);
    state.step = step;
    let mut cursor = EVCK_HEADER;
    let mut fill = |t: &mut Tensor| {
        for x in t.data_mut() {
            *x = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
    };
    state.online.tensors_mut().into_iter().for_each(&mut fill);
    state.momentum.tensors_mut().into_iter().for_each(&mut fill);
    state.first_moment.iter_mut().for_each(&mut fill);
    state.second_moment.iter_mut().for_each(&mut fill);
    Ok(state)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_checkpoint(path: impl AsRef<Path>, state: &ModelState) -> Result<(), ModelError> {
    let path = path.as_ref();
    let tmp = path.with_extension("evck.tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
