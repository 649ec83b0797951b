//! Finite-difference verification of every loss and of the full model.
//!
//! Each entry draws seeded random instances (`B=4`, `E=8`, `D=16`), runs
//! [`check_gradients`] and keeps the worst relative error. Keys and teacher
//! rows are constants, as in training. Model instances whose ReLU inputs
//! come within [`KINK_MARGIN`] of zero are redrawn: central differences are
//! meaningless across a kink.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::grad::{check_gradients, GradError, Tape, Tensor, Var};
use crate::losses::{
    info_nce, l_evt, l_kl, l_rgb, pairwise_scores, total_loss, BatchEmbeddings, KeyProjection, LossConfig, LossError,
};
use crate::model::{
    encoder_forward_patches, head_forward, init_model, EncoderVars, HeadVars, ModelDims, ModelError, ParamGroup,
};
use crate::rng::{rng_from, SeededRng};
use crate::viewgen::Patch;

pub const SUITE_BATCH: usize = 4;
pub const SUITE_PROJ_DIM: usize = 8;
pub const SUITE_EMBED_DIM: usize = 16;
pub const FD_STEP: f64 = 1e-6;
pub const KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
    pub coordinates: usize,
}

fn lift_loss(e: LossError) -> GradError {
    match e {
        LossError::Grad(g) => g,
        other => GradError::DomainError(other.to_string()),
    }
}

fn lift_model(e: ModelError) -> GradError {
    match e {
        ModelError::Grad(g) => g,
        other => GradError::DomainError(other.to_string()),
    }
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn unit_rows(rng: &mut SeededRng, b: usize, e: usize) -> Tensor {
    let mut t = normal(rng, &[b, e]);
    for row in t.data_mut().chunks_mut(e) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// A batch fixture whose differentiable members are `inputs`.
struct LossInstance {
    k: Tensor,
    y: Tensor,
    q_evt: Tensor,
    q_img: Tensor,
}

impl LossInstance {
    fn draw(rng: &mut SeededRng) -> Self {
        let (b, e) = (SUITE_BATCH, SUITE_PROJ_DIM);
        Self {
            q_evt: normal(rng, &[b, e]),
            k: normal(rng, &[b, e]),
            q_img: normal(rng, &[b, e]),
            y: unit_rows(rng, b, e),
        }
    }

    fn batch(&self, t: &mut Tape, q_evt: Option<Var>, q_img: Option<Var>) -> Result<BatchEmbeddings, GradError> {
        let q_evt = q_evt.unwrap_or_else(|| t.constant(self.q_evt.clone()));
        let q_img = q_img.unwrap_or_else(|| t.constant(self.q_img.clone()));
        let k = t.constant(self.k.clone());
        let y = t.constant(self.y.clone());
        BatchEmbeddings::new(t, q_evt, k, q_img, y).map_err(lift_loss)
    }
}

struct ModelInstance {
    dims: ModelDims,
    params: Vec<Tensor>,
    sets: Vec<Vec<Patch>>,
    loss: LossInstance,
}

fn suite_dims() -> ModelDims {
    ModelDims {
        patch_size: 2,
        num_patches: 4,
        embed_dim: SUITE_EMBED_DIM,
        proj_dim: SUITE_PROJ_DIM,
    }
}

/// `vars` in [`ParamGroup`] order: encoder, event head, image head.
fn model_loss(t: &mut Tape, vars: &[Var], inst: &ModelInstance) -> Result<Var, GradError> {
    let enc = EncoderVars {
        patch_proj: vars[0],
        pos_table: vars[1],
        w_in: vars[2],
        b_in: vars[3],
        w_out: vars[4],
        b_out: vars[5],
    };
    let head = |o: usize| HeadVars {
        w_hidden: vars[o],
        b_hidden: vars[o + 1],
        w_out: vars[o + 2],
        b_out: vars[o + 3],
    };
    let sets: Vec<&[Patch]> = inst.sets.iter().map(|s| s.as_slice()).collect();
    let f = encoder_forward_patches(t, &enc, &inst.dims, &sets).map_err(lift_model)?;
    let q_evt = head_forward(t, &head(6), f).map_err(lift_model)?;
    let q_img = head_forward(t, &head(10), f).map_err(lift_model)?;
    let batch = inst.loss.batch(t, Some(q_evt), Some(q_img))?;
    Ok(total_loss(t, &batch, &LossConfig::default()).map_err(lift_loss)?.total)
}

impl ModelInstance {
    fn draw(rng: &mut SeededRng) -> Self {
        let dims = suite_dims();
        let state = init_model(rng.random(), dims).unwrap();
        // Non-zero biases so no unit sits exactly at a kink.
        let params: Vec<Tensor> = state
            .online
            .tensors()
            .into_iter()
            .map(|t| {
                if t.rank() == 1 {
                    normal(rng, t.shape()).map(|v| 0.1 * v)
                } else {
                    t.clone()
                }
            })
            .collect();
        let sets = (0..SUITE_BATCH)
            .map(|_| {
                let mut idx = sample(rng, dims.num_patches, 2).into_vec();
                idx.sort_unstable();
                idx.into_iter()
                    .map(|index| Patch {
                        index,
                        values: (0..dims.patch_len()).map(|_| rng.random::<f64>()).collect(),
                    })
                    .collect()
            })
            .collect();
        Self {
            dims,
            params,
            sets,
            loss: LossInstance::draw(rng),
        }
    }

    fn relu_margin(&self) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| t.param(p.clone())).collect();
        match model_loss(&mut t, &vars, self) {
            Ok(_) => t.relu_margin().unwrap_or(f64::INFINITY),
            Err(_) => 0.0,
        }
    }
}

fn worst(
    name: &'static str,
    instances: usize,
    mut run: impl FnMut(usize) -> Result<(f64, usize), GradError>,
) -> Result<SuiteEntry, GradError> {
    let mut entry = SuiteEntry {
        name,
        max_rel_error: 0.0,
        instances,
        coordinates: 0,
    };
    for i in 0..instances {
        let (err, coords) = run(i)?;
        entry.max_rel_error = entry.max_rel_error.max(err);
        entry.coordinates += coords;
    }
    Ok(entry)
}

/// Runs every check over `instances` seeded instances.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>, GradError> {
    let h = FD_STEP;
    let tau = LossConfig::default().tau;
    let rng = |tag: u64, i: usize| rng_from(seed, &[tag, i as u64]);
    let mut out = Vec::new();

    out.push(worst("info_nce", instances, |i| {
        let mut r = rng(1, i);
        let q = normal(&mut r, &[SUITE_PROJ_DIM]);
        let keys = normal(&mut r, &[SUITE_BATCH, SUITE_PROJ_DIM]);
        let pos = r.random_range(0..SUITE_BATCH);
        let c = check_gradients(
            |t, v| info_nce(t, v[0], v[1], pos, tau, true).map_err(lift_loss),
            &[q, keys],
            h,
        )?;
        Ok((c.max_rel_error, c.coordinates))
    })?);

    for (name, mode) in [("l_evt", KeyProjection::OwnTeacher), ("l_evt_query", KeyProjection::QueryTeacher)] {
        out.push(worst(name, instances, |i| {
            let inst = LossInstance::draw(&mut rng(2, i));
            let c = check_gradients(
                |t, v| {
                    let b = inst.batch(t, Some(v[0]), None)?;
                    l_evt(t, &b, tau, mode).map_err(lift_loss)
                },
                &[inst.q_evt.clone()],
                h,
            )?;
            Ok((c.max_rel_error, c.coordinates))
        })?);
    }

    out.push(worst("l_rgb", instances, |i| {
        let inst = LossInstance::draw(&mut rng(3, i));
        let c = check_gradients(
            |t, v| {
                let b = inst.batch(t, None, Some(v[0]))?;
                l_rgb(t, &b, tau, true).map_err(lift_loss)
            },
            &[inst.q_img.clone()],
            h,
        )?;
        Ok((c.max_rel_error, c.coordinates))
    })?);

    out.push(worst("l_kl", instances, |i| {
        let inst = LossInstance::draw(&mut rng(4, i));
        let c = check_gradients(
            |t, v| {
                let sq = pairwise_scores(t, v[0], tau).map_err(lift_loss)?;
                let y = t.constant(inst.y.clone());
                let sy = pairwise_scores(t, y, tau).map_err(lift_loss)?;
                l_kl(t, sq, sy).map_err(lift_loss)
            },
            &[inst.q_img.clone()],
            h,
        )?;
        Ok((c.max_rel_error, c.coordinates))
    })?);

    out.push(worst("l_total", instances, |i| {
        let inst = LossInstance::draw(&mut rng(5, i));
        let c = check_gradients(
            |t, v| {
                let b = inst.batch(t, Some(v[0]), Some(v[1]))?;
                Ok(total_loss(t, &b, &LossConfig::default()).map_err(lift_loss)?.total)
            },
            &[inst.q_evt.clone(), inst.q_img.clone()],
            h,
        )?;
        Ok((c.max_rel_error, c.coordinates))
    })?);

    out.push(worst("encoder_composite", instances, |i| {
        let mut attempt = 0u64;
        let inst = loop {
            let inst = ModelInstance::draw(&mut rng_from(seed, &[6, i as u64, attempt]));
            if inst.relu_margin() > KINK_MARGIN {
                break inst;
            }
            attempt += 1;
        };
        let c = check_gradients(|t, v| model_loss(t, v, &inst), &inst.params, h)?;
        Ok((c.max_rel_error, c.coordinates))
    })?);

    Ok(out)
}
