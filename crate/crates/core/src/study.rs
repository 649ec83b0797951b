//! Matched comparison of the projection event loss against plain event
//! InfoNCE. Both arms share every setting and the seed; only the event
//! term differs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{event_loss_name, ConfigError, RunConfig};
use crate::eval::{collapse_metrics, embed, linear_probe, CollapseMetrics, EmbedOutput, EvalError};
use crate::event::load_manifest;
use crate::losses::EventLoss;
use crate::trainer::{pretrain, Dataset, TrainError, TrainMetrics};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("the study needs a labeled validation manifest")]
    MissingValidation,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub event_loss: EventLoss,
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    /// Collapse metrics of validation event-head outputs.
    pub evt_head: CollapseMetrics,
    /// Collapse metrics of validation encoder features.
    pub features: CollapseMetrics,
    /// Probe trained on training features, scored on validation features.
    pub probe_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub projection: ArmReport,
    pub vanilla: ArmReport,
}

impl StudyReport {
    pub fn lower_cosine(&self) -> bool {
        self.projection.evt_head.mean_pairwise_cos < self.vanilla.evt_head.mean_pairwise_cos
    }

    pub fn higher_rank(&self) -> bool {
        self.projection.evt_head.effective_rank > self.vanilla.evt_head.effective_rank
    }

    pub fn probe_wins(&self, floor: f64) -> bool {
        self.projection.probe_top1 >= floor && self.projection.probe_top1 > self.vanilla.probe_top1
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<11} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "event_loss", "evt_cos", "evt_rank", "evt_std", "feat_cos", "feat_rank", "probe"
        );
        for a in [&self.projection, &self.vanilla] {
            let _ = writeln!(
                s,
                "{:<11} {:>10.4} {:>10.3} {:>10.4} {:>10.4} {:>10.3} {:>8.4}",
                event_loss_name(a.event_loss),
                a.evt_head.mean_pairwise_cos,
                a.evt_head.effective_rank,
                a.evt_head.per_dim_std_min,
                a.features.mean_pairwise_cos,
                a.features.effective_rank,
                a.probe_top1
            );
        }
        s
    }
}

/// Pre-trains both arms under `out_dir/{projection,vanilla}` and evaluates them.
pub fn collapse_study(
    cfg: &RunConfig,
    out_dir: &Path,
    mut progress: impl FnMut(EventLoss, &TrainMetrics),
) -> Result<StudyReport, StudyError> {
    cfg.validate()?;
    let val_path = cfg.val_manifest.as_ref().ok_or(StudyError::MissingValidation)?;
    let e = cfg.model.proj_dim;
    let train = Dataset::load(&load_manifest(&cfg.manifest).map_err(TrainError::from)?, e)?;
    let val = Dataset::load(&load_manifest(val_path).map_err(TrainError::from)?, e)?;
    if train.labels.is_none() || val.labels.is_none() {
        return Err(StudyError::MissingValidation);
    }
    let (w, h) = (cfg.augment.out_width, cfg.augment.out_height);

    let mut arm = |loss: EventLoss| -> Result<ArmReport, StudyError> {
        let mut c = cfg.clone();
        c.loss.event_loss = loss;
        c.out_dir = out_dir.join(event_loss_name(loss));
        let out = pretrain(&c.pretrain_config()?, None, |m| progress(loss, m))?;
        let s = &out.state;
        let val_head = embed(s, &val, &c.view, w, h, EmbedOutput::EventHead)?;
        let val_feat = embed(s, &val, &c.view, w, h, EmbedOutput::Features)?;
        let train_feat = embed(s, &train, &c.view, w, h, EmbedOutput::Features)?;
        Ok(ArmReport {
            event_loss: loss,
            checkpoint: out.checkpoint,
            final_loss: out.last.map_or(f64::NAN, |m| m.l_total),
            evt_head: collapse_metrics(&val_head)?,
            features: collapse_metrics(&val_feat)?,
            probe_top1: linear_probe(&train_feat, &val_feat, &c.probe)?,
        })
    };
    let projection = arm(EventLoss::Projection)?;
    let vanilla = arm(EventLoss::Vanilla)?;
    Ok(StudyReport { projection, vanilla })
}
