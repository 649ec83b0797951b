//! Run configuration files.
//!
//! ```text
//! # comment
//! [data]
//! manifest = data/train/manifest.tsv
//! [optim]
//! steps = 2000
//! ```
//!
//! Every key is optional and falls back to [`RunConfig::default`]; unknown
//! sections and keys are errors. Relative paths are resolved against the
//! directory holding the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::eval::ProbeConfig;
use crate::losses::{EventLoss, KeyProjection, LossConfig};
use crate::model::ModelDims;
use crate::synth::SynthConfig;
use crate::trainer::{OptimConfig, PretrainConfig, TrainConfig};
use crate::viewgen::ViewConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key} = {value}: {reason}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub model: ModelSection,
    pub view: ViewConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    /// The desk-scale setup: 64×64 views cut into 8×8 patches, a quarter of
    /// them kept per view, D=64, E=32, batches of 32.
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/train/manifest.tsv"),
            val_manifest: Some(PathBuf::from("data/val/manifest.tsv")),
            model: ModelSection {
                patch_size: 8,
                embed_dim: 64,
                proj_dim: 32,
            },
            view: ViewConfig {
                patch_size: 8,
                patches_per_view: 16,
                clip: 10,
            },
            augment: AugmentConfig {
                out_width: 64,
                out_height: 64,
                ..AugmentConfig::default()
            },
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model_dims(&self) -> Result<ModelDims, ConfigError> {
        let p = self.model.patch_size;
        let (w, h) = (self.augment.out_width as usize, self.augment.out_height as usize);
        if p == 0 || w % p != 0 || h % p != 0 {
            return Err(ConfigError::Invalid(format!("{w}x{h} views do not split into {p}x{p} patches")));
        }
        Ok(ModelDims {
            patch_size: p,
            num_patches: (w / p) * (h / p),
            embed_dim: self.model.embed_dim,
            proj_dim: self.model.proj_dim,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if self.view.patch_size != self.model.patch_size {
            return Err(ConfigError::Invalid(format!(
                "[view] patch_size {} differs from [model] patch_size {}",
                self.view.patch_size, self.model.patch_size
            )));
        }
        let dims = self.model_dims()?;
        dims.validate().map_err(|e| invalid(&e))?;
        if self.view.patches_per_view == 0 || self.view.patches_per_view > dims.num_patches {
            return Err(ConfigError::Invalid(format!(
                "patches_per_view {} must lie in 1..={}",
                self.view.patches_per_view, dims.num_patches
            )));
        }
        if self.view.clip == 0 {
            return Err(ConfigError::Invalid("clip must be >= 1".into()));
        }
        self.augment.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        self.optim.validate().map_err(|e| invalid(&e))?;
        self.synth.validate().map_err(|e| invalid(&e))?;
        if self.probe.epochs == 0 || !(self.probe.lr > 0.0 && self.probe.lr.is_finite()) {
            return Err(ConfigError::Invalid("probe epochs and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment.clone(),
            view: self.view.clone(),
            loss: self.loss.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, ConfigError> {
        self.validate()?;
        Ok(PretrainConfig {
            manifest: self.manifest.clone(),
            dims: self.model_dims()?,
            train: self.train_config(),
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        })
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value.trim());
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let ini = Ini::load_from_str_noescape(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut c = RunConfig::default();
    c.manifest = resolve(base, &c.manifest.to_string_lossy());
    c.val_manifest = c.val_manifest.map(|p| resolve(base, &p.to_string_lossy()));
    c.out_dir = resolve(base, &c.out_dir.to_string_lossy());

    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(ConfigError::UnknownKey {
                    section: String::new(),
                    key: k.into(),
                });
            }
            continue;
        };
        for (key, v) in props.iter() {
            let s = section;
            let unknown = || ConfigError::UnknownKey {
                section: s.into(),
                key: key.into(),
            };
            match section {
                "data" => match key {
                    "manifest" => c.manifest = resolve(base, v),
                    "val_manifest" => {
                        c.val_manifest = (!v.trim().is_empty()).then(|| resolve(base, v));
                    }
                    _ => return Err(unknown()),
                },
                "model" => match key {
                    "patch_size" => c.model.patch_size = parse(s, key, v)?,
                    "embed_dim" => c.model.embed_dim = parse(s, key, v)?,
                    "proj_dim" => c.model.proj_dim = parse(s, key, v)?,
                    _ => return Err(unknown()),
                },
                "view" => match key {
                    "patch_size" => c.view.patch_size = parse(s, key, v)?,
                    "patches_per_view" => c.view.patches_per_view = parse(s, key, v)?,
                    "clip" => c.view.clip = parse(s, key, v)?,
                    _ => return Err(unknown()),
                },
                "augment" => {
                    let a = &mut c.augment;
                    match key {
                        "crop_scale_min" => a.crop_scale_min = parse(s, key, v)?,
                        "crop_scale_max" => a.crop_scale_max = parse(s, key, v)?,
                        "crop_aspect_min" => a.crop_aspect_min = parse(s, key, v)?,
                        "crop_aspect_max" => a.crop_aspect_max = parse(s, key, v)?,
                        "hflip_prob" => a.hflip_prob = parse(s, key, v)?,
                        "polarity_flip_prob" => a.polarity_flip_prob = parse(s, key, v)?,
                        "drop_ratio_max" => a.drop_ratio_max = parse(s, key, v)?,
                        "noise_rate" => a.noise_rate = parse(s, key, v)?,
                        "window_fraction" => a.window_fraction = parse(s, key, v)?,
                        "out_width" => a.out_width = parse(s, key, v)?,
                        "out_height" => a.out_height = parse(s, key, v)?,
                        _ => return Err(unknown()),
                    }
                }
                "loss" => match key {
                    "tau" => c.loss.tau = parse(s, key, v)?,
                    "lambda1" => c.loss.lambda1 = parse(s, key, v)?,
                    "normalize_img" => c.loss.normalize_img = parse(s, key, v)?,
                    "key_projection_mode" => {
                        c.loss.key_projection = match v.trim() {
                            "own" => KeyProjection::OwnTeacher,
                            "query" => KeyProjection::QueryTeacher,
                            _ => return Err(bad_choice(s, key, v, "own|query")),
                        }
                    }
                    "event_loss" => c.loss.event_loss = parse_event_loss(v).ok_or_else(|| bad_choice(s, key, v, "projection|vanilla"))?,
                    _ => return Err(unknown()),
                },
                "optim" => {
                    let o = &mut c.optim;
                    match key {
                        "lr" => o.lr = parse(s, key, v)?,
                        "beta1" => o.beta1 = parse(s, key, v)?,
                        "beta2" => o.beta2 = parse(s, key, v)?,
                        "eps" => o.eps = parse(s, key, v)?,
                        "weight_decay" => o.weight_decay = parse(s, key, v)?,
                        "steps" => o.steps = parse(s, key, v)?,
                        "batch_size" => o.batch_size = parse(s, key, v)?,
                        "ema_m" => o.ema_m = parse(s, key, v)?,
                        "warmup_steps" => o.warmup_steps = parse(s, key, v)?,
                        "checkpoint_every" => o.checkpoint_every = parse(s, key, v)?,
                        _ => return Err(unknown()),
                    }
                }
                "run" => match key {
                    "seed" => c.seed = parse(s, key, v)?,
                    "out_dir" => c.out_dir = resolve(base, v),
                    _ => return Err(unknown()),
                },
                "synth" => {
                    let y = &mut c.synth;
                    match key {
                        "classes" => y.classes = parse(s, key, v)?,
                        "samples_per_class" => y.samples_per_class = parse(s, key, v)?,
                        "val_samples_per_class" => y.val_samples_per_class = parse(s, key, v)?,
                        "width" => y.width = parse(s, key, v)?,
                        "height" => y.height = parse(s, key, v)?,
                        "events_per_sample" => y.events_per_sample = parse(s, key, v)?,
                        "teacher_noise_sigma" => y.teacher_noise_sigma = parse(s, key, v)?,
                        "duration_us" => y.duration_us = parse(s, key, v)?,
                        "teacher_dim" => y.teacher_dim = parse(s, key, v)?,
                        "seed" => y.seed = parse(s, key, v)?,
                        _ => return Err(unknown()),
                    }
                }
                "eval" => match key {
                    "probe_epochs" => c.probe.epochs = parse(s, key, v)?,
                    "probe_lr" => c.probe.lr = parse(s, key, v)?,
                    _ => return Err(unknown()),
                },
                other => return Err(ConfigError::UnknownSection(other.into())),
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn parse_event_loss(v: &str) -> Option<EventLoss> {
    match v.trim() {
        "projection" => Some(EventLoss::Projection),
        "vanilla" => Some(EventLoss::Vanilla),
        _ => None,
    }
}

fn bad_choice(section: &str, key: &str, value: &str, choices: &str) -> ConfigError {
    ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
        reason: format!("expected one of {choices}"),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Every setting, in a form [`parse_config`] reads back to an equal value.
/// Paths are written as stored (absolute after loading).
pub fn format_config(c: &RunConfig) -> String {
    let mut s = String::new();
    let a = &c.augment;
    let o = &c.optim;
    let y = &c.synth;
    let _ = writeln!(s, "[data]\nmanifest = {}", c.manifest.display());
    let _ = writeln!(
        s,
        "val_manifest = {}",
        c.val_manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    );
    let _ = writeln!(
        s,
        "\n[model]\npatch_size = {}\nembed_dim = {}\nproj_dim = {}",
        c.model.patch_size, c.model.embed_dim, c.model.proj_dim
    );
    let _ = writeln!(
        s,
        "\n[view]\npatch_size = {}\npatches_per_view = {}\nclip = {}",
        c.view.patch_size, c.view.patches_per_view, c.view.clip
    );
    let _ = writeln!(
        s,
        "\n[augment]\ncrop_scale_min = {}\ncrop_scale_max = {}\ncrop_aspect_min = {}\ncrop_aspect_max = {}\nhflip_prob = {}\npolarity_flip_prob = {}\ndrop_ratio_max = {}\nnoise_rate = {}\nwindow_fraction = {}\nout_width = {}\nout_height = {}",
        a.crop_scale_min,
        a.crop_scale_max,
        a.crop_aspect_min,
        a.crop_aspect_max,
        a.hflip_prob,
        a.polarity_flip_prob,
        a.drop_ratio_max,
        a.noise_rate,
        a.window_fraction,
        a.out_width,
        a.out_height
    );
    let _ = writeln!(
        s,
        "\n[loss]\ntau = {}\nlambda1 = {}\nkey_projection_mode = {}\nevent_loss = {}\nnormalize_img = {}",
        c.loss.tau,
        c.loss.lambda1,
        match c.loss.key_projection {
            KeyProjection::OwnTeacher => "own",
            KeyProjection::QueryTeacher => "query",
        },
        event_loss_name(c.loss.event_loss),
        c.loss.normalize_img
    );
    let _ = writeln!(
        s,
        "\n[optim]\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nsteps = {}\nbatch_size = {}\nema_m = {}\nwarmup_steps = {}\ncheckpoint_every = {}",
        o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.steps, o.batch_size, o.ema_m, o.warmup_steps, o.checkpoint_every
    );
    let _ = writeln!(s, "\n[run]\nseed = {}\nout_dir = {}", c.seed, c.out_dir.display());
    let _ = writeln!(
        s,
        "\n[synth]\nclasses = {}\nsamples_per_class = {}\nval_samples_per_class = {}\nwidth = {}\nheight = {}\nevents_per_sample = {}\nteacher_noise_sigma = {}\nduration_us = {}\nteacher_dim = {}\nseed = {}",
        y.classes,
        y.samples_per_class,
        y.val_samples_per_class,
        y.width,
        y.height,
        y.events_per_sample,
        y.teacher_noise_sigma,
        y.duration_us,
        y.teacher_dim,
        y.seed
    );
    let _ = writeln!(s, "\n[eval]\nprobe_epochs = {}\nprobe_lr = {}", c.probe.epochs, c.probe.lr);
    s
}

pub fn event_loss_name(e: EventLoss) -> &'static str {
    match e {
        EventLoss::Projection => "projection",
        EventLoss::Vanilla => "vanilla",
    }
}
