//! Synthetic paired data: moving-bar event streams whose class is the bar
//! orientation, plus noisy one-hot teacher embeddings.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::event::{
    format_manifest, write_evt1, DatasetManifest, Event, EventError, EventStream, ManifestEntry, Polarity,
};
use crate::model::{write_teacher, ModelError, TeacherEmbedding};
use crate::rng::{derive_seed, rng_from};

const SAMPLE_STREAM: u64 = 0x5e7;
const VAL_STREAM: u64 = 0x7a1;

/// Bar thickness between the leading and trailing edge, in pixels.
const BAR_WIDTH: f64 = 4.0;
/// Distance the bar travels during one sample, in pixels.
const TRAVEL: f64 = 12.0;
/// Standard deviation of per-event position jitter, in pixels.
const JITTER: f64 = 0.75;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Per-class size of the held-out split written next to the training set.
    pub val_samples_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub events_per_sample: usize,
    pub teacher_noise_sigma: f64,
    pub duration_us: u32,
    pub teacher_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 128,
            val_samples_per_class: 32,
            width: 64,
            height: 64,
            events_per_sample: 4000,
            teacher_noise_sigma: 0.3,
            duration_us: 100_000,
            teacher_dim: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.samples_per_class == 0 || self.events_per_sample == 0 || self.duration_us == 0 {
            return bad("sample, event and duration counts must be positive".into());
        }
        if self.width == 0 || self.height == 0 || self.width > 1 << 16 || self.height > 1 << 16 {
            return bad(format!("sensor {}x{} out of range", self.width, self.height));
        }
        if !(self.teacher_noise_sigma >= 0.0 && self.teacher_noise_sigma.is_finite()) {
            return bad(format!("teacher_noise_sigma must be finite and >= 0, got {}", self.teacher_noise_sigma));
        }
        if self.teacher_dim < self.classes {
            return bad(format!(
                "teacher_dim {} is smaller than the class count {}",
                self.teacher_dim, self.classes
            ));
        }
        Ok(())
    }

    /// The configuration for the held-out split: same geometry, derived seed.
    pub fn validation(&self) -> Self {
        Self {
            samples_per_class: self.val_samples_per_class,
            seed: derive_seed(self.seed, &[VAL_STREAM]),
            ..self.clone()
        }
    }

    pub fn len(&self) -> usize {
        self.classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A bar at angle `k·π/K` translating along its normal.
///
/// Events sit on the leading edge (positive) or trailing edge (negative)
/// at the bar's position at their timestamp. Positions that fall outside
/// the sensor are redrawn, so exactly `events_per_sample` events come out.
pub fn gen_stream(class: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> EventStream {
    assert!(class < cfg.classes, "class {class} out of range");
    let theta = class as f64 * PI / cfg.classes as f64;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let axis = (theta.cos(), theta.sin());
    let normal = (-theta.sin(), theta.cos());
    let (cx, cy) = (w / 2.0, h / 2.0);
    // Offsets along the normal for which the bar line crosses the frame.
    let reach = (w * normal.0.abs() + h * normal.1.abs()) / 2.0;
    let half_len = (w * w + h * h).sqrt() / 2.0;
    let lo = -0.5 * reach;
    let hi = (0.5 * reach - TRAVEL).max(lo);
    let start = rng.random_range(lo..=hi);
    let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let (start, end) = if direction > 0.0 { (start, start + TRAVEL) } else { (start + TRAVEL, start) };

    let mut ts: Vec<u32> = (0..cfg.events_per_sample)
        .map(|_| rng.random_range(0..cfg.duration_us))
        .collect();
    ts.sort_unstable();

    let events = ts
        .into_iter()
        .map(|t| {
            let s = start + (end - start) * t as f64 / cfg.duration_us as f64;
            let leading = rng.random::<bool>();
            let edge = s + direction * if leading { BAR_WIDTH / 2.0 } else { -BAR_WIDTH / 2.0 };
            let polarity = if leading { Polarity::Positive } else { Polarity::Negative };
            loop {
                let a = rng.random_range(-half_len..half_len);
                let j: f64 = rng.sample::<f64, _>(StandardNormal) * JITTER;
                let x = cx + a * axis.0 + (edge + j) * normal.0;
                let y = cy + a * axis.1 + (edge + j) * normal.1;
                if x >= 0.0 && y >= 0.0 && x < w && y < h {
                    break Event::new(x as u16, y as u16, t, polarity);
                }
            }
        })
        .collect();
    EventStream::new(cfg.width, cfg.height, events).expect("generated events are in bounds and sorted")
}

/// `normalize(e_k + σ·g)` in `teacher_dim` dimensions.
pub fn gen_teacher(class: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> TeacherEmbedding {
    assert!(class < cfg.teacher_dim, "class {class} exceeds teacher dim");
    let mut v: Vec<f64> = (0..cfg.teacher_dim)
        .map(|_| cfg.teacher_noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    v[class] += 1.0;
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    TeacherEmbedding::from_raw(v).expect("normalized above")
}

/// One sample: class `i / samples_per_class`, own derived generator.
pub fn gen_sample(index: usize, cfg: &SynthConfig) -> (usize, EventStream, TeacherEmbedding) {
    let class = index / cfg.samples_per_class;
    let mut rng = rng_from(cfg.seed, &[SAMPLE_STREAM, index as u64]);
    let stream = gen_stream(class, cfg, &mut rng);
    let teacher = gen_teacher(class, cfg, &mut rng);
    (class, stream, teacher)
}

/// Writes `events/`, `teachers/` and a labeled `manifest.tsv` under `out_dir`
/// and returns the manifest path.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join("events"))?;
    fs::create_dir_all(out_dir.join("teachers"))?;
    let entries = (0..cfg.len())
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry, SynthError> {
            let (class, stream, teacher) = gen_sample(i, cfg);
            let events = out_dir.join(format!("events/sample_{i:05}.evt1"));
            let teacher_path = out_dir.join(format!("teachers/sample_{i:05}.tvec"));
            write_evt1(&events, &stream)?;
            write_teacher(&teacher_path, &teacher)?;
            Ok(ManifestEntry {
                events,
                teacher: teacher_path,
                label: Some(class as u32),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest { entries };
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, format_manifest(&manifest, out_dir))?;
    Ok(path)
}

/// Training split in `out_dir/train`, held-out split in `out_dir/val`.
pub fn gen_splits(cfg: &SynthConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), SynthError> {
    let train = gen_dataset(cfg, &out_dir.join("train"))?;
    let val = gen_dataset(&cfg.validation(), &out_dir.join("val"))?;
    Ok((train, val))
}
