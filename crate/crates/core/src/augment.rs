//! Augmentations applied to raw event streams, before any rasterization.
//!
//! Each operation consumes random draws from the supplied generator in a
//! fixed order, so a view is a pure function of `(stream, config, seed)`.
//! [`augment_view`] draws, in order: the temporal window offset, up to eight
//! crop proposals (four draws each), the horizontal flip decision, the
//! polarity flip decision, the drop ratio, one keep/drop draw per event, and
//! finally the noise count and per-noise-event coordinates.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::event::{Event, EventError, EventStream, Polarity};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
    #[error("degenerate crop box {width}x{height}")]
    DegenerateBox { width: f64, height: f64 },
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub crop_aspect_min: f64,
    pub crop_aspect_max: f64,
    pub hflip_prob: f64,
    pub polarity_flip_prob: f64,
    /// The per-view drop ratio is drawn uniformly from `[0, drop_ratio_max]`.
    pub drop_ratio_max: f64,
    /// Expected spurious events per output pixel.
    pub noise_rate: f64,
    pub window_fraction: f64,
    pub out_width: u32,
    pub out_height: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_min: 0.2,
            crop_scale_max: 1.0,
            crop_aspect_min: 3.0 / 4.0,
            crop_aspect_max: 4.0 / 3.0,
            hflip_prob: 0.5,
            polarity_flip_prob: 0.1,
            drop_ratio_max: 0.3,
            noise_rate: 0.05,
            window_fraction: 0.5,
            out_width: 224,
            out_height: 224,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which [`augment_view`] only re-bases timestamps.
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            crop_aspect_min: 1.0,
            crop_aspect_max: 1.0,
            hflip_prob: 0.0,
            polarity_flip_prob: 0.0,
            drop_ratio_max: 0.0,
            noise_rate: 0.0,
            window_fraction: 1.0,
            out_width: width,
            out_height: height,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: &str| Err(AugmentError::InvalidConfig(msg.to_string()));
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !(frac(self.crop_scale_min) && frac(self.crop_scale_max)) {
            return bad("crop scales must lie in (0, 1]");
        }
        if self.crop_scale_min > self.crop_scale_max {
            return bad("crop_scale_min exceeds crop_scale_max");
        }
        if !(self.crop_aspect_min > 0.0 && self.crop_aspect_max.is_finite()) {
            return bad("crop aspects must be positive and finite");
        }
        if self.crop_aspect_min > self.crop_aspect_max {
            return bad("crop_aspect_min exceeds crop_aspect_max");
        }
        if !prob(self.hflip_prob) || !prob(self.polarity_flip_prob) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.drop_ratio_max) {
            return bad("drop_ratio_max must lie in [0, 1)");
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return bad("noise_rate must be finite and non-negative");
        }
        if !frac(self.window_fraction) {
            return bad("window_fraction must lie in (0, 1]");
        }
        if self.out_width == 0 || self.out_height == 0 || self.out_width > 65536 || self.out_height > 65536
        {
            return bad("output geometry must be within 1..=65536");
        }
        Ok(())
    }
}

/// Keeps the events whose offset from the first event lies in
/// `[start, start + fraction * T]`, re-basing the first kept event to `t = 0`.
pub fn temporal_window_at(stream: &EventStream, fraction: f64, start: f64) -> EventStream {
    let events = stream.events();
    let Some(first) = events.first() else {
        return stream.clone();
    };
    let span = fraction * f64::from(stream.duration());
    let end = start + span;
    let kept: Vec<Event> = events
        .iter()
        .filter(|e| {
            let off = f64::from(e.t - first.t);
            off >= start && off <= end
        })
        .copied()
        .collect();
    rebase(stream.width(), stream.height(), kept)
}

fn rebase(width: u32, height: u32, mut events: Vec<Event>) -> EventStream {
    if let Some(t0) = events.first().map(|e| e.t) {
        for e in &mut events {
            e.t -= t0;
        }
    }
    EventStream::new(width, height, events).expect("re-basing preserves stream invariants")
}

/// Uniformly places a window of `fraction` of the stream duration.
pub fn temporal_window(stream: &EventStream, fraction: f64, rng: &mut impl Rng) -> EventStream {
    let u: f64 = rng.random();
    let slack = (1.0 - fraction).max(0.0) * f64::from(stream.duration());
    temporal_window_at(stream, fraction, u * slack)
}

/// A real-valued box in sensor pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            width: f64::from(width),
            height: f64::from(height),
        }
    }
}

/// Discards events outside `bx` and remaps the rest onto an
/// `out_width × out_height` sensor with `floor(v + 0.5)` rounding,
/// clamped to the output range.
pub fn crop_to_box(
    stream: &EventStream,
    bx: CropBox,
    out_width: u32,
    out_height: u32,
) -> Result<EventStream, AugmentError> {
    if !(bx.width >= 1.0 && bx.height >= 1.0) {
        return Err(AugmentError::DegenerateBox {
            width: bx.width,
            height: bx.height,
        });
    }
    let sx = f64::from(out_width) / bx.width;
    let sy = f64::from(out_height) / bx.height;
    let max_x = f64::from(out_width - 1);
    let max_y = f64::from(out_height - 1);
    let events = stream
        .events()
        .iter()
        .filter_map(|e| {
            let (x, y) = (f64::from(e.x), f64::from(e.y));
            if x < bx.x0 || x >= bx.x0 + bx.width || y < bx.y0 || y >= bx.y0 + bx.height {
                return None;
            }
            let nx = ((x - bx.x0) * sx + 0.5).floor().clamp(0.0, max_x);
            let ny = ((y - bx.y0) * sy + 0.5).floor().clamp(0.0, max_y);
            Some(Event::new(nx as u16, ny as u16, e.t, e.polarity))
        })
        .collect();
    Ok(EventStream::new(out_width, out_height, events)?)
}

const CROP_ATTEMPTS: usize = 8;

/// Samples a box with area fraction in `[crop_scale_min, crop_scale_max]`
/// and log-uniform aspect in `[crop_aspect_min, crop_aspect_max]`. Falls
/// back to the full frame when eight proposals fail to fit.
pub fn sample_crop_box(width: u32, height: u32, cfg: &AugmentConfig, rng: &mut impl Rng) -> CropBox {
    let (w, h) = (f64::from(width), f64::from(height));
    let area = w * h;
    let (log_lo, log_hi) = (cfg.crop_aspect_min.ln(), cfg.crop_aspect_max.ln());
    for _ in 0..CROP_ATTEMPTS {
        let (u_scale, u_aspect, u_x, u_y): (f64, f64, f64, f64) =
            (rng.random(), rng.random(), rng.random(), rng.random());
        let scale = cfg.crop_scale_min + u_scale * (cfg.crop_scale_max - cfg.crop_scale_min);
        let aspect = (log_lo + u_aspect * (log_hi - log_lo)).exp();
        let bw = (scale * area * aspect).sqrt();
        let bh = (scale * area / aspect).sqrt();
        if bw >= 1.0 && bh >= 1.0 && bw <= w && bh <= h {
            return CropBox {
                x0: u_x * (w - bw),
                y0: u_y * (h - bh),
                width: bw,
                height: bh,
            };
        }
    }
    CropBox::full(width, height)
}

pub fn random_resized_crop(
    stream: &EventStream,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<EventStream, AugmentError> {
    let bx = sample_crop_box(stream.width(), stream.height(), cfg, rng);
    crop_to_box(stream, bx, cfg.out_width, cfg.out_height)
}

fn bernoulli(prob: f64, rng: &mut impl Rng) -> bool {
    rng.random::<f64>() < prob
}

pub fn horizontal_flip(stream: &EventStream, prob: f64, rng: &mut impl Rng) -> EventStream {
    if !bernoulli(prob, rng) {
        return stream.clone();
    }
    let last = (stream.width() - 1) as u16;
    let events = stream
        .events()
        .iter()
        .map(|e| Event { x: last - e.x, ..*e })
        .collect();
    EventStream::new(stream.width(), stream.height(), events).expect("reflection stays in bounds")
}

pub fn polarity_flip(stream: &EventStream, prob: f64, rng: &mut impl Rng) -> EventStream {
    if !bernoulli(prob, rng) {
        return stream.clone();
    }
    let events = stream
        .events()
        .iter()
        .map(|e| Event {
            polarity: e.polarity.flipped(),
            ..*e
        })
        .collect();
    EventStream::new(stream.width(), stream.height(), events).expect("polarity flip keeps order")
}

/// Removes each event independently with probability `ratio`.
pub fn event_drop(stream: &EventStream, ratio: f64, rng: &mut impl Rng) -> EventStream {
    if ratio <= 0.0 {
        return stream.clone();
    }
    let events = stream
        .events()
        .iter()
        .filter(|_| rng.random::<f64>() >= ratio)
        .copied()
        .collect();
    EventStream::new(stream.width(), stream.height(), events).expect("subsequence stays valid")
}

/// Adds `Poisson(rate · width · height)` uniformly placed events over the
/// stream's time span, then stable-sorts by timestamp.
pub fn noise_inject(stream: &EventStream, rate: f64, rng: &mut impl Rng) -> EventStream {
    let lambda = rate * f64::from(stream.width()) * f64::from(stream.height());
    if !(lambda > 0.0) {
        return stream.clone();
    }
    let count = Poisson::new(lambda).expect("positive finite rate").sample(rng) as usize;
    let (t_lo, t_hi) = match (stream.events().first(), stream.events().last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => (0, 0),
    };
    let mut events = stream.events().to_vec();
    events.reserve(count);
    for _ in 0..count {
        let x = rng.random_range(0..stream.width()) as u16;
        let y = rng.random_range(0..stream.height()) as u16;
        let t = rng.random_range(t_lo..=t_hi);
        let polarity = if rng.random::<bool>() {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        events.push(Event::new(x, y, t, polarity));
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(stream.width(), stream.height(), events).expect("sorted in-bounds noise")
}

/// temporal window → resized crop → horizontal flip → polarity flip → drop → noise.
pub fn augment_view(
    stream: &EventStream,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<EventStream, AugmentError> {
    cfg.validate()?;
    let s = temporal_window(stream, cfg.window_fraction, rng);
    let s = random_resized_crop(&s, cfg, rng)?;
    let s = horizontal_flip(&s, cfg.hflip_prob, rng);
    let s = polarity_flip(&s, cfg.polarity_flip_prob, rng);
    let ratio = rng.random::<f64>() * cfg.drop_ratio_max;
    let s = event_drop(&s, ratio, rng);
    Ok(noise_inject(&s, cfg.noise_rate, rng))
}
