//! Event images, patch decomposition and information-weighted patch sampling.
//!
//! A view is built as: augmented stream → two-channel histogram → clipped
//! normalization → patch grid → per-patch information `d_i = Σ|p_i|` →
//! L1-normalized distribution → `n` distinct patches drawn without
//! replacement.
//!
//! Patch vectors are laid out channel-major (positive plane first), then
//! row-major inside the `P × P` block.

use rand::{Rng, RngCore, SeedableRng};
use thiserror::Error;

use crate::augment::{augment_view, crop_to_box, AugmentConfig, AugmentError, CropBox};
use crate::event::{EventStream, Polarity};
use crate::rng::SeededRng;

pub const CHANNELS: usize = 2;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error("image {width}x{height} is not divisible into {patch}x{patch} patches")]
    NonDivisibleGeometry { width: u32, height: u32, patch: usize },
    #[error("cannot draw {requested} patches from {available} with positive probability")]
    InsufficientSupport { requested: usize, available: usize },
    #[error("invalid view parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Per-pixel event counts; `counts[c][y][x]` flattened, channel 0 = positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventImage {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl EventImage {
    pub fn get(&self, channel: usize, y: u32, x: u32) -> u32 {
        self.counts[(channel * self.height as usize + y as usize) * self.width as usize + x as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

/// Histogram scaled into `[0, 1]`, same layout as [`EventImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub index: usize,
    pub values: Vec<f64>,
}

/// The patches kept for one view, sorted by grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub width: u32,
    pub height: u32,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn indices(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.index).collect()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub patch_size: usize,
    pub patches_per_view: usize,
    pub clip: u32,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            patches_per_view: 49,
            clip: 10,
        }
    }
}

pub fn event_histogram(stream: &EventStream) -> EventImage {
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut counts = vec![0u32; CHANNELS * w * h];
    for e in stream.events() {
        let c = match e.polarity {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        };
        counts[(c * h + e.y as usize) * w + e.x as usize] += 1;
    }
    EventImage {
        width: stream.width(),
        height: stream.height(),
        counts,
    }
}

/// `v ↦ min(v, clip) / clip`.
pub fn normalize_image(img: &EventImage, clip: u32) -> Result<NormalizedImage, ViewError> {
    if clip == 0 {
        return Err(ViewError::InvalidParameter("clip must be at least 1".into()));
    }
    let c = f64::from(clip);
    Ok(NormalizedImage {
        width: img.width,
        height: img.height,
        values: img
            .counts
            .iter()
            .map(|&v| f64::from(v.min(clip)) / c)
            .collect(),
    })
}

pub fn patch_grid(width: u32, height: u32, patch: usize) -> Result<(usize, usize), ViewError> {
    if patch == 0 || width as usize % patch != 0 || height as usize % patch != 0 {
        return Err(ViewError::NonDivisibleGeometry {
            width,
            height,
            patch,
        });
    }
    Ok((height as usize / patch, width as usize / patch))
}

/// Splits the image into row-major `P × P` patches.
pub fn patchify(img: &NormalizedImage, patch: usize) -> Result<Vec<Patch>, ViewError> {
    let (rows, cols) = patch_grid(img.width, img.height, patch)?;
    let (w, h) = (img.width as usize, img.height as usize);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut values = Vec::with_capacity(CHANNELS * patch * patch);
            for ch in 0..CHANNELS {
                for dy in 0..patch {
                    let row = (ch * h + r * patch + dy) * w + c * patch;
                    values.extend_from_slice(&img.values[row..row + patch]);
                }
            }
            out.push(Patch {
                index: r * cols + c,
                values,
            });
        }
    }
    Ok(out)
}

pub fn info_quantities(patches: &[Patch]) -> Vec<f64> {
    patches
        .iter()
        .map(|p| p.values.iter().map(|v| v.abs()).sum())
        .collect()
}

/// Sampling distribution over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDistribution {
    pub probs: Vec<f64>,
    /// Set when every information quantity was zero and the uniform
    /// distribution was substituted. [`masked_view`] also sets it when it had
    /// to top up a view with empty patches.
    pub uniform_fallback: bool,
}

impl PatchDistribution {
    pub fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }
}

pub fn patch_distribution(d: &[f64]) -> PatchDistribution {
    let total: f64 = d.iter().sum();
    if total > 0.0 {
        PatchDistribution {
            probs: d.iter().map(|v| v / total).collect(),
            uniform_fallback: false,
        }
    } else {
        let n = d.len().max(1) as f64;
        PatchDistribution {
            probs: vec![1.0 / n; d.len()],
            uniform_fallback: true,
        }
    }
}

/// Draws `n` distinct indices proportionally to `dist` by repeatedly
/// drawing, removing the winner, and renormalizing. Returns them sorted.
pub fn conditional_mask_sample(
    dist: &PatchDistribution,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, ViewError> {
    let available = dist.support();
    if n == 0 {
        return Err(ViewError::InvalidParameter("must sample at least one patch".into()));
    }
    if n > available {
        return Err(ViewError::InsufficientSupport {
            requested: n,
            available,
        });
    }
    let mut weights = dist.probs.clone();
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            choice = Some(i);
            if acc > target {
                break;
            }
        }
        // `choice` is the last positive entry if rounding left `acc <= target`.
        let i = choice.expect("positive support remains");
        weights[i] = 0.0;
        picked.push(i);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn assemble(patches: Vec<Patch>, keep: &[usize], grid: (usize, usize), p: usize, w: u32, h: u32) -> PatchSet {
    let mut slots: Vec<Option<Patch>> = patches.into_iter().map(Some).collect();
    PatchSet {
        patches: keep.iter().map(|&i| slots[i].take().expect("distinct index")).collect(),
        grid,
        patch_size: p,
        width: w,
        height: h,
    }
}

/// One masked view of an already-augmented stream.
pub fn masked_view(
    stream: &EventStream,
    vcfg: &ViewConfig,
    rng: &mut impl Rng,
) -> Result<(PatchSet, PatchDistribution), ViewError> {
    let img = normalize_image(&event_histogram(stream), vcfg.clip)?;
    let grid = patch_grid(img.width, img.height, vcfg.patch_size)?;
    let patches = patchify(&img, vcfg.patch_size)?;
    let mut dist = patch_distribution(&info_quantities(&patches));
    let n = vcfg.patches_per_view;
    if n > patches.len() {
        return Err(ViewError::InsufficientSupport {
            requested: n,
            available: patches.len(),
        });
    }
    let keep = if dist.support() >= n {
        conditional_mask_sample(&dist, n, rng)?
    } else {
        // Too few informative patches: keep all of them and top up uniformly
        // from the empty ones. Flagged like the all-empty fallback.
        let mut keep: Vec<usize> = (0..dist.probs.len()).filter(|&i| dist.probs[i] > 0.0).collect();
        let empty: Vec<f64> = dist.probs.iter().map(|&p| if p > 0.0 { 0.0 } else { 1.0 }).collect();
        let filler = patch_distribution(&empty);
        keep.extend(conditional_mask_sample(&filler, n - keep.len(), rng)?);
        keep.sort_unstable();
        dist.uniform_fallback = true;
        keep
    };
    Ok((
        assemble(patches, &keep, grid, vcfg.patch_size, img.width, img.height),
        dist,
    ))
}

/// A view pair with flags recording whether either side hit the uniform fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub query: PatchSet,
    pub key: PatchSet,
    pub fallback: (bool, bool),
}

/// Builds `(x_q, x_k)`: each side draws a child seed from `rng` and runs
/// augmentation and masking on its own generator.
pub fn make_views(
    stream: &EventStream,
    acfg: &AugmentConfig,
    vcfg: &ViewConfig,
    rng: &mut impl RngCore,
) -> Result<ViewPair, ViewError> {
    let seeds = [rng.next_u64(), rng.next_u64()];
    let one = |seed: u64| -> Result<(PatchSet, bool), ViewError> {
        let mut r = SeededRng::seed_from_u64(seed);
        let aug = augment_view(stream, acfg, &mut r)?;
        let (set, dist) = masked_view(&aug, vcfg, &mut r)?;
        Ok((set, dist.uniform_fallback))
    };
    let (query, fq) = one(seeds[0])?;
    let (key, fk) = one(seeds[1])?;
    Ok(ViewPair {
        query,
        key,
        fallback: (fq, fk),
    })
}

/// Every patch of the un-augmented stream resized to `(out_width, out_height)`.
pub fn full_view(
    stream: &EventStream,
    out_width: u32,
    out_height: u32,
    vcfg: &ViewConfig,
) -> Result<PatchSet, ViewError> {
    let s = crop_to_box(
        stream,
        CropBox::full(stream.width(), stream.height()),
        out_width,
        out_height,
    )?;
    let img = normalize_image(&event_histogram(&s), vcfg.clip)?;
    let grid = patch_grid(img.width, img.height, vcfg.patch_size)?;
    Ok(PatchSet {
        patches: patchify(&img, vcfg.patch_size)?,
        grid,
        patch_size: vcfg.patch_size,
        width: img.width,
        height: img.height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Event;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn img(width: u32, height: u32, values: Vec<f64>) -> NormalizedImage {
        NormalizedImage {
            width,
            height,
            values,
        }
    }

    fn random_stream(seed: u64, w: u32, h: u32, n: usize) -> EventStream {
        let mut rng = rng_from(seed, &[]);
        let mut ts: Vec<u32> = (0..n).map(|_| rng.random_range(0..10_000)).collect();
        ts.sort_unstable();
        let events = ts
            .into_iter()
            .map(|t| {
                Event::new(
                    rng.random_range(0..w) as u16,
                    rng.random_range(0..h) as u16,
                    t,
                    if rng.random() { Polarity::Positive } else { Polarity::Negative },
                )
            })
            .collect();
        EventStream::new(w, h, events).unwrap()
    }

    #[test]
    fn histogram_counts() {
        let s = EventStream::new(
            3,
            2,
            vec![
                Event::new(1, 1, 0, Polarity::Positive),
                Event::new(1, 1, 1, Polarity::Positive),
                Event::new(1, 1, 2, Polarity::Negative),
            ],
        )
        .unwrap();
        let h = event_histogram(&s);
        assert_eq!(h.get(0, 1, 1), 2);
        assert_eq!(h.get(1, 1, 1), 1);
        assert_eq!(h.total(), 3);
        assert_eq!(event_histogram(&EventStream::empty(4, 4)).total(), 0);
    }

    #[test]
    fn normalization_clamps() {
        let h = EventImage {
            width: 2,
            height: 1,
            counts: vec![0, 10, 20, 5],
        };
        let n = normalize_image(&h, 10).unwrap();
        assert_eq!(n.values, vec![0.0, 1.0, 1.0, 0.5]);
        assert!(normalize_image(&h, 0).is_err());
    }

    #[test]
    fn patchify_layout() {
        // 4x4 image, both channels numbered 0..32.
        let values: Vec<f64> = (0..32).map(f64::from).collect();
        let patches = patchify(&img(4, 4, values), 2).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0].index, 0);
        assert_eq!(
            patches[0].values,
            vec![0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]
        );
        assert_eq!(patches[3].values[..4], [10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patch_grid_sizes() {
        assert_eq!(patch_grid(224, 224, 16).unwrap(), (14, 14));
        assert_eq!(patch_grid(64, 32, 8).unwrap(), (4, 8));
        assert!(matches!(
            patchify(&img(5, 4, vec![0.0; 40]), 2),
            Err(ViewError::NonDivisibleGeometry { .. })
        ));
    }

    #[test]
    fn info_and_distribution() {
        let p = |v: Vec<f64>| Patch { index: 0, values: v };
        assert_eq!(info_quantities(&[p(vec![0.0; 4])]), vec![0.0]);
        assert_eq!(info_quantities(&[p(vec![0.5, 0.5, 0.0, 0.0])]), vec![1.0]);

        assert_eq!(patch_distribution(&[1.0, 1.0, 2.0]).probs, vec![0.25, 0.25, 0.5]);
        let z = patch_distribution(&[0.0, 0.0, 0.0]);
        assert!(z.uniform_fallback);
        assert_eq!(z.probs, vec![1.0 / 3.0; 3]);
        assert_eq!(patch_distribution(&[5.0]).probs, vec![1.0]);
    }

    #[test]
    fn degenerate_and_exhaustive_sampling() {
        let mut rng = rng_from(0, &[]);
        let d = patch_distribution(&[0.0, 1.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(conditional_mask_sample(&d, 1, &mut rng).unwrap(), vec![1]);
        }
        let d = patch_distribution(&[1.0, 1.0, 2.0]);
        assert_eq!(conditional_mask_sample(&d, 3, &mut rng).unwrap(), vec![0, 1, 2]);
        let d = patch_distribution(&[0.0, 1.0, 0.0]);
        assert!(matches!(
            conditional_mask_sample(&d, 2, &mut rng),
            Err(ViewError::InsufficientSupport {
                requested: 2,
                available: 1
            })
        ));
        let d = patch_distribution(&[0.0; 4]);
        assert_eq!(conditional_mask_sample(&d, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn sampling_frequencies_match_distribution() {
        let d = patch_distribution(&[0.25, 0.25, 0.5]);
        let mut rng = rng_from(17, &[]);
        let draws = 100_000;
        let mut hits = [0usize; 3];
        for _ in 0..draws {
            hits[conditional_mask_sample(&d, 1, &mut rng).unwrap()[0]] += 1;
        }
        for (h, p) in hits.iter().zip(&d.probs) {
            assert!((*h as f64 / draws as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn identity_views_hold_all_patches() {
        let s = random_stream(4, 16, 16, 400);
        let vcfg = ViewConfig {
            patch_size: 4,
            patches_per_view: 16,
            clip: 3,
        };
        let acfg = AugmentConfig::identity(16, 16);
        let pair = make_views(&s, &acfg, &vcfg, &mut rng_from(8, &[])).unwrap();
        let full = full_view(&s, 16, 16, &vcfg).unwrap();
        assert_eq!(pair.query, full);
        assert_eq!(pair.key, full);
    }

    #[test]
    fn default_budget_on_224_grid() {
        let s = random_stream(5, 224, 224, 60_000);
        let acfg = AugmentConfig::default();
        let pair = make_views(&s, &acfg, &ViewConfig::default(), &mut rng_from(2, &[])).unwrap();
        for set in [&pair.query, &pair.key] {
            assert_eq!(set.len(), 49);
            assert_eq!(set.num_patches(), 196);
            assert!(set.indices().windows(2).all(|w| w[0] < w[1]));
        }
        assert_ne!(pair.query, pair.key);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn histogram_conserves_events(seed in any::<u64>(), w in 1u32..32, h in 1u32..32, n in 0usize..500) {
            let s = random_stream(seed, w, h, n);
            prop_assert_eq!(event_histogram(&s).total(), n as u64);
        }

        #[test]
        fn distribution_is_simplex(d in prop::collection::vec(0.0f64..10.0, 1..64)) {
            let p = patch_distribution(&d);
            prop_assert!(p.probs.iter().all(|&x| x >= 0.0));
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sampled_patches_are_informative(seed in any::<u64>(), n_events in 50usize..600) {
            let s = random_stream(seed, 32, 32, n_events);
            let vcfg = ViewConfig { patch_size: 8, patches_per_view: 4, clip: 4 };
            let acfg = AugmentConfig { out_width: 32, out_height: 32, ..AugmentConfig::default() };
            let mut rng = rng_from(seed, &[7]);
            let aug = augment_view(&s, &acfg, &mut rng).unwrap();
            let img = normalize_image(&event_histogram(&aug), vcfg.clip).unwrap();
            let d = info_quantities(&patchify(&img, 8).unwrap());
            let positive = d.iter().filter(|&&v| v > 0.0).count();
            prop_assume!(positive >= vcfg.patches_per_view);
            let (set, _) = masked_view(&aug, &vcfg, &mut rng).unwrap();
            for p in &set.patches {
                prop_assert!(d[p.index] > 0.0);
            }
        }
    }
}
