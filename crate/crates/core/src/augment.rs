//! Training-time augmentation of log-mel spectrograms and their labels:
//! SpecAugment (time warp plus frequency and time masks), cutout and mixup.
//!
//! Every random choice is drawn from a ChaCha stream seeded by
//! [`derive_seed`], so a `(seed, clip, epoch)` triple always produces the
//! same output no matter which worker handles the clip.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::taxonomy::LabelVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub spec_augment: bool,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    /// Largest displacement (frames) of the time-warp anchor.
    pub time_warp_w: usize,
    pub cutout: bool,
    pub cutout_count: usize,
    /// Rectangle height in mel bands.
    pub cutout_h: usize,
    /// Rectangle width in frames.
    pub cutout_w: usize,
    pub mixup: bool,
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            spec_augment: true,
            n_freq_masks: 2,
            max_freq_width: 8,
            n_time_masks: 2,
            max_time_width: 40,
            time_warp_w: 16,
            cutout: true,
            cutout_count: 1,
            cutout_h: 8,
            cutout_w: 20,
            mixup: true,
            mixup_alpha: 0.4,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            spec_augment: false,
            cutout: false,
            mixup: false,
            ..Self::default()
        }
    }

    /// Checks the widths against a `frames × bands` input.
    pub fn validate(&self, frames: usize, bands: usize) -> Result<()> {
        if self.max_freq_width > bands {
            return Err(Error::Augment(format!(
                "max_freq_width {} exceeds {bands} bands",
                self.max_freq_width
            )));
        }
        if self.max_time_width > frames {
            return Err(Error::Augment(format!(
                "max_time_width {} exceeds {frames} frames",
                self.max_time_width
            )));
        }
        if self.time_warp_w > 0 && frames < 2 * self.time_warp_w {
            return Err(Error::Augment(format!(
                "time warp of ±{} needs at least {} frames, got {frames}",
                self.time_warp_w,
                2 * self.time_warp_w
            )));
        }
        if self.cutout_h > bands || self.cutout_w > frames {
            return Err(Error::Augment(format!(
                "cutout {}×{} does not fit a {frames}×{bands} spectrogram",
                self.cutout_w, self.cutout_h
            )));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::Augment(format!("mixup_alpha must be positive, got {}", self.mixup_alpha)));
        }
        Ok(())
    }
}

/// Mixes a base seed with a clip identifier and an epoch into an
/// independent stream seed.
pub fn derive_seed(seed: u64, clip_id: &str, epoch: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(clip_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Regions drawn by one [`spec_augment_traced`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpecAugmentTrace {
    /// `(anchor, warped_anchor)` frames, when a warp was applied.
    pub warp: Option<(usize, usize)>,
    /// Masked band ranges.
    pub freq_masks: Vec<Range<usize>>,
    /// Masked frame ranges.
    pub time_masks: Vec<Range<usize>>,
    /// Fill value used for every mask.
    pub fill: f32,
}

/// Axis-aligned rectangle of cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rect {
    pub frames: Range<usize>,
    pub bands: Range<usize>,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.frames.len() * self.bands.len()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.frames.start < other.frames.end
            && other.frames.start < self.frames.end
            && self.bands.start < other.bands.end
            && other.bands.start < self.bands.end
    }
}

pub fn spec_augment(s: &Spectrogram, cfg: &AugmentConfig, seed: u64) -> Result<Spectrogram> {
    spec_augment_traced(s, cfg, seed).map(|(out, _)| out)
}

/// SpecAugment that also reports where it warped and masked.
pub fn spec_augment_traced(s: &Spectrogram, cfg: &AugmentConfig, seed: u64) -> Result<(Spectrogram, SpecAugmentTrace)> {
    let (frames, bands) = s.shape();
    cfg.validate(frames, bands)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let mut trace = SpecAugmentTrace::default();

    if cfg.time_warp_w > 0 && frames >= 3 {
        let w = cfg.time_warp_w;
        let anchor = rng.random_range(w..=frames - w).clamp(1, frames - 2);
        let shift = rng.random_range(-(w as i64)..=w as i64);
        let warped = (anchor as i64 + shift).clamp(1, frames as i64 - 2) as usize;
        if warped != anchor {
            time_warp(&mut out, anchor, warped);
        }
        trace.warp = Some((anchor, warped));
    }

    let fill = out.mean();
    trace.fill = fill;
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_width);
        let start = rng.random_range(0..=bands - width);
        fill_rect(&mut out, &Rect { frames: 0..frames, bands: start..start + width }, fill);
        trace.freq_masks.push(start..start + width);
    }
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=cfg.max_time_width);
        let start = rng.random_range(0..=frames - width);
        fill_rect(&mut out, &Rect { frames: start..start + width, bands: 0..bands }, fill);
        trace.time_masks.push(start..start + width);
    }
    Ok((out, trace))
}

/// Piecewise-linear resampling along time that moves frame `anchor` to
/// `warped` while keeping both end frames in place.
fn time_warp(s: &mut Spectrogram, anchor: usize, warped: usize) {
    let (frames, bands) = s.shape();
    let src = s.clone();
    let last = (frames - 1) as f64;
    for t in 0..frames {
        let pos = if t <= warped {
            t as f64 * anchor as f64 / warped as f64
        } else {
            anchor as f64 + (t - warped) as f64 * (last - anchor as f64) / (last - warped as f64)
        };
        let i = (pos.floor() as usize).min(frames - 1);
        let j = (i + 1).min(frames - 1);
        let frac = (pos - i as f64) as f32;
        for b in 0..bands {
            let (a, c) = (src.get(i, b), src.get(j, b));
            s.set(t, b, a + (c - a) * frac);
        }
    }
}

/// Overwrites every cell of `rect` (clipped to the spectrogram) with `value`.
pub fn fill_rect(s: &mut Spectrogram, rect: &Rect, value: f32) {
    let (frames, bands) = s.shape();
    for t in rect.frames.start.min(frames)..rect.frames.end.min(frames) {
        for b in rect.bands.start.min(bands)..rect.bands.end.min(bands) {
            s.set(t, b, value);
        }
    }
}

pub fn cutout(s: &Spectrogram, cfg: &AugmentConfig, seed: u64) -> Result<Spectrogram> {
    cutout_traced(s, cfg, seed).map(|(out, _)| out)
}

/// Cutout: `cutout_count` rectangles of `cutout_w × cutout_h` cells, each
/// centred on a uniformly drawn cell and clipped at the borders, filled with
/// the spectrogram mean.
pub fn cutout_traced(s: &Spectrogram, cfg: &AugmentConfig, seed: u64) -> Result<(Spectrogram, Vec<Rect>)> {
    let (frames, bands) = s.shape();
    if cfg.cutout_h > bands || cfg.cutout_w > frames {
        return Err(Error::Augment(format!(
            "cutout {}×{} does not fit a {frames}×{bands} spectrogram",
            cfg.cutout_w, cfg.cutout_h
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let fill = s.mean();
    let mut rects = Vec::with_capacity(cfg.cutout_count);
    for _ in 0..cfg.cutout_count {
        let ct = rng.random_range(0..frames);
        let cb = rng.random_range(0..bands);
        let t0 = ct.saturating_sub(cfg.cutout_w / 2);
        let b0 = cb.saturating_sub(cfg.cutout_h / 2);
        let rect = Rect {
            frames: t0..(ct + cfg.cutout_w - cfg.cutout_w / 2).min(frames),
            bands: b0..(cb + cfg.cutout_h - cfg.cutout_h / 2).min(bands),
        };
        fill_rect(&mut out, &rect, fill);
        rects.push(rect);
    }
    Ok((out, rects))
}

/// Convex combination `λ·a + (1−λ)·b` of features and targets. Masks combine
/// by elementwise minimum, which is logical AND on binary masks.
pub fn mixup(
    a: (&Spectrogram, &LabelVector),
    b: (&Spectrogram, &LabelVector),
    lambda: f32,
) -> Result<(Spectrogram, LabelVector)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Augment(format!("lambda {lambda} outside [0, 1]")));
    }
    let (sa, la) = a;
    let (sb, lb) = b;
    if sa.shape() != sb.shape() {
        return Err(Error::Augment(format!(
            "mixup shape mismatch: {:?} vs {:?}",
            sa.shape(),
            sb.shape()
        )));
    }
    if la.coarse.len() != lb.coarse.len()
        || la.fine.len() != lb.fine.len()
        || la.other.as_ref().map(Vec::len) != lb.other.as_ref().map(Vec::len)
    {
        return Err(Error::Augment("mixup label layouts differ".into()));
    }
    let mix = |x: &[f32], y: &[f32]| -> Vec<f32> {
        x.iter().zip(y).map(|(&p, &q)| lambda * p + (1.0 - lambda) * q).collect()
    };
    let (frames, bands) = sa.shape();
    let spec = Spectrogram::new(mix(sa.values(), sb.values()), frames, bands, sa.frame_rate, sa.config_hash)?;
    let label = LabelVector {
        coarse: mix(&la.coarse, &lb.coarse),
        fine: mix(&la.fine, &lb.fine),
        fine_mask: la.fine_mask.iter().zip(&lb.fine_mask).map(|(&p, &q)| p.min(q)).collect(),
        other: match (&la.other, &lb.other) {
            (Some(x), Some(y)) => Some(mix(x, y)),
            _ => None,
        },
    };
    Ok((spec, label))
}

/// One `Beta(alpha, alpha)` draw from a seeded stream.
pub fn sample_lambda(alpha: f64, seed: u64) -> Result<f32> {
    sample_lambda_with(alpha, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Beta(alpha, alpha)` as `X / (X + Y)` with `X, Y ~ Gamma(alpha, 1)`.
pub fn sample_lambda_with<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f32> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Augment(format!("mixup alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Augment(e.to_string()))?;
    let x: f64 = gamma.sample(rng);
    let y: f64 = gamma.sample(rng);
    let total = x + y;
    // both draws can underflow to zero for very small alpha
    let lambda = if total > 0.0 { x / total } else { 0.5 };
    Ok(lambda.clamp(0.0, 1.0) as f32)
}
