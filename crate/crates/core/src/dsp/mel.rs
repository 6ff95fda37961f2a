//! Slaney-style mel scale and area-normalised triangular filterbank.

use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// `n` frequencies (Hz) evenly spaced on the mel scale from `fmin` to `fmax`.
pub fn mel_frequencies(n: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            mel_to_hz(lo + (hi - lo) * t)
        })
        .collect()
}

/// Dense `n_mels × (n_fft/2 + 1)` filterbank with per-row support bounds.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Row-major weights.
    pub weights: Vec<f64>,
    /// Band edges in Hz: band `i` spans `edges[i]..edges[i + 2]`, peaking at `edges[i + 1]`.
    pub edges: Vec<f64>,
    support: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, band: usize) -> &[f64] {
        &self.weights[band * self.n_bins..(band + 1) * self.n_bins]
    }

    /// Centre frequency (Hz) of a band.
    pub fn center(&self, band: usize) -> f64 {
        self.edges[band + 1]
    }

    /// Projects a power spectrum of `n_bins` values onto the bands.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (band, o) in out.iter_mut().enumerate().take(self.n_mels) {
            let (lo, hi) = self.support[band];
            let row = &self.weights[band * self.n_bins..];
            *o = (lo..hi).map(|k| row[k] * power[k]).sum();
        }
    }
}

/// Triangular mel filters on the Slaney scale, each scaled by
/// `2 / (f_hi − f_lo)` so that every filter has the same area.
pub fn mel_filterbank(sr: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<MelFilterbank> {
    let nyquist = sr as f64 / 2.0;
    if fmax > nyquist {
        return Err(Error::Dsp(format!("fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")));
    }
    if fmin < 0.0 || fmin >= fmax || n_mels == 0 || n_fft < 2 {
        return Err(Error::Dsp(format!(
            "invalid filterbank parameters (n_fft {n_fft}, n_mels {n_mels}, fmin {fmin}, fmax {fmax})"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * sr as f64 / n_fft as f64).collect();
    let edges = mel_frequencies(n_mels + 2, fmin, fmax);
    let mut weights = vec![0.0; n_mels * n_bins];
    let mut support = Vec::with_capacity(n_mels);
    for band in 0..n_mels {
        let (lo, mid, hi) = (edges[band], edges[band + 1], edges[band + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut weights[band * n_bins..(band + 1) * n_bins];
        let (mut first, mut last) = (n_bins, 0);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                row[k] = w * norm;
                first = first.min(k);
                last = k + 1;
            }
        }
        support.push(if first < last { (first, last) } else { (0, 0) });
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        edges,
        support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_round_trips() {
        for hz in [0.0, 60.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn nyquist_violation() {
        assert!(mel_filterbank(16000, 512, 40, 0.0, 8001.0).is_err());
        assert!(mel_filterbank(16000, 512, 40, 0.0, 8000.0).is_ok());
    }
}
