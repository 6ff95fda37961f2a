use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use sha2::{Digest, Sha256};

use super::mel::{mel_filterbank, MelFilterbank};
use super::Waveform;
use crate::error::{Error, Result};

/// Front-end parameters of the log-mel extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Added to the mel power before the natural log.
    pub log_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            n_fft: 4096,
            win_length: 2822,
            hop_length: 1103,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    /// First 8 bytes of the SHA-256 of a canonical rendering of the config.
    pub fn hash(&self) -> u64 {
        let canon = format!(
            "logmel-v1 sr={} n_fft={} win={} hop={} mels={} fmin={:?} fmax={:?} floor={:?} window=hann-periodic pad=reflect mel=slaney",
            self.sample_rate, self.n_fft, self.win_length, self.hop_length, self.n_mels, self.fmin, self.fmax, self.log_floor
        );
        let d = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Frames produced for `n_samples` under centred framing.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_length
    }
}

/// `frames × bands` log-mel matrix, row-major (one row per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Vec<f32>,
    frames: usize,
    bands: usize,
    pub frame_rate: f64,
    pub config_hash: u64,
}

impl Spectrogram {
    pub fn new(values: Vec<f32>, frames: usize, bands: usize, frame_rate: f64, config_hash: u64) -> Result<Self> {
        if values.len() != frames * bands {
            return Err(Error::Dsp(format!(
                "spectrogram data length {} does not match {frames}×{bands}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            frames,
            bands,
            frame_rate,
            config_hash,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bands)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * self.bands + band]
    }

    pub fn set(&mut self, frame: usize, band: usize, v: f32) {
        self.values[frame * self.bands + band] = v;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    /// Mean over all cells, accumulated in `f64`.
    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len().max(1) as f64) as f32
    }
}

/// Reusable log-mel extractor: plans the FFT and builds the window and
/// filterbank once.
pub struct LogMel {
    config: LogMelConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    hash: u64,
}

impl LogMel {
    pub fn new(config: LogMelConfig) -> Result<Self> {
        if config.win_length > config.n_fft || config.hop_length == 0 {
            return Err(Error::Dsp(format!(
                "window {} must fit in n_fft {} and hop must be positive",
                config.win_length, config.n_fft
            )));
        }
        let filterbank = mel_filterbank(config.sample_rate, config.n_fft, config.n_mels, config.fmin, config.fmax)?;
        // periodic Hann of win_length, centred in an n_fft frame
        let offset = (config.n_fft - config.win_length) / 2;
        let mut window = vec![0.0; config.n_fft];
        for i in 0..config.win_length {
            window[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / config.win_length as f64).cos();
        }
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        let hash = config.hash();
        Ok(Self {
            config,
            filterbank,
            window,
            fft,
            hash,
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Computes `ln(mel_power + floor)` for every centred frame.
    pub fn compute(&self, wave: &Waveform) -> Result<Spectrogram> {
        let cfg = &self.config;
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::Dsp(format!(
                "waveform is at {} Hz, extractor expects {} Hz",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let n = wave.samples.len();
        if n < cfg.hop_length || n < 2 {
            return Err(Error::Dsp(format!(
                "clip of {n} samples is shorter than one hop ({})",
                cfg.hop_length
            )));
        }
        let frames = cfg.n_frames(n);
        let half = (cfg.n_fft / 2) as i64;
        let period = 2 * (n as i64 - 1);
        let reflect = |i: i64| -> usize {
            let m = i.rem_euclid(period);
            (if m >= n as i64 { period - m } else { m }) as usize
        };
        let n_bins = cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        let mut mel = vec![0.0; cfg.n_mels];
        let mut values = Vec::with_capacity(frames * cfg.n_mels);
        for t in 0..frames {
            let start = (t * cfg.hop_length) as i64 - half;
            for (j, c) in buf.iter_mut().enumerate() {
                let w = self.window[j];
                let x = if w == 0.0 { 0.0 } else { wave.samples[reflect(start + j as i64)] as f64 };
                *c = Complex::new(x * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            values.extend(mel.iter().map(|&m| (m + cfg.log_floor).ln() as f32));
        }
        Spectrogram::new(
            values,
            frames,
            cfg.n_mels,
            cfg.sample_rate as f64 / cfg.hop_length as f64,
            self.hash,
        )
    }
}

/// Log-mel spectrogram with the default front end (44.1 kHz, Hann 2822,
/// hop 1103, 64 bands over 0–8 kHz).
pub fn logmel(wave: &Waveform) -> Result<Spectrogram> {
    LogMel::new(LogMelConfig::default())?.compute(wave)
}
