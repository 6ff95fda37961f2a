use std::f64::consts::PI;

use super::Waveform;

/// Zero crossings of the sinc kernel on each side of the centre.
const HALF_ZERO_CROSSINGS: usize = 16;
/// Largest number of polyphase branches kept in a precomputed table.
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-12 {
        1.0
    } else {
        (PI * t).sin() / (PI * t)
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let a = PI * (u + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

/// Blackman-windowed sinc interpolator between two integer rates.
struct Kernel {
    up: u64,
    down: u64,
    cutoff: f64,
    half_width: f64,
    taps: usize,
    table: Option<Vec<f64>>,
}

impl Kernel {
    fn new(src: u32, dst: u32) -> Self {
        let g = gcd(src as u64, dst as u64);
        let (up, down) = (dst as u64 / g, src as u64 / g);
        let cutoff = (dst as f64 / src as f64).min(1.0);
        let half_width = HALF_ZERO_CROSSINGS as f64 / cutoff;
        let taps = 2 * half_width.ceil() as usize;
        let mut k = Self {
            up,
            down,
            cutoff,
            half_width,
            taps,
            table: None,
        };
        if (up as usize) <= MAX_TABLE_PHASES {
            let mut table = Vec::with_capacity(up as usize * taps);
            for phase in 0..up {
                table.extend(k.phase_taps(phase));
            }
            k.table = Some(table);
        }
        k
    }

    /// Unit-sum taps for source offset `phase / up`; tap `j` weights source
    /// sample `floor(x) − taps/2 + 1 + j`.
    fn phase_taps(&self, phase: u64) -> Vec<f64> {
        let frac = phase as f64 / self.up as f64;
        let h = (self.taps / 2) as f64;
        let mut w: Vec<f64> = (0..self.taps)
            .map(|j| {
                let d = frac + h - 1.0 - j as f64;
                self.cutoff * sinc(self.cutoff * d) * blackman(d / self.half_width)
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }
}

/// Resamples to `target` Hz with a windowed-sinc polyphase interpolator.
///
/// The output has `round(n · target / source)` samples. Every polyphase
/// branch is normalised to unit DC gain; samples beyond the clip edges are
/// treated as zero. A clip already at `target` is returned unchanged.
pub fn resample(wave: &Waveform, target: u32) -> Waveform {
    assert!(wave.sample_rate > 0 && target > 0, "sample rates must be positive");
    if wave.sample_rate == target {
        return wave.clone();
    }
    let kernel = Kernel::new(wave.sample_rate, target);
    let n_in = wave.samples.len();
    let n_out = ((n_in as f64) * target as f64 / wave.sample_rate as f64).round() as usize;
    let half = (kernel.taps / 2) as i64;
    let x = &wave.samples;
    let mut out = Vec::with_capacity(n_out);
    let mut scratch;
    for n in 0..n_out as u64 {
        let pos = n * kernel.down;
        let base = (pos / kernel.up) as i64;
        let phase = pos % kernel.up;
        let taps: &[f64] = match &kernel.table {
            Some(t) => &t[phase as usize * kernel.taps..(phase as usize + 1) * kernel.taps],
            None => {
                scratch = kernel.phase_taps(phase);
                &scratch
            }
        };
        let first = base - half + 1;
        let mut acc = 0.0f64;
        for (j, &w) in taps.iter().enumerate() {
            let k = first + j as i64;
            if k >= 0 && (k as usize) < n_in {
                acc += w * x[k as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_rate_is_identity() {
        let w = Waveform::new(vec![0.1, -0.3, 0.7], 44100);
        assert_eq!(resample(&w, 44100), w);
    }

    #[test]
    fn upsampled_sine_matches_analytic_sine() {
        let f = 100.0;
        let n = 22050;
        let src: Vec<f32> = (0..n)
            .map(|i| (2.0 * PI * f * i as f64 / 22050.0).sin() as f32)
            .collect();
        let out = resample(&Waveform::new(src, 22050), 44100);
        assert_eq!(out.len(), 44100);
        // interior only: the clip edges see zero padding
        let interior = 64..out.len() - 64;
        let count = interior.len() as f64;
        let mse: f64 = interior
            .map(|i| {
                let want = (2.0 * PI * f * i as f64 / 44100.0).sin();
                (out.samples[i] as f64 - want).powi(2)
            })
            .sum::<f64>()
            / count;
        assert!(mse.sqrt() < 1e-3, "rms error {}", mse.sqrt());
    }

    #[test]
    fn dc_is_preserved_away_from_edges() {
        for (src, dst) in [(22050, 44100), (48000, 44100), (16000, 44100), (44101, 44100)] {
            let w = Waveform::new(vec![0.5; 4000], src);
            let out = resample(&w, dst);
            let expect = (4000.0 * dst as f64 / src as f64).round() as usize;
            assert_eq!(out.len(), expect);
            // 32 source samples at each edge
            let margin = (32.0 * dst as f64 / src as f64).ceil() as usize;
            for &s in &out.samples[margin..out.len() - margin] {
                assert!((s - 0.5).abs() < 1e-6, "{src}->{dst}: {s}");
            }
        }
    }
}
