use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file, averaging channels to mono.
///
/// 16-bit samples are scaled by 1/32768, so −32768 maps to −1.0.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = WavReader::open(path).map_err(|e| wav_err(format!("malformed header: {e}")))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(wav_err("zero channels".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(e.to_string()))?,
        (format, bits) => {
            return Err(wav_err(format!(
                "unsupported codec: {bits}-bit {format:?} (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        let scale = 1.0 / channels as f32;
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() * scale)
            .collect()
    };
    if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
        return Err(wav_err(format!("non-finite sample at index {bad}")));
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav_i16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw<S: hound::Sample + Copy>(path: &Path, spec: WavSpec, samples: &[S]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn spec(channels: u16, bits: u16, format: SampleFormat) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: 22050,
            bits_per_sample: bits,
            sample_format: format,
        }
    }

    #[test]
    fn zeros_stay_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_raw(&p, spec(1, 16, SampleFormat::Int), &[0i16; 100]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0; 100]);
        assert_eq!(w.sample_rate, 22050);
    }

    #[test]
    fn stereo_opposites_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let data: Vec<i16> = (0..50).flat_map(|i| [i * 100, -i * 100]).collect();
        write_raw(&p, spec(2, 16, SampleFormat::Int), &data);
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.0; 50]);
    }

    #[test]
    fn int16_scale_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        write_raw(&p, spec(1, 16, SampleFormat::Int), &[i16::MIN, 16384, 0]);
        assert_eq!(load_wav(&p).unwrap().samples, vec![-1.0, 0.5, 0.0]);
    }

    #[test]
    fn float32_is_read_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        write_raw(&p, spec(1, 32, SampleFormat::Float), &[0.25f32, -0.75]);
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.25, -0.75]);
    }

    #[test]
    fn unsupported_and_malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.wav");
        write_raw(&p, spec(1, 8, SampleFormat::Int), &[0i8, 1]);
        let err = load_wav(&p).unwrap_err().to_string();
        assert!(err.contains("unsupported codec"), "{err}");

        let q = dir.path().join("bad.wav");
        std::fs::write(&q, b"RIFF....not a wave").unwrap();
        let err = load_wav(&q).unwrap_err().to_string();
        assert!(err.contains("malformed header"), "{err}");
    }
}
