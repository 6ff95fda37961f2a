//! Audio front end: WAV ingestion, resampling and log-mel spectrograms.

mod cache;
mod mel;
mod resample;
mod spectrogram;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache};
pub use mel::{hz_to_mel, mel_filterbank, mel_frequencies, mel_to_hz, MelFilterbank};
pub use resample::resample;
pub use spectrogram::{logmel, LogMel, LogMelConfig, Spectrogram};
pub use wav::{load_wav, write_wav_i16, Waveform};

/// Sample rate every clip is brought to before feature extraction.
pub const TARGET_SAMPLE_RATE: u32 = 44_100;
