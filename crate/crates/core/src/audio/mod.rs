//! Log-mel audio frontend and synthetic interference.

mod mel;
mod noise;
mod stft;
mod wav;

pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelFilterbank, LogMelSpectrogram, LOG_OFFSET, MEL_BINS, MEL_FRAMES};
pub use noise::{brownian_noise, mix_noise, synth_interference, Interference};
pub use stft::{hann_window, stft, Spectrogram};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window at 16 kHz.
pub const WINDOW: usize = 400;
/// 10 ms hop at 16 kHz.
pub const HOP: usize = 160;

/// Mono audio samples. Amplitudes are not clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform", "non-finite sample"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(n: usize) -> Self {
        Waveform {
            samples: vec![0.0; n],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Samples `[start, start + len)` as a new waveform.
    pub fn segment(&self, start: usize, len: usize) -> Result<Waveform> {
        if start + len > self.samples.len() {
            return Err(Error::invalid(
                "segment",
                format!("{start}+{len} exceeds {} samples", self.samples.len()),
            ));
        }
        Ok(Waveform {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}

pub(crate) fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}
