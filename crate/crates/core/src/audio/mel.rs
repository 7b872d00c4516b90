use std::sync::OnceLock;

use super::{stft, Waveform, HOP, SAMPLE_RATE, WINDOW};
use crate::error::{Error, Result};

pub const MEL_FRAMES: usize = 96;
pub const MEL_BINS: usize = 64;
pub const MEL_LO_HZ: f64 = 125.0;
pub const MEL_HI_HZ: f64 = 7500.0;
/// Added to mel energies before the logarithm.
pub const LOG_OFFSET: f64 = 0.01;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale, `bins × bands` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub bins: usize,
    pub bands: usize,
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, fft_len: usize, sample_rate: f64, lo_hz: f64, hi_hz: f64) -> Self {
        let bins = fft_len / 2 + 1;
        let (lo, hi) = (hz_to_mel(lo_hz), hz_to_mel(hi_hz));
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| lo + (hi - lo) * i as f64 / (bands + 1) as f64)
            .collect();
        let mut weights = vec![0.0; bins * bands];
        // the DC bin carries no weight
        for bin in 1..bins {
            let mel = hz_to_mel(bin as f64 * sample_rate / fft_len as f64);
            for band in 0..bands {
                let (l, c, u) = (edges[band], edges[band + 1], edges[band + 2]);
                let w = ((mel - l) / (c - l)).min((u - mel) / (u - c));
                weights[bin * bands + band] = w.max(0.0);
            }
        }
        MelFilterbank {
            bins,
            bands,
            weights,
            centers_hz: edges[1..=bands].iter().map(|&m| mel_to_hz(m)).collect(),
        }
    }

    /// Apply to one frame of spectral values.
    pub fn apply(&self, frame: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bands];
        for (bin, &v) in frame.iter().enumerate().take(self.bins) {
            let row = &self.weights[bin * self.bands..(bin + 1) * self.bands];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
        out
    }

    /// The band whose center is nearest `hz` on the mel scale.
    pub fn nearest_band(&self, hz: f64) -> usize {
        let m = hz_to_mel(hz);
        (0..self.bands)
            .min_by(|&a, &b| {
                let da = (hz_to_mel(self.centers_hz[a]) - m).abs();
                let db = (hz_to_mel(self.centers_hz[b]) - m).abs();
                da.total_cmp(&db)
            })
            .unwrap()
    }

    /// 64 bands over 125–7500 Hz for 400-point frames at 16 kHz.
    pub fn standard() -> &'static MelFilterbank {
        static BANK: OnceLock<MelFilterbank> = OnceLock::new();
        BANK.get_or_init(|| MelFilterbank::new(MEL_BINS, WINDOW, SAMPLE_RATE as f64, MEL_LO_HZ, MEL_HI_HZ))
    }
}

/// A `96 × 64` grid of log mel energies, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Vec<f32>,
    pub frame_hop: f64,
    pub mel_lo: f64,
    pub mel_hi: f64,
}

impl LogMelSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (MEL_FRAMES, MEL_BINS)
    }

    pub fn at(&self, frame: usize, band: usize) -> f32 {
        self.values[frame * MEL_BINS + band]
    }

    /// Mean over frames of each band.
    pub fn band_means(&self) -> Vec<f64> {
        (0..MEL_BINS)
            .map(|b| (0..MEL_FRAMES).map(|f| self.at(f, b) as f64).sum::<f64>() / MEL_FRAMES as f64)
            .collect()
    }
}

/// Log mel spectrogram of a 1-second, 16 kHz segment: power spectrum through the
/// standard filterbank, `ln(energy + 0.01)`, first 96 of the 98 frames.
pub fn log_mel(w: &Waveform) -> Result<LogMelSpectrogram> {
    if w.sample_rate != SAMPLE_RATE || w.len() != SAMPLE_RATE as usize {
        return Err(Error::invalid(
            "log_mel",
            format!(
                "expected {} samples at {} Hz, got {} at {} Hz",
                SAMPLE_RATE, SAMPLE_RATE, w.len(), w.sample_rate
            ),
        ));
    }
    let spec = stft(w, WINDOW, HOP)?;
    let bank = MelFilterbank::standard();
    let mut values = Vec::with_capacity(MEL_FRAMES * MEL_BINS);
    let mut power = vec![0.0; spec.bins];
    for f in 0..MEL_FRAMES {
        for (p, &m) in power.iter_mut().zip(spec.frame(f)) {
            *p = m * m;
        }
        values.extend(bank.apply(&power).into_iter().map(|e| (e + LOG_OFFSET).ln() as f32));
    }
    Ok(LogMelSpectrogram {
        values,
        frame_hop: HOP as f64 / SAMPLE_RATE as f64,
        mel_lo: MEL_LO_HZ,
        mel_hi: MEL_HI_HZ,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    pub(crate) fn tone(freqs: &[f64], amp: f64) -> Waveform {
        let s = (0..16_000)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                freqs.iter().map(|f| amp * (2.0 * PI * f * t).sin()).sum::<f64>() as f32
            })
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    #[test]
    fn silence_is_log_floor() {
        let m = log_mel(&Waveform::silence(16_000)).unwrap();
        assert_eq!(m.values.len(), 96 * 64);
        let floor = (0.01f64).ln() as f32;
        assert!(m.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn wrong_length_or_rate_errors() {
        assert!(log_mel(&Waveform::silence(15_999)).is_err());
        let mut w = Waveform::silence(16_000);
        w.sample_rate = 8_000;
        assert!(log_mel(&w).is_err());
    }

    #[test]
    fn filterbank_is_well_formed() {
        let bank = MelFilterbank::standard();
        assert!(bank.weights.iter().all(|&w| w >= 0.0));
        for band in 0..bank.bands {
            assert!((0..bank.bins).any(|b| bank.weights[b * bank.bands + band] > 0.0), "band {band} empty");
        }
        assert!(bank.centers_hz.windows(2).all(|w| w[0] < w[1]));
        assert!(bank.centers_hz[0] > 125.0 && *bank.centers_hz.last().unwrap() < 7500.0);
    }

    #[test]
    fn tone_peaks_at_nearest_mel_band() {
        let bank = MelFilterbank::standard();
        for f in [440.0, 880.0] {
            let m = log_mel(&tone(&[f], 0.5)).unwrap();
            let means = m.band_means();
            let argmax = (0..64).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
            // independent oracle: mel-scale centre spacing from the band edges
            let lo = 2595.0 * (1.0 + 125.0 / 700.0f64).log10();
            let hi = 2595.0 * (1.0 + 7500.0 / 700.0f64).log10();
            let target = 2595.0 * (1.0 + f / 700.0f64).log10();
            let nearest = (0..64)
                .min_by(|&a, &b| {
                    let ca = lo + (hi - lo) * (a + 1) as f64 / 65.0;
                    let cb = lo + (hi - lo) * (b + 1) as f64 / 65.0;
                    (ca - target).abs().total_cmp(&(cb - target).abs())
                })
                .unwrap();
            assert_eq!(argmax, nearest, "{f} Hz");
            assert_eq!(bank.nearest_band(f), nearest);
        }
    }

    #[test]
    fn amplitude_scaling_shifts_log_energies() {
        let w = tone(&[440.0, 1500.0, 3000.0], 0.3);
        let w2 = Waveform::new(w.samples.iter().map(|s| 2.0 * s).collect(), 16_000).unwrap();
        let (a, b) = (log_mel(&w).unwrap(), log_mel(&w2).unwrap());
        let diffs: Vec<f64> = a
            .values
            .iter()
            .zip(&b.values)
            .filter(|(&x, _)| (x as f64).exp() > 100.0 * LOG_OFFSET)
            .map(|(&x, &y)| (y - x) as f64)
            .collect();
        assert!(diffs.len() > 50);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(std < 0.05, "std {std}");
        // power scales by k², so the shift is 2·ln k
        assert!((mean - 2.0 * 2f64.ln()).abs() < 0.05, "mean {mean}");
    }
}
