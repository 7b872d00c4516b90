use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided STFT magnitudes, `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.magnitudes[i * self.bins..(i + 1) * self.bins]
    }
}

/// Hann-windowed short-time Fourier transform with a DFT length equal to `win_len`.
pub fn stft(w: &Waveform, win_len: usize, hop: usize) -> Result<Spectrogram> {
    if win_len == 0 || hop == 0 {
        return Err(Error::invalid("stft", "window and hop must be positive"));
    }
    if w.len() < win_len {
        return Err(Error::invalid(
            "stft",
            format!("waveform of {} samples is shorter than one {win_len}-sample window", w.len()),
        ));
    }
    let frames = (w.len() - win_len) / hop + 1;
    let bins = win_len / 2 + 1;
    let window = hann_window(win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win_len);
    let mut buf = vec![Complex::new(0.0, 0.0); win_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut magnitudes = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &w.samples[f * hop..f * hop + win_len];
        for ((b, &s), &wv) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s as f64 * wv, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        frames,
        bins,
        magnitudes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        let s = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32)
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    /// Direct O(N²) DFT of one windowed frame.
    fn dft_oracle(x: &[f32], window: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, (&v, &wv)) in x.iter().zip(window).enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += v as f64 * wv * ang.cos();
                    im += v as f64 * wv * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn frame_and_bin_counts() {
        let s = stft(&Waveform::silence(16_000), 400, 160).unwrap();
        assert_eq!((s.frames, s.bins), (98, 201));
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn short_waveform_errors() {
        assert!(stft(&Waveform::silence(399), 400, 160).is_err());
    }

    #[test]
    fn matches_direct_dft() {
        let w = sine(1234.5, 800, 0.7);
        let s = stft(&w, 400, 160).unwrap();
        let window = hann_window(400);
        for f in 0..s.frames {
            let want = dft_oracle(&w.samples[f * 160..f * 160 + 400], &window);
            for (a, b) in s.frame(f).iter().zip(&want) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b));
            }
        }
    }

    #[test]
    fn bin_centered_sine_concentrates_energy() {
        // bin 11 of a 400-point DFT at 16 kHz is 440 Hz
        let w = sine(440.0, 400, 1.0);
        let window = hann_window(400);
        let mags = dft_oracle(&w.samples, &window);
        let total: f64 = mags.iter().map(|m| m * m).sum();
        // Hann main lobe spans the centre bin and its two neighbours
        let lobe: f64 = mags[10..=12].iter().map(|m| m * m).sum();
        assert!(lobe / total >= 0.9);
        let s = stft(&w, 400, 400).unwrap();
        let argmax = (0..s.bins).max_by(|&a, &b| s.frame(0)[a].total_cmp(&s.frame(0)[b])).unwrap();
        assert_eq!(argmax, 11);
        let e: f64 = s.frame(0).iter().map(|m| m * m).sum();
        let peak: f64 = s.frame(0)[10..=12].iter().map(|m| m * m).sum();
        assert!(peak / e >= 0.9);
    }

    #[test]
    fn parseval_per_frame() {
        let mut state = 12345u64;
        let samples: Vec<f32> = (0..1200)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32
            })
            .collect();
        let w = Waveform::new(samples, 16_000).unwrap();
        let s = stft(&w, 400, 160).unwrap();
        let window = hann_window(400);
        for f in 0..s.frames {
            let m = s.frame(f);
            // two-sided energy from the one-sided spectrum (N even)
            let two_sided = m[0] * m[0] + m[200] * m[200] + 2.0 * m[1..200].iter().map(|v| v * v).sum::<f64>();
            let direct: f64 = w.samples[f * 160..f * 160 + 400]
                .iter()
                .zip(&window)
                .map(|(&x, &wv)| (x as f64 * wv).powi(2))
                .sum();
            let rel = (two_sided - 400.0 * direct).abs() / (400.0 * direct);
            assert!(rel < 1e-3, "frame {f}: {rel}");
        }
    }
}
