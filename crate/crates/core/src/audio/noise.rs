use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{rms, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Synthetic interference families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interference {
    Brownian,
    /// Amplitude-modulated stack of sweeping chirps over a rumble bed; a synthetic
    /// stand-in for a passing-train recording.
    ChirpTrain,
}

fn normalize(mut x: Vec<f64>) -> Vec<f32> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let inv = if r > 0.0 { 1.0 / r } else { 0.0 };
    x.into_iter().map(|v| (v * inv) as f32).collect()
}

/// Integrated Gaussian white noise, mean-removed and scaled to unit RMS.
pub fn brownian_noise(n: usize, seed: u64) -> Result<Waveform> {
    if n < 2 {
        return Err(Error::invalid("brownian_noise", "need at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let walk = (0..n)
        .map(|_| {
            acc += rng.sample::<f64, _>(StandardNormal);
            acc
        })
        .collect();
    Ok(Waveform {
        samples: normalize(walk),
        sample_rate: SAMPLE_RATE,
    })
}

fn chirp_train(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let voices: Vec<(f64, f64, f64)> = (0..6)
        .map(|k| {
            let f0 = 150.0 * (k + 1) as f64 * rng.random_range(0.9..1.1);
            let sweep = rng.random_range(-0.4..0.6) * f0;
            (f0, sweep, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    // wheel-on-rail clatter: bursts every ~0.3 s
    let clack_rate = rng.random_range(2.5..4.0);
    let clack_phase = rng.random_range(0.0..1.0);
    let duration = n as f64 / sr;
    let mut rumble = 0.0;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            // slow pass-by envelope peaking mid-clip
            let pass = (-((t / duration.max(1e-9) - 0.5) * 3.0).powi(2)).exp();
            let clack = {
                let ph = (t * clack_rate + clack_phase).fract();
                (-ph * 25.0).exp()
            };
            let tonal: f64 = voices
                .iter()
                .map(|&(f0, sweep, ph)| {
                    let inst = 2.0 * PI * (f0 * t + 0.5 * sweep * t * t / duration.max(1e-9)) + ph;
                    inst.sin()
                })
                .sum();
            rumble = 0.995 * rumble + rng.sample::<f64, _>(StandardNormal) * 0.1;
            pass * (tonal * (0.3 + clack) + rumble)
        })
        .collect();
    Waveform {
        samples: normalize(x),
        sample_rate: SAMPLE_RATE,
    }
}

/// Unit-RMS interference of the given kind, reproducible from `(kind, n, seed)`.
pub fn synth_interference(kind: Interference, n: usize, seed: u64) -> Result<Waveform> {
    match kind {
        Interference::Brownian => brownian_noise(n, seed),
        Interference::ChirpTrain => {
            if n < 2 {
                return Err(Error::invalid("synth_interference", "need at least 2 samples"));
            }
            Ok(chirp_train(n, seed))
        }
    }
}

/// `signal + scale · RMS(signal) · noise / RMS(noise)` over the full span.
///
/// A silent signal (or silent noise) adds nothing.
pub fn mix_noise(signal: &Waveform, noise: &Waveform, scale: f64) -> Result<Waveform> {
    if signal.len() != noise.len() {
        return Err(Error::shape("mix_noise", &[signal.len()], &[noise.len()]));
    }
    let (rs, rn) = (signal.rms(), rms(&noise.samples));
    let gain = if rs == 0.0 || rn == 0.0 { 0.0 } else { scale * rs / rn };
    let samples = signal
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(&s, &v)| (s as f64 + gain * v as f64) as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: signal.sample_rate,
    })
}
