//! Small convolutional stand-ins for the visual and audio backbones.

use rand::Rng;

use super::conv;
use crate::error::{Error, Result};
use crate::params::{Bound, Init};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

/// Stride-2 stages in the audio encoder.
pub const AUDIO_STAGES: usize = 3;
/// `(frame, mel)` extents of the audio feature for a `96 × 64` spectrogram.
pub const AUDIO_GRID: (usize, usize) = (12, 8);
const AUDIO_WIDTHS: [usize; 2] = [16, 32];
/// First-stage weights applied to the mel-position ramp.
pub const MEL_POSITION: &str = "audio.s1.mel_position";

/// Four video feature levels; `levels[i]` is `B×C_i×T×(H/2^(i+2))×(W/2^(i+2))`.
#[derive(Clone, Copy, Debug)]
pub struct VideoPyramid {
    pub levels: [Var; 4],
}

pub fn init_visual<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, channels: &[usize; 4]) {
    init.conv("visual.stem", [channels[0], 3, 1, 3, 3]);
    let mut cin = channels[0];
    for (i, &c) in channels.iter().enumerate() {
        init.conv(&format!("visual.s{}.down", i + 1), [c, cin, 1, 3, 3]);
        init.conv(&format!("visual.s{}.conv", i + 1), [c, c, 1, 3, 3]);
        cin = c;
    }
}

/// `frames: B×3×T×H×W` with `H`, `W` divisible by 32.
pub fn visual_encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, frames: Var) -> Result<VideoPyramid> {
    let s = g.shape(frames).to_vec();
    if s.len() != 5 || s[1] != 3 {
        return Err(Error::invalid("visual_encode", format!("expected B×3×T×H×W, got {s:?}")));
    }
    if s[3] % 32 != 0 || s[4] % 32 != 0 || s[3] == 0 || s[4] == 0 {
        return Err(Error::invalid(
            "visual_encode",
            format!("frame extents {}×{} are not multiples of 32", s[3], s[4]),
        ));
    }
    let stem = conv(g, p, "visual.stem", frames, ConvSpec::DOWN2)?;
    let mut x = g.relu(stem)?;
    let mut levels = Vec::with_capacity(4);
    for i in 1..=4 {
        let d = conv(g, p, &format!("visual.s{i}.down"), x, ConvSpec::DOWN2)?;
        let d = g.relu(d)?;
        x = conv(g, p, &format!("visual.s{i}.conv"), d, ConvSpec::DENSE)?;
        levels.push(x);
    }
    Ok(VideoPyramid {
        levels: levels.try_into().unwrap(),
    })
}

pub fn init_audio<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, audio_channels: usize) {
    let widths = [1, AUDIO_WIDTHS[0], AUDIO_WIDTHS[1], audio_channels];
    for i in 0..AUDIO_STAGES {
        init.conv(&format!("audio.s{}", i + 1), [widths[i + 1], widths[i], 1, 3, 3]);
    }
    init.weight(MEL_POSITION, &[widths[1], 1, 1, 3, 3]);
}

/// `1×1×1×96×64` ramp from -1 to 1 along the mel axis. Convolutions alone cannot tell
/// a 440 Hz tone from an 880 Hz one once features are pooled; this input can.
fn mel_ramp<T: Scalar>() -> Tensor<T> {
    let data = (0..96 * 64).map(|i| T::of(2.0 * ((i % 64) as f64 + 0.5) / 64.0 - 1.0)).collect();
    Tensor::new(&[1, 1, 1, 96, 64], data).unwrap()
}

/// `spectrograms: B×T×96×64` to `B×C_a×T×12×8`.
pub fn audio_encode<T: Scalar>(g: &mut Graph<T>, p: &Bound, spectrograms: Var) -> Result<Var> {
    let s = g.shape(spectrograms).to_vec();
    if s.len() != 4 || s[2] != 96 || s[3] != 64 {
        return Err(Error::invalid(
            "audio_encode",
            format!("expected B×T×96×64 spectrograms, got {s:?}"),
        ));
    }
    let mut x = g.reshape(spectrograms, &[s[0], 1, s[1], 96, 64])?;
    let ramp = g.constant(mel_ramp())?;
    let position = g.conv3d(ramp, p.get(MEL_POSITION)?, None, ConvSpec::DOWN2)?;
    for i in 1..=AUDIO_STAGES {
        x = conv(g, p, &format!("audio.s{i}"), x, ConvSpec::DOWN2)?;
        if i == 1 {
            x = g.add(x, position)?;
        }
        if i < AUDIO_STAGES {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}
