//! Deterministic synthetic audio-visual clips: a circle that hums at 440 Hz, a square
//! at 880 Hz, and optionally the other shape on screen but silent.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{log_mel, mix_noise, synth_interference, Interference, Waveform, LOG_OFFSET, MEL_BINS, MEL_FRAMES, SAMPLE_RATE};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIRCLE_HZ: f64 = 440.0;
pub const SQUARE_HZ: f64 = 880.0;
/// Object half-extent range as a fraction of the frame side.
pub const SIZE_RANGE: (f64, f64) = (0.18, 0.28);
/// Log-mel values are mapped to `(x - ln 0.01) / MEL_SCALE` before the encoder.
pub const MEL_SCALE: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
}

impl Shape {
    pub fn tone_hz(self) -> f64 {
        match self {
            Shape::Circle => CIRCLE_HZ,
            Shape::Square => SQUARE_HZ,
        }
    }

    /// Whether the pixel center `(x, y)` lies inside a shape at `center` with half-extent `size`.
    fn contains(self, center: (f64, f64), size: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - center.0, y - center.1);
        match self {
            Shape::Circle => dx * dx + dy * dy <= size * size,
            Shape::Square => dx.abs() <= size && dy.abs() <= size,
        }
    }
}

/// One object's linear trajectory in normalized `[0, 1]²` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub shape: Shape,
    pub sounding: bool,
    pub start: (f64, f64),
    /// Displacement per frame.
    pub velocity: (f64, f64),
    pub size: f64,
    /// Change of `size` per frame.
    pub growth: f64,
    pub color: [f64; 3],
}

impl Track {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }

    pub fn size_at(&self, t: usize) -> f64 {
        self.size + self.growth * t as f64
    }

    /// Tone amplitude while the object has half-extent `size`.
    pub fn amplitude(size: f64) -> f64 {
        0.8 * size / SIZE_RANGE.1
    }
}

/// Which objects appear, which of them sound, and how they move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub tracks: Vec<Track>,
    pub background: f64,
}

impl SceneSpec {
    pub fn sounding(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.sounding)
    }

    pub fn has_distractor(&self) -> bool {
        self.tracks.iter().any(|t| !t.sounding)
    }

    /// A random scene for `frames` frames; objects stay inside the frame and never overlap.
    pub fn sample(seed: u64, frames: usize, cfg: &DataConfig) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let multi = rng.random_bool(cfg.multi_source);
        let first = if rng.random_bool(0.5) { Shape::Circle } else { Shape::Square };
        let other = match first {
            Shape::Circle => Shape::Square,
            Shape::Square => Shape::Circle,
        };
        let distractor = !multi && rng.random_bool(cfg.distractor);
        let mut kinds = vec![(first, true)];
        if multi || distractor {
            kinds.push((other, multi));
        }
        let background = rng.random_range(0.1..0.4);
        loop {
            let tracks: Vec<Track> = kinds.iter().map(|&(shape, sounding)| random_track(&mut rng, shape, sounding, frames)).collect();
            if tracks.len() < 2 || separated(&tracks[0], &tracks[1], frames) {
                return SceneSpec { tracks, background };
            }
        }
    }
}

fn random_track<R: Rng>(rng: &mut R, shape: Shape, sounding: bool, frames: usize) -> Track {
    let span = frames.saturating_sub(1).max(1) as f64;
    loop {
        let size = rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let end_size = rng.random_range(SIZE_RANGE.0..SIZE_RANGE.1);
        let growth = if frames > 1 { (end_size - size) / span } else { 0.0 };
        let max_size = size.max(end_size);
        let lo = max_size + 0.02;
        let start = (rng.random_range(lo..1.0 - lo), rng.random_range(lo..1.0 - lo));
        let end = (rng.random_range(lo..1.0 - lo), rng.random_range(lo..1.0 - lo));
        // cap the per-frame motion so objects drift rather than jump
        let step = 0.08;
        let velocity = (((end.0 - start.0) / span).clamp(-step, step), ((end.1 - start.1) / span).clamp(-step, step));
        let track = Track {
            shape,
            sounding,
            start,
            velocity,
            size,
            growth,
            color: [rng.random_range(0.45..1.0), rng.random_range(0.45..1.0), rng.random_range(0.45..1.0)],
        };
        let inside = (0..frames).all(|t| {
            let (c, s) = (track.center(t), track.size_at(t));
            c.0 - s >= 0.0 && c.0 + s <= 1.0 && c.1 - s >= 0.0 && c.1 + s <= 1.0
        });
        if inside {
            return track;
        }
    }
}

fn separated(a: &Track, b: &Track, frames: usize) -> bool {
    (0..frames).all(|t| {
        let (ca, cb) = (a.center(t), b.center(t));
        // bounding squares apart by a margin
        let gap = a.size_at(t) + b.size_at(t) + 0.03;
        (ca.0 - cb.0).abs() > gap || (ca.1 - cb.1).abs() > gap
    })
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `T×3×H×W` in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `T` seconds at 16 kHz.
    pub waveform: Waveform,
    /// `T×H×W`, 1 on sounding-object pixels.
    pub gt: Tensor<f32>,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Ground-truth mask of frame `t` as booleans.
    pub fn gt_mask(&self, t: usize) -> Vec<bool> {
        let hw = self.gt.shape()[1] * self.gt.shape()[2];
        self.gt.data()[t * hw..(t + 1) * hw].iter().map(|&v| v > 0.5).collect()
    }
}

/// Renders `scene` over `frames` seconds at `height × width`; `seed` drives pixel noise
/// and tone phases.
pub fn generate_clip(seed: u64, scene: &SceneSpec, frames: usize, height: usize, width: usize) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC11F_5EED);
    let (h, w) = (height, width);
    let mut pix = vec![0f32; frames * 3 * h * w];
    let mut gt = vec![0f32; frames * h * w];
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let mut rgb = [scene.background; 3];
                for tr in &scene.tracks {
                    if tr.shape.contains(tr.center(t), tr.size_at(t), px, py) {
                        rgb = tr.color;
                        if tr.sounding {
                            gt[(t * h + y) * w + x] = 1.0;
                        }
                    }
                }
                for (c, v) in rgb.iter().enumerate() {
                    let noise: f64 = rng.random_range(-0.03..0.03);
                    pix[((t * 3 + c) * h + y) * w + x] = (v + noise).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let sr = SAMPLE_RATE as usize;
    let phases: Vec<f64> = scene.tracks.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut samples = vec![0f32; frames * sr];
    for (tr, &phase) in scene.tracks.iter().zip(&phases).filter(|(tr, _)| tr.sounding) {
        for t in 0..frames {
            let amp = Track::amplitude(tr.size_at(t));
            for i in 0..sr {
                let n = t * sr + i;
                let s = amp * (2.0 * PI * tr.shape.tone_hz() * n as f64 / sr as f64 + phase).sin();
                samples[n] += s as f32;
            }
        }
    }
    Clip {
        frames: Tensor::new(&[frames, 3, h, w], pix).unwrap(),
        waveform: Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        },
        gt: Tensor::new(&[frames, h, w], gt).unwrap(),
        seed,
        scene: scene.clone(),
    }
}

/// Mixes the configured interference into a clip's audio; noise is seeded by the clip.
pub fn noisy_waveform(clip: &Clip, noise: Option<(Interference, f64)>) -> Result<Waveform> {
    match noise {
        None => Ok(clip.waveform.clone()),
        Some((kind, scale)) => {
            let n = synth_interference(kind, clip.waveform.len(), clip.seed ^ 0x0153_A11E)?;
            mix_noise(&clip.waveform, &n, scale)
        }
    }
}

/// Normalized `T×96×64` log-mel features, one spectrogram per second.
pub fn mel_features(w: &Waveform, frames: usize) -> Result<Tensor<f32>> {
    let sr = SAMPLE_RATE as usize;
    if w.len() != frames * sr {
        return Err(Error::invalid("mel_features", format!("{} samples for {frames} seconds", w.len())));
    }
    let mut data = Vec::with_capacity(frames * MEL_FRAMES * MEL_BINS);
    for t in 0..frames {
        let m = log_mel(&w.segment(t * sr, sr)?)?;
        data.extend(m.values.iter().map(|&v| ((v as f64 - LOG_OFFSET.ln()) / MEL_SCALE) as f32));
    }
    Tensor::new(&[frames, MEL_FRAMES, MEL_BINS], data)
}

/// SplitMix64 finalizer, for deriving independent per-clip seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Clips plus their precomputed audio features.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub mels: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Generates a split in parallel; the result depends only on the arguments.
    pub fn generate(cfg: &DataConfig, split: Split, height: usize, width: usize, noise: Option<(Interference, f64)>) -> Result<Dataset> {
        let (count, stream) = match split {
            Split::Train => (cfg.train_clips, 1),
            Split::Eval => (cfg.eval_clips, 2),
        };
        let items: Vec<(Clip, Tensor<f32>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(cfg.seed, stream, i as u64);
                let scene = SceneSpec::sample(seed, cfg.frames, cfg);
                let clip = generate_clip(seed, &scene, cfg.frames, height, width);
                let mel = mel_features(&noisy_waveform(&clip, noise)?, cfg.frames)?;
                Ok((clip, mel))
            })
            .collect::<Result<_>>()?;
        let (clips, mels) = items.into_iter().unzip();
        Ok(Dataset { clips, mels })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Stacks clips `indices` into model inputs.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let c0 = &self.clips[indices[0]];
        let (t, h, w) = (c0.num_frames(), c0.gt.shape()[1], c0.gt.shape()[2]);
        let b = indices.len();
        let mut frames = Vec::with_capacity(b * 3 * t * h * w);
        let mut mel = Vec::with_capacity(b * t * MEL_FRAMES * MEL_BINS);
        let mut gt = Vec::with_capacity(b * t * h * w);
        for &i in indices {
            let clip = &self.clips[i];
            // T×3×H×W to 3×T×H×W
            let fd = clip.frames.data();
            for c in 0..3 {
                for ti in 0..t {
                    let off = (ti * 3 + c) * h * w;
                    frames.extend_from_slice(&fd[off..off + h * w]);
                }
            }
            mel.extend_from_slice(self.mels[i].data());
            gt.extend_from_slice(clip.gt.data());
        }
        Batch {
            frames: Tensor::new(&[b, 3, t, h, w], frames).unwrap(),
            mel: Tensor::new(&[b, t, MEL_FRAMES, MEL_BINS], mel).unwrap(),
            gt: Tensor::new(&[b, 1, t, h, w], gt).unwrap(),
        }
    }
}

/// Model-ready tensors for a group of clips.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B×3×T×H×W`.
    pub frames: Tensor<f32>,
    /// `B×T×96×64`.
    pub mel: Tensor<f32>,
    /// `B×1×T×H×W`.
    pub gt: Tensor<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelFilterbank;

    fn cfg() -> DataConfig {
        DataConfig {
            frames: 2,
            ..DataConfig::default()
        }
    }

    /// Connected components of a binary grid (4-neighbourhood).
    fn components(mask: &[bool], h: usize, w: usize) -> usize {
        let mut seen = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = (i / w, i % w);
                let mut push = |j: usize| {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
            }
        }
        count
    }

    #[test]
    fn same_seed_same_clip() {
        let scene = SceneSpec::sample(11, 2, &cfg());
        let a = generate_clip(11, &scene, 2, 32, 32);
        let b = generate_clip(11, &SceneSpec::sample(11, 2, &cfg()), 2, 32, 32);
        assert_eq!(a, b);
        assert_ne!(a, generate_clip(12, &SceneSpec::sample(12, 2, &cfg()), 2, 32, 32));
        assert_eq!(a.frames.shape(), [2, 3, 32, 32]);
        assert_eq!(a.waveform.len(), 32_000);
        assert!(a.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn single_source_masks_are_one_component() {
        let c = DataConfig {
            multi_source: 0.0,
            ..cfg()
        };
        for seed in 0..20 {
            let scene = SceneSpec::sample(seed, 2, &c);
            assert_eq!(scene.sounding().count(), 1);
            let clip = generate_clip(seed, &scene, 2, 64, 64);
            for t in 0..2 {
                assert_eq!(components(&clip.gt_mask(t), 64, 64), 1, "seed {seed} frame {t}");
            }
        }
    }

    #[test]
    fn distractor_never_in_ground_truth() {
        let c = DataConfig {
            multi_source: 0.0,
            distractor: 1.0,
            ..cfg()
        };
        for seed in 0..10 {
            let scene = SceneSpec::sample(seed, 2, &c);
            assert!(scene.has_distractor());
            let clip = generate_clip(seed, &scene, 2, 64, 64);
            let silent = scene.tracks.iter().find(|t| !t.sounding).unwrap();
            for t in 0..2 {
                let mask = clip.gt_mask(t);
                for (i, &m) in mask.iter().enumerate() {
                    let (px, py) = (((i % 64) as f64 + 0.5) / 64.0, ((i / 64) as f64 + 0.5) / 64.0);
                    if silent.shape.contains(silent.center(t), silent.size_at(t), px, py) {
                        assert!(!m);
                    }
                }
            }
        }
    }

    fn dominant_bands(mel: &Tensor<f32>, t: usize) -> Vec<usize> {
        let mut means: Vec<(f64, usize)> = (0..MEL_BINS)
            .map(|b| ((0..MEL_FRAMES).map(|f| mel.at(&[t, f, b]) as f64).sum::<f64>(), b))
            .collect();
        means.sort_by(|a, b| b.0.total_cmp(&a.0));
        means.iter().map(|m| m.1).collect()
    }

    #[test]
    fn multi_source_shows_both_tone_bands() {
        let c = DataConfig {
            multi_source: 1.0,
            ..cfg()
        };
        let bank = MelFilterbank::standard();
        let expect = [bank.nearest_band(CIRCLE_HZ), bank.nearest_band(SQUARE_HZ)];
        for seed in 0..4 {
            let scene = SceneSpec::sample(seed, 2, &c);
            assert_eq!(scene.sounding().count(), 2);
            let clip = generate_clip(seed, &scene, 2, 32, 32);
            let mel = mel_features(&clip.waveform, 2).unwrap();
            let top = dominant_bands(&mel, 0);
            // the two strongest bands, allowing a neighbouring band per tone for filter overlap
            let near = |b: usize| top[..4].iter().any(|&x| x.abs_diff(b) <= 1);
            assert!(near(expect[0]) && near(expect[1]), "top bands {:?}, expected {expect:?}", &top[..4]);
            assert!(top[..2].iter().any(|&x| x == expect[0]) || top[..2].iter().any(|&x| x == expect[1]));
        }
    }

    #[test]
    fn tone_follows_the_sounding_shape() {
        let c = DataConfig {
            multi_source: 0.0,
            ..cfg()
        };
        let bank = MelFilterbank::standard();
        for seed in 0..6 {
            let scene = SceneSpec::sample(seed, 2, &c);
            let shape = scene.sounding().next().unwrap().shape;
            let clip = generate_clip(seed, &scene, 2, 32, 32);
            let mel = mel_features(&clip.waveform, 2).unwrap();
            assert_eq!(dominant_bands(&mel, 1)[0], bank.nearest_band(shape.tone_hz()));
        }
    }

    #[test]
    fn amplitude_grows_with_size() {
        assert!(Track::amplitude(0.2) > Track::amplitude(0.1));
        assert!((Track::amplitude(SIZE_RANGE.1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dataset_is_deterministic_and_batches_stack() {
        let c = DataConfig {
            train_clips: 6,
            eval_clips: 3,
            ..cfg()
        };
        let a = Dataset::generate(&c, Split::Train, 32, 32, None).unwrap();
        let b = Dataset::generate(&c, Split::Train, 32, 32, None).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.mels, b.mels);
        let e = Dataset::generate(&c, Split::Eval, 32, 32, None).unwrap();
        assert_eq!(e.len(), 3);
        assert_ne!(e.clips[0].seed, a.clips[0].seed);
        let batch = a.batch(&[1, 4]);
        assert_eq!(batch.frames.shape(), [2, 3, 2, 32, 32]);
        assert_eq!(batch.mel.shape(), [2, 2, 96, 64]);
        assert_eq!(batch.gt.shape(), [2, 1, 2, 32, 32]);
        // channel c, frame t of clip 4 lands at [1, c, t]
        assert_eq!(batch.frames.at(&[1, 2, 1, 5, 7]), a.clips[4].frames.at(&[1, 2, 5, 7]));
        assert_eq!(batch.gt.at(&[0, 0, 1, 3, 9]), a.clips[1].gt.at(&[1, 3, 9]));
    }

    #[test]
    fn zero_scale_noise_is_clean() {
        let scene = SceneSpec::sample(3, 2, &cfg());
        let clip = generate_clip(3, &scene, 2, 32, 32);
        let noisy = noisy_waveform(&clip, Some((Interference::Brownian, 0.0))).unwrap();
        assert_eq!(noisy, clip.waveform);
        let noisy = noisy_waveform(&clip, Some((Interference::Brownian, 0.1))).unwrap();
        assert_ne!(noisy, clip.waveform);
    }
}
