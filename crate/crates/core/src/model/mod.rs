//! The segmentation network: encoders, per-stage SNRP and DAMF, decoder and mask head.

pub mod damf;
pub mod decoder;
pub mod encoders;
pub mod loss;
pub mod snrp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use damf::{Branch, DamfOptions, QueryPairing};
pub use encoders::VideoPyramid;
pub use loss::{compute_loss, LossBreakdown, LossVars};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Tensor, Var};
use damf::DamfVars;
use snrp::{SnrpVars, REDUCTION};

/// Shrinks the initial weights of the final mask projection.
pub const HEAD_INIT_SCALE: f64 = 0.01;

/// Where SNRP gates are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrpMode {
    /// Gate video features before fusion.
    #[default]
    On,
    /// No gating; the audio projection is kept.
    Off,
    /// Gate the fused outputs instead of the fusion inputs.
    Post,
}

/// How an attention output is combined with its residual operand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmMode {
    Straight,
    Add,
    #[default]
    Mul,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Video channels of encoder levels 1..4 (finest first).
    pub channels: [usize; 4],
    pub audio_channels: usize,
    pub snrp: SnrpMode,
    pub cfs: bool,
    pub sfs: bool,
    pub damf: bool,
    pub stc: bool,
    pub rm: RmMode,
    pub branch: Branch,
    pub pairing: QueryPairing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            channels: [16, 32, 64, 128],
            audio_channels: 64,
            snrp: SnrpMode::On,
            cfs: true,
            sfs: true,
            damf: true,
            stc: true,
            rm: RmMode::Mul,
            branch: Branch::Both,
            pairing: QueryPairing::Printed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return bad(format!("frame size {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.channels.iter().chain([&self.audio_channels]).any(|&c| c == 0 || c % REDUCTION != 0) {
            return bad(format!("channel counts must be positive multiples of {REDUCTION}"));
        }
        Ok(())
    }

    fn gated(&self) -> (bool, bool) {
        match self.snrp {
            SnrpMode::Off => (false, false),
            _ => (self.cfs, self.sfs),
        }
    }

    /// Channels of decoder stage `j` (1 = coarsest).
    pub fn stage_channels(&self, j: usize) -> usize {
        self.channels[4 - j]
    }
}

/// `name.weight` / `name.bias` of a conv.
pub(crate) fn weight_and_bias(p: &Bound, name: &str) -> Result<(Var, Var)> {
    Ok((p.get(&format!("{name}.weight"))?, p.get(&format!("{name}.bias"))?))
}

pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let (w, b) = weight_and_bias(p, name)?;
    g.conv3d(x, w, Some(b), spec)
}

/// 1×1×1 conv.
pub(crate) fn pointwise<T: Scalar>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    g.conv3d(x, w, Some(b), ConvSpec::DENSE)
}

/// Finest-stage features around the fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    /// `F'_a` entering fusion.
    pub audio_before: Var,
    /// `F'_v` entering fusion.
    pub video_before: Var,
    /// `F'_{a→v}` leaving fusion.
    pub audio_after: Var,
    /// `F'_{v→a}` leaving fusion.
    pub video_after: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `B×1×T×H×W`.
    pub logits: Var,
    pub trace: FusionTrace,
}

/// Parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        encoders::init_visual(&mut init, &config.channels);
        encoders::init_audio(&mut init, config.audio_channels);
        let (cfs, sfs) = config.gated();
        for j in 1..=4 {
            let c = config.stage_channels(j);
            let cin_audio = if j == 1 { config.audio_channels } else { c };
            init.conv(&format!("stage{j}.snrp.proj"), [c, cin_audio, 1, 1, 1]);
            if cfs {
                init.conv(&format!("stage{j}.snrp.cfs1"), [c / REDUCTION, c, 1, 1, 1]);
                init.conv(&format!("stage{j}.snrp.cfs2"), [c, c / REDUCTION, 1, 1, 1]);
            }
            if sfs {
                init.conv(&format!("stage{j}.snrp.sfs"), [1, c, 1, 3, 3]);
            }
            if config.damf && config.stc {
                for branch in damf::StcBranch::ALL {
                    let prefix = format!("stage{j}.damf.stc_{}", branch.name());
                    let [kt, kh, kw] = branch.kernel();
                    init.conv(&format!("{prefix}.conv"), [c, 1, kt, kh, kw]);
                    init.weight(&format!("{prefix}.car1"), &[c / REDUCTION, c]);
                    init.weight(&format!("{prefix}.car2"), &[c, c / REDUCTION]);
                    init.ones(&format!("{prefix}.norm.gamma"), &[c]);
                    init.zeros(&format!("{prefix}.norm.beta"), &[c]);
                }
            }
            if j < 4 {
                let next = config.stage_channels(j + 1);
                init.conv(&format!("decoder.{j}.fuse"), [next, c, 1, 3, 3]);
                init.conv(&format!("decoder.{j}.skip"), [next, next, 1, 1, 1]);
                init.conv(&format!("decoder.{j}.audio"), [next, c, 1, 1, 1]);
            }
            init.conv(&format!("decoder.{j}.out"), [decoder::FUSED_CHANNELS, c, 1, 1, 1]);
        }
        init.conv("head.mlp", [decoder::FUSED_CHANNELS, decoder::FUSED_CHANNELS, 1, 1, 1]);
        init.conv("head.fc", [1, decoder::FUSED_CHANNELS, 1, 1, 1]);
        // near-zero initial logits, so training starts from p ≈ 0.5 everywhere
        for v in store.get_mut("head.fc.weight")?.data_mut() {
            *v *= T::of(HEAD_INIT_SCALE);
        }
        Ok(Model { config, params: store })
    }

    /// `frames: B×3×T×H×W`, `mel: B×T×96×64`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, frames: Var, mel: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let fs = g.shape(frames).to_vec();
        if fs.len() != 5 || fs[3] != cfg.height || fs[4] != cfg.width {
            return Err(Error::invalid(
                "forward",
                format!("frames {fs:?} do not match the configured {}x{}", cfg.height, cfg.width),
            ));
        }
        let pyramid = encoders::visual_encode(g, p, frames)?;
        let mut audio = encoders::audio_encode(g, p, mel)?;
        let mut video = pyramid.levels[3];
        let (cfs, sfs) = cfg.gated();
        let opts = DamfOptions {
            rm: cfg.rm,
            branch: cfg.branch,
            pairing: cfg.pairing,
        };
        let mut stage_sums = Vec::with_capacity(4);
        let mut trace = None;
        for j in 1..=4 {
            let vars = SnrpVars::bind(p, &format!("stage{j}.snrp"), cfs, sfs)?;
            let s = snrp::snrp_forward(g, &vars, audio, video, cfg.snrp == SnrpMode::On)?;
            let (mut a2v, mut v2a) = if cfg.damf {
                let dv = DamfVars::bind(p, &format!("stage{j}.damf"), cfg.stc)?;
                let d = damf::damf_fuse(g, &dv, s.video, s.audio, opts)?;
                (d.a2v_fused, d.v2a_fused)
            } else {
                (s.audio, s.video)
            };
            if cfg.snrp == SnrpMode::Post {
                a2v = snrp::apply_gates(g, &s, a2v)?;
                v2a = snrp::apply_gates(g, &s, v2a)?;
            }
            let fused = g.add(a2v, v2a)?;
            stage_sums.push(fused);
            if j < 4 {
                (audio, video) = decoder::decoder_stage(g, p, j, s.audio, fused, pyramid.levels[3 - j])?;
            } else {
                trace = Some(FusionTrace {
                    audio_before: s.audio,
                    video_before: s.video,
                    audio_after: a2v,
                    video_after: v2a,
                });
            }
        }
        let fused = decoder::aggregate_outputs(g, p, &stage_sums)?;
        let logits = decoder::mask_head(g, p, fused, cfg.height, cfg.width)?;
        Ok(ForwardOutput {
            logits,
            trace: trace.unwrap(),
        })
    }

    /// Inference-only forward returning the logits tensor.
    pub fn predict(&self, frames: &Tensor<T>, mel: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        let f = g.constant(frames.clone())?;
        let m = g.constant(mel.clone())?;
        let out = self.forward(&mut g, &p, f, m)?;
        Ok(g.value(out.logits).clone())
    }
}
