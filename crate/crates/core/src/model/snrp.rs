//! Audio-driven channel and spatial gating of video features.

use super::{pointwise, weight_and_bias};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Var};

/// Reduction ratio of the channel-selector MLP.
pub const REDUCTION: usize = 4;

/// Graph nodes of one stage's SNRP parameters. Disabled selectors have no parameters.
#[derive(Clone, Copy, Debug)]
pub struct SnrpVars {
    pub proj: (Var, Var),
    pub cfs: Option<[(Var, Var); 2]>,
    pub sfs: Option<(Var, Var)>,
}

impl SnrpVars {
    pub fn bind(p: &Bound, prefix: &str, cfs: bool, sfs: bool) -> Result<Self> {
        Ok(SnrpVars {
            proj: weight_and_bias(p, &format!("{prefix}.proj"))?,
            cfs: if cfs {
                Some([
                    weight_and_bias(p, &format!("{prefix}.cfs1"))?,
                    weight_and_bias(p, &format!("{prefix}.cfs2"))?,
                ])
            } else {
                None
            },
            sfs: if sfs {
                Some(weight_and_bias(p, &format!("{prefix}.sfs"))?)
            } else {
                None
            },
        })
    }
}

/// Resizes `fa` to the video grid and maps its channels with a 1×1 conv.
pub fn project_audio<T: Scalar>(g: &mut Graph<T>, fa: Var, target: &[usize], proj: (Var, Var)) -> Result<Var> {
    let s = g.shape(fa).to_vec();
    if s.len() != 5 || target.len() != 5 || s[0] != target[0] || s[2] != target[2] {
        return Err(Error::shape("project_audio", &s, target));
    }
    let up = g.upsample_bilinear(fa, target[3], target[4])?;
    let out = pointwise(g, up, proj)?;
    if g.shape(out)[1] != target[1] {
        return Err(Error::shape("project_audio", g.shape(out), target));
    }
    Ok(out)
}

/// `gate_c = σ(MLP(GAP(F'_a)))`, returned with `F_v ⊙ gate_c`.
pub fn channel_selector<T: Scalar>(
    g: &mut Graph<T>,
    fa: Var,
    fv: Var,
    mlp: [(Var, Var); 2],
) -> Result<(Var, Var)> {
    if g.shape(fa) != g.shape(fv) {
        return Err(Error::shape("channel_selector", g.shape(fa), g.shape(fv)));
    }
    let pool = g.global_avg_pool(fa)?;
    let h = pointwise(g, pool, mlp[0])?;
    let h = g.relu(h)?;
    let h = pointwise(g, h, mlp[1])?;
    let gate = g.sigmoid(h)?;
    let out = g.mul(fv, gate)?;
    Ok((gate, out))
}

/// `gate_s = σ(conv3×3(F'_a))` collapsing channels to one map, returned with `F̃_v ⊙ gate_s`.
pub fn spatial_selector<T: Scalar>(g: &mut Graph<T>, fa: Var, fv: Var, conv: (Var, Var)) -> Result<(Var, Var)> {
    let (sa, sv) = (g.shape(fa).to_vec(), g.shape(fv).to_vec());
    if sa.len() != 5 || sa[0] != sv[0] || sa[2..] != sv[2..] {
        return Err(Error::shape("spatial_selector", &sa, &sv));
    }
    let logits = g.conv3d(fa, conv.0, Some(conv.1), ConvSpec::DENSE)?;
    let gate = g.sigmoid(logits)?;
    let out = g.mul(fv, gate)?;
    Ok((gate, out))
}

#[derive(Clone, Copy, Debug)]
pub struct SnrpOutput {
    /// Projected audio `F'_a`.
    pub audio: Var,
    /// Gated video `F'_v` (ungated when `gate` is false).
    pub video: Var,
    /// `B×C×T×1×1`; `None` means identically 1.
    pub gate_c: Option<Var>,
    /// `B×1×T×H×W`; `None` means identically 1.
    pub gate_s: Option<Var>,
}

/// Projection, then CFS and SFS. With `gate == false` the gates are computed but the
/// video is passed through, so they can be applied later.
pub fn snrp_forward<T: Scalar>(g: &mut Graph<T>, vars: &SnrpVars, fa: Var, fv: Var, gate: bool) -> Result<SnrpOutput> {
    let target = g.shape(fv).to_vec();
    let audio = project_audio(g, fa, &target, vars.proj)?;
    let mut video = fv;
    let mut gate_c = None;
    let mut gate_s = None;
    if let Some(mlp) = vars.cfs {
        let (gc, v) = channel_selector(g, audio, video, mlp)?;
        gate_c = Some(gc);
        video = v;
    }
    if let Some(conv) = vars.sfs {
        let (gs, v) = spatial_selector(g, audio, video, conv)?;
        gate_s = Some(gs);
        video = v;
    }
    Ok(SnrpOutput {
        audio,
        video: if gate { video } else { fv },
        gate_c,
        gate_s,
    })
}

/// Applies both gates of `out` to `x`.
pub fn apply_gates<T: Scalar>(g: &mut Graph<T>, out: &SnrpOutput, x: Var) -> Result<Var> {
    let mut y = x;
    for gate in [out.gate_c, out.gate_s].into_iter().flatten() {
        y = g.mul(y, gate)?;
    }
    Ok(y)
}
