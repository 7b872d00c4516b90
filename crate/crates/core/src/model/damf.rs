//! Bidirectional cross-modal attention with spatio-temporal-channel projections.

use serde::{Deserialize, Serialize};

use super::{weight_and_bias, RmMode};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StcBranch {
    Query,
    Key,
    Value,
}

impl StcBranch {
    pub const ALL: [StcBranch; 3] = [StcBranch::Query, StcBranch::Key, StcBranch::Value];

    /// Depthwise kernel `(kt, kh, kw)`.
    pub fn kernel(self) -> [usize; 3] {
        match self {
            StcBranch::Query => [3, 3, 3],
            StcBranch::Key | StcBranch::Value => [1, 3, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StcBranch::Query => "q",
            StcBranch::Key => "k",
            StcBranch::Value => "v",
        }
    }
}

/// Which modality supplies the query of the audio-to-video attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPairing {
    /// `F_{a→v} = Attn(STC_q(F'_v), STC_k(F'_a), STC_v(F'_a))`.
    #[default]
    Printed,
    /// `F_{a→v} = Attn(STC_q(F'_a), STC_k(F'_v), STC_v(F'_v))`.
    Textual,
}

/// Which attention directions are active; an inactive direction contributes zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    #[default]
    Both,
    A2v,
    V2a,
}

/// `X ⊙ σ(W₂·ReLU(W₁·GAP(X)))`, GAP over `T, H, W`; `w1: C/r×C`, `w2: C×C/r`.
pub fn car<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::invalid("car", format!("expected a rank-5 map, got {s:?}")));
    }
    if g.shape(w1).get(1) != Some(&s[1]) || g.shape(w2).first() != Some(&s[1]) {
        return Err(Error::shape("car", &s, g.shape(w1)));
    }
    let pool = g.mean_axes(x, &[2, 3, 4])?;
    let pool = g.reshape(pool, &[s[0], s[1]])?;
    let h = g.mlp(pool, &[(w1, None), (w2, None)])?;
    let gate = g.sigmoid(h)?;
    let gate = g.reshape(gate, &[s[0], s[1], 1, 1, 1])?;
    g.mul(x, gate)
}

/// One STC projection: depthwise conv, CAR, then LayerNorm over channels.
#[derive(Clone, Copy, Debug)]
pub struct StcVars {
    pub conv: (Var, Var),
    pub car: (Var, Var),
    pub norm: (Var, Var),
}

impl StcVars {
    pub fn bind(p: &Bound, prefix: &str) -> Result<Self> {
        Ok(StcVars {
            conv: weight_and_bias(p, &format!("{prefix}.conv"))?,
            car: (p.get(&format!("{prefix}.car1"))?, p.get(&format!("{prefix}.car2"))?),
            norm: (p.get(&format!("{prefix}.norm.gamma"))?, p.get(&format!("{prefix}.norm.beta"))?),
        })
    }
}

/// `LN(CAR(dwconv(x)))`; the branch is implied by the kernel shape of `vars.conv`.
pub fn stc<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &StcVars) -> Result<Var> {
    let y = g.conv3d(x, vars.conv.0, Some(vars.conv.1), ConvSpec::DEPTHWISE)?;
    let y = car(g, y, vars.car.0, vars.car.1)?;
    g.layer_norm(y, vars.norm.0, vars.norm.1, 1, LN_EPS)
}

/// Single-head attention over the `T·H·W` positions with channels as the embedding.
/// Returns the `B×C×T×H×W` output (shaped like `q`) and the `B×Nq×Nk` weights.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 5 || sk.len() != 5 || sv.len() != 5 || sq[..2] != sk[..2] || sk[..2] != sv[..2] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let tokens = |s: &[usize]| s[2..].iter().product::<usize>();
    if tokens(&sk) != tokens(&sv) {
        return Err(Error::shape("attention", &sk, &sv));
    }
    let (b, c) = (sq[0], sq[1]);
    let q2 = g.reshape(q, &[b, c, tokens(&sq)])?;
    let k2 = g.reshape(k, &[b, c, tokens(&sk)])?;
    let v2 = g.reshape(v, &[b, c, tokens(&sv)])?;
    let scores = g.matmul_t(q2, k2, true, false)?;
    let scores = g.scale(scores, T::of(1.0 / (c as f64).sqrt()))?;
    let weights = g.softmax(scores)?;
    // (weights · Vᵀ)ᵀ = V · weightsᵀ keeps the channel-major layout
    let out = g.matmul_t(v2, weights, false, true)?;
    let out = g.reshape(out, &sq)?;
    Ok((out, weights))
}

pub fn cross_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention(g, q, k, v)?.0)
}

/// Combines an attention output with its residual operand.
pub fn residual_multiply<T: Scalar>(g: &mut Graph<T>, attn: Var, residual: Var, mode: RmMode) -> Result<Var> {
    match mode {
        RmMode::Straight => Ok(attn),
        RmMode::Add => g.add(attn, residual),
        RmMode::Mul => g.mul(attn, residual),
    }
}

/// Shared q/k/v projections; `None` when STC is disabled (identity projections).
#[derive(Clone, Copy, Debug)]
pub struct DamfVars {
    pub stc: Option<[StcVars; 3]>,
}

impl DamfVars {
    pub fn bind(p: &Bound, prefix: &str, stc: bool) -> Result<Self> {
        let stc = if stc {
            Some([
                StcVars::bind(p, &format!("{prefix}.stc_q"))?,
                StcVars::bind(p, &format!("{prefix}.stc_k"))?,
                StcVars::bind(p, &format!("{prefix}.stc_v"))?,
            ])
        } else {
            None
        };
        Ok(DamfVars { stc })
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, x: Var, branch: StcBranch) -> Result<Var> {
        match &self.stc {
            Some(s) => stc(g, x, &s[branch as usize]),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DamfOptions {
    pub rm: RmMode,
    pub branch: Branch,
    pub pairing: QueryPairing,
}

#[derive(Clone, Copy, Debug)]
pub struct DamfOutput {
    /// `F_{a→v}`, absent when that direction is disabled.
    pub a2v: Option<Var>,
    pub v2a: Option<Var>,
    /// `F'_{a→v}`; zeros when that direction is disabled.
    pub a2v_fused: Var,
    pub v2a_fused: Var,
}

/// Both attention directions followed by residual combination with the pre-attention
/// features: `F'_{a→v} = RM(F_{a→v}, F'_a)` and `F'_{v→a} = RM(F_{v→a}, F'_v)`.
pub fn damf_fuse<T: Scalar>(
    g: &mut Graph<T>,
    vars: &DamfVars,
    fv: Var,
    fa: Var,
    opts: DamfOptions,
) -> Result<DamfOutput> {
    if g.shape(fv) != g.shape(fa) {
        return Err(Error::shape("damf_fuse", g.shape(fv), g.shape(fa)));
    }
    // (query, key/value source) for each direction
    let (a2v_io, v2a_io) = match opts.pairing {
        QueryPairing::Printed => ((fv, fa), (fa, fv)),
        QueryPairing::Textual => ((fa, fv), (fv, fa)),
    };
    let direction = |g: &mut Graph<T>, query: Var, other: Var, residual: Var| -> Result<(Var, Var)> {
        let q = vars.project(g, query, StcBranch::Query)?;
        let k = vars.project(g, other, StcBranch::Key)?;
        let v = vars.project(g, other, StcBranch::Value)?;
        let out = cross_attention(g, q, k, v)?;
        Ok((out, residual_multiply(g, out, residual, opts.rm)?))
    };
    let shape = g.shape(fv).to_vec();
    let a2v = match opts.branch {
        Branch::Both | Branch::A2v => Some(direction(g, a2v_io.0, a2v_io.1, fa)?),
        Branch::V2a => None,
    };
    let v2a = match opts.branch {
        Branch::Both | Branch::V2a => Some(direction(g, v2a_io.0, v2a_io.1, fv)?),
        Branch::A2v => None,
    };
    let mut zeros = || g.constant(Tensor::zeros(&shape));
    Ok(DamfOutput {
        a2v: a2v.map(|d| d.0),
        v2a: v2a.map(|d| d.0),
        a2v_fused: match a2v {
            Some(d) => d.1,
            None => zeros()?,
        },
        v2a_fused: match v2a {
            Some(d) => d.1,
            None => zeros()?,
        },
    })
}
