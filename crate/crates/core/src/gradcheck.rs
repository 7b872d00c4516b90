//! Finite-difference verification of graph gradients.
//!
//! An [`Expr`] builds a scalar loss from leaf inputs for any [`Scalar`], so the same
//! expression can be differentiated in `f32` and re-evaluated on an `f64` shadow
//! path for the numeric side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::damf::{car, cross_attention, damf_fuse, residual_multiply, stc, DamfOptions, DamfVars, StcVars};
use crate::model::snrp::{snrp_forward, SnrpVars};
use crate::model::{compute_loss, RmMode};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Tensor, Var};

/// A scalar-valued expression of its leaf inputs.
pub trait Expr {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

/// Worst-case comparison of one input's analytic and numeric gradient.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_abs_diff: f64,
    pub scale: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

/// Gradient magnitudes below this are compared absolutely.
const SCALE_FLOOR: f64 = 1e-4;
/// Inputs with gradients below this fraction of the largest one are compared at that level.
const VANISHING_FRACTION: f64 = 1e-3;

fn forward_value<E: Expr>(expr: &E, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = expr.eval(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `expr` evaluated in `T`, one per input.
pub fn analytic<T: Scalar, E: Expr>(expr: &E, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<T>::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let out = expr.eval(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .map(|gr| gr.cast::<f64>())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Central differences on the `f64` shadow path for the listed `(input, element)` pairs,
/// or every element when `subset` is `None`.
pub fn numeric<E: Expr>(
    expr: &E,
    inputs: &[Tensor<f64>],
    h: f64,
    subset: Option<&[(usize, usize)]>,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let all: Vec<(usize, usize)>;
    let picks = match subset {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut out = vec![Vec::new(); inputs.len()];
    let mut work = inputs.to_vec();
    for &(i, j) in picks {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = forward_value(expr, &work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = forward_value(expr, &work)?;
        work[i].data_mut()[j] = orig;
        out[i].push((j, (fp - fm) / (2.0 * h)));
    }
    Ok(out)
}

/// Compares analytic gradients in `T` against `f64` central differences.
pub fn check<T: Scalar, E: Expr>(
    expr: &E,
    inputs: &[Tensor<f64>],
    h: f64,
    subset: Option<&[(usize, usize)]>,
) -> Result<GradReport> {
    let an = analytic::<T, E>(expr, inputs)?;
    let num = numeric(expr, inputs, h, subset)?;
    let stats: Vec<(f64, f64)> = an
        .iter()
        .zip(&num)
        .map(|(a, n)| {
            n.iter().fold((0.0f64, 0.0f64), |(diff, scale), &(j, nv)| {
                let av = a.data()[j];
                (diff.max((av - nv).abs()), scale.max(av.abs()).max(nv.abs()))
            })
        })
        .collect();
    // an input whose true gradient vanishes is judged against the expression's gradient scale
    let overall = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    let floor = SCALE_FLOOR.max(overall * VANISHING_FRACTION);
    let reports = stats
        .iter()
        .zip(&num)
        .filter(|(_, n)| !n.is_empty())
        .map(|(&(diff, scale), _)| InputReport {
            max_abs_diff: diff,
            scale,
            rel_err: diff / scale.max(floor),
        })
        .collect();
    Ok(GradReport { inputs: reports })
}

/// Reduces a tensor-valued output to a scalar through fixed pseudo-random weights,
/// so every output element contributes a distinct gradient.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let w: Vec<f64> = (0..n)
        .map(|_| {
            // xorshift64*
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            let r = state.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 11;
            r as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let wv = g.constant(Tensor::from_f64(&shape, &w)?)?;
    let p = g.mul(x, wv)?;
    g.sum(p)
}

/// Uniform values in [-1, 1) nudged to |x| >= 0.1, away from relu kinks.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::uniform(shape, 1.0, &mut rng).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// One small random instance of each differentiable op, reduced by [`weighted_sum`].
#[derive(Clone, Copy, Debug)]
pub enum OpCase {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Relu,
    Softplus,
    MatMul,
    MatMulT,
    Softmax,
    LayerNorm,
    ConvDense,
    ConvStrided,
    ConvDepthwise,
    Conv2d,
    GlobalAvgPool,
    Mean,
    Upsample,
    Linear,
    Permute,
}

impl OpCase {
    pub const ALL: [OpCase; 20] = [
        OpCase::Add,
        OpCase::Sub,
        OpCase::Mul,
        OpCase::Div,
        OpCase::Sigmoid,
        OpCase::Relu,
        OpCase::Softplus,
        OpCase::MatMul,
        OpCase::MatMulT,
        OpCase::Softmax,
        OpCase::LayerNorm,
        OpCase::ConvDense,
        OpCase::ConvStrided,
        OpCase::ConvDepthwise,
        OpCase::Conv2d,
        OpCase::GlobalAvgPool,
        OpCase::Mean,
        OpCase::Upsample,
        OpCase::Linear,
        OpCase::Permute,
    ];

    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let r = |s: &[usize], k: u64| random_input(s, seed * 100 + k);
        match self {
            OpCase::Add | OpCase::Sub | OpCase::Mul => vec![r(&[2, 3, 1], 1), r(&[1, 3, 4], 2)],
            OpCase::Div => vec![r(&[2, 3, 4], 1), r(&[3, 1], 2).map(|v| v.signum() * (1.0 + v.abs()))],
            OpCase::Sigmoid | OpCase::Relu | OpCase::Softplus => vec![r(&[4, 8], 1).map(|v| 3.0 * v)],
            OpCase::MatMul => vec![r(&[2, 3, 4], 1), r(&[4, 5], 2)],
            OpCase::MatMulT => vec![r(&[2, 4, 3], 1), r(&[2, 5, 4], 2)],
            OpCase::Softmax => vec![r(&[3, 6], 1).map(|v| 2.0 * v)],
            OpCase::LayerNorm => vec![r(&[2, 4, 2, 3], 1), r(&[4], 2), r(&[4], 3)],
            OpCase::ConvDense => vec![r(&[1, 2, 3, 3, 3], 1), r(&[2, 2, 3, 3, 3], 2), r(&[2], 3)],
            OpCase::ConvStrided => vec![r(&[1, 2, 2, 5, 4], 1), r(&[3, 2, 1, 3, 3], 2), r(&[3], 3)],
            OpCase::ConvDepthwise => vec![r(&[1, 2, 3, 3, 3], 1), r(&[2, 1, 3, 3, 3], 2), r(&[2], 3)],
            OpCase::Conv2d => vec![r(&[2, 2, 4, 4], 1), r(&[2, 2, 3, 3], 2)],
            OpCase::GlobalAvgPool => vec![r(&[2, 2, 2, 3, 4], 1)],
            OpCase::Mean => vec![r(&[2, 3, 4], 1)],
            OpCase::Upsample => vec![r(&[2, 3, 4], 1)],
            OpCase::Linear => vec![r(&[3, 4], 1), r(&[5, 4], 2), r(&[5], 3)],
            OpCase::Permute => vec![r(&[2, 3, 4], 1)],
        }
    }
}

impl Expr for OpCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = match self {
            OpCase::Add => g.add(v[0], v[1])?,
            OpCase::Sub => g.sub(v[0], v[1])?,
            OpCase::Mul => g.mul(v[0], v[1])?,
            OpCase::Div => g.div(v[0], v[1])?,
            OpCase::Sigmoid => g.sigmoid(v[0])?,
            OpCase::Relu => g.relu(v[0])?,
            OpCase::Softplus => g.softplus(v[0])?,
            OpCase::MatMul => g.matmul(v[0], v[1])?,
            OpCase::MatMulT => g.matmul_t(v[0], v[1], true, true)?,
            OpCase::Softmax => g.softmax(v[0])?,
            OpCase::LayerNorm => g.layer_norm(v[0], v[1], v[2], 1, 1e-5)?,
            OpCase::ConvDense => g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::DENSE)?,
            OpCase::ConvStrided => g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::DOWN2)?,
            OpCase::ConvDepthwise => g.conv3d(v[0], v[1], Some(v[2]), ConvSpec::DEPTHWISE)?,
            OpCase::Conv2d => g.conv2d(v[0], v[1], None, 1)?,
            OpCase::GlobalAvgPool => g.global_avg_pool(v[0])?,
            OpCase::Mean => g.mean_axes(v[0], &[0, 2])?,
            OpCase::Upsample => g.upsample_bilinear(v[0], 5, 7)?,
            OpCase::Linear => g.linear(v[0], v[1], Some(v[2]))?,
            OpCase::Permute => g.permute(v[0], &[2, 0, 1])?,
        };
        weighted_sum(g, y, 7)
    }
}


/// Small random instances of each composed network block.
#[derive(Clone, Copy, Debug)]
pub enum ModuleCase {
    Snrp,
    Car,
    StcQuery,
    StcKey,
    Attention,
    ResidualMultiply,
    Damf,
    Loss,
}

impl ModuleCase {
    pub const ALL: [ModuleCase; 8] = [
        ModuleCase::Snrp,
        ModuleCase::Car,
        ModuleCase::StcQuery,
        ModuleCase::StcKey,
        ModuleCase::Attention,
        ModuleCase::ResidualMultiply,
        ModuleCase::Damf,
        ModuleCase::Loss,
    ];

    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let r = |s: &[usize], k: u64| random_input(s, seed * 100 + k);
        let stc = |kt: usize, k: u64| {
            vec![
                r(&[4, 1, kt, 3, 3], k),
                r(&[4], k + 1),
                r(&[1, 4], k + 2),
                r(&[4, 1], k + 3),
                r(&[4], k + 4).map(|v| 1.0 + 0.5 * v),
                r(&[4], k + 5),
            ]
        };
        match self {
            ModuleCase::Snrp => vec![
                r(&[1, 4, 2, 3, 2], 1),
                r(&[1, 4, 2, 4, 4], 2),
                r(&[4, 4, 1, 1, 1], 3),
                r(&[4], 4),
                r(&[1, 4, 1, 1, 1], 5),
                r(&[1], 6),
                r(&[4, 1, 1, 1, 1], 7),
                r(&[4], 8),
                r(&[1, 4, 1, 3, 3], 9),
                r(&[1], 10),
            ],
            ModuleCase::Car => vec![r(&[2, 4, 2, 2, 2], 1), r(&[1, 4], 2), r(&[4, 1], 3)],
            ModuleCase::StcQuery => [vec![r(&[1, 4, 3, 2, 2], 1)], stc(3, 10)].concat(),
            ModuleCase::StcKey => [vec![r(&[1, 4, 3, 2, 2], 1)], stc(1, 10)].concat(),
            ModuleCase::Attention => vec![r(&[1, 4, 2, 2, 2], 1), r(&[1, 4, 1, 2, 3], 2), r(&[1, 4, 1, 2, 3], 3)],
            ModuleCase::ResidualMultiply => vec![r(&[1, 3, 2, 2, 2], 1), r(&[1, 3, 2, 2, 2], 2)],
            ModuleCase::Damf => [
                vec![r(&[1, 4, 2, 2, 2], 1), r(&[1, 4, 2, 2, 2], 2)],
                stc(3, 10),
                stc(1, 20),
                stc(1, 30),
            ]
            .concat(),
            ModuleCase::Loss => vec![r(&[2, 2], 1).map(|v| 2.0 * v)],
        }
    }
}

fn stc_vars(v: &[Var]) -> StcVars {
    StcVars {
        conv: (v[0], v[1]),
        car: (v[2], v[3]),
        norm: (v[4], v[5]),
    }
}

impl Expr for ModuleCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let y = match self {
            ModuleCase::Snrp => {
                let vars = SnrpVars {
                    proj: (v[2], v[3]),
                    cfs: Some([(v[4], v[5]), (v[6], v[7])]),
                    sfs: Some((v[8], v[9])),
                };
                let out = snrp_forward(g, &vars, v[0], v[1], true)?;
                let a = weighted_sum(g, out.audio, 3)?;
                let b = weighted_sum(g, out.video, 7)?;
                return g.add(a, b);
            }
            ModuleCase::Car => car(g, v[0], v[1], v[2])?,
            ModuleCase::StcQuery | ModuleCase::StcKey => stc(g, v[0], &stc_vars(&v[1..]))?,
            ModuleCase::Attention => cross_attention(g, v[0], v[1], v[2])?,
            ModuleCase::ResidualMultiply => residual_multiply(g, v[0], v[1], RmMode::Mul)?,
            ModuleCase::Damf => {
                let vars = DamfVars {
                    stc: Some([stc_vars(&v[2..8]), stc_vars(&v[8..14]), stc_vars(&v[14..20])]),
                };
                let out = damf_fuse(g, &vars, v[0], v[1], DamfOptions::default())?;
                let a = weighted_sum(g, out.a2v_fused, 3)?;
                let b = weighted_sum(g, out.v2a_fused, 7)?;
                return g.add(a, b);
            }
            ModuleCase::Loss => {
                let gt = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 1.0])?)?;
                return Ok(compute_loss(g, v[0], gt)?.total);
            }
        };
        weighted_sum(g, y, 7)
    }
}
