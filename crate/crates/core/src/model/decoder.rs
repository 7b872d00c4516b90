//! Stage carrying, multi-scale aggregation and the mask head.

use super::{conv, pointwise, weight_and_bias};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Graph, Var};

/// Channels of the aggregated decoder output.
pub const FUSED_CHANNELS: usize = 16;

/// Carries stage `j` to stage `j + 1`:
/// `F^{j+1}_v = conv3×3(up₂(F'_{a→v} + F'_{v→a})) + proj(skip)` and
/// `F^{j+1}_a = proj(up₂(F^j_a))`.
///
/// `fused` is `F'_{a→v} + F'_{v→a}`; `skip` is the encoder level at the next scale.
pub fn decoder_stage<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    j: usize,
    audio: Var,
    fused: Var,
    skip: Var,
) -> Result<(Var, Var)> {
    let (sf, ss) = (g.shape(fused).to_vec(), g.shape(skip).to_vec());
    if sf.len() != 5 || ss.len() != 5 || ss[3] != 2 * sf[3] || ss[4] != 2 * sf[4] || g.shape(audio) != sf.as_slice() {
        return Err(Error::shape("decoder_stage", &sf, &ss));
    }
    let (h, w) = (ss[3], ss[4]);
    let up = g.upsample_bilinear(fused, h, w)?;
    let video = conv(g, p, &format!("decoder.{j}.fuse"), up, ConvSpec::DENSE)?;
    let skip = pointwise(g, skip, weight_and_bias(p, &format!("decoder.{j}.skip"))?)?;
    let video = g.add(video, skip)?;
    let up_a = g.upsample_bilinear(audio, h, w)?;
    let audio = pointwise(g, up_a, weight_and_bias(p, &format!("decoder.{j}.audio"))?)?;
    Ok((audio, video))
}

/// `Σ_j up_max(conv1×1_j(x_j))` over per-stage features, at the finest extent among them.
pub fn aggregate_outputs<T: Scalar>(g: &mut Graph<T>, p: &Bound, stages: &[Var]) -> Result<Var> {
    let (h, w) = stages
        .iter()
        .map(|&x| (g.shape(x)[3], g.shape(x)[4]))
        .max()
        .ok_or_else(|| Error::invalid("aggregate_outputs", "no stages"))?;
    let mut total: Option<Var> = None;
    for (j, &x) in stages.iter().enumerate() {
        let y = pointwise(g, x, weight_and_bias(p, &format!("decoder.{}.out", j + 1))?)?;
        let y = g.upsample_bilinear(y, h, w)?;
        total = Some(match total {
            Some(t) => g.add(t, y)?,
            None => y,
        });
    }
    Ok(total.unwrap())
}

/// Per-pixel MLP, a 1-channel fully connected map, then bilinear upsampling to `h × w`.
pub fn mask_head<T: Scalar>(g: &mut Graph<T>, p: &Bound, fused: Var, h: usize, w: usize) -> Result<Var> {
    let x = pointwise(g, fused, weight_and_bias(p, "head.mlp")?)?;
    let x = g.relu(x)?;
    let x = pointwise(g, x, weight_and_bias(p, "head.fc")?)?;
    g.upsample_bilinear(x, h, w)
}
