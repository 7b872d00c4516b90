//! Mask overlap metrics and feature-consistency statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Precision weight of the F-measure.
pub const BETA_SQ: f64 = 0.3;
/// Lower clamp on `Q` inside the KL divergence.
pub const KL_CLAMP: f64 = 1e-12;

/// Predicted and ground-truth binary masks of equal size.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a> {
    pub pred: &'a [bool],
    pub gt: &'a [bool],
}

impl<'a> MaskPair<'a> {
    pub fn new(pred: &'a [bool], gt: &'a [bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("mask_pair", &[pred.len()], &[gt.len()]));
        }
        Ok(MaskPair { pred, gt })
    }

    /// `(|pred ∩ gt|, |pred|, |gt|)`.
    fn counts(&self) -> (usize, usize, usize) {
        self.pred.iter().zip(self.gt).fold((0, 0, 0), |(i, p, g), (&a, &b)| {
            (i + (a && b) as usize, p + a as usize, g + b as usize)
        })
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(m: &MaskPair) -> f64 {
    let (inter, p, g) = m.counts();
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(1+β²)·P·R / (β²·P + R)`; 1 when both masks are empty, 0 when `P + R = 0`.
pub fn f_measure(m: &MaskPair, beta_sq: f64) -> f64 {
    let (inter, p, g) = m.counts();
    if p == 0 && g == 0 {
        return 1.0;
    }
    let precision = if p == 0 { 0.0 } else { inter as f64 / p as f64 };
    let recall = if g == 0 { 0.0 } else { inter as f64 / g as f64 };
    if precision + recall == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

pub fn j_and_f(m: &MaskPair) -> f64 {
    0.5 * (jaccard(m) + f_measure(m, BETA_SQ))
}

/// Per-mask `J`, `F` and their mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

impl SegScores {
    pub fn of(m: &MaskPair) -> Self {
        let (j, f) = (jaccard(m), f_measure(m, BETA_SQ));
        SegScores { j, f, jf: 0.5 * (j + f) }
    }

    /// Element-wise mean.
    pub fn mean(items: &[SegScores]) -> SegScores {
        let n = items.len().max(1) as f64;
        let sum = items.iter().fold(SegScores::default(), |a, s| SegScores {
            j: a.j + s.j,
            f: a.f + s.f,
            jf: a.jf + s.jf,
        });
        SegScores {
            j: sum.j / n,
            f: sum.f / n,
            jf: sum.jf / n,
        }
    }
}

fn check_matrix(op: &'static str, x: &Tensor<f64>) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] if n >= 2 => Ok((n, d)),
        _ => Err(Error::invalid(op, format!("need a samples×features matrix with ≥ 2 rows, got {:?}", x.shape()))),
    }
}

fn centered(x: &Tensor<f64>, n: usize, d: usize) -> Vec<f64> {
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| out[i * d + j] -= mean);
    }
    out
}

/// `‖AᵀB‖²_F` for row-major `n×da` and `n×db`.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut m = vec![0.0; da * db];
    for i in 0..n {
        let (ra, rb) = (&a[i * da..(i + 1) * da], &b[i * db..(i + 1) * db]);
        for (p, &x) in ra.iter().enumerate() {
            for (q, &y) in rb.iter().enumerate() {
                m[p * db + q] += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two `samples × features` matrices.
/// Zero when either side has no variance.
pub fn linear_cka(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    let (n, dx) = check_matrix("linear_cka", x)?;
    let (ny, dy) = check_matrix("linear_cka", y)?;
    if n != ny {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    let (xc, yc) = (centered(x, n, dx), centered(y, n, dy));
    let xy = cross_frobenius_sq(&xc, dx, &yc, dy, n);
    let xx = cross_frobenius_sq(&xc, dx, &xc, dx, n).sqrt();
    let yy = cross_frobenius_sq(&yc, dy, &yc, dy, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Softmax of a flattened feature map.
pub fn softmax_distribution(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_pair(op: &'static str, p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(op, &[p.len()], &[q.len()]));
    }
    Ok(())
}

/// `Σ p·ln(p / max(q, 1e-12))`, with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair("kl_divergence", p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b.max(KL_CLAMP)).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair("js_divergence", p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * (kl_divergence(p, &m)? + kl_divergence(q, &m)?);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub cka: f64,
    pub kl: f64,
    pub js: f64,
}

/// Consistency between two `B×C×T×H×W` feature maps of equal shape.
///
/// CKA compares the `(B·T) × C` spatially pooled descriptors; KL and JS compare the
/// softmax of each sample's flattened map, averaged over the batch, with the first
/// argument as `P`.
pub fn consistency(audio: &Tensor<f64>, video: &Tensor<f64>) -> Result<ConsistencyReport> {
    if audio.shape() != video.shape() || audio.rank() != 5 {
        return Err(Error::shape("consistency", audio.shape(), video.shape()));
    }
    let s = audio.shape();
    let (b, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    let pool = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut out = vec![0.0; b * t * c];
        for bi in 0..b {
            for ci in 0..c {
                for ti in 0..t {
                    let base = ((bi * c + ci) * t + ti) * hw;
                    out[(bi * t + ti) * c + ci] = x.data()[base..base + hw].iter().sum::<f64>() / hw as f64;
                }
            }
        }
        Tensor::new(&[b * t, c], out)
    };
    let cka = if b * t >= 2 { linear_cka(&pool(audio)?, &pool(video)?)? } else { 0.0 };
    let per = c * t * hw;
    let (mut kl, mut js) = (0.0, 0.0);
    for bi in 0..b {
        let p = softmax_distribution(&audio.data()[bi * per..(bi + 1) * per]);
        let q = softmax_distribution(&video.data()[bi * per..(bi + 1) * per]);
        kl += kl_divergence(&p, &q)?;
        js += js_divergence(&p, &q)?;
    }
    Ok(ConsistencyReport {
        cka,
        kl: kl / b as f64,
        js: js / b as f64,
    })
}
