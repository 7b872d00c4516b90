//! Evaluation: per-clip J / F / J&F, noise conditions and fusion consistency.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::config::NoiseKind;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{consistency, ConsistencyReport, MaskPair, SegScores};
use crate::model::Model;
use crate::tensor::{Graph, Tensor};

/// Per-clip scores, each the mean over the clip's frames, from `B×1×T×H×W` logits.
pub fn clip_scores(logits: &Tensor<f32>, gt: &Tensor<f32>) -> Vec<SegScores> {
    let s = logits.shape();
    let (b, t, hw) = (s[0], s[2], s[3] * s[4]);
    (0..b)
        .map(|bi| {
            let frames: Vec<SegScores> = (0..t)
                .map(|ti| {
                    let off = (bi * t + ti) * hw;
                    let pred: Vec<bool> = logits.data()[off..off + hw].iter().map(|&v| v > 0.0).collect();
                    let truth: Vec<bool> = gt.data()[off..off + hw].iter().map(|&v| v > 0.5).collect();
                    SegScores::of(&MaskPair::new(&pred, &truth).unwrap())
                })
                .collect();
            SegScores::mean(&frames)
        })
        .collect()
}

/// Finest-stage features gathered over a dataset, `N×C×T×h×w` each.
#[derive(Clone, Debug)]
pub struct FusionFeatures {
    pub audio_before: Tensor<f64>,
    pub video_before: Tensor<f64>,
    pub audio_after: Tensor<f64>,
    pub video_after: Tensor<f64>,
}

impl FusionFeatures {
    pub fn before(&self) -> Result<ConsistencyReport> {
        consistency(&self.audio_before, &self.video_before)
    }

    pub fn after(&self) -> Result<ConsistencyReport> {
        consistency(&self.audio_after, &self.video_after)
    }
}

struct BatchResult {
    scores: Vec<SegScores>,
    trace: [Tensor<f32>; 4],
}

fn concat(parts: Vec<&Tensor<f32>>) -> Result<Tensor<f64>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().map(|&v| v as f64)).collect();
    Tensor::new(&shape, data)
}

/// Scores every clip of `ds` and collects the finest-stage fusion features.
/// Batches run in parallel; results are independent of the thread count.
pub fn predict_dataset(model: &Model<f32>, ds: &Dataset, batch_size: usize) -> Result<(Vec<SegScores>, FusionFeatures)> {
    let starts: Vec<usize> = (0..ds.len()).step_by(batch_size.max(1)).collect();
    let results: Vec<BatchResult> = starts
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(ds.len())).collect();
            let batch = ds.batch(&idx);
            let mut g = Graph::new();
            let p = model.params.bind_frozen(&mut g)?;
            let f = g.constant(batch.frames)?;
            let m = g.constant(batch.mel)?;
            let out = model.forward(&mut g, &p, f, m)?;
            let tr = out.trace;
            Ok(BatchResult {
                scores: clip_scores(g.value(out.logits), &batch.gt),
                trace: [tr.audio_before, tr.video_before, tr.audio_after, tr.video_after].map(|v| g.value(v).clone()),
            })
        })
        .collect::<Result<_>>()?;
    let scores = results.iter().flat_map(|r| r.scores.iter().copied()).collect();
    let part = |k: usize| concat(results.iter().map(|r| &r.trace[k]).collect());
    Ok((
        scores,
        FusionFeatures {
            audio_before: part(0)?,
            video_before: part(1)?,
            audio_after: part(2)?,
            video_after: part(3)?,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRow {
    pub clip_id: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub scores: SegScores,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub before: ConsistencyReport,
    pub after: ConsistencyReport,
}

/// Scores under one noise condition, with clean-audio reference scores when noisy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub noise: NoiseKind,
    pub scale: f64,
    pub rows: Vec<ClipRow>,
    pub aggregate: SegScores,
    pub clean: Option<SegScores>,
    /// Clean minus noisy J&F.
    pub degradation: Option<f64>,
    pub consistency: ConsistencyPair,
}

#[derive(Serialize)]
struct AggregateJson<'a> {
    config_hash: &'a str,
    noise: NoiseKind,
    scale: f64,
    clips: usize,
    #[serde(rename = "J")]
    j: f64,
    #[serde(rename = "F")]
    f: f64,
    #[serde(rename = "J&F")]
    jf: f64,
    clean: Option<SegScores>,
    degradation: Option<f64>,
    consistency: ConsistencyPair,
}

impl EvalReport {
    fn build(
        config_hash: String,
        noise: NoiseKind,
        scale: f64,
        ds: &Dataset,
        scores: Vec<SegScores>,
        features: &FusionFeatures,
        clean: Option<SegScores>,
    ) -> Result<Self> {
        let rows: Vec<ClipRow> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ClipRow {
                clip_id: i,
                seed: ds.clips[i].seed,
                scores: s,
            })
            .collect();
        let aggregate = SegScores::mean(&scores);
        Ok(EvalReport {
            config_hash,
            noise,
            scale,
            rows,
            aggregate,
            degradation: clean.map(|c| c.jf - aggregate.jf),
            clean,
            consistency: ConsistencyPair {
                before: features.before()?,
                after: features.after()?,
            },
        })
    }

    /// `clip_id,J,F,J&F` rows with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,J,F,J&F\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.clip_id, r.scores.j, r.scores.f, r.scores.jf).unwrap();
        }
        out
    }

    pub fn aggregate_json(&self) -> String {
        serde_json::to_string_pretty(&AggregateJson {
            config_hash: &self.config_hash,
            noise: self.noise,
            scale: self.scale,
            clips: self.rows.len(),
            j: self.aggregate.j,
            f: self.aggregate.f,
            jf: self.aggregate.jf,
            clean: self.clean,
            degradation: self.degradation,
            consistency: self.consistency,
        })
        .expect("report serializes")
            + "\n"
    }

    /// Re-derives the aggregate from the CSV text and compares it exactly.
    pub fn audit(&self) -> Result<()> {
        let parsed: Vec<SegScores> = self
            .to_csv()
            .lines()
            .skip(1)
            .map(|line| {
                let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
                SegScores { j: v[0], f: v[1], jf: v[2] }
            })
            .collect();
        let again = SegScores::mean(&parsed);
        if again != self.aggregate {
            return Err(Error::Numeric(format!("aggregate {:?} differs from row mean {again:?}", self.aggregate)));
        }
        Ok(())
    }

    /// Writes CSV rows and the JSON aggregate; `path` picks the primary file by its
    /// extension and the other is written next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let path = path.as_ref();
        let (csv, json) = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => (path.with_extension("csv"), path.to_path_buf()),
            _ => (path.to_path_buf(), path.with_extension("json")),
        };
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&json, self.aggregate_json())?;
        Ok((csv, json))
    }
}

/// Evaluates `model` on `clean_set`; with noise, also builds the noisy copy of the split
/// and reports the degradation.
pub fn evaluate_split(
    model: &Model<f32>,
    config_hash: &str,
    clean_set: &Dataset,
    noisy_set: Option<&Dataset>,
    noise: NoiseKind,
    scale: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let (clean_scores, clean_features) = predict_dataset(model, clean_set, batch_size)?;
    match noisy_set {
        None => EvalReport::build(config_hash.into(), noise, scale, clean_set, clean_scores, &clean_features, None),
        Some(ds) => {
            let (scores, features) = predict_dataset(model, ds, batch_size)?;
            let clean = SegScores::mean(&clean_scores);
            EvalReport::build(config_hash.into(), noise, scale, ds, scores, &features, Some(clean))
        }
    }
}

/// Evaluates a trained state on its held-out split under the given noise condition.
pub fn evaluate(state: &ModelState, noise: NoiseKind, scale: f64) -> Result<EvalReport> {
    let cfg = &state.config;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let clean = Dataset::generate(&cfg.data, Split::Eval, h, w, None)?;
    let noisy = match noise.interference() {
        Some(kind) => Some(Dataset::generate(&cfg.data, Split::Eval, h, w, Some((kind, scale)))?),
        None => None,
    };
    let report = evaluate_split(
        &state.model,
        &cfg.config_hash(),
        &clean,
        noisy.as_ref(),
        noise,
        scale,
        cfg.train.batch_size,
    )?;
    report.audit()?;
    Ok(report)
}
