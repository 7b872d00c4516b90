//! Training loop: shuffled mini-batches, AdamW, step schedule and optional early stop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelState;
use crate::config::RunConfig;
use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::eval::{clip_scores, predict_dataset};
use crate::metrics::SegScores;
use crate::model::loss::{compute_loss, LossBreakdown};
use crate::model::Model;
use crate::optim::{AdamW, MultiStepLr};
use crate::tensor::Graph;

/// Seed streams derived from `train.seed`.
const INIT_STREAM: u64 = 11;
const SHUFFLE_STREAM: u64 = 12;

/// Running J&F must come this close to the target before a full train-set pass is paid for.
const EARLY_STOP_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    /// J&F of the training forwards, taken before each update.
    pub running_jf: f64,
    /// Train-set J&F with the end-of-epoch weights, when it was computed.
    pub train_jf: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    /// Whether `train.early_stop_jf` was reached; `None` without a target.
    pub reached_target: Option<bool>,
}

fn numeric(epoch: usize, step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::Numeric(format!("epoch {epoch} step {step}: {e}"))
    } else {
        e
    }
}

/// One optimization step on `indices`; returns the loss terms and per-clip scores.
fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    ds: &Dataset,
    indices: &[usize],
    lr: f64,
) -> Result<(LossBreakdown, Vec<SegScores>)> {
    let batch = ds.batch(indices);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g)?;
    let frames = g.constant(batch.frames)?;
    let mel = g.constant(batch.mel)?;
    let gt = g.constant(batch.gt)?;
    let out = model.forward(&mut g, &p, frames, mel)?;
    let loss = compute_loss(&mut g, out.logits, gt)?;
    let scores = clip_scores(g.value(out.logits), g.value(gt));
    let mut grads = g.backward(loss.total)?;
    let mut by_name = std::collections::BTreeMap::new();
    for (name, &v) in p.iter() {
        if let Some(t) = grads.take(v) {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("gradient of {name} is not finite")));
            }
            by_name.insert(name.clone(), t);
        }
    }
    opt.step(&mut model.params, &by_name, lr)?;
    if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numeric(format!("parameter {name} is not finite after the update")));
    }
    Ok((loss.values(&g), scores))
}

/// Trains a fresh model on `ds`. `on_epoch` sees each epoch's log as it completes.
pub fn train(cfg: &RunConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = &cfg.train;
    let mut model = Model::<f32>::init(cfg.model.clone(), derive_seed(t.seed, INIT_STREAM, 0))?;
    let mut opt = AdamW::new(t.optimizer);
    let schedule = MultiStepLr {
        base_lr: t.optimizer.lr,
        milestones: cfg.milestones(),
        gamma: t.gamma,
    };
    let mut log = Vec::new();
    let mut reached = t.early_stop_jf.map(|_| false);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..t.epochs {
        let lr = schedule.lr(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut seen = Vec::with_capacity(ds.len());
        let chunks: Vec<&[usize]> = order.chunks(t.batch_size).collect();
        for (step, idx) in chunks.iter().enumerate() {
            let (l, scores) = train_step(&mut model, &mut opt, ds, idx, lr).map_err(|e| numeric(epoch, step, e))?;
            for (s, v) in sums.iter_mut().zip([l.l_ce, l.l_iou, l.l_dice, l.total]) {
                *s += v;
            }
            seen.extend(scores);
        }
        let n = chunks.len() as f64;
        let running_jf = SegScores::mean(&seen).jf;
        let mut entry = EpochLog {
            epoch,
            lr,
            loss: LossBreakdown {
                l_ce: sums[0] / n,
                l_iou: sums[1] / n,
                l_dice: sums[2] / n,
                total: sums[3] / n,
            },
            running_jf,
            train_jf: None,
        };
        let mut stop = false;
        if let Some(target) = t.early_stop_jf {
            if running_jf >= target - EARLY_STOP_MARGIN {
                let (scores, _) = predict_dataset(&model, ds, t.batch_size)?;
                let jf = SegScores::mean(&scores).jf;
                entry.train_jf = Some(jf);
                stop = jf >= target;
            }
        }
        on_epoch(&entry);
        log.push(entry);
        if stop {
            reached = Some(true);
            break;
        }
    }
    Ok(TrainOutcome {
        state: ModelState {
            config: cfg.clone(),
            model,
            epochs_run: log.len(),
        },
        log,
        reached_target: reached,
    })
}
