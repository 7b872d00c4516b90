//! Ablation grids: `key=v1,v2;key2=v3` expanded to the cross product of configs.

use std::fmt::Write as _;

use serde_json::Value;

use crate::config::{NoiseKind, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalReport};
use crate::train::train;

/// Short grid keys and the config paths they set.
const ALIASES: &[(&str, &[&str])] = &[
    ("snrp", &["model.snrp"]),
    ("cfs", &["model.cfs"]),
    ("sfs", &["model.sfs"]),
    ("damf", &["model.damf"]),
    ("stc", &["model.stc"]),
    ("rm", &["model.rm"]),
    ("branch", &["model.branch"]),
    ("pairing", &["model.pairing"]),
    ("seed", &["train.seed", "data.seed"]),
    ("epochs", &["train.epochs"]),
    ("lr", &["train.optimizer.lr"]),
    ("noise", &["eval.noise"]),
    ("scale", &["eval.scale"]),
];

/// One grid axis; values are JSON, with bare words read as strings.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Parses `key=v1,v2;key2=v3`. Newlines also separate axes and `#` starts a comment,
/// so the same syntax works as a file.
pub fn parse_grid(spec: &str) -> Result<Vec<Axis>> {
    let mut axes: Vec<Axis> = Vec::new();
    for part in spec.lines().map(|l| l.split('#').next().unwrap()).flat_map(|l| l.split(';')) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry `{part}` is not key=values")))?;
        let key = key.trim().to_string();
        let values: Vec<Value> = vals.split(',').map(str::trim).filter(|v| !v.is_empty()).map(parse_value).collect();
        if key.is_empty() || values.is_empty() {
            return Err(Error::Config(format!("grid entry `{part}` needs a key and at least one value")));
        }
        if axes.iter().any(|a| a.key == key) {
            return Err(Error::Config(format!("grid key `{key}` appears twice")));
        }
        axes.push(Axis { key, values });
    }
    if axes.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(axes)
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a config field")))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Applies `key = value` to `base`; unknown keys surface as config errors.
pub fn apply(base: &RunConfig, settings: &[(String, Value)]) -> Result<RunConfig> {
    let mut json = serde_json::to_value(base)?;
    for (key, value) in settings {
        let paths: Vec<&str> = match ALIASES.iter().find(|(k, _)| k == key) {
            Some((_, paths)) => paths.to_vec(),
            None => vec![key.as_str()],
        };
        for p in paths {
            set_path(&mut json, p, value.clone())?;
        }
    }
    RunConfig::from_json(&json.to_string())
}

/// The cross product of `axes` over `base`, first axis slowest.
pub fn expand(base: &RunConfig, axes: &[Axis]) -> Result<Vec<(Vec<(String, Value)>, RunConfig)>> {
    let mut combos: Vec<Vec<(String, Value)>> = vec![vec![]];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|c| {
            let cfg = apply(base, &c)?;
            Ok((c, cfg))
        })
        .collect()
}

/// Result of training and evaluating one grid point.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub settings: Vec<(String, Value)>,
    pub config: RunConfig,
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Clean held-out evaluation.
    pub clean: EvalReport,
    /// Evaluation under `eval.noise`, absent when that is clean.
    pub noisy: Option<EvalReport>,
}

/// Trains and evaluates one configuration on its own generated splits.
pub fn run_one(settings: Vec<(String, Value)>, cfg: RunConfig) -> Result<AblationRun> {
    let (h, w) = (cfg.model.height, cfg.model.width);
    let train_set = Dataset::generate(&cfg.data, Split::Train, h, w, None)?;
    let outcome = train(&cfg, &train_set, |_| {})?;
    drop(train_set);
    let hash = cfg.config_hash();
    let model = &outcome.state.model;
    let eval_set = Dataset::generate(&cfg.data, Split::Eval, h, w, None)?;
    let bs = cfg.train.batch_size;
    let clean = evaluate_split(model, &hash, &eval_set, None, NoiseKind::None, 0.0, bs)?;
    let noisy = match cfg.eval.noise.interference() {
        Some(kind) => {
            let noisy_set = Dataset::generate(&cfg.data, Split::Eval, h, w, Some((kind, cfg.eval.scale)))?;
            Some(evaluate_split(model, &hash, &eval_set, Some(&noisy_set), cfg.eval.noise, cfg.eval.scale, bs)?)
        }
        None => None,
    };
    Ok(AblationRun {
        settings,
        epochs_run: outcome.state.epochs_run,
        final_loss: outcome.log.last().map_or(f64::NAN, |l| l.loss.total),
        config: cfg,
        clean,
        noisy,
    })
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per run: grid values, then scores and consistency statistics.
pub fn runs_csv(runs: &[AblationRun]) -> String {
    let mut out = String::new();
    let Some(first) = runs.first() else { return out };
    for (k, _) in &first.settings {
        write!(out, "{k},").unwrap();
    }
    out.push_str(
        "config_hash,epochs_run,final_loss,J,F,J&F,noisy_J&F,degradation,\
         cka_before,cka_after,kl_before,kl_after,js_before,js_after\n",
    );
    for r in runs {
        for (_, v) in &r.settings {
            write!(out, "{},", cell(v)).unwrap();
        }
        let a = r.clean.aggregate;
        let c = r.clean.consistency;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config.config_hash(),
            r.epochs_run,
            r.final_loss,
            a.j,
            a.f,
            a.jf,
            opt(r.noisy.as_ref().map(|n| n.aggregate.jf)),
            opt(r.noisy.as_ref().and_then(|n| n.degradation)),
            c.before.cka,
            c.after.cka,
            c.before.kl,
            c.after.kl,
            c.before.js,
            c.after.js,
        )
        .unwrap();
    }
    out
}
