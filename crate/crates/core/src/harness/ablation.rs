use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{config_hash, evaluate, train, TrainConfig};
use crate::data::ImageSample;
use crate::error::{config_err, Result};
use crate::metrics::Criterion;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub f_score: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub generator_combo: String,
    pub merger_preset: String,
    pub config_hash: String,
    /// Keyed by split name.
    pub results: BTreeMap<String, SplitResult>,
    /// Set when the row's run failed; the sweep carries on.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub criterion: Criterion,
    pub splits: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn comparison_name(k: usize) -> String {
    format!("Comparison Model-{k}")
}

/// Trains and evaluates each `(combo, merger)` pairing with the base
/// config's seed. The lists pair up element-wise; a single-element list is
/// paired with every entry of the other.
pub fn ablate(
    combos: &[String],
    mergers: &[String],
    base: &TrainConfig,
    train_set: &[ImageSample],
    eval_sets: &[(String, Vec<ImageSample>)],
    criterion: &Criterion,
) -> Result<AblationTable> {
    if combos.is_empty() || mergers.is_empty() {
        return config_err("ablation needs at least one generator combo and one merger");
    }
    let n = combos.len().max(mergers.len());
    if (combos.len() != n && combos.len() != 1) || (mergers.len() != n && mergers.len() != 1) {
        return config_err(format!("cannot pair {} combos with {} mergers", combos.len(), mergers.len()));
    }
    criterion.validate()?;
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let combo = &combos[k.min(combos.len() - 1)];
        let merger = &mergers[k.min(mergers.len() - 1)];
        let mut config = base.clone();
        config.model.generator_combo = combo.clone();
        config.model.merger_preset = merger.clone();
        let mut row = AblationRow {
            name: comparison_name(k + 1),
            generator_combo: combo.clone(),
            merger_preset: merger.clone(),
            config_hash: config_hash(&config)?,
            results: BTreeMap::new(),
            error: None,
        };
        let run = train(&config, train_set, None).and_then(|(model, _)| {
            eval_sets
                .iter()
                .map(|(split, data)| {
                    let r = evaluate(&model, data, criterion)?;
                    Ok((
                        split.clone(),
                        SplitResult {
                            f_score: r.f_score,
                            recall: r.recall,
                        },
                    ))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        });
        match run {
            Ok(results) => row.results = results,
            Err(e) => {
                log::warn!("{}: {e}", row.name);
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(AblationTable {
        criterion: *criterion,
        splits: eval_sets.iter().map(|(s, _)| s.clone()).collect(),
        rows,
    })
}
