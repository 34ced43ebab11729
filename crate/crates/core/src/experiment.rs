//! The synthetic patch experiment: for every seed, generate the patch
//! dataset, train each objective, and score fine-label retrieval on the
//! training images.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_patch_dataset, PatchConfig};
use crate::error::{invalid, Result};
use crate::eval::recall_at_k;
use crate::model::encode;
use crate::trainer::{train, Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub data: PatchConfig,
    /// Shared training settings; `objective` and `seed` are overridden per
    /// run.
    pub train: TrainConfig,
    pub objectives: Vec<Objective>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            data: PatchConfig::default(),
            train: synthetic_train_config(),
            objectives: Objective::ALL.to_vec(),
            ks: vec![1, 2, 4, 8],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Training settings used for the patch experiment.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        lr: 0.05,
        lr_decay_epochs: vec![40],
        batch_size: 64,
        hidden: vec![256, 128],
        augment_pad: 2,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub objective: Objective,
    pub seed: u64,
    /// `k → R@k` as a fraction.
    pub recall_at: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub ks: Vec<usize>,
    pub runs: Vec<RunResult>,
    /// Per objective, the median over seeds of each `R@k`.
    pub medians: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl ExperimentResult {
    pub fn median(&self, objective: Objective, k: usize) -> Option<f64> {
        self.medians.get(objective.name())?.get(&k).copied()
    }

    /// `objective,seed,R@1,...` with one row per run followed by one
    /// `median` row per objective.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["objective".to_string(), "seed".to_string()];
        header.extend(self.ks.iter().map(|k| format!("R@{k}")));
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |m: &BTreeMap<usize, f64>| -> Vec<String> {
            self.ks.iter().map(|k| format!("{:.6}", m[k])).collect()
        };
        for r in &self.runs {
            let mut row = vec![r.objective.name().to_string(), r.seed.to_string()];
            row.extend(fmt(&r.recall_at));
            w.write_record(&row).map_err(csv_err)?;
        }
        for o in Objective::ALL {
            if let Some(m) = self.medians.get(o.name()) {
                let mut row = vec![o.name().to_string(), "median".to_string()];
                row.extend(fmt(m));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    invalid(format!("csv: {e}"))
}

/// Median of a nonempty list (mean of the two middle values when even).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// Trains one objective on one seed's dataset and scores fine retrieval.
pub fn run_one(spec: &ExperimentSpec, objective: Objective, seed: u64) -> Result<RunResult> {
    let data = gen_patch_dataset(&PatchConfig {
        seed,
        ..spec.data.clone()
    })?;
    let cfg = TrainConfig {
        objective,
        seed,
        ..spec.train.clone()
    };
    let out = train(&cfg, &data)?;
    let fine = data
        .fine_labels
        .as_ref()
        .ok_or_else(|| invalid("patch data has no fine labels"))?;
    let emb = encode(&out.params, &data.examples)?.embedding;
    Ok(RunResult {
        objective,
        seed,
        recall_at: recall_at_k(&emb, fine, &spec.ks)?,
    })
}

/// Runs every (seed, objective) pair. Runs are independent and execute in
/// parallel; each one is single-threaded, so results do not depend on the
/// thread count.
pub fn run_synthetic(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.seeds.is_empty() || spec.objectives.is_empty() || spec.ks.is_empty() {
        return Err(invalid("seeds, objectives and ks must be nonempty"));
    }
    let jobs: Vec<(u64, Objective)> = spec
        .seeds
        .iter()
        .flat_map(|&s| spec.objectives.iter().map(move |&o| (s, o)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, objective)| {
            log::info!("training {objective} seed {seed}");
            run_one(spec, objective, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut medians = BTreeMap::new();
    for &o in &spec.objectives {
        let per_k = spec
            .ks
            .iter()
            .map(|&k| {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.objective == o)
                    .map(|r| r.recall_at[&k])
                    .collect();
                (k, median(&vals))
            })
            .collect();
        medians.insert(o.name().to_string(), per_k);
    }
    Ok(ExperimentResult {
        ks: spec.ks.clone(),
        runs,
        medians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn csv_schema() {
        let spec = ExperimentSpec {
            data: PatchConfig {
                n: 48,
                n_big: 4,
                n_small: 8,
                img_h: 12,
                img_w: 12,
                big_size: 4,
                small_size: 2,
                seed: 0,
            },
            train: TrainConfig {
                epochs: 2,
                hidden: vec![8, 4],
                ..synthetic_train_config()
            },
            objectives: Objective::ALL.to_vec(),
            ks: vec![1, 2, 4, 8],
            seeds: vec![1, 2],
        };
        let res = run_synthetic(&spec).unwrap();
        assert_eq!(res.runs.len(), 12);
        let csv = res.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "objective,seed,R@1,R@2,R@4,R@8");
        assert_eq!(lines.len(), 1 + 12 + 6);
        assert!(lines.iter().filter(|l| l.contains(",median,")).count() == 6);
    }
}
