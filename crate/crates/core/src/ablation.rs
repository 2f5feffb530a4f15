//! Trains every registered variant on the same data and compares them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Corpus;
use crate::error::{HahtError, Result};
use crate::eval::{
    decode_corpus, history_token_recall, score_predictions, BucketScores, MetricsReport,
};
use crate::parallel::Workers;
use crate::train::{build_model, train, EpochLog, TrainConfig};
use crate::variant::VariantRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub history_token_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub summary: String,
    /// Scores averaged over seeds, per session bucket.
    pub mean: BTreeMap<String, BucketScores>,
    pub history_token_recall: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: BTreeMap<String, VariantResult>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Plain-text table of mean scores on the `"all"` bucket.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>10}\n",
            "variant", "BLEU-2", "BLEU-3", "ROUGE-L", "hist-recall"
        );
        for (name, v) in &self.variants {
            let all = v.mean["all"];
            let recall = v
                .history_token_recall
                .map_or("-".to_string(), |r| format!("{:.4}", r));
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>10}\n",
                name, all.bleu2, all.bleu3, all.rouge_l, recall
            ));
        }
        out
    }
}

fn mean_buckets(reports: &[&MetricsReport]) -> BTreeMap<String, BucketScores> {
    let n = reports.len() as f64;
    let mut out = BTreeMap::new();
    for key in reports[0].buckets.keys() {
        let rows: Vec<&BucketScores> = reports.iter().map(|r| &r.buckets[key]).collect();
        out.insert(
            key.clone(),
            BucketScores {
                bleu2: rows.iter().map(|b| b.bleu2).sum::<f64>() / n,
                bleu3: rows.iter().map(|b| b.bleu3).sum::<f64>() / n,
                rouge_l: rows.iter().map(|b| b.rouge_l).sum::<f64>() / n,
                count: rows[0].count,
            },
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub train: &'a Corpus,
    pub valid: &'a Corpus,
    pub test: &'a Corpus,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub max_len: usize,
}

/// Trains and evaluates each requested variant once per seed. The seed
/// drives both initialization and batch order.
pub fn run_ablation(
    setup: &AblationSetup,
    registry: &VariantRegistry,
    workers: &Workers,
    mut progress: impl FnMut(&str, u64, &EpochLog),
) -> Result<AblationReport> {
    if setup.seeds.is_empty() {
        return Err(HahtError::Config("ablation needs at least one seed".into()));
    }
    let mut variants = BTreeMap::new();
    for name in &setup.variants {
        let variant = registry.get(name)?;
        let mut per_seed = Vec::new();
        for &seed in &setup.seeds {
            let mut mcfg = setup.model.clone();
            mcfg.seed = seed;
            let tcfg = TrainConfig {
                seed,
                ..setup.training.clone()
            };
            let model = build_model(setup.train, mcfg, variant.clone(), tcfg.min_count)?;
            let (model, log) = train(model, setup.train, setup.valid, &tcfg, workers, |e| {
                progress(name, seed, e)
            })?;
            let predictions = decode_corpus(&model, setup.test, setup.max_len, workers)?;
            per_seed.push(SeedResult {
                seed,
                best_epoch: log.best_epoch,
                report: score_predictions(setup.test, &predictions, false)?,
                history_token_recall: history_token_recall(setup.test, &predictions),
            });
        }
        let reports: Vec<&MetricsReport> = per_seed.iter().map(|s| &s.report).collect();
        let recalls: Option<Vec<f64>> = per_seed.iter().map(|s| s.history_token_recall).collect();
        variants.insert(
            name.clone(),
            VariantResult {
                summary: variant.summary().to_string(),
                mean: mean_buckets(&reports),
                history_token_recall: recalls.map(|r| r.iter().sum::<f64>() / r.len() as f64),
                per_seed,
            },
        );
    }
    Ok(AblationReport {
        seeds: setup.seeds.clone(),
        variants,
    })
}
