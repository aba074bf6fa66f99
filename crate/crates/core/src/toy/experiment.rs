//! Scripted merge experiments driven by a TOML config.
//!
//! All models start from one shared initialization that is first pretrained
//! on the source domain, then fine-tuned per model. The anchor's evenly spaced
//! fine-tuning checkpoints feed a second, checkpoint-merging arm.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::data::{make_domain_pair, DomainShift, ToyDataset};
use super::model::ToyModel;
use super::train::{accuracy, ensemble_accuracy, estimate_fisher, train, TrainConfig};
use super::HarnessError;
use crate::alignment::shared_parameters;
use crate::checkpoint::{Checkpoint, MODEL_ID_KEY, PERFORMANCE_KEY};
use crate::discrepancy::{discrepancy_profile, ProfileRow, ThresholdMode};
use crate::merge::{
    compute_schedule, fisher_merge, isotropic_merge, layerwise_merge, scalar_weighted_merge, ScheduleParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Layerwise,
    Isotropic,
    Scalar,
    Fisher,
    Ensemble,
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StrategyName::Layerwise => "layerwise",
            StrategyName::Isotropic => "isotropic",
            StrategyName::Scalar => "scalar",
            StrategyName::Fisher => "fisher",
            StrategyName::Ensemble => "ensemble",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training samples per domain.
    pub n: usize,
    pub classes: usize,
    /// Held-out samples per domain.
    pub eval_n: usize,
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub translation: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub domain: Domain,
    /// Shuffle seed; derived from the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "one")]
    pub start: usize,
    #[serde(default)]
    pub w0: Option<f64>,
}

fn one() -> usize {
    1
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { start: 1, w0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; data, init and per-model seeds derive from it.
    pub seed: u64,
    pub data: DataConfig,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Shared fine-tuning settings; its `seed` field is ignored.
    #[serde(default)]
    pub train: TrainConfig,
    pub anchor: ModelSpec,
    #[serde(default)]
    pub donors: Vec<ModelSpec>,
    pub strategies: Vec<StrategyName>,
    /// Applied to the model-pool arm; the checkpoint arm uses defaults.
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// When set, the report carries anchor-vs-donor discrepancy profiles.
    #[serde(default)]
    pub tau: Option<f64>,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))
    }

    pub fn shift(&self) -> DomainShift {
        DomainShift {
            rotation: self.data.rotation,
            translation: self.data.translation,
        }
    }

    fn data_seed(&self) -> u64 {
        self.seed
    }
    fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(1000)
    }
    fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
    fn pretrain_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }
    fn model_seed(&self, slot: usize) -> u64 {
        self.seed.wrapping_add(10 + slot as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRow {
    pub role: String,
    pub domain: Domain,
    pub seed: u64,
    pub train_accuracy: f64,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub anchor_task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: StrategyName,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub anchor_task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointArmRow {
    pub checkpoints: usize,
    pub strategy: StrategyName,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub anchor_task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyRow {
    pub donor: String,
    pub tau: f64,
    pub total_fraction: f64,
    pub rows: Vec<ProfileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub shared_layers: usize,
    pub models: Vec<ModelRow>,
    pub strategies: Vec<StrategyRow>,
    pub checkpoint_arm: Vec<CheckpointArmRow>,
    pub discrepancy: Vec<DiscrepancyRow>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn strategy(&self, name: StrategyName) -> Option<&StrategyRow> {
        self.strategies.iter().find(|r| r.strategy == name)
    }
}

struct EvalSets {
    source: ToyDataset,
    target: ToyDataset,
    anchor_domain: Domain,
}

impl EvalSets {
    fn scores(&self, f: impl Fn(&ToyDataset) -> Result<f64, HarnessError>) -> Result<[f64; 3], HarnessError> {
        let source = f(&self.source)?;
        let target = f(&self.target)?;
        let anchor_task = match self.anchor_domain {
            Domain::Source => source,
            Domain::Target => target,
        };
        Ok([source, target, anchor_task])
    }
}

/// One model of a merge pool with the data it was trained on.
struct PoolMember<'a> {
    ckpt: Checkpoint,
    model: ToyModel,
    train_data: &'a ToyDataset,
}

fn run_strategies(
    pool: &[PoolMember<'_>],
    anchor: usize,
    strategies: &[StrategyName],
    params: ScheduleParams,
    evals: &EvalSets,
) -> Result<Vec<(StrategyName, [f64; 3])>, HarnessError> {
    let ckpts: Vec<Checkpoint> = pool.iter().map(|p| p.ckpt.clone()).collect();
    let alignment = shared_parameters(&ckpts, anchor)?;
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let merged = match strategy {
            StrategyName::Ensemble => {
                let models: Vec<ToyModel> = pool.iter().map(|p| p.model.clone()).collect();
                rows.push((strategy, evals.scores(|d| ensemble_accuracy(&models, d))?));
                continue;
            }
            StrategyName::Layerwise => {
                let schedule = compute_schedule(ckpts.len(), alignment.n_p(), anchor, params)?;
                layerwise_merge(&ckpts, &schedule, &alignment)?
            }
            StrategyName::Isotropic => isotropic_merge(&ckpts, &alignment)?,
            StrategyName::Scalar => {
                let perf = pool
                    .iter()
                    .map(|p| accuracy(&p.model, p.train_data))
                    .collect::<Result<Vec<_>, _>>()?;
                scalar_weighted_merge(&ckpts, &perf, &alignment)?
            }
            StrategyName::Fisher => {
                let fishers = pool
                    .iter()
                    .map(|p| estimate_fisher(&p.model, p.train_data))
                    .collect::<Result<Vec<_>, _>>()?;
                fisher_merge(&ckpts, &fishers, &alignment)?
            }
        };
        let model = ToyModel::from_checkpoint(&merged)?;
        rows.push((strategy, evals.scores(|d| accuracy(&model, d))?));
    }
    Ok(rows)
}

/// Trains every model of the experiment, merges them with each configured
/// strategy and evaluates on held-out source and target samples.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    if cfg.strategies.is_empty() {
        return Err(HarnessError::InvalidConfig("no strategies listed".into()));
    }
    let shift = cfg.shift();
    let (train_source, train_target) = make_domain_pair(cfg.data_seed(), cfg.data.n, cfg.data.classes, shift)?;
    let (eval_source, eval_target) = make_domain_pair(cfg.eval_seed(), cfg.data.eval_n, cfg.data.classes, shift)?;
    let evals = EvalSets {
        source: eval_source,
        target: eval_target,
        anchor_domain: cfg.anchor.domain,
    };
    let domain_data = |d: Domain| match d {
        Domain::Source => &train_source,
        Domain::Target => &train_target,
    };

    let mut dims = vec![2];
    dims.extend(&cfg.hidden);
    dims.push(cfg.data.classes);
    let mut base = ToyModel::init(&dims, cfg.init_seed())?;
    if cfg.pretrain_epochs > 0 {
        let pre = TrainConfig {
            epochs: cfg.pretrain_epochs,
            seed: cfg.pretrain_seed(),
            checkpoints: 0,
            ..cfg.train
        };
        base = train(&base, &train_source, &pre)?.model;
    }

    let specs: Vec<(String, &ModelSpec)> = std::iter::once(("anchor".to_string(), &cfg.anchor))
        .chain(cfg.donors.iter().enumerate().map(|(i, d)| (format!("donor-{}", i + 1), d)))
        .collect();

    let mut pool = Vec::with_capacity(specs.len());
    let mut model_rows = Vec::with_capacity(specs.len());
    let mut anchor_checkpoints = Vec::new();
    for (slot, (role, spec)) in specs.iter().enumerate() {
        let seed = spec.seed.unwrap_or_else(|| cfg.model_seed(slot));
        let tc = TrainConfig {
            seed,
            learning_rate: spec.learning_rate.unwrap_or(cfg.train.learning_rate),
            epochs: spec.epochs.unwrap_or(cfg.train.epochs),
            checkpoints: if slot == 0 { cfg.train.checkpoints } else { 0 },
            ..cfg.train
        };
        let data = domain_data(spec.domain);
        let outcome = train(&base, data, &tc)?;
        let train_accuracy = accuracy(&outcome.model, data)?;
        let [source_accuracy, target_accuracy, anchor_task_accuracy] =
            evals.scores(|d| accuracy(&outcome.model, d))?;
        model_rows.push(ModelRow {
            role: role.clone(),
            domain: spec.domain,
            seed,
            train_accuracy,
            source_accuracy,
            target_accuracy,
            anchor_task_accuracy,
        });
        let mut ckpt = outcome.model.to_checkpoint();
        ckpt.set_metadata(MODEL_ID_KEY, role.clone());
        ckpt.set_metadata(PERFORMANCE_KEY, train_accuracy.to_string());
        if slot == 0 {
            anchor_checkpoints = outcome.checkpoints;
        }
        pool.push(PoolMember {
            ckpt,
            model: outcome.model,
            train_data: data,
        });
    }

    let params = ScheduleParams {
        start: cfg.schedule.start,
        w0: cfg.schedule.w0,
    };
    let shared_layers = shared_parameters(&pool.iter().map(|p| p.ckpt.clone()).collect::<Vec<_>>(), 0)?.n_p();
    let strategies = run_strategies(&pool, 0, &cfg.strategies, params, &evals)?
        .into_iter()
        .map(|(strategy, [s, t, a])| StrategyRow {
            strategy,
            source_accuracy: s,
            target_accuracy: t,
            anchor_task_accuracy: a,
        })
        .collect();

    // Incrementally merge the last k checkpoints, final checkpoint as anchor.
    let anchor_data = domain_data(cfg.anchor.domain);
    let mut checkpoint_arm = Vec::new();
    for k in 1..=anchor_checkpoints.len() {
        let members = anchor_checkpoints[anchor_checkpoints.len() - k..]
            .iter()
            .map(|c| {
                Ok(PoolMember {
                    ckpt: c.clone(),
                    model: ToyModel::from_checkpoint(c)?,
                    train_data: anchor_data,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        for (strategy, [s, t, a]) in run_strategies(&members, k - 1, &cfg.strategies, ScheduleParams::default(), &evals)? {
            checkpoint_arm.push(CheckpointArmRow {
                checkpoints: k,
                strategy,
                source_accuracy: s,
                target_accuracy: t,
                anchor_task_accuracy: a,
            });
        }
    }

    let mut discrepancy = Vec::new();
    if let Some(tau) = cfg.tau {
        for (member, (role, _)) in pool.iter().zip(&specs).skip(1) {
            let profile = discrepancy_profile(&pool[0].ckpt, &member.ckpt, tau, ThresholdMode::Elementwise)?;
            discrepancy.push(DiscrepancyRow {
                donor: role.clone(),
                tau,
                total_fraction: profile.total_fraction(),
                rows: profile.rows,
            });
        }
    }

    Ok(ExperimentReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        shared_layers,
        models: model_rows,
        strategies,
        checkpoint_arm,
        discrepancy,
    })
}
