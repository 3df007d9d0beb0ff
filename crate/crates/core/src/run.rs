//! Run orchestration: stages, rounds, client sampling, server aggregation,
//! per-stage evaluation, metrics, and file artifacts.
//!
//! Two modes share the loop skeleton. The subspace mode routes every client
//! through token matching into the dynamic cache and evaluates with
//! per-example selective activation. The finetune baseline trains one shared
//! adapter with plain weighted averaging across all stages and evaluates it
//! directly, which is what the forgetting comparison is measured against.
//!
//! Randomness is split into per-purpose child streams (task generation,
//! partitioning, per-stage client sampling, per-stage adapter init), so two
//! runs with the same config and seed are byte-identical artifact for
//! artifact.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{fed_avg, AggregatorRegistry, AggregatorSpec};
use crate::bench::{compose_scenario, make_task_family_with, Example, ScenarioConfig};
use crate::dko::{DynamicCache, SubspaceChoice};
use crate::embed::{local_token, EncoderSpec, IdentityToken};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankAdapter, Matrix};
use crate::metrics::ResultsMatrix;
use crate::seeds::child_seed;
use crate::ssa::{activations, assemble, scores, ActivationPolicy, ActivationRegistry};
use crate::trainer::{argmax, local_train, predict, ClientModel};

const FAMILY_STREAM: u64 = 1;
const SCENARIO_STREAM: u64 = 2;
const SAMPLING_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const BASELINE_INIT_STREAM: u64 = 5;

/// Scale of the uniform draw that fills a fresh adapter's `A` factor.
const FRESH_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Disco,
    #[serde(alias = "finetune")]
    FinetuneBaseline,
}

/// Everything a run depends on. Serialized as JSON; every field has a
/// default so a config file only needs to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub aggregator: AggregatorSpec,
    #[serde(default)]
    pub activation: ActivationPolicy,
    #[serde(default)]
    pub encoder: EncoderSpec,
    /// Token-matching threshold of the dynamic cache.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Adapter rank of every subspace.
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Full-batch passes per client per round.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Also record per-example activation factors during evaluation.
    #[serde(default)]
    pub log_activations: bool,
}

fn default_tau() -> f64 {
    0.9
}
fn default_rank() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_epochs() -> usize {
    20
}
fn default_mode() -> RunMode {
    RunMode::Disco
}
fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            aggregator: AggregatorSpec::default(),
            activation: ActivationPolicy::default(),
            encoder: EncoderSpec::default(),
            tau: default_tau(),
            rank: default_rank(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            mode: default_mode(),
            seed: default_seed(),
            log_activations: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.aggregator.validate()?;
        self.activation.validate()?;
        self.encoder.validate()?;
        AggregatorRegistry::with_builtins().build(&self.aggregator)?;
        ActivationRegistry::with_builtins().build(&self.activation)?;
        if !self.tau.is_finite() || self.tau <= 0.0 || self.tau > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        let max_rank = self.scenario.family.classes.min(self.scenario.family.input_dim);
        if self.rank == 0 || self.rank > max_rank {
            return Err(Error::InvalidConfig(format!(
                "rank must lie in 1..={max_rank} for {} classes and input_dim {}, got {}",
                self.scenario.family.classes, self.scenario.family.input_dim, self.rank
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One (stage, round, sampled client) line of the round log. `matched_entry`
/// is empty for clients that held no data that stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub stage: usize,
    pub round: usize,
    pub client: usize,
    pub matched_entry: Option<usize>,
    pub cache_size: usize,
}

/// One activation factor of one evaluated test example.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub test_id: String,
    pub entry: usize,
    pub alpha: f64,
}

/// Last/avg/forgetting, as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub last: f64,
    pub avg: f64,
    pub forgetting: BTreeMap<String, f64>,
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: ResultsMatrix,
    pub report: MetricsReport,
    pub rounds: Vec<RoundRecord>,
    /// Cache snapshot after every round (subspace mode only), for isolation
    /// audits.
    pub round_caches: Vec<DynamicCache>,
    pub final_cache: Option<DynamicCache>,
    pub activation_log: Vec<ActivationRecord>,
}

fn fresh_adapter(classes: usize, d_in: usize, rank: usize, rng: &mut ChaCha8Rng) -> LowRankAdapter {
    // B starts at zero so the dense update starts at zero; A gets a small
    // seeded uniform draw.
    let a = Matrix::new(
        rank,
        d_in,
        (0..rank * d_in)
            .map(|_| rng.random_range(-FRESH_INIT_SCALE..FRESH_INIT_SCALE))
            .collect(),
    )
    .expect("fresh adapter entries are finite");
    LowRankAdapter::new(Matrix::zeros(classes, rank), a).expect("fresh adapter shapes")
}

/// Runs the configured scenario and returns the matrix, metrics, logs and
/// final cache.
pub fn run_scenario(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let family_params = &config.scenario.family;
    let family =
        make_task_family_with(family_params, child_seed(config.seed, &[FAMILY_STREAM]))?;
    let schedule =
        compose_scenario(&family, &config.scenario, child_seed(config.seed, &[SCENARIO_STREAM]))?;

    let aggregator = AggregatorRegistry::with_builtins().build(&config.aggregator)?;
    let base = Matrix::zeros(family_params.classes, family_params.input_dim);

    let mut cache = DynamicCache::new(config.tau)?;
    let mut shared = {
        let mut rng =
            ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[BASELINE_INIT_STREAM]));
        fresh_adapter(family_params.classes, family_params.input_dim, config.rank, &mut rng)
    };

    let mut results = ResultsMatrix::new();
    let mut rounds = Vec::new();
    let mut round_caches = Vec::new();
    let mut activation_log = Vec::new();

    for stage in 0..schedule.stages() {
        // One shard and one identity token per participating client, fixed
        // for the whole stage.
        let mut shards: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
        let mut tokens: BTreeMap<usize, IdentityToken> = BTreeMap::new();
        for shard in schedule.stage_shards(stage) {
            let examples: Vec<Example> = shard
                .indices
                .iter()
                .map(|&i| family[shard.task].train[i].clone())
                .collect();
            let instructions: Vec<&str> =
                examples.iter().map(|e| e.instruction.as_str()).collect();
            tokens.insert(shard.client, local_token(&instructions, &config.encoder)?);
            shards.insert(shard.client, examples);
        }

        let mut sampling_rng = ChaCha8Rng::seed_from_u64(child_seed(
            config.seed,
            &[SAMPLING_STREAM, stage as u64],
        ));
        let mut init_rng =
            ChaCha8Rng::seed_from_u64(child_seed(config.seed, &[INIT_STREAM, stage as u64]));

        for round in 0..schedule.rounds_per_stage {
            let sampled: Vec<usize> = rand::seq::index::sample(
                &mut sampling_rng,
                schedule.client_pool,
                schedule.clients_per_round,
            )
            .into_iter()
            .collect();

            let mut updates = Vec::new();
            for &client in &sampled {
                let Some(shard) = shards.get(&client) else {
                    continue; // sampled but holds no data this stage
                };
                let (adapter, trained_slot) = match config.mode {
                    RunMode::Disco => match cache.select_subspace(&tokens[&client])? {
                        SubspaceChoice::Existing(index) => {
                            (cache.entries()[index].adapter.clone(), Some(index))
                        }
                        SubspaceChoice::Fresh => (
                            fresh_adapter(
                                family_params.classes,
                                family_params.input_dim,
                                config.rank,
                                &mut init_rng,
                            ),
                            None,
                        ),
                    },
                    RunMode::FinetuneBaseline => (shared.clone(), Some(0)),
                };
                let model = ClientModel {
                    base: base.clone(),
                    adapter,
                    learning_rate: config.learning_rate,
                    epochs: config.epochs,
                };
                let update =
                    local_train(&model, shard, &config.encoder, client as u64, trained_slot)
                        .map_err(|e| {
                            Error::NonFinite(format!(
                                "stage {stage} round {round} client {client}: {e}"
                            ))
                        })?;
                updates.push(update);
            }

            let mut assigned: BTreeMap<u64, usize> = BTreeMap::new();
            match config.mode {
                RunMode::Disco => {
                    for assignment in cache.server_round(&updates, aggregator.as_ref(), stage)? {
                        assigned.insert(assignment.client_id, assignment.entry);
                    }
                    round_caches.push(cache.clone());
                }
                RunMode::FinetuneBaseline => {
                    if !updates.is_empty() {
                        let adapters: Vec<LowRankAdapter> =
                            updates.iter().map(|u| u.adapter.clone()).collect();
                        let weights: Vec<u64> =
                            updates.iter().map(|u| u.sample_count).collect();
                        shared = fed_avg(&adapters, &weights)?;
                    }
                    for update in &updates {
                        assigned.insert(update.client_id, 0);
                    }
                }
            }

            let cache_size = match config.mode {
                RunMode::Disco => cache.len(),
                RunMode::FinetuneBaseline => 1,
            };
            for &client in &sampled {
                rounds.push(RoundRecord {
                    stage,
                    round,
                    client,
                    matched_entry: assigned.get(&(client as u64)).copied(),
                    cache_size,
                });
            }
        }

        // Evaluate every task seen so far on its held-out test set.
        let seen = schedule.seen_tasks(stage);
        let mut accuracies = Vec::with_capacity(seen.len());
        for &task in &seen {
            let accuracy = match config.mode {
                RunMode::Disco => evaluate_selective(
                    &cache,
                    &base,
                    &family[task],
                    config,
                    stage,
                    &mut activation_log,
                )?,
                RunMode::FinetuneBaseline => {
                    evaluate_dense(&base, &shared.product(), &family[task])?
                }
            };
            accuracies.push(accuracy);
        }
        results.push_stage(&seen, &accuracies)?;
    }

    let report = MetricsReport {
        last: results.last()?,
        avg: results.avg()?,
        forgetting: if results.stages() >= 2 {
            results
                .forgetting()?
                .into_iter()
                .map(|(task, drop)| (task.to_string(), drop))
                .collect()
        } else {
            BTreeMap::new()
        },
    };

    Ok(RunOutput {
        results,
        report,
        rounds,
        round_caches,
        final_cache: (config.mode == RunMode::Disco).then_some(cache),
        activation_log,
    })
}

fn evaluate_selective(
    cache: &DynamicCache,
    base: &Matrix,
    task: &crate::bench::SyntheticTask,
    config: &RunConfig,
    stage: usize,
    activation_log: &mut Vec<ActivationRecord>,
) -> Result<f64> {
    let mut correct = 0usize;
    for (i, example) in task.test.iter().enumerate() {
        // A cache with no entries yet contributes no update at all.
        let delta = if cache.is_empty() {
            Matrix::zeros(base.rows(), base.cols())
        } else {
            let s = scores(cache, &example.instruction, &config.encoder)?;
            let act = activations(&s, &config.activation)?;
            if config.log_activations {
                let test_id = format!("s{stage}-t{}-{i}", task.id);
                for (entry, &alpha) in act.factors().iter().enumerate() {
                    activation_log.push(ActivationRecord {
                        test_id: test_id.clone(),
                        entry,
                        alpha,
                    });
                }
            }
            assemble(cache, &act)?
        };
        if argmax(&predict(base, &delta, &example.x)?) == example.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / task.test.len() as f64)
}

fn evaluate_dense(
    base: &Matrix,
    delta: &Matrix,
    task: &crate::bench::SyntheticTask,
) -> Result<f64> {
    let mut correct = 0usize;
    for example in &task.test {
        if argmax(&predict(base, delta, &example.x)?) == example.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / task.test.len() as f64)
}

/// Writes `results_matrix.csv`, `metrics.json`, `rounds.csv`, the cache
/// snapshot when one exists, and `activations.csv` when activation logging
/// was on.
pub fn write_artifacts(dir: &Path, output: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results_matrix.csv"), output.results.to_csv())?;

    let mut metrics = serde_json::to_string_pretty(&output.report)?;
    metrics.push('\n');
    std::fs::write(dir.join("metrics.json"), metrics)?;

    let mut rounds = String::from("stage,round,client,matched_entry,cache_size\n");
    for r in &output.rounds {
        let matched = r.matched_entry.map(|e| e.to_string()).unwrap_or_default();
        rounds.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.round, r.client, matched, r.cache_size
        ));
    }
    std::fs::write(dir.join("rounds.csv"), rounds)?;

    if let Some(cache) = &output.final_cache {
        std::fs::write(dir.join("cache.json"), cache.to_snapshot_json()?)?;
    }

    if !output.activation_log.is_empty() {
        let mut lines = String::from("test_id,entry,alpha\n");
        for record in &output.activation_log {
            lines.push_str(&format!("{},{},{}\n", record.test_id, record.entry, record.alpha));
        }
        std::fs::write(dir.join("activations.csv"), lines)?;
    }

    Ok(())
}
