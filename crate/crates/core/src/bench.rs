//! Synthetic benchmark generation: task families with separable instruction
//! vocabularies and linear data models, Dirichlet client partitioning, and
//! the homogeneous/heterogeneous stage schedules.
//!
//! A task is a linear multi-class classification problem. Its ground-truth
//! weight matrix labels clean feature draws, a small feature perturbation is
//! added afterwards, and every example carries an instruction string built
//! from the task's templates. Core vocabularies are pairwise disjoint across
//! tasks; a small shared word pool keeps cross-task token cosines strictly
//! positive so matching stays nontrivial.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::Matrix;
use crate::seeds::child_seed;

const VOCAB_STREAM: u64 = 0x10;
const TASK_STREAM: u64 = 0x20;
const PARTITION_STREAM: u64 = 0x30;

/// Words every instruction of a task repeats; its identity-token direction.
const STEM_WORDS: usize = 12;
/// Per-task extra words that rotate through the variable template slot.
const EXTRA_WORDS: usize = 6;
/// Words shared by all tasks, roughly a tenth of each vocabulary.
const SHARED_WORDS: usize = 2;

/// One labelled example: feature vector, class label, instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub label: usize,
    pub instruction: String,
}

/// A synthetic instruction-tuning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: usize,
    pub vocab: Vec<String>,
    pub templates: Vec<String>,
    #[serde(rename = "W_star")]
    pub w_star: Matrix,
    pub noise: f64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Size and scale knobs of a task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_per_task")]
    pub train_per_task: usize,
    #[serde(default = "default_test_per_task")]
    pub test_per_task: usize,
    /// Standard deviation of the clean feature draws. Large enough that the
    /// surrogate escapes its near-zero adapter initialization within a
    /// handful of federated rounds.
    #[serde(default = "default_feature_scale")]
    pub feature_scale: f64,
    /// Feature perturbation after labelling, relative to `feature_scale`.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_tasks() -> usize {
    4
}
fn default_input_dim() -> usize {
    16
}
fn default_classes() -> usize {
    8
}
fn default_train_per_task() -> usize {
    400
}
fn default_test_per_task() -> usize {
    100
}
fn default_feature_scale() -> f64 {
    8.0
}
fn default_noise() -> f64 {
    0.02
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            input_dim: default_input_dim(),
            classes: default_classes(),
            train_per_task: default_train_per_task(),
            test_per_task: default_test_per_task(),
            feature_scale: default_feature_scale(),
            noise: default_noise(),
        }
    }
}

impl FamilyParams {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            return Err(Error::InvalidConfig(format!(
                "a task family needs at least 2 tasks, got {}",
                self.tasks
            )));
        }
        if self.classes < 2 || self.input_dim < self.classes {
            return Err(Error::InvalidConfig(format!(
                "need input_dim >= classes >= 2, got input_dim {} and classes {}",
                self.input_dim, self.classes
            )));
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::InvalidConfig("train/test sizes must be positive".into()));
        }
        if !self.feature_scale.is_finite()
            || self.feature_scale <= 0.0
            || !self.noise.is_finite()
            || self.noise < 0.0
        {
            return Err(Error::InvalidConfig("feature_scale must be positive, noise >= 0".into()));
        }
        Ok(())
    }
}

/// Generates `count` tasks over `dims = (input_dim, classes)` with all other
/// knobs at their defaults.
pub fn make_task_family(count: usize, dims: (usize, usize), seed: u64) -> Result<Vec<SyntheticTask>> {
    let params = FamilyParams { tasks: count, input_dim: dims.0, classes: dims.1, ..Default::default() };
    make_task_family_with(&params, seed)
}

/// Generates a task family: disjoint core vocabularies come from one
/// dedicated vocabulary stream, then each task is materialized from its own
/// child stream so tasks could be generated independently.
pub fn make_task_family_with(params: &FamilyParams, seed: u64) -> Result<Vec<SyntheticTask>> {
    params.validate()?;

    let mut vocab_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &[VOCAB_STREAM]));
    let mut used = std::collections::BTreeSet::new();
    let mut draw_word = |rng: &mut ChaCha8Rng| -> String {
        loop {
            let len = rng.random_range(4..=7);
            let word: String =
                (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
            if used.insert(word.clone()) {
                return word;
            }
        }
    };
    let shared: Vec<String> = (0..SHARED_WORDS).map(|_| draw_word(&mut vocab_rng)).collect();
    let cores: Vec<Vec<String>> = (0..params.tasks)
        .map(|_| (0..STEM_WORDS + EXTRA_WORDS).map(|_| draw_word(&mut vocab_rng)).collect())
        .collect();

    (0..params.tasks)
        .map(|task_id| {
            let task_seed = child_seed(seed, &[TASK_STREAM, task_id as u64]);
            make_task(task_id, &cores[task_id], &shared, params, task_seed)
        })
        .collect()
}

fn make_task(
    task_id: usize,
    core: &[String],
    shared: &[String],
    params: &FamilyParams,
    seed: u64,
) -> Result<SyntheticTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let stem = &core[..STEM_WORDS];
    let variables: Vec<&String> = core[STEM_WORDS..].iter().chain(shared).collect();
    let templates: Vec<String> = variables
        .iter()
        .map(|variable| {
            let mut words: Vec<&str> = stem.iter().map(String::as_str).collect();
            words.push(variable.as_str());
            // Word order varies per template; the encoder is order-blind but
            // the texts should not be trivially identical strings.
            for i in (1..words.len()).rev() {
                let j = rng.random_range(0..=i);
                words.swap(i, j);
            }
            words.join(" ")
        })
        .collect();

    let (d_in, classes) = (params.input_dim, params.classes);
    let w_star = Matrix::new(
        classes,
        d_in,
        (0..classes * d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )?;

    let draw_examples = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
        (0..n)
            .map(|_| {
                let clean: Vec<f64> = (0..d_in)
                    .map(|_| params.feature_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let scores = w_star.matvec(&clean)?;
                let label = crate::trainer::argmax(&scores);
                let x: Vec<f64> = clean
                    .iter()
                    .map(|v| {
                        v + params.noise
                            * params.feature_scale
                            * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let template = &templates[rng.random_range(0..templates.len())];
                Ok(Example { x, label, instruction: template.clone() })
            })
            .collect()
    };

    let train = draw_examples(params.train_per_task, &mut rng)?;
    let test = draw_examples(params.test_per_task, &mut rng)?;

    let mut vocab: Vec<String> = core.to_vec();
    vocab.extend_from_slice(shared);

    Ok(SyntheticTask {
        id: task_id,
        vocab,
        templates,
        w_star,
        noise: params.noise,
        train,
        test,
    })
}

/// Draws Dirichlet(beta) proportions over `clients` and converts them to
/// sample counts that total exactly `task_samples`: floors first, then the
/// remainder goes to the largest fractional parts (ties to the lower index).
pub fn dirichlet_partition(
    task_samples: usize,
    clients: &[usize],
    beta: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if clients.is_empty() {
        return Err(Error::InvalidConfig("dirichlet partition over zero clients".into()));
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proportions = dirichlet_proportions(&mut rng, beta, clients.len())?;
    Ok(counts_from_proportions(&proportions, task_samples))
}

fn dirichlet_proportions(rng: &mut ChaCha8Rng, beta: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("gamma shape {beta}: {e}")))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|g| g / total).collect())
    } else {
        // All gamma draws underflowed to zero; fall back to a uniform split.
        Ok(vec![1.0 / k as f64; k])
    }
}

fn counts_from_proportions(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0usize;
    for (i, p) in proportions.iter().enumerate() {
        let ideal = p * total as f64;
        let floor = ideal.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((i, ideal - ideal.floor()));
    }
    fractions.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (i, _) in fractions.iter().take(total.saturating_sub(assigned)) {
        counts[*i] += 1;
    }
    counts
}

/// Homogeneous stages hold one task for every client; heterogeneous stages
/// may hold several, split round-robin across the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioMode {
    #[serde(alias = "hom")]
    HomFcit,
    #[serde(alias = "het")]
    HetFcit,
}

/// One client's slice of one task during one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub stage: usize,
    pub client: usize,
    pub task: usize,
    pub indices: Vec<usize>,
}

/// Fully materialized stage-by-stage shard tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSchedule {
    pub mode: ScenarioMode,
    pub beta: f64,
    pub client_pool: usize,
    pub clients_per_round: usize,
    pub rounds_per_stage: usize,
    pub stage_tasks: Vec<Vec<usize>>,
    pub shards: Vec<ClientShard>,
}

impl ScenarioSchedule {
    pub fn stages(&self) -> usize {
        self.stage_tasks.len()
    }

    /// Shards of one stage, in ascending client order.
    pub fn stage_shards(&self, stage: usize) -> impl Iterator<Item = &ClientShard> {
        self.shards.iter().filter(move |s| s.stage == stage)
    }

    /// Distinct tasks scheduled up to and including `stage`, in first-seen order.
    pub fn seen_tasks(&self, stage: usize) -> Vec<usize> {
        let mut seen = Vec::new();
        for tasks in self.stage_tasks.iter().take(stage + 1) {
            for &t in tasks {
                if !seen.contains(&t) {
                    seen.push(t);
                }
            }
        }
        seen
    }
}

/// Scenario shape: mode, stage plan and federation sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_mode")]
    pub mode: ScenarioMode,
    /// Tasks per stage. Defaults to one task per stage in id order for the
    /// homogeneous mode and consecutive pairs for the heterogeneous mode.
    #[serde(default)]
    pub stage_task_plan: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_client_pool")]
    pub client_pool: usize,
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
    #[serde(default = "default_rounds_per_stage")]
    pub rounds_per_stage: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub family: FamilyParams,
}

fn default_mode() -> ScenarioMode {
    ScenarioMode::HomFcit
}
fn default_client_pool() -> usize {
    50
}
fn default_clients_per_round() -> usize {
    5
}
fn default_rounds_per_stage() -> usize {
    10
}
fn default_beta() -> f64 {
    1.0
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            stage_task_plan: None,
            client_pool: default_client_pool(),
            clients_per_round: default_clients_per_round(),
            rounds_per_stage: default_rounds_per_stage(),
            beta: default_beta(),
            family: FamilyParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.client_pool == 0 || self.clients_per_round == 0 || self.rounds_per_stage == 0 {
            return Err(Error::InvalidConfig(
                "client pool, clients per round and rounds per stage must be positive".into(),
            ));
        }
        if self.clients_per_round > self.client_pool {
            return Err(Error::InvalidConfig(format!(
                "cannot sample {} clients from a pool of {}",
                self.clients_per_round, self.client_pool
            )));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        for (stage, tasks) in self.effective_plan().iter().enumerate() {
            if tasks.is_empty() {
                return Err(Error::InvalidConfig(format!("stage {stage} schedules no task")));
            }
            if self.mode == ScenarioMode::HomFcit && tasks.len() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "homogeneous stages hold exactly one task, stage {stage} holds {}",
                    tasks.len()
                )));
            }
            if tasks.iter().any(|&t| t >= self.family.tasks) {
                return Err(Error::InvalidConfig(format!(
                    "stage {stage} references a task outside 0..{}",
                    self.family.tasks
                )));
            }
        }
        Ok(())
    }

    pub fn effective_plan(&self) -> Vec<Vec<usize>> {
        if let Some(plan) = &self.stage_task_plan {
            return plan.clone();
        }
        match self.mode {
            ScenarioMode::HomFcit => (0..self.family.tasks).map(|t| vec![t]).collect(),
            ScenarioMode::HetFcit => (0..self.family.tasks)
                .collect::<Vec<_>>()
                .chunks(2)
                .map(<[usize]>::to_vec)
                .collect(),
        }
    }
}

/// Materializes per-stage, per-client shards.
///
/// Heterogeneous stages first assign each client one of the stage's tasks
/// round-robin by client id, then partition each task's training set across
/// its client group with a Dirichlet draw from a per-(stage, task) stream.
/// Clients whose count comes out zero hold no shard that stage.
pub fn compose_scenario(
    family: &[SyntheticTask],
    config: &ScenarioConfig,
    seed: u64,
) -> Result<ScenarioSchedule> {
    config.validate()?;
    if family.len() != config.family.tasks {
        return Err(Error::InvalidConfig(format!(
            "family has {} tasks but config expects {}",
            family.len(),
            config.family.tasks
        )));
    }
    let plan = config.effective_plan();
    let mut shards = Vec::new();

    for (stage, stage_tasks) in plan.iter().enumerate() {
        for (slot, &task) in stage_tasks.iter().enumerate() {
            let group: Vec<usize> = (0..config.client_pool)
                .filter(|client| client % stage_tasks.len() == slot)
                .collect();
            if group.is_empty() {
                continue;
            }
            let partition_seed =
                child_seed(seed, &[PARTITION_STREAM, stage as u64, task as u64]);
            let counts =
                dirichlet_partition(family[task].train.len(), &group, config.beta, partition_seed)?;
            let mut offset = 0usize;
            for (client, count) in group.iter().zip(&counts) {
                if *count == 0 {
                    continue;
                }
                shards.push(ClientShard {
                    stage,
                    client: *client,
                    task,
                    indices: (offset..offset + count).collect(),
                });
                offset += count;
            }
        }
    }

    Ok(ScenarioSchedule {
        mode: config.mode,
        beta: config.beta,
        client_pool: config.client_pool,
        clients_per_round: config.clients_per_round,
        rounds_per_stage: config.rounds_per_stage,
        stage_tasks: plan,
        shards,
    })
}

/// Serializable bundle of a task family plus its materialized shard table,
/// i.e. everything needed to reproduce a run's data side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBundle {
    pub tasks: Vec<SyntheticTask>,
    pub shards: Vec<ClientShard>,
}

impl ScenarioBundle {
    pub fn new(tasks: Vec<SyntheticTask>, schedule: &ScenarioSchedule) -> Self {
        Self { tasks, shards: schedule.shards.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}
