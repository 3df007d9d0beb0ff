//! Subspace selective activation: score the cache against a test
//! instruction, turn the scores into per-subspace activation factors, and
//! assemble the effective low-rank update.
//!
//! The factor policies are interchangeable strategies behind
//! [`ActivationRule`], registered by name: `softmax` (temperature-scaled,
//! the default), `argmax` (one-hot), `concatenate` (all ones) and
//! `cosine-raw` (the similarities themselves).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dko::DynamicCache;
use crate::embed::{encode, EncoderSpec};
use crate::error::{Error, Result};
use crate::lowrank::{cosine, Matrix};

/// Which activation policy to run; `epsilon` is the softmax temperature and
/// is ignored by the other policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationPolicy {
    #[serde(default = "default_policy_kind")]
    pub kind: String,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_policy_kind() -> String {
    "softmax".into()
}

fn default_epsilon() -> f64 {
    0.05
}

impl Default for ActivationPolicy {
    fn default() -> Self {
        Self { kind: default_policy_kind(), epsilon: default_epsilon() }
    }
}

impl ActivationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Activation factors aligned with cache entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    factors: Vec<f64>,
}

impl ActivationVector {
    pub fn new(factors: Vec<f64>) -> Self {
        Self { factors }
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Maps similarity scores to activation factors.
pub trait ActivationRule: Send + Sync {
    fn name(&self) -> &'static str;
    fn factors(&self, scores: &[f64]) -> Vec<f64>;
}

struct Softmax {
    epsilon: f64,
}

impl ActivationRule for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    // Max-subtraction keeps s/epsilon stable: with the default temperature
    // raw exponents reach e^20 and would otherwise drown small scores.
    fn factors(&self, scores: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = scores.iter().map(|s| s / self.epsilon).collect();
        let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

struct Argmax;

impl ActivationRule for Argmax {
    fn name(&self) -> &'static str {
        "argmax"
    }

    fn factors(&self, scores: &[f64]) -> Vec<f64> {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; scores.len()];
        out[best] = 1.0;
        out
    }
}

struct Concatenate;

impl ActivationRule for Concatenate {
    fn name(&self) -> &'static str {
        "concatenate"
    }

    fn factors(&self, scores: &[f64]) -> Vec<f64> {
        vec![1.0; scores.len()]
    }
}

struct CosineRaw;

impl ActivationRule for CosineRaw {
    fn name(&self) -> &'static str {
        "cosine-raw"
    }

    fn factors(&self, scores: &[f64]) -> Vec<f64> {
        scores.to_vec()
    }
}

type RuleBuilder = fn(&ActivationPolicy) -> Box<dyn ActivationRule>;

/// Name-keyed registry of activation policies.
pub struct ActivationRegistry {
    builders: BTreeMap<&'static str, RuleBuilder>,
}

impl Default for ActivationRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ActivationRegistry {
    pub fn empty() -> Self {
        Self { builders: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("softmax", |policy| Box::new(Softmax { epsilon: policy.epsilon }));
        reg.register("argmax", |_| Box::new(Argmax));
        reg.register("concatenate", |_| Box::new(Concatenate));
        reg.register("cosineraw", |_| Box::new(CosineRaw));
        reg
    }

    pub fn register(&mut self, name: &'static str, builder: RuleBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    /// Lookup is case-insensitive and ignores `-`/`_`, so `CosineRaw` and
    /// `cosine-raw` both resolve.
    pub fn build(&self, policy: &ActivationPolicy) -> Result<Box<dyn ActivationRule>> {
        policy.validate()?;
        let key = crate::aggregate::canonical_name(&policy.kind);
        match self.builders.get(key.as_str()) {
            Some(builder) => Ok(builder(policy)),
            None => Err(Error::UnknownStrategy {
                name: policy.kind.clone(),
                available: self.names().join(", "),
            }),
        }
    }
}

/// Cosine similarity of each entry's global token against the encoded test
/// instruction, in cache order.
pub fn scores(cache: &DynamicCache, test_text: &str, spec: &EncoderSpec) -> Result<Vec<f64>> {
    let encoding = encode(test_text, spec)?;
    scores_for_encoding(cache, &encoding)
}

/// Same as [`scores`] but for a pre-computed instruction encoding.
pub fn scores_for_encoding(cache: &DynamicCache, encoding: &[f64]) -> Result<Vec<f64>> {
    if cache.is_empty() {
        return Err(Error::EmptyCache("cannot score an empty cache"));
    }
    cache
        .entries()
        .iter()
        .map(|entry| cosine(&entry.global_token.vector, encoding))
        .collect()
}

/// Applies the policy named in `policy` to a non-empty score sequence.
pub fn activations(scores: &[f64], policy: &ActivationPolicy) -> Result<ActivationVector> {
    if scores.is_empty() {
        return Err(Error::DegenerateInput("activation of zero scores".into()));
    }
    let rule = ActivationRegistry::with_builtins().build(policy)?;
    Ok(ActivationVector::new(rule.factors(scores)))
}

/// The effective update `sum_i alpha_i * B_i A_i`.
///
/// Algebraically identical to stacking all factors and multiplying through a
/// block-diagonal mixing matrix `blockdiag(alpha_i * I_r)`; the summed form
/// avoids materializing the stack. Zero factors are skipped, so a one-hot
/// activation returns exactly the selected entry's product.
pub fn assemble(cache: &DynamicCache, act: &ActivationVector) -> Result<Matrix> {
    if cache.is_empty() {
        return Err(Error::EmptyCache("cannot assemble from an empty cache"));
    }
    if act.len() != cache.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation factors for {} cache entries",
            act.len(),
            cache.len()
        )));
    }
    let first = &cache.entries()[0].adapter;
    let (d, k) = (first.output_dim(), first.input_dim());
    let mut out = Matrix::zeros(d, k);
    for (entry, &alpha) in cache.entries().iter().zip(act.factors()) {
        let adapter = &entry.adapter;
        if adapter.output_dim() != d || adapter.input_dim() != k {
            return Err(Error::ShapeMismatch("cache adapters disagree on d or k".into()));
        }
        if alpha == 0.0 {
            continue;
        }
        out = out.add(&adapter.product().scale(alpha))?;
    }
    Ok(out)
}

/// The block-diagonal mixing matrix `blockdiag(alpha_1 I_r1, ..., alpha_T I_rT)`.
///
/// Combined with [`crate::lowrank::concat_adapters`] this is the stacked
/// route to the same update that [`assemble`] computes by summation; the two
/// routes are checked against each other in the test suites.
pub fn mixing_matrix(factors: &[f64], ranks: &[usize]) -> Result<Matrix> {
    if factors.len() != ranks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} factors for {} rank blocks",
            factors.len(),
            ranks.len()
        )));
    }
    let total: usize = ranks.iter().sum();
    if total == 0 {
        return Err(Error::DegenerateInput("mixing matrix of zero total rank".into()));
    }
    let mut out = Matrix::zeros(total, total);
    let mut offset = 0;
    for (&alpha, &rank) in factors.iter().zip(ranks) {
        for i in 0..rank {
            out.set(offset + i, offset + i, alpha);
        }
        offset += rank;
    }
    Ok(out)
}
