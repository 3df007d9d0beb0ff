//! Federated combination rules: plain sample-weighted averaging plus the
//! server-optimizer family (FedAvgM, FedAdam, FedAdagrad, FedYogi).
//!
//! Each rule lives behind the [`Aggregator`] trait and is registered by name
//! in an [`AggregatorRegistry`], so a run config selects the rule at runtime.
//! Server optimizers treat `aggregated - previous` as a pseudo-gradient and
//! keep per-subspace momentum/second-moment state; all updates are applied
//! elementwise and independently to the `B` and `A` factors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::LowRankAdapter;

/// Which combination rule to run and with which server-side hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    /// Registry name, e.g. `fedavg`, `fedavgm`, `fedadam`, `fedadagrad`, `fedyogi`.
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Server learning rate applied to the optimizer step.
    #[serde(default = "default_server_lr")]
    pub server_lr: f64,
    /// Momentum coefficient.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    /// Second-moment coefficient.
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Adaptivity floor added to the root of the second moment.
    #[serde(default = "default_adaptivity")]
    pub adaptivity: f64,
}

fn default_kind() -> String {
    "fedavg".into()
}
fn default_server_lr() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_adaptivity() -> f64 {
    1e-3
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            server_lr: default_server_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adaptivity: default_adaptivity(),
        }
    }
}

impl AggregatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "beta1/beta2 must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !self.server_lr.is_finite() || self.server_lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "server_lr must be positive, got {}",
                self.server_lr
            )));
        }
        if !self.adaptivity.is_finite() || self.adaptivity <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "adaptivity floor must be positive, got {}",
                self.adaptivity
            )));
        }
        Ok(())
    }
}

/// Per-subspace optimizer state: momentum and second moment, both shaped like
/// the adapter they belong to. Created zeroed when the subspace is created.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub momentum: LowRankAdapter,
    pub second_moment: LowRankAdapter,
}

impl AggregatorState {
    pub fn zeros_like(adapter: &LowRankAdapter) -> Self {
        let zero = adapter.map(|_| 0.0);
        Self { momentum: zero.clone(), second_moment: zero }
    }

    fn check_shapes(&self, adapter: &LowRankAdapter) -> Result<()> {
        if !self.momentum.same_shape(adapter) || !self.second_moment.same_shape(adapter) {
            return Err(Error::ShapeMismatch("optimizer state does not match adapter".into()));
        }
        Ok(())
    }
}

/// Sample-weighted elementwise mean of adapters, applied independently to the
/// `B` and `A` factors.
///
/// Computed as a running weighted mean, which makes the mean of identical
/// parameters (and of a single parameter) exact rather than exact-up-to-ulp.
pub fn fed_avg(params: &[LowRankAdapter], weights: &[u64]) -> Result<LowRankAdapter> {
    if params.is_empty() {
        return Err(Error::DegenerateInput("fed_avg of zero adapters".into()));
    }
    if params.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} adapters but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.contains(&0) {
        return Err(Error::DegenerateInput("fed_avg weights must be positive".into()));
    }
    if params.iter().any(|p| !p.same_shape(&params[0])) {
        return Err(Error::ShapeMismatch("fed_avg adapters disagree on shape".into()));
    }
    let mut mean = params[0].clone();
    let mut cumulative = weights[0];
    for (param, &w) in params.iter().zip(weights).skip(1) {
        cumulative += w;
        let fraction = w as f64 / cumulative as f64;
        mean = mean.zip_map(param, |m, p| m + fraction * (p - m))?;
    }
    Ok(mean)
}

/// Elementwise `aggregated - previous`, the input of the server optimizers.
pub fn pseudo_gradient(
    previous: &LowRankAdapter,
    aggregated: &LowRankAdapter,
) -> Result<LowRankAdapter> {
    aggregated.zip_map(previous, |agg, prev| agg - prev)
}

/// A federated combination rule. `apply` consumes one round's worth of
/// client adapters for a single subspace and may mutate that subspace's
/// optimizer state.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter>;
}

struct FedAvg;

impl Aggregator for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter> {
        state.check_shapes(previous)?;
        let result = fed_avg(params, weights)?;
        if !result.same_shape(previous) {
            return Err(Error::ShapeMismatch("aggregated adapter does not match previous".into()));
        }
        Ok(result)
    }
}

/// Shared scaffolding for the optimizer-style rules: average the client
/// adapters, form the pseudo-gradient, then walk (previous, momentum,
/// second-moment, gradient) elementwise. `moments` turns (m, v, d) into the
/// updated pair, `finish` turns (previous, m, v) into the stepped value.
fn optimizer_step(
    previous: &LowRankAdapter,
    params: &[LowRankAdapter],
    weights: &[u64],
    state: &mut AggregatorState,
    moments: impl Fn(f64, f64, f64) -> (f64, f64) + Copy,
    finish: impl Fn(f64, f64, f64) -> f64 + Copy,
    context: &str,
) -> Result<LowRankAdapter> {
    state.check_shapes(previous)?;
    let averaged = fed_avg(params, weights)?;
    if !averaged.same_shape(previous) {
        return Err(Error::ShapeMismatch("aggregated adapter does not match previous".into()));
    }
    let delta = pseudo_gradient(previous, &averaged)?;

    let (b, mb, vb) = stepped(
        previous.b(),
        state.momentum.b(),
        state.second_moment.b(),
        delta.b(),
        moments,
        finish,
        context,
    )?;
    let (a, ma, va) = stepped(
        previous.a(),
        state.momentum.a(),
        state.second_moment.a(),
        delta.a(),
        moments,
        finish,
        context,
    )?;

    *state = AggregatorState {
        momentum: LowRankAdapter::from_stacked(mb, ma)?,
        second_moment: LowRankAdapter::from_stacked(vb, va)?,
    };
    LowRankAdapter::from_stacked(b, a)
}

type SteppedFactors = (crate::lowrank::Matrix, crate::lowrank::Matrix, crate::lowrank::Matrix);

fn stepped(
    prev: &crate::lowrank::Matrix,
    m: &crate::lowrank::Matrix,
    v: &crate::lowrank::Matrix,
    d: &crate::lowrank::Matrix,
    moments: impl Fn(f64, f64, f64) -> (f64, f64),
    finish: impl Fn(f64, f64, f64) -> f64,
    context: &str,
) -> Result<SteppedFactors> {
    let n = prev.data().len();
    let mut result = Vec::with_capacity(n);
    let mut new_m = Vec::with_capacity(n);
    let mut new_v = Vec::with_capacity(n);
    for i in 0..n {
        let (mm, vv) = moments(m.data()[i], v.data()[i], d.data()[i]);
        result.push(finish(prev.data()[i], mm, vv));
        new_m.push(mm);
        new_v.push(vv);
    }
    // Matrix::new rejects non-finite entries, satisfying the "non-finite
    // intermediate is an error" contract.
    let build = |data: Vec<f64>| {
        crate::lowrank::Matrix::new(prev.rows(), prev.cols(), data)
            .map_err(|e| Error::NonFinite(format!("{context}: {e}")))
    };
    Ok((build(result)?, build(new_m)?, build(new_v)?))
}

struct FedAvgM {
    server_lr: f64,
    beta1: f64,
}

impl Aggregator for FedAvgM {
    fn name(&self) -> &'static str {
        "fedavgm"
    }

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter> {
        let (b1, lr) = (self.beta1, self.server_lr);
        optimizer_step(
            previous,
            params,
            weights,
            state,
            move |m, v, d| (b1 * m + d, v),
            move |p, m, _| p + lr * m,
            "fedavgm",
        )
    }
}

struct FedAdam {
    server_lr: f64,
    beta1: f64,
    beta2: f64,
    adaptivity: f64,
}

impl Aggregator for FedAdam {
    fn name(&self) -> &'static str {
        "fedadam"
    }

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter> {
        let (b1, b2, lr, floor) = (self.beta1, self.beta2, self.server_lr, self.adaptivity);
        optimizer_step(
            previous,
            params,
            weights,
            state,
            move |m, v, d| (b1 * m + (1.0 - b1) * d, b2 * v + (1.0 - b2) * d * d),
            move |p, m, v| p + lr * m / (v.sqrt() + floor),
            "fedadam",
        )
    }
}

struct FedAdagrad {
    server_lr: f64,
    beta1: f64,
    adaptivity: f64,
}

impl Aggregator for FedAdagrad {
    fn name(&self) -> &'static str {
        "fedadagrad"
    }

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter> {
        let (b1, lr, floor) = (self.beta1, self.server_lr, self.adaptivity);
        optimizer_step(
            previous,
            params,
            weights,
            state,
            move |m, v, d| (b1 * m + (1.0 - b1) * d, v + d * d),
            move |p, m, v| p + lr * m / (v.sqrt() + floor),
            "fedadagrad",
        )
    }
}

struct FedYogi {
    server_lr: f64,
    beta1: f64,
    beta2: f64,
    adaptivity: f64,
}

impl Aggregator for FedYogi {
    fn name(&self) -> &'static str {
        "fedyogi"
    }

    fn apply(
        &self,
        previous: &LowRankAdapter,
        params: &[LowRankAdapter],
        weights: &[u64],
        state: &mut AggregatorState,
    ) -> Result<LowRankAdapter> {
        let (b1, b2, lr, floor) = (self.beta1, self.beta2, self.server_lr, self.adaptivity);
        optimizer_step(
            previous,
            params,
            weights,
            state,
            move |m, v, d| {
                let d2 = d * d;
                // sign(0) must be 0 here so a zero pseudo-gradient leaves v
                // alone; f64::signum would map +0.0 to 1.0.
                let sign = if v - d2 > 0.0 {
                    1.0
                } else if v - d2 < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // Clamped at zero so the square root below stays defined.
                let next_v = (v - (1.0 - b2) * d2 * sign).max(0.0);
                (b1 * m + (1.0 - b1) * d, next_v)
            },
            move |p, m, v| p + lr * m / (v.sqrt() + floor),
            "fedyogi",
        )
    }
}

type AggregatorBuilder = fn(&AggregatorSpec) -> Box<dyn Aggregator>;

/// Name-keyed registry of combination rules.
pub struct AggregatorRegistry {
    builders: BTreeMap<&'static str, AggregatorBuilder>,
}

impl Default for AggregatorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl AggregatorRegistry {
    pub fn empty() -> Self {
        Self { builders: BTreeMap::new() }
    }

    /// Registry holding the five built-in rules.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("fedavg", |_| Box::new(FedAvg));
        reg.register("fedavgm", |spec| {
            Box::new(FedAvgM { server_lr: spec.server_lr, beta1: spec.beta1 })
        });
        reg.register("fedadam", |spec| {
            Box::new(FedAdam {
                server_lr: spec.server_lr,
                beta1: spec.beta1,
                beta2: spec.beta2,
                adaptivity: spec.adaptivity,
            })
        });
        reg.register("fedadagrad", |spec| {
            Box::new(FedAdagrad {
                server_lr: spec.server_lr,
                beta1: spec.beta1,
                adaptivity: spec.adaptivity,
            })
        });
        reg.register("fedyogi", |spec| {
            Box::new(FedYogi {
                server_lr: spec.server_lr,
                beta1: spec.beta1,
                beta2: spec.beta2,
                adaptivity: spec.adaptivity,
            })
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, builder: AggregatorBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    /// Builds the rule named by `spec.kind`. Lookup is case-insensitive and
    /// ignores `-`/`_`, so `FedAvgM` and `fed-avg-m` both resolve.
    pub fn build(&self, spec: &AggregatorSpec) -> Result<Box<dyn Aggregator>> {
        spec.validate()?;
        let key = canonical_name(&spec.kind);
        match self.builders.get(key.as_str()) {
            Some(builder) => Ok(builder(spec)),
            None => Err(Error::UnknownStrategy {
                name: spec.kind.clone(),
                available: self.names().join(", "),
            }),
        }
    }
}

pub(crate) fn canonical_name(name: &str) -> String {
    name.chars()
        .filter(|c| *c != '-' && *c != '_')
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// One optimizer step through the registry: resolves `spec.kind`, applies it,
/// and returns the updated adapter (the state is mutated in place).
pub fn fed_opt(
    previous: &LowRankAdapter,
    params: &[LowRankAdapter],
    weights: &[u64],
    spec: &AggregatorSpec,
    state: &mut AggregatorState,
) -> Result<LowRankAdapter> {
    AggregatorRegistry::with_builtins().build(spec)?.apply(previous, params, weights, state)
}
