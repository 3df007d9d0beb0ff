//! Dynamic knowledge organization: the server-side cache of task subspaces.
//!
//! Every communication round the server matches uploaded identity tokens
//! against the global tokens of its cache entries, folds matched uploads into
//! their subspace with the configured federated rule, greedily groups the
//! leftovers into new subspaces, and grows the cache. Entries are never
//! removed or reordered, and an entry that no upload matches is left
//! untouched down to the bit.

use serde::{Deserialize, Serialize};

use crate::aggregate::{fed_avg, Aggregator, AggregatorState};
use crate::embed::IdentityToken;
use crate::error::{Error, Result};
use crate::lowrank::{cosine, LowRankAdapter, Matrix};

/// One task-specific slot of the cache: the adapter, its global identity
/// token (an unnormalized running mean over client tokens), the stage that
/// created it, and the per-entry state of adaptive aggregators.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceEntry {
    pub adapter: LowRankAdapter,
    pub global_token: IdentityToken,
    pub created_at_stage: usize,
    pub optimizer_state: AggregatorState,
}

impl SubspaceEntry {
    pub fn new(adapter: LowRankAdapter, global_token: IdentityToken, stage: usize) -> Self {
        let optimizer_state = AggregatorState::zeros_like(&adapter);
        Self { adapter, global_token, created_at_stage: stage, optimizer_state }
    }
}

/// The payload a client uploads after local training. Carries no task label;
/// the server routes purely on the identity token.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub adapter: LowRankAdapter,
    pub local_token: IdentityToken,
    pub sample_count: u64,
    pub client_id: u64,
    /// Cache index the client trained from, if any. Client-side bookkeeping
    /// only; the server never routes on it.
    pub trained_slot: Option<usize>,
}

impl ClientUpdate {
    pub fn new(
        adapter: LowRankAdapter,
        local_token: IdentityToken,
        client_id: u64,
        trained_slot: Option<usize>,
    ) -> Self {
        let sample_count = local_token.support_count;
        Self { adapter, local_token, sample_count, client_id, trained_slot }
    }
}

/// What a client should do with its provisional token: keep training an
/// existing subspace, or initialize a fresh adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceChoice {
    Existing(usize),
    Fresh,
}

/// Where each update of a round ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundAssignment {
    pub client_id: u64,
    pub entry: usize,
    pub created: bool,
}

/// Ordered collection of subspace entries plus the matching threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicCache {
    entries: Vec<SubspaceEntry>,
    tau: f64,
}

impl DynamicCache {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 || tau > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "matching threshold must lie in (0, 1], got {tau}"
            )));
        }
        Ok(Self { entries: Vec::new(), tau })
    }

    /// A cache pre-populated with entries, e.g. when resuming a run.
    pub fn with_entries(entries: Vec<SubspaceEntry>, tau: f64) -> Result<Self> {
        let mut cache = Self::new(tau)?;
        cache.entries = entries;
        Ok(cache)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn entries(&self) -> &[SubspaceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry with maximal token cosine, among entries clearing
    /// the threshold. Exact ties resolve to the lowest index.
    pub fn match_token(&self, token: &IdentityToken) -> Result<Option<usize>> {
        let mut best: Option<(usize, f64)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            let sim = cosine(&token.vector, &entry.global_token.vector)?;
            if sim >= self.tau && best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        Ok(best.map(|(i, _)| i))
    }

    /// Forwarding wrapper used by clients before local training: an empty
    /// cache or a below-threshold token yields the fresh-adapter directive.
    pub fn select_subspace(&self, token: &IdentityToken) -> Result<SubspaceChoice> {
        Ok(match self.match_token(token)? {
            Some(index) => SubspaceChoice::Existing(index),
            None => SubspaceChoice::Fresh,
        })
    }

    /// Executes one communication round against this cache.
    ///
    /// Matching runs against the cache state at round entry, so an entry that
    /// attracts no upload this round is bitwise unchanged. New entries are
    /// combined with a plain sample-weighted mean (no optimizer state exists
    /// yet) and appended in group-creation order with `stage` recorded.
    pub fn server_round(
        &mut self,
        updates: &[ClientUpdate],
        aggregator: &dyn Aggregator,
        stage: usize,
    ) -> Result<Vec<RoundAssignment>> {
        if updates.is_empty() {
            return Ok(Vec::new());
        }

        let matches: Vec<Option<usize>> = updates
            .iter()
            .map(|u| self.match_token(&u.local_token))
            .collect::<Result<_>>()?;

        let mut matched_groups: Vec<Vec<usize>> = vec![Vec::new(); self.entries.len()];
        let mut unmatched: Vec<usize> = Vec::new();
        for (i, m) in matches.iter().enumerate() {
            match m {
                Some(entry_idx) => matched_groups[*entry_idx].push(i),
                None => unmatched.push(i),
            }
        }

        let mut assignments = Vec::with_capacity(updates.len());

        for (entry_idx, group) in matched_groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let adapters: Vec<LowRankAdapter> =
                group.iter().map(|&i| updates[i].adapter.clone()).collect();
            let weights: Vec<u64> = group.iter().map(|&i| updates[i].sample_count).collect();
            let tokens: Vec<&IdentityToken> =
                group.iter().map(|&i| &updates[i].local_token).collect();

            let entry = &mut self.entries[entry_idx];
            let previous = entry.adapter.clone();
            entry.adapter =
                aggregator.apply(&previous, &adapters, &weights, &mut entry.optimizer_state)?;
            entry.global_token = merge_global_token(Some(&entry.global_token), &tokens)?;

            for &i in group {
                assignments.push(RoundAssignment {
                    client_id: updates[i].client_id,
                    entry: entry_idx,
                    created: false,
                });
            }
        }

        let leftovers: Vec<&ClientUpdate> = unmatched.iter().map(|&i| &updates[i]).collect();
        for group in pair_mismatched(&leftovers, self.tau)? {
            let adapters: Vec<LowRankAdapter> =
                group.iter().map(|&i| leftovers[i].adapter.clone()).collect();
            let weights: Vec<u64> = group.iter().map(|&i| leftovers[i].sample_count).collect();
            let tokens: Vec<&IdentityToken> =
                group.iter().map(|&i| &leftovers[i].local_token).collect();

            let adapter = fed_avg(&adapters, &weights)?;
            let global_token = merge_global_token(None, &tokens)?;
            let entry_idx = self.entries.len();
            self.entries.push(SubspaceEntry::new(adapter, global_token, stage));

            for &i in &group {
                assignments.push(RoundAssignment {
                    client_id: leftovers[i].client_id,
                    entry: entry_idx,
                    created: true,
                });
            }
        }

        Ok(assignments)
    }

    /// JSON snapshot: `{tau, entries: [{B, A, token, count, createdAtStage}]}`
    /// with row-major number arrays. Optimizer state is not part of the
    /// format; a reloaded cache starts it zeroed.
    pub fn to_snapshot_json(&self) -> Result<String> {
        let snapshot = Snapshot {
            tau: self.tau,
            entries: self
                .entries
                .iter()
                .map(|e| SnapshotEntry {
                    b: e.adapter.b().to_rows(),
                    a: e.adapter.a().to_rows(),
                    token: e.global_token.vector.clone(),
                    count: e.global_token.support_count,
                    created_at_stage: e.created_at_stage,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&snapshot)?)
    }

    pub fn from_snapshot_json(json: &str) -> Result<Self> {
        let snapshot: Snapshot = serde_json::from_str(json)?;
        let mut cache = Self::new(snapshot.tau)?;
        for entry in snapshot.entries {
            let adapter = LowRankAdapter::from_stacked(
                Matrix::from_rows(&entry.b)?,
                Matrix::from_rows(&entry.a)?,
            )?;
            let token = IdentityToken::new(entry.token, entry.count)?;
            cache.entries.push(SubspaceEntry::new(adapter, token, entry.created_at_stage));
        }
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    tau: f64,
    entries: Vec<SnapshotEntry>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    token: Vec<f64>,
    count: u64,
    #[serde(rename = "createdAtStage")]
    created_at_stage: usize,
}

/// Greedily groups updates that failed to match any cache entry.
///
/// Candidates are visited in ascending `client_id` order. Each joins the
/// first existing group whose representative (the running sample-weighted
/// mean of the group's tokens) has cosine at least `tau`, otherwise it founds
/// a new group. Returns groups of indices into `locals`, in creation order.
pub fn pair_mismatched(locals: &[&ClientUpdate], tau: f64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..locals.len()).collect();
    order.sort_by_key(|&i| locals[i].client_id);

    struct Group {
        members: Vec<usize>,
        token_sum: Vec<f64>,
        weight: u64,
    }

    let mut groups: Vec<Group> = Vec::new();
    'candidates: for &i in &order {
        let update = locals[i];
        for group in groups.iter_mut() {
            // The representative is token_sum / weight; cosine only sees the
            // direction, so the unscaled sum is compared directly.
            let sim = cosine(&update.local_token.vector, &group.token_sum)?;
            if sim >= tau {
                group.members.push(i);
                let n = update.sample_count as f64;
                for (s, x) in group.token_sum.iter_mut().zip(&update.local_token.vector) {
                    *s += n * x;
                }
                group.weight += update.sample_count;
                continue 'candidates;
            }
        }
        let n = update.sample_count as f64;
        groups.push(Group {
            members: vec![i],
            token_sum: update.local_token.vector.iter().map(|x| n * x).collect(),
            weight: update.sample_count,
        });
    }

    Ok(groups.into_iter().map(|g| g.members).collect())
}

/// Sample-weighted mean of identity tokens on raw (unnormalized) vectors.
///
/// With an existing global token its stored vector participates with its own
/// support count; the returned count is the sum of all contributions.
pub fn merge_global_token(
    existing: Option<&IdentityToken>,
    locals: &[&IdentityToken],
) -> Result<IdentityToken> {
    if locals.is_empty() {
        return Err(Error::DegenerateInput("token merge needs at least one local token".into()));
    }
    let dim = existing.map_or(locals[0].dimension(), IdentityToken::dimension);
    if locals.iter().any(|t| t.dimension() != dim) {
        return Err(Error::ShapeMismatch("identity tokens disagree on dimension".into()));
    }

    let mut sum = vec![0.0_f64; dim];
    let mut count: u64 = 0;
    if let Some(token) = existing {
        let n = token.support_count as f64;
        for (s, x) in sum.iter_mut().zip(&token.vector) {
            *s += n * x;
        }
        count += token.support_count;
    }
    for token in locals {
        let n = token.support_count as f64;
        for (s, x) in sum.iter_mut().zip(&token.vector) {
            *s += n * x;
        }
        count += token.support_count;
    }

    let total = count as f64;
    for s in sum.iter_mut() {
        *s /= total;
    }
    IdentityToken::new(sum, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{AggregatorRegistry, AggregatorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn token(vector: Vec<f64>, count: u64) -> IdentityToken {
        IdentityToken::new(vector, count).unwrap()
    }

    fn adapter(rng: &mut ChaCha8Rng, d: usize, k: usize, r: usize) -> LowRankAdapter {
        let b = Matrix::new(d, r, (0..d * r).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let a = Matrix::new(r, k, (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        LowRankAdapter::new(b, a).unwrap()
    }

    fn entry(rng: &mut ChaCha8Rng, direction: Vec<f64>, count: u64) -> SubspaceEntry {
        SubspaceEntry::new(adapter(rng, 3, 4, 2), token(direction, count), 0)
    }

    fn fedavg() -> Box<dyn Aggregator> {
        AggregatorRegistry::with_builtins().build(&AggregatorSpec::default()).unwrap()
    }

    fn cache_with(entries: Vec<SubspaceEntry>, tau: f64) -> DynamicCache {
        let mut cache = DynamicCache::new(tau).unwrap();
        cache.entries = entries;
        cache
    }

    fn update(
        rng: &mut ChaCha8Rng,
        direction: Vec<f64>,
        count: u64,
        client_id: u64,
    ) -> ClientUpdate {
        ClientUpdate::new(adapter(rng, 3, 4, 2), token(direction, count), client_id, None)
    }

    fn adapter_bits(a: &LowRankAdapter) -> Vec<u64> {
        a.b().data().iter().chain(a.a().data()).map(|x| x.to_bits()).collect()
    }

    #[test]
    fn match_token_finds_identical_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = cache_with(vec![entry(&mut rng, vec![0.0, 1.0, 0.0], 3)], 0.9);
        let got = cache.match_token(&token(vec![0.0, 2.0, 0.0], 1)).unwrap();
        assert_eq!(got, Some(0));
    }

    #[test]
    fn match_token_rejects_orthogonal_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cache = cache_with(
            vec![
                entry(&mut rng, vec![1.0, 0.0, 0.0], 3),
                entry(&mut rng, vec![0.0, 1.0, 0.0], 3),
            ],
            0.9,
        );
        assert_eq!(cache.match_token(&token(vec![0.0, 0.0, 1.0], 1)).unwrap(), None);
    }

    #[test]
    fn match_token_picks_highest_similarity_and_breaks_ties_low() {
        // Query along x; entries rotated by acos(0.95) and acos(0.93).
        let q = vec![1.0, 0.0];
        let dir = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cache = cache_with(
            vec![entry(&mut rng, dir(0.93), 2), entry(&mut rng, dir(0.95), 2)],
            0.9,
        );
        // Brute-force oracle over the entries.
        let sims: Vec<f64> = cache
            .entries()
            .iter()
            .map(|e| cosine(&q, &e.global_token.vector).unwrap())
            .collect();
        let oracle = sims
            .iter()
            .enumerate()
            .filter(|(_, s)| **s >= 0.9)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i);
        assert_eq!(cache.match_token(&token(q.clone(), 1)).unwrap(), oracle);
        assert_eq!(oracle, Some(1));

        // Exact tie: duplicate directions resolve to the lower index.
        let tied = cache_with(
            vec![entry(&mut rng, dir(0.95), 2), entry(&mut rng, dir(0.95), 2)],
            0.9,
        );
        assert_eq!(tied.match_token(&token(q, 1)).unwrap(), Some(0));
    }

    #[test]
    fn match_token_rejects_zero_norm_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cache = cache_with(vec![entry(&mut rng, vec![1.0, 0.0], 1)], 0.9);
        let zero = IdentityToken { vector: vec![0.0, 0.0], support_count: 1 };
        assert!(cache.match_token(&zero).is_err());
    }

    #[test]
    fn select_subspace_on_empty_cache_is_fresh() {
        let cache = DynamicCache::new(0.9).unwrap();
        let choice = cache.select_subspace(&token(vec![1.0, 0.0], 1)).unwrap();
        assert_eq!(choice, SubspaceChoice::Fresh);
    }

    #[test]
    fn select_subspace_forwards_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cache = cache_with(
            vec![
                entry(&mut rng, vec![1.0, 0.0, 0.0], 1),
                entry(&mut rng, vec![0.0, 1.0, 0.0], 1),
                entry(&mut rng, vec![0.0, 0.0, 1.0], 1),
            ],
            0.9,
        );
        let choice = cache.select_subspace(&token(vec![0.0, 0.0, 3.0], 1)).unwrap();
        assert_eq!(choice, SubspaceChoice::Existing(2));
    }

    #[test]
    fn select_subspace_boundary_below_threshold_is_fresh() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 0.89_f64;
        let cache = cache_with(vec![entry(&mut rng, vec![1.0, 0.0], 1)], 0.9);
        let query = token(vec![c, (1.0 - c * c).sqrt()], 1);
        // Scan oracle: the single similarity is 0.89 < 0.9.
        let sim = cosine(&query.vector, &cache.entries()[0].global_token.vector).unwrap();
        assert!(sim < 0.9 && (sim - 0.89).abs() < 1e-12);
        assert_eq!(cache.select_subspace(&query).unwrap(), SubspaceChoice::Fresh);
    }

    #[test]
    fn pair_mismatched_groups_identical_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u1 = update(&mut rng, vec![1.0, 0.0], 2, 10);
        let u2 = update(&mut rng, vec![2.0, 0.0], 3, 11);
        let groups = pair_mismatched(&[&u1, &u2], 0.9).unwrap();
        assert_eq!(groups, vec![vec![0, 1]]);
    }

    #[test]
    fn pair_mismatched_keeps_orthogonal_tokens_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u1 = update(&mut rng, vec![1.0, 0.0, 0.0], 1, 1);
        let u2 = update(&mut rng, vec![0.0, 1.0, 0.0], 1, 2);
        let u3 = update(&mut rng, vec![0.0, 0.0, 1.0], 1, 3);
        let groups = pair_mismatched(&[&u1, &u2, &u3], 0.9).unwrap();
        assert_eq!(groups, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn pair_mismatched_mixed_cosines_match_exhaustive_oracle() {
        // Three unit tokens with pairwise cosines {0.95, 0.3, 0.3}: the first
        // two group together, the third stands alone.
        let c12 = 0.95_f64;
        let c13 = 0.3_f64;
        let u = vec![1.0, 0.0, 0.0];
        let v = vec![c12, (1.0 - c12 * c12).sqrt(), 0.0];
        // Solve w so that w.u = 0.3 and w.v = 0.3, unit norm.
        let wx = c13;
        let wy = (c13 - c12 * wx) / (1.0 - c12 * c12).sqrt();
        let wz = (1.0 - wx * wx - wy * wy).sqrt();
        let w = vec![wx, wy, wz];
        assert!((cosine(&u, &v).unwrap() - 0.95).abs() < 1e-12);
        assert!((cosine(&u, &w).unwrap() - 0.3).abs() < 1e-12);
        assert!((cosine(&v, &w).unwrap() - 0.3).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u1 = update(&mut rng, u.clone(), 1, 1);
        let u2 = update(&mut rng, v.clone(), 1, 2);
        let u3 = update(&mut rng, w.clone(), 1, 3);
        let groups = pair_mismatched(&[&u1, &u2, &u3], 0.9).unwrap();
        assert_eq!(groups, vec![vec![0, 1], vec![2]]);

        // Exhaustive oracle: of all pairs, only (u, v) clears the threshold.
        let tokens = [&u, &v, &w];
        for i in 0..3 {
            for j in (i + 1)..3 {
                let qualifies = cosine(tokens[i], tokens[j]).unwrap() >= 0.9;
                assert_eq!(qualifies, (i, j) == (0, 1));
            }
        }
    }

    #[test]
    fn merge_equal_weight_midpoint() {
        let merged = merge_global_token(
            Some(&token(vec![1.0, 0.0], 2)),
            &[&token(vec![0.0, 1.0], 2)],
        )
        .unwrap();
        assert_eq!(merged.vector, vec![0.5, 0.5]);
        assert_eq!(merged.support_count, 4);
    }

    #[test]
    fn merge_without_entry_of_single_local_is_identity() {
        let local = token(vec![0.25, -0.5, 1.0], 7);
        let merged = merge_global_token(None, &[&local]).unwrap();
        assert_eq!(merged.vector, local.vector);
        assert_eq!(merged.support_count, 7);
    }

    #[test]
    fn merge_weighted_example() {
        let merged = merge_global_token(
            Some(&token(vec![2.0, 0.0], 3)),
            &[&token(vec![0.0, 3.0], 1), &token(vec![1.0, 1.0], 2)],
        )
        .unwrap();
        assert!((merged.vector[0] - 8.0 / 6.0).abs() < 1e-15);
        assert!((merged.vector[1] - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(merged.support_count, 6);
    }

    #[test]
    fn merge_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let dim = rng.random_range(2..=8);
            let locals_n = rng.random_range(1..=5);
            let has_entry = rng.random_range(0..2) == 1;
            let make = |rng: &mut ChaCha8Rng| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = rng.random_range(1..=20u64);
                token(v, n)
            };
            let existing = has_entry.then(|| make(&mut rng));
            let locals: Vec<IdentityToken> = (0..locals_n).map(|_| make(&mut rng)).collect();
            let refs: Vec<&IdentityToken> = locals.iter().collect();
            let merged = merge_global_token(existing.as_ref(), &refs).unwrap();

            // Brute force on raw vectors.
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for t in existing.iter().chain(locals.iter()) {
                for (s, x) in num.iter_mut().zip(&t.vector) {
                    *s += t.support_count as f64 * x;
                }
                den += t.support_count as f64;
            }
            for (got, want) in merged.vector.iter().zip(num.iter().map(|x| x / den)) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn server_round_singleton_match_replaces_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cache = cache_with(vec![entry(&mut rng, vec![1.0, 0.0], 2)], 0.9);
        let upload = update(&mut rng, vec![1.0, 0.0], 5, 42);
        let assignments = cache.server_round(std::slice::from_ref(&upload), fedavg().as_ref(), 0).unwrap();
        assert_eq!(
            assignments,
            vec![RoundAssignment { client_id: 42, entry: 0, created: false }]
        );
        // FedAvg over one adapter is that adapter.
        assert_eq!(adapter_bits(&cache.entries()[0].adapter), adapter_bits(&upload.adapter));
        assert_eq!(cache.entries()[0].global_token.support_count, 7);
    }

    #[test]
    fn server_round_unmatched_pair_founds_weighted_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cache = DynamicCache::new(0.9).unwrap();
        let u1 = update(&mut rng, vec![1.0, 0.0], 3, 1);
        let u2 = update(&mut rng, vec![1.0, 0.0], 1, 2);
        let assignments =
            cache.server_round(&[u1.clone(), u2.clone()], fedavg().as_ref(), 4).unwrap();
        assert_eq!(cache.len(), 1);
        assert!(assignments.iter().all(|a| a.entry == 0 && a.created));
        assert_eq!(cache.entries()[0].created_at_stage, 4);

        // Brute-force sample-weighted mean of the two adapters.
        let expect = |x: f64, y: f64| (3.0 * x + 1.0 * y) / 4.0;
        let got = &cache.entries()[0].adapter;
        for (i, (&x, &y)) in u1.adapter.b().data().iter().zip(u2.adapter.b().data()).enumerate()
        {
            assert!((got.b().data()[i] - expect(x, y)).abs() < 1e-12);
        }
        for (i, (&x, &y)) in u1.adapter.a().data().iter().zip(u2.adapter.a().data()).enumerate()
        {
            assert!((got.a().data()[i] - expect(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn server_round_empty_updates_is_a_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cache = cache_with(
            vec![entry(&mut rng, vec![1.0, 0.0], 2), entry(&mut rng, vec![0.0, 1.0], 2)],
            0.9,
        );
        let before = cache.clone();
        let assignments = cache.server_round(&[], fedavg().as_ref(), 1).unwrap();
        assert!(assignments.is_empty());
        assert_eq!(cache, before);
        for (a, b) in cache.entries().iter().zip(before.entries()) {
            assert_eq!(adapter_bits(&a.adapter), adapter_bits(&b.adapter));
        }
    }

    #[test]
    fn unmatched_entries_are_bitwise_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cache = cache_with(
            vec![entry(&mut rng, vec![1.0, 0.0, 0.0], 2), entry(&mut rng, vec![0.0, 1.0, 0.0], 2)],
            0.9,
        );
        let untouched_bits = adapter_bits(&cache.entries()[1].adapter);
        let untouched_token = cache.entries()[1].global_token.clone();
        for round in 0..5 {
            let upload = update(&mut rng, vec![1.0, 0.0, 0.0], 2, round);
            cache.server_round(&[upload], fedavg().as_ref(), 0).unwrap();
        }
        assert_eq!(adapter_bits(&cache.entries()[1].adapter), untouched_bits);
        assert_eq!(cache.entries()[1].global_token, untouched_token);
    }

    #[test]
    fn support_counts_are_conserved_and_cache_grows_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut cache = DynamicCache::new(0.9).unwrap();
        let mut expected_total = 0u64;
        let mut last_len = 0;
        for round in 0..20 {
            let n_updates = rng.random_range(0..4);
            let updates: Vec<ClientUpdate> = (0..n_updates)
                .map(|i| {
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let count = rng.random_range(1..=10u64);
                    update(&mut rng, vec![angle.cos(), angle.sin()], count, i)
                })
                .collect();
            expected_total += updates.iter().map(|u| u.sample_count).sum::<u64>();
            cache.server_round(&updates, fedavg().as_ref(), round).unwrap();
            let total: u64 =
                cache.entries().iter().map(|e| e.global_token.support_count).sum();
            assert_eq!(total, expected_total);
            assert!(cache.len() >= last_len);
            last_len = cache.len();
        }
    }

    #[test]
    fn tiny_threshold_collapses_everything_into_one_entry() {
        // With tau = 0.1 and tokens spread over a quarter turn, every upload
        // keeps matching the first formed entry, so one subspace survives.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut cache = DynamicCache::new(0.1).unwrap();
        for round in 0..10 {
            let updates: Vec<ClientUpdate> = (0..3)
                .map(|i| {
                    let angle: f64 = rng.random_range(0.0..0.8);
                    update(&mut rng, vec![angle.cos(), angle.sin()], 1, i)
                })
                .collect();
            cache.server_round(&updates, fedavg().as_ref(), round).unwrap();
        }
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn replaying_identical_rounds_is_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut cache = DynamicCache::new(0.85).unwrap();
            for round in 0..8 {
                let updates: Vec<ClientUpdate> = (0..3)
                    .map(|i| {
                        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                        let count = rng.random_range(1..=6u64);
                        update(&mut rng, vec![angle.cos(), angle.sin()], count, i)
                    })
                    .collect();
                cache.server_round(&updates, fedavg().as_ref(), round).unwrap();
            }
            cache
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            assert_eq!(adapter_bits(&ea.adapter), adapter_bits(&eb.adapter));
            let ta: Vec<u64> = ea.global_token.vector.iter().map(|x| x.to_bits()).collect();
            let tb: Vec<u64> = eb.global_token.vector.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn snapshot_roundtrip_preserves_entries_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut cache = DynamicCache::new(0.9).unwrap();
        for round in 0..4 {
            let updates: Vec<ClientUpdate> = (0..2)
                .map(|i| {
                    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    update(&mut rng, vec![angle.cos(), angle.sin()], 2, i)
                })
                .collect();
            cache.server_round(&updates, fedavg().as_ref(), round).unwrap();
        }
        let json = cache.to_snapshot_json().unwrap();
        let reloaded = DynamicCache::from_snapshot_json(&json).unwrap();
        assert_eq!(reloaded.tau(), cache.tau());
        assert_eq!(reloaded.len(), cache.len());
        for (a, b) in cache.entries().iter().zip(reloaded.entries()) {
            assert_eq!(adapter_bits(&a.adapter), adapter_bits(&b.adapter));
            assert_eq!(a.global_token, b.global_token);
            assert_eq!(a.created_at_stage, b.created_at_stage);
        }

        // Schema uses the documented field names.
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(value.get("tau").is_some());
        let entry = &value["entries"][0];
        for key in ["B", "A", "token", "count", "createdAtStage"] {
            assert!(entry.get(key).is_some(), "snapshot entry missing key {key}");
        }
    }
}
