//! Deterministic instruction-text encoding and identity tokens.
//!
//! The encoder is a hashed bag of whitespace tokens: each token is hashed
//! with FNV-1a (64-bit) into one of `dimension` buckets and the bucket
//! histogram is L2-normalized. It is pure and bit-exact across platforms,
//! which is what the rest of the pipeline (token matching, subspace
//! activation) relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FNV-1a 64-bit offset basis. Fixed; part of the wire-level contract.
pub const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
/// FNV-1a 64-bit prime. Fixed; part of the wire-level contract.
pub const FNV_PRIME: u64 = 1099511628211;

/// Configuration of the hashed bag-of-tokens encoder.
///
/// The hash algorithm (`fnv1a-64`) and normalization (L2) are fixed; the
/// bucket count is the only knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

fn default_dimension() -> usize {
    64
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { dimension: default_dimension() }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 2 {
            return Err(Error::InvalidConfig(format!(
                "encoder dimension must be at least 2, got {}",
                self.dimension
            )));
        }
        Ok(())
    }

    pub fn hash_algorithm(&self) -> &'static str {
        "fnv1a-64"
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Encodes one instruction into a unit vector of length `spec.dimension`.
///
/// Texts without a single whitespace-delimited token are rejected: a zero
/// vector would poison every cosine comparison downstream.
pub fn encode(text: &str, spec: &EncoderSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut buckets = vec![0.0_f64; spec.dimension];
    let mut tokens = 0usize;
    for token in text.split_whitespace() {
        let bucket = (fnv1a_64(token.as_bytes()) % spec.dimension as u64) as usize;
        buckets[bucket] += 1.0;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::DegenerateInput("instruction text has no tokens".into()));
    }
    l2_normalize(&mut buckets)?;
    Ok(buckets)
}

fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 0.0 {
        return Err(Error::DegenerateInput("cannot normalize a zero vector".into()));
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(())
}

/// A task fingerprint: a feature-mean direction plus the number of samples
/// that contributed to it.
///
/// Local tokens produced by [`local_token`] are unit-norm. Global tokens held
/// by the server cache are running weighted means of unit vectors and are
/// stored unnormalized; comparisons always go through [`crate::lowrank::cosine`],
/// which is scale-invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityToken {
    pub vector: Vec<f64>,
    pub support_count: u64,
}

impl IdentityToken {
    pub fn new(vector: Vec<f64>, support_count: u64) -> Result<Self> {
        if support_count == 0 {
            return Err(Error::DegenerateInput("identity token needs support_count >= 1".into()));
        }
        if vector.is_empty() {
            return Err(Error::DegenerateInput("identity token needs a non-empty vector".into()));
        }
        Ok(Self { vector, support_count })
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }
}

/// Encodes every text, averages the encodings, and normalizes the mean.
///
/// The encodings are summed in a canonical (lexicographic) order rather than
/// input order, so the result is bit-identical under any permutation of the
/// input texts.
pub fn local_token<S: AsRef<str>>(texts: &[S], spec: &EncoderSpec) -> Result<IdentityToken> {
    if texts.is_empty() {
        return Err(Error::DegenerateInput("local token of zero texts".into()));
    }
    let mut encoded: Vec<Vec<f64>> = texts
        .iter()
        .map(|t| encode(t.as_ref(), spec))
        .collect::<Result<_>>()?;
    encoded.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let n = encoded.len() as f64;
    let mut mean = vec![0.0_f64; spec.dimension];
    for v in &encoded {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    l2_normalize(&mut mean)?;
    IdentityToken::new(mean, texts.len() as u64)
}
