//! Local client training: full-batch gradient descent on the low-rank
//! factors of `W = W0 + B A` under softmax cross-entropy, with the frozen
//! base untouched.
//!
//! Full-batch descent keeps the update a pure function of (model, shard):
//! there is no data-order or minibatch stochasticity to seed.

use crate::bench::Example;
use crate::dko::ClientUpdate;
use crate::embed::{local_token, EncoderSpec};
use crate::error::{Error, Result};
use crate::lowrank::{LowRankAdapter, Matrix};

/// A client's view of the model: frozen base, trainable adapter, step size
/// and the number of full-batch passes per training call.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub base: Matrix,
    pub adapter: LowRankAdapter,
    pub learning_rate: f64,
    pub epochs: usize,
}

/// Class scores `(W0 + delta) x`.
pub fn predict(base: &Matrix, delta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if !base.same_shape(delta) {
        return Err(Error::ShapeMismatch(format!(
            "base is {}x{} but delta is {}x{}",
            base.rows(),
            base.cols(),
            delta.rows(),
            delta.cols()
        )));
    }
    base.add(delta)?.matvec(x)
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean softmax cross-entropy of `(W0 + B A) x` over a shard.
pub fn shard_loss(base: &Matrix, adapter: &LowRankAdapter, shard: &[Example]) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::DegenerateInput("loss over an empty shard".into()));
    }
    let w = base.add(&adapter.product())?;
    let mut total = 0.0;
    for example in shard {
        let scores = w.matvec(&example.x)?;
        if example.label >= scores.len() {
            return Err(Error::ShapeMismatch(format!(
                "label {} out of range for {} classes",
                example.label,
                scores.len()
            )));
        }
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let log_sum: f64 = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += log_sum - (scores[example.label] - max);
    }
    Ok(total / shard.len() as f64)
}

/// Mean gradient of the cross-entropy w.r.t. the dense weight:
/// `G = mean((softmax(scores) - onehot(label)) x^T)`.
fn dense_gradient(base: &Matrix, adapter: &LowRankAdapter, shard: &[Example]) -> Result<Matrix> {
    let w = base.add(&adapter.product())?;
    let (classes, d_in) = (w.rows(), w.cols());
    let mut g = Matrix::zeros(classes, d_in);
    for example in shard {
        let probs = softmax(&w.matvec(&example.x)?);
        if example.label >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {} out of range for {classes} classes",
                example.label
            )));
        }
        for (c, &p) in probs.iter().enumerate() {
            let residual = p - f64::from(c == example.label);
            if residual == 0.0 {
                continue;
            }
            for (j, xj) in example.x.iter().enumerate() {
                g.set(c, j, g.get(c, j) + residual * xj);
            }
        }
    }
    Ok(g.scale(1.0 / shard.len() as f64))
}

/// Gradients w.r.t. the factors: `dB = G A^T`, `dA = B^T G`.
pub fn factor_gradients(
    base: &Matrix,
    adapter: &LowRankAdapter,
    shard: &[Example],
) -> Result<(Matrix, Matrix)> {
    let g = dense_gradient(base, adapter, shard)?;
    let grad_b = g.matmul(&adapter.a().transposed())?;
    let grad_a = adapter.b().transposed().matmul(&g)?;
    Ok((grad_b, grad_a))
}

/// Trains the adapter on the shard and packages the upload: the trained
/// factors, the identity token of the shard's instructions, and the shard
/// size. Both factor gradients of a pass are taken at the same point before
/// either factor moves. The base is never touched.
pub fn local_train(
    model: &ClientModel,
    shard: &[Example],
    encoder: &EncoderSpec,
    client_id: u64,
    trained_slot: Option<usize>,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "client {client_id} has an empty shard"
        )));
    }
    let mut b = model.adapter.b().clone();
    let mut a = model.adapter.a().clone();
    for epoch in 0..model.epochs {
        let adapter = LowRankAdapter::from_stacked(b.clone(), a.clone())?;
        let (grad_b, grad_a) = factor_gradients(&model.base, &adapter, shard)?;
        b = b.zip_map(&grad_b, |w, g| w - model.learning_rate * g)?;
        a = a.zip_map(&grad_a, |w, g| w - model.learning_rate * g)?;
        b.assert_finite(&format!("client {client_id} adapter B after epoch {epoch}"))?;
        a.assert_finite(&format!("client {client_id} adapter A after epoch {epoch}"))?;
    }

    let instructions: Vec<&str> = shard.iter().map(|e| e.instruction.as_str()).collect();
    let token = local_token(&instructions, encoder)?;
    Ok(ClientUpdate::new(
        LowRankAdapter::from_stacked(b, a)?,
        token,
        client_id,
        trained_slot,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    fn random_shard(rng: &mut ChaCha8Rng, n: usize, d_in: usize, classes: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                x: (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: rng.random_range(0..classes),
                instruction: format!("inspect item {i} now"),
            })
            .collect()
    }

    fn model(rng: &mut ChaCha8Rng, classes: usize, d_in: usize, r: usize) -> ClientModel {
        ClientModel {
            base: random_matrix(rng, classes, d_in, 1.0),
            adapter: LowRankAdapter::new(
                random_matrix(rng, classes, r, 0.3),
                random_matrix(rng, r, d_in, 0.3),
            )
            .unwrap(),
            learning_rate: 0.05,
            epochs: 1,
        }
    }

    #[test]
    fn predict_with_zero_delta_is_base_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_matrix(&mut rng, 3, 4, 1.0);
        let x = [0.5, -1.0, 2.0, 0.25];
        let scores = predict(&base, &Matrix::zeros(3, 4), &x).unwrap();
        assert_eq!(scores, base.matvec(&x).unwrap());
    }

    #[test]
    fn predict_with_ground_truth_delta_recovers_true_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_star = random_matrix(&mut rng, 3, 4, 1.0);
        let x = [1.0, 2.0, -0.5, 0.0];
        let scores = predict(&Matrix::zeros(3, 4), &w_star, &x).unwrap();
        assert_eq!(scores, w_star.matvec(&x).unwrap());
    }

    // Index loops spell out the reference expansion on purpose.
    #[allow(clippy::needless_range_loop)]
    #[test]
    fn predict_matches_manual_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let base = random_matrix(&mut rng, 4, 5, 1.0);
            let delta = random_matrix(&mut rng, 4, 5, 1.0);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = predict(&base, &delta, &x).unwrap();
            for i in 0..4 {
                let mut want = 0.0;
                for j in 0..5 {
                    want += (base.get(i, j) + delta.get(i, j)) * x[j];
                }
                assert!((got[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn zero_learning_rate_returns_the_adapter_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = model(&mut rng, 3, 4, 2);
        m.learning_rate = 0.0;
        m.epochs = 5;
        let shard = random_shard(&mut rng, 10, 4, 3);
        let update = local_train(&m, &shard, &EncoderSpec::default(), 0, None).unwrap();
        let bits = |mat: &Matrix| -> Vec<u64> { mat.data().iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(update.adapter.b()), bits(m.adapter.b()));
        assert_eq!(bits(update.adapter.a()), bits(m.adapter.a()));
    }

    // Central finite differences over every factor entry; the oracle only
    // evaluates the loss, never the analytic gradient path.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-5;
        for _ in 0..20 {
            let m = model(&mut rng, 3, 4, 2);
            let shard = random_shard(&mut rng, 8, 4, 3);
            let (grad_b, grad_a) = factor_gradients(&m.base, &m.adapter, &shard).unwrap();

            let check = |analytic: &Matrix, which: char| {
                for r in 0..analytic.rows() {
                    for c in 0..analytic.cols() {
                        let perturbed = |delta: f64| -> f64 {
                            let mut b = m.adapter.b().clone();
                            let mut a = m.adapter.a().clone();
                            match which {
                                'b' => b.set(r, c, b.get(r, c) + delta),
                                _ => a.set(r, c, a.get(r, c) + delta),
                            }
                            let adapter = LowRankAdapter::from_stacked(b, a).unwrap();
                            shard_loss(&m.base, &adapter, &shard).unwrap()
                        };
                        let numeric = (perturbed(step) - perturbed(-step)) / (2.0 * step);
                        let got = analytic.get(r, c);
                        let denom = numeric.abs().max(got.abs()).max(1e-8);
                        let rel = (numeric - got).abs() / denom;
                        assert!(
                            rel < 1e-5,
                            "factor {which}[{r},{c}]: analytic {got} vs numeric {numeric} (rel {rel})"
                        );
                    }
                }
            };
            check(&grad_b, 'b');
            check(&grad_a, 'a');
        }
    }

    #[test]
    fn one_epoch_at_default_step_size_never_increases_the_loss() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = model(&mut rng, 4, 6, 2);
            let shard = random_shard(&mut rng, 12, 6, 4);
            let before = shard_loss(&m.base, &m.adapter, &shard).unwrap();
            let update = local_train(&m, &shard, &EncoderSpec::default(), 0, None).unwrap();
            let after = shard_loss(&m.base, &update.adapter, &shard).unwrap();
            assert!(
                after <= before,
                "seed {seed}: loss rose from {before} to {after} after one epoch"
            );
        }
    }

    #[test]
    fn base_stays_bitwise_frozen_and_counts_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = model(&mut rng, 3, 4, 2);
        let base_bits: Vec<u64> = m.base.data().iter().map(|x| x.to_bits()).collect();
        let shard = random_shard(&mut rng, 9, 4, 3);
        let update = local_train(&m, &shard, &EncoderSpec::default(), 3, Some(1)).unwrap();
        let after_bits: Vec<u64> = m.base.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(base_bits, after_bits);
        assert_eq!(update.sample_count, 9);
        assert_eq!(update.local_token.support_count, 9);
        assert_eq!(update.client_id, 3);
        assert_eq!(update.trained_slot, Some(1));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(&mut rng, 3, 4, 2);
        let shard = random_shard(&mut rng, 10, 4, 3);
        let one = local_train(&m, &shard, &EncoderSpec::default(), 0, None).unwrap();
        let two = local_train(&m, &shard, &EncoderSpec::default(), 0, None).unwrap();
        let bits = |mat: &Matrix| -> Vec<u64> { mat.data().iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(one.adapter.b()), bits(two.adapter.b()));
        assert_eq!(bits(one.adapter.a()), bits(two.adapter.a()));
        assert_eq!(one.local_token, two.local_token);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(&mut rng, 3, 4, 2);
        assert!(matches!(
            local_train(&m, &[], &EncoderSpec::default(), 0, None),
            Err(Error::DegenerateInput(_))
        ));
    }
}
