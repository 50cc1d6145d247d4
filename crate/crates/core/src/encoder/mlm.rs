//! In-domain masked-language-model training of the tiny encoder.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, softmax, Adam, TinyEncoder, Vocab};
use crate::corpus::Product;
use crate::error::{Error, Result};
use crate::parallel::accumulate;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            steps: 5000,
            batch_size: 32,
            mask_rate: 0.15,
            lr: 1e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// A corrupted input sequence and the `(position, original id)` targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub input: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Selects each position with probability `rate`; a selected token becomes
/// `[MASK]` 80% of the time, a random word 10%, and stays unchanged 10%.
pub fn mask_for_mlm(ids: &[usize], rate: f64, vocab_len: usize, rng: &mut impl Rng) -> MlmExample {
    let mut input = ids.to_vec();
    let mut targets = Vec::new();
    if rate <= 0.0 {
        return MlmExample { input, targets };
    }
    for (i, &id) in ids.iter().enumerate() {
        if !rng.gen_bool(rate.min(1.0)) {
            continue;
        }
        targets.push((i, id));
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input[i] = Vocab::MASK;
        } else if roll < 0.9 && vocab_len > 3 {
            input[i] = rng.gen_range(3..vocab_len);
        }
    }
    MlmExample { input, targets }
}

/// Mean cross-entropy over all target positions of the batch, and the number
/// of targets. With zero targets the loss is 0 and no gradient is added.
pub fn mlm_loss<S: Scalar>(
    encoder: &TinyEncoder<S>,
    batch: &[MlmExample],
    grad: Option<&mut [S]>,
) -> Result<(f64, usize)> {
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return Ok((0.0, 0));
    }
    let inv = S::lit(1.0 / count as f64);
    let want_grad = grad.is_some();
    let tok = encoder.token_embeddings();
    let bias = encoder.mlm_bias();
    let tok_off = encoder.token_embedding_offset();
    let bias_off = encoder.mlm_bias_offset();
    let dim = tok.ncols();

    let (loss, g) = accumulate(batch, want_grad.then_some(encoder.param_count()), |ex, mut grad| {
        if ex.targets.is_empty() {
            return Ok(0.0);
        }
        let fwd = encoder.forward(&ex.input)?;
        let mut d_hidden = Array2::<S>::zeros(fwd.hidden.raw_dim());
        let mut loss = 0.0;
        for &(pos, target) in &ex.targets {
            let out = fwd.hidden.row(pos);
            let logits = tok.dot(&out) + bias;
            let p = softmax(logits.view());
            loss -= p[target].max(S::min_positive_value()).as_f64().ln();
            if let Some(grad) = grad.as_deref_mut() {
                let mut dlogits = p * inv;
                dlogits[target] -= inv;
                d_hidden.row_mut(pos).scaled_add(S::one(), &tok.t().dot(&dlogits));
                for (j, &gj) in dlogits.iter().enumerate() {
                    let row = &mut grad[tok_off + j * dim..tok_off + (j + 1) * dim];
                    for (r, &o) in row.iter_mut().zip(out.iter()) {
                        *r += gj * o;
                    }
                    grad[bias_off + j] += gj;
                }
            }
        }
        if let Some(grad) = grad {
            encoder.backward(&fwd, &d_hidden, grad);
        }
        Ok(loss)
    })?;
    if let (Some(out), Some(g)) = (grad, g) {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok((loss / count as f64, count))
}

/// Fits the encoder to the corpus with the masked-LM objective and returns
/// the loss of every step.
pub fn mlm_pretrain<S: Scalar>(
    encoder: &mut TinyEncoder<S>,
    corpus: &[Product],
    config: &MlmConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("masked-LM pretraining needs a non-empty corpus".into()));
    }
    if !(0.0..=1.0).contains(&config.mask_rate) {
        return Err(Error::config("pretrain.mask_rate", "must be within [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|p| {
            let mut ids = encoder.ids(&p.tokens);
            ids.truncate(encoder.config().max_len);
            ids
        })
        .collect();
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(encoder.param_count(), config.lr);
    let mut history = Vec::with_capacity(config.steps);
    let mut warned = false;
    let vocab_len = encoder.vocab().len();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(mask_for_mlm(&sequences[order[cursor]], config.mask_rate, vocab_len, &mut rng));
            cursor += 1;
        }
        let mut grad = vec![S::zero(); encoder.param_count()];
        let (loss, count) = mlm_loss(encoder, &batch, Some(&mut grad))?;
        if count == 0 {
            if !warned {
                log::warn!("masked-LM batch has no masked positions; contributing zero loss");
                warned = true;
            }
        } else {
            clip_grad_norm(&mut grad, config.grad_clip);
            opt.step(encoder.params_mut(), &grad);
        }
        if step % 100 == 0 {
            log::debug!("mlm step {step}: loss {loss:.4}");
        }
        history.push(loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TinyConfig;
    use approx::assert_abs_diff_eq;

    fn tiny(words: &[&str]) -> TinyEncoder<f64> {
        let vocab = Vocab::from_words(words.iter().map(|w| w.to_string()));
        let cfg = TinyConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_len: 8,
            init_std: 0.2,
            seed: 1,
        };
        TinyEncoder::new(cfg, vocab).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_loss() {
        let mut e = tiny(&["a", "b", "c", "d", "e"]);
        e.params_mut().fill(0.0);
        let batch = vec![MlmExample {
            input: vec![Vocab::MASK, 4, 5],
            targets: vec![(0, 3)],
        }];
        let (loss, n) = mlm_loss(&e, &batch, None).unwrap();
        assert_eq!(n, 1);
        assert_abs_diff_eq!(loss, (e.vocab().len() as f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn no_targets_means_zero_loss() {
        let e = tiny(&["a"]);
        let batch = vec![MlmExample {
            input: vec![3],
            targets: vec![],
        }];
        assert_eq!(mlm_loss(&e, &batch, None).unwrap(), (0.0, 0));
    }

    #[test]
    fn zero_mask_rate_leaves_parameters_unchanged() {
        let mut e = tiny(&["a", "b"]);
        let before = e.params().to_vec();
        let corpus = vec![Product {
            id: "p".into(),
            product_type: "t".into(),
            tokens: vec!["a".into(), "b".into()],
        }];
        let cfg = MlmConfig {
            steps: 3,
            mask_rate: 0.0,
            ..MlmConfig::default()
        };
        let losses = mlm_pretrain(&mut e, &corpus, &cfg).unwrap();
        assert_eq!(losses, vec![0.0; 3]);
        assert_eq!(e.params(), &before[..]);
    }

    #[test]
    fn empty_corpus_is_error() {
        let mut e = tiny(&["a"]);
        assert!(mlm_pretrain(&mut e, &[], &MlmConfig::default()).is_err());
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let mut e = tiny(&["a", "b", "c", "d", "e", "f"]);
        let batch = vec![
            MlmExample {
                input: vec![3, Vocab::MASK, 5, 6],
                targets: vec![(1, 4), (3, 6)],
            },
            MlmExample {
                input: vec![Vocab::MASK, 7],
                targets: vec![(0, 8)],
            },
        ];
        let mut grad = vec![0.0; e.param_count()];
        mlm_loss(&e, &batch, Some(&mut grad)).unwrap();
        let h = 1e-5;
        for i in (0..e.param_count()).step_by(5) {
            let orig = e.params()[i];
            e.params_mut()[i] = orig + h;
            let lp = mlm_loss(&e, &batch, None).unwrap().0;
            e.params_mut()[i] = orig - h;
            let lm = mlm_loss(&e, &batch, None).unwrap().0;
            e.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-5);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn masking_respects_rate_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = vec![3, 4, 5, 6];
        assert!(mask_for_mlm(&ids, 0.0, 7, &mut rng).targets.is_empty());
        let all = mask_for_mlm(&ids, 1.0, 7, &mut rng);
        assert_eq!(all.targets.len(), 4);
        assert!(all.targets.iter().zip(&ids).all(|(t, &id)| t.1 == id));
    }
}
