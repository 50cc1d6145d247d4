//! Contextual encoders, value pooling, similarity and the classification head.
//!
//! Two backends share the [`ContextEncoder`] contract: [`TinyEncoder`], a
//! small self-attention encoder trained in-process, and [`ExternalEncoder`],
//! which drives a pretrained masked language model in a child process and
//! averages its sub-word vectors back to words.

mod checkpoint;
mod external;
mod head;
mod mlm;
mod optim;
mod tiny;
mod vocab;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::corpus::{Span, ValueOccurrence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use checkpoint::{load_encoder, load_head, save_encoder, save_head, CHECKPOINT_VERSION};
pub use external::{aggregate_word_pieces, ExternalEncoder};
pub use head::{classification_sequence, classify, softmax, ClassifierHead, Label, LabelTable};
pub use mlm::{mask_for_mlm, mlm_loss, mlm_pretrain, MlmConfig, MlmExample};
pub use optim::{clip_grad_norm, Adam};
pub use tiny::{Forward, TinyConfig, TinyEncoder};
pub use vocab::Vocab;

pub const MASK_TOKEN: &str = "[MASK]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Produces one contextual vector per input token.
pub trait ContextEncoder<S: Scalar>: Sync {
    fn dim(&self) -> usize;

    /// Longest sequence the encoder accepts.
    fn max_len(&self) -> usize;

    /// Encodes `tokens` with the positions in `masked` replaced by the mask
    /// token. Returns an `n x dim` matrix.
    fn encode_masked(&self, tokens: &[String], masked: &[usize]) -> Result<Array2<S>>;

    fn encode(&self, tokens: &[String]) -> Result<Array2<S>> {
        self.encode_masked(tokens, &[])
    }
}

pub(crate) fn check_positions(masked: &[usize], len: usize) -> Result<()> {
    match masked.iter().find(|&&p| p >= len) {
        Some(&position) => Err(Error::OutOfRange { position, len }),
        None => Ok(()),
    }
}

/// Mean of the token vectors inside `span`.
pub fn mean_pool<S: Scalar>(tokens: &Array2<S>, span: Span) -> Result<Array1<S>> {
    if span.is_empty() {
        return Err(Error::InvalidSpan {
            start: span.start,
            end: span.end,
            len: tokens.nrows(),
        });
    }
    span.validate(tokens.nrows())?;
    let rows = tokens.slice(ndarray::s![span.start..span.end, ..]);
    Ok(rows.sum_axis(Axis(0)) / S::lit(span.len() as f64))
}

/// Contextual embedding of a value occurrence: the title is encoded as a
/// whole and the vectors of the value's own tokens are averaged.
pub fn encode_value<S: Scalar, E: ContextEncoder<S> + ?Sized>(
    encoder: &E,
    occurrence: &ValueOccurrence,
    title: &[String],
) -> Result<Array1<S>> {
    occurrence.span.validate(title.len())?;
    let hidden = encoder.encode(title)?;
    mean_pool(&hidden, occurrence.span)
}

/// Cosine similarity; errors on a zero vector.
pub fn pair_similarity<S: Scalar>(u: ArrayView1<S>, v: ArrayView1<S>) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::ZeroVector);
    }
    let c = u.dot(&v) / (nu * nv);
    Ok(c.max(-S::one()).min(S::one()))
}

/// `1 - cosine similarity`, in `[0, 2]`.
pub fn cosine_distance<S: Scalar>(u: ArrayView1<S>, v: ArrayView1<S>) -> Result<S> {
    Ok(S::one() - pair_similarity(u, v)?)
}

/// Cosine similarity and its gradients with respect to both arguments.
pub(crate) fn cosine_with_grad<S: Scalar>(u: ArrayView1<S>, v: ArrayView1<S>) -> (S, Array1<S>, Array1<S>) {
    let tiny = S::lit(1e-12);
    let nu = u.dot(&u).sqrt().max(tiny);
    let nv = v.dot(&v).sqrt().max(tiny);
    let c = u.dot(&v) / (nu * nv);
    // d cos / du = v / (|u||v|) - c u / |u|^2
    let du = &v / (nu * nv) - &u * (c / (nu * nu));
    let dv = &u / (nu * nv) - &v * (c / (nv * nv));
    (c, du, dv)
}
