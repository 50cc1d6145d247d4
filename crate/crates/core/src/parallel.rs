//! Deterministic data-parallel gradient accumulation.

use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Scalar;

const CHUNK: usize = 8;

/// Runs `f` over `items` in fixed-size chunks, possibly in parallel, and sums
/// losses and gradients in chunk order so results do not depend on thread
/// scheduling.
///
/// `f` receives a gradient buffer of `grad_len` entries when gradients are
/// requested.
pub(crate) fn accumulate<T, S, F>(items: &[T], grad_len: Option<usize>, f: F) -> Result<(f64, Option<Vec<S>>)>
where
    T: Sync,
    S: Scalar,
    F: Fn(&T, Option<&mut [S]>) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Option<Vec<S>>)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = grad_len.map(|n| vec![S::zero(); n]);
            let mut loss = 0.0;
            for item in chunk {
                loss += f(item, grad.as_deref_mut())?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Option<Vec<S>> = None;
    for part in partials {
        let (loss, grad) = part?;
        total += loss;
        match (&mut sum, grad) {
            (None, g) => sum = g,
            (Some(acc), Some(g)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            (Some(_), None) => {}
        }
    }
    if sum.is_none() {
        sum = grad_len.map(|n| vec![S::zero(); n]);
    }
    Ok((total, sum))
}
