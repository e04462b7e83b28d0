//! Drawing from categorical distributions.
//!
//! Two interchangeable sources feed the decoders: a live RNG stream, or a
//! forced list of outcomes. The forced source is what lets an exhaustive
//! enumerator replay every possible trajectory through code that otherwise
//! samples, without that code knowing the difference.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Inverse-CDF draw from a probability vector using one uniform.
/// Probabilities must be non-negative; they are normalized by their own
/// sum, so a slightly unnormalized softmax output is fine. The final
/// category absorbs any residual mass so the draw always lands in range.
pub fn categorical(rng: &mut RngStream, probs: &[f64]) -> Result<usize> {
    validate_probs(probs)?;
    let total: f64 = probs.iter().sum();
    let u = rng.uniform_open() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Gumbel-max draw from unnormalized logits: argmax_i(logit_i + g_i).
/// Returns the winning index and the noise vector that produced it, so the
/// same perturbation can be replayed through a relaxed softmax.
pub fn gumbel_max(rng: &mut RngStream, logits: &[f64]) -> Result<(usize, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::domain("gumbel_max", "empty logits"));
    }
    let noise: Vec<f64> = logits.iter().map(|_| rng.gumbel()).collect();
    let mut best = 0;
    let mut best_v = logits[0] + noise[0];
    for i in 1..logits.len() {
        let v = logits[i] + noise[i];
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok((best, noise))
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::domain("categorical", "empty probability vector"));
    }
    let mut total = 0.0;
    for p in probs {
        if !p.is_finite() || *p < 0.0 {
            return Err(Error::domain(
                "categorical",
                format!("invalid probability {p}"),
            ));
        }
        total += p;
    }
    if total <= 0.0 {
        return Err(Error::domain("categorical", "probabilities sum to zero"));
    }
    Ok(())
}

/// Where a decoder's discrete choices come from.
pub enum DrawSource<'a> {
    /// Sample live from a stream.
    Rng(&'a mut RngStream),
    /// Replay a fixed outcome list, consumed left to right. Running out of
    /// outcomes is an error: the caller promised a full trajectory.
    Forced(&'a [usize], usize),
}

impl<'a> DrawSource<'a> {
    pub fn rng(rng: &'a mut RngStream) -> Self {
        DrawSource::Rng(rng)
    }

    pub fn forced(outcomes: &'a [usize]) -> Self {
        DrawSource::Forced(outcomes, 0)
    }

    /// Next categorical outcome given the current step's probabilities.
    pub fn draw(&mut self, probs: &[f64]) -> Result<usize> {
        match self {
            DrawSource::Rng(rng) => categorical(rng, probs),
            DrawSource::Forced(outcomes, pos) => {
                validate_probs(probs)?;
                let i = *outcomes.get(*pos).ok_or_else(|| {
                    Error::domain("forced_draw", "ran out of forced outcomes")
                })?;
                *pos += 1;
                if i >= probs.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "forced outcome",
                        index: i,
                        size: probs.len(),
                    });
                }
                Ok(i)
            }
        }
    }
}
