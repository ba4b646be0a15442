//! Gumbel-Softmax relaxation of categorical sampling.

use nalgebra::DMatrix;
use rand::Rng;

use super::tape::{Tape, TapeMatrix};
use crate::error::{Error, Result};

/// Uniform draws are confined to `(EPS, 1 - EPS)` before the double logarithm.
pub const UNIFORM_EPS: f64 = 1e-12;

/// Standard Gumbel variate `-ln(-ln u)`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// A block of i.i.d. Gumbel(0, 1) draws.
///
/// Noise marked `frozen` is meant to be replayed across several evaluations
/// (finite-difference checks); evaluation with the same draws is bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    pub draws: Vec<f64>,
    pub frozen: bool,
}

impl GumbelNoise {
    pub fn sample<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let draws = (0..k).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect();
        Self {
            draws,
            frozen: false,
        }
    }

    pub fn from_draws(draws: Vec<f64>) -> Self {
        Self {
            draws,
            frozen: true,
        }
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Gumbel-max index: `argmax(logits + g)`, first index on ties.
    pub fn argmax(&self, logits: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, (l, g)) in logits.iter().zip(&self.draws).enumerate() {
            let v = l + g;
            if v > best_val {
                best = i;
                best_val = v;
            }
        }
        best
    }
}

/// `softmax((log_probs + g) / tau)` on the tape; `log_probs` is a `k x 1` column.
pub fn gumbel_softmax(
    tape: &mut Tape,
    log_probs: TapeMatrix,
    tau: f64,
    noise: &GumbelNoise,
) -> Result<TapeMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if log_probs.cols() != 1 || noise.len() != log_probs.rows() {
        return Err(Error::DimensionMismatch(format!(
            "gumbel_softmax over {}x{} logits with {} noise draws",
            log_probs.rows(),
            log_probs.cols(),
            noise.len()
        )));
    }
    if tape.value(log_probs).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gumbel_softmax logits"));
    }
    let g = tape.constant(DMatrix::from_column_slice(noise.len(), 1, &noise.draws))?;
    let z = tape.add(log_probs, g)?;
    tape.softmax(z, tau)
}
