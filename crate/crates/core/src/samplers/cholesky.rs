//! Sequential Cholesky-based exact sampler.

use nalgebra::DMatrix;
use rand::Rng;

use crate::dpp::{KernelFactor, Subset};
use crate::error::{Error, Result};

/// Conditional marginals may leave `[0, 1]` by this much before the sampler gives up.
pub const MARGINAL_BAND: f64 = 1e-8;

/// Validates a conditional marginal and clamps it into `[0, 1]`.
pub(crate) fn checked_marginal(item: usize, p: f64) -> Result<f64> {
    if !p.is_finite() || p < -MARGINAL_BAND || p > 1.0 + MARGINAL_BAND {
        return Err(Error::NumericalDegeneracy { item, value: p });
    }
    Ok(p.clamp(0.0, 1.0))
}

/// Draws positions `0..n` from the DPP with marginal kernel `q`.
///
/// Items are visited in order. Each is kept with its current conditional marginal,
/// then the remaining kernel is conditioned on that outcome by one elimination step.
/// Exactly one uniform variate is consumed per item.
pub fn sample_from_marginal<R: Rng + ?Sized>(q: &DMatrix<f64>, rng: &mut R) -> Result<Vec<usize>> {
    let n = q.nrows();
    let mut k = q.clone();
    let mut picked = Vec::new();
    for i in 0..n {
        let p = checked_marginal(i, k[(i, i)])?;
        let u: f64 = rng.random();
        let keep = u < p;
        if keep {
            picked.push(i);
        } else {
            k[(i, i)] -= 1.0;
        }
        let d = k[(i, i)];
        for r in (i + 1)..n {
            k[(r, i)] /= d;
        }
        for r in (i + 1)..n {
            let kr = k[(r, i)];
            for c in (i + 1)..n {
                k[(r, c)] -= kr * k[(i, c)];
            }
        }
    }
    Ok(picked)
}

/// Exact sampler holding the precomputed marginal kernel.
#[derive(Clone, Debug)]
pub struct CholeskySampler {
    q: DMatrix<f64>,
}

impl CholeskySampler {
    pub fn new(factor: &KernelFactor) -> Result<Self> {
        Ok(Self {
            q: factor.marginal_kernel()?.q,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Subset> {
        Ok(Subset::new(sample_from_marginal(&self.q, rng)?))
    }
}

/// One exact draw; recomputes the marginal kernel on every call.
pub fn sample_cholesky_exact<R: Rng + ?Sized>(factor: &KernelFactor, rng: &mut R) -> Result<Subset> {
    CholeskySampler::new(factor)?.sample(rng)
}
