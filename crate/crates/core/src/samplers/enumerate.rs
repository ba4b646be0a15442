//! Brute-force sampler over the full power set; used as a correctness oracle.

use rand::Rng;

use crate::dpp::{KernelFactor, Subset, ENUMERATION_LIMIT};
use crate::error::{Error, Result};

/// All `2^M` subset probabilities of a DPP, with a cumulative table for inversion.
#[derive(Clone, Debug)]
pub struct EnumeratedDpp {
    m: usize,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl EnumeratedDpp {
    pub fn new(factor: &KernelFactor) -> Result<Self> {
        let m = factor.m();
        if m > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge(m, ENUMERATION_LIMIT));
        }
        let log_z = factor.log_normalizer();
        let k = factor.k();
        let probs: Vec<f64> = (0u32..(1u32 << m))
            .map(|mask| {
                if mask.count_ones() as usize > k {
                    0.0
                } else {
                    (factor.log_det_minor(&Subset::from_mask(mask)) - log_z).exp()
                }
            })
            .collect();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        Ok(Self { m, probs, cdf })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Probability indexed by subset bitmask.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, subset: &Subset) -> f64 {
        self.probs[subset.mask() as usize]
    }

    /// Inclusion probability of each item.
    pub fn marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (mask, p) in self.probs.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                if mask & (1 << i) != 0 {
                    *o += p;
                }
            }
        }
        out
    }

    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let total = *self.cdf.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.cdf.len() - 1) as u32
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Subset {
        Subset::from_mask(self.sample_mask(rng))
    }
}

/// One draw by CDF inversion over the enumerated power set.
pub fn sample_enumerate<R: Rng + ?Sized>(factor: &KernelFactor, rng: &mut R) -> Result<Subset> {
    Ok(EnumeratedDpp::new(factor)?.sample(rng))
}
