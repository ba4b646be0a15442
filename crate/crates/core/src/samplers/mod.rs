//! Exact, relaxed and brute-force DPP samplers.

pub mod cholesky;
pub mod enumerate;
pub mod relaxed;
pub mod sst;
pub mod vfx;

pub use cholesky::{sample_cholesky_exact, CholeskySampler};
pub use enumerate::{sample_enumerate, EnumeratedDpp};
pub use relaxed::{
    sample_cholesky_relaxed, sample_vfx_relaxed, Proposal, RelaxedConfig, RelaxedSample, RelaxedVfx,
    Temperatures,
};
pub use sst::{sst_bernoulli, sst_multinomial, sst_poisson, BernoulliRule};
pub use vfx::{prepare_vfx, sample_vfx_exact, Rescale, VfxState};
