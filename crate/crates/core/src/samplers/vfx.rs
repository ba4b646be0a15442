//! Exact DPP-VFX: Poisson-sized i.i.d. proposals from the ridge leverage scores,
//! corrected by a rejection step, then an exact sample of the small induced DPP.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::cholesky::sample_from_marginal;
use crate::diffmath::linalg;
use crate::dpp::{KernelFactor, Subset};
use crate::error::{Error, Result};

/// Floor applied to leverage scores before they are divided by.
pub const LEVERAGE_FLOOR: f64 = 1e-12;
pub const DEFAULT_MAX_REJECTIONS: usize = 1000;
pub const BETA_BRACKET: (f64, f64) = (1e-6, 1e6);

/// How the kernel is rescaled before sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rescale {
    /// Sample from `L` itself.
    Unit,
    /// A fixed scale: sample from `beta * L`.
    Fixed(f64),
    /// Choose `beta` so that `s * exp(s / q)` equals the catalog size.
    CatalogSize,
}

/// Precomputed quantities shared by every draw from one kernel.
#[derive(Clone, Debug)]
pub struct VfxState {
    pub beta: f64,
    pub s: f64,
    pub q: f64,
    /// Floored diagonal of the marginal kernel of `beta * L`.
    pub l: Vec<f64>,
    /// `(s / q) * L_ij / sqrt(l_i l_j)` for the rescaled kernel.
    pub ltilde: DMatrix<f64>,
    /// `log det(I + beta * L)`.
    pub log_det_shifted: f64,
    pub max_rejections: usize,
    cdf: Vec<f64>,
}

/// `q = s` when `s <= 1`, else `s^2`.
pub fn q_of(s: f64) -> f64 {
    if s > 1.0 {
        s * s
    } else {
        s
    }
}

/// The calibration target `s * exp(s / q)`.
pub fn poisson_target(s: f64) -> f64 {
    s * (s / q_of(s)).exp()
}

impl VfxState {
    pub fn new(factor: &KernelFactor, rescale: Rescale) -> Result<Self> {
        let beta = match rescale {
            Rescale::Unit => 1.0,
            Rescale::Fixed(b) => {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(Error::Domain(format!("kernel rescale {b} must be positive")));
                }
                b
            }
            Rescale::CatalogSize => calibrate_beta(factor)?,
        };
        let scaled = KernelFactor::new(factor.v() * beta.sqrt())?;
        let marginal = scaled.marginal_kernel()?;
        let l: Vec<f64> = marginal
            .q
            .diagonal()
            .iter()
            .map(|&x| x.max(LEVERAGE_FLOOR))
            .collect();
        let s: f64 = l.iter().sum();
        let q = q_of(s);
        let kernel = scaled.kernel();
        let ratio = s / q;
        let m = factor.m();
        let ltilde = DMatrix::from_fn(m, m, |i, j| ratio * kernel[(i, j)] / (l[i] * l[j]).sqrt());
        let mut cdf = Vec::with_capacity(m);
        let mut acc = 0.0;
        for li in &l {
            acc += li / s;
            cdf.push(acc);
        }
        Ok(Self {
            beta,
            s,
            q,
            l,
            ltilde,
            log_det_shifted: scaled.log_normalizer(),
            max_rejections: DEFAULT_MAX_REJECTIONS,
            cdf,
        })
    }

    pub fn with_max_rejections(mut self, n: usize) -> Self {
        self.max_rejections = n.max(1);
        self
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    /// Mean of the proposal size: `q * exp(s / q)`.
    pub fn proposal_rate(&self) -> f64 {
        self.q * (self.s / self.q).exp()
    }

    /// Item drawn with probability `l_i / s` from a uniform variate.
    pub fn leverage_index(&self, u: f64) -> usize {
        let total = *self.cdf.last().expect("non-empty catalog");
        self.cdf.partition_point(|&c| c <= u * total).min(self.cdf.len() - 1)
    }

    /// Log of the acceptance ratio for the proposal `sigma`, before clamping.
    pub fn log_acceptance(&self, sigma: &[usize]) -> Result<f64> {
        let t = sigma.len();
        let shifted = self.ltilde.select_rows(sigma).select_columns(sigma) + DMatrix::identity(t, t);
        let ld = if t == 0 { 0.0 } else { linalg::logdet_spd(&shifted)? };
        Ok(self.s + ld - t as f64 * self.s / self.q - self.log_det_shifted)
    }

    /// Acceptance probability clamped into `[0, 1]`.
    pub fn acceptance(&self, sigma: &[usize]) -> Result<f64> {
        Ok(self.log_acceptance(sigma)?.exp().clamp(0.0, 1.0))
    }

    pub(crate) fn draw_size<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let rate = self.proposal_rate();
        match Poisson::new(rate) {
            Ok(p) => p.sample(rng) as usize,
            Err(_) => 0,
        }
    }
}

/// State calibrated so the proposal target equals the catalog size.
pub fn prepare_vfx(factor: &KernelFactor) -> Result<VfxState> {
    VfxState::new(factor, Rescale::CatalogSize)
}

/// Bisection over `log beta` on the eigenvalues of `V^T V`.
///
/// `s(beta) = sum beta lambda / (1 + beta lambda)` is increasing and so is the target,
/// so the root is unique when it lies in the bracket.
pub fn calibrate_beta(factor: &KernelFactor) -> Result<f64> {
    let m = factor.m() as f64;
    let gram = factor.v().transpose() * factor.v();
    let eig: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&e| e.max(0.0))
        .collect();
    let target = |log_beta: f64| {
        let b = log_beta.exp();
        let s: f64 = eig.iter().map(|&e| b * e / (1.0 + b * e)).sum();
        poisson_target(s)
    };
    let (mut lo, mut hi) = (BETA_BRACKET.0.ln(), BETA_BRACKET.1.ln());
    let (f_lo, f_hi) = (target(lo), target(hi));
    if !(f_lo <= m && m <= f_hi) {
        return Err(Error::DegenerateKernel(format!(
            "no kernel rescale in [{:e}, {:e}] reaches proposal target {m}; achievable range [{f_lo:.4e}, {f_hi:.4e}]",
            BETA_BRACKET.0, BETA_BRACKET.1
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = target(mid);
        if ((f - m) / m).abs() <= 1e-13 {
            return Ok(mid.exp());
        }
        if f < m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// One exact draw from `DPP(beta * L)` where `beta` is the state's rescale.
pub fn sample_vfx_exact<R: Rng + ?Sized>(
    factor: &KernelFactor,
    state: &VfxState,
    rng: &mut R,
) -> Result<Subset> {
    if factor.m() != state.m() {
        return Err(Error::DimensionMismatch(format!(
            "state prepared for {} items, factor has {}",
            state.m(),
            factor.m()
        )));
    }
    let mut accept_sum = 0.0;
    for _ in 0..state.max_rejections {
        let t = state.draw_size(rng);
        let sigma: Vec<usize> = (0..t).map(|_| state.leverage_index(rng.random())).collect();
        let a = state.acceptance(&sigma)?;
        accept_sum += a;
        if rng.random::<f64>() < a {
            if t == 0 {
                return Ok(Subset::empty());
            }
            let sub = state.ltilde.select_rows(&sigma).select_columns(&sigma);
            let q = linalg::marginal_from_kernel(&sub)?;
            let picked = sample_from_marginal(&q, rng)?;
            return Ok(picked.into_iter().map(|i| sigma[i]).collect());
        }
    }
    Err(Error::ResamplingExhausted {
        attempts: state.max_rejections,
        acceptance_rate: accept_sum / state.max_rejections as f64,
    })
}
