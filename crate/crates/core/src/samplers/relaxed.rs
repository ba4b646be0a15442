//! Differentiable relaxations of the Cholesky and DPP-VFX samplers.
//!
//! Hard outcomes drive control flow and kernel updates; soft values live on the
//! tape and carry gradients back to the factor. Re-seeding the rng replays the
//! same noise, so a relaxed draw is a deterministic function of `(V, seed)`.

use nalgebra::DMatrix;
use rand::Rng;

use super::cholesky::checked_marginal;
use super::sst::{
    default_upperbound, plan_categorical, plan_multinomial, plan_poisson, sst_bernoulli_with_noise, BernoulliNoise,
    BernoulliRule,
};
use super::vfx::LEVERAGE_FLOOR;
use crate::diffmath::{gumbel_softmax, linalg, Tape, TapeMatrix, TapeValue};
use crate::dpp::{marginal_kernel_on_tape, Subset};
use crate::error::{Error, Result};

/// Conditional marginals this close to 0 or 1 are treated as certain outcomes.
pub const CERTAINTY: f64 = 1e-9;

/// Temperatures of the four relaxed steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures {
    pub cholesky: f64,
    pub poisson: f64,
    pub multinomial: f64,
    pub bernoulli: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            cholesky: 0.1,
            poisson: 0.1,
            multinomial: 1.0,
            bernoulli: 1e-8,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for t in [self.cholesky, self.poisson, self.multinomial, self.bernoulli] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::InvalidTemperature(t));
            }
        }
        Ok(())
    }
}

/// How the downsampled set is drawn from the leverage distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Proposal {
    /// The first `t` distinct classes among repeated draws.
    #[default]
    Unique,
    /// `t` independent draws, repeats allowed; with [`BernoulliRule::Threshold`]
    /// the hard pattern is then an exact DPP sample.
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelaxedConfig {
    pub temps: Temperatures,
    pub rule: BernoulliRule,
    pub proposal: Proposal,
    pub max_rejections: usize,
}

impl Default for RelaxedConfig {
    fn default() -> Self {
        Self {
            temps: Temperatures::default(),
            rule: BernoulliRule::default(),
            proposal: Proposal::default(),
            max_rejections: super::vfx::DEFAULT_MAX_REJECTIONS,
        }
    }
}

/// A relaxed draw: `y` in `[0, 1]^M` on the tape and the hard subset behind it.
#[derive(Clone, Debug)]
pub struct RelaxedSample {
    pub y: TapeMatrix,
    pub hard: Subset,
    /// Items of the accepted downsampled set in draw order (VFX only).
    pub sigma: Vec<usize>,
}

/// Relaxed sequential sampler over a marginal kernel `k` already on the tape.
///
/// Returns the `n x 1` column of soft inclusions and the hard bits.
pub fn relaxed_cholesky_from_marginal<R: Rng + ?Sized>(
    tape: &mut Tape,
    k: TapeMatrix,
    temps: &Temperatures,
    rule: BernoulliRule,
    rng: &mut R,
) -> Result<(TapeMatrix, Vec<bool>)> {
    let n = k.rows();
    if n == 0 || k.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "relaxed Cholesky on a {}x{} kernel",
            n,
            k.cols()
        )));
    }
    let mut cur = k;
    let mut ys = Vec::with_capacity(n);
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        let pivot = tape.entry(cur, 0, 0)?;
        let p = checked_marginal(i, tape.scalar(pivot))?;
        let clamped = tape.clamp(pivot, LEVERAGE_FLOOR, 1.0)?;
        let noise = BernoulliNoise::sample(rule, rng);
        let item = sst_bernoulli_with_noise(tape, clamped, temps.bernoulli, &noise)?;
        // a contradicted certain outcome would make the next pivot vanish
        let bit = if p >= 1.0 - CERTAINTY {
            true
        } else if p <= CERTAINTY {
            false
        } else {
            item.hard
        };
        let y = if bit {
            let z = tape.scale(item.soft, 1.0 / temps.cholesky)?;
            tape.sigmoid(z)?
        } else {
            tape.constant_scalar(0.0)?
        };
        ys.push(y);
        bits.push(bit);
        if i + 1 < n {
            cur = tape.schur_step(cur, bit)?;
        }
    }
    Ok((tape.vcat(&ys)?, bits))
}

/// Relaxed Cholesky draw from `DPP(V V^T)`.
pub fn sample_cholesky_relaxed<R: Rng + ?Sized>(
    tape: &mut Tape,
    v: TapeMatrix,
    temps: &Temperatures,
    rule: BernoulliRule,
    rng: &mut R,
) -> Result<RelaxedSample> {
    temps.validate()?;
    let l = crate::dpp::kernel_on_tape(tape, v)?;
    let k = marginal_kernel_on_tape(tape, l)?;
    let (y, bits) = relaxed_cholesky_from_marginal(tape, k, temps, rule, rng)?;
    let hard = bits
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    Ok(RelaxedSample {
        y,
        hard,
        sigma: Vec::new(),
    })
}

/// Tape-resident quantities shared by every relaxed VFX draw from one factor.
///
/// Only the leading `M x K` work is done here; per-draw kernels are built from
/// the gathered rows of the scaled factor.
#[derive(Clone, Debug)]
pub struct RelaxedVfx {
    /// `sqrt(beta) V`.
    pub vs: TapeMatrix,
    /// Floored leverage scores, `M x 1`.
    pub l: TapeMatrix,
    pub s: TapeValue,
    pub q: TapeValue,
    /// `log(l_i / s)`, `M x 1`.
    pub logits: TapeMatrix,
    /// Proposal rate `q exp(s / q)`.
    pub lambda: TapeValue,
    pub log_det_shifted: f64,
    pub beta: f64,
    m: usize,
    k: usize,
}

impl RelaxedVfx {
    pub fn new(tape: &mut Tape, v: TapeMatrix, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("kernel rescale {beta} must be positive")));
        }
        let (m, k) = v.shape();
        let vs = tape.scale(v, beta.sqrt())?;
        let vst = tape.transpose(vs)?;
        let gram = tape.matmul(vst, vs)?;
        let eye = tape.identity(k)?;
        let shifted = tape.add(gram, eye)?;
        let log_det_shifted = linalg::logdet_spd(tape.value(shifted))?;
        let inv = tape.inverse_psd(shifted)?;
        // diag(Vs G^{-1} Vs^T) as row sums of (Vs G^{-1}) .* Vs
        let a = tape.matmul(vs, inv)?;
        let prod = tape.mul(a, vs)?;
        let ones_k = tape.constant(DMatrix::from_element(k, 1, 1.0))?;
        let raw = tape.matmul(prod, ones_k)?;
        let l = tape.clamp(raw, LEVERAGE_FLOOR, f64::INFINITY)?;
        let s = tape.sum(l)?;
        let q = if tape.scalar(s) > 1.0 { tape.mul(s, s)? } else { s };
        let ln_l = tape.ln(l)?;
        let ln_s = tape.ln(s)?;
        let ones_m = tape.constant(DMatrix::from_element(m, 1, 1.0))?;
        let shift = tape.scale_by(ones_m, ln_s)?;
        let logits = tape.sub(ln_l, shift)?;
        let ratio = tape.div(s, q)?;
        let e = tape.exp(ratio)?;
        let lambda = tape.mul(q, e)?;
        Ok(Self {
            vs,
            l,
            s,
            q,
            logits,
            lambda,
            log_det_shifted,
            beta,
            m,
            k,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Plain acceptance probability of the proposal `sigma`, clamped to `[0, 1]`.
    pub fn acceptance(&self, tape: &Tape, sigma: &[usize]) -> Result<f64> {
        let s = tape.scalar(self.s);
        let q = tape.scalar(self.q);
        let t = sigma.len();
        let ld = if t == 0 {
            0.0
        } else {
            let vs = tape.value(self.vs).select_rows(sigma);
            let l = tape.value(self.l);
            let ratio = s / q;
            let lt = DMatrix::from_fn(t, t, |i, j| {
                let dot = vs.row(i).dot(&vs.row(j));
                ratio * dot / (l[(sigma[i], 0)] * l[(sigma[j], 0)]).sqrt()
            });
            linalg::logdet_spd(&(lt + DMatrix::identity(t, t)))?
        };
        let log_a = s + ld - t as f64 * s / q - self.log_det_shifted;
        Ok(log_a.exp().clamp(0.0, 1.0))
    }

    /// `(s / q) L_ij / sqrt(l_i l_j)` restricted to `sigma`, on the tape.
    fn induced_kernel(&self, tape: &mut Tape, sigma: &[usize]) -> Result<TapeMatrix> {
        let cols: Vec<usize> = (0..self.k).collect();
        let rows = tape.gather(self.vs, sigma, &cols)?;
        let rows_t = tape.transpose(rows)?;
        let lsig = tape.matmul(rows, rows_t)?;
        let lev = tape.gather(self.l, sigma, &[0])?;
        let root = tape.sqrt(lev)?;
        let ones = tape.constant(DMatrix::from_element(sigma.len(), 1, 1.0))?;
        let r = tape.div(ones, root)?;
        let r_t = tape.transpose(r)?;
        let rr = tape.matmul(r, r_t)?;
        let scaled = tape.mul(rr, lsig)?;
        let ratio = tape.div(self.s, self.q)?;
        tape.scale_by(scaled, ratio)
    }

    /// Hard downsampled set of one proposal, or `None` when it cannot be formed.
    fn propose<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        proposal: Proposal,
        rng: &mut R,
    ) -> Result<Option<Vec<(usize, crate::diffmath::GumbelNoise)>>> {
        let (t, _) = plan_poisson(tape.scalar(self.lambda), rng)?;
        if t == 0 {
            return Ok(Some(Vec::new()));
        }
        let logits: Vec<f64> = tape.value(self.logits).iter().copied().collect();
        if proposal == Proposal::Iid {
            return Ok(Some(plan_categorical(&logits, t, rng)));
        }
        if t > self.m {
            return Ok(None);
        }
        let ub = default_upperbound(t);
        match plan_multinomial(&logits, t, ub, rng) {
            Ok(p) => Ok(Some(p)),
            Err(Error::InsufficientUnique { .. }) => match plan_multinomial(&logits, t, 4 * ub, rng) {
                Ok(p) => Ok(Some(p)),
                Err(Error::InsufficientUnique { .. }) => Ok(None),
                Err(e) => Err(e),
            },
            Err(e) => Err(e),
        }
    }

    /// One relaxed DPP-VFX draw.
    ///
    /// The soft output scatters the inner relaxed inclusions through the relaxed
    /// one-hot columns of the accepted proposal: `y = clamp(R y_inner, 0, 1)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        cfg: &RelaxedConfig,
        rng: &mut R,
    ) -> Result<RelaxedSample> {
        cfg.temps.validate()?;
        let mut accept_sum = 0.0;
        for _ in 0..cfg.max_rejections {
            let Some(plan) = self.propose(tape, cfg.proposal, rng)? else {
                continue;
            };
            let sigma: Vec<usize> = plan.iter().map(|p| p.0).collect();
            let a = self.acceptance(tape, &sigma)?;
            accept_sum += a;
            let noise = BernoulliNoise::sample(cfg.rule, rng);
            if !noise.decide(a.max(f64::MIN_POSITIVE)) {
                continue;
            }
            if sigma.is_empty() {
                let y = tape.constant(DMatrix::zeros(self.m, 1))?;
                return Ok(RelaxedSample {
                    y,
                    hard: Subset::empty(),
                    sigma,
                });
            }
            let mut cols = Vec::with_capacity(plan.len());
            for (_, g) in &plan {
                cols.push(gumbel_softmax(tape, self.logits, cfg.temps.multinomial, g)?);
            }
            let r = tape.hcat(&cols)?;
            let lt = self.induced_kernel(tape, &sigma)?;
            let k = marginal_kernel_on_tape(tape, lt)?;
            let (inner, bits) = relaxed_cholesky_from_marginal(tape, k, &cfg.temps, cfg.rule, rng)?;
            let spread = tape.matmul(r, inner)?;
            let y = tape.clamp(spread, 0.0, 1.0)?;
            let hard = sigma
                .iter()
                .zip(&bits)
                .filter_map(|(&i, &b)| b.then_some(i))
                .collect();
            return Ok(RelaxedSample { y, hard, sigma });
        }
        Err(Error::ResamplingExhausted {
            attempts: cfg.max_rejections,
            acceptance_rate: accept_sum / cfg.max_rejections as f64,
        })
    }
}

/// Relaxed DPP-VFX draw from `DPP(beta V V^T)`, building the shared prefix on the fly.
pub fn sample_vfx_relaxed<R: Rng + ?Sized>(
    tape: &mut Tape,
    v: TapeMatrix,
    beta: f64,
    cfg: &RelaxedConfig,
    rng: &mut R,
) -> Result<RelaxedSample> {
    RelaxedVfx::new(tape, v, beta)?.sample(tape, cfg, rng)
}
