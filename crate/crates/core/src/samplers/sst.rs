//! Straight-through relaxations of Poisson, multinomial and Bernoulli draws.
//!
//! Each sampler first fixes its hard outcome from plain arithmetic (the Gumbel-max
//! index), then materializes the soft value on the tape. The hard outcome depends
//! only on the noise and the current forward values, never on the temperature.

use nalgebra::DMatrix;
use rand::Rng;

use crate::diffmath::gumbel::UNIFORM_EPS;
use crate::diffmath::{gumbel_softmax, GumbelNoise, Tape, TapeMatrix, TapeValue};
use crate::error::{Error, Result};

/// A relaxed scalar together with its hard outcome.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedScalar<H> {
    pub soft: TapeValue,
    pub hard: H,
}

/// A relaxed one-hot column together with its hard class.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedOneHot {
    pub soft: TapeMatrix,
    pub hard: usize,
}

/// How the two-class Bernoulli relaxation forms its decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BernoulliRule {
    /// Gumbel-max over `[log value, log u]`: the accept probability is `E_u[value / (value + u)]`.
    #[default]
    GumbelPair,
    /// No Gumbel noise: accept iff `u <= value`, an exact Bernoulli(value).
    Threshold,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    Ok(())
}

fn ln_factorial(i: usize) -> f64 {
    (2..=i).map(|k| (k as f64).ln()).sum()
}

/// Size of the truncated Poisson support minus one: `ceil(2 lambda)`.
pub fn poisson_support_max(lambda: f64) -> usize {
    (2.0 * lambda).ceil().max(0.0) as usize
}

/// Poisson log-pmf over `0..=ceil(2 lambda)`, renormalized over that support.
pub fn truncated_poisson_log_probs(lambda: f64) -> Vec<f64> {
    let n = poisson_support_max(lambda);
    let raw: Vec<f64> = (0..=n)
        .map(|i| -lambda + i as f64 * lambda.ln() - ln_factorial(i))
        .collect();
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + raw.iter().map(|r| (r - mx).exp()).sum::<f64>().ln();
    raw.into_iter().map(|r| r - lse).collect()
}

/// Hard outcome of [`sst_poisson`] with the noise that produced it.
pub fn plan_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<(usize, GumbelNoise)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("Poisson rate {lambda} must be positive")));
    }
    let logp = truncated_poisson_log_probs(lambda);
    let noise = GumbelNoise::sample(logp.len(), rng);
    Ok((noise.argmax(&logp), noise))
}

/// Relaxed Poisson count: `sum_i i * y_i` with `y` the Gumbel-Softmax over the truncated support.
///
/// `lambda` must be a `1 x 1` tape value; the count is differentiable in it.
pub fn sst_poisson_with_noise(
    tape: &mut Tape,
    lambda: TapeValue,
    tau: f64,
    noise: &GumbelNoise,
) -> Result<RelaxedScalar<usize>> {
    check_tau(tau)?;
    let lam = tape.scalar(lambda);
    if !(lam > 0.0) || !lam.is_finite() {
        return Err(Error::Domain(format!("Poisson rate {lam} must be positive")));
    }
    let n = poisson_support_max(lam);
    let logp = truncated_poisson_log_probs(lam);
    let hard = noise.argmax(&logp);
    // i ln(lambda) - lambda - ln(i!); the normalizer cancels inside the softmax
    let idx = tape.constant(DMatrix::from_fn(n + 1, 1, |i, _| i as f64))?;
    let ln_lam = tape.ln(lambda)?;
    let a = tape.scale_by(idx, ln_lam)?;
    let ones = tape.constant(DMatrix::from_element(n + 1, 1, 1.0))?;
    let b = tape.scale_by(ones, lambda)?;
    let c = tape.constant(DMatrix::from_fn(n + 1, 1, |i, _| ln_factorial(i)))?;
    let ab = tape.sub(a, b)?;
    let logits = tape.sub(ab, c)?;
    let y = gumbel_softmax(tape, logits, tau, noise)?;
    let idx_row = tape.constant(DMatrix::from_fn(1, n + 1, |_, i| i as f64))?;
    let soft = tape.matmul(idx_row, y)?;
    Ok(RelaxedScalar { soft, hard })
}

pub fn sst_poisson<R: Rng + ?Sized>(
    tape: &mut Tape,
    lambda: TapeValue,
    tau: f64,
    rng: &mut R,
) -> Result<RelaxedScalar<usize>> {
    let (_, noise) = plan_poisson(tape.scalar(lambda), rng)?;
    sst_poisson_with_noise(tape, lambda, tau, &noise)
}

/// Hard classes and noise of the first `nbsample` distinct Gumbel-max draws.
///
/// Draws stop as soon as `nbsample` distinct classes are seen, so the result is
/// the same as drawing all `upperbound` and keeping the first unique ones.
pub fn plan_multinomial<R: Rng + ?Sized>(
    log_probs: &[f64],
    nbsample: usize,
    upperbound: usize,
    rng: &mut R,
) -> Result<Vec<(usize, GumbelNoise)>> {
    if upperbound < nbsample {
        return Err(Error::Domain(format!(
            "upperbound {upperbound} below nbsample {nbsample}"
        )));
    }
    let k = log_probs.len();
    let mut seen = vec![false; k];
    let mut kept = Vec::with_capacity(nbsample);
    let mut draws = 0;
    while kept.len() < nbsample && draws < upperbound {
        let noise = GumbelNoise::sample(k, rng);
        let c = noise.argmax(log_probs);
        draws += 1;
        if !seen[c] {
            seen[c] = true;
            kept.push((c, noise));
        }
    }
    if kept.len() < nbsample {
        return Err(Error::InsufficientUnique {
            needed: nbsample,
            found: kept.len(),
            draws,
        });
    }
    Ok(kept)
}

/// `n` independent Gumbel-max draws, duplicates kept.
pub fn plan_categorical<R: Rng + ?Sized>(
    log_probs: &[f64],
    n: usize,
    rng: &mut R,
) -> Vec<(usize, GumbelNoise)> {
    (0..n)
        .map(|_| {
            let noise = GumbelNoise::sample(log_probs.len(), rng);
            (noise.argmax(log_probs), noise)
        })
        .collect()
}

/// Default draw budget for `nbsample` unique classes.
pub fn default_upperbound(nbsample: usize) -> usize {
    10 * nbsample + 50
}

/// `nbsample` distinct relaxed one-hot draws from the categorical `softmax(log_probs)`.
pub fn sst_multinomial<R: Rng + ?Sized>(
    tape: &mut Tape,
    log_probs: TapeMatrix,
    nbsample: usize,
    upperbound: usize,
    tau: f64,
    rng: &mut R,
) -> Result<Vec<RelaxedOneHot>> {
    check_tau(tau)?;
    let lp: Vec<f64> = tape.value(log_probs).iter().copied().collect();
    let plan = plan_multinomial(&lp, nbsample, upperbound, rng)?;
    plan.into_iter()
        .map(|(hard, noise)| {
            Ok(RelaxedOneHot {
                soft: gumbel_softmax(tape, log_probs, tau, &noise)?,
                hard,
            })
        })
        .collect()
}

/// Noise behind one relaxed Bernoulli decision.
#[derive(Clone, Debug)]
pub struct BernoulliNoise {
    pub u: f64,
    pub gumbel: GumbelNoise,
}

impl BernoulliNoise {
    pub fn sample<R: Rng + ?Sized>(rule: BernoulliRule, rng: &mut R) -> Self {
        let u = rng.random::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
        let gumbel = match rule {
            BernoulliRule::GumbelPair => GumbelNoise::sample(2, rng),
            BernoulliRule::Threshold => GumbelNoise::from_draws(vec![0.0, 0.0]),
        };
        Self { u, gumbel }
    }

    /// Whether component 0 of `[log value, log u] + g` wins.
    pub fn decide(&self, value: f64) -> bool {
        self.gumbel.argmax(&[value.ln(), self.u.ln()]) == 0
    }
}

fn check_value(v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("Bernoulli value {v} must be positive")));
    }
    Ok(())
}

/// Component 0 of the Gumbel-Softmax over `[log value, log u]`.
pub fn sst_bernoulli_with_noise(
    tape: &mut Tape,
    value: TapeValue,
    tau: f64,
    noise: &BernoulliNoise,
) -> Result<RelaxedScalar<bool>> {
    check_tau(tau)?;
    let v = tape.scalar(value);
    check_value(v)?;
    let hard = noise.decide(v);
    let lv = tape.ln(value)?;
    let lu = tape.constant_scalar(noise.u.ln())?;
    let logits = tape.vcat(&[lv, lu])?;
    let y = gumbel_softmax(tape, logits, tau, &noise.gumbel)?;
    let soft = tape.entry(y, 0, 0)?;
    Ok(RelaxedScalar { soft, hard })
}

pub fn sst_bernoulli<R: Rng + ?Sized>(
    tape: &mut Tape,
    value: TapeValue,
    tau: f64,
    rule: BernoulliRule,
    rng: &mut R,
) -> Result<RelaxedScalar<bool>> {
    check_value(tape.scalar(value))?;
    let noise = BernoulliNoise::sample(rule, rng);
    sst_bernoulli_with_noise(tape, value, tau, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_pmf_half() {
        let p: Vec<f64> = truncated_poisson_log_probs(0.5).iter().map(|l| l.exp()).collect();
        assert_eq!(p.len(), 2);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn poisson_one_hot_limit_is_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut t = Tape::new();
            let lam = t.constant_scalar(2.7).unwrap();
            let r = sst_poisson(&mut t, lam, 1e-8, &mut rng).unwrap();
            let v = t.scalar(r.soft);
            assert!(r.hard <= 6);
            assert!((v - r.hard as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn poisson_hard_mean() {
        let lambda: f64 = 4.0;
        let p: Vec<f64> = truncated_poisson_log_probs(lambda).iter().map(|l| l.exp()).collect();
        let mean: f64 = p.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let var: f64 = p.iter().enumerate().map(|(i, p)| (i as f64 - mean).powi(2) * p).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let total: usize = (0..n).map(|_| plan_poisson(lambda, &mut rng).unwrap().0).sum();
        let emp = total as f64 / n as f64;
        assert!((emp - mean).abs() < 3.0 * (var / n as f64).sqrt(), "{emp} vs {mean}");
    }

    #[test]
    fn poisson_rejects_nonpositive_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(plan_poisson(0.0, &mut rng).is_err());
        assert!(plan_poisson(-1.0, &mut rng).is_err());
    }

    #[test]
    fn multinomial_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let lp = t.constant(DMatrix::from_element(1, 1, 0.0)).unwrap();
        let out = sst_multinomial(&mut t, lp, 1, 5, 1.0, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].hard, 0);
        assert!((t.value(out[0].soft)[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn multinomial_coupon_collector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lp = [0.0; 4];
        let trials = 10_000;
        let mut ok = 0;
        for _ in 0..trials {
            if let Ok(v) = plan_multinomial(&lp, 4, 200, &mut rng) {
                let mut c: Vec<usize> = v.iter().map(|x| x.0).collect();
                c.sort_unstable();
                assert_eq!(c, vec![0, 1, 2, 3]);
                ok += 1;
            }
        }
        assert!(ok as f64 / trials as f64 >= 0.999);
    }

    #[test]
    fn multinomial_one_hot_limit_and_shortfall() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let lp = t.constant(DMatrix::from_column_slice(3, 1, &[0.1, -0.4, 0.7])).unwrap();
        let out = sst_multinomial(&mut t, lp, 3, 500, 1e-8, &mut rng).unwrap();
        for o in &out {
            let y = t.value(o.soft);
            for i in 0..3 {
                let want = if i == o.hard { 1.0 } else { 0.0 };
                assert!((y[(i, 0)] - want).abs() < 1e-12);
            }
        }
        let lp = t.constant(DMatrix::from_column_slice(3, 1, &[0.0, -60.0, -60.0])).unwrap();
        assert!(matches!(
            sst_multinomial(&mut t, lp, 3, 3, 1.0, &mut rng),
            Err(Error::InsufficientUnique { needed: 3, .. })
        ));
    }

    #[test]
    fn bernoulli_range_and_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        for v in [1e-9, 0.3, 1.0] {
            let x = t.constant_scalar(v).unwrap();
            for tau in [1e-8, 0.1, 1.0] {
                let r = sst_bernoulli(&mut t, x, tau, BernoulliRule::GumbelPair, &mut rng).unwrap();
                let s = t.scalar(r.soft);
                assert!((0.0..=1.0).contains(&s));
            }
        }
        let z = t.constant_scalar(0.0).unwrap();
        assert!(sst_bernoulli(&mut t, z, 1.0, BernoulliRule::GumbelPair, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_gumbel_pair_frequency() {
        // P(accept) = E_u[v / (v + u)] = v ln((1 + v) / v)
        let v: f64 = 0.3;
        let p = v * ((1.0 + v) / v).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| BernoulliNoise::sample(BernoulliRule::GumbelPair, &mut rng).decide(v))
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
    }

    #[test]
    fn bernoulli_threshold_frequency() {
        let v: f64 = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| BernoulliNoise::sample(BernoulliRule::Threshold, &mut rng).decide(v))
            .count();
        let f = hits as f64 / n as f64;
        assert!((f - v).abs() < 3.0 * (v * (1.0 - v) / n as f64).sqrt());
    }

    #[test]
    fn bernoulli_value_one_returns_component_zero() {
        let mut t = Tape::new();
        let x = t.constant_scalar(1.0).unwrap();
        let noise = BernoulliNoise {
            u: 0.4,
            gumbel: GumbelNoise::from_draws(vec![0.2, -0.1]),
        };
        let r = sst_bernoulli_with_noise(&mut t, x, 1e-8, &noise).unwrap();
        // logits [0, ln 0.4] + g = [0.2, -1.016]: component 0 wins
        assert!(r.hard);
        assert!((t.scalar(r.soft) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_soft_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, noise) = plan_poisson(1.3, &mut rng).unwrap();
        let eval = |lam: f64| {
            let mut t = Tape::new();
            let l = t.param(DMatrix::from_element(1, 1, lam)).unwrap();
            let r = sst_poisson_with_noise(&mut t, l, 1.0, &noise).unwrap();
            let g = t.backward(r.soft).unwrap().wrt(l)[(0, 0)];
            (t.scalar(r.soft), g)
        };
        let (_, g) = eval(1.3);
        let h = 1e-6;
        let fd = (eval(1.3 + h).0 - eval(1.3 - h).0) / (2.0 * h);
        assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{g} vs {fd}");
    }
}
