//! Adam, annealing schedules, and the Wasserstein and maximum-likelihood training loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::Tape;
use crate::dpp::{mle_loss, KernelFactor, Subset};
use crate::error::{Error, Result};
use crate::samplers::{BernoulliRule, Proposal, RelaxedConfig, RelaxedVfx, Temperatures};
use crate::transport::{cost_matrix, emd_uniform, wasserstein_loss, TransportPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Wasserstein,
    Mle,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wasserstein" => Ok(Self::Wasserstein),
            "mle" => Ok(Self::Mle),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Wasserstein => "wasserstein",
            Self::Mle => "mle",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub rank: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub max_iter: usize,
    pub learning_rate: f64,
    pub temps: Temperatures,
    pub lr_decay: f64,
    pub alpha_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub max_rejections: usize,
    pub bernoulli_rule: BernoulliRule,
    pub proposal: Proposal,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Wasserstein,
            rank: 30,
            alpha: 0.01,
            batch_size: 400,
            max_iter: 2000,
            learning_rate: 0.01,
            temps: Temperatures::default(),
            lr_decay: 0.95,
            alpha_decay: 0.95,
            decay_every: 100,
            seed: 0,
            max_rejections: crate::samplers::vfx::DEFAULT_MAX_REJECTIONS,
            bernoulli_rule: BernoulliRule::GumbelPair,
            proposal: Proposal::Unique,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn relaxed(&self) -> RelaxedConfig {
        RelaxedConfig {
            temps: self.temps,
            rule: self.bernoulli_rule,
            proposal: self.proposal,
            max_rejections: self.max_rejections,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.rank == 0 {
            return bad("rank must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return bad("decay factors must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if self.max_rejections == 0 {
            return bad("max_rejections must be positive");
        }
        if self.method == Method::Wasserstein {
            self.temps
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Flat `key=value` text, one entry per line.
    pub fn to_kv_string(&self) -> String {
        let rule = match self.bernoulli_rule {
            BernoulliRule::GumbelPair => "gumbel_pair",
            BernoulliRule::Threshold => "threshold",
        };
        let proposal = match self.proposal {
            Proposal::Unique => "unique",
            Proposal::Iid => "iid",
        };
        let mut s = String::new();
        let _ = writeln!(s, "method={}", self.method);
        let _ = writeln!(s, "rank={}", self.rank);
        let _ = writeln!(s, "alpha={:?}", self.alpha);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "max_iter={}", self.max_iter);
        let _ = writeln!(s, "learning_rate={:?}", self.learning_rate);
        let _ = writeln!(s, "tau_c={:?}", self.temps.cholesky);
        let _ = writeln!(s, "tau_p={:?}", self.temps.poisson);
        let _ = writeln!(s, "tau_m={:?}", self.temps.multinomial);
        let _ = writeln!(s, "tau_b={:?}", self.temps.bernoulli);
        let _ = writeln!(s, "lr_decay={:?}", self.lr_decay);
        let _ = writeln!(s, "alpha_decay={:?}", self.alpha_decay);
        let _ = writeln!(s, "decay_every={}", self.decay_every);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "max_rejections={}", self.max_rejections);
        let _ = writeln!(s, "bernoulli_rule={rule}");
        let _ = writeln!(s, "proposal={proposal}");
        s
    }

    /// Applies `key=value` lines over `self`. Blank lines and `#` comments are skipped.
    pub fn merge_kv(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "method" => self.method = v.parse()?,
            "rank" => self.rank = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "tau_c" => self.temps.cholesky = parse(key, v)?,
            "tau_p" => self.temps.poisson = parse(key, v)?,
            "tau_m" => self.temps.multinomial = parse(key, v)?,
            "tau_b" => self.temps.bernoulli = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "alpha_decay" => self.alpha_decay = parse(key, v)?,
            "decay_every" => self.decay_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_rejections" => self.max_rejections = parse(key, v)?,
            "bernoulli_rule" => {
                self.bernoulli_rule = match v {
                    "gumbel_pair" => BernoulliRule::GumbelPair,
                    "threshold" => BernoulliRule::Threshold,
                    _ => return Err(Error::Config(format!("unknown bernoulli_rule {v:?}"))),
                }
            }
            "proposal" => {
                self.proposal = match v {
                    "unique" => Proposal::Unique,
                    "iid" => Proposal::Iid,
                    _ => return Err(Error::Config(format!("unknown proposal {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let cfg = Self::default().merge_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv_string())?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: usize,
}

impl Adam {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }

    /// Updates `params` in place; returns false when the step was skipped.
    pub fn update(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64) -> Result<bool> {
        if params.shape() != grad.shape() || grad.shape() != self.m.shape() {
            return Err(Error::DimensionMismatch(format!(
                "Adam state {:?}, params {:?}, gradient {:?}",
                self.m.shape(),
                params.shape(),
                grad.shape()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            warn!("skipping optimizer step with a non-finite gradient");
            return Ok(false);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.m.zip_apply(grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        self.v.zip_apply(grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(self.m.iter()).zip(self.v.iter()) {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(true)
    }
}

/// Learning rate and regularization weight at `step`: `value * factor^floor(step / every)`.
pub fn anneal(cfg: &TrainConfig, step: usize) -> (f64, f64) {
    let k = (step / cfg.decay_every.max(1)) as i32;
    (
        cfg.learning_rate * cfg.lr_decay.powi(k),
        cfg.alpha * cfg.alpha_decay.powi(k),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub factor: KernelFactor,
    pub trace: Vec<TracePoint>,
    pub skipped_steps: usize,
}

pub fn trace_to_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("step,loss,lr,alpha\n");
    for p in trace {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", p.step, p.loss, p.lr, p.alpha);
    }
    s
}

pub fn write_trace(path: &Path, trace: &[TracePoint]) -> Result<()> {
    fs::write(path, trace_to_csv(trace))?;
    Ok(())
}

/// Minibatches drawn without replacement within each pass over the data.
struct Batcher {
    order: Vec<usize>,
    at: usize,
}

impl Batcher {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, at: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.order.shuffle(rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

/// Value and gradient of the minibatch Wasserstein objective at `v`.
#[derive(Clone, Debug)]
pub struct WassersteinEval {
    /// Transport term plus `alpha ||V||_F^2`.
    pub loss: f64,
    pub transport: f64,
    pub grad: DMatrix<f64>,
    pub plan: TransportPlan,
}

/// Relaxed samples from one per-sample seed each, cost matrix against `batch`,
/// optimal plan on the detached costs (or `plan` when given), then backpropagation.
pub fn wasserstein_objective(
    v: &DMatrix<f64>,
    batch: &[Subset],
    seeds: &[u64],
    cfg: &RelaxedConfig,
    alpha: f64,
    plan: Option<&TransportPlan>,
) -> Result<WassersteinEval> {
    if seeds.len() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} seeds for a batch of {}",
            seeds.len(),
            batch.len()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.param(v.clone())?;
    let prefix = RelaxedVfx::new(&mut tape, p, 1.0)?;
    let mut samples = Vec::with_capacity(batch.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples.push(prefix.sample(&mut tape, cfg, &mut rng)?);
    }
    let c = cost_matrix(&mut tape, batch, &samples)?;
    let plan = match plan {
        Some(p) => p.clone(),
        None => emd_uniform(tape.value(c))?,
    };
    let w = wasserstein_loss(&mut tape, c, &plan)?;
    let sq = tape.sum_squares(p)?;
    let reg = tape.scale(sq, alpha)?;
    let total = tape.add(w, reg)?;
    let grad = tape.backward(total)?.wrt(p);
    Ok(WassersteinEval {
        loss: tape.scalar(total),
        transport: tape.scalar(w),
        grad,
        plan,
    })
}

/// Wasserstein training from a given initialization.
pub fn train_wasserstein_from(init: KernelFactor, data: &[Subset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.max_iter > 0 {
        return Err(Error::Config("no training baskets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut v = init.into_inner();
    let mut adam = Adam::new(v.nrows(), v.ncols());
    let mut batcher = Batcher::new(data.len(), &mut rng);
    let relaxed = cfg.relaxed();
    let mut trace = Vec::with_capacity(cfg.max_iter);
    for step in 0..cfg.max_iter {
        let (lr, alpha) = anneal(cfg, step);
        let batch: Vec<Subset> = batcher
            .next(cfg.batch_size, &mut rng)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let mut attempt = 0;
        let eval = loop {
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
            match wasserstein_objective(&v, &batch, &seeds, &relaxed, alpha, None) {
                Ok(e) => break e,
                Err(Error::ResamplingExhausted { .. }) if attempt == 0 => {
                    warn!("step {step}: sampler exhausted its rejection budget; retrying");
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        adam.update(&mut v, &eval.grad, lr)?;
        if step % 100 == 0 {
            info!("step {step}: loss {:.5} (transport {:.5})", eval.loss, eval.transport);
        }
        debug!("step {step}: loss {}", eval.loss);
        trace.push(TracePoint {
            step,
            loss: eval.loss,
            lr,
            alpha,
        });
    }
    Ok(TrainOutcome {
        factor: KernelFactor::new(v)?,
        trace,
        skipped_steps: adam.skipped,
    })
}

/// Minibatch maximum-likelihood training from a given initialization.
pub fn train_mle_from(init: KernelFactor, data: &[Subset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.max_iter > 0 {
        return Err(Error::Config("no training baskets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut v = init.into_inner();
    let mut adam = Adam::new(v.nrows(), v.ncols());
    let mut batcher = Batcher::new(data.len(), &mut rng);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let size = cfg.batch_size.min(data.len().max(1));
    for step in 0..cfg.max_iter {
        let (lr, alpha) = anneal(cfg, step);
        let batch: Vec<Subset> = batcher
            .next(size, &mut rng)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let mut tape = Tape::new();
        let p = tape.param(v.clone())?;
        let loss = mle_loss(&mut tape, p, &batch, alpha)?;
        let grad = tape.backward(loss)?.wrt(p);
        adam.update(&mut v, &grad, lr)?;
        if step % 100 == 0 {
            info!("step {step}: loss {:.5}", tape.scalar(loss));
        }
        trace.push(TracePoint {
            step,
            loss: tape.scalar(loss),
            lr,
            alpha,
        });
    }
    Ok(TrainOutcome {
        factor: KernelFactor::new(v)?,
        trace,
        skipped_steps: adam.skipped,
    })
}

/// Initial factor for a run: uniform entries on `[0, sqrt(1/K)]`, seeded by the config.
pub fn initial_factor(m: usize, cfg: &TrainConfig) -> Result<KernelFactor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    KernelFactor::random_init(m, cfg.rank.min(m), &mut rng)
}

/// Trains on `baskets` over `m` items with the method named in `cfg`.
pub fn train(m: usize, baskets: &[Subset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = initial_factor(m, cfg)?;
    match cfg.method {
        Method::Wasserstein => train_wasserstein_from(init, baskets, cfg),
        Method::Mle => train_mle_from(init, baskets, cfg),
    }
}
