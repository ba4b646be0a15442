//! Wasserstein distance with bootstrap intervals, test likelihood, precision curves,
//! marginals, frequent subsets and kernel heatmaps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpp::{KernelFactor, Subset, DEGENERATE_DET};
use crate::error::{Error, Result};
use crate::samplers::CholeskySampler;
use crate::transport::{emd_subsets, jaccard_distance};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WdEstimate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rounds: Vec<f64>,
    /// Set when the test set was smaller than the batch and had to be resampled.
    pub with_replacement: bool,
}

/// Mean of `values` with a 95% percentile bootstrap interval.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> (f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (mean, at(0.025).min(mean), at(0.975).max(mean))
}

/// Draws `n` exact samples from `DPP(V V^T)`.
pub fn sample_model<R: Rng + ?Sized>(factor: &KernelFactor, n: usize, rng: &mut R) -> Result<Vec<Subset>> {
    let sampler = CholeskySampler::new(factor)?;
    (0..n).map(|_| sampler.sample(rng)).collect()
}

/// EMD between model batches and test batches, averaged over rounds.
pub fn eval_wd(factor: &KernelFactor, test: &[Subset], n_rounds: usize, batch: usize, seed: u64) -> Result<WdEstimate> {
    let samples_per_round = |rng: &mut ChaCha8Rng| sample_model(factor, batch, rng);
    eval_wd_with(samples_per_round, test, n_rounds, batch, seed)
}

/// [`eval_wd`] over an arbitrary batch generator.
pub fn eval_wd_with<F>(mut generate: F, test: &[Subset], n_rounds: usize, batch: usize, seed: u64) -> Result<WdEstimate>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Vec<Subset>>,
{
    if test.is_empty() || n_rounds == 0 || batch == 0 {
        return Err(Error::Domain("WD needs test data, rounds and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_replacement = batch > test.len();
    let mut rounds = Vec::with_capacity(n_rounds);
    for _ in 0..n_rounds {
        let model = generate(&mut rng)?;
        let data: Vec<Subset> = if with_replacement {
            (0..batch).map(|_| test.choose(&mut rng).expect("non-empty").clone()).collect()
        } else {
            test.choose_multiple(&mut rng, batch).cloned().collect()
        };
        rounds.push(emd_subsets(&data, &model)?.cost);
    }
    let (mean, ci_low, ci_high) = bootstrap_ci(&rounds, BOOTSTRAP_RESAMPLES, &mut rng);
    Ok(WdEstimate {
        mean,
        ci_low,
        ci_high,
        rounds,
        with_replacement,
    })
}

/// Batches of subsets whose sizes follow the data but whose items are uniform.
pub fn size_matched_uniform<R: Rng + ?Sized>(m: usize, sizes: &[usize], n: usize, rng: &mut R) -> Vec<Subset> {
    let items: Vec<usize> = (0..m).collect();
    (0..n)
        .map(|_| {
            let k = *sizes.choose(rng).expect("non-empty sizes");
            items.choose_multiple(rng, k.min(m)).copied().collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestLl {
    pub mean: f64,
    /// Test subsets whose minor fell below the degeneracy floor.
    pub degenerate: usize,
}

/// Mean log-probability of the test subsets, flooring singular minors.
pub fn eval_test_ll(factor: &KernelFactor, test: &[Subset]) -> Result<TestLl> {
    if test.is_empty() {
        return Err(Error::Domain("empty test set".into()));
    }
    let log_z = factor.log_normalizer();
    let floor = DEGENERATE_DET.ln();
    let mut degenerate = 0;
    let total: f64 = test
        .iter()
        .map(|s| {
            let ld = factor.log_det_minor(s);
            if ld > floor {
                ld
            } else {
                degenerate += 1;
                floor
            }
        })
        .sum();
    Ok(TestLl {
        mean: total / test.len() as f64 - log_z,
        degenerate,
    })
}

/// `k` evenly spaced points on `(0, 1]`, ending at 1.
pub fn default_eps_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|i| i as f64 / k as f64).collect()
}

/// Fraction of `generated` within Jaccard distance `eps` of some test subset.
pub fn precision_curve(generated: &[Subset], test: &[Subset], eps_grid: &[f64]) -> Vec<(f64, f64)> {
    let nearest: Vec<f64> = generated
        .iter()
        .map(|g| {
            test.iter()
                .map(|t| jaccard_distance(g, t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    eps_grid
        .iter()
        .map(|&eps| {
            let hits = nearest.iter().filter(|&&d| d <= eps).count();
            let frac = if generated.is_empty() { 0.0 } else { hits as f64 / generated.len() as f64 };
            (eps, frac)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalPair {
    pub item: usize,
    pub empirical: f64,
    pub model: f64,
}

/// Item frequencies in `test` against the model inclusion probabilities.
pub fn marginal_report(factor: &KernelFactor, test: &[Subset]) -> Result<Vec<MarginalPair>> {
    let model = factor.marginal_kernel()?.inclusion_probs();
    let mut counts = vec![0usize; factor.m()];
    for s in test {
        for &i in s.indices() {
            if i >= counts.len() {
                return Err(Error::ItemOutOfRange { id: i, m: factor.m() });
            }
            counts[i] += 1;
        }
    }
    let n = test.len().max(1) as f64;
    Ok(model
        .into_iter()
        .enumerate()
        .map(|(item, p)| MarginalPair {
            item,
            empirical: counts[item] as f64 / n,
            model: p,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopSubset {
    pub items: Vec<usize>,
    pub count: usize,
}

/// The `k` most frequent subsets of size at least 2; ties go to the smaller item list.
pub fn top_subsets(collection: &[Subset], k: usize) -> Vec<TopSubset> {
    let mut counts: HashMap<&Subset, usize> = HashMap::new();
    for s in collection.iter().filter(|s| s.len() >= 2) {
        *counts.entry(s).or_default() += 1;
    }
    let mut ranked: Vec<(&Subset, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.indices().cmp(b.0.indices())));
    ranked
        .into_iter()
        .take(k)
        .map(|(s, count)| TopSubset {
            items: s.indices().to_vec(),
            count,
        })
        .collect()
}

pub fn matrix_to_csv(a: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format!("{:?}", a[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            l.split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: n + 1,
                        msg: format!("bad number {t:?}"),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch("ragged CSV matrix".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Grayscale heatmap, one square cell per entry, darker for larger values.
pub fn heatmap_svg(a: &DMatrix<f64>, cell: usize) -> String {
    let (lo, hi) = (a.min(), a.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (a.ncols() * cell, a.nrows() * cell);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let g = (255.0 * (1.0 - (a[(i, j)] - lo) / span)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({g},{g},{g})\"/>",
                j * cell,
                i * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `L = V V^T` to `<path>.csv` and `<path>.svg`.
pub fn export_kernel_heatmap(factor: &KernelFactor, path: &Path) -> Result<()> {
    let l = factor.kernel();
    fs::write(path.with_extension("csv"), matrix_to_csv(&l))?;
    fs::write(path.with_extension("svg"), heatmap_svg(&l, 10))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_rounds: usize,
    pub batch: usize,
    pub n_precision_samples: usize,
    pub eps_grid: Vec<f64>,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_rounds: 20,
            batch: 512,
            n_precision_samples: 2000,
            eps_grid: default_eps_grid(20),
            top_k: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wd_mean: f64,
    pub wd_ci_low: f64,
    pub wd_ci_high: f64,
    pub wd_rounds: Vec<f64>,
    pub wd_with_replacement: bool,
    pub test_ll: f64,
    pub test_ll_degenerate: usize,
    pub precision_curve: Vec<(f64, f64)>,
    pub marginals: Vec<MarginalPair>,
    pub top_subsets_test: Vec<TopSubset>,
    pub top_subsets_model: Vec<TopSubset>,
    pub settings: EvalSettings,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn precision_csv(&self) -> String {
        let mut s = String::from("eps,fraction\n");
        for (e, f) in &self.precision_curve {
            let _ = writeln!(s, "{e:?},{f:?}");
        }
        s
    }

    pub fn marginals_csv(&self) -> String {
        let mut s = String::from("item,empirical,model\n");
        for p in &self.marginals {
            let _ = writeln!(s, "{},{:?},{:?}", p.item, p.empirical, p.model);
        }
        s
    }
}

/// Every metric for one model against one test set.
pub fn evaluate(factor: &KernelFactor, test: &[Subset], settings: &EvalSettings) -> Result<EvalReport> {
    let wd = eval_wd(factor, test, settings.n_rounds, settings.batch, settings.seed)?;
    let ll = eval_test_ll(factor, test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9);
    let generated = sample_model(factor, settings.n_precision_samples, &mut rng)?;
    let mut grid = settings.eps_grid.clone();
    grid.sort_by(f64::total_cmp);
    if grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(Error::Domain("precision grid must lie in (0, 1]".into()));
    }
    Ok(EvalReport {
        wd_mean: wd.mean,
        wd_ci_low: wd.ci_low,
        wd_ci_high: wd.ci_high,
        wd_rounds: wd.rounds,
        wd_with_replacement: wd.with_replacement,
        test_ll: ll.mean,
        test_ll_degenerate: ll.degenerate,
        precision_curve: precision_curve(&generated, test, &grid),
        marginals: marginal_report(factor, test)?,
        top_subsets_test: top_subsets(test, settings.top_k),
        top_subsets_model: top_subsets(&generated, settings.top_k),
        settings: settings.clone(),
    })
}

