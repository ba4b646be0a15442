//! Jaccard costs and the exact uniform-weight Earth Mover's distance.
//!
//! With equal batch sizes and uniform weights the optimal coupling is a permutation
//! matrix scaled by `1/n`, so the transport problem reduces to linear assignment.

use nalgebra::DMatrix;

use crate::diffmath::tape::soft_jaccard_matrix;
use crate::diffmath::{Tape, TapeMatrix, TapeValue};
use crate::dpp::Subset;
use crate::error::{Error, Result};
use crate::samplers::RelaxedSample;

/// `1 - |x ∩ y| / |x ∪ y|`, and 0 when both sets are empty.
///
/// Written in the same form as the soft distance so that the two agree bit for bit
/// on binary inputs.
pub fn jaccard_distance(x: &Subset, y: &Subset) -> f64 {
    let inter = x.intersection_len(y);
    let union = x.len() + y.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Pairwise exact Jaccard distances, `a.len() x b.len()`.
pub fn jaccard_matrix(a: &[Subset], b: &[Subset]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| jaccard_distance(&a[i], &b[j]))
}

/// Soft Jaccard distance `1 - x.y / (M - (1-x).(1-y))` on plain vectors.
///
/// The flag is set when the denominator vanishes and the value 0 was substituted.
pub fn soft_jaccard_value(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "soft Jaccard of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    let d = soft_jaccard_matrix(&xm, &ym)[(0, 0)];
    let union: f64 = x.iter().zip(y).map(|(a, b)| a + b - a * b).sum();
    Ok((d, union <= 1e-12))
}

/// Soft Jaccard distance between a constant binary `x` and a tape column `y`.
pub fn soft_jaccard(tape: &mut Tape, x: &[f64], y: TapeMatrix) -> Result<TapeValue> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    tape.cost_matrix(&xm, y)
}

/// Indicator columns of `subsets` over `m` items.
pub fn indicator_matrix(subsets: &[Subset], m: usize) -> Result<DMatrix<f64>> {
    let mut x = DMatrix::zeros(m, subsets.len());
    for (j, s) in subsets.iter().enumerate() {
        for &i in s.indices() {
            if i >= m {
                return Err(Error::ItemOutOfRange { id: i, m });
            }
            x[(i, j)] = 1.0;
        }
    }
    Ok(x)
}

/// `C[i, j] = soft_jaccard(data_i, samples_j)` on the tape.
pub fn cost_matrix(
    tape: &mut Tape,
    data: &[Subset],
    samples: &[RelaxedSample],
) -> Result<TapeMatrix> {
    if data.len() != samples.len() || data.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} data subsets against {} samples",
            data.len(),
            samples.len()
        )));
    }
    let m = samples[0].y.rows();
    let x = indicator_matrix(data, m)?;
    let cols: Vec<TapeMatrix> = samples.iter().map(|s| s.y).collect();
    let y = tape.hcat(&cols)?;
    tape.cost_matrix(&x, y)
}

/// Optimal uniform coupling: row `i` is matched to column `assignment[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub assignment: Vec<usize>,
    /// `(1/n) sum_i C[i, assignment[i]]`.
    pub cost: f64,
}

impl TransportPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    /// Dense coupling matrix with `1/n` on matched pairs.
    pub fn coupling(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut p = DMatrix::zeros(n, n);
        for (i, &j) in self.assignment.iter().enumerate() {
            p[(i, j)] = 1.0 / n as f64;
        }
        p
    }

    pub fn cost_of(c: &DMatrix<f64>, assignment: &[usize]) -> f64 {
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        total / assignment.len() as f64
    }
}

/// Minimum-cost assignment with dual potentials (`C - u - v >= 0`, tight on the matching).
fn lsap(c: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = c.nrows();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut path = vec![usize::MAX; n];
    let mut remaining = vec![0usize; n];
    let mut sr = vec![false; n];
    let mut sc = vec![false; n];
    for cur in 0..n {
        shortest.fill(f64::INFINITY);
        sr.fill(false);
        sc.fill(false);
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = n - it - 1;
        }
        let mut left = n;
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            sr[i] = true;
            let mut index = usize::MAX;
            let mut lowest = f64::INFINITY;
            for (it, &j) in remaining[..left].iter().enumerate() {
                let r = min_val + c[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            sc[j] = true;
            left -= 1;
            remaining[index] = remaining[left];
            if row4col[j] == usize::MAX {
                break j;
            }
            i = row4col[j];
        };
        u[cur] += min_val;
        for r in 0..n {
            if sr[r] && r != cur {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur {
                break;
            }
        }
    }
    (col4row, u, v)
}

/// Moves an optimal assignment to the lexicographically smallest optimal one.
///
/// Optimal assignments are exactly the perfect matchings on tight edges of the dual
/// solution. Rows are fixed in order, each to the smallest column it can take while
/// the later rows still have a perfect tight matching.
fn lex_smallest(col4row: &mut [usize], tight: impl Fn(usize, usize) -> bool) {
    let n = col4row.len();
    let mut row4col = vec![0usize; n];
    for (r, &c) in col4row.iter().enumerate() {
        row4col[c] = r;
    }
    let mut next = vec![usize::MAX; n];
    let mut good = vec![false; n];
    let mut queue = Vec::with_capacity(n);
    for r in 0..n {
        let old = col4row[r];
        if !(0..old).any(|c| tight(r, c) && row4col[c] > r) {
            continue;
        }
        // rows after r that can hand their column on and reach `old`
        good.fill(false);
        queue.clear();
        queue.push(old);
        let mut head = 0;
        while head < queue.len() {
            let y = queue[head];
            head += 1;
            for x in (r + 1)..n {
                if !good[x] && col4row[x] != y && tight(x, y) {
                    good[x] = true;
                    next[x] = y;
                    queue.push(col4row[x]);
                }
            }
        }
        let Some(c) = (0..old).find(|&c| row4col[c] > r && tight(r, c) && good[row4col[c]]) else {
            continue;
        };
        let mut x = row4col[c];
        col4row[r] = c;
        row4col[c] = r;
        loop {
            let y = next[x];
            let owner = row4col[y];
            col4row[x] = y;
            row4col[y] = x;
            if y == old {
                break;
            }
            x = owner;
        }
    }
}

/// Exact optimal uniform coupling for a square cost matrix.
pub fn emd_uniform(c: &DMatrix<f64>) -> Result<TransportPlan> {
    let n = c.nrows();
    if n == 0 || c.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "EMD needs a non-empty square cost matrix, got {}x{}",
            n,
            c.ncols()
        )));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("EMD cost matrix"));
    }
    let (mut assignment, u, v) = lsap(c);
    let eps = 1e-13 * c.amax().max(1.0);
    lex_smallest(&mut assignment, |i, j| c[(i, j)] - u[i] - v[j] <= eps);
    let cost = TransportPlan::cost_of(c, &assignment);
    Ok(TransportPlan { assignment, cost })
}

/// `(1/n) sum_i C[i, assignment[i]]` on the tape, with the plan held constant.
pub fn wasserstein_loss(tape: &mut Tape, c: TapeMatrix, plan: &TransportPlan) -> Result<TapeValue> {
    if c.shape() != (plan.n(), plan.n()) {
        return Err(Error::DimensionMismatch(format!(
            "plan of size {} for a {}x{} cost matrix",
            plan.n(),
            c.rows(),
            c.cols()
        )));
    }
    let p = tape.constant(plan.coupling())?;
    let w = tape.mul(c, p)?;
    tape.sum(w)
}

/// EMD between two equal-size collections of subsets under the exact Jaccard distance.
pub fn emd_subsets(a: &[Subset], b: &[Subset]) -> Result<TransportPlan> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "collections of sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    emd_uniform(&jaccard_matrix(a, b))
}
