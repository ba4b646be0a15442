//! Low-rank symmetric DPP with kernel `L = V V^T`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diffmath::{linalg, Tape, TapeMatrix, TapeValue};
use crate::error::{Error, Result};

/// Largest catalog for which brute-force enumeration is allowed.
pub const ENUMERATION_LIMIT: usize = 20;

/// Minors at or below this determinant are treated as degenerate by the MLE loss.
pub const DEGENERATE_DET: f64 = 1e-30;

/// A set of item ids, kept sorted and free of duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset {
    indices: Vec<usize>,
}

impl Subset {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Items whose indicator entry is at least one half.
    pub fn from_indicator(x: &[f64]) -> Self {
        Self {
            indices: x
                .iter()
                .enumerate()
                .filter(|(_, &v)| v >= 0.5)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn from_mask(mask: u32) -> Self {
        Self {
            indices: (0..32).filter(|i| mask & (1 << i) != 0).collect(),
        }
    }

    pub fn mask(&self) -> u32 {
        self.indices.iter().fold(0, |m, &i| m | (1 << i))
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.indices.binary_search(&item).is_ok()
    }

    pub fn max_item(&self) -> Option<usize> {
        self.indices.last().copied()
    }

    /// Binary indicator vector of length `m`.
    pub fn indicator(&self, m: usize) -> Vec<f64> {
        let mut x = vec![0.0; m];
        for &i in &self.indices {
            x[i] = 1.0;
        }
        x
    }

    /// `|self ∩ other|` for sorted index lists.
    pub fn intersection_len(&self, other: &Subset) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.indices, &other.indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

impl FromIterator<usize> for Subset {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// The learnable `M x K` factor `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelFactor {
    v: DMatrix<f64>,
}

impl KernelFactor {
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        let (m, k) = v.shape();
        if m == 0 || k == 0 {
            return Err(Error::DimensionMismatch(format!("empty factor {m}x{k}")));
        }
        if k > m {
            return Err(Error::DimensionMismatch(format!(
                "rank {k} exceeds catalog size {m}"
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("kernel factor"));
        }
        Ok(Self { v })
    }

    /// I.i.d. uniform entries on `[0, sqrt(1/K)]`.
    pub fn random_init<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Result<Self> {
        let hi = (1.0 / k.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(0.0, hi).expect("valid bounds");
        Self::new(DMatrix::from_fn(m, k, |_, _| dist.sample(rng)))
    }

    /// Factor with every entry zero (`L = 0`).
    pub fn zeros(m: usize, k: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(m, k))
    }

    pub fn m(&self) -> usize {
        self.v.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.v
    }

    /// `L = V V^T`.
    pub fn kernel(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }

    /// `log det(L + I)`, evaluated through the `K x K` identity `det(I_M + V V^T) = det(I_K + V^T V)`.
    pub fn log_normalizer(&self) -> f64 {
        let k = self.k();
        let g = self.v.transpose() * &self.v + DMatrix::identity(k, k);
        linalg::logdet_spd(&g).expect("I + V^T V is positive definite")
    }

    /// `log det(L_J)`; `-inf` marks a numerically singular minor. The empty minor is 1.
    pub fn log_det_minor(&self, subset: &Subset) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        if subset.len() > self.k() {
            return f64::NEG_INFINITY;
        }
        let rows = self.v.select_rows(subset.indices());
        let lj = &rows * rows.transpose();
        match linalg::cholesky(&lj) {
            Ok(l) => linalg::logdet_from_factor(&l),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// `log Pr(J) = log det(L_J) - log det(L + I)`; `-inf` for a degenerate minor.
    pub fn log_prob(&self, subset: &Subset) -> f64 {
        self.log_det_minor(subset) - self.log_normalizer()
    }

    /// Brute-force `sum_J det(L_J)` alongside `det(L + I)`.
    pub fn normalizer_check(&self) -> Result<(f64, f64)> {
        let m = self.m();
        if m > ENUMERATION_LIMIT {
            return Err(Error::EnumerationTooLarge(m, ENUMERATION_LIMIT));
        }
        let l = self.kernel();
        let mut lhs = 0.0;
        for mask in 0u32..(1u32 << m) {
            let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if idx.len() > self.k() {
                continue;
            }
            let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| l[(idx[i], idx[j])]);
            lhs += sub.determinant();
        }
        let rhs = (l + DMatrix::identity(m, m)).determinant();
        Ok((lhs, rhs))
    }

    /// `Q = I - (L + I)^{-1}`, evaluated as `V (I + V^T V)^{-1} V^T`.
    pub fn marginal_kernel(&self) -> Result<MarginalKernel> {
        let k = self.k();
        let g = self.v.transpose() * &self.v + DMatrix::identity(k, k);
        let inv = linalg::inverse_spd(&g)?;
        let q = &self.v * inv * self.v.transpose();
        Ok(MarginalKernel {
            q: linalg::symmetrize(&q),
        })
    }
}

/// `Q = I - (L + I)^{-1}`; its diagonal holds the singleton inclusion probabilities.
#[derive(Clone, Debug)]
pub struct MarginalKernel {
    pub q: DMatrix<f64>,
}

impl MarginalKernel {
    pub fn inclusion_probs(&self) -> Vec<f64> {
        self.q.diagonal().iter().copied().collect()
    }

    /// `E|S| = tr(Q)`.
    pub fn expected_size(&self) -> f64 {
        self.q.trace()
    }
}

/// `V V^T` on the tape.
pub fn kernel_on_tape(tape: &mut Tape, v: TapeMatrix) -> Result<TapeMatrix> {
    let vt = tape.transpose(v)?;
    tape.matmul(v, vt)
}

/// `I - (L + I)^{-1}` on the tape.
pub fn marginal_kernel_on_tape(tape: &mut Tape, l: TapeMatrix) -> Result<TapeMatrix> {
    let eye = tape.identity(l.rows())?;
    let shifted = tape.add(l, eye)?;
    let inv = tape.inverse_psd(shifted)?;
    tape.sub(eye, inv)
}

/// Mean negative log-likelihood of `batch` plus `alpha ||V||_F^2`.
///
/// Minors whose determinant is at most [`DEGENERATE_DET`] contribute the constant
/// `ln(DEGENERATE_DET)` instead of `-inf`.
pub fn mle_loss(
    tape: &mut Tape,
    v: TapeMatrix,
    batch: &[Subset],
    alpha: f64,
) -> Result<TapeValue> {
    if batch.is_empty() {
        return Err(Error::Domain("mle_loss on an empty batch".into()));
    }
    let (m, k) = v.shape();
    if let Some(bad) = batch.iter().filter_map(Subset::max_item).find(|&i| i >= m) {
        return Err(Error::ItemOutOfRange { id: bad, m });
    }
    let l = kernel_on_tape(tape, v)?;
    let vt = tape.transpose(v)?;
    let gram = tape.matmul(vt, v)?;
    let eye = tape.identity(k)?;
    let shifted = tape.add(gram, eye)?;
    let log_z = tape.logdet_psd(shifted)?;

    let floor = DEGENERATE_DET.ln();
    let mut terms = Vec::with_capacity(batch.len());
    let mut constant = 0.0;
    for subset in batch {
        if subset.is_empty() {
            continue;
        }
        let lj = tape.gather(l, subset.indices(), subset.indices())?;
        let healthy = match linalg::cholesky(tape.value(lj)) {
            Ok(f) => linalg::logdet_from_factor(&f) > floor,
            Err(_) => false,
        };
        if healthy {
            terms.push(tape.logdet_psd(lj)?);
        } else {
            constant += floor;
        }
    }
    let n = batch.len() as f64;
    let mut total = tape.scale(log_z, 1.0)?;
    if !terms.is_empty() {
        let stacked = tape.vcat(&terms)?;
        let s = tape.sum(stacked)?;
        let s = tape.scale(s, -1.0 / n)?;
        total = tape.add(total, s)?;
    }
    total = tape.offset(total, -constant / n)?;
    if alpha > 0.0 {
        let reg = tape.sum_squares(v)?;
        let reg = tape.scale(reg, alpha)?;
        total = tape.add(total, reg)?;
    }
    Ok(total)
}
