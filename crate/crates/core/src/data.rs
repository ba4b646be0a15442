//! Basket files, train/validation/test splits, synthetic data and model files.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dpp::{KernelFactor, Subset};
use crate::error::{Error, Result};
use crate::samplers::EnumeratedDpp;

pub const VALIDATION_SIZE: usize = 300;
pub const TEST_SIZE: usize = 2000;

/// Index lists into [`BasketDataset::baskets`]; each list is sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasketDataset {
    pub m: usize,
    pub baskets: Vec<Subset>,
    pub split: Option<Splits>,
    pub provenance: String,
}

impl BasketDataset {
    pub fn new(m: usize, baskets: Vec<Subset>, provenance: impl Into<String>) -> Result<Self> {
        for b in &baskets {
            if let Some(id) = b.max_item() {
                if id >= m {
                    return Err(Error::ItemOutOfRange { id, m });
                }
            }
        }
        Ok(Self {
            m,
            baskets,
            split: None,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.baskets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.baskets.is_empty()
    }

    fn pick(&self, idx: &[usize]) -> Vec<Subset> {
        idx.iter().map(|&i| self.baskets[i].clone()).collect()
    }

    /// Training baskets; every basket when no split has been made.
    pub fn train(&self) -> Vec<Subset> {
        match &self.split {
            Some(s) => self.pick(&s.train),
            None => self.baskets.clone(),
        }
    }

    pub fn validation(&self) -> Vec<Subset> {
        self.split.as_ref().map_or_else(Vec::new, |s| self.pick(&s.validation))
    }

    pub fn test(&self) -> Vec<Subset> {
        self.split.as_ref().map_or_else(Vec::new, |s| self.pick(&s.test))
    }

    /// Drops baskets with fewer than `min_size` items (and any existing split).
    pub fn filter_min_size(mut self, min_size: usize) -> Self {
        self.baskets.retain(|b| b.len() >= min_size);
        self.split = None;
        self
    }
}

/// Parses basket text: one basket per line, comma-separated item ids.
pub fn parse_baskets(text: &str, one_indexed: bool, m: Option<usize>) -> Result<BasketDataset> {
    let mut baskets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut items = Vec::new();
        for tok in line.split(',') {
            let tok = tok.trim();
            let id: usize = tok.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("malformed item id {tok:?}"),
            })?;
            let id = if one_indexed {
                id.checked_sub(1).ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    msg: "item id 0 in a one-indexed file".into(),
                })?
            } else {
                id
            };
            if let Some(m) = m {
                if id >= m {
                    return Err(Error::ItemOutOfRange { id, m });
                }
            }
            items.push(id);
        }
        baskets.push(Subset::new(items));
    }
    let m = m.unwrap_or_else(|| {
        baskets
            .iter()
            .filter_map(Subset::max_item)
            .max()
            .map_or(0, |x| x + 1)
    });
    BasketDataset::new(m, baskets, "inline")
}

pub fn load_baskets(path: &Path, one_indexed: bool, m: Option<usize>) -> Result<BasketDataset> {
    let text = fs::read_to_string(path)?;
    let mut ds = parse_baskets(&text, one_indexed, m)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

/// Writes one basket per line; empty baskets become empty lines.
pub fn write_baskets(path: &Path, baskets: &[Subset], one_indexed: bool) -> Result<()> {
    let mut out = fs::File::create(path)?;
    let shift = usize::from(one_indexed);
    for b in baskets {
        let line: Vec<String> = b.indices().iter().map(|i| (i + shift).to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Random 300 validation / 2000 test split, the rest for training.
pub fn split(ds: BasketDataset, seed: u64) -> Result<BasketDataset> {
    split_with(ds, VALIDATION_SIZE, TEST_SIZE, seed)
}

pub fn split_with(mut ds: BasketDataset, n_val: usize, n_test: usize, seed: u64) -> Result<BasketDataset> {
    let need = n_val + n_test;
    if ds.len() <= need {
        return Err(Error::TooFewBaskets {
            have: ds.len(),
            need,
        });
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut validation = idx[..n_val].to_vec();
    let mut test = idx[n_val..need].to_vec();
    let mut train = idx[need..].to_vec();
    validation.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    ds.split = Some(Splits {
        train,
        validation,
        test,
    });
    Ok(ds)
}

/// Ground-truth factor with i.i.d. `N(0, 1/K)` entries and exact samples from it.
pub fn generate_synthetic(m: usize, k: usize, n_baskets: usize, seed: u64) -> Result<(KernelFactor, BasketDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (1.0 / k.max(1) as f64).sqrt()).expect("positive scale");
    let factor = KernelFactor::new(DMatrix::from_fn(m, k, |_, _| normal.sample(&mut rng)))?;
    let baskets = sample_dataset(&factor, n_baskets, &mut rng)?;
    let ds = BasketDataset::new(m, baskets, format!("synthetic M={m} K={k} seed={seed}"))?;
    Ok((factor, ds))
}

/// `n` exact draws by enumeration.
pub fn sample_dataset<R: rand::Rng + ?Sized>(factor: &KernelFactor, n: usize, rng: &mut R) -> Result<Vec<Subset>> {
    let table = EnumeratedDpp::new(factor)?;
    Ok((0..n).map(|_| table.sample(rng)).collect())
}

/// Text form: a header line `M K`, then one row of `V` per line.
pub fn model_to_string(factor: &KernelFactor) -> String {
    let v = factor.v();
    let mut s = format!("{} {}\n", factor.m(), factor.k());
    for i in 0..factor.m() {
        let row: Vec<String> = (0..factor.k()).map(|j| format!("{:.16e}", v[(i, j)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn model_from_str(text: &str) -> Result<KernelFactor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::ModelFormat("empty file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ModelFormat(format!("bad header {header:?}")))?;
    let [m, k] = dims[..] else {
        return Err(Error::ModelFormat(format!("bad header {header:?}")));
    };
    if k > m {
        return Err(Error::ModelFormat(format!("rank {k} exceeds catalog size {m}")));
    }
    let mut data = Vec::with_capacity(m * k);
    let mut rows = 0;
    for line in lines {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::ModelFormat(format!("bad row {}", rows + 1)))?;
        if vals.len() != k {
            return Err(Error::ModelFormat(format!(
                "row {} has {} values, expected {k}",
                rows + 1,
                vals.len()
            )));
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != m {
        return Err(Error::ModelFormat(format!("{rows} rows, expected {m}")));
    }
    KernelFactor::new(DMatrix::from_row_slice(m, k, &data))
        .map_err(|e| Error::ModelFormat(e.to_string()))
}

pub fn save_model(factor: &KernelFactor, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(factor))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KernelFactor> {
    model_from_str(&fs::read_to_string(path)?)
}
