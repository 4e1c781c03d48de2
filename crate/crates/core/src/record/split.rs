use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Train/validation/test proportions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(seed: u64) -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {fr:?}"
            )));
        }
        Ok(())
    }
}

/// Splits each class independently after a seeded shuffle. Every partition
/// receives at least one record of every class.
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    for (class, &count) in ds.class_counts() {
        if count < 3 {
            return Err(Error::Stratify {
                class: class.code().to_string(),
                count,
                needed: 3,
            });
        }
    }
    let records = ds.records();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &class in ds.class_counts().keys() {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        let n = idx.len();
        let mut rng = rng::child(spec.seed, class.id() as u64 + 1);
        let perm = rng::permutation(&mut rng, n);
        let n_val = ((spec.val_frac * n as f64).round() as usize).max(1);
        let n_test = ((spec.test_frac * n as f64).round() as usize).max(1);
        let n_train = n - n_val - n_test;
        for (pos, &p) in perm.iter().enumerate() {
            let rec = records[idx[p]].clone();
            if pos < n_train {
                train.push(rec);
            } else if pos < n_train + n_val {
                val.push(rec);
            } else {
                test.push(rec);
            }
        }
    }
    Ok((Dataset::new(train)?, Dataset::new(val)?, Dataset::new(test)?))
}

/// Keeps `fraction` of each class (at least one record per class).
pub fn stratified_subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let records = ds.records();
    let mut out = Vec::new();
    for &class in ds.class_counts().keys() {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == class).collect();
        let keep = (fraction * idx.len() as f64).round() as usize;
        if keep == 0 {
            return Err(Error::Stratify {
                class: class.code().to_string(),
                count: idx.len(),
                needed: (1.0 / fraction).ceil() as usize,
            });
        }
        let mut rng = rng::child(seed, class.id() as u64 + 101);
        let perm = rng::permutation(&mut rng, idx.len());
        let mut chosen: Vec<usize> = perm[..keep].iter().map(|&p| idx[p]).collect();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|i| records[i].clone()));
    }
    Dataset::new(out)
}
