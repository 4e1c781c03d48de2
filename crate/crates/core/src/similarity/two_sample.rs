use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, train_on_labels, Classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::record::{Dataset, EcgRecord};
use crate::rng;

pub const MIN_PER_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleResult {
    /// Held-out real-vs-synthetic accuracy; 0.5 means indistinguishable.
    pub accuracy: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

/// Splits indices `0..n` into a seeded half for training and the rest.
fn halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(&mut rng::stream(seed), n);
    let cut = n / 2;
    (perm[..cut].to_vec(), perm[cut..].to_vec())
}

/// Held-out predictions of the real-vs-synthetic discriminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoSamplePredictions {
    pub predicted: Vec<usize>,
    /// 0 = real, 1 = synthetic.
    pub truth: Vec<usize>,
}

impl TwoSamplePredictions {
    pub fn accuracy(&self) -> f64 {
        let correct = self.predicted.iter().zip(&self.truth).filter(|(p, t)| p == t).count();
        correct as f64 / self.truth.len().max(1) as f64
    }

    /// Same predictions scored against swapped origin labels.
    pub fn relabeled(&self) -> Self {
        Self {
            predicted: self.predicted.clone(),
            truth: self.truth.iter().map(|t| 1 - t).collect(),
        }
    }
}

/// Trains a binary discriminator (label 0 = real, 1 = synthetic) on a
/// stratified half of each side and reports its accuracy on the other half.
pub fn two_sample_score(real: &Dataset, synth: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<TwoSampleResult> {
    let p = two_sample_predictions(real, synth, cfg, seed)?;
    Ok(TwoSampleResult {
        accuracy: p.accuracy(),
        n_real: real.len(),
        n_synth: synth.len(),
    })
}

pub fn two_sample_predictions(real: &Dataset, synth: &Dataset, cfg: &ClassifierConfig, seed: u64) -> Result<TwoSamplePredictions> {
    let got = real.len().min(synth.len());
    if got < MIN_PER_SIDE {
        return Err(Error::SampleSize {
            needed: MIN_PER_SIDE,
            got,
        });
    }
    let leads = real.leads().unwrap_or(0);
    let length = real
        .uniform_length()
        .ok_or_else(|| Error::InvalidArgument("records must share one length".into()))?;
    if synth.leads() != Some(leads) || synth.uniform_length() != Some(length) {
        return Err(Error::shape(
            "two-sample inputs",
            [leads, length],
            [synth.leads().unwrap_or(0), synth.uniform_length().unwrap_or(0)],
        ));
    }
    let cfg = ClassifierConfig {
        n_classes: 2,
        ..cfg.clone()
    };
    let (rt, re) = halves(real.len(), rng::mix(seed, 1));
    let (st, se) = halves(synth.len(), rng::mix(seed, 2));
    fn pick<'d>(ds: &'d Dataset, idx: &[usize], label: usize, recs: &mut Vec<&'d EcgRecord>, labels: &mut Vec<usize>) {
        for &i in idx {
            recs.push(&ds.records()[i]);
            labels.push(label);
        }
    }
    let (mut train, mut train_y) = (Vec::new(), Vec::new());
    pick(real, &rt, 0, &mut train, &mut train_y);
    pick(synth, &st, 1, &mut train, &mut train_y);
    let (mut test, mut test_y) = (Vec::new(), Vec::new());
    pick(real, &re, 0, &mut test, &mut test_y);
    pick(synth, &se, 1, &mut test, &mut test_y);

    let mut model: Classifier = Classifier::new(&cfg, leads, length, seed)?;
    train_on_labels(&mut model, &train, &train_y, &[], &[], seed)?;
    let scores = model.predict_scores(&test)?;
    Ok(TwoSamplePredictions {
        predicted: scores.iter().map(|s| argmax(s)).collect(),
        truth: test_y,
    })
}
