//! Labeled multichannel ECG records and datasets.
//!
//! A [`Dataset`] is an ordered collection of [`EcgRecord`]s that share lead
//! count and sampling rate. Records are immutable once built; all dataset
//! transformations (merge, resample, split) return new values.

mod fixture;
mod resample;
mod split;
pub mod store;
pub mod wfdb;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fixture::{detect_beats, generate_fixture, generate_fixture_dataset, FixtureSpec};
pub use resample::{resample, resample_dataset};
pub use split::{stratified_split, stratified_subsample, SplitSpec};

/// The seven rhythm classes shared by every dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RhythmClass {
    Sbrad = 0,
    Sr = 1,
    Afib = 2,
    Stach = 3,
    Aflt = 4,
    Sarrh = 5,
    Svtac = 6,
}

impl RhythmClass {
    pub const COUNT: usize = 7;
    pub const ALL: [RhythmClass; 7] = [
        RhythmClass::Sbrad,
        RhythmClass::Sr,
        RhythmClass::Afib,
        RhythmClass::Stach,
        RhythmClass::Aflt,
        RhythmClass::Sarrh,
        RhythmClass::Svtac,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::Index {
            index: id,
            bound: Self::COUNT,
        })
    }

    pub fn code(self) -> &'static str {
        match self {
            RhythmClass::Sbrad => "SBRAD",
            RhythmClass::Sr => "SR",
            RhythmClass::Afib => "AFIB",
            RhythmClass::Stach => "STACH",
            RhythmClass::Aflt => "AFLT",
            RhythmClass::Sarrh => "SARRH",
            RhythmClass::Svtac => "SVTAC",
        }
    }

    /// Parses a comma-separated list of class codes.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for RhythmClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RhythmClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown rhythm class code {s:?}")))
    }
}

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Ptbxl,
    Chapman,
    Merged,
    Fixture,
    Synthetic,
}

impl Source {
    pub fn tag(self) -> &'static str {
        match self {
            Source::Ptbxl => "PTBXL",
            Source::Chapman => "CHAPMAN",
            Source::Merged => "MERGED",
            Source::Fixture => "FIXTURE",
            Source::Synthetic => "SYNTHETIC",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Source::Ptbxl,
            Source::Chapman,
            Source::Merged,
            Source::Fixture,
            Source::Synthetic,
        ]
        .into_iter()
        .find(|t| t.tag().eq_ignore_ascii_case(s.trim()))
        .ok_or_else(|| Error::InvalidArgument(format!("unknown source tag {s:?}")))
    }
}

/// Dense `[leads × samples]` matrix of millivolt values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    leads: usize,
    samples: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn new(leads: usize, samples: usize, data: Vec<f64>) -> Result<Self> {
        if leads == 0 || samples == 0 {
            return Err(Error::Schema(format!(
                "signal must have at least one lead and one sample, got {leads}x{samples}"
            )));
        }
        if data.len() != leads * samples {
            return Err(Error::shape("Signal::new", leads * samples, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "signal value at lead {}, sample {}",
                i / samples,
                i % samples
            )));
        }
        Ok(Self {
            leads,
            samples,
            data,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let leads = rows.len();
        let samples = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::Schema("ragged signal rows".into()));
        }
        Self::new(leads, samples, rows.concat())
    }

    pub fn zeros(leads: usize, samples: usize) -> Self {
        Self {
            leads,
            samples,
            data: vec![0.0; leads * samples],
        }
    }

    pub fn leads(&self) -> usize {
        self.leads
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn lead(&self, l: usize) -> &[f64] {
        &self.data[l * self.samples..(l + 1) * self.samples]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.samples)
    }

    /// Row-major flat view, lead after lead.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.leads, self.samples, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// One labeled multichannel recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub signal: Signal,
    pub fs: f64,
    pub label: RhythmClass,
    pub record_id: String,
    pub source: Source,
}

impl EcgRecord {
    pub fn new(
        signal: Signal,
        fs: f64,
        label: RhythmClass,
        record_id: impl Into<String>,
        source: Source,
    ) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::Schema(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self {
            signal,
            fs,
            label,
            record_id: record_id.into(),
            source,
        })
    }

    pub fn leads(&self) -> usize {
        self.signal.leads()
    }

    pub fn samples(&self) -> usize {
        self.signal.samples()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples() as f64 / self.fs
    }
}

/// Records sharing lead count and sampling rate, with per-class counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<EcgRecord>,
    class_counts: BTreeMap<RhythmClass, usize>,
}

impl Dataset {
    pub fn new(records: Vec<EcgRecord>) -> Result<Self> {
        if let Some(first) = records.first() {
            for r in &records[1..] {
                if r.leads() != first.leads() {
                    return Err(Error::Schema(format!(
                        "record {} has {} leads, expected {}",
                        r.record_id,
                        r.leads(),
                        first.leads()
                    )));
                }
                if r.fs != first.fs {
                    return Err(Error::Schema(format!(
                        "record {} sampled at {} Hz, expected {} Hz",
                        r.record_id, r.fs, first.fs
                    )));
                }
            }
        }
        let mut class_counts = BTreeMap::new();
        for r in &records {
            *class_counts.entry(r.label).or_insert(0) += 1;
        }
        Ok(Self {
            records,
            class_counts,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EcgRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EcgRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<RhythmClass, usize> {
        &self.class_counts
    }

    pub fn count(&self, class: RhythmClass) -> usize {
        self.class_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn leads(&self) -> Option<usize> {
        self.records.first().map(EcgRecord::leads)
    }

    pub fn fs(&self) -> Option<f64> {
        self.records.first().map(|r| r.fs)
    }

    /// Common record length, or `None` if empty or ragged.
    pub fn uniform_length(&self) -> Option<usize> {
        let n = self.records.first()?.samples();
        self.records.iter().all(|r| r.samples() == n).then_some(n)
    }

    pub fn of_class(&self, class: RhythmClass) -> impl Iterator<Item = &EcgRecord> {
        self.records.iter().filter(move |r| r.label == class)
    }

    /// Concatenates two datasets without resampling.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Dataset::new(records)
    }

    pub fn filter(&self, keep: impl Fn(&EcgRecord) -> bool) -> Dataset {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        // Filtering cannot break the shared-schema invariant.
        Dataset::new(records).expect("subset of a valid dataset")
    }
}

/// Merges two datasets from the shared taxonomy into one at `target_fs`.
///
/// Class counts add elementwise and source tags are kept on every record.
pub fn harmonize_merge(a: &Dataset, b: &Dataset, target_fs: f64) -> Result<Dataset> {
    if let (Some(la), Some(lb)) = (a.leads(), b.leads()) {
        if la != lb {
            return Err(Error::Schema(format!(
                "cannot merge datasets with {la} and {lb} leads"
            )));
        }
    }
    let a = resample_dataset(a, target_fs)?;
    let b = resample_dataset(b, target_fs)?;
    a.concat(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(label: RhythmClass, id: usize, source: Source) -> EcgRecord {
        EcgRecord::new(
            Signal::new(1, 4, vec![0.0, 0.1, 0.2, 0.3]).unwrap(),
            100.0,
            label,
            format!("{source}-{id}"),
            source,
        )
        .unwrap()
    }

    fn counts_dataset(counts: &[(RhythmClass, usize)], source: Source) -> Dataset {
        let mut recs = Vec::new();
        for &(c, n) in counts {
            for _ in 0..n {
                recs.push(tiny(c, recs.len(), source));
            }
        }
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn class_id_code_bijection() {
        for (i, c) in RhythmClass::ALL.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(RhythmClass::from_id(i).unwrap(), *c);
            assert_eq!(c.code().parse::<RhythmClass>().unwrap(), *c);
        }
        let codes: Vec<_> = RhythmClass::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, ["SBRAD", "SR", "AFIB", "STACH", "AFLT", "SARRH", "SVTAC"]);
        assert!(RhythmClass::from_id(7).is_err());
    }

    #[test]
    fn signal_rejects_non_finite() {
        assert!(matches!(
            Signal::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Signal::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn merge_adds_class_counts() {
        let ptb = counts_dataset(&[(RhythmClass::Sr, 13404), (RhythmClass::Aflt, 34)], Source::Ptbxl);
        let chap = counts_dataset(&[(RhythmClass::Sr, 6306), (RhythmClass::Aflt, 6218)], Source::Chapman);
        let merged = harmonize_merge(&ptb, &chap, 100.0).unwrap();
        assert_eq!(merged.count(RhythmClass::Sr), 19710);
        assert_eq!(merged.count(RhythmClass::Aflt), 6252);
        assert_eq!(merged.of_class(RhythmClass::Sr).filter(|r| r.source == Source::Ptbxl).count(), 13404);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let d = counts_dataset(&[(RhythmClass::Afib, 3)], Source::Fixture);
        assert_eq!(harmonize_merge(&d, &Dataset::empty(), 100.0).unwrap(), d);
        assert_eq!(harmonize_merge(&Dataset::empty(), &d, 100.0).unwrap(), d);
    }

    #[test]
    fn merge_rejects_lead_mismatch() {
        let a = counts_dataset(&[(RhythmClass::Sr, 1)], Source::Ptbxl);
        let rec = EcgRecord::new(Signal::zeros(2, 4), 100.0, RhythmClass::Sr, "x", Source::Chapman).unwrap();
        let b = Dataset::new(vec![rec]).unwrap();
        assert!(matches!(harmonize_merge(&a, &b, 100.0), Err(Error::Schema(_))));
    }

    #[test]
    fn merge_is_associative_on_counts() {
        let a = counts_dataset(&[(RhythmClass::Sr, 3), (RhythmClass::Afib, 1)], Source::Ptbxl);
        let b = counts_dataset(&[(RhythmClass::Sr, 2)], Source::Chapman);
        let c = counts_dataset(&[(RhythmClass::Afib, 4), (RhythmClass::Svtac, 2)], Source::Fixture);
        let left = harmonize_merge(&harmonize_merge(&a, &b, 100.0).unwrap(), &c, 100.0).unwrap();
        let right = harmonize_merge(&a, &harmonize_merge(&b, &c, 100.0).unwrap(), 100.0).unwrap();
        assert_eq!(left.class_counts(), right.class_counts());
        let ids = |d: &Dataset| {
            let mut v: Vec<_> = d.records().iter().map(|r| r.record_id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&left), ids(&right));
    }
}
