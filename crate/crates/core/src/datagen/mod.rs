//! Dataset construction: synthetic Gaussian-pattern generation, CSV
//! ingestion and windowing, the four evaluation splits, normalization, and
//! bundle persistence.
//!
//! A sequence of length `seq_len` is cut in two: the first half is the key
//! (prompt) and the second half is the value (target).

mod bundle_io;
mod cluster;
mod scaler;
mod synthetic;
mod windowing;

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;

pub use bundle_io::{load_bundle, save_bundle, BUNDLE_SCHEMA_VERSION};
pub use cluster::average_linkage;
pub use scaler::{fit_scaler, Scaler};
pub use synthetic::{generate_synthetic, pattern_specs, GaussianPatternSpec, SyntheticConfig};
pub use windowing::{read_csv_table, window_and_split, CsvTable, WindowConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
    #[error("input too short: {rows} rows, need at least {needed}")]
    TooShort { rows: usize, needed: usize },
    #[error("no samples to fit a scaler on")]
    EmptyInput,
    #[error("every feature is constant; nothing left to window")]
    AllFeaturesConstant,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("non-numeric value {value:?} in column {column:?} at row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Provenance of a sample relative to the audited model's training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    /// Copyrighted and used to train the target model (D_c).
    MemberCopyrighted,
    /// Copyrighted but never seen by the target model (D_nc).
    NonmemberCopyrighted,
    None,
}

impl Label {
    pub fn is_member(self) -> bool {
        self == Label::MemberCopyrighted
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::MemberCopyrighted => "MEMBER_COPYRIGHTED",
            Label::NonmemberCopyrighted => "NONMEMBER_COPYRIGHTED",
            Label::None => "NONE",
        }
    }
}

/// One windowed sequence split into its key and value halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// `[key_len x features]`
    pub key: Array2<f64>,
    /// `[value_len x features]`
    pub value: Array2<f64>,
    pub label: Label,
    /// Generating pattern, synthetic data only.
    pub pattern_id: Option<u32>,
    pub sample_id: u64,
}

impl SequenceSample {
    pub fn features(&self) -> usize {
        self.key.ncols()
    }

    /// Split a `[seq_len x F]` sequence at its midpoint.
    pub fn from_sequence(
        seq: &Array2<f64>,
        sample_id: u64,
        label: Label,
        pattern_id: Option<u32>,
    ) -> Self {
        let half = seq.nrows() / 2;
        Self {
            key: seq.slice(ndarray::s![..half, ..]).to_owned(),
            value: seq.slice(ndarray::s![half.., ..]).to_owned(),
            label,
            pattern_id,
            sample_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Generation settings recorded alongside the splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub source: DataSource,
    pub seed: u64,
    pub overlap: bool,
    pub features: usize,
    pub seq_len: usize,
    pub n_per_subset: usize,
    pub n_copyrighted: usize,
    pub n_clusters: Option<usize>,
    pub copyright_fraction: Option<f64>,
    pub feature_names: Vec<String>,
    pub dropped_features: Vec<String>,
}

/// The four evaluation splits plus the normalization fitted on `d_tr`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub d_tr: Vec<SequenceSample>,
    pub d_v: Vec<SequenceSample>,
    pub d_nc: Vec<SequenceSample>,
    /// Copies of the `d_tr` samples marked as copyrighted members.
    pub d_c: Vec<SequenceSample>,
    pub scaler: Scaler,
    pub meta: BundleMeta,
}

impl DatasetBundle {
    /// The auditor's copyrighted set, `d_c` followed by `d_nc`.
    pub fn d2(&self) -> Vec<&SequenceSample> {
        self.d_c.iter().chain(self.d_nc.iter()).collect()
    }

    pub fn total_sequences(&self) -> usize {
        self.d_tr.len() + self.d_v.len() + self.d_nc.len()
    }

    pub fn total_records(&self) -> usize {
        self.total_sequences() * self.meta.seq_len
    }

    /// Copy of the bundle with every split passed through the scaler.
    pub fn normalized(&self) -> DatasetBundle {
        let map = |split: &[SequenceSample]| -> Vec<SequenceSample> {
            split.iter().map(|s| self.scaler.apply(s)).collect()
        };
        DatasetBundle {
            d_tr: map(&self.d_tr),
            d_v: map(&self.d_v),
            d_nc: map(&self.d_nc),
            d_c: map(&self.d_c),
            scaler: self.scaler.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Check the structural invariants relating the splits to each other.
    pub fn validate(&self) -> Result<(), DataError> {
        let ids = |split: &[SequenceSample]| -> BTreeSet<u64> {
            split.iter().map(|s| s.sample_id).collect()
        };
        let tr = ids(&self.d_tr);
        let v = ids(&self.d_v);
        let nc = ids(&self.d_nc);
        let c = ids(&self.d_c);
        if !c.is_subset(&tr) {
            return Err(DataError::Shape("d_c is not a subset of d_tr".into()));
        }
        if !tr.is_disjoint(&nc) || !v.is_disjoint(&nc) {
            return Err(DataError::Shape("d_nc overlaps d_tr or d_v".into()));
        }
        if self.d_c.iter().any(|s| s.label != Label::MemberCopyrighted)
            || self.d_nc.iter().any(|s| s.label != Label::NonmemberCopyrighted)
        {
            return Err(DataError::Shape("copyrighted split carries a wrong label".into()));
        }
        let half = self.meta.seq_len / 2;
        let f = self.meta.features;
        for s in self.d_tr.iter().chain(&self.d_v).chain(&self.d_nc).chain(&self.d_c) {
            if s.key.dim() != (half, f) || s.value.dim() != (self.meta.seq_len - half, f) {
                return Err(DataError::Shape(format!(
                    "sample {} has key {:?} / value {:?}",
                    s.sample_id,
                    s.key.dim(),
                    s.value.dim()
                )));
            }
            if s.key.iter().chain(s.value.iter()).any(|x| !x.is_finite()) {
                return Err(DataError::Shape(format!(
                    "sample {} has non-finite entries",
                    s.sample_id
                )));
            }
        }
        if self.scaler.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::Shape("scaler has non-positive scale".into()));
        }
        Ok(())
    }
}

/// Mark the chosen `d_tr` indices as members and return their copies.
pub(crate) fn mark_copyrighted(d_tr: &mut [SequenceSample], chosen: &[usize]) -> Vec<SequenceSample> {
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| {
            d_tr[i].label = Label::MemberCopyrighted;
            d_tr[i].clone()
        })
        .collect()
}
