//! Bundle file: a checksummed container whose JSON header holds metadata,
//! the scaler and per-sample descriptors, and whose payload holds every
//! key and value matrix as row-major little-endian `f64`, split by split in
//! the order `d_tr, d_v, d_nc, d_c`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BundleMeta, DataError, DatasetBundle, Label, Scaler, SequenceSample};
use crate::container::{self, ContainerError, PayloadReader};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CAPBNDL\0";

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    sample_id: u64,
    label: Label,
    pattern_id: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    meta: BundleMeta,
    scaler: Scaler,
    key_len: usize,
    value_len: usize,
    features: usize,
    d_tr: Vec<SampleEntry>,
    d_v: Vec<SampleEntry>,
    d_nc: Vec<SampleEntry>,
    d_c: Vec<SampleEntry>,
}

fn entries(split: &[SequenceSample]) -> Vec<SampleEntry> {
    split
        .iter()
        .map(|s| SampleEntry {
            sample_id: s.sample_id,
            label: s.label,
            pattern_id: s.pattern_id,
        })
        .collect()
}

fn encode_bundle(bundle: &DatasetBundle) -> Result<Vec<u8>, DataError> {
    bundle.validate()?;
    let key_len = bundle.meta.seq_len / 2;
    let header = BundleHeader {
        meta: bundle.meta.clone(),
        scaler: bundle.scaler.clone(),
        key_len,
        value_len: bundle.meta.seq_len - key_len,
        features: bundle.meta.features,
        d_tr: entries(&bundle.d_tr),
        d_v: entries(&bundle.d_v),
        d_nc: entries(&bundle.d_nc),
        d_c: entries(&bundle.d_c),
    };
    let header = serde_json::to_vec(&header).map_err(|e| DataError::Shape(e.to_string()))?;
    let mut payload = Vec::new();
    for split in [&bundle.d_tr, &bundle.d_v, &bundle.d_nc, &bundle.d_c] {
        for s in split.iter() {
            container::f64s_to_le(s.key.iter().copied(), &mut payload);
            container::f64s_to_le(s.value.iter().copied(), &mut payload);
        }
    }
    Ok(container::encode(MAGIC, BUNDLE_SCHEMA_VERSION, &header, &payload))
}

/// Write the bundle atomically. Saving the same bundle twice produces
/// byte-identical files.
pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<(), DataError> {
    let bytes = encode_bundle(bundle)?;
    container::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle, DataError> {
    let bytes = container::read_file(path)?;
    let c = container::decode(path, &bytes, MAGIC, "dataset bundle", BUNDLE_SCHEMA_VERSION)?;
    let header_err = |reason: String| {
        DataError::Container(ContainerError::Header {
            path: path.to_path_buf(),
            reason,
        })
    };
    let h: BundleHeader =
        serde_json::from_slice(&c.header).map_err(|e| header_err(e.to_string()))?;
    let mut reader = PayloadReader::new(&c.payload);
    let mut read_split = |list: &[SampleEntry]| -> Result<Vec<SequenceSample>, DataError> {
        list.iter()
            .map(|e| {
                let mut matrix = |rows: usize| -> Result<Array2<f64>, DataError> {
                    let data = reader
                        .f64s(rows * h.features)
                        .ok_or_else(|| header_err("payload shorter than header declares".into()))?;
                    Array2::from_shape_vec((rows, h.features), data)
                        .map_err(|e| DataError::Shape(e.to_string()))
                };
                let key = matrix(h.key_len)?;
                let value = matrix(h.value_len)?;
                Ok(SequenceSample {
                    key,
                    value,
                    label: e.label,
                    pattern_id: e.pattern_id,
                    sample_id: e.sample_id,
                })
            })
            .collect()
    };
    let d_tr = read_split(&h.d_tr)?;
    let d_v = read_split(&h.d_v)?;
    let d_nc = read_split(&h.d_nc)?;
    let d_c = read_split(&h.d_c)?;
    if !reader.is_exhausted() {
        return Err(header_err("payload longer than header declares".into()));
    }
    let bundle = DatasetBundle {
        d_tr,
        d_v,
        d_nc,
        d_c,
        scaler: h.scaler,
        meta: h.meta,
    };
    bundle.validate()?;
    Ok(bundle)
}
