use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cluster::average_linkage;
use super::{
    fit_scaler, mark_copyrighted, BundleMeta, DataError, DataSource, DatasetBundle, Label,
    SequenceSample,
};

/// A numeric table read from CSV: one row per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub feature_names: Vec<String>,
    pub data: Array2<f64>,
    /// Rows dropped because they contained a missing value.
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub seq_len: usize,
    pub n_clusters: usize,
    pub copyright_fraction: f64,
    pub seed: u64,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty()
        || c.eq_ignore_ascii_case("nan")
        || c.eq_ignore_ascii_case("null")
        || c.eq_ignore_ascii_case("na")
        || c.eq_ignore_ascii_case("none")
}

/// Read a CSV with a header row of feature names. Rows holding a missing
/// value are dropped; any other non-numeric cell is an error.
pub fn read_csv_table(path: &Path) -> Result<CsvTable, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let feature_names: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let width = feature_names.len();
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    let mut dropped_rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().any(is_missing) {
            dropped_rows += 1;
            continue;
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                row: i + 1,
                column: feature_names[j].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let data = Array2::from_shape_vec((rows, width), values)
        .map_err(|e| DataError::Shape(e.to_string()))?;
    Ok(CsvTable {
        feature_names,
        data,
        dropped_rows,
    })
}

/// Z-scored per-window (mean, std) of every feature.
fn window_summaries(windows: &[Array2<f64>]) -> Array2<f64> {
    let f = windows[0].ncols();
    let mut out = Array2::<f64>::zeros((windows.len(), 2 * f));
    for (i, w) in windows.iter().enumerate() {
        let mean = w.mean_axis(Axis(0)).unwrap();
        let sd = w.std_axis(Axis(0), 0.0);
        out.slice_mut(s![i, ..f]).assign(&mean);
        out.slice_mut(s![i, f..]).assign(&sd);
    }
    for mut col in out.columns_mut() {
        let m = col.mean().unwrap_or(0.0);
        let sd = col.std(0.0);
        col.mapv_inplace(|x| if sd > 0.0 { (x - m) / sd } else { x - m });
    }
    out
}

/// Cut `table` into non-overlapping windows, cluster them, and deal each
/// cluster's windows round-robin into `d_tr`, `d_v` and `d_nc`. `d_c` is a
/// `copyright_fraction` sample of `d_tr`.
pub fn window_and_split(
    table: &Array2<f64>,
    feature_names: &[String],
    cfg: &WindowConfig,
) -> Result<DatasetBundle, DataError> {
    if cfg.seq_len < 2 || cfg.seq_len % 2 != 0 {
        return Err(DataError::InvalidConfig("seq_len must be even and at least 2".into()));
    }
    if !(cfg.copyright_fraction > 0.0 && cfg.copyright_fraction < 1.0) {
        return Err(DataError::InvalidConfig("copyright_fraction must lie in (0, 1)".into()));
    }
    if cfg.n_clusters == 0 {
        return Err(DataError::InvalidConfig("n_clusters must be positive".into()));
    }
    if feature_names.len() != table.ncols() {
        return Err(DataError::Shape(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            table.ncols()
        )));
    }
    let needed = 3 * cfg.seq_len;
    if table.nrows() < needed {
        return Err(DataError::TooShort {
            rows: table.nrows(),
            needed,
        });
    }
    if table.iter().any(|x| !x.is_finite()) {
        return Err(DataError::Shape("table holds non-finite values".into()));
    }

    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in table.columns().into_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|&x| x == first) {
            log::warn!("dropping constant feature {:?}", feature_names[j]);
            dropped.push(feature_names[j].clone());
        } else {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(DataError::AllFeaturesConstant);
    }
    let data = table.select(Axis(1), &keep);
    let names: Vec<String> = keep.iter().map(|&j| feature_names[j].clone()).collect();

    let n_windows = data.nrows() / cfg.seq_len;
    let windows: Vec<Array2<f64>> = (0..n_windows)
        .map(|w| data.slice(s![w * cfg.seq_len..(w + 1) * cfg.seq_len, ..]).to_owned())
        .collect();
    let n_clusters = cfg.n_clusters.min(n_windows);
    let labels = average_linkage(&window_summaries(&windows), n_clusters);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (w, &c) in labels.iter().enumerate() {
        members[c].push(w);
    }
    let mut assignment = vec![0usize; n_windows];
    let mut turn = 0usize;
    for cluster in members.iter_mut() {
        cluster.shuffle(&mut rng);
        for &w in cluster.iter() {
            assignment[w] = turn % 3;
            turn += 1;
        }
    }

    let mut splits: [Vec<SequenceSample>; 3] = Default::default();
    for (w, window) in windows.iter().enumerate() {
        let subset = assignment[w];
        let label = if subset == 2 {
            Label::NonmemberCopyrighted
        } else {
            Label::None
        };
        splits[subset].push(SequenceSample::from_sequence(window, w as u64, label, None));
    }
    let [mut d_tr, d_v, d_nc] = splits;

    let n_c = ((cfg.copyright_fraction * d_tr.len() as f64).round() as usize).clamp(1, d_tr.len());
    let chosen = rand::seq::index::sample(&mut rng, d_tr.len(), n_c).into_vec();
    let d_c = mark_copyrighted(&mut d_tr, &chosen);
    let scaler = fit_scaler(&d_tr)?;

    Ok(DatasetBundle {
        meta: BundleMeta {
            source: DataSource::Csv,
            seed: cfg.seed,
            overlap: false,
            features: names.len(),
            seq_len: cfg.seq_len,
            n_per_subset: d_tr.len(),
            n_copyrighted: d_c.len(),
            n_clusters: Some(n_clusters),
            copyright_fraction: Some(cfg.copyright_fraction),
            feature_names: names,
            dropped_features: dropped,
        },
        d_tr,
        d_v,
        d_nc,
        d_c,
        scaler,
    })
}
