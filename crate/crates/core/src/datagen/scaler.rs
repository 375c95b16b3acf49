use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{DataError, SequenceSample};

/// Spread below which a feature is treated as constant.
const MIN_SPREAD: f64 = 1e-12;

/// Per-feature affine normalization `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Fit shift (mean) and scale (population std) over every timestep of the
/// keys and values of `samples`.
pub fn fit_scaler<'a, I>(samples: I) -> Result<Scaler, DataError>
where
    I: IntoIterator<Item = &'a SequenceSample>,
{
    let mut sum: Option<Array1<f64>> = None;
    let mut sum_sq: Option<Array1<f64>> = None;
    let mut count = 0usize;
    // Two passes would be more accurate for huge offsets; shift by the first
    // row to keep the single pass well conditioned.
    let mut origin: Option<Array1<f64>> = None;
    for s in samples {
        for block in [&s.key, &s.value] {
            let o = origin.get_or_insert_with(|| block.row(0).to_owned());
            let centered = block - &o.view().insert_axis(Axis(0));
            let rs = centered.sum_axis(Axis(0));
            let rq = centered.mapv(|x| x * x).sum_axis(Axis(0));
            match (&mut sum, &mut sum_sq) {
                (Some(a), Some(b)) => {
                    if a.len() != rs.len() {
                        return Err(DataError::Shape("feature count differs across samples".into()));
                    }
                    *a += &rs;
                    *b += &rq;
                }
                _ => {
                    sum = Some(rs);
                    sum_sq = Some(rq);
                }
            }
            count += block.nrows();
        }
    }
    let (sum, sum_sq, origin) = match (sum, sum_sq, origin) {
        (Some(a), Some(b), Some(o)) if count > 0 => (a, b, o),
        _ => return Err(DataError::EmptyInput),
    };
    let n = count as f64;
    let mut shift = Vec::with_capacity(sum.len());
    let mut scale = Vec::with_capacity(sum.len());
    for ((s, q), o) in sum.iter().zip(sum_sq.iter()).zip(origin.iter()) {
        let mean_c = s / n;
        let var = (q / n - mean_c * mean_c).max(0.0);
        let sd = var.sqrt();
        shift.push(o + mean_c);
        scale.push(if sd > MIN_SPREAD * (1.0 + (o + mean_c).abs()) { sd } else { 1.0 });
    }
    Ok(Scaler { shift, scale })
}

impl Scaler {
    pub fn identity(features: usize) -> Self {
        Self {
            shift: vec![0.0; features],
            scale: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.shift.len()
    }

    pub fn apply_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, sh), sc) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - sh) / sc;
            }
        }
        out
    }

    pub fn invert_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for ((v, sh), sc) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = *v * sc + sh;
            }
        }
        out
    }

    pub fn apply(&self, s: &SequenceSample) -> SequenceSample {
        SequenceSample {
            key: self.apply_matrix(&s.key),
            value: self.apply_matrix(&s.value),
            ..s.clone()
        }
    }

    pub fn invert(&self, s: &SequenceSample) -> SequenceSample {
        SequenceSample {
            key: self.invert_matrix(&s.key),
            value: self.invert_matrix(&s.value),
            ..s.clone()
        }
    }
}
