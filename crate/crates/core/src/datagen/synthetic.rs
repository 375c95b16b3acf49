use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    fit_scaler, mark_copyrighted, BundleMeta, DataError, DataSource, DatasetBundle, Label,
    SequenceSample,
};

/// Distance between the mean vectors of any two distinct patterns.
pub const PATTERN_SEPARATION: f64 = 8.0;
/// Distance between the training and non-member pattern means in overlap mode.
pub const OVERLAP_DISTANCE: f64 = 0.5;
/// Offset between the first-half and second-half means within a pattern.
pub const HALF_SHIFT: f64 = 3.0;

pub const PATTERN_TRAIN: u32 = 1;
pub const PATTERN_VALIDATION: u32 = 2;
pub const PATTERN_NONMEMBER: u32 = 3;

/// Parameters of one two-part Gaussian pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPatternSpec {
    pub mean_first: Vec<f64>,
    pub mean_second: Vec<f64>,
    pub cov_first: Array2<f64>,
    pub cov_second: Array2<f64>,
    pub pattern_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_per_subset: usize,
    pub n_copyrighted: usize,
    pub features: usize,
    pub seq_len: usize,
    pub overlap: bool,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.n_per_subset == 0 || self.n_copyrighted == 0 {
            return bad("subset sizes must be positive");
        }
        if self.features == 0 || self.seq_len == 0 {
            return bad("features and seq_len must be positive");
        }
        if self.n_copyrighted > self.n_per_subset {
            return bad("n_copyrighted exceeds n_per_subset");
        }
        if self.seq_len % 2 != 0 {
            return bad("seq_len must be even");
        }
        Ok(())
    }
}

/// Orthonormal directions built from sign patterns (all-ones, alternating,
/// pairs), dropping any that collapse after Gram-Schmidt.
fn sign_directions(features: usize) -> Vec<Array1<f64>> {
    let raw: [Box<dyn Fn(usize) -> f64>; 3] = [
        Box::new(|_| 1.0),
        Box::new(|i| if i % 2 == 0 { 1.0 } else { -1.0 }),
        Box::new(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }),
    ];
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for gen in raw.iter() {
        let mut v = Array1::from_shape_fn(features, |i| gen(i));
        for b in &basis {
            let p = v.dot(b);
            v.scaled_add(-p, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            basis.push(v / norm);
        }
    }
    basis
}

/// The three patterns used for `d_tr`, `d_v` and `d_nc`, in that order.
///
/// Non-overlap mode puts the three first-half means on an equilateral
/// triangle of side [`PATTERN_SEPARATION`] (collinear when there is a single
/// feature); overlap mode moves the non-member pattern to
/// [`OVERLAP_DISTANCE`] from the training pattern. Second-half means are the
/// first-half means plus a common [`HALF_SHIFT`] offset. Covariances are
/// the identity.
pub fn pattern_specs(features: usize, overlap: bool) -> [GaussianPatternSpec; 3] {
    let dirs = sign_directions(features);
    let a = dirs[0].clone();
    let b = dirs.get(1).cloned();
    let shift_dir = dirs.get(2).cloned().unwrap_or_else(|| a.clone());

    let first_tr = Array1::<f64>::zeros(features);
    let first_v = &a * PATTERN_SEPARATION;
    let first_nc = match (&b, overlap) {
        (Some(b), false) => (&a * 0.5 + b * (3f64.sqrt() / 2.0)) * PATTERN_SEPARATION,
        (None, false) => &a * -PATTERN_SEPARATION,
        (Some(b), true) => b * OVERLAP_DISTANCE,
        (None, true) => &a * -OVERLAP_DISTANCE,
    };
    let eye = Array2::<f64>::eye(features);
    let make = |first: Array1<f64>, id: u32| GaussianPatternSpec {
        mean_second: (&first + &(&shift_dir * HALF_SHIFT)).to_vec(),
        mean_first: first.to_vec(),
        cov_first: eye.clone(),
        cov_second: eye.clone(),
        pattern_id: id,
    };
    [
        make(first_tr, PATTERN_TRAIN),
        make(first_v, PATTERN_VALIDATION),
        make(first_nc, PATTERN_NONMEMBER),
    ]
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
/// Zero pivots (singular directions) yield zero columns.
fn cholesky_psd(cov: &Array2<f64>) -> Result<Array2<f64>, DataError> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(DataError::InvalidConfig("covariance must be square".into()));
    }
    let tol = 1e-10 * cov.diag().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for i in 0..n {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > tol {
                return Err(DataError::InvalidConfig("covariance is not symmetric".into()));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = cov[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d < -tol {
            return Err(DataError::InvalidConfig(
                "covariance is not positive semi-definite".into(),
            ));
        }
        let d = d.max(0.0).sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = cov[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = if d > 0.0 { s / d } else { 0.0 };
        }
    }
    Ok(l)
}

struct PatternSampler {
    mean_first: Array1<f64>,
    mean_second: Array1<f64>,
    chol_first: Array2<f64>,
    chol_second: Array2<f64>,
}

impl PatternSampler {
    fn new(spec: &GaussianPatternSpec) -> Result<Self, DataError> {
        Ok(Self {
            mean_first: Array1::from(spec.mean_first.clone()),
            mean_second: Array1::from(spec.mean_second.clone()),
            chol_first: cholesky_psd(&spec.cov_first)?,
            chol_second: cholesky_psd(&spec.cov_second)?,
        })
    }

    /// `[seq_len x F]` with i.i.d. rows: first half from the first Gaussian,
    /// second half from the second.
    fn draw<R: Rng>(&self, rng: &mut R, seq_len: usize) -> Array2<f64> {
        let f = self.mean_first.len();
        let half = seq_len / 2;
        let mut out = Array2::<f64>::zeros((seq_len, f));
        for t in 0..seq_len {
            let (mean, chol) = if t < half {
                (&self.mean_first, &self.chol_first)
            } else {
                (&self.mean_second, &self.chol_second)
            };
            let z = Array1::from_shape_fn(f, |_| rng.sample::<f64, _>(StandardNormal));
            let x = mean + &chol.dot(&z);
            out.row_mut(t).assign(&x);
        }
        out
    }
}

/// Generate the synthetic bundle: one pattern per subset, `n_per_subset`
/// sequences each, and `n_copyrighted` members drawn uniformly from `d_tr`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle, DataError> {
    cfg.validate()?;
    let specs = pattern_specs(cfg.features, cfg.overlap);
    let samplers = specs
        .iter()
        .map(PatternSampler::new)
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n = cfg.n_per_subset;
    let mut splits: Vec<Vec<SequenceSample>> = Vec::with_capacity(3);
    for (subset, (sampler, spec)) in samplers.iter().zip(&specs).enumerate() {
        let label = if spec.pattern_id == PATTERN_NONMEMBER {
            Label::NonmemberCopyrighted
        } else {
            Label::None
        };
        let split = (0..n)
            .map(|i| {
                let seq = sampler.draw(&mut rng, cfg.seq_len);
                let id = (subset * n + i) as u64;
                SequenceSample::from_sequence(&seq, id, label, Some(spec.pattern_id))
            })
            .collect();
        splits.push(split);
    }
    let d_nc = splits.pop().unwrap();
    let d_v = splits.pop().unwrap();
    let mut d_tr = splits.pop().unwrap();

    let chosen = rand::seq::index::sample(&mut rng, n, cfg.n_copyrighted).into_vec();
    let d_c = mark_copyrighted(&mut d_tr, &chosen);
    let scaler = fit_scaler(&d_tr)?;

    Ok(DatasetBundle {
        d_tr,
        d_v,
        d_nc,
        d_c,
        scaler,
        meta: BundleMeta {
            source: DataSource::Synthetic,
            seed: cfg.seed,
            overlap: cfg.overlap,
            features: cfg.features,
            seq_len: cfg.seq_len,
            n_per_subset: n,
            n_copyrighted: cfg.n_copyrighted,
            n_clusters: None,
            copyright_fraction: None,
            feature_names: (0..cfg.features).map(|i| format!("f{i}")).collect(),
            dropped_features: Vec::new(),
        },
    })
}
