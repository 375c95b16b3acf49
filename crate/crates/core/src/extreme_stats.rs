//! Generalized Pareto fitting, quantiles and threshold selection for the
//! pruning step, plus the patience counter that gates it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest sample accepted by [`fit_gpd`].
pub const MIN_FIT_SIZE: usize = 30;
/// Shape parameter search range.
pub const XI_MIN: f64 = -0.5;
pub const XI_MAX: f64 = 1.0;
/// Default reference quantile for the pruning threshold.
pub const DEFAULT_THRESHOLD_QUANTILE: f64 = 0.8;

const XI_ZERO: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {min} samples, got {got}")]
    TooFew { got: usize, min: usize },
    #[error("zero spread: all samples are equal")]
    ZeroSpread,
    #[error("sample contains non-finite values")]
    NonFinite,
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
}

/// Generalized Pareto parameters. `mu` is the location (lower end of the
/// support); for `xi < 0` the support is `[mu, mu - sigma / xi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub xi: f64,
    pub sigma: f64,
    pub mu: f64,
    pub n: usize,
}

impl GpdFit {
    pub fn cdf(&self, x: f64) -> f64 {
        let y = (x - self.mu) / self.sigma;
        if y <= 0.0 {
            return 0.0;
        }
        if self.xi.abs() < XI_ZERO {
            1.0 - (-y).exp()
        } else {
            let t = 1.0 + self.xi * y;
            if t <= 0.0 {
                1.0
            } else {
                1.0 - t.powf(-1.0 / self.xi)
            }
        }
    }

    /// Log-likelihood of `x` (already shifted by `mu`) under `(xi, sigma)`.
    fn log_likelihood(xi: f64, sigma: f64, shifted: &[f64]) -> f64 {
        let n = shifted.len() as f64;
        if xi.abs() < XI_ZERO {
            return -n * sigma.ln() - shifted.iter().sum::<f64>() / sigma;
        }
        let mut acc = 0.0;
        for &y in shifted {
            let t = 1.0 + xi * y / sigma;
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += t.ln();
        }
        -n * sigma.ln() - (1.0 + 1.0 / xi) * acc
    }
}

/// Scale maximizing the likelihood for a fixed shape: the root of
/// `mean(y / (sigma + xi*y)) = 1 / (1 + xi)`, whose left side is strictly
/// decreasing in `sigma` over the admissible range.
fn profile_sigma(xi: f64, shifted: &[f64], y_max: f64, y_mean: f64) -> f64 {
    if xi.abs() < XI_ZERO {
        return y_mean;
    }
    let target = 1.0 / (1.0 + xi);
    let g = |sigma: f64| {
        shifted.iter().map(|&y| y / (sigma + xi * y)).sum::<f64>() / shifted.len() as f64
    };
    let mut lo = if xi < 0.0 { -xi * y_max } else { 0.0 };
    lo = lo.max(1e-300);
    let mut hi = (y_max.max(y_mean) * 4.0).max(lo * 2.0);
    while g(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // hi always satisfies the admissibility bound strictly.
    hi
}

fn method_of_moments(mean: f64, var: f64) -> (f64, f64) {
    let ratio = mean * mean / var;
    let xi = (0.5 * (1.0 - ratio)).clamp(XI_MIN, XI_MAX);
    let sigma = (mean * (1.0 - xi)).max(f64::MIN_POSITIVE);
    (xi, sigma)
}

/// Fit a generalized Pareto distribution with location `mu = min(errors)`.
///
/// The shape is chosen by maximizing the profile likelihood over
/// `[XI_MIN, XI_MAX]` (grid scan, then golden-section refinement); the
/// method of moments is used if the likelihood search yields nothing finite.
pub fn fit_gpd(errors: &[f64]) -> Result<GpdFit, FitError> {
    if errors.len() < MIN_FIT_SIZE {
        return Err(FitError::TooFew {
            got: errors.len(),
            min: MIN_FIT_SIZE,
        });
    }
    if errors.iter().any(|x| !x.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let mu = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = errors.iter().map(|&e| e - mu).collect();
    let y_max = shifted.iter().copied().fold(0.0, f64::max);
    if y_max <= 0.0 {
        return Err(FitError::ZeroSpread);
    }
    let n = shifted.len();
    let y_mean = shifted.iter().sum::<f64>() / n as f64;

    let profile = |xi: f64| {
        let sigma = profile_sigma(xi, &shifted, y_max, y_mean);
        (GpdFit::log_likelihood(xi, sigma, &shifted), sigma)
    };

    const GRID: usize = 150;
    let step = (XI_MAX - XI_MIN) / GRID as f64;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=GRID {
        let xi = XI_MIN + step * i as f64;
        let (ll, sigma) = profile(xi);
        if ll.is_finite() && best.map_or(true, |(b, _, _)| ll > b) {
            best = Some((ll, xi, sigma));
        }
    }

    let (xi, sigma) = match best {
        Some((_, xi0, _)) => {
            let invphi = (5f64.sqrt() - 1.0) / 2.0;
            let (mut a, mut b) = ((xi0 - step).max(XI_MIN), (xi0 + step).min(XI_MAX));
            let mut c = b - invphi * (b - a);
            let mut d = a + invphi * (b - a);
            let mut fc = profile(c).0;
            let mut fd = profile(d).0;
            for _ in 0..40 {
                if fc >= fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - invphi * (b - a);
                    fc = profile(c).0;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + invphi * (b - a);
                    fd = profile(d).0;
                }
            }
            let refined = 0.5 * (a + b);
            let (ll_r, sigma_r) = profile(refined);
            let (ll0, sigma0) = profile(xi0);
            if ll_r.is_finite() && ll_r >= ll0 {
                (refined, sigma_r)
            } else {
                (xi0, sigma0)
            }
        }
        None => {
            let var = shifted.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
            log::debug!("gpd likelihood search failed, using method of moments");
            method_of_moments(y_mean, var)
        }
    };
    Ok(GpdFit { xi, sigma, mu, n })
}

/// Quantile function of the fitted distribution.
pub fn gpd_quantile(fit: &GpdFit, p: f64) -> Result<f64, FitError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FitError::Probability(p));
    }
    Ok(if fit.xi.abs() < XI_ZERO {
        fit.mu - fit.sigma * (1.0 - p).ln()
    } else {
        fit.mu + fit.sigma / fit.xi * ((1.0 - p).powf(-fit.xi) - 1.0)
    })
}

/// Element of `errors` closest to the fitted `p`-quantile; ties go to the
/// smaller error.
pub fn select_threshold(errors: &[f64], p: f64) -> Result<f64, FitError> {
    let fit = fit_gpd(errors)?;
    select_threshold_with_fit(errors, &fit, p)
}

pub fn select_threshold_with_fit(errors: &[f64], fit: &GpdFit, p: f64) -> Result<f64, FitError> {
    let q = gpd_quantile(fit, p)?;
    errors
        .iter()
        .copied()
        .min_by(|a, b| {
            (a - q)
                .abs()
                .total_cmp(&(b - q).abs())
                .then(a.total_cmp(b))
        })
        .ok_or(FitError::TooFew { got: 0, min: 1 })
}

/// Patience counter: signals after `alpha` consecutive calls that fail to
/// improve the best loss by more than `omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatienceState {
    pub best_loss: f64,
    pub stall_count: usize,
    pub alpha: usize,
    pub omega: f64,
}

impl PatienceState {
    pub fn new(alpha: usize, omega: f64) -> Self {
        assert!(alpha >= 1, "patience alpha must be at least 1");
        assert!(omega >= 0.0, "patience omega must be non-negative");
        Self {
            best_loss: f64::INFINITY,
            stall_count: 0,
            alpha,
            omega,
        }
    }

    /// A counter that never fires.
    pub fn never() -> Self {
        Self::new(usize::MAX, 0.0)
    }

    /// Record one loss; returns true when patience has run out. The stall
    /// counter resets after firing but the best loss is kept.
    pub fn step(&mut self, current_loss: f64) -> bool {
        if self.best_loss - current_loss > self.omega {
            self.best_loss = current_loss;
            self.stall_count = 0;
            return false;
        }
        self.stall_count += 1;
        if self.stall_count >= self.alpha {
            self.stall_count = 0;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Inverse-CDF sampling, independent of `gpd_quantile`.
    pub(crate) fn sample_gpd(xi: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if xi == 0.0 {
                    -sigma * (1.0 - u).ln()
                } else {
                    sigma * ((1.0 - u).powf(-xi) - 1.0) / xi
                }
            })
            .collect()
    }

    #[test]
    fn recovers_exponential() {
        let x = sample_gpd(0.0, 1.0, 10_000, 1);
        let f = fit_gpd(&x).unwrap();
        assert!((-0.1..=0.1).contains(&f.xi), "{f:?}");
        assert!((0.9..=1.1).contains(&f.sigma), "{f:?}");
    }

    #[test]
    fn recovers_heavy_tail() {
        let x = sample_gpd(0.5, 2.0, 10_000, 2);
        let f = fit_gpd(&x).unwrap();
        assert!((0.4..=0.6).contains(&f.xi), "{f:?}");
        assert!((1.7..=2.3).contains(&f.sigma), "{f:?}");
    }

    #[test]
    fn recovers_bounded_tail() {
        let x = sample_gpd(-0.3, 1.0, 10_000, 3);
        let f = fit_gpd(&x).unwrap();
        assert!((f.xi + 0.3).abs() < 0.1, "{f:?}");
        let upper = f.mu - f.sigma / f.xi;
        assert!(x.iter().all(|&v| v <= upper + 1e-9));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit_gpd(&[2.0; 40]), Err(FitError::ZeroSpread));
        assert!(matches!(fit_gpd(&[1.0; 29]), Err(FitError::TooFew { got: 29, .. })));
        let mut x = sample_gpd(0.0, 1.0, 50, 4);
        x[3] = f64::NAN;
        assert_eq!(fit_gpd(&x), Err(FitError::NonFinite));
    }

    #[test]
    fn closed_form_quantiles() {
        let exp = GpdFit { xi: 0.0, sigma: 1.0, mu: 0.0, n: 100 };
        assert!((gpd_quantile(&exp, 0.8).unwrap() - 1.609_437_912_434_100_3).abs() < 1e-12);
        let heavy = GpdFit { xi: 0.5, ..exp };
        assert!((gpd_quantile(&heavy, 0.8).unwrap() - 2.472_135_954_999_579).abs() < 1e-12);
        assert!(gpd_quantile(&heavy, 0.5).unwrap() < gpd_quantile(&heavy, 0.8).unwrap());
        assert_eq!(gpd_quantile(&exp, 1.0), Err(FitError::Probability(1.0)));
        assert_eq!(gpd_quantile(&exp, 0.0), Err(FitError::Probability(0.0)));
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &xi in &[-0.4, -0.1, 0.0, 0.3, 0.9] {
            let f = GpdFit { xi, sigma: 1.7, mu: 0.3, n: 100 };
            for &p in &[0.01, 0.2, 0.5, 0.8, 0.99] {
                let q = gpd_quantile(&f, p).unwrap();
                assert!((f.cdf(q) - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn threshold_exact_match_and_ties() {
        let fit = GpdFit { xi: 0.0, sigma: 1.0, mu: 0.0, n: 3 };
        let errs = [1.0, 1.60944, 3.0];
        assert_eq!(select_threshold_with_fit(&errs, &fit, 0.8).unwrap(), 1.60944);
        // Equidistant candidates: pick the smaller one. Both lie in the same
        // binade as q, so the offsets are exact.
        let q15 = GpdFit { xi: 0.0, sigma: 1.5 / 5f64.ln(), mu: 0.0, n: 2 };
        let q = gpd_quantile(&q15, 0.8).unwrap();
        assert!((q - 1.5).abs() < 1e-12);
        let (lo, hi) = (q - 0.25, q + 0.25);
        assert_eq!(select_threshold_with_fit(&[hi, lo], &q15, 0.8).unwrap(), lo);
    }

    #[test]
    fn threshold_near_empirical_percentile() {
        let mut x = sample_gpd(0.0, 1.0, 2_000, 5);
        let tau = select_threshold(&x, 0.8).unwrap();
        assert!(x.contains(&tau));
        x.sort_by(f64::total_cmp);
        let pct = |q: f64| x[((x.len() - 1) as f64 * q).round() as usize];
        assert!(tau >= pct(0.75) && tau <= pct(0.85), "{tau}");
        assert!((tau - pct(0.8)).abs() / pct(0.8) <= 0.15);
    }

    #[test]
    fn patience_hand_trace() {
        let mut p = PatienceState::new(2, 0.01);
        assert!(!p.step(1.0));
        assert!(!p.step(0.995));
        assert!(p.step(0.994));
        assert_eq!(p.best_loss, 1.0);
        assert_eq!(p.stall_count, 0);
    }

    #[test]
    fn patience_improving_never_fires() {
        let mut p = PatienceState::new(1, 0.1);
        for i in 0..100 {
            assert!(!p.step(100.0 - i as f64 * 0.5));
        }
    }

    #[test]
    fn patience_constant_stream_period() {
        for alpha in 1..6 {
            let mut p = PatienceState::new(alpha, 0.0);
            // The first call improves on +inf.
            assert!(!p.step(1.0));
            let fired: Vec<usize> = (1..=10 * alpha).filter(|_| p.step(1.0)).collect();
            assert_eq!(fired.len(), 10);
        }
        let mut p = PatienceState::new(3, 0.0);
        p.step(1.0);
        let pattern: Vec<bool> = (0..9).map(|_| p.step(1.0)).collect();
        assert_eq!(pattern, [false, false, true, false, false, true, false, false, true]);
    }

    #[test]
    fn never_fires() {
        let mut p = PatienceState::never();
        p.step(1.0);
        assert!((0..10_000).all(|_| !p.step(1.0)));
    }
}
