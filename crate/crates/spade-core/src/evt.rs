//! Generalized Pareto primitives and Peaks-Over-Threshold tail models.
//!
//! The Generalized Pareto Distribution (GPD) models exceedances over a high
//! threshold:
//!
//! ```text
//! F(z) = 1 - exp(-(z - mu) / sigma)                   if xi = 0
//!      = 1 - (1 + xi (z - mu) / sigma)^(-1/xi)        otherwise
//! ```
//!
//! `xi` is the extreme value index: `xi > 0` heavy tail, `xi = 0` exponential
//! tail, `xi < 0` bounded tail with upper endpoint `mu - sigma / xi`.
//!
//! A [`PotTailModel`] combines the empirical CDF below the threshold with a
//! GPD fitted by maximum likelihood to the strict exceedances above it, so it
//! serves a probability for every finite input. Lower-tail models (minima)
//! run the identical pipeline on negated samples and store every field on the
//! negated scale.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpadeError};
use crate::util::nearest_rank;

/// `|xi|` below this routes to the exponential (`xi = 0`) branch.
pub const XI_ZERO_EPS: f64 = 1e-9;

/// Minimum number of strict exceedances for a meaningful GPD fit.
pub const MIN_EXCEEDANCES: usize = 10;

// Optimizer box, enforced as an objective penalty.
const XI_MIN: f64 = -5.0;
const XI_MAX: f64 = 5.0;
const SIGMA_MIN: f64 = 1e-12;
const SIGMA_MAX: f64 = 1e12;

// Simplex descent controls.
const SIMPLEX_TOL: f64 = 1e-10;
const SIMPLEX_MAX_ITERS: usize = 10_000;
const SIMPLEX_STEP: f64 = 0.1;

/// Parameters of a Generalized Pareto distribution.
///
/// Exceedance fits keep `mu = 0` (the location is the threshold); the field
/// exists for the three-parameter form used in direct CDF evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    /// Shape (extreme value index).
    pub xi: f64,
    /// Scale, strictly positive.
    pub sigma: f64,
    /// Location.
    pub mu: f64,
}

impl GpdParams {
    /// Validated constructor.
    pub fn new(xi: f64, sigma: f64, mu: f64) -> Result<Self> {
        let p = GpdParams { xi, sigma, mu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.xi.is_finite() || !self.sigma.is_finite() || !self.mu.is_finite() {
            return Err(SpadeError::InvalidParameter(
                "GPD parameters must be finite".into(),
            ));
        }
        if self.sigma <= 0.0 {
            return Err(SpadeError::InvalidParameter(format!(
                "GPD sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// GPD cumulative distribution function.
///
/// Returns 0 for `z <= mu`; for `xi < 0` returns exactly 1 at and beyond the
/// upper endpoint `mu - sigma / xi`.
pub fn gpd_cdf(params: &GpdParams, z: f64) -> f64 {
    let y = z - params.mu;
    if y <= 0.0 {
        return 0.0;
    }
    if params.xi.abs() < XI_ZERO_EPS {
        1.0 - (-y / params.sigma).exp()
    } else {
        let arg = 1.0 + params.xi * y / params.sigma;
        if arg <= 0.0 {
            1.0
        } else {
            1.0 - arg.powf(-1.0 / params.xi)
        }
    }
}

/// GPD log-density; negative infinity outside the support.
pub fn gpd_logpdf(params: &GpdParams, z: f64) -> f64 {
    let y = z - params.mu;
    if y < 0.0 {
        return f64::NEG_INFINITY;
    }
    if params.xi.abs() < XI_ZERO_EPS {
        -params.sigma.ln() - y / params.sigma
    } else {
        let arg = 1.0 + params.xi * y / params.sigma;
        if arg <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -params.sigma.ln() - (1.0 / params.xi + 1.0) * arg.ln()
        }
    }
}

/// GPD quantile (inverse CDF) for `0 <= p < 1`.
pub fn gpd_quantile(params: &GpdParams, p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(SpadeError::InvalidProbability(p));
    }
    let q = if params.xi.abs() < XI_ZERO_EPS {
        -params.sigma * (1.0 - p).ln()
    } else {
        params.sigma * ((1.0 - p).powf(-params.xi) - 1.0) / params.xi
    };
    Ok(params.mu + q)
}

/// Generalized Extreme Value CDF (diagnostic; the detection pipeline fits
/// GPD tails, not block maxima).
pub fn gev_cdf(xi: f64, mu: f64, sigma: f64, z: f64) -> f64 {
    debug_assert!(sigma > 0.0);
    let s = (z - mu) / sigma;
    if xi.abs() < XI_ZERO_EPS {
        (-(-s).exp()).exp()
    } else {
        let arg = 1.0 + xi * s;
        if arg <= 0.0 {
            // Below the lower endpoint for xi > 0, above the upper for xi < 0.
            if xi > 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            (-arg.powf(-1.0 / xi)).exp()
        }
    }
}

/// Nearest-rank empirical quantile used as POT threshold.
///
/// Returns the `ceil(q * n)`-th order statistic and requires at least
/// [`MIN_EXCEEDANCES`] samples strictly above it.
pub fn select_threshold(samples: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(SpadeError::InvalidProbability(q));
    }
    if samples.is_empty() {
        return Err(SpadeError::TooFewExceedances {
            count: 0,
            needed: MIN_EXCEEDANCES,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    threshold_from_sorted(&sorted, q)
}

fn threshold_from_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    let rank = nearest_rank(q, sorted.len());
    let t = sorted[rank - 1];
    let count = sorted.len() - sorted.partition_point(|&s| s <= t);
    if count < MIN_EXCEEDANCES {
        return Err(SpadeError::TooFewExceedances {
            count,
            needed: MIN_EXCEEDANCES,
        });
    }
    Ok(t)
}

/// Negative GPD log-likelihood on exceedances, parametrized by
/// `(xi, ln sigma)`. Returns infinity outside the admissible box or support.
fn gpd_nll(exceedances: &[f64], xi: f64, ln_sigma: f64) -> f64 {
    if !(XI_MIN..=XI_MAX).contains(&xi) {
        return f64::INFINITY;
    }
    let sigma = ln_sigma.exp();
    if !(SIGMA_MIN..=SIGMA_MAX).contains(&sigma) {
        return f64::INFINITY;
    }
    let n = exceedances.len() as f64;
    let nll = if xi.abs() < XI_ZERO_EPS {
        let sum: f64 = exceedances.iter().sum();
        n * ln_sigma + sum / sigma
    } else {
        let c = 1.0 / xi + 1.0;
        let mut acc = 0.0;
        for &z in exceedances {
            let arg = 1.0 + xi * z / sigma;
            if arg <= 0.0 {
                return f64::INFINITY;
            }
            acc += arg.ln();
        }
        n * ln_sigma + c * acc
    };
    if nll.is_nan() {
        f64::INFINITY
    } else {
        nll
    }
}

struct SimplexOutcome {
    point: [f64; 2],
    value: f64,
    converged: bool,
}

/// Deterministic Nelder-Mead descent in two dimensions.
///
/// Convergence is geometric: the simplex diameter (max pairwise infinity
/// norm) must fall below `tol`. Ties in the vertex ordering break by index,
/// so identical inputs replay the identical trajectory.
fn nelder_mead_2d<F: Fn(&[f64; 2]) -> f64>(
    f: F,
    start: [f64; 2],
    tol: f64,
    max_iters: usize,
) -> SimplexOutcome {
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SHRINK: f64 = 0.5;

    let mut pts = [
        start,
        [start[0] + SIMPLEX_STEP, start[1]],
        [start[0], start[1] + SIMPLEX_STEP],
    ];
    let mut vals = [f(&pts[0]), f(&pts[1]), f(&pts[2])];

    if vals.iter().all(|v| v.is_infinite()) {
        return SimplexOutcome {
            point: start,
            value: vals[0],
            converged: false,
        };
    }

    let diameter = |pts: &[[f64; 2]; 3]| -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                d = d.max((pts[i][0] - pts[j][0]).abs());
                d = d.max((pts[i][1] - pts[j][1]).abs());
            }
        }
        d
    };

    let mut converged = false;
    for _ in 0..max_iters {
        // Order best..worst, stable in the original index on value ties.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        pts = [pts[order[0]], pts[order[1]], pts[order[2]]];
        vals = [vals[order[0]], vals[order[1]], vals[order[2]]];

        if diameter(&pts) < tol {
            converged = true;
            break;
        }

        let centroid = [
            0.5 * (pts[0][0] + pts[1][0]),
            0.5 * (pts[0][1] + pts[1][1]),
        ];
        let worst = pts[2];
        let reflected = [
            centroid[0] + ALPHA * (centroid[0] - worst[0]),
            centroid[1] + ALPHA * (centroid[1] - worst[1]),
        ];
        let fr = f(&reflected);

        if fr < vals[0] {
            let expanded = [
                centroid[0] + GAMMA * (reflected[0] - centroid[0]),
                centroid[1] + GAMMA * (reflected[1] - centroid[1]),
            ];
            let fe = f(&expanded);
            if fe < fr {
                pts[2] = expanded;
                vals[2] = fe;
            } else {
                pts[2] = reflected;
                vals[2] = fr;
            }
            continue;
        }
        if fr < vals[1] {
            pts[2] = reflected;
            vals[2] = fr;
            continue;
        }

        // Contract toward the better of the reflected and worst points.
        let anchor = if fr < vals[2] { reflected } else { worst };
        let contracted = [
            centroid[0] + RHO * (anchor[0] - centroid[0]),
            centroid[1] + RHO * (anchor[1] - centroid[1]),
        ];
        let fc = f(&contracted);
        if fc < vals[2].min(fr) {
            pts[2] = contracted;
            vals[2] = fc;
            continue;
        }

        // Shrink toward the best vertex.
        for i in 1..3 {
            pts[i] = [
                pts[0][0] + SHRINK * (pts[i][0] - pts[0][0]),
                pts[0][1] + SHRINK * (pts[i][1] - pts[0][1]),
            ];
            vals[i] = f(&pts[i]);
        }
    }

    let mut best = 0;
    for i in 1..3 {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    SimplexOutcome {
        point: pts[best],
        value: vals[best],
        converged,
    }
}

/// Maximum likelihood GPD fit on strict exceedances (values above the
/// threshold, shifted to start at 0).
///
/// Deterministic multi-start: every combination of
/// `xi in {-0.5, -0.2, 0, 0.2, 0.5, 1.0}` and
/// `sigma in {0.5, 1, 2} * mean(exceedances)` seeds a simplex descent on
/// `(xi, ln sigma)`; the best final point wins. The returned parameters have
/// log-likelihood at least that of every grid start.
pub fn fit_gpd_mle(exceedances: &[f64]) -> Result<GpdParams> {
    if exceedances.len() < MIN_EXCEEDANCES {
        return Err(SpadeError::TooFewExceedances {
            count: exceedances.len(),
            needed: MIN_EXCEEDANCES,
        });
    }
    if exceedances.iter().any(|z| !z.is_finite() || *z <= 0.0) {
        return Err(SpadeError::InvalidParameter(
            "exceedances must be finite and strictly positive".into(),
        ));
    }
    let first = exceedances[0];
    if exceedances.iter().all(|&z| z == first) {
        return Err(SpadeError::DegenerateSample);
    }

    let mean = exceedances.iter().sum::<f64>() / exceedances.len() as f64;
    let xi_starts = [-0.5, -0.2, 0.0, 0.2, 0.5, 1.0];
    let sigma_starts = [0.5 * mean, mean, 2.0 * mean];

    let objective = |p: &[f64; 2]| gpd_nll(exceedances, p[0], p[1]);

    let mut best: Option<(f64, [f64; 2])> = None;
    let mut any_converged = false;
    for &xi0 in &xi_starts {
        for &sigma0 in &sigma_starts {
            let outcome =
                nelder_mead_2d(objective, [xi0, sigma0.ln()], SIMPLEX_TOL, SIMPLEX_MAX_ITERS);
            if outcome.converged {
                any_converged = true;
            }
            let better = match &best {
                None => outcome.value.is_finite(),
                Some((v, _)) => outcome.value < *v,
            };
            if better {
                best = Some((outcome.value, outcome.point));
            }
        }
    }

    if !any_converged {
        return Err(SpadeError::NonConvergence);
    }
    let (_, point) = best.ok_or(SpadeError::NonConvergence)?;
    Ok(GpdParams {
        xi: point[0],
        sigma: point[1].exp(),
        mu: 0.0,
    })
}

/// Which extreme of the sample distribution a model describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    Upper,
    Lower,
}

/// A fitted Peaks-Over-Threshold tail model.
///
/// Combines the empirical CDF of the fitting sample below the threshold `t`
/// with a GPD fitted to the strict exceedances above it. For
/// `tail == TailSide::Lower` the model is fitted to negated samples and every
/// stored field (`t`, `empirical_sorted`, the GPD parameters) lives on the
/// negated scale; [`PotTailModel::tail_probability`] and
/// [`PotTailModel::tail_quantile`] negate at the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PotTailModel {
    /// Exceedance distribution, `mu = 0` (location is the threshold).
    pub params: GpdParams,
    /// POT threshold on the internal scale.
    pub t: f64,
    /// Total fitting-sample count.
    pub n: usize,
    /// Count of samples strictly above `t`.
    pub n_exceed: usize,
    pub tail: TailSide,
    /// Ascending copy of the fitting samples on the internal scale.
    pub empirical_sorted: Vec<f64>,
}

impl PotTailModel {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !self.t.is_finite() {
            return Err(SpadeError::InvalidParameter("threshold must be finite".into()));
        }
        if self.n_exceed == 0 || self.n_exceed > self.n {
            return Err(SpadeError::InvalidParameter(format!(
                "exceedance count {} out of range for n = {}",
                self.n_exceed, self.n
            )));
        }
        if self.empirical_sorted.len() != self.n {
            return Err(SpadeError::InvalidParameter(
                "empirical sample count disagrees with n".into(),
            ));
        }
        if self.empirical_sorted.iter().any(|v| !v.is_finite())
            || self.empirical_sorted.windows(2).any(|w| w[0] > w[1])
        {
            return Err(SpadeError::InvalidParameter(
                "empirical samples must be sorted ascending and finite".into(),
            ));
        }
        Ok(())
    }

    /// Composite CDF estimate at `z`.
    ///
    /// Upper-tail models return the estimated `P(Z <= z)`: the nearest-rank
    /// empirical CDF for `z <= t` and `1 - (n_exceed/n) * (1 - GPD(z - t))`
    /// above. Lower-tail models evaluate the same composite at `-z`, i.e. the
    /// probability of being at least as extreme (as small) as `z`.
    pub fn tail_probability(&self, z: f64) -> f64 {
        let x = match self.tail {
            TailSide::Upper => z,
            TailSide::Lower => -z,
        };
        self.internal_cdf(x)
    }

    fn internal_cdf(&self, x: f64) -> f64 {
        if x <= self.t {
            self.empirical_sorted.partition_point(|&s| s <= x) as f64 / self.n as f64
        } else {
            let rate = self.n_exceed as f64 / self.n as f64;
            1.0 - rate * (1.0 - gpd_cdf(&self.params, x - self.t))
        }
    }

    /// Composite quantile, the inverse of [`Self::tail_probability`].
    ///
    /// Probabilities above `1 - n_exceed/n` invert the GPD branch, the rest
    /// fall back to the nearest-rank empirical quantile. Lower-tail models
    /// return `tail_quantile(p)` as the value the variable stays above with
    /// probability `p`.
    pub fn tail_quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(SpadeError::InvalidProbability(p));
        }
        let rate = self.n_exceed as f64 / self.n as f64;
        let x = if p > 1.0 - rate {
            // Map back to the exceedance distribution; clamp shields the
            // junction from rounding just below zero.
            let inner = 1.0 - self.n as f64 * (1.0 - p) / self.n_exceed as f64;
            self.t + gpd_quantile(&self.params, inner.max(0.0))?
        } else {
            let rank = nearest_rank(p, self.n);
            self.empirical_sorted[rank - 1]
        };
        Ok(match self.tail {
            TailSide::Upper => x,
            TailSide::Lower => -x,
        })
    }

    /// Fraction of fitting samples strictly above the threshold.
    pub fn exceedance_rate(&self) -> f64 {
        self.n_exceed as f64 / self.n as f64
    }
}

/// Fit a POT tail model: select the threshold at quantile `q`, then fit the
/// GPD to the strict exceedances. `TailSide::Lower` runs the identical
/// pipeline on negated samples.
pub fn pot_fit(samples: &[f64], q: f64, tail: TailSide) -> Result<PotTailModel> {
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(SpadeError::InvalidParameter(
            "tail fitting samples must be finite".into(),
        ));
    }
    let mut internal: Vec<f64> = match tail {
        TailSide::Upper => samples.to_vec(),
        TailSide::Lower => samples.iter().map(|s| -s).collect(),
    };
    internal.sort_unstable_by(f64::total_cmp);
    if internal.is_empty() {
        return Err(SpadeError::TooFewExceedances {
            count: 0,
            needed: MIN_EXCEEDANCES,
        });
    }
    let t = threshold_from_sorted(&internal, q)?;
    let exceedances: Vec<f64> = internal
        .iter()
        .filter(|&&s| s > t)
        .map(|&s| s - t)
        .collect();
    let params = fit_gpd_mle(&exceedances)?;
    Ok(PotTailModel {
        params,
        t,
        n: internal.len(),
        n_exceed: exceedances.len(),
        tail,
        empirical_sorted: internal,
    })
}
