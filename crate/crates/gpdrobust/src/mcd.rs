//! Minimum Covariance Determinant (MCD) location/scatter for bivariate
//! point clouds, used to robustify Mahalanobis distances of influence
//! values.
//!
//! The MCD looks for the `h`-point subset whose covariance has minimal
//! determinant and reports that subset's mean and covariance. Outliers
//! cannot drag the fit as long as fewer than `n − h` points are corrupted.
//!
//! * small inputs (`n ≤ 25`) are solved **exactly** by enumerating all
//!   `h`-subsets — this path doubles as the correctness oracle;
//! * larger inputs use the standard random-restart concentration
//!   algorithm: start from a random small subset, then repeatedly keep the
//!   `h` points nearest in Mahalanobis distance and refit. Each such
//!   concentration step provably never increases the determinant, so every
//!   restart descends to a fixed point; the best of 500 deterministic
//!   restarts wins (ties broken by restart index).
//!
//! The raw best-subset covariance is consistency-rescaled by
//! `γ/F_{χ²₄}(q_γ)` (with `γ = h/n` and `q_γ` the `χ²₂` quantile at `γ`)
//! and then refined by the standard **reweighting step**: points within
//! the 97.5% χ²₂ Mahalanobis radius of the raw fit are refit classically,
//! with its own truncation correction. The raw half-sample subset alone,
//! while maximally robust, estimates covariance *shape* with notoriously
//! high variance; reweighting restores near-classical accuracy on clean
//! data while keeping the raw subset's resistance to outliers. For
//! bivariate data all χ² functions involved have closed forms.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::seeding::derive_seed;

/// Robust location/scatter estimate from the best `h`-point subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustCov {
    pub center: Vec2,
    pub scatter: Mat2,
    /// Subset size the estimate is based on.
    pub h: usize,
}

/// Largest input solved by exact subset enumeration.
pub const EXACT_ENUMERATION_LIMIT: usize = 25;

const RESTARTS: usize = 500;
const MAX_C_STEPS: usize = 20;
const MCD_SEED_BASE: u64 = 0x6d63645f32; // deterministic restart stream

/// Default subset size `⌈(n+3)/2⌉`: the smallest size with maximal
/// breakdown point that stays within the valid range for all `n`.
pub fn default_h(n: usize) -> usize {
    (n + 3).div_ceil(2)
}

/// Mean and (1/h)-covariance of the indexed subset.
fn subset_stats(points: &[Vec2], idx: &[usize]) -> (Vec2, Mat2) {
    let k = idx.len() as f64;
    let mut mean = Vec2::ZERO;
    for &i in idx {
        mean = mean.add(points[i]);
    }
    mean = mean.scale(1.0 / k);
    let mut cov = Mat2::ZERO;
    for &i in idx {
        let d = points[i].sub(mean);
        cov = cov.add(d.outer(d));
    }
    (mean, cov.scale(1.0 / k))
}

/// Consistency factor mapping the best-subset covariance to the full
/// covariance on clean elliptical data: `γ/F_{χ²₄}(q_γ)`, `γ = h/n`.
fn consistency_factor(h: usize, n: usize) -> f64 {
    let gamma = h as f64 / n as f64;
    if gamma >= 1.0 {
        return 1.0;
    }
    let q = -2.0 * (1.0 - gamma).ln(); // χ²₂ quantile at γ
    let f4 = 1.0 - (-q / 2.0).exp() * (1.0 + q / 2.0); // χ²₄ cdf at q
    gamma / f4
}

fn scale_of(points: &[Vec2]) -> f64 {
    points
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(0.0, f64::max)
        .max(1.0)
}

/// One concentration pass: keep the `h` points closest to the current fit
/// in Mahalanobis distance (ties by index), refit. Returns `None` when the
/// current scatter is singular, which only happens when the data near the
/// fit are rank-deficient.
fn concentrate(points: &[Vec2], mean: Vec2, cov: Mat2, h: usize) -> Option<(Vec<usize>, Vec2, Mat2)> {
    let inv = cov.inverse()?;
    let mut dist: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = p.sub(mean);
            (d.dot(inv.mul_vec(d)), i)
        })
        .collect();
    dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut idx: Vec<usize> = dist[..h].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    let (m, c) = subset_stats(points, &idx);
    Some((idx, m, c))
}

/// Concentration descent from a starting subset (any size ≥ 3). Returns
/// the fixed-point subset, its statistics and the determinant trace over
/// the `h`-subsets visited — nonincreasing, since a concentration step
/// from an `h`-subset's fit never increases the determinant. The seed
/// subset's own determinant is not comparable (different size) and is not
/// recorded.
pub(crate) fn c_step_descent(
    points: &[Vec2],
    start: &[usize],
    h: usize,
) -> (Vec<usize>, Vec2, Mat2, Vec<f64>) {
    let (mut mean, mut cov) = subset_stats(points, start);
    let mut idx: Vec<usize> = start.to_vec();
    let mut dets = Vec::new();
    if start.len() == h {
        dets.push(cov.det());
    }
    for _ in 0..MAX_C_STEPS {
        let Some((next, m, c)) = concentrate(points, mean, cov, h) else {
            break;
        };
        let stalled = next == idx;
        idx = next;
        mean = m;
        cov = c;
        dets.push(cov.det());
        if stalled {
            break;
        }
    }
    (idx, mean, cov, dets)
}

/// Exact MCD by enumerating every `h`-subset (first minimal subset in
/// lexicographic order wins).
pub(crate) fn mcd_exact(points: &[Vec2], h: usize) -> (Vec2, Mat2, f64) {
    let n = points.len();
    let mut idx: Vec<usize> = (0..h).collect();
    let mut best_det = f64::INFINITY;
    let mut best: (Vec2, Mat2) = (Vec2::ZERO, Mat2::ZERO);
    loop {
        let (mean, cov) = subset_stats(points, &idx);
        let det = cov.det();
        if det < best_det {
            best_det = det;
            best = (mean, cov);
        }
        // Advance to the next combination in lexicographic order.
        let mut i = h;
        loop {
            if i == 0 {
                return (best.0, best.1, best_det);
            }
            i -= 1;
            if idx[i] != i + n - h {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..h {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Random-restart concentration MCD with a deterministic seed stream.
pub(crate) fn mcd_restarts(points: &[Vec2], h: usize) -> (Vec2, Mat2, f64) {
    let n = points.len();
    let tiny = 1e-24 * scale_of(points).powi(4);
    let mut best_det = f64::INFINITY;
    let mut best: (Vec2, Mat2) = (Vec2::ZERO, Mat2::ZERO);
    for restart in 0..RESTARTS {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(MCD_SEED_BASE, restart as u64));
        // Seed subset: 3 distinct random points, grown until the fit is
        // nonsingular (or the whole sample is in, meaning degenerate data).
        let mut start: Vec<usize> = Vec::with_capacity(4);
        while start.len() < 3 {
            let i = rng.random_range(0..n);
            if !start.contains(&i) {
                start.push(i);
            }
        }
        let mut stats = subset_stats(points, &start);
        while stats.1.det() <= tiny && start.len() < n {
            let i = rng.random_range(0..n);
            if !start.contains(&i) {
                start.push(i);
                stats = subset_stats(points, &start);
            }
        }
        let (_, mean, cov, dets) = c_step_descent(points, &start, h);
        // An empty trace means no h-subset could be formed (the seed's fit
        // was singular at every size): fall through with the degenerate
        // seed determinant so rank-deficient data fail the final check.
        let det = dets.last().copied().unwrap_or_else(|| cov.det());
        if det < best_det {
            best_det = det;
            best = (mean, cov);
        }
    }
    (best.0, best.1, best_det)
}

/// Squared-distance cutoff for the reweighting step: χ²₂ quantile at
/// 0.975, i.e. `−2·ln(0.025)`.
const REWEIGHT_CUTOFF: f64 = 7.377758908227871;

/// Truncation correction for the reweighted covariance:
/// `0.975/F_{χ²₄}(REWEIGHT_CUTOFF)`.
fn reweight_factor() -> f64 {
    let q = REWEIGHT_CUTOFF;
    0.975 / (1.0 - (-q / 2.0).exp() * (1.0 + q / 2.0))
}

/// Minimum Covariance Determinant estimate over `h`-point subsets, with
/// the standard reweighting refinement.
///
/// Requires `n ≥ 4`, finite points and `h ∈ [⌈(n+3)/2⌉, n]` (use
/// [`default_h`] for the maximal-breakdown choice). Inputs up to
/// [`EXACT_ENUMERATION_LIMIT`] points are solved exactly; larger ones by
/// 500 deterministic random restarts. Errors when the best subset is
/// rank-deficient — the scatter would be singular. If the reweighting
/// iteration itself degenerates (possible when the points hug a
/// lower-dimensional set), the estimate keeps the single-pass reweighted
/// fit rather than failing.
pub fn mcd_cov(points: &[Vec2], h: usize) -> Result<RobustCov> {
    let n = points.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "robust covariance needs at least 4 points, got {n}"
        )));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::InvalidInput(
            "robust covariance requires finite points".into(),
        ));
    }
    let h_min = default_h(n);
    if h < h_min || h > n {
        return Err(Error::InvalidInput(format!(
            "subset size {h} outside the valid range [{h_min}, {n}]"
        )));
    }
    let (center, cov, det) = if n <= EXACT_ENUMERATION_LIMIT {
        mcd_exact(points, h)
    } else {
        mcd_restarts(points, h)
    };
    let tiny = 1e-24 * scale_of(points).powi(4);
    if !(det > tiny) {
        return Err(Error::Degenerate(format!(
            "best {h}-point subset is rank-deficient (determinant {det:.3e}); \
             the data carry no two-dimensional scatter"
        )));
    }
    // Reweighting, iterated to a fixed point: classical refit on the
    // points inside the 97.5% χ²₂ radius of the current fit. A single pass
    // inherits the raw subset's (noisy) shape through its asymmetric
    // trimming; iterating rounds the acceptance region out while far
    // outliers stay excluded, since they never re-enter the radius.
    //
    // When the points concentrate near a lower-dimensional set (for
    // example influence values, which live on a one-dimensional curve),
    // the acceptance region can contract below the cloud's support and a
    // later pass degenerates — too few points kept, or a singular refit.
    // The iteration then falls back to the single-pass reweighted
    // estimate (or the raw scaled one if even the first pass fails)
    // instead of erroring: the refinement is an accuracy improvement, not
    // a precondition.
    let raw = (center, cov.scale(consistency_factor(h, n)));
    let mut center_cur = raw.0;
    let mut scatter_cur = raw.1;
    let mut first_pass: Option<(Vec2, Mat2)> = None;
    let mut keep_prev: Vec<usize> = Vec::new();
    let mut degenerate = false;
    for _ in 0..10 {
        let Some(inv) = scatter_cur.inverse() else {
            degenerate = true;
            break;
        };
        let keep: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let d = p.sub(center_cur);
                d.dot(inv.mul_vec(d)) <= REWEIGHT_CUTOFF
            })
            .map(|(i, _)| i)
            .collect();
        if keep.len() < 4 {
            degenerate = true;
            break;
        }
        let (m, c) = subset_stats(points, &keep);
        let scatter = c.scale(reweight_factor());
        if !(scatter.det() > tiny) {
            degenerate = true;
            break;
        }
        let stalled = keep == keep_prev;
        keep_prev = keep;
        center_cur = m;
        scatter_cur = scatter;
        if first_pass.is_none() {
            first_pass = Some((m, scatter));
        }
        if stalled {
            break;
        }
    }
    if degenerate {
        (center_cur, scatter_cur) = first_pass.unwrap_or(raw);
    }
    Ok(RobustCov {
        center: center_cur,
        scatter: scatter_cur,
        h,
    })
}
