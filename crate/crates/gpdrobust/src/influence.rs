//! Optimally robust influence functions: bias-minimal (MBRE), MSE-optimal
//! for a known contamination radius (OMSE), the radius-minimax rule (RMXE),
//! and one-step estimators built from any of them.
//!
//! The contamination model is a shrinking gross-error neighborhood of the
//! parametric model with radius `ε_n = r/√n`. Within it, an estimator is
//! identified with its influence function `ψ`, constrained to the class
//! `Ψ₂ = {ψ : E ψ = 0, E ψΛᵀ = 𝟙}` of exactly Fisher-consistent influences.
//! The two optimal solutions both take the clipped-linear form
//! `Y = AΛ − a`:
//!
//! * **MSE-optimal (OMSE)** for known radius `r`: `ψ = Y·min(1, b/|Y|)`
//!   with clip height solving `r²b = E(|Y|−b)₊`; minimizes
//!   `maxMSE = trace E ψψᵀ + r²b²` over the neighborhood.
//! * **Bias-minimal (MBRE)**: `ψ = b·Y/|Y|`, reached as `r → ∞`; its
//!   constant norm `b = tr A/E|Y|` is the smallest attainable
//!   gross-error sensitivity.
//! * **Radius-minimax (RMXE)**: when `r` is only known to lie in an
//!   interval, picks the radius whose OMSE minimizes the worst relative
//!   MSE penalty over that interval.
//!
//! Multipliers are solved at the standardized point `(0, ξ, 1)` and mapped
//! to the anchor parameters by the exact equivariance of the model: the
//! score's scale coordinate obeys `Λ_β(x; u, ξ, β) = Λ_β(z; 0, ξ, 1)/β`
//! with `z = (x−u)/β`. Consequently the returned multipliers at general `β`
//! clip in the **scale-standardized norm** `|Y|² = Y_ξ² + (Y_β/β)²`, which
//! equals the Euclidean norm at `β = 1` and makes the clip height `b`,
//! covariance traces, and efficiencies scale-free.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpd::{self, GpdParams, ScoreVector};
use crate::linalg::{Mat2, Vec2};
use crate::mle::{FitResult, MIN_EXCEEDANCES};
use crate::sample::LossSample;
use crate::solver::{self, ClipRule, NodeTable, SolvedState};

/// Shape floor used when a one-step correction would push `ξ` nonpositive.
pub const SHAPE_FLOOR: f64 = 1e-4;

/// Which influence function a spec induces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiKind {
    /// Classical unbounded influence `𝓘⁻¹Λ`.
    Mle,
    /// Bias-minimal: constant-norm `ψ = bY/|Y|`.
    Mbre,
    /// MSE-optimal for a known radius: `ψ = Y·min(1, b/|Y|)`.
    Omse,
}

impl fmt::Display for PsiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsiKind::Mle => "mle",
            PsiKind::Mbre => "mbre",
            PsiKind::Omse => "omse",
        })
    }
}

/// Starting radius `r` of the shrinking contamination neighborhood
/// `ε_n = r/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radius {
    pub r: f64,
}

impl Radius {
    pub fn new(r: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::InvalidParams(format!(
                "neighborhood radius must be finite and nonnegative, got {r}"
            )));
        }
        Ok(Radius { r })
    }
}

/// A solved influence function `ψ(x) = clip(A·Λ_θ(x) − a)`, anchored at
/// `params`.
///
/// `A` and `a` act on the score at the anchor parameters; the clip norm is
/// the scale-standardized norm described in the module docs, so `b` is the
/// same number the solver found at `β = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSpec {
    pub a_mat: Mat2,
    pub a_vec: Vec2,
    /// Clip height (`+∞` for the classical kind).
    pub b: f64,
    pub kind: PsiKind,
    pub params: GpdParams,
    /// Neighborhood radius the spec was solved for (MSE-optimal kind only).
    pub radius: Option<f64>,
}

impl InfluenceSpec {
    /// Multipliers mapped back to the standardized frame `(0, ξ, 1)`.
    pub(crate) fn standardized_multipliers(&self) -> (Mat2, Vec2) {
        let beta = self.params.scale;
        let a = self.a_mat;
        (
            Mat2::new(a.a11, a.a12 / beta, a.a21 / beta, a.a22 / (beta * beta)),
            Vec2::new(self.a_vec.x, self.a_vec.y / beta),
        )
    }

    /// ψ applied to a score vector at the anchor parameters.
    fn psi_of_score(&self, lam: Vec2) -> Vec2 {
        let y = self.a_mat.mul_vec(lam).sub(self.a_vec);
        let nrm = y.x.hypot(y.y / self.params.scale);
        match self.kind {
            PsiKind::Mbre => {
                if nrm == 0.0 {
                    // Y = 0 is a measure-zero direction singularity of
                    // bY/|Y|; the zero vector is the documented convention.
                    Vec2::ZERO
                } else {
                    y.scale(self.b / nrm)
                }
            }
            _ => {
                if nrm <= self.b {
                    y
                } else {
                    y.scale(self.b / nrm)
                }
            }
        }
    }
}

/// Verify Fisher-consistency of a spec by independent adaptive quadrature
/// through the public evaluation path: returns the max-norm residuals of
/// `E ψ = 0` and `E ψΛᵀ = 𝟙` in scale-standardized units.
pub(crate) fn psi_std_residuals(spec: &InfluenceSpec) -> Result<(f64, f64)> {
    let p = spec.params;
    let beta = p.scale;
    let (m, err) = gpd::expect_adaptive_vec(
        &p,
        6,
        |x, out| {
            let psi = eval_psi(spec, x).expect("quadrature nodes exceed the threshold");
            let lam = gpd::score(&p, x).expect("quadrature nodes exceed the threshold");
            out[0] = psi.d_xi;
            out[1] = psi.d_beta / beta;
            out[2] = psi.d_xi * lam.d_xi;
            out[3] = psi.d_xi * lam.d_beta * beta;
            out[4] = psi.d_beta / beta * lam.d_xi;
            out[5] = psi.d_beta * lam.d_beta;
        },
        1e-8,
    );
    if err > 1e-6 {
        return Err(Error::NonConvergence {
            routine: "influence residual quadrature",
            iterations: 0,
            residual: err,
        });
    }
    let center = m[0].abs().max(m[1].abs());
    let cross = (m[2] - 1.0)
        .abs()
        .max(m[3].abs())
        .max(m[4].abs())
        .max((m[5] - 1.0).abs());
    Ok((center, cross))
}

/// The classical spec `(A, a, b) = (𝓘⁻¹, 0, ∞)` — no clipping.
pub fn mle_spec(p: &GpdParams) -> InfluenceSpec {
    InfluenceSpec {
        a_mat: gpd::fisher_info(p).inverse(),
        a_vec: Vec2::ZERO,
        b: f64::INFINITY,
        kind: PsiKind::Mle,
        params: *p,
        radius: None,
    }
}

/// Evaluate the influence function at a loss value `x > u`.
pub fn eval_psi(spec: &InfluenceSpec, x: f64) -> Result<ScoreVector> {
    let lam = gpd::score(&spec.params, x)?;
    Ok(ScoreVector::from_vec2(spec.psi_of_score(lam.to_vec2())))
}

/// Lift a solved standardized state to an anchor-parameter spec.
fn spec_from_state(
    kind: PsiKind,
    p: &GpdParams,
    radius: Option<f64>,
    st: &SolvedState,
) -> InfluenceSpec {
    spec_from_std_multipliers(kind, p, radius, st.a_mat, st.a_mat.mul_vec(st.alpha), st.b)
}

/// Lift standardized multipliers `(A₁, a₁, b)` to the anchor parameters:
/// `A = S⁻¹A₁S⁻¹`, `a = S⁻¹a₁` with `S = diag(1, 1/β)`.
pub(crate) fn spec_from_std_multipliers(
    kind: PsiKind,
    p: &GpdParams,
    radius: Option<f64>,
    a1: Mat2,
    a_vec1: Vec2,
    b: f64,
) -> InfluenceSpec {
    let beta = p.scale;
    InfluenceSpec {
        a_mat: Mat2::new(a1.a11, a1.a12 * beta, a1.a21 * beta, a1.a22 * beta * beta),
        a_vec: Vec2::new(a_vec1.x, a_vec1.y * beta),
        b,
        kind,
        params: *p,
        radius,
    }
}

/// Solve the bias-minimal influence function at `p`.
pub fn solve_mbre(p: &GpdParams) -> Result<InfluenceSpec> {
    let t = NodeTable::new(p.shape)?;
    let st = solver::solve_normed_std(&t, None)?;
    Ok(spec_from_state(PsiKind::Mbre, p, None, &st))
}

/// Solve the MSE-optimal influence function at `p` for a known radius.
///
/// `r = 0` is the classical limit and returns the unclipped spec.
pub fn solve_omse(p: &GpdParams, radius: Radius) -> Result<InfluenceSpec> {
    if radius.r == 0.0 {
        return Ok(mle_spec(p));
    }
    let t = NodeTable::new(p.shape)?;
    let st = solver::solve_clipped_std(&t, ClipRule::FromRadius(radius.r), None)?;
    Ok(spec_from_state(PsiKind::Omse, p, Some(radius.r), &st))
}

/// Trace of the asymptotic covariance `E ψψᵀ` in standardized coordinates.
fn trace_cov_std(spec: &InfluenceSpec) -> Result<f64> {
    match spec.kind {
        PsiKind::Mle => {
            let xi = spec.params.shape;
            Ok((1.0 + xi) * (3.0 + xi))
        }
        PsiKind::Mbre => Ok(spec.b * spec.b),
        PsiKind::Omse => {
            let (a1, av1) = spec.standardized_multipliers();
            let alpha = a1
                .inverse()
                .ok_or_else(|| {
                    Error::InvalidParams("influence multiplier matrix is singular".into())
                })?
                .mul_vec(av1);
            let t = NodeTable::new(spec.params.shape)?;
            Ok(solver::clipped_moments_at(&t, a1, alpha, spec.b).psi_sq)
        }
    }
}

/// Worst-case asymptotic mean squared error over the radius-`r`
/// neighborhood: `trace E ψψᵀ + r²·(sup|ψ|)²`, with `sup|ψ| = b` for the
/// robust kinds, evaluated in standardized coordinates.
///
/// The classical kind has unbounded `ψ`, so any `r > 0` returns `+∞`.
pub fn max_mse(spec: &InfluenceSpec, radius: &Radius) -> Result<f64> {
    let r = radius.r;
    if spec.kind == PsiKind::Mle {
        return Ok(if r > 0.0 {
            f64::INFINITY
        } else {
            trace_cov_std(spec)?
        });
    }
    Ok(trace_cov_std(spec)? + r * r * spec.b * spec.b)
}

/// `(trace E ψψᵀ, b)` per radius node, used for relative-MSE comparisons.
struct RadiusCurve {
    rs: Vec<f64>,
    tr: Vec<f64>,
    b: Vec<f64>,
}

impl RadiusCurve {
    /// `max over nodes r of maxMSE(candidate; r) / maxMSE(OMSE_r; r)`.
    fn worst_rel_mse(&self, cand_tr: f64, cand_b: f64) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.rs.len() {
            let r2 = self.rs[j] * self.rs[j];
            let num = cand_tr + r2 * cand_b * cand_b;
            let den = self.tr[j] + r2 * self.b[j] * self.b[j];
            worst = worst.max(num / den);
        }
        worst
    }
}

const RADIUS_CURVE_NODES: usize = 25;

/// Solve the MSE-optimal problem along a log grid of radii, warm-starting
/// each node from its predecessor.
fn build_radius_curve(t: &NodeTable, lo: f64, hi: f64) -> Result<RadiusCurve> {
    let n = RADIUS_CURVE_NODES;
    let mut rs = Vec::with_capacity(n);
    let mut tr = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut warm: Option<(Mat2, Vec2)> = None;
    for j in 0..n {
        let r = (lo.ln() + (hi / lo).ln() * j as f64 / (n - 1) as f64).exp();
        let st = solver::solve_clipped_std(t, ClipRule::FromRadius(r), warm)?;
        warm = Some(st.warm_start());
        rs.push(r);
        tr.push(st.trace_cov);
        b.push(st.b);
    }
    Ok(RadiusCurve { rs, tr, b })
}

/// Result of the radius-minimax search.
#[derive(Debug, Clone)]
pub struct RmxeResult {
    /// The least-favorable radius `r_lf` whose MSE-optimal spec is used.
    pub radius: f64,
    pub spec: InfluenceSpec,
    /// `min over s of max over r` relative efficiency: the guaranteed
    /// fraction of the attainable MSE performance, whatever the true
    /// radius in the range.
    pub worst_case_efficiency: f64,
}

fn validate_r_range(r_range: (f64, f64)) -> Result<(f64, f64)> {
    let (lo, hi) = r_range;
    if !(lo > 0.0) || !(hi > lo) || !hi.is_finite() {
        return Err(Error::InvalidParams(format!(
            "radius range must satisfy 0 < lo < hi < ∞, got [{lo}, {hi}]"
        )));
    }
    Ok((lo, hi))
}

/// Radius-minimax estimator choice: finds the radius `s` in `r_range`
/// minimizing `max over r in r_range of relMSE(s; r)`, where
/// `relMSE(s; r) = maxMSE(OMSE_s; r)/maxMSE(OMSE_r; r)`.
///
/// The inner maximum runs over a 25-node log grid of radii; the outer
/// minimum is a golden-section search in `log s`, warm-started along the
/// way. The returned efficiency is the reciprocal of the minimax ratio.
pub fn radius_minimax(p: &GpdParams, r_range: (f64, f64)) -> Result<RmxeResult> {
    let (lo, hi) = validate_r_range(r_range)?;
    let t = NodeTable::new(p.shape)?;
    let curve = build_radius_curve(&t, lo, hi)?;

    let mut cache: Vec<(f64, SolvedState)> = Vec::new();
    let eval = |s: f64, cache: &mut Vec<(f64, SolvedState)>| -> Result<f64> {
        let warm = cache
            .iter()
            .min_by(|x, y| {
                let dx = (x.0.ln() - s.ln()).abs();
                let dy = (y.0.ln() - s.ln()).abs();
                dx.partial_cmp(&dy).unwrap()
            })
            .map(|(_, st)| st.warm_start());
        let st = solver::solve_clipped_std(&t, ClipRule::FromRadius(s), warm)?;
        let worst = curve.worst_rel_mse(st.trace_cov, st.b);
        cache.push((s, st));
        Ok(worst)
    };

    // Golden-section minimization over log s.
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x4) = (lo.ln(), hi.ln());
    let mut x2 = x4 - phi * (x4 - x1);
    let mut x3 = x1 + phi * (x4 - x1);
    let mut f2 = eval(x2.exp(), &mut cache)?;
    let mut f3 = eval(x3.exp(), &mut cache)?;
    let mut best = if f2 < f3 { (x2, f2) } else { (x3, f3) };
    while x4 - x1 > 1e-3 {
        if f2 < f3 {
            x4 = x3;
            x3 = x2;
            f3 = f2;
            x2 = x4 - phi * (x4 - x1);
            f2 = eval(x2.exp(), &mut cache)?;
        } else {
            x1 = x2;
            x2 = x3;
            f2 = f3;
            x3 = x1 + phi * (x4 - x1);
            f3 = eval(x3.exp(), &mut cache)?;
        }
        let (xb, fb) = if f2 < f3 { (x2, f2) } else { (x3, f3) };
        if fb < best.1 {
            best = (xb, fb);
        }
    }

    let r_lf = best.0.exp();
    let st = cache
        .iter()
        .min_by(|x, y| {
            let dx = (x.0 - r_lf).abs();
            let dy = (y.0 - r_lf).abs();
            dx.partial_cmp(&dy).unwrap()
        })
        .map(|(_, st)| *st)
        .expect("cache holds every evaluated radius");
    Ok(RmxeResult {
        radius: r_lf,
        spec: spec_from_state(PsiKind::Omse, p, Some(r_lf), &st),
        worst_case_efficiency: 1.0 / best.1,
    })
}

/// Worst-case relative efficiency of an arbitrary robust spec over a radius
/// range: `min over r of maxMSE(OMSE_r; r)/maxMSE(spec; r)`.
///
/// The classical kind returns 0: its worst-case MSE is infinite for every
/// positive radius.
pub fn worst_case_efficiency(spec: &InfluenceSpec, r_range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = validate_r_range(r_range)?;
    if spec.kind == PsiKind::Mle {
        return Ok(0.0);
    }
    let t = NodeTable::new(spec.params.shape)?;
    let curve = build_radius_curve(&t, lo, hi)?;
    Ok(1.0 / curve.worst_rel_mse(trace_cov_std(spec)?, spec.b))
}

/// Solve the fixed-bound clipped influence whose asymptotic relative
/// efficiency under the clean model equals `efficiency_target` (e.g. 0.95
/// for the classical Anscombe-style tuning). Returns an MSE-optimal-form
/// spec with the clip height found by bisection on the efficiency.
pub fn solve_obre(p: &GpdParams, efficiency_target: f64) -> Result<InfluenceSpec> {
    if !(efficiency_target > 0.0 && efficiency_target < 1.0) {
        return Err(Error::InvalidParams(format!(
            "efficiency target must lie in (0, 1), got {efficiency_target}"
        )));
    }
    let t = NodeTable::new(p.shape)?;
    let xi = p.shape;
    let target_tr = (1.0 + xi) * (3.0 + xi) / efficiency_target;

    let mbre = solver::solve_normed_std(&t, None)?;
    if mbre.b * mbre.b <= target_tr {
        return Err(Error::Domain(format!(
            "efficiency target {efficiency_target} is above what any clipped influence attains \
             (the bias-minimal solution already has efficiency {:.4})",
            (1.0 + xi) * (3.0 + xi) / (mbre.b * mbre.b)
        )));
    }

    // trace E ψψᵀ decreases from b²_mbre toward tr 𝓘⁻¹ as b grows.
    let mut lo = mbre.b * 1.001;
    let mut hi = mbre.b * 2.0;
    let mut warm: Option<(Mat2, Vec2)> = None;
    let solve_at = |b: f64, warm: Option<(Mat2, Vec2)>| -> Result<SolvedState> {
        solver::solve_clipped_std(&t, ClipRule::Fixed(b), warm)
    };
    let mut st_hi = solve_at(hi, warm)?;
    let mut guard = 0;
    while st_hi.trace_cov > target_tr {
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(Error::NonConvergence {
                routine: "fixed-bound efficiency bracketing",
                iterations: guard,
                residual: st_hi.trace_cov - target_tr,
            });
        }
        st_hi = solve_at(hi, Some(st_hi.warm_start()))?;
    }
    warm = Some(st_hi.warm_start());

    let mut best = st_hi;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let st = solve_at(mid, warm)?;
        warm = Some(st.warm_start());
        best = st;
        if st.trace_cov > target_tr {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-10 {
            break;
        }
    }
    Ok(spec_from_state(PsiKind::Omse, p, None, &best))
}

/// One-step re-estimation `S_n = θ₀ + mean ψ_{θ₀}(X_i)`, with the scale
/// coordinate corrected multiplicatively (on the log scale):
/// `β₁ = β₀·exp(ψ̄_β/β₀)`.
///
/// Solves the influence function of the requested kind at the starting
/// parameters. The shape update is additive; if it would leave the
/// heavy-tail domain it is clamped to [`SHAPE_FLOOR`] and the result is
/// flagged `converged: false`.
pub fn one_step(
    start: &FitResult,
    kind: PsiKind,
    radius: Option<Radius>,
    sample: &LossSample,
) -> Result<FitResult> {
    let spec = match kind {
        PsiKind::Mle => mle_spec(&start.params),
        PsiKind::Mbre => solve_mbre(&start.params)?,
        PsiKind::Omse => {
            let r = radius.ok_or_else(|| {
                Error::InvalidInput(
                    "the MSE-optimal influence kind requires a neighborhood radius".into(),
                )
            })?;
            solve_omse(&start.params, r)?
        }
    };
    one_step_with_spec(start, &spec, sample)
}

/// One-step re-estimation with an already-solved influence spec (e.g. one
/// interpolated from an archived multiplier grid). The spec must be
/// anchored at the starting parameters.
pub fn one_step_with_spec(
    start: &FitResult,
    spec: &InfluenceSpec,
    sample: &LossSample,
) -> Result<FitResult> {
    if !start.converged {
        return Err(Error::InvalidInput(
            "one-step correction requires a converged starting fit".into(),
        ));
    }
    let p0 = start.params;
    let rel = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    if !rel(spec.params.threshold, p0.threshold)
        || !rel(spec.params.shape, p0.shape)
        || !rel(spec.params.scale, p0.scale)
    {
        return Err(Error::InvalidInput(
            "influence spec is anchored at different parameters than the starting fit".into(),
        ));
    }
    let exceed = sample.exceedances(p0.threshold);
    if exceed.len() < MIN_EXCEEDANCES {
        return Err(Error::InvalidInput(format!(
            "one-step correction requires at least {MIN_EXCEEDANCES} exceedances, got {}",
            exceed.len()
        )));
    }

    let mut mean = Vec2::ZERO;
    for &x in &exceed {
        mean = mean.add(eval_psi(spec, x)?.to_vec2());
    }
    mean = mean.scale(1.0 / exceed.len() as f64);

    let mut shape = p0.shape + mean.x;
    let mut clamped = false;
    if shape < SHAPE_FLOOR {
        shape = SHAPE_FLOOR;
        clamped = true;
    }
    let scale = p0.scale * (mean.y / p0.scale).exp();
    Ok(FitResult {
        params: GpdParams::new(p0.threshold, shape, scale)?,
        estimator_name: format!("{} one-step", spec.kind),
        converged: !clamped,
        iterations: 1,
        log_likelihood: None,
    })
}
