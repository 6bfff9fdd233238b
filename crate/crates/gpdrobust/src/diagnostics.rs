//! Plot-ready robustness diagnostics.
//!
//! Three table builders, each emitting rows that a plotting frontend (or
//! the CLI's CSV output) can render directly:
//!
//! * **Influence tables** — per-observation influence coordinates
//!   `(ψ_ξ, ψ_β)`, their joint size `|ψ|`, and the downweighting factor
//!   `min{1, b/|Y|}` a robust influence applies to each point. The scale
//!   coordinate is reported on the `β = 1` scale so sizes are comparable
//!   across fits.
//! * **Outlyingness tables** — a robustified empirical Mahalanobis
//!   distance of the *unbounded* classical influence, anchored at robust
//!   parameter estimates and measured under an MCD covariance of the
//!   influence cloud, plotted against the raw data value. A point is
//!   flagged only when it is extreme both ways: squared distance above
//!   the 99% χ²₂ quantile **and** data value above the empirical 99%
//!   quantile.
//! * **QQ bands** — model quantiles at plotting positions `i/(n+1)`
//!   against order statistics, with exact pointwise bands (order-statistic
//!   Beta intervals, the binomial/Clopper–Pearson dual) or simultaneous
//!   Dvoretzky–Kiefer–Wolfowitz bands. Both are widened for contamination
//!   by raising the defining level to `min(nominal + r/√n, 1 − 10⁻⁶)`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::gpd;
use crate::influence::{self, InfluenceSpec, Radius};
use crate::linalg::Vec2;
use crate::mcd;
use crate::mle::FitResult;
use crate::sample::LossSample;

/// 99% quantile of the χ²₂ distribution (squared-distance scale):
/// `−2·ln(0.01)`.
pub const CHI2_2_99: f64 = 9.210340371976184;

/// One diagnostic observation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    /// Position of the observation in the input sample (0-based).
    pub index: usize,
    pub x: f64,
    /// Influence, shape coordinate.
    pub psi_xi: f64,
    /// Influence, scale coordinate on the β = 1 scale.
    pub psi_beta: f64,
    /// Joint influence size `√(ψ_ξ² + (ψ_β/β)²)`.
    pub psi_norm: f64,
    /// Robust downweighting factor `min{1, b/|Y|}` (1 for unbounded ψ).
    pub weight: f64,
    /// Squared robustified Mahalanobis distance (outlyingness tables).
    pub mahalanobis: f64,
    /// Set only when both outlyingness thresholds are exceeded.
    pub flagged: bool,
}

/// Rows plus a note of how many observations fell at or below the
/// threshold and were excluded (influence is defined on exceedances only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTable {
    pub rows: Vec<DiagnosticRow>,
    pub excluded_below_threshold: usize,
}

impl DiagnosticTable {
    pub const CSV_HEADER: &'static str =
        "index,x,psi_xi,psi_beta,psi_norm,weight,mahalanobis,flagged";

    /// CSV with the fixed documented column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{}\n",
                r.index, r.x, r.psi_xi, r.psi_beta, r.psi_norm, r.weight, r.mahalanobis, r.flagged
            ));
        }
        out
    }

    pub fn flagged_count(&self) -> usize {
        self.rows.iter().filter(|r| r.flagged).count()
    }
}

/// ψ in standardized coordinates plus the clip weight at one observation.
fn psi_row(spec: &InfluenceSpec, x: f64) -> Result<(Vec2, f64)> {
    let beta = spec.params.scale;
    let lam = gpd::score(&spec.params, x)?.to_vec2();
    let y = spec.a_mat.mul_vec(lam).sub(spec.a_vec);
    let nrm = y.x.hypot(y.y / beta);
    let weight = if spec.b.is_infinite() {
        1.0
    } else {
        (spec.b / nrm).min(1.0)
    };
    let psi = influence::eval_psi(spec, x)?;
    Ok((Vec2::new(psi.d_xi, psi.d_beta / beta), weight))
}

/// Per-observation influence table under the given spec. Observations at
/// or below the threshold are excluded and counted.
pub fn influence_table(spec: &InfluenceSpec, sample: &LossSample) -> Result<DiagnosticTable> {
    let u = spec.params.threshold;
    let mut rows = Vec::new();
    let mut excluded = 0;
    for (index, &x) in sample.values().iter().enumerate() {
        if x <= u {
            excluded += 1;
            continue;
        }
        let (psi, weight) = psi_row(spec, x)?;
        rows.push(DiagnosticRow {
            index,
            x,
            psi_xi: psi.x,
            psi_beta: psi.y,
            psi_norm: psi.norm(),
            weight,
            mahalanobis: 0.0,
            flagged: false,
        });
    }
    Ok(DiagnosticTable {
        rows,
        excluded_below_threshold: excluded,
    })
}

/// Empirical quantile by the `⌈p·n⌉` order-statistic convention.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Distance-versus-data outlyingness table: the classical (unbounded)
/// influence evaluated at the **robust** fit's parameters, its empirical
/// Mahalanobis distance robustified through an MCD covariance of the
/// influence cloud, against the raw data value. Flags observations that
/// exceed the 99% χ²₂ quantile in squared distance *and* the empirical
/// 99% data quantile.
///
/// Both fits must have converged; the classical fit is checked for
/// agreement on the threshold. MCD failures (e.g. a rank-deficient
/// influence cloud) propagate.
pub fn outlyingness_table(
    sample: &LossSample,
    mle_fit: &FitResult,
    robust_fit: &FitResult,
) -> Result<DiagnosticTable> {
    if !mle_fit.converged || !robust_fit.converged {
        return Err(Error::InvalidInput(
            "outlyingness diagnostics need converged fits".into(),
        ));
    }
    if (mle_fit.params.threshold - robust_fit.params.threshold).abs()
        > 1e-12 * robust_fit.params.threshold.abs().max(1.0)
    {
        return Err(Error::InvalidInput(
            "the two fits use different thresholds".into(),
        ));
    }
    let p = robust_fit.params;
    let spec = influence::mle_spec(&p);

    let mut rows = Vec::new();
    let mut cloud = Vec::new();
    let mut excluded = 0;
    for (index, &x) in sample.values().iter().enumerate() {
        if x <= p.threshold {
            excluded += 1;
            continue;
        }
        let (psi, weight) = psi_row(&spec, x)?;
        cloud.push(psi);
        rows.push(DiagnosticRow {
            index,
            x,
            psi_xi: psi.x,
            psi_beta: psi.y,
            psi_norm: psi.norm(),
            weight,
            mahalanobis: 0.0,
            flagged: false,
        });
    }
    let robust_cov = mcd::mcd_cov(&cloud, mcd::default_h(cloud.len()))?;
    // Influence values live on a one-dimensional curve, so the robust
    // scatter can come out numerically rank-deficient; the capped inverse
    // keeps the distances finite (and identical to the exact inverse
    // whenever the scatter is well conditioned).
    let inv = robust_cov
        .scatter
        .inverse()
        .or_else(|| robust_cov.scatter.inverse_conditioned(1e8))
        .ok_or_else(|| Error::Degenerate("robust scatter is singular".into()))?;

    let mut sorted: Vec<f64> = sample.values().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let x99 = empirical_quantile(&sorted, 0.99);

    for (row, psi) in rows.iter_mut().zip(&cloud) {
        let d = psi.sub(robust_cov.center);
        let dist2 = d.dot(inv.mul_vec(d));
        row.mahalanobis = dist2;
        row.flagged = dist2 > CHI2_2_99 && row.x > x99;
    }
    Ok(DiagnosticTable {
        rows,
        excluded_below_threshold: excluded,
    })
}

/// Band construction for quantile-quantile diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    /// Exact order-statistic (Beta) interval at each plotting position.
    Pointwise,
    /// Distribution-free Dvoretzky–Kiefer–Wolfowitz band over all
    /// positions jointly.
    Simultaneous,
}

/// One band row at a plotting position, in data units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub position: f64,
    pub model_quantile: f64,
    pub lower: f64,
    /// May be `+∞` when a simultaneous band's upper edge exceeds the
    /// distribution's range at extreme positions; serialized to JSON as
    /// `null` in that case.
    #[serde(with = "unbounded_upper")]
    pub upper: f64,
}

/// JSON has no infinity literal, so an unbounded band edge round-trips
/// through `null`.
mod unbounded_upper {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A quantile-quantile confidence band at a contamination-adjusted level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub kind: BandKind,
    pub nominal_level: f64,
    /// `min(nominal + r/√n, 1 − 10⁻⁶)`.
    pub radius_adjusted_level: f64,
    /// Set when the adjustment hit the cap — the requested widening could
    /// not be represented.
    pub capped: bool,
    pub rows: Vec<BandRow>,
}

impl BandSpec {
    pub const CSV_HEADER: &'static str = "position,model_quantile,lower,upper";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{:.10e},{:.10e},{:.10e},{:.10e}\n",
                r.position, r.model_quantile, r.lower, r.upper
            ));
        }
        out
    }
}

/// DKW half-width in cdf units: `√(ln(2/(1−level))/(2n))`.
pub(crate) fn dkw_half_width(level: f64, n: usize) -> f64 {
    ((2.0 / (1.0 - level)).ln() / (2.0 * n as f64)).sqrt()
}

/// Contamination-adjusted band level with the documented cap.
fn adjusted_level(nominal: f64, r: f64, n: usize) -> (f64, bool) {
    let raw = nominal + r / (n as f64).sqrt();
    if raw >= 1.0 - 1e-6 {
        (1.0 - 1e-6, true)
    } else {
        (raw, false)
    }
}

/// Quantile-quantile table with confidence bands for the exceedances of a
/// fitted tail.
///
/// Order statistics of the exceedances are paired with model quantiles at
/// plotting positions `i/(n+1)`; the band level is raised by `r/√n` to
/// keep coverage under contamination of radius `r` (capped below 1, with
/// a flag). The returned table carries the observations in sorted order
/// with robust downweighting factors from the MSE-optimal influence at
/// the same radius (all 1 when `r = 0`), so point sizes can reflect how
/// much a robust fit discounted each observation.
pub fn qq_band_table(
    fit: &FitResult,
    sample: &LossSample,
    nominal: f64,
    radius: Radius,
    kind: BandKind,
) -> Result<(BandSpec, DiagnosticTable)> {
    if !(nominal > 0.0 && nominal < 1.0) {
        return Err(Error::InvalidInput(format!(
            "band level must lie in (0, 1), got {nominal}"
        )));
    }
    let p = fit.params;
    let mut exceed = sample.exceedances(p.threshold);
    let excluded = sample.len() - exceed.len();
    if exceed.is_empty() {
        return Err(Error::InvalidInput(
            "no exceedances above the fitted threshold".into(),
        ));
    }
    exceed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = exceed.len();
    let (level, capped) = adjusted_level(nominal, radius.r, n);

    let spec = if radius.r == 0.0 {
        influence::mle_spec(&p)
    } else {
        influence::solve_omse(&p, radius)?
    };

    let mut rows = Vec::with_capacity(n);
    let mut band_rows = Vec::with_capacity(n);
    let eta = dkw_half_width(level, n);
    for (i, &x) in exceed.iter().enumerate() {
        let position = (i + 1) as f64 / (n + 1) as f64;
        let model_quantile = gpd::quantile(&p, position)?;
        let (lower, upper) = match kind {
            BandKind::Pointwise => {
                let dist = Beta::new((i + 1) as f64, (n - i) as f64).map_err(|e| {
                    Error::InvalidInput(format!("order-statistic interval failed: {e}"))
                })?;
                let lo = dist.inverse_cdf((1.0 - level) / 2.0);
                let hi = dist.inverse_cdf((1.0 + level) / 2.0);
                (gpd::quantile(&p, lo)?, gpd::quantile(&p, hi)?)
            }
            BandKind::Simultaneous => {
                let lo = (position - eta).max(0.0);
                let hi = position + eta;
                let upper = if hi < 1.0 {
                    gpd::quantile(&p, hi)?
                } else {
                    f64::INFINITY
                };
                (gpd::quantile(&p, lo)?, upper)
            }
        };
        band_rows.push(BandRow {
            position,
            model_quantile,
            lower,
            upper,
        });
        let (psi, weight) = psi_row(&spec, x)?;
        rows.push(DiagnosticRow {
            index: i,
            x,
            psi_xi: psi.x,
            psi_beta: psi.y,
            psi_norm: psi.norm(),
            weight,
            mahalanobis: 0.0,
            flagged: false,
        });
    }
    Ok((
        BandSpec {
            kind,
            nominal_level: nominal,
            radius_adjusted_level: level,
            capped,
            rows: band_rows,
        },
        DiagnosticTable {
            rows,
            excluded_below_threshold: excluded,
        },
    ))
}

/// Gross-error sensitivity `sup|ψ|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ges {
    /// Robust influences: the clip height, exactly.
    Bounded(f64),
    /// Unbounded influence: the supremum over the probe grid, flagged as
    /// divergent — it grows without bound as the grid extends.
    DivergentSup(f64),
}

/// Gross-error sensitivity of an influence spec. Robust kinds return
/// their clip height exactly. The classical kind evaluates `|ψ|` over the
/// probe grid (quantile levels, sorted internally) and reports the grid
/// supremum, flagged as divergent when extending the grid beyond the 99%
/// level keeps raising the supremum — the signature of an unbounded
/// influence, whose sup exceeds any fixed bound as the grid extends.
pub fn ges(spec: &InfluenceSpec, probe_grid: &[f64]) -> Result<Ges> {
    if spec.b.is_finite() {
        return Ok(Ges::Bounded(spec.b));
    }
    if probe_grid.is_empty() || probe_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidInput(
            "probe grid must be nonempty quantile levels in (0, 1)".into(),
        ));
    }
    let mut probes = probe_grid.to_vec();
    probes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bulk: f64 = 0.0;
    let mut sup: f64 = 0.0;
    let mut deep_growing = true;
    let mut last_deep = f64::NEG_INFINITY;
    let mut has_deep = false;
    for &prob in &probes {
        let x = gpd::quantile(&spec.params, prob)?;
        let (psi, _) = psi_row(spec, x)?;
        let nrm = psi.norm();
        sup = sup.max(nrm);
        if prob <= 0.99 {
            bulk = bulk.max(nrm);
        } else {
            deep_growing &= nrm > last_deep;
            last_deep = nrm;
            has_deep = true;
        }
    }
    if has_deep && deep_growing && last_deep > bulk {
        Ok(Ges::DivergentSup(sup))
    } else {
        Ok(Ges::Bounded(sup))
    }
}
