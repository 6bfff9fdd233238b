//! Archived Lagrange-multiplier grids over the shape parameter.
//!
//! Solving the optimally robust influence equations is iterative; for
//! repeated fitting the multipliers `(A, a, b)` are solved once at `β = 1`
//! on a dense grid of shape values `ξ`, persisted to a versioned text
//! file, and later interpolated at the fitted `(ξ, β)`:
//!
//! * interpolation is componentwise monotone cubic (Fritsch–Carlson) in
//!   `ξ` at `β = 1`, then the exact scale map lifts the multipliers to the
//!   query `β` (the score's scale coordinate varies as `1/β`);
//! * queries outside the node range are rejected — no extrapolation;
//! * every interpolated spec is re-verified against the Fisher-consistency
//!   constraints by independent quadrature (residuals must stay below
//!   `1e−3`), so a grid too coarse for its shape range fails loudly
//!   rather than silently degrading.
//!
//! The default node set spans the operational-risk shape range with a
//! margin: ξ from 0.1 to 3.0 in steps of 0.05.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gpd::GpdParams;
use crate::influence::{self, InfluenceSpec, PsiKind, Radius};
use crate::linalg::{Mat2, Vec2};
use crate::solver::{self, ClipRule, NodeTable};

/// Which family of multipliers a grid archives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Bias-minimal multipliers (no radius).
    Mbre,
    /// MSE-optimal multipliers for one fixed neighborhood radius.
    Omse,
    /// Radius-minimax multipliers; each node stores its own
    /// least-favorable radius.
    Rmxe,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Mbre => "mbre",
            GridKind::Omse => "omse",
            GridKind::Rmxe => "rmxe",
        })
    }
}

impl FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mbre" => Ok(GridKind::Mbre),
            "omse" => Ok(GridKind::Omse),
            "rmxe" => Ok(GridKind::Rmxe),
            other => Err(Error::GridFile(format!("unknown grid kind '{other}'"))),
        }
    }
}

/// One archived node: standardized multipliers at `(0, ξ, 1)` plus the
/// solver's Fisher-consistency residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridNode {
    pub xi: f64,
    /// Node radius: the grid radius for the MSE-optimal kind, the
    /// least-favorable radius for the radius-minimax kind, none for the
    /// bias-minimal kind.
    pub radius: Option<f64>,
    pub a_mat: Mat2,
    pub a_vec: Vec2,
    pub b: f64,
    pub residual_center: f64,
    pub residual_cross: f64,
    pub residual_clip: f64,
}

/// A solved multiplier grid over ξ at `β = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierGrid {
    kind: GridKind,
    /// Grid-level radius (MSE-optimal kind only).
    radius: Option<f64>,
    nodes: Vec<GridNode>,
}

/// Default shape nodes: 0.1 to 3.0 in steps of 0.05 (59 nodes).
pub fn default_xi_nodes() -> Vec<f64> {
    (0..=58).map(|i| (10.0 + 5.0 * i as f64) / 100.0).collect()
}

/// Radius search range used for radius-minimax grid nodes.
const RMXE_RANGE: (f64, f64) = (0.1, 10.0);

fn validate_nodes(xi_nodes: &[f64]) -> Result<()> {
    if xi_nodes.len() < 2 {
        return Err(Error::InvalidInput(
            "a multiplier grid needs at least two shape nodes".into(),
        ));
    }
    for w in xi_nodes.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::InvalidInput(
                "shape nodes must be strictly increasing".into(),
            ));
        }
    }
    if xi_nodes.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::InvalidInput(
            "shape nodes must be finite and positive".into(),
        ));
    }
    Ok(())
}

/// Solve the multipliers of the requested kind at every shape node.
///
/// `radius` is required for the MSE-optimal kind and rejected otherwise.
/// Bias-minimal and fixed-radius grids are solved sequentially with warm
/// starts along ξ; radius-minimax nodes are independent minimax searches
/// and run in parallel, collected in node order.
pub fn build_grid(
    kind: GridKind,
    radius: Option<Radius>,
    xi_nodes: &[f64],
) -> Result<MultiplierGrid> {
    validate_nodes(xi_nodes)?;
    match (kind, radius) {
        (GridKind::Omse, None) => {
            return Err(Error::InvalidInput(
                "an MSE-optimal grid needs the neighborhood radius it is solved for".into(),
            ))
        }
        (GridKind::Omse, Some(r)) if r.r <= 0.0 => {
            return Err(Error::InvalidInput(
                "an MSE-optimal grid needs a positive radius".into(),
            ))
        }
        (GridKind::Mbre | GridKind::Rmxe, Some(_)) => {
            return Err(Error::InvalidInput(format!(
                "a {kind} grid does not take a radius argument"
            )))
        }
        _ => {}
    }

    let nodes = match kind {
        GridKind::Mbre | GridKind::Omse => {
            let mut nodes = Vec::with_capacity(xi_nodes.len());
            let mut warm: Option<(Mat2, Vec2)> = None;
            for &xi in xi_nodes {
                let t = NodeTable::new(xi)?;
                let st = match kind {
                    GridKind::Mbre => solver::solve_normed_std(&t, warm)?,
                    _ => solver::solve_clipped_std(
                        &t,
                        ClipRule::FromRadius(radius.unwrap().r),
                        warm,
                    )?,
                };
                warm = Some(st.warm_start());
                nodes.push(GridNode {
                    xi,
                    radius: radius.map(|r| r.r),
                    a_mat: st.a_mat,
                    a_vec: st.a_mat.mul_vec(st.alpha),
                    b: st.b,
                    residual_center: st.residual_center,
                    residual_cross: st.residual_cross,
                    residual_clip: st.residual_clip,
                });
            }
            nodes
        }
        GridKind::Rmxe => {
            let solved: Vec<Result<GridNode>> = xi_nodes
                .par_iter()
                .map(|&xi| {
                    let p = GpdParams::new(0.0, xi, 1.0)?;
                    let r_lf = influence::radius_minimax(&p, RMXE_RANGE)?.radius;
                    let t = NodeTable::new(xi)?;
                    let st = solver::solve_clipped_std(&t, ClipRule::FromRadius(r_lf), None)?;
                    Ok(GridNode {
                        xi,
                        radius: Some(r_lf),
                        a_mat: st.a_mat,
                        a_vec: st.a_mat.mul_vec(st.alpha),
                        b: st.b,
                        residual_center: st.residual_center,
                        residual_cross: st.residual_cross,
                        residual_clip: st.residual_clip,
                    })
                })
                .collect();
            solved.into_iter().collect::<Result<Vec<_>>>()?
        }
    };

    Ok(MultiplierGrid {
        kind,
        radius: radius.map(|r| r.r),
        nodes,
    })
}

impl MultiplierGrid {
    pub fn kind(&self) -> GridKind {
        self.kind
    }

    /// Grid-level radius (MSE-optimal kind only).
    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }

    /// Inclusive shape range covered by the grid.
    pub fn xi_range(&self) -> (f64, f64) {
        (self.nodes[0].xi, self.nodes[self.nodes.len() - 1].xi)
    }
}

/// Interpolate the archived multipliers at a query `(ξ, β)` and return the
/// corresponding influence spec anchored at `(u = 0, ξ, β)`; use
/// [`InfluenceSpec`]`::with_threshold` to re-anchor the threshold, which
/// the multipliers do not depend on.
///
/// Errors if the query shape lies outside the node range, or if the
/// interpolated multipliers fail the Fisher-consistency re-check.
pub fn interpolate_spec(grid: &MultiplierGrid, xi: f64, beta: f64) -> Result<InfluenceSpec> {
    let params = GpdParams::new(0.0, xi, beta)?;
    let (lo, hi) = grid.xi_range();
    if !(xi >= lo && xi <= hi) {
        return Err(Error::Domain(format!(
            "query shape {xi} outside the archived range [{lo}, {hi}]; no extrapolation"
        )));
    }
    let kind = match grid.kind {
        GridKind::Mbre => PsiKind::Mbre,
        GridKind::Omse | GridKind::Rmxe => PsiKind::Omse,
    };

    // Exact node hit: return the archived multipliers verbatim.
    if let Some(n) = grid.nodes.iter().find(|n| n.xi == xi) {
        return Ok(influence::spec_from_std_multipliers(
            kind, &params, n.radius, n.a_mat, n.a_vec, n.b,
        ));
    }

    let xs: Vec<f64> = grid.nodes.iter().map(|n| n.xi).collect();
    let comp = |f: &dyn Fn(&GridNode) -> f64| -> f64 {
        pchip_eval(&xs, &grid.nodes.iter().map(f).collect::<Vec<_>>(), xi)
    };
    let a_mat = Mat2::new(
        comp(&|n| n.a_mat.a11),
        comp(&|n| n.a_mat.a12),
        comp(&|n| n.a_mat.a21),
        comp(&|n| n.a_mat.a22),
    );
    let a_vec = Vec2::new(comp(&|n| n.a_vec.x), comp(&|n| n.a_vec.y));
    let b = comp(&|n| n.b);
    let radius = match grid.kind {
        GridKind::Mbre => None,
        GridKind::Omse => grid.radius,
        GridKind::Rmxe => Some(comp(&|n| n.radius.expect("radius-minimax nodes store radii"))),
    };

    let spec = influence::spec_from_std_multipliers(kind, &params, radius, a_mat, a_vec, b);
    let (center, cross) = influence::psi_std_residuals(&spec)?;
    let worst = center.max(cross);
    if worst > 1e-3 {
        return Err(Error::Degenerate(format!(
            "interpolated multipliers at shape {xi} violate the consistency constraints \
             (residual {worst:.2e}); the grid is too coarse here"
        )));
    }
    Ok(spec)
}

impl InfluenceSpec {
    /// Re-anchor the spec at a different threshold. The multipliers depend
    /// on the data only through the excess `(x − u)/β`, so a threshold
    /// shift relabels the anchor without changing them.
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.params = GpdParams::new(threshold, self.params.shape, self.params.scale)?;
        Ok(self)
    }
}

// ---------------------------------------------------------------------
// Monotone cubic (Fritsch–Carlson) interpolation.
// ---------------------------------------------------------------------

/// Node derivatives for a shape-preserving cubic through `(x, y)`.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 2 {
        let d = (y[1] - y[0]) / (x[1] - x[0]);
        return vec![d, d];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let one_sided = |h0: f64, h1: f64, d0: f64, d1: f64| -> f64 {
        let mut der = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if der * d0 <= 0.0 {
            der = 0.0;
        } else if d0 * d1 <= 0.0 && der.abs() > 3.0 * d0.abs() {
            der = 3.0 * d0;
        }
        der
    };
    d[0] = one_sided(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = one_sided(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Evaluate the shape-preserving cubic at `q` (must lie within the node
/// range; callers check).
fn pchip_eval(x: &[f64], y: &[f64], q: f64) -> f64 {
    let d = pchip_slopes(x, y);
    let k = match x.binary_search_by(|v| v.partial_cmp(&q).unwrap()) {
        Ok(i) => return y[i],
        Err(i) => i.clamp(1, x.len() - 1) - 1,
    };
    let h = x[k + 1] - x[k];
    let t = (q - x[k]) / h;
    let (t2, t3) = (t * t, t * t * t);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y[k] + h * h10 * d[k] + h01 * y[k + 1] + h * h11 * d[k + 1]
}

// ---------------------------------------------------------------------
// Versioned text persistence.
// ---------------------------------------------------------------------

const GRID_MAGIC: &str = "gpdrobust-multiplier-grid";
const GRID_VERSION: u32 = 1;

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.16e}"),
        None => "-".into(),
    }
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::GridFile(format!("malformed {what}: '{tok}'")))
}

fn parse_opt(tok: &str, what: &str) -> Result<Option<f64>> {
    if tok == "-" {
        Ok(None)
    } else {
        parse_f64(tok, what).map(Some)
    }
}

impl MultiplierGrid {
    /// Serialize to the versioned text format: a header describing kind
    /// and radius, then one whitespace-separated record per node with all
    /// values at 17 significant digits (bit-exact round-trip).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("{GRID_MAGIC} v{GRID_VERSION}\n"));
        out.push_str(&format!("kind {}\n", self.kind));
        out.push_str(&format!("radius {}\n", fmt_opt(self.radius)));
        out.push_str(&format!("nodes {}\n", self.nodes.len()));
        out.push_str("columns xi a11 a12 a21 a22 ax ay b radius res_center res_cross res_clip\n");
        for n in &self.nodes {
            out.push_str(&format!(
                "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {} {:.16e} {:.16e} {:.16e}\n",
                n.xi,
                n.a_mat.a11,
                n.a_mat.a12,
                n.a_mat.a21,
                n.a_mat.a22,
                n.a_vec.x,
                n.a_vec.y,
                n.b,
                fmt_opt(n.radius),
                n.residual_center,
                n.residual_cross,
                n.residual_clip,
            ));
        }
        out.push_str("end\n");
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a grid saved by [`MultiplierGrid::save`], validating version,
    /// node count, ordering and numeric sanity.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        // Leading `#` lines are tool annotations (provenance headers),
        // not part of the archive format.
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::GridFile("empty grid file".into()))?;
        let expected = format!("{GRID_MAGIC} v{GRID_VERSION}");
        if header.trim() != expected {
            return Err(Error::GridFile(format!(
                "unsupported grid header '{header}' (expected '{expected}')"
            )));
        }
        let mut kind: Option<GridKind> = None;
        let mut radius: Option<f64> = None;
        let mut count: Option<usize> = None;
        for _ in 0..3 {
            let line = lines
                .next()
                .ok_or_else(|| Error::GridFile("truncated grid header".into()))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some("kind"), Some(k)) => kind = Some(k.parse()?),
                (Some("radius"), Some(r)) => radius = parse_opt(r, "grid radius")?,
                (Some("nodes"), Some(n)) => {
                    count = Some(n.parse().map_err(|_| {
                        Error::GridFile(format!("malformed node count '{n}'"))
                    })?)
                }
                _ => return Err(Error::GridFile(format!("unexpected header line '{line}'"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::GridFile("missing kind line".into()))?;
        let count = count.ok_or_else(|| Error::GridFile("missing nodes line".into()))?;
        let columns = lines
            .next()
            .ok_or_else(|| Error::GridFile("missing columns line".into()))?;
        if !columns.starts_with("columns ") {
            return Err(Error::GridFile(format!(
                "expected columns line, found '{columns}'"
            )));
        }

        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::GridFile("grid file truncated mid-table".into()))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 12 {
                return Err(Error::GridFile(format!(
                    "node record has {} fields, expected 12",
                    tok.len()
                )));
            }
            let node = GridNode {
                xi: parse_f64(tok[0], "shape node")?,
                a_mat: Mat2::new(
                    parse_f64(tok[1], "multiplier entry")?,
                    parse_f64(tok[2], "multiplier entry")?,
                    parse_f64(tok[3], "multiplier entry")?,
                    parse_f64(tok[4], "multiplier entry")?,
                ),
                a_vec: Vec2::new(
                    parse_f64(tok[5], "centering entry")?,
                    parse_f64(tok[6], "centering entry")?,
                ),
                b: parse_f64(tok[7], "clip height")?,
                radius: parse_opt(tok[8], "node radius")?,
                residual_center: parse_f64(tok[9], "residual")?,
                residual_cross: parse_f64(tok[10], "residual")?,
                residual_clip: parse_f64(tok[11], "residual")?,
            };
            if !(node.xi > 0.0 && node.b > 0.0) || !node.b.is_finite() {
                return Err(Error::GridFile(format!(
                    "node at shape {} has invalid values",
                    node.xi
                )));
            }
            nodes.push(node);
        }
        if lines.next().map(str::trim) != Some("end") {
            return Err(Error::GridFile("grid file missing end marker".into()));
        }
        if nodes.windows(2).any(|w| !(w[1].xi > w[0].xi)) {
            return Err(Error::GridFile(
                "grid nodes are not strictly increasing in shape".into(),
            ));
        }
        if nodes.len() < 2 {
            return Err(Error::GridFile(
                "a multiplier grid needs at least two nodes".into(),
            ));
        }
        match kind {
            GridKind::Omse if radius.is_none() => {
                return Err(Error::GridFile(
                    "MSE-optimal grid file lacks its radius".into(),
                ))
            }
            GridKind::Rmxe if nodes.iter().any(|n| n.radius.is_none()) => {
                return Err(Error::GridFile(
                    "radius-minimax grid file has nodes without radii".into(),
                ))
            }
            _ => {}
        }
        Ok(MultiplierGrid {
            kind,
            radius,
            nodes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{eval_psi, solve_omse};
    use approx::assert_relative_eq;

    fn small_omse_grid() -> MultiplierGrid {
        build_grid(
            GridKind::Omse,
            Some(Radius::new(0.5).unwrap()),
            &[0.5, 0.6, 0.7, 0.8],
        )
        .unwrap()
    }

    #[test]
    fn node_query_returns_archived_multipliers_exactly() {
        let grid = small_omse_grid();
        let spec = interpolate_spec(&grid, 0.6, 1.0).unwrap();
        let node = &grid.nodes()[1];
        assert_eq!(spec.a_mat, node.a_mat);
        assert_eq!(spec.a_vec, node.a_vec);
        assert_eq!(spec.b, node.b);
        assert_eq!(spec.radius, Some(0.5));
        assert_eq!(spec.kind, PsiKind::Omse);
        // Node residuals satisfy the solver contract.
        for n in grid.nodes() {
            assert!(n.residual_center < 1e-5);
            assert!(n.residual_cross < 1e-5);
            assert!(n.residual_clip < 1e-6);
        }
    }

    #[test]
    fn off_node_clip_height_tracks_fresh_solve() {
        let grid = small_omse_grid();
        let spec = interpolate_spec(&grid, 0.65, 1.0).unwrap();
        let fresh = solve_omse(
            &GpdParams::new(0.0, 0.65, 1.0).unwrap(),
            Radius::new(0.5).unwrap(),
        )
        .unwrap();
        assert!(
            (spec.b - fresh.b).abs() / fresh.b < 0.01,
            "interpolated clip {} vs fresh {}",
            spec.b,
            fresh.b
        );
        // The interpolated influence stays close to the fresh solve
        // pointwise as well.
        let p = fresh.params;
        for i in 1..10 {
            let x = crate::gpd::quantile(&p, i as f64 / 10.0).unwrap();
            let a = eval_psi(&spec, x).unwrap();
            let f = eval_psi(&fresh, x).unwrap();
            assert_relative_eq!(a.d_xi, f.d_xi, max_relative = 0.02, epsilon = 1e-3);
            assert_relative_eq!(a.d_beta, f.d_beta, max_relative = 0.02, epsilon = 1e-3);
        }
    }

    #[test]
    fn scale_query_equals_transformed_standard_query() {
        let grid = small_omse_grid();
        let std = interpolate_spec(&grid, 0.65, 1.0).unwrap();
        let scaled = interpolate_spec(&grid, 0.65, 2.0).unwrap();
        assert_relative_eq!(scaled.a_mat.a11, std.a_mat.a11, max_relative = 1e-10);
        assert_relative_eq!(scaled.a_mat.a12, 2.0 * std.a_mat.a12, max_relative = 1e-10);
        assert_relative_eq!(scaled.a_mat.a21, 2.0 * std.a_mat.a21, max_relative = 1e-10);
        assert_relative_eq!(scaled.a_mat.a22, 4.0 * std.a_mat.a22, max_relative = 1e-10);
        assert_relative_eq!(scaled.a_vec.x, std.a_vec.x, max_relative = 1e-10);
        assert_relative_eq!(scaled.a_vec.y, 2.0 * std.a_vec.y, max_relative = 1e-10);
        assert_eq!(scaled.b, std.b);
    }

    #[test]
    fn queries_outside_the_node_range_are_rejected() {
        let grid = small_omse_grid();
        assert!(interpolate_spec(&grid, 0.45, 1.0).is_err());
        assert!(interpolate_spec(&grid, 0.85, 1.0).is_err());
        // Inclusive endpoints are fine.
        assert!(interpolate_spec(&grid, 0.5, 1.0).is_ok());
        assert!(interpolate_spec(&grid, 0.8, 1.0).is_ok());
    }

    #[test]
    fn bias_minimal_grid_interpolates_consistent_specs() {
        let grid = build_grid(GridKind::Mbre, None, &[0.5, 0.6, 0.7, 0.8]).unwrap();
        let spec = interpolate_spec(&grid, 0.67, 1.3).unwrap();
        assert_eq!(spec.kind, PsiKind::Mbre);
        assert_eq!(spec.radius, None);
        // Residual re-check ran inside interpolate_spec; verify the norm
        // constancy property survives interpolation approximately.
        let p = spec.params;
        for i in 1..=9 {
            let x = crate::gpd::quantile(&p, i as f64 / 10.0).unwrap();
            let n = {
                let v = eval_psi(&spec, x).unwrap();
                v.d_xi.hypot(v.d_beta / p.scale)
            };
            assert_relative_eq!(n, spec.b, max_relative = 1e-9);
        }
    }

    #[test]
    fn radius_minimax_grid_stores_and_interpolates_node_radii() {
        let grid = build_grid(GridKind::Rmxe, None, &[0.55, 0.6, 0.65, 0.7, 0.75]).unwrap();
        let mut r_lo = f64::INFINITY;
        let mut r_hi = 0.0_f64;
        for n in grid.nodes() {
            let r = n.radius.unwrap();
            assert!(r > RMXE_RANGE.0 && r < RMXE_RANGE.1, "node radius {r}");
            r_lo = r_lo.min(r);
            r_hi = r_hi.max(r);
        }
        let spec = interpolate_spec(&grid, 0.625, 1.0).unwrap();
        let r = spec.radius.unwrap();
        assert!(
            r >= r_lo && r <= r_hi,
            "interpolated radius {r} outside [{r_lo}, {r_hi}]"
        );
        assert_eq!(spec.kind, PsiKind::Omse);
    }

    #[test]
    fn threshold_reanchoring_keeps_multipliers() {
        let grid = small_omse_grid();
        let spec = interpolate_spec(&grid, 0.65, 2.0).unwrap();
        let shifted = spec.with_threshold(10.0).unwrap();
        assert_eq!(shifted.params.threshold, 10.0);
        assert_eq!(shifted.a_mat, spec.a_mat);
        assert_eq!(shifted.a_vec, spec.a_vec);
        // ψ at matched excesses agrees exactly (values chosen so the
        // threshold shift is exact in binary arithmetic).
        let z = 1.5;
        let a = eval_psi(&spec, z * 2.0).unwrap();
        let b = eval_psi(&shifted, 10.0 + z * 2.0).unwrap();
        assert_eq!(a.d_xi, b.d_xi);
        assert_eq!(a.d_beta, b.d_beta);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.txt");
        let grid = small_omse_grid();
        grid.save(&path).unwrap();
        let loaded = MultiplierGrid::load(&path).unwrap();
        assert_eq!(loaded.kind(), grid.kind());
        assert_eq!(loaded.radius(), grid.radius());
        assert_eq!(loaded.nodes().len(), grid.nodes().len());
        for (a, b) in grid.nodes().iter().zip(loaded.nodes()) {
            assert_eq!(a.xi.to_bits(), b.xi.to_bits());
            assert_eq!(a.a_mat.a11.to_bits(), b.a_mat.a11.to_bits());
            assert_eq!(a.a_mat.a12.to_bits(), b.a_mat.a12.to_bits());
            assert_eq!(a.a_mat.a21.to_bits(), b.a_mat.a21.to_bits());
            assert_eq!(a.a_mat.a22.to_bits(), b.a_mat.a22.to_bits());
            assert_eq!(a.a_vec.x.to_bits(), b.a_vec.x.to_bits());
            assert_eq!(a.a_vec.y.to_bits(), b.a_vec.y.to_bits());
            assert_eq!(a.b.to_bits(), b.b.to_bits());
            assert_eq!(a.radius.unwrap().to_bits(), b.radius.unwrap().to_bits());
        }
        // Interpolation from the loaded grid is bitwise identical.
        let s1 = interpolate_spec(&grid, 0.63, 1.0).unwrap();
        let s2 = interpolate_spec(&loaded, 0.63, 1.0).unwrap();
        assert_eq!(s1.a_mat.a11.to_bits(), s2.a_mat.a11.to_bits());
        assert_eq!(s1.b.to_bits(), s2.b.to_bits());
    }

    #[test]
    fn corrupted_grid_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.txt");
        let grid = build_grid(GridKind::Mbre, None, &[0.5, 0.6]).unwrap();
        grid.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // Wrong version.
        let bad = text.replace("v1", "v9");
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            MultiplierGrid::load(&path),
            Err(Error::GridFile(_))
        ));

        // Missing end marker (truncation).
        let bad = text.replace("end\n", "");
        std::fs::write(&path, &bad).unwrap();
        assert!(MultiplierGrid::load(&path).is_err());

        // Node count mismatch.
        let bad = text.replace("nodes 2", "nodes 3");
        std::fs::write(&path, &bad).unwrap();
        assert!(MultiplierGrid::load(&path).is_err());

        // Nonexistent file maps to the I/O error kind.
        assert!(MultiplierGrid::load(&dir.path().join("missing.txt")).is_err());
    }

    #[test]
    fn build_rejects_invalid_argument_combinations() {
        assert!(build_grid(GridKind::Omse, None, &[0.5, 0.6]).is_err());
        assert!(build_grid(
            GridKind::Mbre,
            Some(Radius::new(0.5).unwrap()),
            &[0.5, 0.6]
        )
        .is_err());
        assert!(build_grid(
            GridKind::Rmxe,
            Some(Radius::new(0.5).unwrap()),
            &[0.5, 0.6]
        )
        .is_err());
        let r = Some(Radius::new(0.5).unwrap());
        assert!(build_grid(GridKind::Omse, r, &[0.5]).is_err());
        assert!(build_grid(GridKind::Omse, r, &[0.6, 0.5]).is_err());
        assert!(build_grid(GridKind::Omse, r, &[0.5, 0.5]).is_err());
        assert!(build_grid(GridKind::Omse, Some(Radius::new(0.0).unwrap()), &[0.5, 0.6]).is_err());
    }

    #[test]
    fn default_nodes_cover_the_operational_range() {
        let nodes = default_xi_nodes();
        assert_eq!(nodes.len(), 59);
        assert_eq!(nodes[0], 0.1);
        assert_eq!(*nodes.last().unwrap(), 3.0);
        for w in nodes.windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.05, max_relative = 1e-12);
        }
    }
}
