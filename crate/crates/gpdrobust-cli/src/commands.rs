//! The five commands: fit, opvar, diagnose, study, build-grid.
//!
//! All of them share the same skeleton — resolve configuration, lock the
//! output directory, ingest data, run library routines, write stamped
//! output files — and the same determinism contract: identical
//! configuration and seed produce byte-identical files. To keep that
//! promise nothing time- or environment-dependent (timestamps, host
//! names, absolute temp paths) is ever written to an output.
//!
//! Every output starts with the same three-field provenance stamp:
//! tool version, SHA-256 hash of the resolved configuration, and master
//! seed. CSV files carry it as leading `#` lines, JSON files as leading
//! object fields.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use gpdrobust::contamination::{
    bias_mse_study, Contaminant, ContaminationSpec, StudyEstimator, StudyReport,
};
use gpdrobust::diagnostics::{
    influence_table, outlyingness_table, qq_band_table, BandKind, BandSpec, DiagnosticTable,
};
use gpdrobust::grid::{build_grid, interpolate_spec, GridKind, MultiplierGrid};
use gpdrobust::influence::{
    mle_spec, one_step, one_step_with_spec, radius_minimax, solve_mbre, solve_omse, InfluenceSpec,
    PsiKind, Radius,
};
use gpdrobust::medkmad::{medkmad_fit, KmadConfig};
use gpdrobust::mle::{mle_fit, FitResult};
use gpdrobust::oprisk::{estimate_lambda, opvar_single_loss, FrequencyModel, OpVar};
use gpdrobust::sample::{ExceedanceSummary, LossSample};
use gpdrobust::Error;

use crate::config::{
    config_hash, grid_nodes, BandChoice, EstimatorChoice, FormatChoice, GridChoice, RunConfig,
};
use crate::ingest::{ingest, Ingested};
use crate::Failure;

/// Radius range searched when the least-favorable radius is computed on
/// the fly (estimator=rmxe without a grid file). Matches the range the
/// archived grids are built over.
const RMXE_RADIUS_RANGE: (f64, f64) = (0.1, 10.0);

/// Contaminant driving the study command: a point mass at `factor` times
/// the model quantile at `prob` — a far-out gross error that any robust
/// fit must shrug off.
const STUDY_QUANTILE_PROB: f64 = 0.999;
const STUDY_QUANTILE_FACTOR: f64 = 100.0;

fn num(e: Error) -> Failure {
    Failure::Numeric(e.to_string())
}

/// Grid archives are inputs here: unreadable or corrupt files are data
/// errors, anything past parsing is numerical.
fn grid_err(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::GridFile(_) => Failure::Data(e.to_string()),
        other => Failure::Numeric(other.to_string()),
    }
}

// ---------------------------------------------------------------------
// Output plumbing: lockfile, provenance stamp, writers.
// ---------------------------------------------------------------------

/// Exclusive claim on an output directory for the lifetime of the run.
/// Created with `create_new`, removed on drop; a second process finds the
/// file and refuses to write.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, Failure> {
        let path = dir.join(".gpdrobust.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Data(format!(
                "output directory {} is locked by another run (stale? remove {})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Data(format!(
                "cannot lock output directory {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Everything a command needs to emit output: resolved config, its hash,
/// and the held directory lock.
pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    _lock: DirLock,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Ctx, Failure> {
        fs::create_dir_all(&cfg.out).map_err(|e| {
            Failure::Data(format!(
                "cannot create output directory {}: {e}",
                cfg.out.display()
            ))
        })?;
        let lock = DirLock::acquire(&cfg.out)?;
        let hash = config_hash(&cfg);
        Ok(Ctx {
            cfg,
            hash,
            _lock: lock,
        })
    }

    fn stamp_lines(&self) -> String {
        format!(
            "# tool_version={}\n# config_hash={}\n# seed={}\n",
            env!("CARGO_PKG_VERSION"),
            self.hash,
            self.cfg.seed
        )
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf, Failure> {
        let path = self.cfg.out.join(name);
        fs::write(&path, format!("{}{body}", self.stamp_lines()))
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, doc: &T) -> Result<PathBuf, Failure> {
        let path = self.cfg.out.join(name);
        let text = serde_json::to_string_pretty(doc)
            .map_err(|e| Failure::Data(format!("cannot encode {name}: {e}")))?;
        fs::write(&path, format!("{text}\n"))
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    /// Emit one diagnostic/study table under the configured format:
    /// `<stem>.csv` with `#` stamp lines, or `<stem>.json` wrapped in a
    /// stamped envelope.
    fn write_table<T: Serialize>(
        &self,
        stem: &str,
        csv_body: &str,
        payload: &T,
    ) -> Result<PathBuf, Failure> {
        match self.cfg.format {
            FormatChoice::Csv => self.write_csv(&format!("{stem}.csv"), csv_body),
            FormatChoice::Json => self.write_json(
                &format!("{stem}.json"),
                &TableDoc {
                    tool_version: env!("CARGO_PKG_VERSION"),
                    config_hash: &self.hash,
                    seed: self.cfg.seed,
                    table: payload,
                },
            ),
        }
    }

    fn ingest(&self) -> Result<Ingested, Failure> {
        let input = self
            .cfg
            .input
            .as_deref()
            .expect("validated: data commands have an input");
        let got = ingest(
            input,
            self.cfg.business_line.as_deref(),
            self.cfg.event_type.as_deref(),
        )?;
        for w in &got.warnings {
            eprintln!("warning: {w}");
        }
        Ok(got)
    }
}

#[derive(Serialize)]
struct TableDoc<'a, T: Serialize> {
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    table: &'a T,
}

/// Ingestion bookkeeping as it appears in fit.json/opvar.json.
#[derive(Serialize)]
struct SampleInfo {
    n: usize,
    exceedances: usize,
    threshold: f64,
    rows_read: usize,
    rows_rejected: usize,
    rows_filtered: usize,
}

impl SampleInfo {
    fn new(cfg: &RunConfig, got: &Ingested) -> SampleInfo {
        SampleInfo {
            n: got.sample.len(),
            exceedances: got.sample.exceedances(cfg.threshold).len(),
            threshold: cfg.threshold,
            rows_read: got.rows_read,
            rows_rejected: got.rows_rejected,
            rows_filtered: got.rows_filtered,
        }
    }
}

// ---------------------------------------------------------------------
// The shared fitting pipeline.
// ---------------------------------------------------------------------

/// A finished pipeline run: the reported fit, the starting fit when a
/// correction step was taken, and the neighborhood radius that shaped the
/// correction (fixed for omse, least-favorable for rmxe).
pub struct PipelineFit {
    pub fit: FitResult,
    pub start: Option<FitResult>,
    pub radius: Option<f64>,
}

/// Run the configured estimator: plain MLE, the median/kMad start alone,
/// or that start followed by a one-step correction with the requested
/// bounded influence.
pub fn run_pipeline(cfg: &RunConfig, sample: &LossSample) -> Result<PipelineFit, Failure> {
    let u = cfg.threshold;
    let kmad = KmadConfig::new(cfg.k).map_err(num)?;
    match cfg.estimator {
        EstimatorChoice::Mle => Ok(PipelineFit {
            fit: mle_fit(sample, u).map_err(num)?,
            start: None,
            radius: None,
        }),
        EstimatorChoice::Medkmad => Ok(PipelineFit {
            fit: medkmad_fit(sample, u, &kmad).map_err(num)?,
            start: None,
            radius: None,
        }),
        EstimatorChoice::Mbre => {
            let start = medkmad_fit(sample, u, &kmad).map_err(num)?;
            let fit = one_step(&start, PsiKind::Mbre, None, sample).map_err(num)?;
            Ok(PipelineFit {
                fit,
                start: Some(start),
                radius: None,
            })
        }
        EstimatorChoice::Omse => {
            let r = cfg.radius.expect("validated: omse has a radius");
            let start = medkmad_fit(sample, u, &kmad).map_err(num)?;
            let radius = Radius::new(r).map_err(num)?;
            let fit = one_step(&start, PsiKind::Omse, Some(radius), sample).map_err(num)?;
            Ok(PipelineFit {
                fit,
                start: Some(start),
                radius: Some(r),
            })
        }
        EstimatorChoice::Rmxe => {
            let start = medkmad_fit(sample, u, &kmad).map_err(num)?;
            let (spec, radius) = rmxe_spec_at(cfg, &start)?;
            let mut fit = one_step_with_spec(&start, &spec, sample).map_err(num)?;
            fit.estimator_name = "rmxe one-step".into();
            Ok(PipelineFit {
                fit,
                start: Some(start),
                radius,
            })
        }
    }
}

/// The radius-minimax influence anchored at the starting fit: either
/// interpolated from an archived grid (fast) or solved on the fly.
fn rmxe_spec_at(
    cfg: &RunConfig,
    start: &FitResult,
) -> Result<(InfluenceSpec, Option<f64>), Failure> {
    match &cfg.grid_file {
        Some(path) => {
            let grid = MultiplierGrid::load(path).map_err(grid_err)?;
            if grid.kind() != GridKind::Rmxe {
                return Err(Failure::Usage(format!(
                    "grid file {} holds {} multipliers; estimator=rmxe needs an rmxe grid",
                    path.display(),
                    grid.kind()
                )));
            }
            let spec = interpolate_spec(&grid, start.params.shape, start.params.scale)
                .and_then(|s| s.with_threshold(start.params.threshold))
                .map_err(num)?;
            let radius = spec.radius;
            Ok((spec, radius))
        }
        None => {
            let rm = radius_minimax(&start.params, RMXE_RADIUS_RANGE).map_err(num)?;
            Ok((rm.spec, Some(rm.radius)))
        }
    }
}

/// The bounded influence the diagnostics should weight with, re-anchored
/// at the final fitted parameters.
fn diagnostic_spec(cfg: &RunConfig, pf: &PipelineFit) -> Result<InfluenceSpec, Failure> {
    match cfg.estimator {
        EstimatorChoice::Mle | EstimatorChoice::Medkmad => Ok(mle_spec(&pf.fit.params)),
        EstimatorChoice::Mbre => solve_mbre(&pf.fit.params).map_err(num),
        EstimatorChoice::Omse | EstimatorChoice::Rmxe => {
            let r = pf.radius.expect("omse/rmxe pipelines record a radius");
            let radius = Radius::new(r).map_err(num)?;
            solve_omse(&pf.fit.params, radius).map_err(num)
        }
    }
}

// ---------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct FitDoc<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    sample: SampleInfo,
    fit: &'a FitResult,
    /// Starting fit when a one-step correction was taken.
    start: Option<&'a FitResult>,
    /// Neighborhood radius of the correction (least-favorable for rmxe).
    radius: Option<f64>,
}

pub fn cmd_fit(ctx: &Ctx) -> Result<(), Failure> {
    let got = ctx.ingest()?;
    let pf = run_pipeline(&ctx.cfg, &got.sample)?;
    let path = ctx.write_json(
        "fit.json",
        &FitDoc {
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: &ctx.hash,
            seed: ctx.cfg.seed,
            sample: SampleInfo::new(&ctx.cfg, &got),
            fit: &pf.fit,
            start: pf.start.as_ref(),
            radius: pf.radius,
        },
    )?;
    println!(
        "fit ({}): xi={:.6} beta={:.6} at u={} -> {}",
        pf.fit.estimator_name,
        pf.fit.params.shape,
        pf.fit.params.scale,
        ctx.cfg.threshold,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// opvar
// ---------------------------------------------------------------------

/// Frequency model from configuration: an explicit rate, or the Poisson
/// MLE from (loss count, institutions, years). The horizon applies to
/// both routes.
fn frequency(cfg: &RunConfig, loss_count: usize) -> Result<FrequencyModel, Failure> {
    let base = match (cfg.lambda, cfg.institutions, cfg.years) {
        (Some(l), _, _) => FrequencyModel::new(l, 1.0).map_err(num)?,
        (None, Some(inst), Some(years)) => {
            estimate_lambda(loss_count, inst, years).map_err(num)?
        }
        _ => {
            return Err(Failure::Usage(
                "opvar needs a frequency: pass --lambda, or --institutions with --years".into(),
            ))
        }
    };
    base.with_horizon(cfg.horizon).map_err(num)
}

#[derive(Serialize)]
struct OpvarDoc<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    sample: SampleInfo,
    fit: &'a FitResult,
    start: Option<&'a FitResult>,
    radius: Option<f64>,
    frequency: &'a FrequencyModel,
    alpha: f64,
    value_at_risk: &'a OpVar,
}

pub fn cmd_opvar(ctx: &Ctx) -> Result<(), Failure> {
    let got = ctx.ingest()?;
    let n = got.sample.len();
    // Frequency options are checked before the (potentially failing) fit
    // so an incomplete invocation reports the usage error, not a fit error.
    let freq = frequency(&ctx.cfg, n)?;
    let pf = run_pipeline(&ctx.cfg, &got.sample)?;
    let n_u = got.sample.exceedances(ctx.cfg.threshold).len();
    let exc = ExceedanceSummary::new(n, n_u, ctx.cfg.threshold).map_err(num)?;
    let var = opvar_single_loss(&pf.fit.params, &exc, &freq, ctx.cfg.alpha).map_err(num)?;
    let path = ctx.write_json(
        "opvar.json",
        &OpvarDoc {
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: &ctx.hash,
            seed: ctx.cfg.seed,
            sample: SampleInfo::new(&ctx.cfg, &got),
            fit: &pf.fit,
            start: pf.start.as_ref(),
            radius: pf.radius,
            frequency: &freq,
            alpha: ctx.cfg.alpha,
            value_at_risk: &var,
        },
    )?;
    println!(
        "opvar: VaR_{}={:.6e} (alpha'={:.3e}, {}) -> {}",
        ctx.cfg.alpha,
        var.value,
        var.alpha_prime,
        pf.fit.estimator_name,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct BandDoc<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    band: &'a BandSpec,
    points: &'a DiagnosticTable,
}

/// One plottable row per sorted exceedance: band geometry plus the
/// observed value and its robust weight.
fn qq_csv(band: &BandSpec, points: &DiagnosticTable) -> String {
    let mut out = String::from("position,observed,model_quantile,lower,upper,weight\n");
    for (b, p) in band.rows.iter().zip(&points.rows) {
        let upper = if b.upper.is_finite() {
            format!("{}", b.upper)
        } else {
            "inf".into()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.position, p.x, b.model_quantile, b.lower, upper, p.weight
        ));
    }
    out
}

pub fn cmd_diagnose(ctx: &Ctx) -> Result<(), Failure> {
    let got = ctx.ingest()?;
    let pf = run_pipeline(&ctx.cfg, &got.sample)?;
    let u = ctx.cfg.threshold;

    let spec = diagnostic_spec(&ctx.cfg, &pf)?;
    let influence = influence_table(&spec, &got.sample).map_err(num)?;
    let p1 = ctx.write_table("influence", &influence.to_csv(), &influence)?;

    let classical = mle_fit(&got.sample, u).map_err(num)?;
    let outlying = outlyingness_table(&got.sample, &classical, &pf.fit).map_err(num)?;
    let p2 = ctx.write_table("outlying", &outlying.to_csv(), &outlying)?;

    let band_kind = match ctx.cfg.band_kind {
        BandChoice::Pointwise => BandKind::Pointwise,
        BandChoice::Simultaneous => BandKind::Simultaneous,
    };
    let band_radius = Radius::new(pf.radius.unwrap_or(0.0)).map_err(num)?;
    let (band, points) = qq_band_table(
        &pf.fit,
        &got.sample,
        ctx.cfg.band_level,
        band_radius,
        band_kind,
    )
    .map_err(num)?;
    let p3 = match ctx.cfg.format {
        FormatChoice::Csv => ctx.write_csv("qqband.csv", &qq_csv(&band, &points))?,
        FormatChoice::Json => ctx.write_json(
            "qqband.json",
            &BandDoc {
                tool_version: env!("CARGO_PKG_VERSION"),
                config_hash: &ctx.hash,
                seed: ctx.cfg.seed,
                band: &band,
                points: &points,
            },
        )?,
    };

    println!(
        "diagnose ({}): {} influence rows, {} flagged outliers, band level {:.4}{} -> {}, {}, {}",
        pf.fit.estimator_name,
        influence.rows.len(),
        outlying.flagged_count(),
        band.radius_adjusted_level,
        if band.capped { " (capped)" } else { "" },
        p1.display(),
        p2.display(),
        p3.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// study
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct StudyDoc<'a> {
    tool_version: &'static str,
    config_hash: &'a str,
    seed: u64,
    fit: &'a FitResult,
    study: &'a StudyReport,
}

/// The study always carries the two reference arms (classical MLE and the
/// raw starting estimator); the configured estimator joins as the third
/// arm when it is a one-step kind.
fn study_arms(cfg: &RunConfig) -> Vec<StudyEstimator> {
    let mut arms = vec![StudyEstimator::Mle, StudyEstimator::MedkMad];
    match cfg.estimator {
        EstimatorChoice::Mle | EstimatorChoice::Medkmad => {}
        EstimatorChoice::Mbre => arms.push(StudyEstimator::Mbre),
        EstimatorChoice::Omse => arms.push(StudyEstimator::Omse {
            radius: cfg.radius.expect("validated: omse has a radius"),
        }),
        EstimatorChoice::Rmxe => arms.push(StudyEstimator::Rmxe),
    }
    arms
}

pub fn cmd_study(ctx: &Ctx) -> Result<(), Failure> {
    let got = ctx.ingest()?;
    let pf = run_pipeline(&ctx.cfg, &got.sample)?;
    let spec = ContaminationSpec::new(
        ctx.cfg.eps,
        Contaminant::QuantileFactor {
            prob: STUDY_QUANTILE_PROB,
            factor: STUDY_QUANTILE_FACTOR,
        },
    )
    .map_err(num)?;
    let arms = study_arms(&ctx.cfg);
    let report = bias_mse_study(
        &arms,
        &pf.fit.params,
        &spec,
        ctx.cfg.study_n,
        ctx.cfg.reps,
        ctx.cfg.seed,
    )
    .map_err(num)?;
    let path = match ctx.cfg.format {
        FormatChoice::Csv => ctx.write_csv("study.csv", &report.to_csv())?,
        FormatChoice::Json => ctx.write_json(
            "study.json",
            &StudyDoc {
                tool_version: env!("CARGO_PKG_VERSION"),
                config_hash: &ctx.hash,
                seed: ctx.cfg.seed,
                fit: &pf.fit,
                study: &report,
            },
        )?,
    };
    println!(
        "study: {} arms x {} replicates of n={} at eps={} around the fitted tail -> {}",
        report.estimators.len(),
        ctx.cfg.reps,
        ctx.cfg.study_n,
        ctx.cfg.eps,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------
// build-grid
// ---------------------------------------------------------------------

pub fn cmd_build_grid(ctx: &Ctx) -> Result<(), Failure> {
    let kind = match ctx.cfg.grid_kind {
        GridChoice::Mbre => GridKind::Mbre,
        GridChoice::Omse => GridKind::Omse,
        GridChoice::Rmxe => GridKind::Rmxe,
    };
    let radius = match kind {
        GridKind::Omse => Some(
            Radius::new(ctx.cfg.radius.expect("validated: omse grids have a radius"))
                .map_err(num)?,
        ),
        _ => None,
    };
    let nodes = grid_nodes(&ctx.cfg)?;
    let grid = build_grid(kind, radius, &nodes).map_err(num)?;

    let path = ctx
        .cfg
        .grid_file
        .clone()
        .expect("validated: build-grid has a grid file");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                Failure::Data(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    grid.save(&path)
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
    // Stamp the archive like every other output; loaders skip `#` lines.
    let body = fs::read_to_string(&path)
        .map_err(|e| Failure::Data(format!("cannot re-read {}: {e}", path.display())))?;
    fs::write(&path, format!("{}{body}", ctx.stamp_lines()))
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;

    println!(
        "build-grid: {} multipliers at {} shape nodes in [{}, {}] -> {}",
        ctx.cfg.grid_kind_name(),
        nodes.len(),
        nodes.first().expect("nodes are nonempty"),
        nodes.last().expect("nodes are nonempty"),
        path.display()
    );
    Ok(())
}

impl RunConfig {
    fn grid_kind_name(&self) -> &'static str {
        match self.grid_kind {
            GridChoice::Mbre => "mbre",
            GridChoice::Omse => "omse",
            GridChoice::Rmxe => "rmxe",
        }
    }
}
