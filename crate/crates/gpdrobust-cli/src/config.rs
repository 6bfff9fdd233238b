//! Run configuration: flag parsing targets, optional TOML file merge, and
//! the resolved, hashed [`RunConfig`] every command works from.
//!
//! Precedence is fixed: command-line flags win over config-file entries,
//! which win over built-in defaults. The resolved configuration is
//! serialized canonically and hashed (SHA-256); the hash is stamped into
//! every output file so results can be traced back to the exact settings
//! that produced them.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// Which estimator drives the fitting pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    /// Classical maximum likelihood.
    Mle,
    /// Median/kMad matching only (no correction step).
    Medkmad,
    /// MedkMad start, then a bias-minimal one-step correction.
    Mbre,
    /// MedkMad start, then an MSE-optimal one-step at a fixed radius.
    Omse,
    /// MedkMad start, then an MSE-optimal one-step at the least-favorable
    /// radius (radius-minimax).
    Rmxe,
}

impl fmt::Display for EstimatorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EstimatorChoice::Mle => "mle",
            EstimatorChoice::Medkmad => "medkmad",
            EstimatorChoice::Mbre => "mbre",
            EstimatorChoice::Omse => "omse",
            EstimatorChoice::Rmxe => "rmxe",
        };
        f.write_str(s)
    }
}

/// Output encoding for the diagnostic and study tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatChoice {
    Csv,
    Json,
}

/// QQ-plot band construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandChoice {
    Pointwise,
    Simultaneous,
}

/// Which multiplier family a grid archive holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    Mbre,
    Omse,
    Rmxe,
}

/// Every tunable, as optional values. Used twice: as the clap argument
/// set (flags) and as the TOML deserialization target (file), so the two
/// sources line up field for field.
#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// CSV file of loss records (required by every command except
    /// build-grid).
    #[arg(long)]
    #[serde(default)]
    pub input: Option<PathBuf>,

    /// Loss threshold u; only exceedances x > u enter the tail fit.
    #[arg(long)]
    #[serde(default)]
    pub threshold: Option<f64>,

    /// Estimator for the fitting pipeline [default: rmxe].
    #[arg(long, value_enum)]
    #[serde(default)]
    pub estimator: Option<EstimatorChoice>,

    /// Contamination-neighborhood radius (required when estimator=omse;
    /// also the radius of an omse grid for build-grid).
    #[arg(long)]
    #[serde(default)]
    pub radius: Option<f64>,

    /// Tuning constant k of the kMad scale used by the starting
    /// estimator [default: 10].
    #[arg(long)]
    #[serde(default)]
    pub k: Option<f64>,

    /// Confidence level of the value-at-risk quantile [default: 0.999].
    #[arg(long)]
    #[serde(default)]
    pub alpha: Option<f64>,

    /// Loss frequency (expected losses per unit time). Alternative to
    /// --institutions/--years.
    #[arg(long)]
    #[serde(default)]
    pub lambda: Option<f64>,

    /// Number of institutions behind the loss records, for frequency
    /// estimation from count data.
    #[arg(long)]
    #[serde(default)]
    pub institutions: Option<usize>,

    /// Observation window in years, for frequency estimation from count
    /// data.
    #[arg(long)]
    #[serde(default)]
    pub years: Option<f64>,

    /// Time horizon the frequency is scaled to [default: 1].
    #[arg(long)]
    #[serde(default)]
    pub horizon: Option<f64>,

    /// Master seed for every randomized step [default: 0].
    #[arg(long)]
    #[serde(default)]
    pub seed: Option<u64>,

    /// Output directory [default: .].
    #[arg(long)]
    #[serde(default)]
    pub out: Option<PathBuf>,

    /// Encoding for table outputs [default: csv].
    #[arg(long, value_enum)]
    #[serde(default)]
    pub format: Option<FormatChoice>,

    /// Keep only records whose business_line column equals this value.
    #[arg(long)]
    #[serde(default)]
    pub business_line: Option<String>,

    /// Keep only records whose event_type column equals this value.
    #[arg(long)]
    #[serde(default)]
    pub event_type: Option<String>,

    /// Multiplier-grid archive: read by fit/opvar/diagnose/study when
    /// estimator=rmxe, written by build-grid.
    #[arg(long)]
    #[serde(default)]
    pub grid_file: Option<PathBuf>,

    /// Nominal confidence level of the QQ band [default: 0.95].
    #[arg(long)]
    #[serde(default)]
    pub band_level: Option<f64>,

    /// QQ band construction [default: simultaneous].
    #[arg(long, value_enum)]
    #[serde(default)]
    pub band_kind: Option<BandChoice>,

    /// Contamination fraction for the study command [default: 0.05].
    #[arg(long)]
    #[serde(default)]
    pub eps: Option<f64>,

    /// Monte-Carlo replicates for the study command [default: 500].
    #[arg(long)]
    #[serde(default)]
    pub reps: Option<usize>,

    /// Per-replicate sample size for the study command [default: 1000].
    #[arg(long)]
    #[serde(default)]
    pub study_n: Option<usize>,

    /// Multiplier family for build-grid [default: rmxe].
    #[arg(long, value_enum)]
    #[serde(default)]
    pub grid_kind: Option<GridChoice>,

    /// Smallest shape node of a custom grid (give all of --xi-min,
    /// --xi-max, --xi-step or none).
    #[arg(long)]
    #[serde(default)]
    pub xi_min: Option<f64>,

    /// Largest shape node of a custom grid.
    #[arg(long)]
    #[serde(default)]
    pub xi_max: Option<f64>,

    /// Shape-node spacing of a custom grid.
    #[arg(long)]
    #[serde(default)]
    pub xi_step: Option<f64>,
}

impl RawConfig {
    /// Field-wise precedence merge: `self` (flags) wins, `file` fills the
    /// gaps.
    fn or(self, file: RawConfig) -> RawConfig {
        RawConfig {
            input: self.input.or(file.input),
            threshold: self.threshold.or(file.threshold),
            estimator: self.estimator.or(file.estimator),
            radius: self.radius.or(file.radius),
            k: self.k.or(file.k),
            alpha: self.alpha.or(file.alpha),
            lambda: self.lambda.or(file.lambda),
            institutions: self.institutions.or(file.institutions),
            years: self.years.or(file.years),
            horizon: self.horizon.or(file.horizon),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            business_line: self.business_line.or(file.business_line),
            event_type: self.event_type.or(file.event_type),
            grid_file: self.grid_file.or(file.grid_file),
            band_level: self.band_level.or(file.band_level),
            band_kind: self.band_kind.or(file.band_kind),
            eps: self.eps.or(file.eps),
            reps: self.reps.or(file.reps),
            study_n: self.study_n.or(file.study_n),
            grid_kind: self.grid_kind.or(file.grid_kind),
            xi_min: self.xi_min.or(file.xi_min),
            xi_max: self.xi_max.or(file.xi_max),
            xi_step: self.xi_step.or(file.xi_step),
        }
    }
}

/// The fully resolved settings of one run. Serialization order is the
/// declaration order below; the SHA-256 of the canonical JSON rendering
/// is the run's `config_hash`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub input: Option<PathBuf>,
    pub threshold: f64,
    pub estimator: EstimatorChoice,
    pub radius: Option<f64>,
    pub k: f64,
    pub alpha: f64,
    pub lambda: Option<f64>,
    pub institutions: Option<usize>,
    pub years: Option<f64>,
    pub horizon: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub format: FormatChoice,
    pub business_line: Option<String>,
    pub event_type: Option<String>,
    pub grid_file: Option<PathBuf>,
    pub band_level: f64,
    pub band_kind: BandChoice,
    pub eps: f64,
    pub reps: usize,
    pub study_n: usize,
    pub grid_kind: GridChoice,
    pub xi_min: Option<f64>,
    pub xi_max: Option<f64>,
    pub xi_step: Option<f64>,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Load the optional TOML file, merge with flags (flags win), apply
/// defaults, and validate for `command`.
pub fn resolve(
    command: &'static str,
    flags: RawConfig,
    config_path: Option<&Path>,
) -> Result<RunConfig, Failure> {
    let merged = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                usage(format!("cannot read config file {}: {e}", p.display()))
            })?;
            let file: RawConfig = toml::from_str(&text).map_err(|e| {
                usage(format!("config file {}: {e}", p.display()))
            })?;
            flags.or(file)
        }
        None => flags,
    };

    let cfg = RunConfig {
        command,
        input: merged.input,
        threshold: merged.threshold.unwrap_or(0.0),
        estimator: merged.estimator.unwrap_or(EstimatorChoice::Rmxe),
        radius: merged.radius,
        k: merged.k.unwrap_or(10.0),
        alpha: merged.alpha.unwrap_or(0.999),
        lambda: merged.lambda,
        institutions: merged.institutions,
        years: merged.years,
        horizon: merged.horizon.unwrap_or(1.0),
        seed: merged.seed.unwrap_or(0),
        out: merged.out.unwrap_or_else(|| PathBuf::from(".")),
        format: merged.format.unwrap_or(FormatChoice::Csv),
        business_line: merged.business_line,
        event_type: merged.event_type,
        grid_file: merged.grid_file,
        band_level: merged.band_level.unwrap_or(0.95),
        band_kind: merged.band_kind.unwrap_or(BandChoice::Simultaneous),
        eps: merged.eps.unwrap_or(0.05),
        reps: merged.reps.unwrap_or(500),
        study_n: merged.study_n.unwrap_or(1000),
        grid_kind: merged.grid_kind.unwrap_or(GridChoice::Rmxe),
        xi_min: merged.xi_min,
        xi_max: merged.xi_max,
        xi_step: merged.xi_step,
    };
    validate(&cfg)?;
    Ok(cfg)
}

/// Range and existence checks. Every violation is a usage error: the run
/// has not touched any data yet.
fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    let needs_input = cfg.command != "build-grid";
    match (&cfg.input, needs_input) {
        (None, true) => return Err(usage("--input is required for this command")),
        (Some(p), _) if !p.is_file() => {
            return Err(usage(format!("input file {} does not exist", p.display())))
        }
        _ => {}
    }
    if !(cfg.threshold >= 0.0) || !cfg.threshold.is_finite() {
        return Err(usage(format!(
            "--threshold must be finite and nonnegative, got {}",
            cfg.threshold
        )));
    }
    if let Some(r) = cfg.radius {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(usage(format!(
                "--radius must be finite and nonnegative, got {r}"
            )));
        }
    }
    if cfg.estimator == EstimatorChoice::Omse && cfg.radius.is_none() {
        return Err(usage(
            "--estimator omse needs the neighborhood radius: pass --radius",
        ));
    }
    if !(cfg.k > 0.0) || !cfg.k.is_finite() {
        return Err(usage(format!("--k must be positive and finite, got {}", cfg.k)));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(usage(format!(
            "--alpha must lie strictly between 0 and 1, got {}",
            cfg.alpha
        )));
    }
    if let Some(l) = cfg.lambda {
        if !(l > 0.0) || !l.is_finite() {
            return Err(usage(format!(
                "--lambda must be positive and finite, got {l}"
            )));
        }
    }
    if let Some(y) = cfg.years {
        if !(y > 0.0) || !y.is_finite() {
            return Err(usage(format!("--years must be positive and finite, got {y}")));
        }
    }
    if cfg.institutions == Some(0) {
        return Err(usage("--institutions must be at least 1"));
    }
    if !(cfg.horizon > 0.0) || !cfg.horizon.is_finite() {
        return Err(usage(format!(
            "--horizon must be positive and finite, got {}",
            cfg.horizon
        )));
    }
    if !(cfg.band_level > 0.0 && cfg.band_level < 1.0) {
        return Err(usage(format!(
            "--band-level must lie strictly between 0 and 1, got {}",
            cfg.band_level
        )));
    }
    if !(cfg.eps >= 0.0 && cfg.eps < 1.0) {
        return Err(usage(format!(
            "--eps must lie in [0, 1), got {}",
            cfg.eps
        )));
    }
    if cfg.reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    if cfg.study_n == 0 {
        return Err(usage("--study-n must be at least 1"));
    }
    match cfg.command {
        "build-grid" => {
            if cfg.grid_file.is_none() {
                return Err(usage("build-grid needs --grid-file to write to"));
            }
            if cfg.grid_kind == GridChoice::Omse && cfg.radius.is_none() {
                return Err(usage("--grid-kind omse needs --radius"));
            }
            grid_nodes(cfg)?;
        }
        _ => {
            // Here the grid file is an input; it must already exist.
            if let Some(p) = &cfg.grid_file {
                if !p.is_file() {
                    return Err(usage(format!(
                        "grid file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Shape nodes for build-grid: either the full --xi-min/--xi-max/--xi-step
/// triple or none of it (library default nodes).
pub fn grid_nodes(cfg: &RunConfig) -> Result<Vec<f64>, Failure> {
    match (cfg.xi_min, cfg.xi_max, cfg.xi_step) {
        (None, None, None) => Ok(gpdrobust::grid::default_xi_nodes()),
        (Some(lo), Some(hi), Some(step)) => {
            if !(lo > 0.0) || !lo.is_finite() {
                return Err(usage(format!(
                    "--xi-min must be positive and finite, got {lo}"
                )));
            }
            if !(hi > lo) || !hi.is_finite() {
                return Err(usage(format!(
                    "--xi-max must be finite and larger than --xi-min, got {hi}"
                )));
            }
            if !(step > 0.0) || !step.is_finite() {
                return Err(usage(format!(
                    "--xi-step must be positive and finite, got {step}"
                )));
            }
            let count = ((hi - lo) / step).round() as usize;
            if count == 0 || ((lo + count as f64 * step) - hi).abs() > 1e-9 {
                return Err(usage(format!(
                    "--xi-step {step} does not evenly divide [{lo}, {hi}]"
                )));
            }
            Ok((0..=count).map(|i| lo + step * i as f64).collect())
        }
        _ => Err(usage(
            "give all of --xi-min, --xi-max, --xi-step or none of them",
        )),
    }
}

/// SHA-256 of the canonical JSON rendering of the resolved configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canon.as_bytes());
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn flags_with_input(dir: &tempfile::TempDir) -> (RawConfig, PathBuf) {
        let input = dir.path().join("losses.csv");
        std::fs::write(&input, "loss_amount\n1.0\n").unwrap();
        let flags = RawConfig {
            input: Some(input.clone()),
            ..RawConfig::default()
        };
        (flags, input)
    }

    #[test]
    fn defaults_fill_everything_the_caller_omits() {
        let dir = tempfile::tempdir().unwrap();
        let (flags, input) = flags_with_input(&dir);
        let cfg = resolve("fit", flags, None).unwrap();
        assert_eq!(cfg.input.as_deref(), Some(input.as_path()));
        assert_eq!(cfg.threshold, 0.0);
        assert_eq!(cfg.estimator, EstimatorChoice::Rmxe);
        assert_eq!(cfg.k, 10.0);
        assert_eq!(cfg.alpha, 0.999);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.format, FormatChoice::Csv);
        assert_eq!(cfg.band_level, 0.95);
        assert_eq!(cfg.band_kind, BandChoice::Simultaneous);
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let (mut flags, _) = flags_with_input(&dir);
        let cfg_path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&cfg_path).unwrap();
        writeln!(f, "threshold = 5.0\nseed = 9\nestimator = \"mbre\"").unwrap();
        drop(f);

        flags.seed = Some(42); // flag beats file
        let cfg = resolve("fit", flags, Some(&cfg_path)).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.threshold, 5.0); // file beats default
        assert_eq!(cfg.estimator, EstimatorChoice::Mbre);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (flags, _) = flags_with_input(&dir);
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(&cfg_path, "thresold = 5.0\n").unwrap();
        let err = resolve("fit", flags, Some(&cfg_path)).unwrap_err();
        assert!(matches!(err, Failure::Usage(_)), "got {err:?}");
    }

    #[test]
    fn range_violations_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();

        let (mut flags, _) = flags_with_input(&dir);
        flags.alpha = Some(1.5);
        assert!(matches!(
            resolve("fit", flags, None),
            Err(Failure::Usage(_))
        ));

        let (mut flags, _) = flags_with_input(&dir);
        flags.estimator = Some(EstimatorChoice::Omse); // missing --radius
        assert!(matches!(
            resolve("fit", flags, None),
            Err(Failure::Usage(_))
        ));

        let flags = RawConfig::default(); // missing --input
        assert!(matches!(
            resolve("fit", flags, None),
            Err(Failure::Usage(_))
        ));
    }

    #[test]
    fn custom_grid_nodes_must_be_a_complete_even_triple() {
        let dir = tempfile::tempdir().unwrap();
        let (mut flags, _) = flags_with_input(&dir);
        flags.grid_file = Some(dir.path().join("g.grid"));
        flags.xi_min = Some(0.4);
        flags.xi_max = Some(0.8);
        flags.xi_step = Some(0.2);
        let cfg = resolve("build-grid", flags, None).unwrap();
        let nodes = grid_nodes(&cfg).unwrap();
        assert_eq!(nodes.len(), 3);
        assert!((nodes[1] - 0.6).abs() < 1e-12);

        let (mut flags, _) = flags_with_input(&dir);
        flags.grid_file = Some(dir.path().join("g.grid"));
        flags.xi_min = Some(0.4); // partial triple
        assert!(matches!(
            resolve("build-grid", flags, None),
            Err(Failure::Usage(_))
        ));
    }

    #[test]
    fn hash_is_stable_and_sensitive_to_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let (flags, _) = flags_with_input(&dir);
        let a = resolve("fit", flags.clone(), None).unwrap();
        let b = resolve("fit", flags.clone(), None).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);

        let mut flags2 = flags.clone();
        flags2.seed = Some(1);
        let c = resolve("fit", flags2, None).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));

        let d = resolve("opvar", flags, None).unwrap();
        assert_ne!(config_hash(&a), config_hash(&d), "command name is hashed");
    }
}
