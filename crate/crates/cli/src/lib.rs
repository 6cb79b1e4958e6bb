//! Command implementations behind the `dynema` binary.
//!
//! Commands write human-readable output to the supplied writers and return a
//! [`CliError`] whose [`CliError::exit_code`] the binary forwards.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use dynema::metrics::{compute_metrics, round_display};
use dynema::trainer::train_continual;
use dynema::{AccuracyMatrix, MetricsReport, Policy, RunArtifacts, RunConfig};

pub use config::{CliConfig, Overrides, PolicyKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Runtime(#[from] dynema::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for anything the user can fix in their inputs, 2 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 1,
            CliError::Runtime(_) | CliError::Io(_) => 2,
        }
    }
}

fn validated(run: RunConfig) -> Result<RunConfig, CliError> {
    run.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(run)
}

fn notice_defaults(cfg: &CliConfig, err: &mut dyn Write) -> std::io::Result<()> {
    if !cfg.defaulted.is_empty() {
        writeln!(
            err,
            "notice: using defaults for {}",
            cfg.defaulted.join(", ")
        )?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub artifacts: RunArtifacts,
    pub report: MetricsReport,
}

/// Trains one policy and writes its artifacts to the configured directory.
pub fn cmd_run(
    config_path: Option<&Path>,
    overrides: &Overrides,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<RunOutcome, CliError> {
    let cfg = CliConfig::resolve(config_path, overrides)?;
    notice_defaults(&cfg, err)?;
    if overrides.beta.is_some() && cfg.policy != PolicyKind::Fixed {
        writeln!(
            err,
            "notice: --beta only affects the fixed policy; ignoring it"
        )?;
    }
    let run = validated(cfg.run_config())?;
    let artifacts = train_continual(&run)?;
    artifacts.write_to_dir(&cfg.out_dir)?;
    let report = compute_metrics(&artifacts.accuracy_matrix);
    writeln!(out, "policy={}", run.policy.name())?;
    write!(out, "{}", report.summary())?;
    writeln!(err, "wrote {}", cfg.out_dir.display())?;
    Ok(RunOutcome {
        out_dir: cfg.out_dir,
        artifacts,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: &'static str,
    pub report: MetricsReport,
}

pub const ABLATION_COLUMNS: [&str; 3] = ["Avg.ACC", "Forgetting", "New.ACC"];

fn ablation_cells(report: &MetricsReport, places: Option<usize>) -> [String; 3] {
    let fmt = |v: f64| match places {
        Some(p) => format!("{:.*}", p, round_display(v, p)),
        None => v.to_string(),
    };
    [
        fmt(report.avg_acc),
        report.forgetting.map_or_else(|| "n/a".to_string(), fmt),
        fmt(report.new_acc),
    ]
}

/// Fixed-width table, one row per arm.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8}", "arm");
    for c in ABLATION_COLUMNS {
        s += &format!("{c:>12}");
    }
    s.push('\n');
    for row in rows {
        s += &format!("{:<8}", row.arm);
        for cell in ablation_cells(&row.report, Some(row.report.unit.display_places())) {
            s += &format!("{cell:>12}");
        }
        s.push('\n');
    }
    s
}

fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> std::io::Result<()> {
    let mut s = format!("arm,{}\n", ABLATION_COLUMNS.join(","));
    for row in rows {
        s += &format!(
            "{},{}\n",
            row.arm,
            ablation_cells(&row.report, None).join(",")
        );
    }
    std::fs::write(path, s)
}

/// Runs the plain, fixed and llaca arms on the same seeds. Each arm's
/// artifacts go to `<out>/<arm>/`; the table also lands in `<out>/ablation.csv`.
pub fn cmd_ablate(
    config_path: Option<&Path>,
    overrides: &Overrides,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<Vec<AblationRow>, CliError> {
    let cfg = CliConfig::resolve(config_path, overrides)?;
    notice_defaults(&cfg, err)?;
    let arms = [
        Policy::Plain,
        Policy::FixedEma(cfg.fixed_beta),
        Policy::Dynamic,
    ];
    let runs = arms
        .iter()
        .map(|&p| validated(cfg.run.clone().with_policy(p)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::with_capacity(arms.len());
    for run in &runs {
        let artifacts = train_continual(run)?;
        artifacts.write_to_dir(cfg.out_dir.join(run.policy.name()))?;
        rows.push(AblationRow {
            arm: run.policy.name(),
            report: compute_metrics(&artifacts.accuracy_matrix),
        });
    }
    write_ablation_csv(&rows, &cfg.out_dir.join("ablation.csv"))?;
    write!(out, "{}", format_ablation_table(&rows))?;
    writeln!(err, "wrote {}", cfg.out_dir.display())?;
    Ok(rows)
}

/// Prints the metric summary of a stored accuracy matrix.
pub fn cmd_metrics(matrix_path: &Path, out: &mut dyn Write) -> Result<MetricsReport, CliError> {
    let matrix = AccuracyMatrix::load_csv(matrix_path).map_err(|e| match e {
        dynema::Error::Io(io) => {
            CliError::Input(format!("cannot read {}: {io}", matrix_path.display()))
        }
        other => CliError::Input(format!("{}: {other}", matrix_path.display())),
    })?;
    let report = compute_metrics(&matrix);
    write!(out, "{}", report.summary())?;
    Ok(report)
}
