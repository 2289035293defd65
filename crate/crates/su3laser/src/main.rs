//! Command-line front end: parameter sweeps over the simulation engines
//! with CSV/JSON emission, dataset presets, regime checking, and table
//! fits.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use su3laser::params::validate_regime;
use su3laser::sweep::{
    self, AxisSpec, ConfigFile, Engine, FitModel, OutputFormat, ResultRow, SweepSpec,
};
use su3laser::{Error, Result};

#[derive(Parser)]
#[command(
    name = "su3laser",
    version,
    about = "Steady states, photon statistics, linewidth, and cavity pulling of a \
             collective three-level superradiant laser",
    after_help = "Exactly one of --preset or --config selects the run. Presets: \
                  fig2, fig3, fig3d, figS2, figS3. Exit code 0 means every grid \
                  point succeeded; failed points keep their error message in the \
                  emitted table."
)]
struct Cli {
    /// Built-in dataset preset (fig2, fig3, fig3d, figS2, figS3).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,

    /// TOML run description; see the crate documentation for the schema.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Engine override: exact-su3, exact-su2, meanfield, cumulant, oracle.
    #[arg(long)]
    engine: Option<String>,

    /// Swept grid, as axis:lo:hi:count[:log] with axis Omega, W, N, or chi_x.
    #[arg(long)]
    sweep: Option<String>,

    /// Output path; the table goes to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format: csv or json.
    #[arg(long, default_value = "csv")]
    format: String,

    /// Parallel workers over grid points.
    #[arg(long)]
    workers: Option<usize>,

    /// Lasing-cavity linewidth in 1/s, used to scale pulling coefficients.
    #[arg(long = "kappa-x")]
    kappa_x: Option<f64>,

    /// Check the separation-of-scales inequalities in the config's
    /// [physical] section before running; refuse to run if any fails.
    #[arg(long)]
    check_regime: bool,

    /// Post-run fit over the emitted table, as model:column with model
    /// thermo or linear (for example thermo:linewidth_per_s).
    #[arg(long)]
    fit: Option<String>,
}

fn build_specs(cli: &Cli) -> Result<Vec<SweepSpec>> {
    let mut specs = if let Some(name) = &cli.preset {
        if cli.check_regime {
            return Err(Error::InvalidParameter(
                "--check-regime reads the [physical] section of a --config file".into(),
            ));
        }
        sweep::preset(name)?
    } else if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let (spec, physical) = ConfigFile::parse(&text)?.into_spec();
        if cli.check_regime {
            let p = physical.ok_or_else(|| {
                Error::InvalidParameter(
                    "--check-regime needs a [physical] section in the config".into(),
                )
            })?;
            let report = validate_regime(&p);
            for check in &report.checks {
                eprintln!(
                    "su3laser: regime {}: {:.3e} vs {:.3e} (margin {:.1}, need {:.0}) {}",
                    check.name,
                    check.left,
                    check.right,
                    check.margin,
                    report.threshold,
                    if check.satisfied { "ok" } else { "VIOLATED" },
                );
            }
            if !report.all_satisfied() {
                return Err(Error::InvalidParameter(
                    "the operating point violates the regime hierarchy; see the \
                     checks above"
                        .into(),
                ));
            }
        }
        vec![spec]
    } else {
        return Err(Error::InvalidParameter(
            "select a run with --preset <name> or --config <path>".into(),
        ));
    };

    for spec in &mut specs {
        if let Some(engine) = &cli.engine {
            spec.engine = engine.parse::<Engine>()?;
        }
        if let Some(text) = &cli.sweep {
            spec.sweep = Some(AxisSpec::parse(text)?);
        }
        if let Some(workers) = cli.workers {
            spec.workers = workers;
        }
        if let Some(kappa) = cli.kappa_x {
            spec.kappa_x = Some(kappa);
        }
        spec.progress = true;
    }
    Ok(specs)
}

fn emit_rows(cli: &Cli, rows: &[ResultRow]) -> Result<()> {
    let format: OutputFormat = cli.format.parse()?;
    match &cli.out {
        Some(path) => {
            let mut file = fs::File::create(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            sweep::emit(rows, format, &mut file)?;
            eprintln!("su3laser: wrote {} rows to {}", rows.len(), path.display());
        }
        None => {
            let stdout = io::stdout();
            sweep::emit(rows, format, &mut stdout.lock())?;
        }
    }
    Ok(())
}

fn emit_fits(cli: &Cli, rows: &[ResultRow]) -> Result<()> {
    let Some(text) = &cli.fit else {
        return Ok(());
    };
    let (model, column) = text.split_once(':').ok_or_else(|| {
        Error::Parse(format!("fit `{text}` does not match model:column"))
    })?;
    let lines = sweep::fit_rows(rows, model.parse::<FitModel>()?, column)?;
    // The table owns standard output when --out is absent; fits move to
    // standard error so the data stream stays machine-readable.
    let mut to_stdout = io::stdout();
    let mut to_stderr = io::stderr();
    let sink: &mut dyn Write = if cli.out.is_some() {
        &mut to_stdout
    } else {
        &mut to_stderr
    };
    for line in &lines {
        let coeffs: Vec<String> = line.coefficients.iter().map(|c| format!("{c:?}")).collect();
        let group = line
            .group
            .map(|g| format!(" group={g:?}"))
            .unwrap_or_default();
        writeln!(
            sink,
            "fit model={} column={}{group} coefficients=[{}] residual={:.6e} points={}",
            line.model,
            line.column,
            coeffs.join(", "),
            line.residual,
            line.points,
        )?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<usize> {
    let specs = build_specs(cli)?;
    let rows = sweep::run_plan(&specs)?;
    emit_rows(cli, &rows)?;
    emit_fits(cli, &rows)?;
    Ok(rows.iter().filter(|r| r.error.is_some()).count())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("su3laser: {failed} grid points failed; see the error column");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("su3laser: error: {e}");
            ExitCode::from(2)
        }
    }
}
