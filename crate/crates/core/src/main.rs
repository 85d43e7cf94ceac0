use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use rank1glm::encoding::{encoding_benchmark, EncodingDataset, EncodingOptions, LambdaPolicy, DEFAULT_TOP_K};
use rank1glm::hrf_basis::peak_time;
use rank1glm::pipeline::io::{bold_header, read_bold, read_dataset, read_events, read_folds, read_matrix, read_text, write_matrix, write_simulation};
use rank1glm::pipeline::{
    cross_session_validate, fit_dataset, parse_basis, Dataset, FitOptions, Session, ValidateOptions, ValidationReport, Whitening,
};
use rank1glm::rank_one::SolverOptions;
use rank1glm::simulate::{legendre_drift, SimSpec};
use rank1glm::stats::TestResult;
use rank1glm::{Error, Result};

/// Rank-one HRF estimation for fMRI general linear models.
#[derive(Parser)]
#[command(name = "rank1glm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a `key = value` spec file.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File format of the BOLD matrices.
        #[arg(long, value_enum, default_value_t = MatrixExt::Csv)]
        format: MatrixExt,
    },
    /// Fit the rank-one model to every voxel of one or more sessions.
    Fit {
        /// One BOLD matrix per session (`.csv` or `.npy`).
        #[arg(long, num_args = 1.., required = true)]
        bold: Vec<PathBuf>,
        /// One event table per session, in the same order.
        #[arg(long, num_args = 1.., required = true)]
        events: Vec<PathBuf>,
        /// Confound matrices per session; Legendre drifts are used when omitted.
        #[arg(long, num_args = 1..)]
        confounds: Vec<PathBuf>,
        #[arg(long)]
        tr: f64,
        /// Legendre drift order used when no confounds are given.
        #[arg(long, default_value_t = 3)]
        drift_order: usize,
        /// Number of conditions; inferred from the event tables when omitted.
        #[arg(long)]
        conditions: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-session-out comparison with the canonical HRF.
    Validate {
        /// Dataset directory as written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Voxels summarized in the mean-HRF report.
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare encoding models fitted to two sets of activation estimates.
    Encode {
        /// `trials x features` stimulus features.
        #[arg(long)]
        features: PathBuf,
        /// `trials x voxels` activations from the canonical HRF.
        #[arg(long)]
        betas_canonical: PathBuf,
        /// `trials x voxels` activations from the rank-one model.
        #[arg(long)]
        betas_rank1: PathBuf,
        /// One fold label per trial.
        #[arg(long)]
        folds: PathBuf,
        /// Fixed ridge penalty; chosen per voxel from a grid when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        /// Scatter CSV of the selected voxels.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixExt {
    Csv,
    Npy,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhitenArg {
    None,
    Ar1,
}

#[derive(Args)]
struct ModelArgs {
    /// `fir:<r>` or `canonical:<derivatives>`.
    #[arg(long)]
    basis: String,
    #[arg(long, default_value_t = 1)]
    oversample: usize,
    #[arg(long, value_enum, default_value_t = WhitenArg::None)]
    whiten: WhitenArg,
    /// Span of canonical bases in seconds.
    #[arg(long, default_value_t = 32.0)]
    hrf_length: f64,
    /// Use exact off-grid onsets.
    #[arg(long)]
    asynchronous: bool,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10)]
    lbfgs_history: usize,
    /// Weight of the ridge penalty on the basis coefficients.
    #[arg(long, default_value_t = 0.0)]
    hrf_penalty: f64,
}

impl ModelArgs {
    fn fit_options(&self) -> FitOptions {
        FitOptions {
            solver: SolverOptions {
                max_iter: self.max_iter,
                tol: self.tol,
                lbfgs_history: self.lbfgs_history,
                hrf_penalty: self.hrf_penalty,
            },
            oversample: self.oversample,
            asynchronous: self.asynchronous,
            whitening: match self.whiten {
                WhitenArg::None => Whitening::None,
                WhitenArg::Ar1 => Whitening::Ar1,
            },
            workers: self.workers,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { spec, out, format } => {
            let spec = SimSpec::parse(&read_text(&spec)?)?;
            let ext = match format {
                MatrixExt::Csv => "csv",
                MatrixExt::Npy => "npy",
            };
            write_simulation(&out, &spec, ext)
        }
        Command::Fit {
            bold,
            events,
            confounds,
            tr,
            drift_order,
            conditions,
            model,
            out,
        } => {
            let dataset = load_sessions(&bold, &events, &confounds, tr, drift_order, conditions)?;
            let basis = parse_basis(&model.basis, tr, model.oversample, model.hrf_length)?;
            let fits = fit_dataset(&dataset, &basis, &model.fit_options())?;
            std::fs::create_dir_all(&out)?;
            let v = fits.len();
            let h = DMatrix::from_fn(basis.duration(), v, |i, j| fits[j].h[i]);
            let beta = DMatrix::from_fn(dataset.num_conditions(), v, |i, j| fits[j].beta[i]);
            write_matrix(&out.join("hrf.csv"), &h, &bold_header(v))?;
            write_matrix(&out.join("beta.csv"), &beta, &bold_header(v))?;
            let mut diag = std::io::BufWriter::new(std::fs::File::create(out.join("diagnostics.csv"))?);
            writeln!(diag, "voxel,objective,grad_norm,iterations,converged,degenerate,peak_time")?;
            for (j, f) in fits.iter().enumerate() {
                writeln!(
                    diag,
                    "{j},{:?},{:?},{},{},{},{:?}",
                    f.objective,
                    f.grad_norm,
                    f.iterations,
                    f.converged,
                    f.degenerate,
                    peak_time(f.h.as_slice(), basis.dt())
                )?;
            }
            diag.flush()?;
            let unconverged = fits.iter().filter(|f| !f.converged).count();
            if unconverged > 0 {
                eprintln!("warning: {unconverged} of {v} voxels stopped before reaching the gradient tolerance");
            }
            Ok(())
        }
        Command::Validate { data, model, top_k, out } => {
            let dataset = read_dataset(&data)?;
            let basis = parse_basis(&model.basis, dataset.tr(), model.oversample, model.hrf_length)?;
            let options = ValidateOptions {
                fit: model.fit_options(),
                top_k,
            };
            let report = cross_session_validate(&dataset, &basis, &options)?;
            write_report(&out, &report)
        }
        Command::Encode {
            features,
            betas_canonical,
            betas_rank1,
            folds,
            lambda,
            top_k,
            out,
        } => {
            let x = read_matrix(&features)?;
            let folds = read_folds(&folds)?;
            let canonical = EncodingDataset::new(x.clone(), read_matrix(&betas_canonical)?, folds.clone())?;
            let rank1 = EncodingDataset::new(x, read_matrix(&betas_rank1)?, folds)?;
            let options = EncodingOptions {
                lambda: lambda.map_or_else(LambdaPolicy::default, LambdaPolicy::Fixed),
                top_k,
            };
            let report = encoding_benchmark(&canonical, &rank1, &options)?;
            report.write_scatter_csv(&out)?;
            report.write_summary(&mut std::io::stdout().lock())
        }
    }
}

fn load_sessions(
    bold: &[PathBuf],
    events: &[PathBuf],
    confounds: &[PathBuf],
    tr: f64,
    drift_order: usize,
    conditions: Option<usize>,
) -> Result<Dataset> {
    if bold.len() != events.len() {
        return Err(Error::InvalidArgument(format!(
            "{} BOLD files but {} event files",
            bold.len(),
            events.len()
        )));
    }
    if !confounds.is_empty() && confounds.len() != bold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} BOLD files but {} confound files",
            bold.len(),
            confounds.len()
        )));
    }
    let tables = events.iter().map(|p| read_events(p, conditions)).collect::<Result<Vec<_>>>()?;
    let p = conditions.unwrap_or_else(|| tables.iter().map(|t| t.num_conditions()).max().unwrap_or(0));
    let mut sessions = Vec::with_capacity(bold.len());
    for (s, table) in tables.into_iter().enumerate() {
        let table = rank1glm::design::EventTable::new(table.events().to_vec(), p, table.session_id().to_string())?;
        let y = read_bold(&bold[s])?;
        let conf = match confounds.get(s) {
            Some(path) => read_matrix(path)?,
            None => legendre_drift(y.nrows(), drift_order),
        };
        sessions.push(Session::new(table, y, conf)?);
    }
    Dataset::new(sessions, tr)
}

fn test_lines(out: &mut impl Write, name: &str, test: Option<TestResult>) -> Result<()> {
    match test {
        Some(t) => {
            writeln!(out, "{name}_statistic = {}", t.statistic)?;
            writeln!(out, "{name}_p_greater = {}", t.p_value)?;
            writeln!(out, "{name}_n = {}", t.n_effective)?;
        }
        None => writeln!(out, "{name} = not computed")?,
    }
    Ok(())
}

fn write_report(out: &Path, report: &ValidationReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (v, sessions) = report.loglik_rank1.shape();
    let mut ll = std::io::BufWriter::new(std::fs::File::create(out.join("loglik.csv"))?);
    writeln!(ll, "voxel,session,loglik_rank1,loglik_canonical,loglik_null")?;
    for j in 0..v {
        for s in 0..sessions {
            writeln!(
                ll,
                "{j},{s},{:?},{:?},{:?}",
                report.loglik_rank1[(j, s)],
                report.loglik_canonical[(j, s)],
                report.loglik_null[(j, s)]
            )?;
        }
    }
    ll.flush()?;

    let summary = &report.summary;
    let mut tests = std::io::BufWriter::new(std::fs::File::create(out.join("tests.txt"))?);
    writeln!(tests, "voxels = {v}")?;
    writeln!(tests, "sessions = {sessions}")?;
    let wins = report
        .total_rank1()
        .iter()
        .zip(report.total_canonical())
        .filter(|(a, b)| **a > *b)
        .count();
    writeln!(tests, "voxels_rank1_better = {wins}")?;
    test_lines(&mut tests, "paired_t", report.t_test)?;
    test_lines(&mut tests, "wilcoxon", report.wilcoxon)?;
    writeln!(tests, "top_k = {}", summary.voxels.len())?;
    writeln!(tests, "mean_peak_time = {}", summary.mean_peak_time)?;
    writeln!(tests, "canonical_peak_time = {}", summary.canonical_peak_time)?;
    writeln!(tests, "peak_shift = {}", summary.peak_shift)?;
    tests.flush()?;

    let r = summary.mean.len();
    let table = DMatrix::from_fn(r, 4, |i, c| match c {
        0 => i as f64 * summary.dt,
        1 => summary.mean[i],
        2 => summary.sd[i],
        _ => summary.canonical[i],
    });
    let names = ["time", "mean", "sd", "canonical"].map(String::from);
    write_matrix(&out.join("mean_hrf.csv"), &table, &names)?;
    write_matrix(&out.join("hrfs.csv"), &report.hrfs, &bold_header(v))
}
