//! Command-line front end.

pub mod config;
pub mod records;
pub mod selftest;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::ranging::calibrate_offset;
use crate::sim::{run_static, run_trajectory, summarize, Motion, Row, RunSummary, Scenario, Scheme, PERCENTILES};

pub use config::{parse_scenario, parse_scenario_str, Config, CONFIG_HELP};
pub use records::{read_records, read_rows_csv, write_records, write_rows_csv, CirLogRecord};

#[derive(Debug, Parser)]
#[command(name = "crng", version, about = "Concurrent UWB ranging simulator and CIR processing pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Override the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run a single scheme (crng_threshold, crng_ss, sstwr, sstwr_comp).
    #[arg(long, global = true)]
    pub scheme: Option<String>,
    /// Row output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write CIR records, rows and a summary.
    #[command(after_long_help = CONFIG_HELP)]
    Simulate {
        #[arg(value_enum)]
        mode: Mode,
        config: PathBuf,
    },
    /// Run the offline pipeline on logged CIR records.
    #[command(after_long_help = CONFIG_HELP)]
    Process { records: PathBuf, config: PathBuf },
    /// Print summary tables for a rows CSV.
    Report { rows: PathBuf },
    /// Run the analytic self-checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Static,
    Trajectory,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 2,
        _ => 1,
    }
}

fn apply_overrides(cli: &Cli, scn: &mut Scenario) -> Result<()> {
    if let Some(seed) = cli.seed {
        scn.seed = seed;
    }
    if let Some(name) = &cli.scheme {
        let s = Scheme::parse(name).ok_or_else(|| Error::Validation(format!("unknown scheme {name:?}")))?;
        scn.schemes = vec![s];
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_rows(cli: &Cli, rows: &[Row]) -> Result<PathBuf> {
    let path = match cli.format {
        Format::Csv => cli.out.join("rows.csv"),
        Format::Jsonl => cli.out.join("rows.jsonl"),
    };
    let w = create(&path)?;
    match cli.format {
        Format::Csv => records::write_rows_csv(w, rows)?,
        Format::Jsonl => records::write_rows_jsonl(w, rows)?,
    }
    Ok(path)
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { mode, config } => {
            let mut scn = parse_scenario(config)?;
            apply_overrides(cli, &mut scn)?;
            let out = match mode {
                Mode::Static => run_static(&scn)?,
                Mode::Trajectory => run_trajectory(&scn)?,
            };
            std::fs::create_dir_all(&cli.out)?;
            let logs: Vec<CirLogRecord> = out.records.iter().map(CirLogRecord::from_exchange).collect();
            records::write_records(create(&cli.out.join("records.jsonl"))?, &logs)?;
            let rows_path = write_rows(cli, &out.rows)?;
            let report = format_report(&out.summary, &out.rows);
            std::fs::write(cli.out.join("summary.txt"), &report)?;
            print!("{report}");
            eprintln!("wrote {} records and {}", logs.len(), rows_path.display());
            Ok(())
        }
        Command::Process { records: path, config } => {
            let mut scn = parse_scenario(config)?;
            apply_overrides(cli, &mut scn)?;
            scn.schemes.retain(|s| s.algorithm().is_some());
            if scn.schemes.is_empty() {
                return Err(Error::Validation("process needs a concurrent-ranging scheme".into()));
            }
            let logs = read_records(BufReader::new(File::open(path)?))?;
            let recs = records::decode_records(&logs, &scn.params)?;
            let rows = crate::sim::process_records(&scn, &recs)?;
            std::fs::create_dir_all(&cli.out)?;
            let rows_path = write_rows(cli, &rows)?;
            let summary = summarize(&rows, scn.outlier_threshold_m);
            print!("{}", format_report(&summary, &rows));
            eprintln!("wrote {}", rows_path.display());
            Ok(())
        }
        Command::Report { rows } => {
            let rows = read_rows_csv(BufReader::new(File::open(rows)?))?;
            if rows.is_empty() {
                return Err(Error::Validation("rows file is empty".into()));
            }
            let summary = summarize(&rows, crate::sim::DEFAULT_OUTLIER_THRESHOLD_M);
            print!("{}", format_report(&summary, &rows));
            Ok(())
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut ok = true;
            for r in &results {
                println!("{} {:<34} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Validation("self-test failed".into()))
            }
        }
    }
}

fn cm(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{:.1}", v * 100.0)
    }
}

/// Text tables of error statistics (centimetres) per scheme.
pub fn format_report(summary: &RunSummary, rows: &[Row]) -> String {
    let mut s = String::new();
    let header = {
        let mut h = format!("{:<8}{:>7}{:>8}{:>8}{:>8}", "", "n", "median", "mean", "std");
        for p in PERCENTILES {
            let _ = write!(h, "{:>8}", format!("p{p}"));
        }
        h
    };
    for sc in &summary.schemes {
        let _ = writeln!(s, "== {} ==", sc.scheme.name());
        let _ = writeln!(s, "ranging error [cm]");
        let _ = writeln!(s, "{header}");
        let line = |label: &str, st: &crate::sim::ErrorStats| {
            let mut l = format!("{:<8}{:>7}{:>8}{:>8}{:>8}", label, st.count, cm(st.median), cm(st.mean), cm(st.std));
            for v in st.abs_percentiles {
                let _ = write!(l, "{:>8}", cm(v));
            }
            l
        };
        for (i, st) in sc.per_responder.iter().enumerate() {
            let _ = writeln!(s, "{}", line(&format!("R{}", i + 1), st));
        }
        let _ = writeln!(s, "{}", line("all", &sc.ranging));
        let _ = writeln!(s, "localization error [cm]");
        let _ = writeln!(s, "{header}");
        let _ = writeln!(s, "{}", line("pos", &sc.localization));
        let _ = writeln!(
            s,
            "success: ranging {:.2}%  localization {:.2}%  outliers: ranging {}  localization {}  exchanges {}",
            sc.ranging_success_rate * 100.0,
            sc.localization_success_rate * 100.0,
            sc.ranging_outliers,
            sc.localization_outliers,
            sc.exchanges
        );
        if sc.scheme.algorithm().is_some() {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.scheme == sc.scheme && r.valid && (r.d_est - r.d_true).abs() <= crate::sim::DEFAULT_OUTLIER_THRESHOLD_M)
                .map(|r| (r.d_true, r.d_est))
                .collect();
            match calibrate_offset(&pairs) {
                Ok(off) => {
                    let _ = writeln!(s, "suggested additional calibration offset: {off:+.4} m");
                }
                Err(e) => {
                    let _ = writeln!(s, "calibration offset unavailable: {e}");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Convenience for callers that hold a scenario in memory.
pub fn run_scenario(scn: &Scenario) -> Result<crate::sim::RunOutput> {
    match scn.motion {
        Motion::Static(_) => run_static(scn),
        Motion::Trajectory(_) => run_trajectory(scn),
    }
}
