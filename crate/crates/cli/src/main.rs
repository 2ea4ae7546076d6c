use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use spikerpe_core::experiment::{self, ExperimentConfig};
use spikerpe_core::model::PeVariant;
use spikerpe_core::verify::{self, Scope, VerifyOptions};
use spikerpe_core::Error;

mod dump;
mod timing;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "spikerpe", version, about = "Spiking self-attention with binary positional encodings")]
struct Cli {
    /// Root directory for reports, runs and dataset caches.
    #[arg(long, env = "SPIKERPE_OUT", default_value = "spikerpe-out", global = true)]
    out: PathBuf,

    /// Log verbosity on stderr (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suites and write a JSON report.
    Verify {
        #[arg(value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
        /// Report path; defaults to `<out>/verify-<scope>.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Replace the Gray encoder with plain binary, to confirm the suites catch it.
        #[arg(long, hide = true)]
        mutate_gray: bool,
    },
    /// Print positional encodings as CSV.
    DumpPe {
        #[command(subcommand)]
        what: dump::DumpCmd,
    },
    /// Train one model from an experiment file.
    Train { config: PathBuf },
    /// Train several positional encodings across the config's seeds.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        /// Print CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Time attention-map construction per scheme and length.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        steps: usize,
    },
    /// Build or check the Log-PE lookup table.
    Lut {
        #[command(subcommand)]
        what: LutCmd,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    Theorem1,
    Attention,
    Gradients,
    Lut,
    Metrics,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::All => Scope::All,
            ScopeArg::Theorem1 => Scope::Theorem1,
            ScopeArg::Attention => Scope::Attention,
            ScopeArg::Gradients => Scope::Gradients,
            ScopeArg::Lut => Scope::Lut,
            ScopeArg::Metrics => Scope::Metrics,
        }
    }
}

#[derive(Subcommand)]
enum LutCmd {
    /// Fit a table and write it to a file.
    Build {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        k: u32,
        #[arg(long)]
        p: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare table biases with exact ones for every length up to the maximum.
    Check {
        #[arg(long, default_value_t = 512)]
        length_max: usize,
        /// Table file; the recorded configuration is used when absent.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Search for the cheapest exact table with at most this many segments.
        #[arg(long)]
        search_k: Option<u32>,
        #[arg(long, default_value_t = 16)]
        search_p: u32,
    },
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(c)) = err.downcast_ref::<Exit>() {
        return *c;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        Some(Error::Config(_) | Error::Format(_) | Error::Range { .. } | Error::Build(_)) => EXIT_CONFIG,
        _ => EXIT_VERIFY,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .parse_env("SPIKERPE_LOG")
        .format_timestamp(None)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if e.downcast_ref::<Exit>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Verify { scope, report, mutate_gray } => cmd_verify((*scope).into(), report.as_deref(), *mutate_gray, &cli.out),
        Command::DumpPe { what } => dump::run(what),
        Command::Train { config } => cmd_train(config, &cli.out),
        Command::Compare { config, variants, csv } => cmd_compare(config, variants, *csv, &cli.out),
        Command::Bench { sizes, dim, steps } => timing::run(sizes, *dim, *steps),
        Command::Lut { what } => cmd_lut(what),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_verify(scope: Scope, report: Option<&Path>, mutate_gray: bool, out: &Path) -> anyhow::Result<()> {
    let mut opts = VerifyOptions::default();
    if mutate_gray {
        opts.gray = |x| x;
    }
    let rep = verify::run(scope, &opts)?;
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| out.join(format!("verify-{scope}.json")));
    write_file(&path, &serde_json::to_string_pretty(&rep)?)?;
    let rows: Vec<Vec<String>> = rep
        .suites
        .iter()
        .flat_map(|s| {
            s.checks.iter().map(move |c| {
                vec![
                    s.suite.to_string(),
                    c.name.clone(),
                    if c.passed { "pass" } else { "FAIL" }.to_string(),
                    format!("{:.3}", c.seconds),
                ]
            })
        })
        .collect();
    print!("{}", experiment::text_table(&["suite", "check", "result", "seconds"], &rows));
    for (s, c) in rep.failures() {
        println!("counterexample [{} / {}]: {}", s.suite, c.name, c.detail);
    }
    log::info!("report written to {}", path.display());
    if rep.passed {
        Ok(())
    } else {
        Err(Exit(EXIT_VERIFY).into())
    }
}

fn cmd_train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg.run_spec(cfg.model.pe, cfg.seed);
    let rep = experiment::run(&spec, &cfg.output_root(out), &out.join("cache"))?;
    let m = &rep.final_metrics;
    let mut parts = vec![format!("epoch={}", rep.history.best_epoch), format!("loss={:.6}", m.loss)];
    for (name, v) in [("accuracy", m.accuracy), ("r2", m.r2), ("rse", m.rse)] {
        if let Some(v) = v {
            parts.push(format!("{name}={v:.6}"));
        }
    }
    println!("final {} seed={} {}", rep.pe, rep.seed, parts.join(" "));
    println!("{}", m.to_json());
    log::info!("run written to {}", rep.dir.display());
    Ok(())
}

fn cmd_compare(config: &Path, variants: &[String], csv: bool, out: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let variants = variants.iter().map(|v| v.parse::<PeVariant>()).collect::<Result<Vec<_>, _>>()?;
    let cmp = experiment::compare(&cfg, &variants, out)?;
    let dir = cfg.output_root(out);
    let csv_text = cmp.to_csv();
    let table = cmp.to_table();
    write_file(&dir.join("compare.csv"), &csv_text)?;
    write_file(&dir.join("compare.txt"), &table)?;
    write_file(&dir.join("compare.json"), &serde_json::to_string_pretty(&cmp)?)?;
    print!("{}", if csv { &csv_text } else { &table });
    Ok(())
}

fn cmd_lut(what: &LutCmd) -> anyhow::Result<()> {
    use spikerpe_core::lut;
    match what {
        LutCmd::Build { n, k, p, out } => {
            let table = lut::build_log2_lut(*n, *k, *p)?;
            table.write(out)?;
            println!(
                "n={n} k={k} p={p} storage_bits={} max_abs_error={:.6} file={}",
                table.storage_bits(),
                table.max_abs_error(),
                out.display()
            );
            Ok(())
        }
        LutCmd::Check { length_max, table, search_k, search_p } => {
            let table = match (table, search_k) {
                (Some(path), _) => lut::Log2Lut::read(path)?,
                (None, Some(k)) => match lut::search_exact_lut(*length_max, *k, *search_p)? {
                    Some((t, res)) => {
                        log::info!("search tried {} candidates", res.candidates_tried);
                        t
                    }
                    None => {
                        println!("no exact table with k <= {k}, p <= {search_p} for lengths up to {length_max}");
                        return Err(Exit(EXIT_VERIFY).into());
                    }
                },
                (None, None) => lut::recorded_exact_lut()?,
            };
            let bad = lut::count_matrix_mismatches(&table, *length_max)?;
            println!(
                "n={} k={} p={} storage_bits={} length_max={length_max} mismatches={bad}",
                table.n_bits(),
                table.k_segments(),
                table.p_bits(),
                table.storage_bits()
            );
            if bad == 0 {
                Ok(())
            } else {
                Err(Exit(EXIT_VERIFY).into())
            }
        }
    }
}
