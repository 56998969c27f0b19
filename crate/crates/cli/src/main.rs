//! `lorain`: batch experiment runner. Emits tidy CSV and JSONL artifacts;
//! plotting is left to external tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorain_core::css::RadioConfig;
use lorain_core::scenario::{Protocol, ScenarioConfig};
use lorain_core::{metrics, sim, wave};

/// Default output directory when `--out`/`--out-dir` is not given.
const OUT_DIR_ENV: &str = "LORAIN_OUT_DIR";

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser)]
#[command(name = "lorain", version, about = "LoRa constructive-interference and network simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep the start offset between two identical transmitters and report
    /// the largest offset that still decodes error-free in every trial.
    CiSweep(CiSweepArgs),
    /// Run the network simulator and write a trace plus metrics rows.
    Net(NetArgs),
    /// Aggregate metrics CSVs across seeds into plot-ready per-figure CSVs.
    Report(ReportArgs),
}

#[derive(Args)]
struct CiSweepArgs {
    /// Bandwidth in Hz; a single value or a comma-separated list.
    #[arg(long, value_delimiter = ',', required = true)]
    bw: Vec<u32>,
    /// Spreading factor; a single value or an inclusive range like `7..12`.
    #[arg(long, required = true)]
    sf: String,
    /// Noise level applied to the superposed waveform.
    #[arg(long, default_value_t = wave::DEFAULT_SWEEP_SNR_DB)]
    snr_db: f64,
    /// Offset grid step in nanoseconds.
    #[arg(long, default_value_t = 20.0)]
    step_ns: f64,
    /// Seeded decode trials per grid point.
    #[arg(long, default_value_t = 100)]
    trials: u32,
    /// Add a third transmitter with an independent random payload.
    #[arg(long, default_value_t = false)]
    interferer: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path; defaults to `ci_sweep.csv` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NetArgs {
    /// Scenario TOML; omitted fields fall back to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    nodes: Option<u32>,
    /// Booster fraction of the node count.
    #[arg(long)]
    boosters: Option<f64>,
    /// Seed; a single value or a comma-separated list (one run per seed).
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Repeat the run over a parameter grid, e.g. `nodes=2..20`.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics CSV files, or directories scanned for `*.csv`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, msg: msg.into() }
    }
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, msg: msg.into() }
    }
    fn data(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, msg: msg.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::CiSweep(args) => cmd_ci_sweep(args),
        Cmd::Net(args) => cmd_net(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

/// `--out-dir` flag, `LORAIN_OUT_DIR`, or the working directory, in that order.
fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parse `"7"` or an inclusive range `"7..12"`.
fn parse_range(text: &str) -> Result<Vec<u32>, CliError> {
    let bad = || CliError::usage(format!("expected N or A..B, got `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        Ok((a..=b).collect())
    } else {
        Ok(vec![text.trim().parse().map_err(|_| bad())?])
    }
}

/// Write via a temp file and rename so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::data(format!("create {}: {e}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::data(format!("write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::data(format!("rename {}: {e}", path.display())))
}

fn cmd_ci_sweep(args: CiSweepArgs) -> Result<(), CliError> {
    let sfs = parse_range(&args.sf)?;
    let mut results = Vec::new();
    for &bw in &args.bw {
        for &sf in &sfs {
            let cfg = RadioConfig::new(sf as u8, bw)
                .map_err(|e| CliError::usage(e.to_string()))?;
            let r = wave::measure_delta_max(
                &cfg,
                args.snr_db,
                args.step_ns,
                args.trials,
                args.interferer,
                args.seed,
            )
            .map_err(|e| CliError::usage(e.to_string()))?;
            results.push(r);
        }
    }

    let out = args
        .out
        .unwrap_or_else(|| out_dir(None).join("ci_sweep.csv"));
    write_atomic(&out, wave::sweep_csv(&results).as_bytes())?;

    println!("{:>8} {:>3} {:>10} {:>12}", "bw_hz", "sf", "interferer", "delta_max_us");
    for r in &results {
        println!(
            "{:>8} {:>3} {:>10} {:>12.4}",
            r.bw_hz,
            r.sf,
            if r.with_interferer { "yes" } else { "no" },
            r.delta_max_s * 1e6
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_net(args: NetArgs) -> Result<(), CliError> {
    let dir = out_dir(args.out_dir);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::data(format!("create {}: {e}", dir.display())))?;

    let mut base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("read {}: {e}", path.display())))?;
            // Echo the input config verbatim next to the artifacts.
            let name = path.file_name().unwrap_or_else(|| "config.toml".as_ref());
            write_atomic(&dir.join(name), text.as_bytes())?;
            ScenarioConfig::from_toml_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        None => ScenarioConfig::default(),
    };

    if let Some(p) = &args.protocol {
        base.protocol = match p.as_str() {
            "lorawan" => Protocol::Lorawan,
            "lorain" => Protocol::Lorain,
            other => return Err(CliError::usage(format!("unknown protocol `{other}`"))),
        };
    }
    if let Some(n) = args.nodes {
        base.nodes = n;
    }
    if let Some(f) = args.boosters {
        base.booster_fraction = f;
    }

    let node_grid: Vec<u32> = match &args.sweep {
        Some(grid) => {
            let (key, range) = grid
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("expected key=A..B, got `{grid}`")))?;
            if key.trim() != "nodes" {
                return Err(CliError::usage(format!("unsupported sweep key `{key}`")));
            }
            parse_range(range)?
        }
        None => vec![base.nodes],
    };
    let seeds = if args.seed.is_empty() { vec![base.seed] } else { args.seed.clone() };

    // Effective config after overrides, for reruns without the flags.
    write_atomic(&dir.join("effective.toml"), base.to_toml_string().as_bytes())?;

    let mut rows = String::from(metrics::CSV_HEADER);
    rows.push('\n');
    for &nodes in &node_grid {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.nodes = nodes;
            cfg.seed = seed;
            cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
            let trace =
                sim::run(&cfg).map_err(|e| CliError::config(e.to_string()))?;
            let m = metrics::compute_metrics(&trace, &cfg);
            let _ = writeln!(rows, "{}", metrics::csv_row(&cfg, &m));

            let name = format!("trace_{}_n{}_seed{}.jsonl", cfg.protocol, nodes, seed);
            let mut buf = Vec::new();
            sim::write_trace_jsonl(&trace, &mut buf)
                .map_err(|e| CliError::data(e.to_string()))?;
            write_atomic(&dir.join(name), &buf)?;
        }
    }
    let metrics_path = dir.join("metrics.csv");
    write_atomic(&metrics_path, rows.as_bytes())?;
    println!(
        "wrote {} ({} runs) and per-run traces in {}",
        metrics_path.display(),
        node_grid.len() * seeds.len(),
        dir.display()
    );
    Ok(())
}

/// Column indices in the metrics CSV for the aggregated figures.
const FIGURES: [(&str, usize); 5] = [
    ("prr_vs_nodes", 5),
    ("pdr_vs_nodes", 6),
    ("attempts_vs_nodes", 7),
    ("energy_vs_nodes", 10),
    ("bitrate_vs_nodes", 9),
];

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let dir = out_dir(args.out_dir);

    let mut files = Vec::new();
    for input in &args.inputs {
        if input.is_dir() {
            let entries = fs::read_dir(input)
                .map_err(|e| CliError::data(format!("read {}: {e}", input.display())))?;
            for entry in entries.flatten() {
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "csv") {
                    files.push(p);
                }
            }
        } else {
            files.push(input.clone());
        }
    }
    files.sort();

    // (protocol, nodes) -> per-figure samples.
    let mut groups: BTreeMap<(String, u32), Vec<Vec<f64>>> = BTreeMap::new();
    for path in &files {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == metrics::CSV_HEADER => {}
            _ => {
                return Err(CliError::data(format!(
                    "{}: not a metrics CSV (unexpected header)",
                    path.display()
                )))
            }
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != metrics::CSV_HEADER.split(',').count() {
                return Err(CliError::data(format!("{}: malformed row", path.display())));
            }
            let nodes: u32 = cols[3]
                .parse()
                .map_err(|_| CliError::data(format!("{}: bad nodes value", path.display())))?;
            let samples = groups
                .entry((cols[2].to_string(), nodes))
                .or_insert_with(|| vec![Vec::new(); FIGURES.len()]);
            for (slot, (_, col)) in samples.iter_mut().zip(FIGURES) {
                let v: f64 = cols[col].parse().map_err(|_| {
                    CliError::data(format!("{}: bad value in column {col}", path.display()))
                })?;
                slot.push(v);
            }
        }
    }
    if groups.is_empty() {
        return Err(CliError::data("no metrics rows found in the input set"));
    }

    for (fig, (name, _)) in FIGURES.iter().enumerate() {
        let mut out = String::from("protocol,nodes,mean,stddev,runs\n");
        for ((protocol, nodes), samples) in &groups {
            let xs = &samples[fig];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let _ = writeln!(out, "{protocol},{nodes},{mean:.6},{:.6},{}", var.sqrt(), xs.len());
        }
        write_atomic(&dir.join(format!("{name}.csv")), out.as_bytes())?;
    }
    println!("wrote {} aggregate CSVs to {}", FIGURES.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_syntax_accepts_single_and_inclusive_span() {
        assert_eq!(parse_range("10").unwrap(), vec![10]);
        assert_eq!(parse_range("7..12").unwrap(), vec![7, 8, 9, 10, 11, 12]);
        assert!(parse_range("12..7").is_err());
        assert!(parse_range("x..y").is_err());
    }
}
