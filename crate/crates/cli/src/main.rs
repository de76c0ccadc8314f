use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use btgp::export::{export_heatmap, Which};
use btgp::pipeline::{self, Artifacts, StageTimes};
use btgp::{BtgpModel, Error, ErrorTable, Imc, PipelineConfig, Result, ValueBounds};
use clap::{Args, Parser, Subcommand};

/// Data-driven abstraction and certified reachability for stochastic systems.
#[derive(Parser)]
#[command(name = "btgp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(short, long, global = true, default_value = "casestudy.cfg")]
    config: PathBuf,
    /// Override a config key, e.g. `--set model.precision=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
    /// Run directory; shorthand for `--set output.dir=...`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Shorthand for `--set model.precision=...`.
    #[arg(short = 'q', long, global = true)]
    precision: Option<usize>,
    /// Shorthand for `--set data.seed=...`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured system and write data.csv.
    Simulate,
    /// Fit the surrogate; writes model.json.
    Fit,
    /// Compute per-cell error radii; writes errors.json.
    Bound,
    /// Build the interval Markov chain; writes imc/.
    Abstract,
    /// Run interval iteration on imc/ and write the certificate.
    Verify,
    /// Every stage in sequence.
    Run,
    /// Write a heatmap (CSV + PGM) from bounds.json.
    Export {
        #[arg(long, default_value = "v_min")]
        which: Which,
        /// Output CSV; defaults to v_min.csv / v_max.csv in the run directory.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut kv = self.overrides.clone();
        if let Some(o) = &self.out {
            kv.push(("output.dir".into(), toml_string(&o.display().to_string())));
        }
        if let Some(q) = self.precision {
            kv.push(("model.precision".into(), q.to_string()));
        }
        if let Some(s) = self.seed {
            kv.push(("data.seed".into(), s.to_string()));
        }
        PipelineConfig::load(&self.config, &kv)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn stage<R>(name: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let t = Instant::now();
    let r = f()?;
    println!("{name:<12} {:>9.3} s", t.elapsed().as_secs_f64());
    Ok(r)
}

fn print_times(t: &StageTimes) {
    for (name, v) in [
        ("data", t.data),
        ("fit", t.fit),
        ("bound", t.bound),
        ("abstraction", t.abstraction),
        ("verify", t.verify),
        ("io", t.io),
    ] {
        println!("{name:<12} {v:>9.3} s");
    }
}

/// 0 on success, 3 when interval iteration stopped before reaching `nu`.
fn converged_code(converged: bool) -> u8 {
    if converged {
        0
    } else {
        eprintln!("warning: interval iteration did not reach the requested gap");
        3
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = cli.common.config()?;
    let art = Artifacts::new(&cfg.output.dir);
    std::fs::create_dir_all(&art.dir)?;
    match &cli.command {
        Command::Simulate => {
            let data = stage("data", || pipeline::load_data(&cfg))?;
            data.write_csv(&art.data())?;
            println!("wrote {} samples to {}", data.len(), art.data().display());
        }
        Command::Fit => {
            let data = pipeline::staged_data(&cfg, &art)?;
            let (model, _) = stage("fit", || pipeline::fit_stage(&cfg, &data))?;
            model.write_json(&art.model())?;
            println!("{} occupied cells -> {}", model.aggregation().len(), art.model().display());
        }
        Command::Bound => {
            let data = pipeline::staged_data(&cfg, &art)?;
            let model = BtgpModel::read_json(&art.model()).map_err(|e| e.in_stage("bound"))?;
            let errors = stage("bound", || pipeline::bound_from_model(&cfg, &data, &model))?;
            errors.write_json(&art.errors())?;
            if errors.heuristic {
                eprintln!("warning: error radii use a subsampled estimate and are not certified");
            }
            println!("confidence {:.4} -> {}", errors.confidence, art.errors().display());
        }
        Command::Abstract => {
            let model = BtgpModel::read_json(&art.model()).map_err(|e| e.in_stage("abstract"))?;
            let errors = ErrorTable::read_json(&art.errors()).map_err(|e| e.in_stage("abstract"))?;
            let imc = stage("abstraction", || pipeline::abstract_stage(&cfg, &model, &errors))?;
            imc.write_dir(&art.imc())?;
            println!("{} transitions -> {}", imc.nnz(), art.imc().display());
        }
        Command::Verify => {
            let imc = Imc::read_dir(&art.imc()).map_err(|e| e.in_stage("verify"))?;
            let (bounds, cert) = stage("verify", || pipeline::verify_stage(&cfg, &imc))?;
            pipeline::write_verification(&cfg, &art, &bounds, &cert)?;
            println!("{cert}");
            return Ok(converged_code(bounds.converged));
        }
        Command::Run => {
            let report = pipeline::run_pipeline(&cfg)?;
            print_times(&report.times);
            println!(
                "{} occupied cells, {} transitions{}",
                report.occupied_cells,
                report.transitions,
                if report.heuristic { " (heuristic error radii)" } else { "" }
            );
            println!("{}", report.certificate);
            return Ok(converged_code(report.bounds.converged));
        }
        Command::Export { which, path } => {
            let bounds = ValueBounds::read_json(&art.bounds())?;
            let path = path.clone().unwrap_or_else(|| art.heatmap(*which));
            let files = export_heatmap(&bounds, &cfg.scheme()?, *which, &path)?;
            println!("{} {}", files.csv.display(), files.pgm.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
