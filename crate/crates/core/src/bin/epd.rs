use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use epd_sim::capacity::{comparison_table, TableSettings};
use epd_sim::metrics::{self, write_attainment_csv, write_request_summary, write_sweep_csv, GOODPUT_THRESHOLD};
use epd_sim::model::{Catalog, HardwareSpec};
use epd_sim::optimizer::{self, write_search_log, ConfigSpace, Metric, Objective, SearchProblem, Strategy};
use epd_sim::presets::{self, preset, preset_names, write_rows, ExperimentPreset};
use epd_sim::role_switch::{write_switch_log, ControllerParams};
use epd_sim::sim::run_simulation;
use epd_sim::workload::{load_trace, Arrivals};
use epd_sim::{Error, Result, SystemConfig};

#[derive(Parser)]
#[command(name = "epd", version, about = "EPD disaggregated serving simulator and optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Experiment preset; see `epd presets`.
    #[arg(long)]
    preset: Option<String>,
    /// System config file (TOML); overrides the preset's system.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Request trace CSV; arrivals are taken from the file.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "EPD_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Comma-separated request rates, e.g. `0.5,1,1.5`.
    #[arg(long, value_delimiter = ',')]
    rate_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    irp: Option<Switch>,
    #[arg(long, value_enum)]
    role_switch: Option<Switch>,
    /// Role-switch controller parameters (TOML).
    #[arg(long)]
    switch_params: Option<PathBuf>,
    /// Restrict a preset to one of its systems.
    #[arg(long)]
    system: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Irp,
    Optimizer,
    Switch,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Goodput,
    Ttft,
    Throughput,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Exhaustive,
    Random,
    Surrogate,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write the trace, request summary and event log.
    Simulate(Common),
    /// Sweep the rate grid for every system of a preset.
    Sweep(Common),
    /// Same as `sweep`, printing only the goodput per system.
    Goodput(Common),
    /// Paired feature-on/feature-off comparison.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 60)]
        trials: usize,
    },
    /// Per-GPU feasibility tables for aggregated vs disaggregated shapes.
    Capacity {
        #[arg(long, default_value = "minicpm-v-2.6")]
        model: String,
        #[arg(long, default_value_t = 0.8)]
        kv_fraction: f64,
        #[arg(long, env = "EPD_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
    },
    /// Search a configuration space for the best deployment.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Config space (TOML); defaults to the preset's space.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "goodput")]
        objective: ObjectiveArg,
        /// Cost weight per GPU.
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 60)]
        trials: usize,
        #[arg(long, value_enum, default_value = "surrogate")]
        strategy: StrategyArg,
    },
    /// List preset names.
    Presets,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    preset: Option<&'a str>,
    seed: u64,
    config_hash: String,
    goodput_threshold: f64,
    created_unix: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
}

fn hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(dir: &Path, name: &str, files: &mut Vec<String>) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    files.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_sidecar<T: Serialize>(
    dir: &Path,
    command: &str,
    preset: Option<&str>,
    seed: u64,
    configs: &T,
    files: Vec<String>,
) -> Result<()> {
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or_default();
    let meta = Sidecar {
        command,
        preset,
        seed,
        config_hash: hash(configs)?,
        goodput_threshold: GOODPUT_THRESHOLD,
        created_unix,
        files,
    };
    let f = File::create(dir.join(format!("{command}.meta.json")))?;
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(())
}

/// Resolves the preset and applies every override flag.
fn load_preset(c: &Common) -> Result<ExperimentPreset> {
    let mut p = match &c.preset {
        Some(name) => preset(name)?,
        None => preset("encode-heavy")?,
    };
    if let Some(path) = &c.config {
        let cfg = SystemConfig::load(path)?;
        p.systems = vec![presets::System {
            name: "custom".into(),
            config: cfg,
        }];
    }
    if let Some(name) = &c.system {
        let s = p.system(name)?.clone();
        p.systems = vec![s];
    }
    if let Some(seed) = c.seed {
        p = p.with_seed(seed);
    }
    if let Some(g) = &c.rate_grid {
        metrics::validate_grid(g)?;
        p.rates = g.clone();
    }
    let params = match &c.switch_params {
        Some(path) => {
            let params: ControllerParams = toml::from_str(&fs::read_to_string(path)?)?;
            params.validate()?;
            Some(params)
        }
        None => None,
    };
    for s in &mut p.systems {
        if let Some(irp) = c.irp {
            s.config.irp = irp == Switch::On;
        }
        match c.role_switch {
            Some(Switch::On) => {
                let chosen = params.or(s.config.role_switch).unwrap_or_default();
                s.config.role_switch = Some(chosen);
            }
            Some(Switch::Off) => s.config.role_switch = None,
            None => {
                if params.is_some() && s.config.role_switch.is_some() {
                    s.config.role_switch = params;
                }
            }
        }
    }
    Ok(p)
}

fn simulate(c: &Common) -> Result<()> {
    let p = load_preset(c)?;
    let sys = p.systems.first().ok_or(Error::EmptySet)?;
    let requests = match &c.workload {
        Some(path) => load_trace(path, p.workload.slo, Arrivals::FromFile)?,
        None => p.requests()?,
    };
    let trace = run_simulation(&sys.config, &requests, p.workload.seed)?;
    let mut files = Vec::new();
    write_request_summary(&trace, create(&c.out_dir, "summary.csv", &mut files)?)?;
    trace.write_events(create(&c.out_dir, "events.csv", &mut files)?)?;
    write_switch_log(&trace.switches, create(&c.out_dir, "switches.csv", &mut files)?)?;
    trace.write_json(create(&c.out_dir, "trace.json", &mut files)?)?;
    let s = presets::summarize_run(&sys.name, &sys.config, &trace);
    println!(
        "{}: {} completed, {} rejected, attainment {:.3}, mean TTFT {:.3} s, mean TPOT {:.4} s, makespan {:.2} s, final {}",
        s.system,
        s.completed,
        s.rejected,
        metrics::slo_attainment(&trace.requests)?,
        s.mean_ttft,
        s.mean_tpot,
        s.makespan,
        s.final_layout
    );
    write_sidecar(&c.out_dir, "simulate", c.preset.as_deref(), p.workload.seed, &sys.config, files)
}

fn sweep(c: &Common, command: &str) -> Result<()> {
    let p = load_preset(c)?;
    let mut files = Vec::new();
    if p.name.starts_with("fig6") {
        let rows = presets::ttft_distribution(&p)?;
        write_rows(&rows, create(&c.out_dir, "ttft_distribution.csv", &mut files)?)?;
        println!("{} TTFT samples written", rows.len());
    }
    if p.name == "offline-throughput" {
        let rows = presets::offline_throughput(&p)?;
        write_rows(&rows, create(&c.out_dir, "throughput.csv", &mut files)?)?;
        println!("{} throughput rows written", rows.len());
        let configs: Vec<_> = p.systems.iter().map(|s| &s.config).collect();
        return write_sidecar(&c.out_dir, command, Some(&p.name), p.workload.seed, &configs, files);
    }
    let results = presets::sweep_all(&p)?;
    for r in &results {
        write_sweep_csv(r, create(&c.out_dir, &format!("sweep_{}.csv", r.system), &mut files)?)?;
    }
    write_attainment_csv(&results, create(&c.out_dir, "attainment.csv", &mut files)?)?;
    for r in &results {
        println!("{}: goodput {} r/s", r.system, r.goodput(GOODPUT_THRESHOLD));
    }
    let configs: Vec<_> = p.systems.iter().map(|s| &s.config).collect();
    write_sidecar(&c.out_dir, command, Some(&p.name), p.workload.seed, &configs, files)
}

fn ablate(which: Ablation, c: &Common, trials: usize) -> Result<()> {
    let default = match which {
        Ablation::Irp => "table4-irp",
        Ablation::Optimizer => "table5-optimizer",
        Ablation::Switch => "table6-switch",
    };
    let c = Common {
        preset: Some(c.preset.clone().unwrap_or_else(|| default.into())),
        config: c.config.clone(),
        workload: None,
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        rate_grid: c.rate_grid.clone(),
        irp: None,
        role_switch: None,
        switch_params: c.switch_params.clone(),
        system: c.system.clone(),
    };
    let p = load_preset(&c)?;
    let mut files = Vec::new();
    let command = match which {
        Ablation::Irp => {
            let rows = presets::irp_ablation(&p)?;
            for r in &rows {
                println!(
                    "{} images: TTFT {:.3} s with IRP, {:.3} s without, ratio {:.2}",
                    r.images_per_request, r.ttft_irp, r.ttft_no_irp, r.ratio
                );
            }
            write_rows(&rows, create(&c.out_dir, "ablate_irp.csv", &mut files)?)?;
            "ablate-irp"
        }
        Ablation::Optimizer => {
            let seed = p.workload.seed;
            let a = presets::optimizer_ablation(&p, Strategy::SurrogateGuided, trials, 10, seed)?;
            println!(
                "solver {} goodput {:.2} r/s; random mean {:.2} r/s; ratio {:.2}",
                a.solver.candidate.layout(),
                a.solver.f,
                a.random_mean_goodput,
                a.ratio
            );
            #[derive(Serialize)]
            struct Row<'a> {
                which: &'a str,
                layout: String,
                goodput: f64,
                mean_ttft: f64,
            }
            let mut rows = vec![Row {
                which: "solver",
                layout: a.solver.candidate.layout(),
                goodput: a.solver.f,
                mean_ttft: a.solver_ttft,
            }];
            rows.push(Row {
                which: "random-mean",
                layout: String::new(),
                goodput: a.random_mean_goodput,
                mean_ttft: a.random_mean_ttft,
            });
            write_rows(&rows, create(&c.out_dir, "ablate_optimizer.csv", &mut files)?)?;
            write_search_log(&a.log, create(&c.out_dir, "search_log.csv", &mut files)?)?;
            "ablate-optimizer"
        }
        Ablation::Switch => {
            let a = presets::switch_ablation(&p)?;
            println!(
                "makespan {:.2} s with switching, {:.2} s without (ratio {:.2}); final layout {}",
                a.with_switch.makespan, a.without_switch.makespan, a.makespan_ratio, a.with_switch.final_layout
            );
            write_rows(
                &[a.with_switch.clone(), a.without_switch.clone()],
                create(&c.out_dir, "ablate_switch.csv", &mut files)?,
            )?;
            write_switch_log(&a.trace.switches, create(&c.out_dir, "switches.csv", &mut files)?)?;
            "ablate-switch"
        }
    };
    let configs: Vec<_> = p.systems.iter().map(|s| &s.config).collect();
    write_sidecar(&c.out_dir, command, Some(&p.name), p.workload.seed, &configs, files)
}

fn capacity(model: &str, kv_fraction: f64, out_dir: &Path) -> Result<()> {
    let catalog = Catalog::builtin();
    let m = catalog.model(model)?;
    let hw = HardwareSpec::a100_node();
    let settings = TableSettings {
        kv_fraction,
        ..TableSettings::default()
    };
    let rows = comparison_table(m, &hw, settings)?;
    for r in &rows {
        println!("{} {} {} {} = {} ({})", r.shape, r.resolution, r.metric, r.model, r.value, r.limiting_factor);
    }
    let mut files = Vec::new();
    write_rows(&rows, create(out_dir, "capacity.csv", &mut files)?)?;
    write_sidecar(out_dir, "capacity", None, 0, &(m, &hw), files)
}

fn optimize(
    c: &Common,
    space: Option<&Path>,
    objective: ObjectiveArg,
    beta: f64,
    trials: usize,
    strategy: StrategyArg,
) -> Result<()> {
    let c = Common {
        preset: Some(c.preset.clone().unwrap_or_else(|| "table5-optimizer".into())),
        ..clone_common(c)
    };
    let p = load_preset(&c)?;
    let space: ConfigSpace = match space {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)?,
        None => p
            .space
            .clone()
            .unwrap_or_else(optimizer::restricted_appendix_b4),
    };
    let metric = match objective {
        ObjectiveArg::Goodput => Metric::Goodput,
        ObjectiveArg::Ttft => Metric::NegMeanTtft,
        ObjectiveArg::Throughput => Metric::Throughput,
    };
    let strategy = match strategy {
        StrategyArg::Exhaustive => Strategy::Exhaustive,
        StrategyArg::Random => Strategy::RandomSearch,
        StrategyArg::Surrogate => Strategy::SurrogateGuided,
    };
    let problem = SearchProblem {
        base: p.systems.first().ok_or(Error::EmptySet)?.config.clone(),
        workload: p.workload.clone(),
        rates: p.rates.clone(),
        objective: Objective::new(metric, beta),
    };
    let out = optimizer::solve(&space, &problem, strategy, trials, p.workload.seed)?;
    let best = out.best.candidate.apply(&problem.base);
    println!(
        "best {} (E/P/D batch {}/{}/{}, irp {}): f {:.3}, score {:.3} after {} evaluations",
        out.best.candidate.layout(),
        out.best.candidate.encode.max_batch,
        out.best.candidate.prefill.max_batch,
        out.best.candidate.decode.max_batch,
        out.best.candidate.irp,
        out.best.f,
        out.best.score,
        out.log.len()
    );
    let mut files = Vec::new();
    fs::create_dir_all(&c.out_dir)?;
    best.save(c.out_dir.join("best_config.toml"))?;
    files.push("best_config.toml".into());
    write_search_log(&out.log, create(&c.out_dir, "search_log.csv", &mut files)?)?;
    write_sidecar(&c.out_dir, "optimize", Some(&p.name), p.workload.seed, &(&problem.base, &space), files)
}

fn clone_common(c: &Common) -> Common {
    Common {
        preset: c.preset.clone(),
        config: c.config.clone(),
        workload: c.workload.clone(),
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        rate_grid: c.rate_grid.clone(),
        irp: c.irp,
        role_switch: c.role_switch,
        switch_params: c.switch_params.clone(),
        system: c.system.clone(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Sweep(c) => sweep(&c, "sweep"),
        Command::Goodput(c) => sweep(&c, "goodput"),
        Command::Ablate { which, common, trials } => ablate(which, &common, trials),
        Command::Capacity {
            model,
            kv_fraction,
            out_dir,
        } => capacity(&model, kv_fraction, &out_dir),
        Command::Optimize {
            common,
            space,
            objective,
            beta,
            trials,
            strategy,
        } => optimize(&common, space.as_deref(), objective, beta, trials, strategy),
        Command::Presets => {
            for name in preset_names() {
                let p = preset(&name)?;
                println!("{name:24} {}", p.description);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
