use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cupid_core::cupid::CupidModule;
use cupid_core::harness::{self, io, ExperimentConfig, RawData, Task, TrainedCupid, Variant};
use cupid_core::nn::Mlp;
use cupid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cupid", version, about = "Plug-in uncertainty estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, conflicts_with = "task")]
    config: Option<PathBuf>,
    /// Use the built-in preset for a task instead of a config file.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Checkpoints {
    /// Base network checkpoint; trained from scratch when absent.
    #[arg(long)]
    base: Option<PathBuf>,
    /// CUPID checkpoint; trained from scratch when absent.
    #[arg(long)]
    cupid: Option<PathBuf>,
    /// Separately trained uncertainty-branch checkpoint.
    #[arg(long, requires = "cupid")]
    cupid_alea: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated datasets as CSV.
    GenData(Common),
    /// Train the base network and write its checkpoint.
    TrainBase(Common),
    /// Train CUPID on a (given or freshly trained) base network.
    TrainCupid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Estimate uncertainties on the evaluation sets and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
    },
    /// Full pipeline over all seeds.
    Run(Common),
    /// Run the pipeline once per insertion layer.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated insertion layers.
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
    },
    /// Compare the default objective with an ablated variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant to compare against the default; overrides the config flags.
        #[arg(long, value_parser = ["no-max", "separate"])]
        variant: Option<String>,
    },
    /// Dense x-grid of predictions and uncertainties for toy tasks.
    PlotData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
    },
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown task '{s}' (toy1, toy2, tabular, misclass, ood)"))
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.task) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(task)) => ExperimentConfig::preset(task),
            (None, None) => return Err(Error::InvalidArgument("pass --config or --task".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load_base(path: &Path, cfg: &ExperimentConfig) -> Result<Mlp> {
    let net = Mlp::from_checkpoint(io::read_json(path)?)?;
    if net.spec() != &cfg.mlp_spec() {
        return Err(Error::InvalidArgument(format!(
            "{} does not match the configured model",
            path.display()
        )));
    }
    Ok(net)
}

fn base_for(common: &Common, cfg: &ExperimentConfig, path: Option<&Path>, data: &harness::TaskData) -> Result<Mlp> {
    match path {
        Some(p) => load_base(p, cfg),
        None => Ok(harness::train_base(cfg, data, common.seed(cfg))?.0),
    }
}

fn cupid_for(
    common: &Common,
    cfg: &ExperimentConfig,
    ckpt: &Checkpoints,
    split: &cupid_core::nn::SplitNetwork,
    data: &harness::TaskData,
) -> Result<TrainedCupid> {
    let Some(path) = &ckpt.cupid else {
        return harness::train_cupid(cfg, split, data, Variant::from_config(cfg), common.seed(cfg));
    };
    let load = |p: &Path| -> Result<CupidModule> {
        let m = CupidModule::from_checkpoint(io::read_json(p)?)?;
        m.check_split(split)?;
        Ok(m)
    };
    Ok(TrainedCupid {
        epis: load(path)?,
        alea: ckpt.cupid_alea.as_deref().map(load).transpose()?,
        curves: Vec::new(),
    })
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    match harness::generate_data(&cfg, common.seed(&cfg))? {
        RawData::Regression { train, test } => {
            io::write_regression_dataset(&common.path("train.csv"), &train)?;
            io::write_regression_dataset(&common.path("test.csv"), &test)?;
        }
        RawData::Classification { train, eval } => {
            io::write_classification_dataset(&common.path("train.csv"), &train)?;
            for (i, (_, _, samples)) in eval.iter().enumerate() {
                let file = if i == 0 { "test.csv".to_string() } else { format!("ood_{}.csv", i - 1) };
                io::write_classification_dataset(&common.path(&file), samples)?;
            }
        }
    }
    Ok(())
}

fn train_base(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let seed = common.seed(&cfg);
    let data = harness::prepare_data(&cfg, seed)?;
    let (net, curve) = harness::train_base(&cfg, &data, seed)?;
    io::write_json(&common.path("base.json"), &net.to_checkpoint())?;
    io::write_curves(&common.path("base_loss.csv"), &[("base", &curve)])
}

fn train_cupid(common: &Common, base: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let seed = common.seed(&cfg);
    let data = harness::prepare_data(&cfg, seed)?;
    let net = base_for(common, &cfg, base, &data)?;
    let split = net.split_at(cfg.insertion_layer)?;
    let trained = harness::train_cupid(&cfg, &split, &data, Variant::from_config(&cfg), seed)?;
    io::write_json(&common.path("cupid.json"), &trained.epis.to_checkpoint())?;
    let mut curves = vec![("cupid", trained.curves[0].as_slice())];
    if let Some(alea) = &trained.alea {
        io::write_json(&common.path("cupid_alea.json"), &alea.to_checkpoint())?;
        curves = vec![("reconstruction", trained.curves[0].as_slice()), ("uncertainty", trained.curves[1].as_slice())];
    }
    io::write_curves(&common.path("cupid_loss.csv"), &curves)
}

fn eval(common: &Common, ckpt: &Checkpoints) -> Result<()> {
    let cfg = common.config()?;
    let seed = common.seed(&cfg);
    let data = harness::prepare_data(&cfg, seed)?;
    let net = base_for(common, &cfg, ckpt.base.as_deref(), &data)?;
    let split = net.split_at(cfg.insertion_layer)?;
    let cupid = cupid_for(common, &cfg, ckpt, &split, &data)?;
    let sets = harness::estimate_sets(&cfg, &split, &cupid, &data, seed)?;
    io::write_records(&common.path("records.csv"), &sets)?;
    io::write_metric_rows(&common.path("metrics.csv"), &harness::score_sets(&cfg, seed, &sets)?)
}

fn run(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (report, outcomes) = harness::run_detailed(&cfg)?;
    for (seed, outcome) in &outcomes {
        if let Ok(o) = outcome {
            io::write_records(&common.path(&format!("records_seed{seed}.csv")), &o.arms[0].sets)?;
        }
    }
    io::write_metric_rows(&common.path("metrics.csv"), &report.rows)?;
    io::write_summary(&common.path("summary.csv"), &report.summary)?;
    io::write_json(&common.path("report.json"), &report)
}

fn sweep(common: &Common, layers: &[usize]) -> Result<()> {
    let cfg = common.config()?;
    let reports = harness::sweep_placement(&cfg, layers)?;
    for (l, r) in &reports {
        io::write_json(&common.path(&format!("report_l{l}.json")), r)?;
    }
    let table: Vec<(String, &harness::ExperimentReport)> = reports.iter().map(|(l, r)| (l.to_string(), r)).collect();
    io::write_comparison(&common.path("sweep.csv"), "layer", &table)
}

fn ablate(common: &Common, variant: Option<&str>) -> Result<()> {
    let mut cfg = common.config()?;
    match variant {
        Some("no-max") => {
            cfg.ablations.no_max = true;
            cfg.ablations.separate_branches = false;
        }
        Some(_) => {
            cfg.ablations.no_max = false;
            cfg.ablations.separate_branches = true;
        }
        None => {}
    }
    let (default, flagged) = harness::ablate(&cfg)?;
    io::write_json(&common.path("report_default.json"), &default)?;
    io::write_json(&common.path("report_variant.json"), &flagged)?;
    io::write_comparison(
        &common.path("ablation.csv"),
        "variant",
        &[(Variant::default().name(), &default), (Variant::from_config(&cfg).name(), &flagged)],
    )
}

fn plot_data(common: &Common, ckpt: &Checkpoints) -> Result<()> {
    let cfg = common.config()?;
    if !cfg.task.is_regression() {
        return Err(Error::InvalidArgument("plot-data needs a toy task".into()));
    }
    let data = harness::prepare_data(&cfg, common.seed(&cfg))?;
    let net = base_for(common, &cfg, ckpt.base.as_deref(), &data)?;
    let split = net.split_at(cfg.insertion_layer)?;
    let cupid = cupid_for(common, &cfg, ckpt, &split, &data)?;
    io::write_grid(&common.path("grid.csv"), &harness::plot_grid(&split, &cupid)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::TrainBase(c) => train_base(c),
        Command::TrainCupid { common, base } => train_cupid(common, base.as_deref()),
        Command::Eval { common, ckpt } => eval(common, ckpt),
        Command::Run(c) => run(c),
        Command::Sweep { common, layers } => sweep(common, layers),
        Command::Ablate { common, variant } => ablate(common, variant.as_deref()),
        Command::PlotData { common, ckpt } => plot_data(common, ckpt),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
