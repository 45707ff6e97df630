//! The `hafx` command line: one subcommand per pipeline, configured by a
//! [`RunConfig`] document.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::attention::AblationMode;
use crate::conversion::{
    run_attention_transfer, run_finetune, run_hedgecats, run_pretrain, FinetuneSetup, HedgeCatsConfig,
    HedgeCatsData, StageReport, TransferSetup,
};
use crate::evalbench::{
    base_scores, benchmark_scaling, evaluate_ablations, BenchPath, BenchReport, BenchRow, Dataset, TaskKind,
    TaskSplit, EVAL_CSV_HEADER,
};
use crate::model::{init_model, load_checkpoint, save_checkpoint, Checkpoint, Model, Stage};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hafx", version, about = "Hybrid linear / sliding-window attention conversion lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the feature maps against softmax attention (post-transfer checkpoint).
    Transfer(StageArgs),
    /// LoRA fine-tuning through the hybrid (post-finetune checkpoint).
    Finetune(StageArgs),
    /// Weight transfer with linear attention alone, then hybrid LoRA fine-tuning with early stopping.
    Hedgecats(StageArgs),
    /// LoRA fine-tuning with the config's scheduled sliding-window dropout.
    SsdRun(StageArgs),
    /// Score a checkpoint under one attention mode.
    Eval(EvalArgs),
    /// Score a checkpoint under several ablation modes.
    Ablate(EvalArgs),
    /// Time streaming linear attention against quadratic softmax attention.
    Bench(BenchArgs),
    /// Summarise CSV and JSON-lines outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Run configuration; defaults apply to anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting checkpoint. Without one, a base model is pretrained first.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Base checkpoint supplying the softmax reference for recovered percentages.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Comma-separated modes, or `all`.
    #[arg(long)]
    pub modes: Option<String>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence lengths, increasing.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [256usize, 512, 1024])]
    pub t: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long = "d-prime", default_value_t = 16)]
    pub d_prime: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation or benchmark CSV files and JSON-lines stage reports.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Parses `argv` and runs the subcommand. Usage errors return 2, failures 1.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Transfer(a) => transfer(&a),
        Command::Finetune(a) => finetune(&a, false),
        Command::SsdRun(a) => finetune(&a, true),
        Command::Hedgecats(a) => hedgecats(&a),
        Command::Eval(a) => eval(&a, "full-hybrid"),
        Command::Ablate(a) => eval(&a, "all"),
        Command::Bench(a) => bench(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))
        }
    }
}

struct Workspace {
    cfg: RunConfig,
    dir: PathBuf,
    tasks: Vec<(TaskKind, TaskSplit)>,
}

impl Workspace {
    fn open(args: &StageArgs) -> anyhow::Result<Self> {
        let cfg = load_config(args.config.as_deref())?;
        let dir = args.out_dir.clone().unwrap_or_else(|| cfg.output_dir()).join(&cfg.run_id);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let tasks = cfg.generate_tasks()?;
        Ok(Self { cfg, dir, tasks })
    }

    fn train(&self) -> Dataset {
        Dataset::interleave(&self.tasks.iter().map(|(_, s)| &s.train).collect::<Vec<_>>())
    }

    fn heldout(&self) -> Dataset {
        Dataset::interleave(&self.tasks.iter().map(|(_, s)| &s.eval).collect::<Vec<_>>())
    }

    fn save(&self, name: &str, model: &Model, stage: Stage) -> anyhow::Result<PathBuf> {
        let path = self.dir.join(format!("{name}.hafx"));
        save_checkpoint(&path, &Checkpoint::new(model, stage))?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn log(&self, report: &StageReport) -> anyhow::Result<()> {
        report.append_jsonl(&self.dir.join("reports.jsonl"))?;
        for e in &report.epochs {
            eprintln!(
                "{} epoch {}: train {:.4} eval {} ({:.1}s)",
                e.stage,
                e.epoch,
                e.train_loss,
                e.eval_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
                e.wall_time_s
            );
        }
        Ok(())
    }

    /// The starting model: a loaded checkpoint, or a freshly pretrained base.
    fn start(&self, ckpt: Option<&Path>) -> anyhow::Result<Checkpoint> {
        if let Some(p) = ckpt {
            return load_checkpoint(p).with_context(|| format!("loading {}", p.display()));
        }
        let mut model = init_model(&self.cfg.model_config())?;
        let report = run_pretrain(&mut model, &self.cfg.train_config(), &self.train(), &self.heldout())?;
        self.log(&report)?;
        let ckpt = Checkpoint::new(&model, Stage::Base);
        self.save("base", &ckpt.model, Stage::Base)?;
        Ok(ckpt)
    }
}

fn transfer(args: &StageArgs) -> anyhow::Result<()> {
    let ws = Workspace::open(args)?;
    let start = ws.start(args.ckpt.as_deref())?;
    if start.stage != Stage::Base {
        bail!("transfer starts from a base checkpoint, got `{}`", start.stage.name());
    }
    let mut model = start.model;
    let setup = TransferSetup {
        objective: ws.cfg.objective,
        win: ws.cfg.window(),
        hy: ws.cfg.hybrid(),
    };
    let report = run_attention_transfer(&mut model, setup, &ws.cfg.train_config(), &ws.train())?;
    ws.log(&report)?;
    ws.save("post-transfer", &model, Stage::PostTransfer)?;
    Ok(())
}

fn finetune(args: &StageArgs, ssd: bool) -> anyhow::Result<()> {
    let ws = Workspace::open(args)?;
    let Some(path) = args.ckpt.as_deref() else {
        bail!("fine-tuning needs --ckpt pointing at a post-transfer checkpoint");
    };
    let start = ws.start(Some(path))?;
    let mut model = start.model;
    if model.lora.is_none() {
        model.lora_attach(&ws.cfg.lora)?;
    }
    let mut setup = FinetuneSetup::hybrid(ws.cfg.window(), ws.cfg.hybrid());
    if ssd {
        let Some(s) = ws.cfg.ssd.clone() else {
            bail!("ssd-run needs an [ssd] section in the config");
        };
        setup.ssd = Some(s);
    }
    let report = run_finetune(&mut model, &ws.cfg.train_config(), setup, &ws.train(), &ws.heldout())?;
    ws.log(&report)?;
    ws.save(if ssd { "post-ssd" } else { "post-finetune" }, &model, Stage::PostFinetune)?;
    Ok(())
}

fn hedgecats(args: &StageArgs) -> anyhow::Result<()> {
    let ws = Workspace::open(args)?;
    let base = ws.start(args.ckpt.as_deref())?;
    let cfg = HedgeCatsConfig {
        train: ws.cfg.train_config(),
        lora: ws.cfg.lora.clone(),
        win: ws.cfg.window(),
        hy: ws.cfg.hybrid(),
        stage2_epochs: ws.cfg.train.finetune_epochs,
    };
    let (train, heldout) = (ws.train(), ws.heldout());
    let data = HedgeCatsData {
        train: &train,
        heldout: &heldout,
        early_stop: &ws.tasks[0].1.eval,
    };
    let out = run_hedgecats(&base, &cfg, &data)?;
    for r in &out.reports {
        ws.log(r)?;
    }
    ws.save("hedgecats-stage1", &out.stage1.model, Stage::PostTransfer)?;
    for (i, c) in out.stage2.iter().enumerate() {
        ws.save(&format!("hedgecats-stage2-epoch{}", i + 1), &c.model, Stage::PostFinetune)?;
    }
    let sel = out.selected();
    ws.save("hedgecats-selected", &sel.model, sel.stage)?;
    eprintln!("gaps {:?}; selected epoch {}", out.gaps, out.selected_epoch);
    Ok(())
}

fn parse_modes(s: &str) -> anyhow::Result<Vec<AblationMode>> {
    if s == "all" {
        return Ok(AblationMode::ALL.to_vec());
    }
    Ok(s.split(',').map(|m| m.trim().parse()).collect::<Result<_, _>>()?)
}

fn eval(args: &EvalArgs, default_modes: &str) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let modes = parse_modes(args.modes.as_deref().unwrap_or(default_modes))?;
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let splits = cfg.generate_tasks()?;
    let tasks: Vec<(TaskKind, &Dataset)> = splits.iter().map(|(k, s)| (*k, &s.eval)).collect();
    let base = match &args.base {
        Some(p) => base_scores(&load_checkpoint(p)?.model, &tasks)?,
        None => BTreeMap::new(),
    };
    let report = evaluate_ablations(
        &ckpt.model,
        ckpt.stage.name(),
        &tasks,
        &modes,
        cfg.hybrid(),
        cfg.eval_window(),
        &base,
    )?;
    match &args.out {
        Some(p) => append_csv(p, &report, &cfg.run_id),
        None => emit(None, &report.to_csv(&cfg.run_id, true)),
    }
}

/// Appends rows to `path`, writing the header only for a new or empty file.
fn append_csv(path: &Path, report: &crate::evalbench::EvalReport, run_id: &str) -> anyhow::Result<()> {
    use std::io::Write;
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(report.to_csv(run_id, fresh).as_bytes())?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let report = benchmark_scaling(&args.t, args.d, args.d_prime, args.reps, args.seed)?;
    emit(args.out.as_deref(), &report.to_csv())
}

fn report(args: &ReportArgs) -> anyhow::Result<()> {
    for path in &args.inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        println!("== {}", path.display());
        let first = text.lines().next().unwrap_or_default();
        if first == EVAL_CSV_HEADER {
            summarise_eval(&text)?;
        } else if first == crate::evalbench::bench::BENCH_CSV_HEADER {
            summarise_bench(&text)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            summarise_jsonl(&text)?;
        } else {
            bail!("{}: unrecognised report format", path.display());
        }
    }
    Ok(())
}

fn summarise_eval(text: &str) -> anyhow::Result<()> {
    let mut tasks: Vec<String> = Vec::new();
    let mut table: BTreeMap<(String, String), BTreeMap<String, String>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            bail!("malformed row `{line}`");
        }
        let key = (format!("{}/{}", f[0], f[1]), f[2].to_string());
        let f = &f[1..];
        if !table.contains_key(&key) {
            order.push(key.clone());
        }
        if !tasks.iter().any(|t| t == f[2]) {
            tasks.push(f[2].to_string());
        }
        let v: f64 = f[4].parse()?;
        let cell = if f[5].is_empty() {
            format!("{:.2}", 100.0 * v)
        } else {
            format!("{:.2} ({}%)", 100.0 * v, f[5])
        };
        table.entry(key).or_default().insert(f[2].to_string(), cell);
    }
    println!("{:<24} {:<16} {}", "run/stage", "mode", tasks.join(" | "));
    for key in order {
        let row = &table[&key];
        let cells: Vec<&str> = tasks.iter().map(|t| row.get(t).map_or("-", String::as_str)).collect();
        println!("{:<24} {:<16} {}", key.0, key.1, cells.join(" | "));
    }
    Ok(())
}

fn summarise_bench(text: &str) -> anyhow::Result<()> {
    let mut report = BenchReport::default();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("malformed row `{line}`");
        }
        let path = match f[0] {
            "streaming-la" => BenchPath::StreamingLa,
            "quadratic-softmax" => BenchPath::QuadraticSoftmax,
            other => bail!("unknown path `{other}`"),
        };
        report.rows.push(BenchRow {
            path,
            t: f[1].parse()?,
            median_ms: f[2].parse()?,
            aux_bytes: f[3].parse()?,
            calls_per_sample: 1,
        });
    }
    for path in [BenchPath::StreamingLa, BenchPath::QuadraticSoftmax] {
        for (t, r) in report.growth_ratios(path) {
            println!("{path:<18} T={t:<6} growth {r:.2}");
        }
    }
    Ok(())
}

fn summarise_jsonl(text: &str) -> anyhow::Result<()> {
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let e: crate::conversion::EpochRecord = serde_json::from_str(line)?;
        println!(
            "{:<10} epoch {:<3} steps {:<4} train {:.4} eval {} lr {:.2e}{}",
            e.stage,
            e.epoch,
            e.step_losses.len(),
            e.train_loss,
            e.eval_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
            e.lr,
            e.eval_gap.map(|g| format!(" gap {g:+.4}")).unwrap_or_default()
        );
    }
    Ok(())
}
