//! Command-line front end. [`run`] parses arguments, executes one command
//! and returns the process exit code: 0 success, 1 usage or invalid input,
//! 2 missing or duplicate resources, 3 corrupt data or failed runs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::amc::{amc_run, AmcConfig};
use crate::bench::experiments::{BenchConfig, Experiment, Lab, TrainSettings};
use crate::bench::report::weights_csv;
use crate::dataset::{read_csv, SplitDataset};
use crate::encoder::{init_backbone, Activation, EncoderConfig, Head, Module, ModuleKind};
use crate::error::{Error, Result};
use crate::hub::{read_module_file, write_module_file, Hub};
use crate::trainer::{evaluate_mae, finetune, surrogate_pretrain, train_module, TrainConfig};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "moma", version, about = "Train modules into a hub, compose them per task, fine-tune and benchmark.")]
pub struct Cli {
    /// Seed for every random choice (splits, initialization, shuffling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hub directory.
    #[arg(long, global = true, env = "MOMA_HUB")]
    pub hub: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Manage the module hub.
    #[command(subcommand)]
    Hub(HubCommand),
    /// Create or pre-train a backbone module file.
    #[command(subcommand)]
    Backbone(BackboneCommand),
    /// Train a module on a dataset and add it to the hub.
    TrainModule(TrainModuleArgs),
    /// Compose hub modules for a dataset.
    Amc(AmcArgs),
    /// Fine-tune a module file on a dataset and print its test MAE.
    Finetune(FinetuneArgs),
    /// Print the test MAE of a module file on a dataset.
    Eval(EvalArgs),
    /// Run a benchmark suite on a synthetic task family.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum HubCommand {
    Init,
    List,
    /// Add a module file (which must carry a head).
    Add {
        #[arg(long)]
        module: PathBuf,
        /// Id to store under; defaults to the file's id or a content id.
        #[arg(long)]
        id: Option<String>,
    },
    Remove {
        id: String,
    },
    Fsck,
}

#[derive(Debug, Subcommand)]
pub enum BackboneCommand {
    /// Write a freshly initialized backbone.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input_dim: usize,
        #[arg(long, default_value = "backbone.moma")]
        output: PathBuf,
    },
    /// Pre-train a backbone on the train rows of a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Start from this backbone instead of a fresh one.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "backbone.moma")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Full,
    Adapter,
}

impl From<KindArg> for ModuleKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Full => ModuleKind::Full,
            KindArg::Adapter => ModuleKind::Adapter,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainModuleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub kind: KindArg,
    /// TOML with optional `[encoder]` and `[training]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial backbone; required for adapter modules.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AmcArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = crate::amc::DEFAULT_K_NEIGHBORS)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub kind: KindArg,
    /// JSON report path; the weight CSV goes next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Frozen backbone for adapter composition.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Composed module file; defaults to `<out>/composed.moma`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub module: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// TOML with an optional `[training]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Where to write the fine-tuned module.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub module: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SuiteArg {
    Main,
    Ablation,
    Fewshot,
    Continual,
}

impl From<SuiteArg> for Experiment {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Main => Experiment::Main,
            SuiteArg::Ablation => Experiment::Ablation,
            SuiteArg::Fewshot => Experiment::FewShot,
            SuiteArg::Continual => Experiment::Continual,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub suite: SuiteArg,
    /// Bench configuration TOML (family, encoder and training settings).
    #[arg(long)]
    pub family_config: Option<PathBuf>,
    /// Print the cell plan without training anything.
    #[arg(long)]
    pub dry_run: bool,
}

/// Encoder and training settings for `train-module`, `backbone` and
/// `finetune`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub training: Option<TrainSettings>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub adapter_bottleneck: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        EncoderSection {
            hidden_dims: b.hidden_dims,
            embed_dim: b.embed_dim,
            activation: b.activation,
            adapter_bottleneck: None,
        }
    }
}

impl EncoderSection {
    pub fn config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            activation: self.activation,
            adapter_bottleneck: self.adapter_bottleneck,
            ..EncoderConfig::new(input_dim, self.hidden_dims.clone(), self.embed_dim)
        }
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display()))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Exit code for an error, per the scheme in the module docs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotFound(_) | Error::DuplicateId(_) | Error::EmptyHub | Error::AlreadyExists(_) => 2,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Corrupt(_) | Error::Cell { .. } | Error::Divergence { .. } | Error::Interrupted(_) | Error::Io(_) => 3,
        _ => 1,
    }
}

struct Ctx<'a> {
    seed: u64,
    hub: Option<PathBuf>,
    out: PathBuf,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn hub_dir(&self) -> Result<&Path> {
        self.hub
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("no hub given; pass --hub or set MOMA_HUB".into()))
    }

    fn data(&self, path: &Path) -> Result<SplitDataset> {
        if !path.exists() {
            return Err(Error::NotFound(path.display().to_string()));
        }
        read_csv(path)?.into_split(self.seed)
    }

    fn say(&mut self, line: impl AsRef<str>) -> Result<()> {
        writeln!(self.stdout, "{}", line.as_ref())?;
        Ok(())
    }
}

fn load_backbone(path: Option<&Path>) -> Result<Option<Module>> {
    path.map(|p| {
        let (m, _) = read_module_file(p)?;
        if m.kind() != ModuleKind::Full {
            return Err(Error::ConfigMismatch(format!("{} is not a full backbone", p.display())));
        }
        Ok(m)
    })
    .transpose()
}

fn check_dims(module: &Module, data: &SplitDataset) -> Result<()> {
    if module.config().input_dim != data.input_dim() {
        return Err(Error::ConfigMismatch(format!(
            "module expects {} input features, data has {}",
            module.config().input_dim,
            data.input_dim()
        )));
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code. Messages go to `stdout` and `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(stdout, "{}", e.render())
            } else {
                write!(stderr, "{}", e.render())
            };
            return code;
        }
    };
    let mut ctx = Ctx {
        seed: cli.seed.unwrap_or(DEFAULT_SEED),
        hub: cli.hub.clone(),
        out: cli.out.clone(),
        stdout,
    };
    let seed_given = cli.seed.is_some();
    match execute(cli.command, &mut ctx, seed_given) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, ctx: &mut Ctx<'_>, seed_given: bool) -> Result<()> {
    match command {
        Command::Hub(c) => cmd_hub(c, ctx),
        Command::Backbone(c) => cmd_backbone(c, ctx),
        Command::TrainModule(a) => cmd_train_module(a, ctx),
        Command::Amc(a) => cmd_amc(a, ctx),
        Command::Finetune(a) => cmd_finetune(a, ctx),
        Command::Eval(a) => cmd_eval(a, ctx),
        Command::Bench(a) => cmd_bench(a, ctx, seed_given),
    }
}

fn cmd_hub(command: HubCommand, ctx: &mut Ctx<'_>) -> Result<()> {
    let dir = ctx.hub_dir()?.to_path_buf();
    match command {
        HubCommand::Init => {
            Hub::init(&dir)?;
            ctx.say(format!("initialized hub at {}", dir.display()))
        }
        HubCommand::List => {
            let hub = Hub::open_read_only(&dir)?;
            ctx.say(format!("{:<48} {:<24} {:<8} {:<16} {}", "id", "task", "kind", "fingerprint", "train_mae"))?;
            for e in hub.entries() {
                let fp = e.config_fingerprint.to_hex();
                ctx.say(format!(
                    "{:<48} {:<24} {:<8} {:<16} {}",
                    e.id,
                    e.task_name,
                    e.kind.as_str(),
                    &fp[..16],
                    e.train_mae
                ))?;
            }
            Ok(())
        }
        HubCommand::Add { module, id } => {
            let (mut m, head) = read_module_file(&module)?;
            let head = head.ok_or_else(|| Error::InvalidModule(format!("{} has no head", module.display())))?;
            if let Some(id) = id {
                m.meta.id = id;
            }
            let id = Hub::open(&dir)?.add(&m, &head)?;
            ctx.say(format!("added {id}"))
        }
        HubCommand::Remove { id } => {
            Hub::open(&dir)?.remove(&id)?;
            ctx.say(format!("removed {id}"))
        }
        HubCommand::Fsck => {
            let report = Hub::open_read_only(&dir)?.fsck()?;
            if report.is_clean() {
                return ctx.say(format!("OK ({} modules)", report.entries_checked));
            }
            for p in &report.problems {
                ctx.say(format!("problem: {p}"))?;
            }
            for o in &report.orphans {
                ctx.say(format!("orphan: {o}"))?;
            }
            Err(Error::Corrupt(format!(
                "{} problems, {} orphans",
                report.problems.len(),
                report.orphans.len()
            )))
        }
    }
}

fn cmd_backbone(command: BackboneCommand, ctx: &mut Ctx<'_>) -> Result<()> {
    match command {
        BackboneCommand::Init { config, input_dim, output } => {
            let run = load_run_config(Some(&config))?;
            let m = init_backbone(&run.encoder.config(input_dim), ctx.seed)?;
            let path = ctx.out.join(output);
            write_module_file(&path, &m, None)?;
            ctx.say(format!("wrote {}", path.display()))
        }
        BackboneCommand::Pretrain { data, config, init, output } => {
            let run = load_run_config(Some(&config))?;
            let split = ctx.data(&data)?;
            let start = match load_backbone(init.as_deref())? {
                Some(m) => m,
                None => init_backbone(&run.encoder.config(split.input_dim()), ctx.seed)?,
            };
            check_dims(&start, &split)?;
            let settings = run.training.unwrap_or_else(|| BenchConfig::default().pretrain);
            let m = surrogate_pretrain(&start, &split.train, &settings.with_seed(ctx.seed))?;
            let path = ctx.out.join(output);
            write_module_file(&path, &m, None)?;
            ctx.say(format!("wrote {}", path.display()))
        }
    }
}

fn cmd_train_module(args: TrainModuleArgs, ctx: &mut Ctx<'_>) -> Result<()> {
    let run = load_run_config(args.config.as_deref())?;
    let kind: ModuleKind = args.kind.into();
    let data = ctx.data(&args.data)?;
    let backbone = load_backbone(args.backbone.as_deref())?;
    let init = match (&backbone, kind) {
        (Some(b), _) => b.clone(),
        (None, ModuleKind::Full) => init_backbone(&run.encoder.config(data.input_dim()), ctx.seed)?,
        (None, ModuleKind::Adapter) => return Err(Error::MissingBackbone),
    };
    check_dims(&init, &data)?;
    let cfg = run
        .training
        .map(|t| t.with_seed(ctx.seed))
        .unwrap_or_else(|| TrainConfig::module_training(ctx.seed));
    let mut dir = Hub::open(ctx.hub_dir()?)?;
    let outcome = train_module(&init, &data, &cfg, kind)?;
    let mut module = outcome.module.clone();
    module.meta.id.clear();
    let id = dir.add(&module, &outcome.head)?;
    ctx.say(format!("val_mae {}", outcome.best_val_mae()))?;
    ctx.say(format!("module {id}"))
}

fn cmd_amc(args: AmcArgs, ctx: &mut Ctx<'_>) -> Result<()> {
    let kind: ModuleKind = args.kind.into();
    let cfg = AmcConfig {
        k_neighbors: args.k,
        ..AmcConfig::with_kind(kind)
    };
    cfg.validate()?;
    let data = ctx.data(&args.data)?;
    let backbone = load_backbone(args.backbone.as_deref())?;
    let hub = Hub::open_read_only(ctx.hub_dir()?)?;
    let modules = hub.load_kind(kind)?;
    let result = amc_run(&modules, backbone.as_ref(), &data, &cfg)?;

    // The stored head is the closed-form fit on train, exactly what
    // fine-tuning starts from.
    let zero = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::finetuning(ctx.seed)
    };
    let head: Head = finetune(&result.composed, backbone.as_ref(), &data, &zero)?.head;
    let output = args.output.unwrap_or_else(|| ctx.out.join("composed.moma"));
    write_module_file(&output, &result.composed, Some(&head))?;

    let report = result.report(data.name(), &cfg);
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)? + "\n")?;
    let csv_path = args.report.with_extension("csv");
    std::fs::write(&csv_path, report.weight_rows_csv(true))?;
    for (id, w) in report.module_ids.iter().zip(&report.weights) {
        ctx.say(format!("{id} {w}"))?;
    }
    ctx.say(format!("proxy_error {}", report.proxy_error))?;
    ctx.say(format!("wrote {} {} {}", output.display(), args.report.display(), csv_path.display()))
}

fn load_headed(path: &Path) -> Result<(Module, Head)> {
    let (m, head) = read_module_file(path)?;
    let head = head.ok_or_else(|| Error::InvalidModule(format!("{} has no head", path.display())))?;
    Ok((m, head))
}

fn cmd_finetune(args: FinetuneArgs, ctx: &mut Ctx<'_>) -> Result<()> {
    let run = load_run_config(args.config.as_deref())?;
    let (module, _) = read_module_file(&args.module)?;
    let backbone = load_backbone(args.backbone.as_deref())?;
    let data = ctx.data(&args.data)?;
    check_dims(&module, &data)?;
    let cfg = run
        .training
        .map(|t| t.with_seed(ctx.seed))
        .unwrap_or_else(|| TrainConfig::finetuning(ctx.seed));
    let outcome = finetune(&module, backbone.as_ref(), &data, &cfg)?;
    let mae = evaluate_mae(&outcome.module, backbone.as_ref(), &outcome.head, &data.test)?;
    if let Some(out) = args.output {
        write_module_file(&out, &outcome.module, Some(&outcome.head))?;
    }
    ctx.say(format!("test_mae {mae}"))
}

fn cmd_eval(args: EvalArgs, ctx: &mut Ctx<'_>) -> Result<()> {
    let (module, head) = load_headed(&args.module)?;
    let backbone = load_backbone(args.backbone.as_deref())?;
    let data = ctx.data(&args.data)?;
    check_dims(&module, &data)?;
    let mae = evaluate_mae(&module, backbone.as_ref(), &head, &data.test)?;
    ctx.say(format!("{mae}"))
}

fn cmd_bench(args: BenchArgs, ctx: &mut Ctx<'_>, seed_given: bool) -> Result<()> {
    let mut config = match &args.family_config {
        Some(p) => BenchConfig::from_toml(&read_text(p)?)?,
        None => BenchConfig::default(),
    };
    if seed_given {
        config.family.seed = ctx.seed;
    }
    let experiment: Experiment = args.suite.into();
    let lab = match experiment {
        Experiment::Continual => Lab::continual(config)?,
        _ => Lab::new(config)?,
    };
    if args.dry_run {
        ctx.say(format!("# {} suite, family seed {}", experiment.as_str(), lab.family.config.seed))?;
        ctx.say(format!(
            "prepare: pretrain backbone on {} domains; {} upstream tasks",
            lab.family.pretrain_domains.len(),
            lab.family.upstream.len()
        ))?;
        for cell in lab.plan(experiment) {
            ctx.say(lab.cell_label(cell))?;
        }
        return Ok(());
    }
    let written = match experiment {
        Experiment::Main => {
            let (report, weights) = lab.run_main()?;
            let mut paths = report.write(&ctx.out)?;
            let w = ctx.out.join("amc_weights.csv");
            std::fs::write(&w, weights_csv(&weights))?;
            paths.push(w);
            paths
        }
        Experiment::Ablation => lab.run_ablation()?.write(&ctx.out)?,
        Experiment::FewShot => lab.run_fewshot()?.write(&ctx.out)?,
        Experiment::Continual => lab.run_continual()?.write(&ctx.out)?,
    };
    for p in written {
        ctx.say(format!("wrote {}", p.display()))?;
    }
    Ok(())
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = vec![];
        let mut err = vec![];
        let code = run(std::iter::once("moma").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&["frobnicate"]).0, 1);
        assert_eq!(call(&["amc"]).0, 1);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(exit_code(&Error::NotFound("x".into())), 2);
        assert_eq!(exit_code(&Error::DuplicateId("x".into())), 2);
        assert_eq!(exit_code(&Error::EmptyHub), 2);
        assert_eq!(exit_code(&Error::Corrupt("x".into())), 3);
        assert_eq!(exit_code(&Error::ConfigMismatch("x".into())), 1);
        assert_eq!(
            exit_code(&Error::Csv { path: "p".into(), row: 1, column: 2, message: "m".into() }),
            1
        );
    }

    #[test]
    fn run_config_parses_partial_tables() {
        let c: RunConfig = toml::from_str("[encoder]\nembed_dim = 3\n").unwrap();
        assert_eq!(c.encoder.embed_dim, 3);
        assert!(c.training.is_none());
        let c: RunConfig =
            toml::from_str("[training]\nbatch_size = 8\nlearning_rate = 0.0\nmax_epochs = 0\npatience = 1\n").unwrap();
        assert_eq!(c.training.unwrap().max_epochs, 0);
        assert!(toml::from_str::<RunConfig>("[encoder]\nwidth = 3\n").is_err());
    }
}
