//! Command-line front end. Each subcommand loads the run configuration,
//! applies flag overrides and hands off to the library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{self, Dataset, DatasetError, ImageChip};
use crate::eval::{self, EocSetting, EvalError};
use crate::gradsuite;
use crate::image::ImageError;
use crate::model::HdaNet;
use crate::pipeline::{self, MetricsLog, PipelineError, Trainer, METRICS_HEADER};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

pub const OUT_ENV: &str = "HDANET_OUT";

#[derive(Debug, Parser)]
#[command(name = "hdanet", version, about = "Disentanglement-alignment capsule network for SAR target recognition")]
pub struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub workers: usize,
    /// Model checkpoint written by `train` and read by the evaluation commands
    /// [default: <out>/model.ckpt].
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset under <out>/data.
    GenData,
    /// Train a model, writing the checkpoint and <out>/metrics.csv.
    Train,
    /// Overall accuracy of a checkpoint on the test split.
    Eval,
    /// Accuracy under one family of operating-condition changes.
    Sweep {
        /// gaussian, replace, occlusion or scene.
        #[arg(long)]
        setting: String,
        /// Comma-separated parameters; scene takes the scene ids of one swap.
        #[arg(long, allow_hyphen_values = true)]
        params: Option<String>,
    },
    /// Two-player Shapley values of target and clutter pixels.
    Shapley,
    /// Input-gradient saliency maps under <out>/saliency.
    Saliency,
    /// Finite-difference check of every operator, loss term and the full model.
    Gradcheck,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingCheckpoint(_) => "missing-checkpoint",
            CliError::Config(_) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Pipeline(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Tensor(_) => "tensor",
            CliError::Image(_) => "image",
            CliError::Io { .. } => "io",
            CliError::GradCheck(_) => "gradcheck",
        }
    }

    /// Missing inputs and bad configuration exit with 2, run failures with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingCheckpoint(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// `error[<kind>]: <message>` on a single line.
    pub fn line(&self) -> String {
        format!("error[{}]: {}", self.kind(), self.to_string().replace(['\n', '\r'], " "))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Resolved configuration plus the output root every file is written under.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
    checkpoint: Option<PathBuf>,
}

impl Context {
    pub fn new(cli: &Cli, env_out: Option<PathBuf>) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.set_seed(seed);
        }
        if let Some(dir) = env_out {
            cfg.out.dir = dir;
        }
        cfg.validate()?;
        Ok(Self {
            out: cfg.out.dir.clone(),
            cfg,
            workers: cli.workers.max(1),
            checkpoint: cli.checkpoint.clone(),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    fn out_file(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        Ok(self.out.join(name))
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.cfg.data;
        Ok(match &d.load {
            Some(root) => dataset::io::load_dataset(root, &d.cfar, &d.synthetic.pseudo_label)?,
            None => dataset::generate_dataset(&d.synthetic, self.workers)?,
        })
    }

    fn model(&self) -> Result<HdaNet<f32>, CliError> {
        let path = self.checkpoint_path();
        if !path.is_file() {
            return Err(CliError::MissingCheckpoint(path.display().to_string()));
        }
        Ok(HdaNet::load(self.cfg.model.clone(), &path)?)
    }

    fn check_classes(&self, d: &Dataset) -> Result<(), CliError> {
        if d.class_names.len() != self.cfg.model.num_classes {
            return Err(ConfigError::Invalid {
                section: "model",
                msg: format!("data has {} classes, model {}", d.class_names.len(), self.cfg.model.num_classes),
            }
            .into());
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

/// `n` chips at evenly spaced positions, so every class is represented.
pub fn spread(chips: &[ImageChip], n: usize) -> Vec<ImageChip> {
    if n == 0 || n >= chips.len() {
        return chips.to_vec();
    }
    (0..n).map(|i| chips[i * chips.len() / n].clone()).collect()
}

pub fn run(cli: &Cli, env_out: Option<PathBuf>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::new(cli, env_out)?;
    let mut say = |line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match &cli.command {
        Command::GenData => {
            let spec = &ctx.cfg.data.synthetic;
            let d = dataset::generate_dataset(spec, ctx.workers)?;
            let root = ctx.out.join("data");
            dataset::io::save_dataset(&root, &d)?;
            say(format!("train {} test {} classes {} dir {}", d.train.len(), d.test.len(), d.class_names.len(), root.display()));
        }
        Command::Train => {
            let d = ctx.dataset()?;
            ctx.check_classes(&d)?;
            let c = &ctx.cfg;
            let mut trainer = Trainer::new(c.model.clone(), c.loss, c.augment, c.train.clone())?;
            trainer.workers = ctx.workers;
            write_text(&ctx.out_file("config.toml")?, &c.to_toml())?;
            let mut log = MetricsLog::create(&ctx.out_file("metrics.csv")?)?;
            say(METRICS_HEADER.to_string());
            let metrics = pipeline::fit(&mut trainer, &d.train, &d.test, Some(&mut log), |r| say(r.csv_row()))?;
            let path = ctx.checkpoint_path();
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            trainer.model.save(&path)?;
            let oa = metrics.final_oa().map_or("n/a".into(), |v| format!("{v:.4}"));
            say(format!("oa {oa} checkpoint {}", path.display()));
        }
        Command::Eval => {
            let model = ctx.model()?;
            let d = ctx.dataset()?;
            ctx.check_classes(&d)?;
            let oa = pipeline::evaluate(&model, &d.test, ctx.workers)?;
            write_text(&ctx.out_file("eval.csv")?, &format!("split,chips,oa\ntest,{},{oa}\n", d.test.len()))?;
            say(format!("oa {oa:.4} chips {}", d.test.len()));
        }
        Command::Sweep { setting, params } => {
            let settings: Vec<EocSetting> = match params {
                None => ctx.cfg.eval.settings(setting)?,
                Some(p) if setting == "scene" => vec![EocSetting::parse(setting, &p.replace(',', " "))?],
                Some(p) => p
                    .split(',')
                    .map(|v| EocSetting::parse(setting, v))
                    .collect::<Result<_, _>>()?,
            };
            let model = ctx.model()?;
            let d = ctx.dataset()?;
            ctx.check_classes(&d)?;
            let pseudo = &ctx.cfg.data.synthetic.pseudo_label;
            let rows = eval::eoc_sweep(&model, &d.test, &settings, &ctx.cfg.eval.seeds, pseudo, ctx.workers)?;
            let mut csv = format!("{}\n", eval::SWEEP_HEADER);
            for r in &rows {
                csv += &format!("{},{},{},{}\n", r.setting, r.param, r.seed, r.oa);
            }
            write_text(&ctx.out_file(&format!("sweep_{setting}.csv"))?, &csv)?;
            for (s, p, mean, std) in eval::summarize(&rows) {
                say(format!("{s} {p} oa {mean:.4} ± {std:.4}"));
            }
        }
        Command::Shapley => {
            let model = ctx.model()?;
            let d = ctx.dataset()?;
            ctx.check_classes(&d)?;
            let chips = spread(&d.test, ctx.cfg.eval.shapley_chips);
            let (entries, skipped) = eval::shapley_two_player(&model, &chips, ctx.cfg.eval.shadow_is_target, ctx.workers)?;
            let mut csv = format!("{}\n", eval::SHAPLEY_HEADER);
            for e in &entries {
                csv += &format!("{},{},{}\n", e.chip_id, e.sh_target, e.sh_clutter);
            }
            write_text(&ctx.out_file("shapley.csv")?, &csv)?;
            let ratio = eval::clutter_contribution_ratio(&entries)?;
            say(format!("clutter_ratio {ratio:.2} chips {} skipped {}", entries.len(), skipped.len()));
        }
        Command::Saliency => {
            let model = ctx.model()?;
            let d = ctx.dataset()?;
            ctx.check_classes(&d)?;
            let chips = spread(&d.test, ctx.cfg.eval.saliency_chips);
            let refs: Vec<&ImageChip> = chips.iter().collect();
            let maps = eval::gradient_saliency(&model, &refs)?;
            let dir = ctx.out.join("saliency");
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut csv = String::from("chip_id,target_share\n");
            for (c, m) in chips.iter().zip(&maps) {
                m.write_png(&dir.join(format!("{}.png", c.id)))?;
                let share = eval::saliency_ratio(m, &eval::region_mask(c, ctx.cfg.eval.shadow_is_target));
                csv += &format!("{},{share}\n", c.id);
            }
            write_text(&dir.join("target_share.csv"), &csv)?;
            say(format!("saliency maps {} dir {}", maps.len(), dir.display()));
        }
        Command::Gradcheck => {
            let entries = gradsuite::full_suite(ctx.cfg.seed)?;
            let mut csv = String::from("name,checked,refined,kinked,max_rel_err,tolerance,pass\n");
            let mut failed = vec![];
            for e in &entries {
                let r = &e.report;
                csv += &format!("{},{},{},{},{:e},{:e},{}\n", e.name, r.checked, r.refined, r.kinked, r.max_rel_err, e.tolerance, e.passes());
                say(format!("{:<24} max_rel_err {:.2e} tol {:.0e} {}", e.name, r.max_rel_err, e.tolerance, if e.passes() { "ok" } else { "FAIL" }));
                if !e.passes() {
                    failed.push(e.name);
                }
            }
            write_text(&ctx.out_file("gradcheck.csv")?, &csv)?;
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(" ")));
            }
        }
    }
    Ok(())
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    match run(&cli, env_out, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
