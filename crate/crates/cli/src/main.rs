use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ecg_contrast::contrastive::BatchMode;
use ecg_contrast::experiment::ood::{ood_encoder, ood_heads, OodData};
use ecg_contrast::experiment::pipeline::{has_labels, synth_stage, EmbIndex};
use ecg_contrast::experiment::{
    run_matrix, run_ood, write_report, ExperimentConfig, ExperimentKind, Workspace,
};
use ecg_contrast::eval::{auroc, mae};
use ecg_contrast::nn::head::{Head, Task};

#[derive(Parser)]
#[command(name = "ecg-lab", version, about = "Contrastive ECG pretraining experiments on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Random,
    Idb,
}

impl From<Mode> for BatchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Random => BatchMode::Random,
            Mode::Idb => BatchMode::Idb,
        }
    }
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the split and subset scale factor.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Reuse intact artifacts from an earlier run in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Step {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "random")]
    mode: Mode,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort stores.
    Synth(Common),
    /// Pretrain the union encoder for one batching mode.
    Pretrain(Step),
    /// Embed every cohort with a pretrained encoder.
    Embed(Step),
    /// Train age and sex heads on the head cohort's split.
    Head(Step),
    /// Evaluate trained heads on every cohort.
    Eval(Step),
    /// Pretraining-cohort by label-cohort experiment.
    Matrix(Common),
    /// Out-of-distribution comparison of random and idb batching.
    Ood(Common),
    /// Render Markdown and CSV from finished experiment directories.
    Report {
        /// Experiment output directories holding a manifest.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => match c.preset {
            Preset::Desk => ExperimentConfig::desk(kind),
            Preset::Tiny => ExperimentConfig::tiny(kind),
        },
    };
    if c.config.is_some() && cfg.kind != kind {
        log::warn!("config declares {:?}, running as {kind:?}", cfg.kind);
        cfg.kind = kind;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.scale {
        cfg.scale = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn head_path(out: &Path, mode: Mode, task: Task) -> PathBuf {
    let mode = BatchMode::from(mode).as_str();
    let task = match task {
        Task::AgeRegression => "age",
        Task::SexClassification => "sex",
    };
    out.join("heads").join(format!("{mode}-{task}.json"))
}

/// Opens the workspace for the step commands, which always build on the
/// artifacts already present in --out.
fn step_workspace(s: &Step) -> Result<(ExperimentConfig, Workspace, OodData)> {
    let cfg = load_config(&s.common, ExperimentKind::Ood)?;
    let mut ws = Workspace::open(&s.common.out, &cfg, true)?;
    let data = OodData::load(&cfg, &mut ws)?;
    Ok((cfg, ws, data))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(c) => {
            let cfg = load_config(&c, ExperimentKind::Ood)?;
            let mut ws = Workspace::open(&c.out, &cfg, c.resume)?;
            let specs = cfg.cohorts.resolve()?;
            for store in synth_stage(&mut ws, &specs)? {
                println!("{}: {} records", store.path().display(), store.len());
            }
        }
        Command::Pretrain(s) => {
            let (cfg, mut ws, data) = step_workspace(&s)?;
            ood_encoder(&mut ws, &cfg, &data, s.mode.into())?;
            let name = BatchMode::from(s.mode).as_str();
            println!("{}", ws.manifest.artifact_path(&ws.dir, &format!("checkpoint/{name}"))?.display());
        }
        Command::Embed(s) => {
            let (cfg, mut ws, data) = step_workspace(&s)?;
            let (_, emb) = ood_encoder(&mut ws, &cfg, &data, s.mode.into())?;
            let name = BatchMode::from(s.mode).as_str();
            println!(
                "{}: {} embeddings of dimension {}",
                ws.manifest.artifact_path(&ws.dir, &format!("embeddings/{name}"))?.display(),
                emb.len(),
                emb.dim
            );
        }
        Command::Head(s) => {
            let (cfg, mut ws, data) = step_workspace(&s)?;
            let (_, emb) = ood_encoder(&mut ws, &cfg, &data, s.mode.into())?;
            let (age, sex) = ood_heads(&cfg, &data.split, &EmbIndex::new(&emb), cfg.run_seed(0))?;
            for head in [&age, &sex] {
                let path = head_path(&s.common.out, s.mode, head.task);
                std::fs::create_dir_all(path.parent().expect("head path has a parent"))?;
                std::fs::write(&path, serde_json::to_string(head)?)?;
                println!("{}", path.display());
            }
        }
        Command::Eval(s) => {
            let (cfg, mut ws, data) = step_workspace(&s)?;
            let (_, emb) = ood_encoder(&mut ws, &cfg, &data, s.mode.into())?;
            let index = EmbIndex::new(&emb);
            let read = |task| -> Result<Head> {
                let path = head_path(&s.common.out, s.mode, task);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("{} missing; run `ecg-lab head` first", path.display()))?;
                Ok(serde_json::from_str(&text)?)
            };
            let (age, sex) = (read(Task::AgeRegression)?, read(Task::SexClassification)?);
            let mut csv = String::from("cohort,name,n,mae,auroc\n");
            for (ci, set) in data.prepared.iter().enumerate() {
                let ids: Vec<u64> = if ci == data.head {
                    data.split.test.clone()
                } else {
                    set.metas.iter().filter(|m| has_labels(m)).map(|m| m.record_id).collect()
                };
                let x = index.features(&ids)?;
                let m = mae(&age.predict(&x)?, &index.targets(&ids, Task::AgeRegression)?)?;
                let labels: Vec<bool> = index
                    .targets(&ids, Task::SexClassification)?
                    .iter()
                    .map(|&t| t > 0.5)
                    .collect();
                let a = auroc(&sex.predict(&x)?, &labels)?;
                let c = &data.cohorts[ci];
                csv.push_str(&format!("{},{},{},{m:.6},{a:.6}\n", c.id, c.name, ids.len()));
            }
            let path = s
                .common
                .out
                .join("eval")
                .join(format!("{}.csv", BatchMode::from(s.mode).as_str()));
            std::fs::create_dir_all(path.parent().expect("eval path has a parent"))?;
            std::fs::write(&path, &csv)?;
            print!("{csv}");
        }
        Command::Matrix(c) => {
            let cfg = load_config(&c, ExperimentKind::Matrix)?;
            let res = run_matrix(&cfg, &c.out, c.resume)?;
            for (e, name) in res.encoders.iter().enumerate() {
                println!(
                    "{name}: mean MAE {:.3}, mean AUROC {:.3}",
                    res.row_mean_mae[e], res.row_mean_auroc[e]
                );
            }
        }
        Command::Ood(c) => {
            let cfg = load_config(&c, ExperimentKind::Ood)?;
            let res = run_ood(&cfg, &c.out, c.resume)?;
            for s in &res.summary {
                println!(
                    "{}: ID MAE {:.3}, OOD MAE {:.3}, OOD AUROC {:.3}",
                    s.encoder, s.id_mae, s.ood_mae, s.ood_auroc
                );
            }
            for p in &res.probe {
                println!("{}: cohort probe {:.3}", p.encoder, p.score);
            }
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                bail!("no experiment directories given");
            }
            for path in write_report(&dirs, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
