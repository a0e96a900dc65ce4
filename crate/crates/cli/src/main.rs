mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cellrefine::checkpoint::{sha256_hex, Checkpoint};
use cellrefine::datagen::{generate, GeneratorConfig};
use cellrefine::dataset::{
    DatasetBundle, Split, CATALOG_FILE, EXPRESSION_FILE, METADATA_FILE, ONTOLOGY_FILE, PERTURBED_FILE,
};
use cellrefine::eval::{
    cell_embeddings, identity_eval, imputation_eval, out_of_domain_eval, perturbation_eval, EvalContext, MetricsReport,
};
use cellrefine::longtail::{fit_tail_exponent, CcdfMode, DEFAULT_TAIL_FRACTION};
use cellrefine::model::ModelState;
use cellrefine::training::{
    fine_tune, init_model, post_pretrain, pretrain, Corpus, StageKind, Task, TrainConfig, TrainMode,
};

use config::{env_seed, Layered};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Usage and configuration problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<cellrefine::Error> for CliError {
    fn from(e: cellrefine::Error) -> Self {
        match e {
            cellrefine::Error::InvalidConfig(_) => CliError::Usage(e.into()),
            e => CliError::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "cellrefine",
    version,
    about = "Ontology-aware post-pretraining for single-cell encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    PostPretrain,
    FineTune,
}

impl From<StageArg> for StageKind {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => StageKind::Pretrain,
            StageArg::PostPretrain => StageKind::PostPretrain,
            StageArg::FineTune => StageKind::FineTune,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Identity,
    Imputation,
    Perturbation,
    Ood,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    TailOnly,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a downstream task.
    Evaluate {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recall cut-offs for classification tasks.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Fit a linear probe on at most N training cells per class first.
        #[arg(long)]
        few_shot: Option<usize>,
        /// Training config for the few-shot probe.
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        mask_rate: f64,
    },
    /// Fit the power-law tail exponent of category counts.
    TailFit {
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        counts: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAIL_FRACTION)]
        fraction: f64,
        #[arg(long, value_enum, default_value = "tail-only")]
        mode: ModeArg,
        /// Write the fit here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-cell embeddings as TSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_paths: Vec<String>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    seed: u64,
    duration_secs: f64,
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn hash_dataset(dir: &Path, inputs: &mut BTreeMap<String, String>) -> CliResult<()> {
    for f in [
        EXPRESSION_FILE,
        METADATA_FILE,
        ONTOLOGY_FILE,
        CATALOG_FILE,
        PERTURBED_FILE,
    ] {
        let p = dir.join(f);
        if p.exists() {
            inputs.insert(display(&p), hash_file(&p)?);
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<DatasetBundle> {
    Ok(DatasetBundle::read_dir(dir)?)
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    Ok(Checkpoint::load(path)?)
}

fn check_genes(ck: &Checkpoint, data: &DatasetBundle) -> CliResult<()> {
    if ck.genes != data.dataset.genes {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint vocabulary does not match the dataset genes"
        )));
    }
    Ok(())
}

fn gen_data(configs: &[PathBuf], out: &Path, started: Instant) -> CliResult<()> {
    let mut layered = Layered::load(configs)?;
    layered.resolve_seed()?;
    let cfg: GeneratorConfig = layered.parse()?;
    cfg.validate()?;
    let bundle = generate(&cfg)?;
    let files = bundle.write_dir(out)?;
    let mut inputs = BTreeMap::new();
    for p in configs {
        inputs.insert(display(p), hash_file(p)?);
    }
    let manifest = RunManifest {
        command: "gen-data".into(),
        config_paths: configs.iter().map(|p| display(p)).collect(),
        config: serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
        inputs,
        outputs: files.iter().map(|f| display(&out.join(f))).collect(),
        seed: cfg.seed,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} cells to {}", bundle.dataset.num_cells(), out.display());
    Ok(())
}

/// Architecture fields a config may not silently change on a loaded model.
fn check_model_settings(layered: &Layered, cfg: &TrainConfig, state: &ModelState) -> CliResult<()> {
    if !layered.table.contains_key("model") {
        return Ok(());
    }
    let want = cfg.model.model_config(state.config.cell.vocab_size);
    let have = &state.config;
    let same = want.cell.hidden_size == have.cell.hidden_size
        && want.cell.num_layers == have.cell.num_layers
        && want.cell.num_heads == have.cell.num_heads
        && want.cell.max_len == have.cell.max_len;
    if same {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!(
            "config [model] settings do not match the initial checkpoint"
        )))
    }
}

fn train(
    stage: StageKind,
    configs: &[PathBuf],
    data_dir: &Path,
    init: Option<&Path>,
    out: &Path,
    started: Instant,
) -> CliResult<()> {
    let mut layered = Layered::load(configs)?;
    layered.resolve_seed()?;
    let mut cfg: TrainConfig = layered.parse()?;
    cfg.stage = stage;
    cfg.validate()?;
    let bundle = load_data(data_dir)?;
    let mut inputs = BTreeMap::new();
    for p in configs {
        inputs.insert(display(p), hash_file(p)?);
    }
    hash_dataset(data_dir, &mut inputs)?;
    let state = match init {
        Some(path) => {
            let (ck, hash) = load_checkpoint(path)?;
            inputs.insert(display(path), hash);
            check_genes(&ck, &bundle)?;
            check_model_settings(&layered, &cfg, &ck.state)?;
            ck.state
        }
        None if stage == StageKind::Pretrain => init_model(&bundle.dataset, &cfg.model, cfg.seed)?,
        None => {
            return Err(CliError::Usage(anyhow!(
                "--init is required for stage {}",
                stage.name()
            )))
        }
    };
    let outcome = match stage {
        StageKind::Pretrain => pretrain(state, &bundle.dataset, &cfg)?,
        StageKind::PostPretrain => post_pretrain(state, &bundle.dataset, &bundle.ontology, &bundle.catalog, &cfg)?,
        StageKind::FineTune => fine_tune(state, &bundle.dataset, &cfg)?,
    };
    create_dir(out)?;
    let ck = Checkpoint {
        state: outcome.state,
        genes: bundle.dataset.genes.clone(),
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    let hash = ck.save(&ck_path)?;
    let record_path = out.join(RUN_RECORD_FILE);
    write_json(&record_path, &outcome.record)?;
    let vocab_path = out.join(VOCAB_FILE);
    fs::write(&vocab_path, ck.vocabulary()?.to_json()).context("writing vocabulary")?;
    let manifest = RunManifest {
        command: format!("train --stage {}", stage.name()),
        config_paths: configs.iter().map(|p| display(p)).collect(),
        config: serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
        inputs,
        outputs: [&ck_path, &record_path, &vocab_path]
            .iter()
            .map(|p| display(p))
            .collect(),
        seed: cfg.seed,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let r = &outcome.record;
    println!(
        "{}: {} epochs, best epoch {}, stopped by {:?}; checkpoint {} ({})",
        stage.name(),
        r.epochs.len(),
        r.best_epoch,
        r.stop_reason,
        ck_path.display(),
        &hash[..12]
    );
    Ok(())
}

fn default_ks(requested: &[usize], state: &ModelState) -> Vec<usize> {
    if !requested.is_empty() {
        return requested.to_vec();
    }
    let classes = match &state.head {
        Some(cellrefine::model::TaskHead::Identity { classes }) => classes.len(),
        _ => 0,
    };
    [1, 3].into_iter().filter(|&k| k <= classes).collect()
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    task: TaskArg,
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    k: &[usize],
    few_shot: Option<usize>,
    configs: &[PathBuf],
    mask_rate: f64,
    started: Instant,
) -> CliResult<()> {
    let (ck, hash) = load_checkpoint(checkpoint)?;
    let bundle = load_data(data_dir)?;
    check_genes(&ck, &bundle)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(display(checkpoint), hash.clone());
    hash_dataset(data_dir, &mut inputs)?;
    let (state, seed, probe_config) = match few_shot {
        Some(n) => {
            if !matches!(task, TaskArg::Identity | TaskArg::Ood) {
                return Err(CliError::Usage(anyhow!("--few-shot applies to classification tasks")));
            }
            let mut layered = Layered::load(configs)?;
            layered.resolve_seed()?;
            let mut cfg: TrainConfig = layered.parse()?;
            for p in configs {
                inputs.insert(display(p), hash_file(p)?);
            }
            cfg.stage = StageKind::FineTune;
            cfg.task = Task::Identity;
            cfg.mode = TrainMode::Lp;
            cfg.few_shot_n = Some(n);
            cfg.validate()?;
            let probe = fine_tune(ck.state.clone(), &bundle.dataset, &cfg)?;
            let snapshot = serde_json::to_value(&cfg).map_err(anyhow::Error::from)?;
            (probe.state, cfg.seed, snapshot)
        }
        None => {
            if !configs.is_empty() {
                return Err(CliError::Usage(anyhow!("--config is only used with --few-shot")));
            }
            (ck.state.clone(), env_seed()?, serde_json::Value::Null)
        }
    };
    let ctx = EvalContext {
        seed,
        checkpoint_hash: hash,
    };
    let data = &bundle.dataset;
    let mut report: MetricsReport = match task {
        TaskArg::Identity => identity_eval(&state, data, Split::Test, &default_ks(k, &state), &ctx)?,
        TaskArg::Ood => out_of_domain_eval(&state, data, Split::Ood, &default_ks(k, &state), &ctx)?,
        TaskArg::Imputation => imputation_eval(&state, data, Split::Test, mask_rate, &ctx)?,
        TaskArg::Perturbation => perturbation_eval(&state, data, &ctx)?,
    };
    if let Some(n) = few_shot {
        report.notes.insert("few_shot_n".into(), n.to_string());
    }
    report.validate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &report)?;
    print!("{}", report.to_table());
    let manifest = RunManifest {
        command: "evaluate".into(),
        config_paths: configs.iter().map(|p| display(p)).collect(),
        config: probe_config,
        inputs,
        outputs: vec![display(out)],
        seed,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok(())
}

/// Counts from a JSON array of numbers or an object of `name: count`.
fn read_counts(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(anyhow!("{}: {e}", path.display())))?;
    let items: Vec<&serde_json::Value> = match &value {
        serde_json::Value::Array(a) => a.iter().collect(),
        serde_json::Value::Object(o) => o.values().collect(),
        _ => return Err(CliError::Usage(anyhow!("counts must be a JSON array or object"))),
    };
    items
        .into_iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| CliError::Usage(anyhow!("counts must be numbers")))
        })
        .collect()
}

fn tail_fit(
    counts: Option<&Path>,
    data: Option<&Path>,
    fraction: f64,
    mode: ModeArg,
    out: Option<&Path>,
    started: Instant,
) -> CliResult<()> {
    let mut inputs = BTreeMap::new();
    let values = match (counts, data) {
        (Some(p), _) => {
            inputs.insert(display(p), hash_file(p)?);
            read_counts(p)?
        }
        (None, Some(dir)) => {
            hash_dataset(dir, &mut inputs)?;
            let bundle = load_data(dir)?;
            bundle.dataset.type_counts().values().map(|&n| n as f64).collect()
        }
        (None, None) => return Err(CliError::Usage(anyhow!("one of --counts or --data is required"))),
    };
    let mode = match mode {
        ModeArg::TailOnly => CcdfMode::TailOnly,
        ModeArg::Full => CcdfMode::Full,
    };
    let fit = fit_tail_exponent(&values, fraction, mode)?;
    match out {
        Some(path) => {
            write_json(path, &fit)?;
            let manifest = RunManifest {
                command: "tail-fit".into(),
                config_paths: Vec::new(),
                config: serde_json::json!({ "fraction": fraction, "mode": mode }),
                inputs,
                outputs: vec![display(path)],
                seed: 0,
                duration_secs: started.elapsed().as_secs_f64(),
            };
            write_json(&manifest_path(path), &manifest)?;
            println!(
                "alpha = {:.4}, r2 = {:.4} over {} categories",
                fit.alpha, fit.r2, fit.num_points
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&fit).map_err(anyhow::Error::from)?),
    }
    Ok(())
}

fn export_embeddings(checkpoint: &Path, data_dir: &Path, out: &Path, started: Instant) -> CliResult<()> {
    let (ck, hash) = load_checkpoint(checkpoint)?;
    let bundle = load_data(data_dir)?;
    check_genes(&ck, &bundle)?;
    let data = &bundle.dataset;
    let corpus = Corpus::new(data, ck.state.config.cell.max_len)?;
    let cells: Vec<usize> = (0..data.num_cells()).collect();
    let h = cell_embeddings(&ck.state, &corpus, &cells)?;
    let mut text = String::from("cell_id\tcell_type");
    for j in 0..ck.state.hidden_size() {
        let _ = write!(text, "\th{j}");
    }
    text.push('\n');
    for (i, row) in h.iter().enumerate() {
        text.push_str(&data.meta[i].cell_id);
        text.push('\t');
        text.push_str(&data.meta[i].cell_type);
        for v in row {
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let mut inputs = BTreeMap::new();
    inputs.insert(display(checkpoint), hash);
    hash_dataset(data_dir, &mut inputs)?;
    let manifest = RunManifest {
        command: "export-embeddings".into(),
        config_paths: Vec::new(),
        config: serde_json::Value::Null,
        inputs,
        outputs: vec![display(out)],
        seed: 0,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&manifest_path(out), &manifest)?;
    println!("wrote {} embeddings to {}", h.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    match cli.command {
        Command::GenData { configs, out } => gen_data(&configs, &out, started),
        Command::Train {
            stage,
            configs,
            data,
            init,
            out,
        } => train(stage.into(), &configs, &data, init.as_deref(), &out, started),
        Command::Evaluate {
            task,
            checkpoint,
            data,
            out,
            k,
            few_shot,
            configs,
            mask_rate,
        } => evaluate(
            task,
            &checkpoint,
            &data,
            &out,
            &k,
            few_shot,
            &configs,
            mask_rate,
            started,
        ),
        Command::TailFit {
            counts,
            data,
            fraction,
            mode,
            out,
        } => tail_fit(
            counts.as_deref(),
            data.as_deref(),
            fraction,
            mode,
            out.as_deref(),
            started,
        ),
        Command::ExportEmbeddings { checkpoint, data, out } => export_embeddings(&checkpoint, &data, &out, started),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
