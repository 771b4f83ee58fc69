//! Command-line front end. Every subcommand takes an optional `--config` JSON
//! whose fields are overridden by flags, and records a `run.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelWeights;
use crate::container::{self, Dtype};
use crate::datasets::{read_feature_store, CorpusIndex, Registry, FEATURE_STORE_VERSION};
use crate::error::{Error, Result};
use crate::eval::{read_labels_csv, run_benchmark, stratified_split, write_table_csv, SplitSpec, TaskConfig, DEFAULT_RATIOS};
use crate::extract::{extract_bags, group_patches};
use crate::mil::{train_mil, FeatureBag, MilHyperparams};
use crate::preprocess::{load_rgb, preprocess_dataset, read_patch_index, LuminanceScorer, PreprocessOptions};
use crate::ssl::{pretrain, PretrainConfig, RunOptions, TrainState, CHECKPOINT_STEM, TRAIN_LOG};
use crate::viz::{project_embeddings, render_attention_maps, write_projection_csv, HeadSelection, ProjectionMethod};

pub const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "cytofm", version, about = "Cytology foundation-model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rescale, tile and filter a registered dataset into PNG patches.
    Preprocess(PreprocessArgs),
    /// iBOT pretraining on a patch directory.
    Pretrain(PretrainArgs),
    /// CLS features per patch from a frozen encoder.
    Extract(ExtractArgs),
    /// Train one ABMIL model on a single split.
    TrainMil(TrainMilArgs),
    /// Repeated-split benchmark producing a metrics report.
    Evaluate(EvaluateArgs),
    /// Attention heatmaps and a 2-D embedding projection.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    mpp40: Option<f64>,
    #[arg(long = "ref-nucleus-um")]
    ref_nucleus_um: Option<f64>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimisation steps (overrides epochs).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Continue from `<out>/checkpoint` if present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder weights stem (e.g. `ckpt/encoder`).
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    patches: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Feature store stem.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainMilArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// JSON split (one split object or a list; the first is used).
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gated: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Task config JSON.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a one-row CSV table.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    patches: Option<PathBuf>,
    /// Feature store to project; extracted on the fly when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `mean` or a head index.
    #[arg(long)]
    head: Option<String>,
    #[arg(long = "max-images")]
    max_images: Option<usize>,
    /// CSV of precomputed 2-D coordinates (`x`,`y` columns); PCA otherwise.
    #[arg(long)]
    coords: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub registry: Option<PathBuf>,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub options: PreprocessOptions,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainRunConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    #[serde(flatten)]
    pub train: PretrainConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub encoder: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Needed only when labels.csv uses class names instead of indices.
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainMilConfig {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub task: Option<String>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub mil: MilHyperparams,
}

impl Default for TrainMilConfig {
    fn default() -> Self {
        Self {
            features: None,
            labels: None,
            task: None,
            split: None,
            out: None,
            seed: 0,
            class_names: vec!["negative".into(), "positive".into()],
            mil: MilHyperparams::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Path to a task JSON; takes precedence over `task_config`.
    pub task: Option<PathBuf>,
    pub task_config: Option<TaskConfig>,
    pub out: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualizeConfig {
    pub encoder: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub head: HeadSelection,
    pub max_images: usize,
    pub coords: Option<PathBuf>,
    pub class_names: Vec<String>,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            encoder: None,
            patches: None,
            features: None,
            labels: None,
            out: None,
            head: HeadSelection::Mean,
            max_images: 8,
            coords: None,
            class_names: Vec::new(),
        }
    }
}

/// Provenance record written next to every output.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    pub weights_format: u32,
    pub feature_store_format: u32,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// SHA-256 of the resolved config JSON.
    pub config_hash: String,
    /// SHA-256 per output file, keyed by path relative to the output location.
    pub outputs: BTreeMap<String, String>,
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
            container::read_json(p).map_err(|e| match e {
                Error::Json { path, source } => Error::invalid(format!("{path}: {source}")),
                other => other,
            })
        }
        None => Ok(T::default()),
    }
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::invalid(format!("missing required flag --{flag}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Where a run's outputs live: a directory (all files hashed, record at
/// `<dir>/run.json`) or explicit files with a record path of their own.
enum Outputs {
    Dir(PathBuf),
    Files { record: PathBuf, files: Vec<PathBuf> },
}

/// `<path>.run.json`
fn record_beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(RUN_FILE);
    PathBuf::from(s)
}

fn write_run<C: Serialize>(command: &str, seed: Option<u64>, config: &C, outputs: Outputs) -> Result<RunRecord> {
    let config = serde_json::to_value(config).map_err(|e| Error::Runtime(e.to_string()))?;
    let config_hash = sha256_hex(config.to_string().as_bytes());
    let mut hashes = BTreeMap::new();
    let record_path = match outputs {
        Outputs::Dir(dir) => {
            let mut files = Vec::new();
            files_under(&dir, &mut files)?;
            for f in files {
                let rel = f.strip_prefix(&dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
                if rel != RUN_FILE {
                    hashes.insert(rel, hash_file(&f)?);
                }
            }
            dir.join(RUN_FILE)
        }
        Outputs::Files { record, files } => {
            for f in &files {
                let name = f.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                hashes.insert(name, hash_file(f)?);
            }
            record
        }
    };
    let record = RunRecord {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        weights_format: container::WEIGHTS_VERSION,
        feature_store_format: FEATURE_STORE_VERSION,
        seed,
        config,
        config_hash,
        outputs: hashes,
    };
    container::write_json(&record_path, &record)?;
    Ok(record)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn run_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut c: PreprocessConfig = load_config(&a.config)?;
    set(&mut c.registry, a.registry);
    set(&mut c.dataset, a.dataset);
    set(&mut c.out, a.out);
    if let Some(v) = a.topk {
        c.options.topk = v;
    }
    if let Some(v) = a.mpp40 {
        c.options.mpp_40x = v;
    }
    if let Some(v) = a.ref_nucleus_um {
        c.options.reference_nucleus_um = v;
    }
    let registry = Registry::load(required(&c.registry, "registry")?)?;
    let name = required(&c.dataset, "dataset")?;
    let out = required(&c.out, "out")?.clone();
    let record = registry
        .get(name)
        .ok_or_else(|| Error::invalid(format!("dataset {name:?} not in registry")))?;
    let metas = preprocess_dataset(record, &out, &LuminanceScorer::default(), &c.options)?;
    log::info!("preprocess: {} patches written to {}", metas.len(), out.display());
    write_run("preprocess", None, &c, Outputs::Dir(out))?;
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let mut c: PretrainRunConfig = load_config(&a.config)?;
    set(&mut c.corpus, a.corpus);
    set(&mut c.out, a.out);
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(s) = a.steps {
        c.train.max_steps = Some(s);
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    let corpus_dir = required(&c.corpus, "corpus")?.clone();
    let out = required(&c.out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let corpus = CorpusIndex::from_patch_dir(&corpus_dir, c.seed)?;
    let ckpt = out.join(CHECKPOINT_STEM);
    let resume = if a.resume && container::manifest_path(&ckpt).exists() {
        Some(TrainState::load(&ckpt)?)
    } else {
        None
    };
    let log_path = out.join(TRAIN_LOG);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let opts = RunOptions {
        checkpoint_dir: Some(out.clone()),
        stop_at: None,
    };
    pretrain(&corpus, &c.train, c.seed, &opts, resume, &mut |l| {
        let line = serde_json::to_string(l).map_err(|e| Error::Runtime(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if l.step % 10 == 0 {
            log::info!("step {} L_cls {:.4} L_mim {:.4}", l.step, l.loss_cls, l.loss_mim);
        }
        Ok(())
    })?;
    drop(log_file);
    write_run("pretrain", Some(c.seed), &c, Outputs::Dir(out))?;
    Ok(())
}

fn encoder_id(stem: &Path) -> Result<String> {
    let h = hash_file(&container::manifest_path(stem))?;
    Ok(h[..16].to_string())
}

fn load_labels(path: &Option<PathBuf>, class_names: &[String]) -> Result<Option<BTreeMap<String, usize>>> {
    path.as_ref().map(|p| read_labels_csv(p, class_names)).transpose()
}

fn run_extract(a: ExtractArgs) -> Result<()> {
    let mut c: ExtractConfig = load_config(&a.config)?;
    set(&mut c.encoder, a.encoder);
    set(&mut c.patches, a.patches);
    set(&mut c.labels, a.labels);
    set(&mut c.out, a.out);
    let enc_stem = required(&c.encoder, "encoder")?;
    let patches = required(&c.patches, "patches")?;
    let out = required(&c.out, "out")?.clone();
    let encoder = ModelWeights::load(enc_stem)?;
    let labels = load_labels(&c.labels, &c.class_names)?;
    ensure_parent(&out)?;
    let store = crate::extract::extract_features(&encoder, &encoder_id(enc_stem)?, patches, labels.as_ref(), &out)?;
    log::info!("extract: {} bags, {} rows", store.manifest.entries.len(), store.manifest.total_rows);
    let outputs = Outputs::Files {
        record: record_beside(&out),
        files: vec![store.manifest_path, store.blob_path],
    };
    write_run("extract", None, &c, outputs)?;
    Ok(())
}

fn attach_labels(bags: &mut [FeatureBag], labels: &BTreeMap<String, usize>) {
    for b in bags {
        if let Some(&y) = labels.get(&b.image_id) {
            b.label = Some(y);
        }
    }
}

fn read_split(path: &Path) -> Result<SplitSpec> {
    let v: serde_json::Value = container::read_json(path)?;
    let v = match v {
        serde_json::Value::Array(mut xs) if !xs.is_empty() => xs.swap_remove(0),
        serde_json::Value::Array(_) => return Err(Error::invalid(format!("{}: empty split list", path.display()))),
        other => other,
    };
    serde_json::from_value(v).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn run_train_mil(a: TrainMilArgs) -> Result<()> {
    let mut c: TrainMilConfig = load_config(&a.config)?;
    set(&mut c.features, a.features);
    set(&mut c.labels, a.labels);
    set(&mut c.task, a.task);
    set(&mut c.split, a.split);
    set(&mut c.out, a.out);
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if a.gated {
        c.mil.gated = true;
    }
    let mut bags = read_feature_store(required(&c.features, "features")?)?;
    let labels = read_labels_csv(required(&c.labels, "labels")?, &c.class_names)?;
    let task = required(&c.task, "task")?.clone();
    let out = required(&c.out, "out")?.clone();
    attach_labels(&mut bags, &labels);
    let known: BTreeMap<String, usize> = bags.iter().filter_map(|b| b.label.map(|y| (b.image_id.clone(), y))).collect();
    let split = match &c.split {
        Some(p) => read_split(p)?,
        None => stratified_split(&known, DEFAULT_RATIOS, c.seed, 0)?,
    };
    let by_id: BTreeMap<&str, &FeatureBag> = bags.iter().map(|b| (b.image_id.as_str(), b)).collect();
    let pick = |ids: &[String]| -> Result<Vec<FeatureBag>> {
        ids.iter()
            .map(|id| {
                let b = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::invalid(format!("split references unknown image {id}")))?;
                if b.label.is_none() {
                    return Err(Error::invalid(format!("no label for image {id}")));
                }
                Ok((*b).clone())
            })
            .collect()
    };
    let (train, val) = (pick(&split.train)?, pick(&split.val)?);
    let model = train_mil(&train, &val, c.class_names.len(), &c.mil, c.seed)?;
    if let Some(s) = &model.summary {
        log::info!("train-mil {task}: best epoch {} val {:.4}", s.best_epoch, s.best_val_metric);
    }
    ensure_parent(&out)?;
    model.save(&out)?;
    write_run(
        "train-mil",
        Some(c.seed),
        &c,
        Outputs::Files {
            record: record_beside(&out),
            files: vec![container::manifest_path(&out), container::blob_path(&out, Dtype::F64)],
        },
    )?;
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut c: EvaluateConfig = load_config(&a.config)?;
    set(&mut c.features, a.features);
    set(&mut c.labels, a.labels);
    set(&mut c.task, a.task);
    set(&mut c.out, a.out);
    set(&mut c.table, a.table);
    let mut task: TaskConfig = match &c.task {
        Some(p) => load_config(&Some(p.clone()))?,
        None => c.task_config.clone().unwrap_or_default(),
    };
    if let Some(s) = a.seed {
        task.seed = s;
    }
    c.task_config = Some(task.clone());
    let bags = read_feature_store(required(&c.features, "features")?)?;
    let labels = read_labels_csv(required(&c.labels, "labels")?, &task.class_names)?;
    let out = required(&c.out, "out")?.clone();
    let report = run_benchmark(&bags, &labels, &task)?;
    log::info!("evaluate {}: accuracy {} auroc {}", task.task_id, report.accuracy.formatted, report.auroc.formatted);
    ensure_parent(&out)?;
    container::write_json(&out, &report)?;
    let mut files = vec![out.clone()];
    if let Some(t) = &c.table {
        ensure_parent(t)?;
        write_table_csv(std::slice::from_ref(&report), t)?;
        files.push(t.clone());
    }
    let record = out.with_extension(RUN_FILE);
    write_run("evaluate", Some(task.seed), &c, Outputs::Files { record, files })?;
    Ok(())
}

fn parse_head(s: &str) -> Result<HeadSelection> {
    if s == "mean" {
        return Ok(HeadSelection::Mean);
    }
    s.parse()
        .map(HeadSelection::Head)
        .map_err(|_| Error::invalid(format!("--head must be `mean` or an index, got {s:?}")))
}

fn run_visualize(a: VisualizeArgs) -> Result<()> {
    let mut c: VisualizeConfig = load_config(&a.config)?;
    set(&mut c.encoder, a.encoder);
    set(&mut c.patches, a.patches);
    set(&mut c.features, a.features);
    set(&mut c.labels, a.labels);
    set(&mut c.out, a.out);
    set(&mut c.coords, a.coords);
    if let Some(h) = &a.head {
        c.head = parse_head(h)?;
    }
    if let Some(m) = a.max_images {
        c.max_images = m;
    }
    let encoder = ModelWeights::load(required(&c.encoder, "encoder")?)?;
    let patches_dir = required(&c.patches, "patches")?.clone();
    let out = required(&c.out, "out")?.clone();
    let labels = load_labels(&c.labels, &c.class_names)?;

    // One heatmap per image, from its first patch in grid order.
    let groups = group_patches(&read_patch_index(&patches_dir)?);
    let picked: Vec<(String, image::RgbImage)> = groups
        .values()
        .take(c.max_images)
        .map(|ms| {
            let m = &ms[0];
            let id = m.file.trim_end_matches(".png").to_string();
            Ok((id, load_rgb(&patches_dir.join(&m.file))?))
        })
        .collect::<Result<_>>()?;
    let maps = render_attention_maps(&encoder, &picked, c.head, &out.join("heatmaps"))?;
    let flat = maps.iter().filter(|m| m.constant).count();
    if flat > 0 {
        log::warn!("{flat} attention maps were constant and rendered gray");
    }

    let mut bags = match &c.features {
        Some(f) => read_feature_store(f)?,
        None => extract_bags(&encoder, &patches_dir, None, true)?,
    };
    if let Some(l) = &labels {
        attach_labels(&mut bags, l);
    }
    let d = bags.first().map(|b| b.dim()).unwrap_or(0);
    let mut x = Array2::<f64>::zeros((bags.len(), d));
    for (i, b) in bags.iter().enumerate() {
        let mean = b.features.mean_axis(ndarray::Axis(0)).expect("non-empty bag");
        x.row_mut(i).assign(&mean.mapv(f64::from));
    }
    let method = c.coords.clone().map_or(ProjectionMethod::Pca, ProjectionMethod::External);
    let proj = project_embeddings(&x, &method)?;
    let ids: Vec<String> = bags.iter().map(|b| b.image_id.clone()).collect();
    let labs: Vec<Option<usize>> = bags.iter().map(|b| b.label).collect();
    write_projection_csv(&out.join("projection.csv"), &ids, &labs, &proj)?;
    write_run("visualize", None, &c, Outputs::Dir(out))?;
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 success, 1 validation error, 2 runtime failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Extract(a) => run_extract(a),
        Command::TrainMil(a) => run_train_mil(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Visualize(a) => run_visualize(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
