//! Experiment runner: run directories, checkpoints, metrics, plots and the
//! ablation report.
//!
//! A run directory holds `run.json` (mode, setting, config digest, code
//! version, seeds), the resolved `config.toml`, and one `seed_<n>/`
//! subdirectory per seed with that seed's checkpoints, logs and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backbone::{pretrain_backbone, Backbone, BackboneConfig, CaptionedImage, PretrainRecord};
use crate::checkpoint::{self, BACKBONE_NS, CATEGORY_TOKENS, HEAD_NS, SCENE_TOKEN, TTDA_SCENE_TOKEN};
use crate::config::{resolve_seed_path, ExperimentConfig, Mode, SceneChoice, SceneSpec};
use crate::data::{gen_scene, DatasetIndex, DatasetSpec, SceneSample};
use crate::dg::{category_digest, train_head, StepLog, TrainState};
use crate::diffusion::LatentImage;
use crate::error::{io_err, Error, Result};
use crate::head::{HeadSpec, SegHead};
use crate::label::LabelMap;
use crate::metrics::{accumulate, iou, mean_std, relative_generalization, round1, ConfusionMatrix, IouReport};
use crate::model::SegModel;
use crate::nn::{ParamSet, SgdMomentum};
use crate::prompt::{
    build_category_prompt, make_scene_prompt, scene_text, CategoryPrompt, SceneDescriptor, ScenePayload, ScenePrompt,
    TokenEmbedding, TokenSource,
};
use crate::ttda::{adapt, AdaptRecord};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const DONE_FILE: &str = "done.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const ADAPTED_CKPT: &str = "adapted.ckpt";
pub const TRAIN_STATE_CKPT: &str = "train_state.ckpt";
pub const LOSS_PLOT: &str = "loss.svg";

/// Label order of the ablation table.
pub const SETTING_ORDER: [&str; 8] = [
    "w/o C_s",
    "Target (C_s)",
    "Learned (C_s)",
    "Source (C_s)",
    "TTDA",
    "DG-T",
    "DG-I",
    "Oracle",
];

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_file(path, s)
}

/// Samples either rendered on demand from a spec or read from a generated dataset.
#[derive(Debug, Clone)]
pub enum DataSource {
    Memory(DatasetSpec),
    Disk(DatasetIndex),
}

impl DataSource {
    pub fn spec(&self) -> &DatasetSpec {
        match self {
            DataSource::Memory(s) => s,
            DataSource::Disk(d) => &d.spec,
        }
    }

    pub fn load(&self, split: &str, domain: &str, limit: Option<usize>) -> Result<Vec<SceneSample>> {
        match self {
            DataSource::Disk(d) => d.load(split, domain, limit),
            DataSource::Memory(spec) => {
                let sp = spec.split(split)?;
                let dom = spec.domain(domain)?;
                let n = limit.map_or(sp.count, |l| sp.count.min(l as u64));
                if n == 0 {
                    return Err(Error::Dataset(format!("no samples for split {split:?}, domain {domain:?}")));
                }
                (sp.seed_start..sp.seed_start + n)
                    .map(|seed| gen_scene(seed, dom, spec.classes.len(), &spec.layout))
                    .collect()
            }
        }
    }
}

/// Status record at the root of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub code_version: String,
    pub mode: Mode,
    pub setting: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub setting: String,
    pub benchmark: String,
    pub source_domain: String,
    pub eval_domain: String,
    pub split: String,
    pub seed: u64,
    pub images: usize,
    pub class_names: Vec<String>,
    /// Percent; `None` for classes absent from prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Percent.
    pub miou: f64,
    /// For adaptation runs: the unadapted model on the same stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_miou: Option<f64>,
}

impl MetricsRecord {
    fn from_report(base: MetricsBase, report: &IouReport) -> Self {
        Self {
            setting: base.setting,
            benchmark: base.benchmark,
            source_domain: base.source_domain,
            eval_domain: base.eval_domain,
            split: base.split,
            seed: base.seed,
            images: base.images,
            class_names: base.class_names,
            per_class_iou: report.per_class.iter().map(|v| v.map(|x| 100.0 * x)).collect(),
            miou: 100.0 * report.miou,
            reference_miou: None,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("setting,benchmark,seed,images");
        for c in &self.class_names {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",miou\n");
        let _ = write!(s, "{},{},{},{}", csv_field(&self.setting), csv_field(&self.benchmark), self.seed, self.images);
        for v in &self.per_class_iou {
            match v {
                Some(x) => {
                    let _ = write!(s, ",{x:.4}");
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{:.4}", self.miou);
        s
    }
}

struct MetricsBase {
    setting: String,
    benchmark: String,
    source_domain: String,
    eval_domain: String,
    split: String,
    seed: u64,
    images: usize,
    class_names: Vec<String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Metadata stored in backbone checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub kind: String,
    pub backbone: BackboneConfig,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub config_digest: String,
}

/// Metadata stored in model and adapted-model checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub setting: String,
    pub seed: u64,
    pub source_domain: String,
    pub class_names: Vec<String>,
    pub backbone: BackboneConfig,
    pub head: HeadSpec,
    pub scene: Option<SceneDescriptor>,
    pub config_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainStateMeta {
    kind: String,
    step: usize,
    history: Vec<StepLog>,
    backbone_digest: String,
    category_digest: String,
    head: HeadSpec,
    scenes: Vec<bool>,
    config_digest: String,
}

/// Loads a frozen backbone; the extraction timestep follows `feature_timestep`
/// when given, otherwise the stored configuration.
pub fn load_backbone(path: &Path, feature_timestep: Option<usize>) -> Result<Backbone> {
    let (ps, manifest) = checkpoint::load(path)?;
    let meta: BackboneMeta = serde_json::from_value(manifest.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: no backbone metadata ({e})", path.display())))?;
    let mut cfg = meta.backbone;
    if let Some(p) = feature_timestep {
        cfg.feature_timestep = p;
    }
    let bb = Backbone::freeze(cfg, ps.strip_prefix(BACKBONE_NS))?;
    if manifest.freeze_digest.as_deref() != Some(bb.digest()) {
        return Err(Error::DigestMismatch {
            name: format!("backbone in {}", path.display()),
            expected: manifest.freeze_digest.unwrap_or_default(),
            found: bb.digest().to_string(),
        });
    }
    Ok(bb)
}

fn model_tensors(model: &SegModel) -> Result<ParamSet> {
    let mut ps = model.backbone.params().prefixed(BACKBONE_NS);
    ps.extend(&model.head.params.prefixed(HEAD_NS));
    ps.insert(CATEGORY_TOKENS, model.categories.tensor()?);
    if let Some(s) = &model.scene {
        ps.insert(SCENE_TOKEN, s.clone());
    }
    Ok(ps)
}

/// Loads a trained model; the category tokens must match a fresh encoding
/// by the stored backbone.
pub fn load_model(path: &Path, feature_timestep: Option<usize>) -> Result<(SegModel, ModelMeta)> {
    let (ps, manifest) = checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_value(manifest.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: not a model checkpoint ({e})", path.display())))?;
    let mut cfg = meta.backbone.clone();
    if let Some(p) = feature_timestep {
        cfg.feature_timestep = p;
    }
    let backbone = Backbone::freeze(cfg, ps.strip_prefix(BACKBONE_NS))?;
    if manifest.freeze_digest.as_deref() != Some(backbone.digest()) {
        return Err(Error::DigestMismatch {
            name: format!("backbone in {}", path.display()),
            expected: manifest.freeze_digest.unwrap_or_default(),
            found: backbone.digest().to_string(),
        });
    }
    let stored = ps.get(CATEGORY_TOKENS)?;
    let rows = (0..stored.dim(0)?)
        .map(|i| TokenEmbedding::new(stored.get(i)?, TokenSource::Text))
        .collect::<Result<Vec<_>>>()?;
    let categories = CategoryPrompt {
        class_names: meta.class_names.clone(),
        tokens: rows,
    };
    let fresh = build_category_prompt(backbone.text_encoder(), &meta.class_names)?;
    if category_digest(&fresh)? != category_digest(&categories)? {
        return Err(Error::DigestMismatch {
            name: "category tokens".into(),
            expected: category_digest(&fresh)?,
            found: category_digest(&categories)?,
        });
    }
    let head = SegHead {
        spec: meta.head.clone(),
        params: ps.strip_prefix(HEAD_NS),
    };
    let scene = if ps.contains(TTDA_SCENE_TOKEN) {
        Some(ps.get(TTDA_SCENE_TOKEN)?.clone())
    } else if ps.contains(SCENE_TOKEN) {
        Some(ps.get(SCENE_TOKEN)?.clone())
    } else {
        None
    };
    Ok((
        SegModel {
            backbone,
            head,
            categories,
            scene,
        },
        meta,
    ))
}

/// Options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub resume: bool,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub record: RunRecord,
    pub metrics: Vec<MetricsRecord>,
}

/// Replaces the configured data source when the config points at a generated dataset.
pub fn open_data(cfg: &ExperimentConfig) -> Result<DataSource> {
    match &cfg.dataset.path {
        Some(p) => Ok(DataSource::Disk(DatasetIndex::open(p)?)),
        None => Ok(DataSource::Memory(cfg.dataset.spec.clone())),
    }
}

fn prepare_run_dir(dir: &Path, digest: &str, opts: &RunOptions) -> Result<Vec<u64>> {
    let run_file = dir.join(RUN_FILE);
    if !dir.exists() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        return Ok(Vec::new());
    }
    let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
    if !non_empty {
        return Ok(Vec::new());
    }
    if !run_file.exists() {
        return Err(Error::Config(format!(
            "{} exists, is not empty and is not a run directory",
            dir.display()
        )));
    }
    let existing: RunRecord = read_json(&run_file)?;
    if opts.force {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        return Ok(Vec::new());
    }
    if !opts.resume {
        return Err(Error::Config(format!(
            "run directory {} already exists (pass --resume to continue it or --force to replace it)",
            dir.display()
        )));
    }
    if existing.config_digest != digest {
        return Err(Error::Config(format!(
            "refusing to resume {}: config digest {} does not match the run's {}",
            dir.display(),
            digest,
            existing.config_digest
        )));
    }
    Ok(existing.seeds)
}

/// Executes every seed of `cfg` into a run directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(seeds) = &opts.seeds {
        cfg.seeds = seeds.clone();
    }
    let data = open_data(&cfg)?;
    if let DataSource::Disk(idx) = &data {
        cfg.dataset.spec = idx.spec.clone();
    }
    cfg.validate()?;
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("invalid configuration\n  out_dir: required (set out_dir or pass --out)".into()))?;
    cfg.out_dir = None;
    let resolved = cfg.resolved();
    let digest = resolved.digest();
    let previous = prepare_run_dir(&dir, &digest, opts)?;
    let mut seeds: BTreeSet<u64> = previous.into_iter().collect();
    seeds.extend(cfg.seeds.iter().copied());
    let record = RunRecord {
        code_version: CODE_VERSION.to_string(),
        mode: cfg.mode,
        setting: resolved.setting_label(),
        config_digest: digest.clone(),
        seeds: seeds.into_iter().collect(),
    };
    let mut stored = resolved.clone();
    stored.seeds = record.seeds.clone();
    write_file(&dir.join(CONFIG_FILE), stored.to_toml()?)?;
    write_file(&dir.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;

    let mut metrics = Vec::new();
    for &seed in &cfg.seeds {
        let sdir = seed_dir(&dir, seed);
        let done = sdir.join(DONE_FILE);
        if opts.resume && done.exists() {
            info!(seed, "seed already complete; skipping");
            if sdir.join(METRICS_JSON).exists() {
                metrics.push(read_json(&sdir.join(METRICS_JSON))?);
            }
            continue;
        }
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        info!(mode = %cfg.mode, seed, dir = %sdir.display(), "starting");
        let m = match cfg.mode {
            Mode::Pretrain => {
                pretrain_seed(&resolved, &data, seed, &sdir, &digest)?;
                None
            }
            Mode::TrainBaseline | Mode::TrainDg | Mode::OracleTrain => {
                Some(train_seed(&resolved, &data, seed, &sdir, &digest, opts.resume)?)
            }
            Mode::Eval => Some(eval_seed(&resolved, &data, seed)?),
            Mode::AdaptTtda => Some(adapt_seed(&resolved, &data, seed, &sdir, &digest)?),
        };
        if let Some(m) = &m {
            write_file(&sdir.join(METRICS_JSON), serde_json::to_string_pretty(m)? + "\n")?;
            write_file(&sdir.join(METRICS_CSV), m.csv())?;
            info!(seed, setting = %m.setting, benchmark = %m.benchmark, miou = m.miou, "evaluated");
            metrics.push(m.clone());
        }
        write_file(&done, serde_json::to_string(&serde_json::json!({ "config_digest": digest }))? + "\n")?;
    }
    Ok(RunSummary {
        run_dir: dir,
        record,
        metrics,
    })
}

fn pretrain_seed(cfg: &ExperimentConfig, data: &DataSource, seed: u64, dir: &Path, digest: &str) -> Result<()> {
    let dtype = cfg.backbone.dtype();
    let mut corpus = Vec::new();
    for domain in &cfg.pretrain.domains {
        for s in data.load(&cfg.pretrain.split, domain, cfg.pretrain.limit_per_domain)? {
            let present: BTreeSet<usize> = s.labels.data.iter().filter(|&&c| (c as usize) < cfg.dataset.spec.classes.len()).map(|&c| c as usize).collect();
            corpus.push(CaptionedImage {
                image: s.latent(dtype)?,
                scene_word: domain.clone(),
                present_classes: present.into_iter().collect(),
            });
        }
    }
    let classes = cfg.class_names();
    let (bb, log) = pretrain_backbone(&corpus, &classes, &cfg.backbone, &cfg.pretrain.to_config(), seed)?;
    let meta = BackboneMeta {
        kind: "backbone".into(),
        backbone: cfg.backbone.clone(),
        class_names: classes,
        seed,
        config_digest: digest.to_string(),
    };
    checkpoint::save(&dir.join(BACKBONE_CKPT), &bb.params().prefixed(BACKBONE_NS), serde_json::to_value(&meta)?)?;
    write_jsonl(&dir.join("pretrain_log.jsonl"), &log)?;
    let pts: Vec<(f64, f64)> = log.iter().map(|r: &PretrainRecord| (r.step as f64, r.loss)).collect();
    write_file(&dir.join(LOSS_PLOT), loss_svg("pretraining: noise-prediction loss", &[("loss", &pts)]))
}

fn scene_word(spec: &SceneSpec) -> Result<&str> {
    spec.word
        .as_deref()
        .ok_or_else(|| Error::Config(format!("scene prompt {:?} has no word after resolution", spec.kind)))
}

/// Builds the conditioning for one scene spec; `None` for category-only.
pub fn build_scene(
    spec: &SceneSpec,
    backbone: &Backbone,
    data: &DataSource,
    seed: u64,
) -> Result<Option<ScenePrompt>> {
    let Some(kind) = spec.kind.kind() else {
        return Ok(None);
    };
    let p = match spec.kind {
        SceneChoice::None => unreachable!("handled above"),
        SceneChoice::SourceText | SceneChoice::TargetText | SceneChoice::IrrelevantText => {
            make_scene_prompt(kind, ScenePayload::Text(scene_text(scene_word(spec)?)), backbone, None)?
        }
        SceneChoice::Learned => make_scene_prompt(kind, ScenePayload::Seed(spec.seed.unwrap_or(seed)), backbone, None)?,
        SceneChoice::Image => {
            let r = spec
                .image
                .as_ref()
                .ok_or_else(|| Error::Config("image scene prompt has no image reference".into()))?;
            let samples = data.load(&r.split, &r.domain, Some(r.index + 1))?;
            let s = samples
                .get(r.index)
                .ok_or_else(|| Error::Dataset(format!("image prompt index {} out of range", r.index)))?;
            let img = LatentImage::clean(s.latent(backbone.dtype())?)?;
            make_scene_prompt(kind, ScenePayload::Image(img), backbone, Some(&r.to_string()))?
        }
    };
    Ok(Some(p))
}

fn save_train_state(path: &Path, st: &TrainState, digest: &str) -> Result<()> {
    let mut ps = st.head.params.prefixed(HEAD_NS);
    for (k, s) in st.scenes.iter().enumerate() {
        if let Some(t) = s {
            ps.insert(format!("scene/{k}"), t.clone());
        }
    }
    ps.extend(&st.optimizer.state().prefixed("optim/"));
    let meta = TrainStateMeta {
        kind: "train_state".into(),
        step: st.step,
        history: st.history.clone(),
        backbone_digest: st.backbone_digest.clone(),
        category_digest: st.category_digest.clone(),
        head: st.head.spec.clone(),
        scenes: st.scenes.iter().map(Option::is_some).collect(),
        config_digest: digest.to_string(),
    };
    checkpoint::save(path, &ps, serde_json::to_value(&meta)?)
}

fn load_train_state(path: &Path, momentum: f64, digest: &str) -> Result<TrainState> {
    let (ps, manifest) = checkpoint::load(path)?;
    let meta: TrainStateMeta = serde_json::from_value(manifest.metadata)?;
    if meta.config_digest != digest {
        return Err(Error::Config(format!(
            "refusing to resume from {}: config digest {} does not match {}",
            path.display(),
            meta.config_digest,
            digest
        )));
    }
    let scenes = meta
        .scenes
        .iter()
        .enumerate()
        .map(|(k, &present)| {
            if present {
                ps.get(&format!("scene/{k}")).map(|t| Some(t.clone()))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = SgdMomentum::new(momentum);
    optimizer.load_state(ps.strip_prefix("optim/"));
    Ok(TrainState {
        head: SegHead {
            spec: meta.head,
            params: ps.strip_prefix(HEAD_NS),
        },
        scenes,
        optimizer,
        step: meta.step,
        history: meta.history,
        backbone_digest: meta.backbone_digest,
        category_digest: meta.category_digest,
    })
}

fn backbone_path(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    cfg.checkpoints
        .backbone
        .as_deref()
        .map(|t| resolve_seed_path(t, seed))
        .ok_or_else(|| Error::Config("checkpoints.backbone: required".into()))
}

fn model_path(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    cfg.checkpoints
        .model
        .as_deref()
        .map(|t| resolve_seed_path(t, seed))
        .ok_or_else(|| Error::Config("checkpoints.model: required".into()))
}

fn evaluate_samples(model: &SegModel, samples: &[SceneSample], chunk: usize) -> Result<IouReport> {
    iou(&model.evaluate(samples, chunk)?)
}

fn train_seed(
    cfg: &ExperimentConfig,
    data: &DataSource,
    seed: u64,
    dir: &Path,
    digest: &str,
    resume: bool,
) -> Result<MetricsRecord> {
    let backbone = load_backbone(&backbone_path(cfg, seed)?, Some(cfg.backbone.feature_timestep))?;
    let classes = cfg.class_names();
    if classes.len() != data.spec().classes.len() {
        return Err(Error::Config(format!(
            "prompt.classes: {} names for {} label classes",
            classes.len(),
            data.spec().classes.len()
        )));
    }
    let cat = build_category_prompt(backbone.text_encoder(), &classes)?;
    let specs = cfg.training_scenes();
    let scenes = specs
        .iter()
        .map(|s| build_scene(s, &backbone, data, seed))
        .collect::<Result<Vec<_>>>()?;
    let source = data.load(&cfg.train.split, &cfg.train.domain, cfg.train.limit)?;
    let tcfg = cfg.train.to_config();
    let state_path = dir.join(TRAIN_STATE_CKPT);
    let start = if resume && state_path.exists() {
        let st = load_train_state(&state_path, tcfg.momentum, digest)?;
        info!(seed, step = st.step, "resuming head training");
        Some(st)
    } else {
        None
    };
    let every = cfg.train.checkpoint_every;
    let total = tcfg.steps;
    let mut hook = |st: &TrainState| -> Result<()> {
        if every > 0 && st.step % every == 0 && st.step < total {
            save_train_state(&state_path, st, digest)?;
        }
        Ok(())
    };
    let state = train_head(&backbone, &source, &cat, &scenes, &cfg.head, &tcfg, seed, start, Some(&mut hook))?;
    let k = if cfg.mode == Mode::TrainDg { cfg.prompt.eval_scene } else { 0 };
    let model = state.model(&backbone, &cat, k)?;
    let meta = ModelMeta {
        kind: "model".into(),
        setting: cfg.setting_label(),
        seed,
        source_domain: cfg.train.domain.clone(),
        class_names: classes.clone(),
        backbone: backbone.config().clone(),
        head: state.head.spec.clone(),
        scene: scenes[k].as_ref().map(|s| s.descriptor.clone()),
        config_digest: digest.to_string(),
    };
    checkpoint::save(&dir.join(MODEL_CKPT), &model_tensors(&model)?, serde_json::to_value(&meta)?)?;
    write_jsonl(&dir.join("train_log.jsonl"), &state.history)?;
    let pts: Vec<(f64, f64)> = state.history.iter().map(|r| (r.step as f64, r.total)).collect();
    let mut series = vec![("total", pts)];
    if state.history.iter().any(|r| r.consistency.is_some()) {
        series.push((
            "consistency",
            state.history.iter().map(|r| (r.step as f64, r.consistency.unwrap_or(0.0))).collect(),
        ));
    }
    let refs: Vec<(&str, &[(f64, f64)])> = series.iter().map(|(n, p)| (*n, p.as_slice())).collect();
    write_file(&dir.join(LOSS_PLOT), loss_svg(&format!("head training: {}", meta.setting), &refs))?;
    if state_path.exists() {
        fs::remove_file(&state_path).map_err(io_err(&state_path))?;
    }

    let samples = data.load(&cfg.eval.split, &cfg.eval.domain, cfg.eval.limit)?;
    let report = evaluate_samples(&model, &samples, cfg.eval.chunk)?;
    Ok(MetricsRecord::from_report(
        MetricsBase {
            setting: meta.setting,
            benchmark: cfg.benchmark_label(&cfg.train.domain),
            source_domain: cfg.train.domain.clone(),
            eval_domain: cfg.eval.domain.clone(),
            split: cfg.eval.split.clone(),
            seed,
            images: samples.len(),
            class_names: classes,
        },
        &report,
    ))
}

fn eval_seed(cfg: &ExperimentConfig, data: &DataSource, seed: u64) -> Result<MetricsRecord> {
    let (model, meta) = load_model(&model_path(cfg, seed)?, None)?;
    let samples = data.load(&cfg.eval.split, &cfg.eval.domain, cfg.eval.limit)?;
    let report = evaluate_samples(&model, &samples, cfg.eval.chunk)?;
    Ok(MetricsRecord::from_report(
        MetricsBase {
            setting: cfg.setting.clone().unwrap_or_else(|| meta.setting.clone()),
            benchmark: cfg.benchmark_label(&meta.source_domain),
            source_domain: meta.source_domain.clone(),
            eval_domain: cfg.eval.domain.clone(),
            split: cfg.eval.split.clone(),
            seed,
            images: samples.len(),
            class_names: meta.class_names.clone(),
        },
        &report,
    ))
}

fn adapt_seed(cfg: &ExperimentConfig, data: &DataSource, seed: u64, dir: &Path, digest: &str) -> Result<MetricsRecord> {
    let (model, meta) = load_model(&model_path(cfg, seed)?, None)?;
    let stream = data.load(&cfg.ttda.split, &cfg.ttda.domain, cfg.ttda.limit)?;
    let reference = evaluate_samples(&model, &stream, cfg.eval.chunk)?;
    let outcome = adapt(&model, &stream, &cfg.ttda.to_config())?;
    let mut cm = ConfusionMatrix::new(model.categories.num_classes());
    for (pred, s) in outcome.after.iter().zip(&stream) {
        accumulate(&mut cm, pred, &s.labels)?;
    }
    let report = iou(&cm)?;
    let mut ps = model_tensors(&model)?;
    ps.insert(TTDA_SCENE_TOKEN, outcome.state.token.clone());
    let ameta = ModelMeta {
        kind: "adapted".into(),
        setting: cfg.setting_label(),
        config_digest: digest.to_string(),
        ..meta.clone()
    };
    checkpoint::save(&dir.join(ADAPTED_CKPT), &ps, serde_json::to_value(&ameta)?)?;
    write_jsonl(&dir.join("adapt_log.jsonl"), &outcome.state.log)?;
    let pts: Vec<(f64, f64)> = outcome
        .state
        .log
        .iter()
        .enumerate()
        .filter_map(|(i, r): (usize, &AdaptRecord)| r.loss.map(|l| (i as f64, l)))
        .collect();
    write_file(&dir.join(LOSS_PLOT), loss_svg("test-time adaptation: pseudo-label loss", &[("loss", &pts)]))?;
    write_predictions(&dir.join("predictions_digest.txt"), &outcome.after)?;
    let mut rec = MetricsRecord::from_report(
        MetricsBase {
            setting: ameta.setting,
            benchmark: cfg.benchmark_label(&meta.source_domain),
            source_domain: meta.source_domain,
            eval_domain: cfg.ttda.domain.clone(),
            split: cfg.ttda.split.clone(),
            seed,
            images: stream.len(),
            class_names: meta.class_names,
        },
        &report,
    );
    rec.reference_miou = Some(100.0 * reference.miou);
    Ok(rec)
}

fn write_predictions(path: &Path, preds: &[LabelMap]) -> Result<()> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in preds {
        h.update(&p.data);
    }
    write_file(path, format!("{}\n", hex::encode(h.finalize())))
}

/// Polyline plot of one or more series sharing axes.
pub fn loss_svg(title: &str, series: &[(&str, &[(f64, f64)])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, xml_escape(title));
    let _ = writeln!(
        s,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{text}</text>"#);
    };
    label(&mut s, PAD - 4.0, H - PAD, "end", format!("{y0:.3}"));
    label(&mut s, PAD - 4.0, PAD + 4.0, "end", format!("{y1:.3}"));
    label(&mut s, PAD, H - PAD + 16.0, "middle", format!("{x0:.0}"));
    label(&mut s, W - PAD, H - PAD + 16.0, "middle", format!("{x1:.0}"));
    label(&mut s, W / 2.0, H - 12.0, "middle", "step".into());
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = p
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#, coords.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11" fill="{color}" text-anchor="end">{}</text>"#, W - PAD, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One (benchmark, setting) cell of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCell {
    pub benchmark: String,
    pub eval_domain: String,
    pub setting: String,
    /// `(seed, mIoU)` sorted by seed.
    pub values: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub cells: Vec<ReportCell>,
    pub csv: String,
    pub markdown: String,
}

fn setting_rank(s: &str) -> (usize, String) {
    (SETTING_ORDER.iter().position(|&o| o == s).unwrap_or(SETTING_ORDER.len()), s.to_string())
}

/// Collects the per-seed metrics of completed runs.
pub fn collect_metrics(run_dirs: &[PathBuf]) -> Result<Vec<MetricsRecord>> {
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for dir in run_dirs {
        let rf = dir.join(RUN_FILE);
        if !rf.exists() {
            missing.push(rf.display().to_string());
            continue;
        }
        let rec: RunRecord = read_json(&rf)?;
        if rec.mode == Mode::Pretrain {
            missing.push(format!("{} (pretraining runs have no evaluation metrics)", dir.join("seed_*").join(METRICS_JSON).display()));
            continue;
        }
        for seed in &rec.seeds {
            let p = seed_dir(dir, *seed).join(METRICS_JSON);
            if p.exists() {
                out.push(read_json(&p)?);
            } else {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    Ok(out)
}

/// Merges metrics into an ablation table: rows are benchmarks, columns are
/// settings in the canonical order, cells are mean ± std over seeds.
pub fn build_report(records: &[MetricsRecord]) -> Result<Report> {
    let mut groups: BTreeMap<(String, String), (String, BTreeMap<u64, f64>)> = BTreeMap::new();
    for r in records {
        let e = groups
            .entry((r.benchmark.clone(), r.setting.clone()))
            .or_insert_with(|| (r.eval_domain.clone(), BTreeMap::new()));
        if e.1.insert(r.seed, r.miou).is_some() {
            return Err(Error::Config(format!(
                "duplicate results for {} / {} / seed {}",
                r.benchmark, r.setting, r.seed
            )));
        }
    }
    let mut cells: Vec<ReportCell> = groups
        .into_iter()
        .map(|((benchmark, setting), (eval_domain, vals))| {
            let values: Vec<(u64, f64)> = vals.into_iter().collect();
            let v: Vec<f64> = values.iter().map(|x| x.1).collect();
            let (mean, std) = mean_std(&v);
            ReportCell {
                benchmark,
                eval_domain,
                setting,
                values,
                mean,
                std,
            }
        })
        .collect();
    cells.sort_by(|a, b| (&a.benchmark, setting_rank(&a.setting)).cmp(&(&b.benchmark, setting_rank(&b.setting))));

    let mut csv = String::from("benchmark,setting,seeds,mean_miou,std_miou,per_seed\n");
    for c in &cells {
        let per: Vec<String> = c.values.iter().map(|(s, v)| format!("{s}:{v:.4}")).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{:.4},{:.4},{}",
            csv_field(&c.benchmark),
            csv_field(&c.setting),
            c.values.len(),
            c.mean,
            c.std,
            per.join(";")
        );
    }

    // Oracle cells are shared by every benchmark evaluated on the same domain.
    let oracle: BTreeMap<String, &ReportCell> = cells
        .iter()
        .filter(|c| c.setting == "Oracle")
        .map(|c| (c.eval_domain.clone(), c))
        .collect();
    let benches: Vec<(String, String)> = {
        let mut seen = BTreeSet::new();
        cells
            .iter()
            .filter(|c| c.setting != "Oracle" || !cells.iter().any(|o| o.setting != "Oracle" && o.eval_domain == c.eval_domain))
            .filter(|c| seen.insert(c.benchmark.clone()))
            .map(|c| (c.benchmark.clone(), c.eval_domain.clone()))
            .collect()
    };
    let mut settings: Vec<String> = cells.iter().map(|c| c.setting.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    settings.sort_by_key(|s| setting_rank(s));
    let find = |b: &str, dom: &str, s: &str| -> Option<&ReportCell> {
        if s == "Oracle" {
            oracle.get(dom).copied()
        } else {
            cells.iter().find(|c| c.benchmark == b && c.setting == s)
        }
    };
    let mut md = String::from("| Benchmark |");
    for s in &settings {
        let _ = write!(md, " {s} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(settings.len()));
    md.push('\n');
    for (b, dom) in &benches {
        let _ = write!(md, "| {b} |");
        for s in &settings {
            match find(b, dom, s) {
                Some(c) => {
                    let _ = write!(md, " {:.1} ± {:.1} |", round1(c.mean), round1(c.std));
                }
                None => md.push_str(" – |"),
            }
        }
        md.push('\n');
    }
    if !oracle.is_empty() {
        let gen: Vec<&String> = settings.iter().filter(|s| *s != "Oracle").collect();
        if !gen.is_empty() {
            md.push_str("\nRelative to oracle (%)\n\n| Benchmark |");
            for s in &gen {
                let _ = write!(md, " {s} |");
            }
            md.push_str("\n|---|");
            md.push_str(&"---|".repeat(gen.len()));
            md.push('\n');
            for (b, dom) in &benches {
                let _ = write!(md, "| {b} |");
                for s in &gen {
                    match (find(b, dom, s), oracle.get(dom)) {
                        (Some(c), Some(o)) if o.mean > 0.0 => {
                            let _ = write!(md, " {:.1} |", relative_generalization(c.mean, o.mean)?);
                        }
                        _ => md.push_str(" – |"),
                    }
                }
                md.push('\n');
            }
        }
    }
    md.push_str("\nmIoU (%) on the target split, mean ± sample std over seeds.\n");
    Ok(Report {
        cells,
        csv,
        markdown: md,
    })
}

/// Writes `report.csv` and `report.md` into `out`, which must not be one of the runs.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    for d in run_dirs {
        if d.canonicalize().ok().is_some_and(|c| out.canonicalize().ok() == Some(c)) {
            return Err(Error::Config(format!("report output {} is a run directory", out.display())));
        }
    }
    let records = collect_metrics(run_dirs)?;
    let rep = build_report(&records)?;
    write_file(&out.join("report.csv"), &rep.csv)?;
    write_file(&out.join("report.md"), &rep.markdown)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(setting: &str, bench: &str, dom: &str, seed: u64, miou: f64) -> MetricsRecord {
        MetricsRecord {
            setting: setting.into(),
            benchmark: bench.into(),
            source_domain: "domainA".into(),
            eval_domain: dom.into(),
            split: "test".into(),
            seed,
            images: 4,
            class_names: vec!["a".into(), "b".into()],
            per_class_iou: vec![Some(miou), None],
            miou,
            reference_miou: None,
        }
    }

    #[test]
    fn single_run_gives_one_row() {
        let r = build_report(&[rec("Source (C_s)", "A->C", "domainC", 0, 40.0)]).unwrap();
        let rows: Vec<&str> = r.markdown.lines().filter(|l| l.starts_with("| A->C")).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].contains("40.0 ± 0.0"));
        assert_eq!(r.csv.lines().count(), 2);
    }

    #[test]
    fn columns_follow_canonical_order() {
        let mut recs = Vec::new();
        for (i, s) in ["DG-T", "TTDA", "w/o C_s", "Source (C_s)"].iter().enumerate() {
            for seed in 0..3 {
                recs.push(rec(s, "A->C", "domainC", seed, 30.0 + i as f64 + seed as f64));
            }
        }
        let r = build_report(&recs).unwrap();
        let header = r.markdown.lines().next().unwrap();
        assert_eq!(header, "| Benchmark | w/o C_s | Source (C_s) | TTDA | DG-T |");
        assert!(r.markdown.contains("31.0 ± 1.0"));
        assert_eq!(build_report(&recs).unwrap().markdown, r.markdown);
    }

    #[test]
    fn oracle_yields_relative_table() {
        let recs = vec![
            rec("Source (C_s)", "domainA->domainC", "domainC", 0, 49.2),
            rec("Oracle", "domainC->domainC", "domainC", 0, 74.7),
        ];
        let r = build_report(&recs).unwrap();
        assert!(r.markdown.contains("Relative to oracle"));
        assert!(r.markdown.contains(" 65.9 |"), "{}", r.markdown);
        assert_eq!(r.markdown.lines().filter(|l| l.starts_with("| domainC->domainC")).count(), 0);
    }

    #[test]
    fn duplicate_seed_is_an_error() {
        let recs = vec![rec("TTDA", "b", "d", 0, 1.0), rec("TTDA", "b", "d", 0, 2.0)];
        assert!(build_report(&recs).is_err());
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let e = collect_metrics(&[dir.path().join("nope")]).unwrap_err();
        assert!(matches!(e, Error::MissingArtifacts(ref v) if v.len() == 1));
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let p = [(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)];
        let a = loss_svg("t<1>", &[("loss", &p)]);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("t&lt;1&gt;"));
        assert_eq!(a, loss_svg("t<1>", &[("loss", &p)]));
    }

    #[test]
    fn memory_source_respects_limits() {
        let mut spec = DatasetSpec::default();
        spec.layout.height = 16;
        spec.layout.width = 16;
        let d = DataSource::Memory(spec);
        assert_eq!(d.load("val", "domainB", Some(3)).unwrap().len(), 3);
        assert!(d.load("nope", "domainB", None).is_err());
    }
    #[test]
    fn train_state_roundtrip_resumes_bit_identically() {
        use crate::backbone::init_params;
        use crate::data::{DomainSpec, LayoutConfig};
        use crate::dg::TrainConfig;
        use crate::head::HeadConfig;
        use crate::prompt::SceneKind;

        let cfg = BackboneConfig {
            channels: vec![4, 4, 4],
            attn_dim: 4,
            token_dim: 4,
            time_dim: 4,
            ..BackboneConfig::default()
        };
        let bb = Backbone::freeze(cfg.clone(), init_params(&cfg, 1).unwrap()).unwrap();
        let layout = LayoutConfig {
            height: 16,
            width: 16,
            ..LayoutConfig::default()
        };
        let dom = DomainSpec::identity("domainA");
        let source: Vec<_> = (0..4).map(|s| gen_scene(s, &dom, 6, &layout).unwrap()).collect();
        let names: Vec<String> = crate::data::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect();
        let cat = build_category_prompt(bb.text_encoder(), &names).unwrap();
        let scenes: Vec<Option<ScenePrompt>> = ["domainA", "domainC"]
            .iter()
            .map(|w| Some(make_scene_prompt(SceneKind::SourceText, ScenePayload::Text(scene_text(w)), &bb, None).unwrap()))
            .collect();
        let head = HeadConfig {
            width: 4,
            ..HeadConfig::default()
        };
        let tc = TrainConfig {
            steps: 5,
            batch_size: 2,
            lr: 0.05,
            log_every: 0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRAIN_STATE_CKPT);
        let mut hook = |st: &TrainState| -> Result<()> {
            if st.step == 2 {
                save_train_state(&path, st, "d")?;
            }
            Ok(())
        };
        let full = train_head(&bb, &source, &cat, &scenes, &head, &tc, 7, None, Some(&mut hook)).unwrap();
        assert!(load_train_state(&path, tc.momentum, "other").is_err());
        let mid = load_train_state(&path, tc.momentum, "d").unwrap();
        assert_eq!(mid.step, 2);
        let resumed = train_head(&bb, &source, &cat, &scenes, &head, &tc, 7, Some(mid), None).unwrap();
        assert!(resumed.head.params.bit_equal(&full.head.params).unwrap());
        assert_eq!(resumed.history, full.history);
    }
}
