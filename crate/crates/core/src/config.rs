//! Declarative experiment configuration (TOML).
//!
//! Any key can be overridden from the environment with the `PROMPTSEG_`
//! prefix, nested keys joined by `__`: `PROMPTSEG_TRAIN__LR=0.02` sets
//! `train.lr`. Values are parsed as TOML scalars or arrays, falling back to
//! plain strings.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::DatasetSpec;
use crate::dg::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::head::HeadConfig;
use crate::prompt::SceneKind;
use crate::ttda::TtdaConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "PROMPTSEG_";
pub const SEED_PLACEHOLDER: &str = "{seed}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    TrainBaseline,
    TrainDg,
    AdaptTtda,
    Eval,
    OracleTrain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::TrainBaseline => "train_baseline",
            Mode::TrainDg => "train_dg",
            Mode::AdaptTtda => "adapt_ttda",
            Mode::Eval => "eval",
            Mode::OracleTrain => "oracle_train",
        }
    }

    pub fn trains_head(self) -> bool {
        matches!(self, Mode::TrainBaseline | Mode::TrainDg | Mode::OracleTrain)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneChoice {
    /// Category tokens only.
    None,
    SourceText,
    TargetText,
    IrrelevantText,
    Learned,
    Image,
}

impl SceneChoice {
    pub fn kind(self) -> Option<SceneKind> {
        match self {
            SceneChoice::None => None,
            SceneChoice::SourceText => Some(SceneKind::SourceText),
            SceneChoice::TargetText => Some(SceneKind::TargetText),
            SceneChoice::IrrelevantText => Some(SceneKind::IrrelevantText),
            SceneChoice::Learned => Some(SceneKind::Learned),
            SceneChoice::Image => Some(SceneKind::Image),
        }
    }

    fn is_text(self) -> bool {
        matches!(
            self,
            SceneChoice::SourceText | SceneChoice::TargetText | SceneChoice::IrrelevantText
        )
    }
}

/// A dataset image used as an image scene prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub domain: String,
    #[serde(default = "default_train_split")]
    pub split: String,
    #[serde(default)]
    pub index: usize,
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.split, self.domain, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneChoice,
    /// Scene word for text kinds; defaults to the training domain for
    /// `source_text` and the evaluation domain for `target_text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    /// Initialization seed for `learned`; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
}

impl SceneSpec {
    pub fn of(kind: SceneChoice) -> Self {
        Self {
            kind,
            word: None,
            seed: None,
            image: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory written by `gen-data`; when absent samples are rendered in memory from `spec`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub spec: DatasetSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            path: None,
            spec: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scene_drop_prob: f64,
    pub log_every: usize,
    pub split: String,
    /// Domains whose images form the captioned corpus; empty means all.
    pub domains: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_per_domain: Option<usize>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            scene_drop_prob: p.scene_drop_prob,
            log_every: p.log_every,
            split: "train".into(),
            domains: Vec::new(),
            limit_per_domain: None,
        }
    }
}

impl PretrainSection {
    pub fn to_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            scene_drop_prob: self.scene_drop_prob,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    /// Category names in label order; defaults to the dataset classes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
    /// Conditioning for `train_baseline` and `oracle_train`.
    pub scene: SceneSpec,
    /// The `K` scene prompts for `train_dg`.
    pub scenes: Vec<SceneSpec>,
    /// Which of `scenes` the saved model is conditioned on at inference.
    pub eval_scene: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            classes: None,
            scene: SceneSpec::of(SceneChoice::SourceText),
            scenes: vec![SceneSpec::of(SceneChoice::SourceText), SceneSpec::of(SceneChoice::TargetText)],
            eval_scene: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub domain: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub detach_target: bool,
    pub extract_chunk: usize,
    pub log_every: usize,
    /// Steps between resumable training-state checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            domain: "domainA".into(),
            split: "train".into(),
            limit: None,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            lambda: t.lambda,
            detach_target: t.detach_target,
            extract_chunk: t.extract_chunk,
            log_every: t.log_every,
            checkpoint_every: 200,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            lambda: self.lambda,
            detach_target: self.detach_target,
            extract_chunk: self.extract_chunk,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtdaSection {
    pub domain: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub lr: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub episodic: bool,
    pub class_balanced: bool,
}

impl Default for TtdaSection {
    fn default() -> Self {
        let t = TtdaConfig::default();
        Self {
            domain: "domainC".into(),
            split: "test".into(),
            limit: None,
            lr: t.lr,
            steps: t.steps,
            threshold: t.threshold,
            episodic: t.episodic,
            class_balanced: t.class_balanced,
        }
    }
}

impl TtdaSection {
    pub fn to_config(&self) -> TtdaConfig {
        TtdaConfig {
            lr: self.lr,
            steps: self.steps,
            threshold: self.threshold,
            episodic: self.episodic,
            class_balanced: self.class_balanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub domain: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    pub chunk: usize,
    /// Row label in reports; defaults to `<source>-><target>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            domain: "domainC".into(),
            split: "test".into(),
            limit: None,
            chunk: 16,
            benchmark: None,
        }
    }
}

/// Input checkpoint paths; `{seed}` is replaced by the run seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

pub fn resolve_seed_path(template: &str, seed: u64) -> PathBuf {
    PathBuf::from(template.replace(SEED_PLACEHOLDER, &seed.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    /// Column label in reports; derived from the mode and prompts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ttda: TtdaSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub checkpoints: CheckpointSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_train_split() -> String {
    "train".into()
}

/// One field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn config_error(errors: &[FieldError]) -> Error {
    let lines: Vec<String> = errors.iter().map(|e| format!("  {e}")).collect();
    Error::Config(format!("invalid configuration\n{}", lines.join("\n")))
}

impl ExperimentConfig {
    /// Minimal configuration for `mode` with every other field at its default.
    pub fn new(mode: Mode) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            setting: None,
            seeds: default_seeds(),
            out_dir: None,
            dataset: DatasetSection::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainSection::default(),
            prompt: PromptSection::default(),
            head: HeadConfig::default(),
            train: TrainSection::default(),
            ttda: TtdaSection::default(),
            eval: EvalSection::default(),
            checkpoints: CheckpointSection::default(),
        }
    }

    /// Scene prompts the mode trains with, in order.
    pub fn training_scenes(&self) -> Vec<SceneSpec> {
        match self.mode {
            Mode::TrainDg => self.prompt.scenes.clone(),
            _ => vec![self.prompt.scene.clone()],
        }
    }

    /// Report label for this run.
    pub fn setting_label(&self) -> String {
        if let Some(s) = &self.setting {
            return s.clone();
        }
        match self.mode {
            Mode::Pretrain => "pretrain".into(),
            Mode::OracleTrain => "Oracle".into(),
            Mode::AdaptTtda => "TTDA".into(),
            Mode::Eval => "eval".into(),
            Mode::TrainDg => {
                if self.prompt.scenes.iter().any(|s| s.kind == SceneChoice::Image) {
                    "DG-I".into()
                } else {
                    "DG-T".into()
                }
            }
            Mode::TrainBaseline => match self.prompt.scene.kind {
                SceneChoice::None => "w/o C_s".into(),
                SceneChoice::SourceText => "Source (C_s)".into(),
                SceneChoice::TargetText => "Target (C_s)".into(),
                SceneChoice::Learned => "Learned (C_s)".into(),
                SceneChoice::IrrelevantText => "Irrelevant (C_s)".into(),
                SceneChoice::Image => "Image (C_s)".into(),
            },
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.prompt.classes.clone().unwrap_or_else(|| self.dataset.spec.classes.clone())
    }

    /// Domain the evaluated predictions come from.
    pub fn eval_domain(&self) -> &str {
        match self.mode {
            Mode::AdaptTtda => &self.ttda.domain,
            _ => &self.eval.domain,
        }
    }

    pub fn benchmark_label(&self, source_domain: &str) -> String {
        self.eval
            .benchmark
            .clone()
            .unwrap_or_else(|| format!("{source_domain}->{}", self.eval_domain()))
    }

    /// Fills in defaults that depend on other fields so the stored config is explicit.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        // eval runs inherit the label stored with the model
        if self.mode != Mode::Eval {
            c.setting = Some(self.setting_label());
        }
        if c.prompt.classes.is_none() {
            c.prompt.classes = Some(c.dataset.spec.classes.clone());
        }
        if c.pretrain.domains.is_empty() {
            c.pretrain.domains = c.dataset.spec.domains.iter().map(|d| d.name.clone()).collect();
        }
        let (train, target) = (c.train.domain.clone(), c.eval_domain().to_string());
        let fill = |s: &mut SceneSpec| {
            match s.kind {
                SceneChoice::SourceText if s.word.is_none() => s.word = Some(train.clone()),
                SceneChoice::TargetText if s.word.is_none() => s.word = Some(target.clone()),
                SceneChoice::Image if s.image.is_none() => {
                    s.image = Some(ImageRef {
                        domain: target.clone(),
                        split: default_train_split(),
                        index: 0,
                    })
                }
                _ => {}
            }
        };
        fill(&mut c.prompt.scene);
        c.prompt.scenes.iter_mut().for_each(fill);
        c
    }

    /// Digest of everything that determines results; output location and
    /// seed list are excluded so seeds can be added to an existing run.
    pub fn digest(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = None;
        c.seeds.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.field_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(config_error(&errors))
        }
    }

    /// Every problem found, each tagged with its dotted key.
    pub fn field_errors(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            err(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if self.seeds.is_empty() {
            err("seeds", "at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            err("seeds", "duplicate seeds".into());
        }
        if let Err(e) = self.dataset.spec.validate() {
            err("dataset.spec", e.to_string());
        }
        if let Err(e) = self.backbone.validate() {
            err("backbone", e.to_string());
        }
        let domains: Vec<&str> = self.dataset.spec.domains.iter().map(|d| d.name.as_str()).collect();
        let splits: Vec<&str> = self.dataset.spec.splits.iter().map(|s| s.name.as_str()).collect();
        let in_memory = self.dataset.path.is_none();
        let check_domain = |field: &str, d: &str, errs: &mut dyn FnMut(&str, String)| {
            if in_memory && !domains.contains(&d) {
                errs(field, format!("unknown domain {d:?} (known: {})", domains.join(", ")));
            }
        };
        let mut pending: Vec<(String, String)> = Vec::new();
        {
            let mut push = |f: &str, m: String| pending.push((f.to_string(), m));
            let check_split = |field: &str, s: &str, errs: &mut dyn FnMut(&str, String)| {
                if in_memory && !splits.contains(&s) {
                    errs(field, format!("unknown split {s:?} (known: {})", splits.join(", ")));
                }
            };
            match self.mode {
                Mode::Pretrain => {
                    let p = &self.pretrain;
                    if p.steps == 0 {
                        push("pretrain.steps", "must be at least 1".into());
                    }
                    if p.batch_size == 0 {
                        push("pretrain.batch_size", "must be at least 1".into());
                    }
                    if !(p.lr > 0.0 && p.lr.is_finite()) {
                        push("pretrain.lr", "must be positive and finite".into());
                    }
                    if !(0.0..=1.0).contains(&p.scene_drop_prob) {
                        push("pretrain.scene_drop_prob", "must lie in [0, 1]".into());
                    }
                    check_split("pretrain.split", &p.split, &mut push);
                    for d in &p.domains {
                        check_domain("pretrain.domains", d, &mut push);
                    }
                }
                Mode::TrainBaseline | Mode::TrainDg | Mode::OracleTrain => {
                    if self.checkpoints.backbone.is_none() {
                        push("checkpoints.backbone", format!("required for mode {}", self.mode));
                    }
                    if let Err(e) = self.train.to_config().validate() {
                        push("train", e.to_string());
                    }
                    check_domain("train.domain", &self.train.domain, &mut push);
                    check_split("train.split", &self.train.split, &mut push);
                    check_domain("eval.domain", &self.eval.domain, &mut push);
                    check_split("eval.split", &self.eval.split, &mut push);
                    if self.head.width == 0 {
                        push("head.width", "must be at least 1".into());
                    }
                    if self.mode == Mode::TrainDg {
                        let k = self.prompt.scenes.len();
                        if k < 2 {
                            push("prompt.scenes", format!("prompt randomization requires K ≥ 2 (got K = {k})"));
                        }
                        if self.prompt.eval_scene >= k.max(1) {
                            push("prompt.eval_scene", format!("index {} out of range for K = {k}", self.prompt.eval_scene));
                        }
                        for (i, s) in self.prompt.scenes.iter().enumerate() {
                            if s.kind == SceneChoice::None {
                                push(&format!("prompt.scenes[{i}].kind"), "every randomized prompt needs a scene".into());
                            }
                        }
                    }
                }
                Mode::Eval | Mode::AdaptTtda => {
                    if self.checkpoints.model.is_none() {
                        push("checkpoints.model", format!("required for mode {}", self.mode));
                    }
                    if self.eval.chunk == 0 {
                        push("eval.chunk", "must be at least 1".into());
                    }
                    if self.mode == Mode::AdaptTtda {
                        if let Err(e) = self.ttda.to_config().validate() {
                            push("ttda", e.to_string());
                        }
                        check_domain("ttda.domain", &self.ttda.domain, &mut push);
                        check_split("ttda.split", &self.ttda.split, &mut push);
                    } else {
                        check_domain("eval.domain", &self.eval.domain, &mut push);
                        check_split("eval.split", &self.eval.split, &mut push);
                    }
                }
            }
            if self.mode.trains_head() {
                let scenes = self.training_scenes();
                let field = |i: usize| {
                    if self.mode == Mode::TrainDg {
                        format!("prompt.scenes[{i}]")
                    } else {
                        "prompt.scene".to_string()
                    }
                };
                for (i, s) in scenes.iter().enumerate() {
                    if s.kind == SceneChoice::IrrelevantText && s.word.is_none() {
                        push(&format!("{}.word", field(i)), "irrelevant_text needs a scene word".into());
                    }
                    if let Some(w) = &s.word {
                        if !s.kind.is_text() {
                            push(&format!("{}.word", field(i)), format!("not used by kind {:?}", s.kind));
                        } else if !self.backbone.vocab.iter().any(|v| v == w) {
                            push(&format!("{}.word", field(i)), format!("{w:?} is not in the backbone vocabulary"));
                        }
                    }
                    if s.image.is_some() && s.kind != SceneChoice::Image {
                        push(&format!("{}.image", field(i)), "only valid for kind image".into());
                    }
                    if let Some(img) = &s.image {
                        check_domain(&format!("{}.image.domain", field(i)), &img.domain, &mut push);
                        check_split(&format!("{}.image.split", field(i)), &img.split, &mut push);
                    }
                    if s.seed.is_some() && s.kind != SceneChoice::Learned {
                        push(&format!("{}.seed", field(i)), "only valid for kind learned".into());
                    }
                }
                let classes = self.class_names();
                if classes.len() != self.dataset.spec.classes.len() && in_memory {
                    push(
                        "prompt.classes",
                        format!(
                            "{} category names for {} label classes",
                            classes.len(),
                            self.dataset.spec.classes.len()
                        ),
                    );
                }
                for c in &classes {
                    if !self.backbone.vocab.iter().any(|v| v == c) {
                        push("prompt.classes", format!("{c:?} is not in the backbone vocabulary"));
                    }
                }
            }
        }
        for (f, m) in pending {
            err(&f, m);
        }
        errs
    }
}

/// `PROMPTSEG_A__B=v` pairs as (`["a", "b"]`, `v`).
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(Vec<String>, String)> {
    let mut out: Vec<(Vec<String>, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() {
                return None;
            }
            Some((rest.split("__").map(|s| s.to_ascii_lowercase()).collect(), v))
        })
        .collect();
    out.sort();
    out
}

fn parse_scalar(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Value, path: &[String], raw: &str) -> std::result::Result<(), FieldError> {
    let field = path.join(".");
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| FieldError {
            field: field.clone(),
            message: "override path crosses a non-table value".into(),
        })?;
        if i + 1 == path.len() {
            table.insert(key.clone(), parse_scalar(raw));
            return Ok(());
        }
        cur = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

/// Parses TOML text, applies environment overrides and validates.
pub fn parse_config<I: IntoIterator<Item = (String, String)>>(text: &str, env: I) -> Result<ExperimentConfig> {
    let mut value: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {}", e.message().trim())))?;
    let mut errors = Vec::new();
    for (path, raw) in env_overrides(env) {
        if let Err(e) = apply_override(&mut value, &path, &raw) {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(config_error(&errors));
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        config_error(&[FieldError {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().message().trim().to_string(),
        }])
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` and applies the process environment.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, std::env::vars())
}
