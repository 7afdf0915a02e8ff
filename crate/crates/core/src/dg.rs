//! Source-domain head training: a single conditioning (baseline) or `K`
//! scene prompts tied together by a pairwise KL consistency term.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::backbone::{Backbone, BackboneOutput};
use crate::data::{latent_batch, SceneSample};
use crate::error::{invalid, Error, Result};
use crate::head::{ce_loss, head_forward, HeadConfig, HeadSpec, SegHead};
use crate::label::LabelMap;
use crate::model::SegModel;
use crate::nn::{self, ParamSet, SgdMomentum, VarSet};
use crate::prompt::{self, CategoryPrompt, ScenePrompt};

/// Sum over ordered pairs `p ≠ q` of `KL(P_p ‖ P_q)`, averaged over pixels.
/// Inputs are probability maps `[B, C, H, W]`.
pub fn consistency_loss(probs: &[Tensor]) -> Result<Tensor> {
    check_maps(probs)?;
    let logs = probs.iter().map(|p| Ok(p.log()?)).collect::<Result<Vec<_>>>()?;
    pairwise_kl(probs, &logs, false)
}

/// Same quantity computed from logits with stabilized log-softmax. With
/// `detach_target` the first argument of every KL term carries no gradient.
pub fn consistency_loss_logits(logits: &[Tensor], detach_target: bool) -> Result<Tensor> {
    check_maps(logits)?;
    let logs = logits.iter().map(|l| nn::log_softmax(l, 1)).collect::<Result<Vec<_>>>()?;
    let probs = logs.iter().map(|l| Ok(l.exp()?)).collect::<Result<Vec<_>>>()?;
    pairwise_kl(&probs, &logs, detach_target)
}

fn check_maps(maps: &[Tensor]) -> Result<()> {
    if maps.len() < 2 {
        return Err(invalid("consistency needs at least two prediction maps"));
    }
    let d = maps[0].dims();
    if d.len() != 4 {
        return Err(invalid(format!("prediction maps must be [B, C, H, W], got {d:?}")));
    }
    for m in &maps[1..] {
        if m.dims() != d {
            return Err(Error::Shape {
                expected: d.to_vec(),
                got: m.dims().to_vec(),
            });
        }
    }
    Ok(())
}

fn pairwise_kl(probs: &[Tensor], logs: &[Tensor], detach_target: bool) -> Result<Tensor> {
    let (b, _, h, w) = probs[0].dims4()?;
    let pixels = (b * h * w) as f64;
    let mut total: Option<Tensor> = None;
    for p in 0..probs.len() {
        let (pp, lp) = if detach_target {
            (probs[p].detach(), logs[p].detach())
        } else {
            (probs[p].clone(), logs[p].clone())
        };
        for q in 0..probs.len() {
            if p == q {
                continue;
            }
            let kl = (&pp * (&lp - &logs[q])?)?.sum_all()?;
            total = Some(match total {
                None => kl,
                Some(t) => (t + kl)?,
            });
        }
    }
    Ok((total.expect("at least one pair") / pixels)?)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ce: Vec<Tensor>,
    pub consistency: Option<Tensor>,
    pub total: Tensor,
}

/// `Σ_k CE_k + λ·L_c`. For `K = 1` or `λ = 0` the consistency term is not
/// computed and the total is exactly the CE sum.
pub fn total_loss(logits: &[Tensor], labels: &[&LabelMap], lambda: f64) -> Result<LossTerms> {
    total_loss_with(logits, labels, lambda, false)
}

pub fn total_loss_with(logits: &[Tensor], labels: &[&LabelMap], lambda: f64, detach_target: bool) -> Result<LossTerms> {
    if logits.is_empty() {
        return Err(invalid("total loss needs at least one prediction"));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(invalid(format!("lambda must be a finite non-negative number, got {lambda}")));
    }
    let ce = logits.iter().map(|l| ce_loss(l, labels)).collect::<Result<Vec<_>>>()?;
    let mut sum = ce[0].clone();
    for c in &ce[1..] {
        sum = (sum + c)?;
    }
    if logits.len() == 1 || lambda == 0.0 {
        if logits.len() > 1 {
            check_maps(logits)?;
        }
        return Ok(LossTerms {
            ce,
            consistency: None,
            total: sum,
        });
    }
    let lc = consistency_loss_logits(logits, detach_target)?;
    let total = (sum + (&lc * lambda)?)?;
    Ok(LossTerms {
        ce,
        consistency: Some(lc),
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Consistency weight λ.
    pub lambda: f64,
    pub detach_target: bool,
    /// Images per chunk when caching backbone features.
    pub extract_chunk: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.9,
            lambda: 0.1,
            detach_target: false,
            extract_chunk: 16,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(invalid("lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub ce: Vec<f64>,
    pub consistency: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub head: SegHead,
    /// Final scene vector per conditioning; `None` for category-only conditioning.
    pub scenes: Vec<Option<Tensor>>,
    pub optimizer: SgdMomentum,
    pub step: usize,
    pub history: Vec<StepLog>,
    pub backbone_digest: String,
    pub category_digest: String,
}

impl TrainState {
    /// Inference model conditioned on the scene of prompt `k`.
    pub fn model(&self, backbone: &Backbone, categories: &CategoryPrompt, k: usize) -> Result<SegModel> {
        let scene = self.scenes.get(k).ok_or_else(|| invalid(format!("no conditioning {k}")))?;
        Ok(SegModel {
            backbone: backbone.clone(),
            head: self.head.clone(),
            categories: categories.clone(),
            scene: scene.clone(),
        })
    }
}

/// Deterministic mini-batch for `step`: the epoch's permutation depends only
/// on `(seed, epoch)`, so training can resume at any step.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let b = batch.min(n);
    let per_epoch = n / b;
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut nn::seeded_rng(seed, 0xba7c_0000 + epoch as u64));
    perm[within * b..(within + 1) * b].to_vec()
}

pub fn category_digest(cat: &CategoryPrompt) -> Result<String> {
    let mut ps = ParamSet::new();
    ps.insert("category_tokens", cat.tensor()?);
    ps.digest()
}

/// Hook invoked after every optimizer step; used for periodic checkpoints.
pub type StepHook<'a> = dyn FnMut(&TrainState) -> Result<()> + 'a;

/// Shared trainer. `scenes` has one entry per conditioning; `None` conditions
/// on the category tokens alone.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    backbone: &Backbone,
    source: &[SceneSample],
    cat: &CategoryPrompt,
    scenes: &[Option<ScenePrompt>],
    head_cfg: &HeadConfig,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainState>,
    hook: Option<&mut StepHook<'_>>,
) -> Result<TrainState> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if scenes.is_empty() {
        return Err(invalid("at least one conditioning is required"));
    }
    let with_scene = scenes[0].is_some();
    if scenes.iter().any(|s| s.is_some() != with_scene) {
        return Err(invalid("all conditionings must agree on whether a scene token is present"));
    }
    backbone.verify_frozen()?;
    let dtype = backbone.dtype();
    let cat_digest = category_digest(cat)?;
    let num_tokens = cat.num_classes() + usize::from(with_scene);
    let spec = HeadSpec::new(backbone.config(), num_tokens, cat.num_classes(), head_cfg)?;
    let (h, w) = (source[0].height(), source[0].width());

    let mut state = match resume {
        Some(s) => {
            if s.head.spec != spec || s.scenes.len() != scenes.len() {
                return Err(Error::Checkpoint("resume state does not match the training setup".into()));
            }
            if s.backbone_digest != backbone.digest() || s.category_digest != cat_digest {
                return Err(Error::DigestMismatch {
                    name: "resume state".into(),
                    expected: s.backbone_digest.clone(),
                    found: backbone.digest().to_string(),
                });
            }
            s
        }
        None => TrainState {
            head: SegHead::init(spec.clone(), seed, dtype)?,
            scenes: scenes.iter().map(|s| s.as_ref().map(|p| p.token.vector.clone())).collect(),
            optimizer: SgdMomentum::new(cfg.momentum),
            step: 0,
            history: Vec::new(),
            backbone_digest: backbone.digest().to_string(),
            category_digest: cat_digest.clone(),
        },
    };

    let mut vars_init = state.head.params.prefixed("head/");
    for (k, s) in scenes.iter().enumerate() {
        if let (Some(p), Some(v)) = (s, &state.scenes[k]) {
            if p.is_learned() {
                vars_init.insert(format!("scene/{k}"), v.clone());
            }
        }
    }
    let vars = VarSet::from_params(&vars_init)?;

    let labels: Vec<&LabelMap> = source.iter().map(|s| &s.labels).collect();
    let all_refs: Vec<&SceneSample> = source.iter().collect();
    let cats = cat.tensor()?;
    let fixed_cond = |k: usize| -> Result<Option<Tensor>> {
        match (&scenes[k], &state.scenes[k]) {
            (None, _) => Ok(Some(cats.clone())),
            (Some(p), Some(v)) if !p.is_learned() => Ok(Some(prompt::conditioning_with_scene(&cats, v)?)),
            _ => Ok(None),
        }
    };
    let mut cache: Vec<Option<BackboneOutput>> = Vec::with_capacity(scenes.len());
    let needs_images = (0..scenes.len()).any(|k| matches!(&scenes[k], Some(p) if p.is_learned()));
    let images = if needs_images || state.step < cfg.steps {
        Some(latent_batch(&all_refs, dtype)?)
    } else {
        None
    };
    if state.step < cfg.steps {
        for k in 0..scenes.len() {
            cache.push(match fixed_cond(k)? {
                Some(cond) => {
                    debug!(conditioning = k, images = source.len(), "caching backbone features");
                    Some(backbone.extract_all(images.as_ref().expect("images"), &cond, cfg.extract_chunk)?)
                }
                None => None,
            });
        }
    }

    let mut hook = hook;
    while state.step < cfg.steps {
        let step = state.step;
        let lr = nn::cosine_lr(cfg.lr, step, cfg.steps);
        let idx = batch_indices(seed, step, source.len(), cfg.batch_size);
        let idx_t = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), backbone.device())?;
        let batch_labels: Vec<&LabelMap> = idx.iter().map(|&i| labels[i]).collect();
        let params = vars.params();
        let head_ps = params.strip_prefix("head/");
        let mut logits = Vec::with_capacity(scenes.len());
        for k in 0..scenes.len() {
            let out = match &cache[k] {
                Some(c) => c.select(&idx_t)?,
                None => {
                    let tok = params.get(&format!("scene/{k}"))?;
                    let cond = prompt::conditioning_with_scene(&cats, tok)?;
                    let x = images.as_ref().expect("images").index_select(&idx_t, 0)?;
                    backbone.extract(&x, &cond)?
                }
            };
            logits.push(head_forward(&head_ps, &spec, &out, h, w)?);
        }
        let terms = total_loss_with(&logits, &batch_labels, cfg.lambda, cfg.detach_target)?;
        let total = nn::scalar(&terms.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        let grads = terms.total.backward()?;
        state.optimizer.step(&vars, &grads, lr)?;
        let log = StepLog {
            step,
            lr,
            ce: terms.ce.iter().map(nn::scalar).collect::<Result<_>>()?,
            consistency: terms.consistency.as_ref().map(nn::scalar).transpose()?,
            total,
        };
        state.history.push(log);
        state.step += 1;
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            let recent = &state.history[state.history.len().saturating_sub(cfg.log_every)..];
            let mean = recent.iter().map(|r| r.total).sum::<f64>() / recent.len() as f64;
            info!(step = state.step, loss = mean, "head training");
        }
        if let Some(hk) = hook.as_mut() {
            sync_state(&mut state, &vars, scenes)?;
            hk(&state)?;
        }
    }
    sync_state(&mut state, &vars, scenes)?;
    backbone.verify_frozen()?;
    if category_digest(cat)? != cat_digest {
        return Err(Error::DigestMismatch {
            name: "category tokens".into(),
            expected: cat_digest,
            found: category_digest(cat)?,
        });
    }
    Ok(state)
}

fn sync_state(state: &mut TrainState, vars: &VarSet, scenes: &[Option<ScenePrompt>]) -> Result<()> {
    let snap = vars.snapshot()?;
    state.head.params = snap.strip_prefix("head/");
    for (k, s) in scenes.iter().enumerate() {
        if matches!(s, Some(p) if p.is_learned()) {
            state.scenes[k] = Some(snap.get(&format!("scene/{k}"))?.clone());
        }
    }
    Ok(())
}

/// Single-conditioning training; `scene = None` conditions on category tokens only.
pub fn train_baseline(
    backbone: &Backbone,
    source: &[SceneSample],
    cat: &CategoryPrompt,
    scene: Option<&ScenePrompt>,
    head_cfg: &HeadConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState> {
    train_head(backbone, source, cat, &[scene.cloned()], head_cfg, cfg, seed, None, None)
}

/// Prompt randomization over `K ≥ 2` scene prompts.
pub fn train_prompt_randomization(
    backbone: &Backbone,
    source: &[SceneSample],
    cat: &CategoryPrompt,
    scenes: &[ScenePrompt],
    head_cfg: &HeadConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState> {
    if scenes.len() < 2 {
        return Err(invalid("prompt randomization requires K ≥ 2"));
    }
    let s: Vec<Option<ScenePrompt>> = scenes.iter().cloned().map(Some).collect();
    train_head(backbone, source, cat, &s, head_cfg, cfg, seed, None, None)
}

/// Dtype-preserving helper used by tests and oracles.
pub fn probs_of(logits: &Tensor) -> Result<Tensor> {
    nn::softmax(&logits.to_dtype(DType::F64)?, 1)
}
