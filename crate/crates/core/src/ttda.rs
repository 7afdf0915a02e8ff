//! Test-time adaptation of the scene token against the model's own
//! pseudo-labels. Backbone, head and category tokens stay frozen; the only
//! trainable quantity is the `N`-dimensional scene vector.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::data::SceneSample;
use crate::dg::category_digest;
use crate::error::{invalid, Error, Result};
use crate::head::{argmax_labels, ce_loss, class_balanced_ce_loss};
use crate::label::{LabelMap, IGNORE_INDEX};
use crate::metrics::{accumulate, iou, ConfusionMatrix};
use crate::model::SegModel;
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtdaConfig {
    /// Step size η.
    pub lr: f64,
    pub steps: usize,
    /// Pixels whose top probability falls below this become `IGNORE_INDEX`.
    pub threshold: Option<f64>,
    /// Reset the token to its initial value before every image.
    pub episodic: bool,
    /// Average the pseudo-label loss per predicted class before averaging
    /// over classes, instead of over all pixels.
    pub class_balanced: bool,
}

impl Default for TtdaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 5,
            threshold: None,
            episodic: false,
            class_balanced: false,
        }
    }
}

impl TtdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("ttda lr must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(invalid("ttda steps must be at least 1"));
        }
        if let Some(t) = self.threshold {
            if !(0.0..1.0).contains(&t) {
                return Err(invalid(format!("threshold {t} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Argmax pseudo-labels for logits `[C, H, W]` or `[1, C, H, W]`, ties to the
/// smaller class index, optionally masking low-confidence pixels.
pub fn pseudo_label(logits: &Tensor, threshold: Option<f64>) -> Result<LabelMap> {
    if let Some(t) = threshold {
        if !(0.0..1.0).contains(&t) {
            return Err(invalid(format!("threshold {t} outside [0, 1)")));
        }
    }
    let l = match logits.rank() {
        3 => logits.unsqueeze(0)?,
        4 if logits.dim(0)? == 1 => logits.clone(),
        _ => return Err(invalid(format!("pseudo_label expects one logit map, got {:?}", logits.dims()))),
    };
    nn::ensure_finite(&l, "logits")?;
    let mut map = argmax_labels(&l)?.remove(0);
    if let Some(t) = threshold {
        let (_, c, h, w) = l.dims4()?;
        let probs = nn::to_f64_vec(&nn::softmax(&l, 1)?)?;
        let hw = h * w;
        for i in 0..hw {
            let k = map.data[i] as usize;
            debug_assert!(k < c);
            if probs[k * hw + i] < t {
                map.data[i] = IGNORE_INDEX;
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub image: usize,
    pub step: usize,
    /// Pseudo-label CE before the update; `None` when every pixel was ignored.
    pub loss: Option<f64>,
    pub grad_norm: f64,
    /// L2 distance of the token from its initial value after the update.
    pub displacement: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptState {
    /// `[N]`
    pub token: Tensor,
    pub initial_token: Tensor,
    pub backbone_digest: String,
    pub head_digest: String,
    pub category_digest: String,
    pub log: Vec<AdaptRecord>,
}

impl AdaptState {
    pub fn new(model: &SegModel) -> Result<Self> {
        let token = model
            .scene
            .clone()
            .ok_or_else(|| invalid("test-time adaptation needs a model trained with a scene prompt"))?;
        Ok(Self {
            initial_token: token.clone(),
            token,
            backbone_digest: model.backbone.digest().to_string(),
            head_digest: model.head.digest()?,
            category_digest: category_digest(&model.categories)?,
            log: Vec::new(),
        })
    }

    /// Scalars optimized during adaptation.
    pub fn trainable_parameter_count(&self) -> usize {
        self.token.elem_count()
    }

    pub fn verify(&self, model: &SegModel) -> Result<()> {
        model.backbone.verify_frozen()?;
        if model.backbone.digest() != self.backbone_digest {
            return Err(Error::DigestMismatch {
                name: "backbone".into(),
                expected: self.backbone_digest.clone(),
                found: model.backbone.digest().to_string(),
            });
        }
        let h = model.head.digest()?;
        if h != self.head_digest {
            return Err(Error::DigestMismatch {
                name: "head".into(),
                expected: self.head_digest.clone(),
                found: h,
            });
        }
        let c = category_digest(&model.categories)?;
        if c != self.category_digest {
            return Err(Error::DigestMismatch {
                name: "category tokens".into(),
                expected: self.category_digest.clone(),
                found: c,
            });
        }
        Ok(())
    }
}

/// Result of evaluating the pseudo-label objective at a token.
pub struct ScenePass {
    pub logits: Tensor,
    pub pseudo: LabelMap,
    pub loss: Option<f64>,
    /// `∂L_t/∂C_s`, `None` when every pixel was ignored.
    pub grad: Option<Tensor>,
}

/// Pseudo-labels from the prediction at `token` (held fixed), then the CE
/// of that same prediction and its gradient with respect to the token.
/// `image` is a clean latent `[3, H, W]`.
pub fn scene_pass(
    model: &SegModel,
    image: &Tensor,
    token: &Tensor,
    threshold: Option<f64>,
    class_balanced: bool,
) -> Result<ScenePass> {
    let var = Var::from_tensor(&token.detach())?;
    let cond = model.conditioning_for(Some(var.as_tensor()))?;
    let logits = model.logits_with(&image.unsqueeze(0)?, &cond)?;
    let pseudo = pseudo_label(&logits.detach(), threshold)?;
    if pseudo.num_valid() == 0 {
        return Ok(ScenePass {
            logits: logits.detach(),
            pseudo,
            loss: None,
            grad: None,
        });
    }
    let loss = if class_balanced {
        class_balanced_ce_loss(&logits, &[&pseudo])?
    } else {
        ce_loss(&logits, &[&pseudo])?
    };
    let lv = nn::scalar(&loss)?;
    if !lv.is_finite() {
        return Err(Error::NonFinite("pseudo-label loss".into()));
    }
    let grads = loss.backward()?;
    let grad = grads
        .get(var.as_tensor())
        .cloned()
        .unwrap_or(token.zeros_like()?);
    Ok(ScenePass {
        logits: logits.detach(),
        pseudo,
        loss: Some(lv),
        grad: Some(grad),
    })
}

/// One descent update `C_s ← C_s − η ∂L_t/∂C_s`.
pub fn adapt_step(model: &SegModel, image: &Tensor, state: &AdaptState, cfg: &TtdaConfig) -> Result<AdaptState> {
    adapt_step_logged(model, image, state, cfg, 0, 0).map(|(s, _)| s)
}

fn adapt_step_logged(
    model: &SegModel,
    image: &Tensor,
    state: &AdaptState,
    cfg: &TtdaConfig,
    image_idx: usize,
    step: usize,
) -> Result<(AdaptState, Tensor)> {
    cfg.validate()?;
    state.verify(model)?;
    let pass = scene_pass(model, image, &state.token, cfg.threshold, cfg.class_balanced)?;
    let mut next = state.clone();
    let grad_norm = match &pass.grad {
        Some(g) => nn::scalar(&g.sqr()?.sum_all()?)?.sqrt(),
        None => {
            debug!(image = image_idx, step, "all pseudo-labels ignored; skipping update");
            0.0
        }
    };
    if let Some(g) = &pass.grad {
        if cfg.lr != 0.0 {
            next.token = (&state.token - (g * cfg.lr)?)?.detach();
        }
    }
    let displacement = nn::scalar(&(&next.token - &next.initial_token)?.sqr()?.sum_all()?)?.sqrt();
    next.log.push(AdaptRecord {
        image: image_idx,
        step,
        loss: pass.loss,
        grad_norm,
        displacement,
    });
    Ok((next, pass.logits))
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub state: AdaptState,
    /// Predictions of the incoming state for each image, before any update on it.
    pub before: Vec<LabelMap>,
    /// Predictions after the image's updates.
    pub after: Vec<LabelMap>,
}

/// Online adaptation over `stream` in order. Labels in the samples are used
/// only for the optional running-mIoU log line, never for the updates.
pub fn adapt(model: &SegModel, stream: &[SceneSample], cfg: &TtdaConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(invalid("adaptation stream is empty"));
    }
    let mut state = AdaptState::new(model)?;
    let mut before = Vec::with_capacity(stream.len());
    let mut after = Vec::with_capacity(stream.len());
    let mut running = ConfusionMatrix::new(model.categories.num_classes());
    for (i, sample) in stream.iter().enumerate() {
        if cfg.episodic {
            state.token = state.initial_token.clone();
        }
        let image = sample.latent(model.dtype())?;
        for s in 0..cfg.steps {
            let (next, logits) = adapt_step_logged(model, &image, &state, cfg, i, s)?;
            if s == 0 {
                before.push(argmax_labels(&logits)?.remove(0));
            }
            state = next;
        }
        let cond = model.conditioning_for(Some(&state.token))?;
        let logits = model.logits_with(&image.unsqueeze(0)?, &cond)?;
        let pred = argmax_labels(&logits)?.remove(0);
        accumulate(&mut running, &pred, &sample.labels)?;
        after.push(pred);
        if (i + 1) % 50 == 0 {
            let miou = iou(&running).map(|r| r.miou).unwrap_or(f64::NAN);
            info!(images = i + 1, running_miou = 100.0 * miou, "adaptation");
        }
    }
    state.verify(model)?;
    Ok(AdaptOutcome { state, before, after })
}
