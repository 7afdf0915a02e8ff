//! A frozen backbone, a head and the conditioning they were trained with,
//! bundled for inference.

use candle_core::{DType, Tensor};

use crate::backbone::{Backbone, BackboneOutput};
use crate::data::{latent_batch, SceneSample};
use crate::error::{invalid, Result};
use crate::head::{argmax_labels, SegHead};
use crate::label::LabelMap;
use crate::metrics::{accumulate, ConfusionMatrix};
use crate::prompt::{self, CategoryPrompt};

#[derive(Debug, Clone)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: SegHead,
    pub categories: CategoryPrompt,
    /// `[N]`; `None` means the model conditions on category tokens only.
    pub scene: Option<Tensor>,
}

impl SegModel {
    pub fn dtype(&self) -> DType {
        self.backbone.dtype()
    }

    /// Conditioning sequence `[M, N]` for a given scene vector.
    pub fn conditioning_for(&self, scene: Option<&Tensor>) -> Result<Tensor> {
        let cats = self.categories.tensor()?;
        match scene {
            Some(s) => prompt::conditioning_with_scene(&cats, s),
            None => Ok(cats),
        }
    }

    pub fn conditioning(&self) -> Result<Tensor> {
        self.conditioning_for(self.scene.as_ref())
    }

    /// Logits for a latent batch `[B, 3, H, W]` under explicit conditioning.
    pub fn logits_with(&self, images: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let out = self.backbone.extract(images, cond)?;
        self.head.predict(&out, h, w)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.logits_with(images, &self.conditioning()?)
    }

    /// Head logits on pre-extracted backbone outputs.
    pub fn logits_from(&self, out: &BackboneOutput, h: usize, w: usize) -> Result<Tensor> {
        self.head.predict(out, h, w)
    }

    pub fn predict_samples(&self, samples: &[SceneSample], chunk: usize) -> Result<Vec<LabelMap>> {
        let cond = self.conditioning()?;
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&SceneSample> = part.iter().collect();
            let x = latent_batch(&refs, self.dtype())?;
            out.extend(argmax_labels(&self.logits_with(&x, &cond)?)?);
        }
        Ok(out)
    }

    pub fn evaluate(&self, samples: &[SceneSample], chunk: usize) -> Result<ConfusionMatrix> {
        if samples.is_empty() {
            return Err(invalid("evaluation set is empty"));
        }
        let preds = self.predict_samples(samples, chunk)?;
        let mut cm = ConfusionMatrix::new(self.categories.num_classes());
        for (p, s) in preds.iter().zip(samples) {
            accumulate(&mut cm, p, &s.labels)?;
        }
        Ok(cm)
    }
}
