//! Segmentation head: FPN-style fusion of the backbone's multi-scale features
//! and cross-attention maps into per-pixel class logits.
//!
//! Logits are plain tensors `[B, C, H, W]` at input resolution.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneOutput};
use crate::error::{invalid, Error, Result};
use crate::label::{one_hot_targets, LabelMap};
use crate::nn::{self, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Common width of the lateral projections and fusion convolutions.
    pub width: usize,
    /// Standardize each feature map over channels at every location before fusion.
    pub normalize_features: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 128,
            normalize_features: true,
        }
    }
}

/// Everything needed to shape-check and build head parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub feature_channels: Vec<usize>,
    /// Token count `M` of the conditioning the head is trained with.
    pub num_tokens: usize,
    pub num_classes: usize,
    pub width: usize,
    pub normalize_features: bool,
}

impl HeadSpec {
    pub fn new(backbone: &BackboneConfig, num_tokens: usize, num_classes: usize, head: &HeadConfig) -> Result<Self> {
        if num_classes == 0 || num_tokens == 0 || head.width == 0 {
            return Err(invalid("head needs positive class count, token count and width"));
        }
        Ok(Self {
            feature_channels: backbone.channels.clone(),
            num_tokens,
            num_classes,
            width: head.width,
            normalize_features: head.normalize_features,
        })
    }

    pub fn check(&self, out: &BackboneOutput) -> Result<()> {
        if out.features.len() != self.feature_channels.len() || out.attentions.len() != self.feature_channels.len() {
            return Err(invalid(format!(
                "head expects {} scales, got {}",
                self.feature_channels.len(),
                out.features.len()
            )));
        }
        for (i, (f, a)) in out.features.iter().zip(&out.attentions).enumerate() {
            let (_, c, h, w) = f.dims4()?;
            let (_, m, ha, wa) = a.dims4()?;
            if c != self.feature_channels[i] || m != self.num_tokens || h != ha || w != wa {
                return Err(Error::Shape {
                    expected: vec![self.feature_channels[i], self.num_tokens],
                    got: vec![c, m],
                });
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_param(
    ps: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    o: usize,
    i: usize,
    k: usize,
    gain: f64,
    dtype: DType,
) -> Result<()> {
    let std = gain * (2.0 / (i * k * k) as f64).sqrt();
    ps.insert(format!("{name}.w"), nn::normal_tensor(rng, &[o, i, k, k], std, dtype, &Device::Cpu)?);
    ps.insert(format!("{name}.b"), Tensor::zeros(o, dtype, &Device::Cpu)?);
    Ok(())
}

pub fn init_head(spec: &HeadSpec, seed: u64, dtype: DType) -> Result<ParamSet> {
    let mut rng = nn::seeded_rng(seed, 0x4ead);
    let mut ps = ParamSet::new();
    let w = spec.width;
    for (i, &c) in spec.feature_channels.iter().enumerate() {
        conv_param(&mut ps, &mut rng, &format!("lateral{i}"), w, c + spec.num_tokens, 1, 1.0, dtype)?;
    }
    conv_param(&mut ps, &mut rng, "fuse1", w, w, 3, 1.0, dtype)?;
    conv_param(&mut ps, &mut rng, "fuse2", w, w, 3, 1.0, dtype)?;
    conv_param(&mut ps, &mut rng, "classifier", spec.num_classes, w, 1, 0.1, dtype)?;
    Ok(ps)
}

fn conv(ps: &ParamSet, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.w"))?;
    let pad = w.dim(2)? / 2;
    nn::conv2d(x, w, ps.get(&format!("{name}.b"))?, 1, pad)
}

const NORM_EPS: f64 = 1e-5;

/// Zero mean, unit variance over axis 1 at every location.
pub fn channel_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Logits `[B, C, out_h, out_w]`.
pub fn head_forward(ps: &ParamSet, spec: &HeadSpec, out: &BackboneOutput, out_h: usize, out_w: usize) -> Result<Tensor> {
    spec.check(out)?;
    let (_, _, h0, w0) = out.features[0].dims4()?;
    let mut acc: Option<Tensor> = None;
    for (i, (f, a)) in out.features.iter().zip(&out.attentions).enumerate() {
        let f = if spec.normalize_features { channel_norm(f)? } else { f.clone() };
        let x = Tensor::cat(&[&f, &a.to_dtype(f.dtype())?], 1)?;
        let lat = nn::bilinear_resize(&conv(ps, &format!("lateral{i}"), &x)?, h0, w0)?;
        acc = Some(match acc {
            None => lat,
            Some(s) => (s + lat)?,
        });
    }
    let x = acc.expect("at least one scale");
    let x = conv(ps, "fuse1", &x)?.silu()?;
    let x = conv(ps, "fuse2", &x)?.silu()?;
    let logits = conv(ps, "classifier", &x)?;
    nn::bilinear_resize(&logits, out_h, out_w)
}

/// Trained (or initialized) head with its shape description.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub spec: HeadSpec,
    pub params: ParamSet,
}

impl SegHead {
    pub fn init(spec: HeadSpec, seed: u64, dtype: DType) -> Result<Self> {
        let params = init_head(&spec, seed, dtype)?;
        Ok(Self { spec, params })
    }

    pub fn predict(&self, out: &BackboneOutput, out_h: usize, out_w: usize) -> Result<Tensor> {
        head_forward(&self.params, &self.spec, out, out_h, out_w)
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }
}

/// Class probabilities along axis 1.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    nn::ensure_finite(logits, "logits")?;
    nn::softmax(logits, 1)
}

/// Mean negative log-likelihood over non-ignored pixels. `logits` is
/// `[B, C, H, W]` with one label map per batch element.
pub fn ce_loss(logits: &Tensor, labels: &[&LabelMap]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.len() != b {
        return Err(invalid(format!("{} label maps for a batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| l.height != h || l.width != w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            got: vec![l.height, l.width],
        });
    }
    let (target, valid) = one_hot_targets(labels, c, logits.dtype(), logits.device())?;
    if valid == 0 {
        return Err(invalid("every pixel is ignored; cross-entropy undefined"));
    }
    let ll = (nn::log_softmax(logits, 1)? * target)?.sum_all()?;
    Ok((ll.neg()? / valid as f64)?)
}

/// Cross-entropy averaged per class first, then over the classes present in
/// `labels`: every present class contributes equally regardless of its pixel count.
pub fn class_balanced_ce_loss(logits: &Tensor, labels: &[&LabelMap]) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.len() != b {
        return Err(invalid(format!("{} label maps for a batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| l.height != h || l.width != w) {
        return Err(Error::Shape {
            expected: vec![h, w],
            got: vec![l.height, l.width],
        });
    }
    let mut counts = vec![0usize; c];
    for l in labels {
        l.check_classes(c)?;
        for &k in &l.data {
            if (k as usize) < c {
                counts[k as usize] += 1;
            }
        }
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present == 0 {
        return Err(invalid("every pixel is ignored; cross-entropy undefined"));
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&n| if n > 0 { 1.0 / (n * present) as f64 } else { 0.0 })
        .collect();
    let (target, _) = one_hot_targets(labels, c, logits.dtype(), logits.device())?;
    let wt = Tensor::from_vec(weights, (1, c, 1, 1), logits.device())?.to_dtype(logits.dtype())?;
    let ll = (nn::log_softmax(logits, 1)? * target.broadcast_mul(&wt)?)?.sum_all()?;
    Ok(ll.neg()?)
}

/// Argmax over classes for each batch element, ties to the smaller index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (b, c, h, w) = logits.dims4()?;
    let v = nn::to_f64_vec(logits)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut data = vec![0u8; hw];
        for (i, d) in data.iter_mut().enumerate() {
            let mut best = 0;
            let mut bv = v[bi * c * hw + i];
            for k in 1..c {
                let x = v[(bi * c + k) * hw + i];
                if x > bv {
                    bv = x;
                    best = k;
                }
            }
            *d = best as u8;
        }
        out.push(LabelMap::new(h, w, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::IGNORE_INDEX;

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_cases() {
        let l = t4(vec![2f64.ln(), 0.0], (1, 2, 1, 1));
        let p = nn::to_f64_vec(&softmax_probs(&l).unwrap()).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        let u = softmax_probs(&Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(nn::to_f64_vec(&u).unwrap().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let shifted = softmax_probs(&(l.clone() + 7.5).unwrap()).unwrap();
        let a = nn::to_f64_vec(&shifted).unwrap();
        assert!(a.iter().zip(&p).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn ce_values() {
        let u = Tensor::zeros((1, 5, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let v = nn::scalar(&ce_loss(&u, &[&l]).unwrap()).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-14);

        // probs [0.5, 0.5] and [0.25, 0.75], labels [0, 1]
        let logits = t4(vec![0.0, 1.0, 0.0, 3f64.ln() + 1.0], (1, 2, 1, 2));
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let v = nn::scalar(&ce_loss(&logits, &[&l]).unwrap()).unwrap();
        let want = (2f64.ln() + (4.0f64 / 3.0).ln()) / 2.0;
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        assert!((v - 0.49041).abs() < 1e-5);

        let sharp = t4(vec![60.0, -60.0, -60.0, 60.0], (1, 2, 1, 2));
        assert!(nn::scalar(&ce_loss(&sharp, &[&l]).unwrap()).unwrap() < 1e-40);
    }

    #[test]
    fn ce_rejects_all_ignored_and_bad_shapes() {
        let u = Tensor::zeros((1, 2, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let l = LabelMap::filled(1, 2, IGNORE_INDEX);
        assert!(ce_loss(&u, &[&l]).is_err());
        let l = LabelMap::filled(2, 2, 0);
        assert!(ce_loss(&u, &[&l]).is_err());
        let l = LabelMap::filled(1, 2, 5);
        assert!(ce_loss(&u, &[&l]).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_matter() {
        let l = LabelMap::new(1, 3, vec![0, IGNORE_INDEX, 1]).unwrap();
        let a = t4(vec![0.3, 1.0, -0.2, 0.1, -4.0, 0.9], (1, 2, 1, 3));
        let b = t4(vec![0.3, 9.0, -0.2, 0.1, 2.0, 0.9], (1, 2, 1, 3));
        let la = nn::scalar(&ce_loss(&a, &[&l]).unwrap()).unwrap();
        let lb = nn::scalar(&ce_loss(&b, &[&l]).unwrap()).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn argmax_ties_to_smaller_index() {
        let l = t4(vec![1.0, 0.0, 1.0, 3.0], (1, 2, 1, 2));
        let m = argmax_labels(&l).unwrap();
        assert_eq!(m[0].data, vec![0, 1]);
    }

    fn fake_output(b: usize, m: usize, seed: u64) -> BackboneOutput {
        let mut rng = nn::seeded_rng(seed, 0);
        let chans = [4, 6, 8];
        let mut features = Vec::new();
        let mut attentions = Vec::new();
        for (i, &c) in chans.iter().enumerate() {
            let s = 8 >> i;
            features.push(nn::normal_tensor(&mut rng, &[b, c, s, s], 1.0, DType::F64, &Device::Cpu).unwrap());
            let raw = nn::normal_tensor(&mut rng, &[b, m, s, s], 1.0, DType::F64, &Device::Cpu).unwrap();
            attentions.push(nn::softmax(&raw, 1).unwrap());
        }
        BackboneOutput { features, attentions }
    }

    fn spec(m: usize) -> HeadSpec {
        HeadSpec {
            feature_channels: vec![4, 6, 8],
            num_tokens: m,
            num_classes: 3,
            width: 5,
            normalize_features: true,
        }
    }

    #[test]
    fn predict_shape_and_batch_equivariance() {
        let head = SegHead::init(spec(4), 0, DType::F64).unwrap();
        let out = fake_output(3, 4, 1);
        let y = head.predict(&out, 16, 16).unwrap();
        assert_eq!(y.dims(), &[3, 3, 16, 16]);
        let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let y2 = head.predict(&out.select(&idx).unwrap(), 16, 16).unwrap();
        let a = nn::to_f64_vec(&y.index_select(&idx, 0).unwrap()).unwrap();
        let b = nn::to_f64_vec(&y2).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(head.predict(&fake_output(1, 5, 1), 16, 16).is_err());
    }

    #[test]
    fn attention_channels_are_consumed() {
        let head = SegHead::init(spec(4), 0, DType::F64).unwrap();
        let out = fake_output(1, 4, 2);
        let zeroed = BackboneOutput {
            features: out.features.clone(),
            attentions: out.attentions.iter().map(|a| a.zeros_like().unwrap()).collect(),
        };
        let a = nn::to_f64_vec(&head.predict(&out, 16, 16).unwrap()).unwrap();
        let b = nn::to_f64_vec(&head.predict(&zeroed, 16, 16).unwrap()).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
