//! Toy conditional denoiser: a three-scale convolutional encoder–decoder whose
//! decoder blocks cross-attend from spatial features (queries) to the prompt
//! tokens (keys/values). After pretraining it is frozen and used as a feature
//! extractor: the head consumes the decoder feature maps and the per-scale
//! cross-attention maps.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::diffusion::{self, LatentImage, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{self, Adam, ParamSet, VarSet};
use crate::prompt::{self, PromptBundle, TextEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel width per scale; scale `i` (0-based) has resolution `H / 2^(i+1)`.
    pub channels: Vec<usize>,
    pub attn_dim: usize,
    /// Prompt token dimension `N`.
    pub token_dim: usize,
    pub time_dim: usize,
    pub schedule: ScheduleConfig,
    /// Timestep index used for deterministic feature extraction.
    pub feature_timestep: usize,
    pub vocab: Vec<String>,
    pub double_precision: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![24, 48, 64],
            attn_dim: 32,
            token_dim: 64,
            time_dim: 32,
            schedule: ScheduleConfig::default(),
            feature_timestep: 1,
            vocab: default_vocab(),
            double_precision: false,
        }
    }
}

pub fn default_vocab() -> Vec<String> {
    let mut v: Vec<String> = ["a", "photo", "of"].iter().map(|s| s.to_string()).collect();
    for w in crate::data::DEFAULT_CLASSES
        .iter()
        .chain(crate::data::AUX_CLASSES)
        .chain(["domainA", "domainB", "domainC"].iter())
        .chain(crate::data::IRRELEVANT_SCENES)
    {
        v.push(w.to_string());
    }
    v
}

impl BackboneConfig {
    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(invalid("backbone needs at least one scale"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(invalid("time_dim must be a positive even number"));
        }
        if self.attn_dim == 0 || self.token_dim == 0 {
            return Err(invalid("attention and token dimensions must be positive"));
        }
        if self.feature_timestep >= self.schedule.steps {
            return Err(invalid("feature_timestep must be below the schedule horizon"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }
}

/// Multi-scale decoder features and cross-attention maps, finest scale first.
/// Tensors are batched: features `[B, c_i, h_i, w_i]`, attentions `[B, M, h_i, w_i]`.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub features: Vec<Tensor>,
    pub attentions: Vec<Tensor>,
}

impl BackboneOutput {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.features[0].dim(0)?)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        Ok(self.attentions[0].dim(1)?)
    }

    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            features: self.features.iter().map(|t| t.index_select(idx, 0)).collect::<candle_core::Result<_>>()?,
            attentions: self.attentions.iter().map(|t| t.index_select(idx, 0)).collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn concat(parts: &[BackboneOutput]) -> Result<Self> {
        let s = parts[0].features.len();
        let mut features = Vec::with_capacity(s);
        let mut attentions = Vec::with_capacity(s);
        for i in 0..s {
            let f: Vec<&Tensor> = parts.iter().map(|p| &p.features[i]).collect();
            let a: Vec<&Tensor> = parts.iter().map(|p| &p.attentions[i]).collect();
            features.push(Tensor::cat(&f, 0)?);
            attentions.push(Tensor::cat(&a, 0)?);
        }
        Ok(Self { features, attentions })
    }

    pub fn detach(&self) -> Self {
        Self {
            features: self.features.iter().map(|t| t.detach()).collect(),
            attentions: self.attentions.iter().map(|t| t.detach()).collect(),
        }
    }

    /// Largest deviation from 1 of the token-axis sums over all locations.
    pub fn attention_normalization_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for a in &self.attentions {
            let s = a.to_dtype(DType::F64)?.sum(1)?;
            for v in nn::to_f64_vec(&s)? {
                worst = worst.max((v - 1.0).abs());
            }
            if nn::to_f64_vec(a)?.iter().any(|&v| v < 0.0) {
                return Ok(f64::INFINITY);
            }
        }
        Ok(worst)
    }
}

/// Raw result of one denoiser pass.
pub struct DenoiserPass {
    pub eps_hat: Tensor,
    pub output: BackboneOutput,
}

fn conv_init(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    gain: f64,
    dtype: DType,
    dev: &Device,
) -> Result<()> {
    let std = gain * (2.0 / (in_c * k * k) as f64).sqrt();
    ps.insert(format!("{name}.w"), nn::normal_tensor(rng, &[out_c, in_c, k, k], std, dtype, dev)?);
    ps.insert(format!("{name}.b"), Tensor::zeros(out_c, dtype, dev)?);
    Ok(())
}

fn linear_init(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_d: usize,
    out_d: usize,
    dtype: DType,
    dev: &Device,
) -> Result<()> {
    let std = (1.0 / in_d as f64).sqrt();
    ps.insert(format!("{name}.w"), nn::normal_tensor(rng, &[in_d, out_d], std, dtype, dev)?);
    ps.insert(format!("{name}.b"), Tensor::zeros(out_d, dtype, dev)?);
    Ok(())
}

fn resblock_init(
    ps: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
    temb: usize,
    dtype: DType,
    dev: &Device,
) -> Result<()> {
    conv_init(ps, rng, &format!("{name}.conv1"), c, c, 3, 1.0, dtype, dev)?;
    conv_init(ps, rng, &format!("{name}.conv2"), c, c, 3, 0.5, dtype, dev)?;
    linear_init(ps, rng, &format!("{name}.temb"), temb, c, dtype, dev)
}

/// Seeded initial parameters of the denoiser, text table and image projection.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let dtype = cfg.dtype();
    let dev = Device::Cpu;
    let mut rng = nn::seeded_rng(seed, 0xbacb);
    let mut ps = ParamSet::new();
    let t_hidden = 2 * cfg.time_dim;
    linear_init(&mut ps, &mut rng, "denoiser/time.l1", cfg.time_dim, t_hidden, dtype, &dev)?;
    linear_init(&mut ps, &mut rng, "denoiser/time.l2", t_hidden, t_hidden, dtype, &dev)?;

    let ch = &cfg.channels;
    let s = ch.len();
    conv_init(&mut ps, &mut rng, "denoiser/enc0.in", ch[0], cfg.in_channels, 3, 1.0, dtype, &dev)?;
    for i in 0..s {
        if i > 0 {
            conv_init(&mut ps, &mut rng, &format!("denoiser/enc{i}.in"), ch[i], ch[i - 1], 3, 1.0, dtype, &dev)?;
        }
        resblock_init(&mut ps, &mut rng, &format!("denoiser/enc{i}.res"), ch[i], t_hidden, dtype, &dev)?;
    }
    for i in (0..s).rev() {
        if i + 1 < s {
            conv_init(
                &mut ps,
                &mut rng,
                &format!("denoiser/dec{i}.in"),
                ch[i],
                ch[i] + ch[i + 1],
                3,
                1.0,
                dtype,
                &dev,
            )?;
        }
        let a = format!("denoiser/dec{i}.attn");
        conv_init(&mut ps, &mut rng, &format!("{a}.q"), cfg.attn_dim, ch[i], 1, 0.7, dtype, &dev)?;
        ps.insert(
            format!("{a}.k.w"),
            nn::normal_tensor(&mut rng, &[cfg.token_dim, cfg.attn_dim], (1.0 / cfg.token_dim as f64).sqrt(), dtype, &dev)?,
        );
        ps.insert(
            format!("{a}.v.w"),
            nn::normal_tensor(&mut rng, &[cfg.token_dim, cfg.attn_dim], (1.0 / cfg.token_dim as f64).sqrt(), dtype, &dev)?,
        );
        conv_init(&mut ps, &mut rng, &format!("{a}.o"), ch[i], cfg.attn_dim, 1, 0.5, dtype, &dev)?;
        resblock_init(&mut ps, &mut rng, &format!("denoiser/dec{i}.res"), ch[i], t_hidden, dtype, &dev)?;
    }
    conv_init(&mut ps, &mut rng, "denoiser/out", cfg.in_channels, ch[0], 3, 0.3, dtype, &dev)?;

    ps.insert(
        "text/table",
        nn::normal_tensor(&mut rng, &[cfg.vocab.len(), cfg.token_dim], 1.0, dtype, &dev)?,
    );
    let deep = ch[s - 1];
    ps.insert(
        "image/projection",
        nn::normal_tensor(&mut rng, &[deep, cfg.token_dim], (1.0 / deep as f64).sqrt(), dtype, &dev)?,
    );
    Ok(ps)
}

/// Sinusoidal embedding of integer timesteps: `[B, time_dim]`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * f).sin());
        }
        for k in 0..half {
            let f = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * f).cos());
        }
    }
    Ok(Tensor::from_vec(v, (timesteps.len(), dim), dev)?.to_dtype(dtype)?)
}

fn conv(ps: &ParamSet, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
    let w = ps.get(&format!("{name}.w"))?;
    let pad = w.dim(2)? / 2;
    nn::conv2d(x, w, ps.get(&format!("{name}.b"))?, stride, pad)
}

fn resblock(ps: &ParamSet, name: &str, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
    let h = conv(ps, &format!("{name}.conv1"), &x.silu()?, 1)?;
    let t = nn::linear(&temb.silu()?, ps.get(&format!("{name}.temb.w"))?, ps.get(&format!("{name}.temb.b"))?)?;
    let c = t.dim(1)?;
    let h = h.broadcast_add(&t.reshape((t.dim(0)?, c, 1, 1))?)?;
    let h = conv(ps, &format!("{name}.conv2"), &h.silu()?, 1)?;
    Ok((x + h)?)
}

/// Cross-attention from spatial queries to prompt tokens. `tokens` is
/// `[M, N]` (shared) or `[B, M, N]`; `mask` is an additive `[B, 1, M]` bias.
/// Returns the residual-updated map and the attention weights `[B, M, h, w]`.
fn cross_attention(
    ps: &ParamSet,
    name: &str,
    x: &Tensor,
    tokens: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = x.dims4()?;
    let q = conv(ps, &format!("{name}.q"), x, 1)?;
    let d = q.dim(1)?;
    let q = q.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
    let k = tokens.broadcast_matmul(ps.get(&format!("{name}.k.w"))?)?;
    let v = tokens.broadcast_matmul(ps.get(&format!("{name}.v.w"))?)?;
    let kt = if k.rank() == 2 {
        k.t()?.contiguous()?
    } else {
        k.transpose(1, 2)?.contiguous()?
    };
    let mut scores = (q.broadcast_matmul(&kt)? / (d as f64).sqrt())?;
    if let Some(m) = mask {
        scores = scores.broadcast_add(m)?;
    }
    let attn = nn::softmax_last(&scores)?;
    let m = attn.dim(2)?;
    let ctx = attn.broadcast_matmul(&v)?;
    let ctx = ctx.transpose(1, 2)?.contiguous()?.reshape((b, d, h, w))?;
    let out = conv(ps, &format!("{name}.o"), &ctx, 1)?;
    let attn_map = attn.transpose(1, 2)?.contiguous()?.reshape((b, m, h, w))?;
    Ok(((x + out)?, attn_map))
}

fn time_features(ps: &ParamSet, timesteps: &[usize], cfg: &BackboneConfig, dtype: DType, dev: &Device) -> Result<Tensor> {
    let e = timestep_embedding(timesteps, cfg.time_dim, dtype, dev)?;
    let h = nn::linear(&e, ps.get("denoiser/time.l1.w")?, ps.get("denoiser/time.l1.b")?)?.silu()?;
    nn::linear(&h, ps.get("denoiser/time.l2.w")?, ps.get("denoiser/time.l2.b")?)
}

fn encoder(ps: &ParamSet, cfg: &BackboneConfig, z: &Tensor, temb: &Tensor) -> Result<Vec<Tensor>> {
    let s = cfg.num_scales();
    let mut skips = Vec::with_capacity(s);
    let mut h = conv(ps, "denoiser/enc0.in", z, 2)?;
    for i in 0..s {
        if i > 0 {
            h = conv(ps, &format!("denoiser/enc{i}.in"), &h.avg_pool2d(2)?, 1)?;
        }
        h = resblock(ps, &format!("denoiser/enc{i}.res"), &h, temb)?;
        skips.push(h.clone());
    }
    Ok(skips)
}

/// Full denoiser pass on a batch `z` `[B, C, H, W]` with per-sample timesteps.
pub fn denoiser_forward(
    ps: &ParamSet,
    cfg: &BackboneConfig,
    z: &Tensor,
    timesteps: &[usize],
    tokens: &Tensor,
    mask: Option<&Tensor>,
) -> Result<DenoiserPass> {
    let (b, c, h, w) = z.dims4()?;
    let f = cfg.downsample_factor();
    if c != cfg.in_channels || h % f != 0 || w % f != 0 {
        return Err(invalid(format!(
            "input {:?} incompatible with backbone (channels {}, spatial multiple of {f})",
            z.dims(),
            cfg.in_channels
        )));
    }
    if timesteps.len() != b {
        return Err(invalid("one timestep per batch element required"));
    }
    let n = tokens.dim(tokens.rank() - 1)?;
    if n != cfg.token_dim {
        return Err(Error::Shape {
            expected: vec![cfg.token_dim],
            got: vec![n],
        });
    }
    let dtype = z.dtype();
    let temb = time_features(ps, timesteps, cfg, dtype, z.device())?;
    let skips = encoder(ps, cfg, z, &temb)?;
    let s = cfg.num_scales();
    let mut features = vec![None; s];
    let mut attentions = vec![None; s];
    let mut h = skips[s - 1].clone();
    for i in (0..s).rev() {
        if i + 1 < s {
            let (_, _, hh, ww) = skips[i].dims4()?;
            let up = nn::upsample_nearest2d(&h, hh, ww)?;
            h = conv(ps, &format!("denoiser/dec{i}.in"), &Tensor::cat(&[&up, &skips[i]], 1)?, 1)?;
        }
        let (x, a) = cross_attention(ps, &format!("denoiser/dec{i}.attn"), &h, tokens, mask)?;
        h = resblock(ps, &format!("denoiser/dec{i}.res"), &x, &temb)?;
        features[i] = Some(h.clone());
        attentions[i] = Some(a);
    }
    let up = nn::upsample_nearest2d(&h, h.dim(2)? * 2, h.dim(3)? * 2)?;
    let eps_hat = conv(ps, "denoiser/out", &up.silu()?, 1)?;
    Ok(DenoiserPass {
        eps_hat,
        output: BackboneOutput {
            features: features.into_iter().map(Option::unwrap).collect(),
            attentions: attentions.into_iter().map(Option::unwrap).collect(),
        },
    })
}

/// Frozen, pretrained backbone together with its prompt encoders.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamSet,
    schedule: NoiseSchedule,
    text: TextEncoder,
    digest: String,
}

impl Backbone {
    /// Freezes `params`, recording their content digest.
    pub fn freeze(config: BackboneConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let params = params.snapshot()?;
        let schedule = config.schedule()?;
        let text = TextEncoder::new(config.vocab.clone(), params.get("text/table")?.clone())?;
        let digest = params.digest()?;
        Ok(Self {
            config,
            params,
            schedule,
            text,
            digest,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.get("text/table").map(|t| t.device()).unwrap_or(&Device::Cpu)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Re-hashes the parameters and compares against the freeze digest.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.params.digest()?;
        if now != self.digest {
            return Err(Error::DigestMismatch {
                name: "backbone".into(),
                expected: self.digest.clone(),
                found: now,
            });
        }
        Ok(())
    }

    /// Single-image denoiser evaluation.
    pub fn denoise_predict(&self, z_p: &LatentImage, p: usize, tokens: &PromptBundle) -> Result<(Tensor, BackboneOutput)> {
        if p >= self.schedule.horizon() {
            return Err(invalid(format!("timestep {p} outside schedule")));
        }
        nn::ensure_finite(&z_p.data, "denoiser input")?;
        let cond = tokens.tensor()?;
        let pass = denoiser_forward(&self.params, &self.config, &z_p.data.unsqueeze(0)?, &[p], &cond, None)?;
        Ok((pass.eps_hat.squeeze(0)?, pass.output))
    }

    /// Deterministic extraction at the configured timestep with zero noise:
    /// the input is `sqrt(ᾱ_p) * z_0`. `images` is a batch `[B, C, H, W]` of
    /// clean latents; `tokens` is `[M, N]` and may carry autograd tracking.
    pub fn extract(&self, images: &Tensor, tokens: &Tensor) -> Result<BackboneOutput> {
        let p = self.config.feature_timestep;
        let scale = self.schedule.alpha_bar(p)?.sqrt();
        let z = (images * scale)?;
        let b = z.dim(0)?;
        let pass = denoiser_forward(&self.params, &self.config, &z, &vec![p; b], tokens, None)?;
        Ok(pass.output)
    }

    pub fn extract_features(&self, image: &LatentImage, tokens: &PromptBundle) -> Result<BackboneOutput> {
        nn::ensure_finite(&image.data, "image")?;
        self.extract(&image.data.unsqueeze(0)?, &tokens.tensor()?)
    }

    /// Batched extraction in chunks, detached from any graph.
    pub fn extract_all(&self, images: &Tensor, tokens: &Tensor, chunk: usize) -> Result<BackboneOutput> {
        let n = images.dim(0)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            parts.push(self.extract(&images.narrow(0, start, len)?, tokens)?.detach());
            start += len;
        }
        BackboneOutput::concat(&parts)
    }

    /// Token-independent image embedding used for image scene prompts.
    pub fn image_embedding(&self, image: &LatentImage) -> Result<Tensor> {
        self.project_descriptor(&self.image_descriptor(image)?)
    }

    /// Maps a pooled descriptor `[C_deep]` to token space `[N]`.
    pub fn project_descriptor(&self, descriptor: &Tensor) -> Result<Tensor> {
        Ok(descriptor.unsqueeze(0)?.matmul(self.params.get("image/projection")?)?.squeeze(0)?)
    }

    /// Spatially pooled deepest encoder features `[C_deep]`.
    pub fn image_descriptor(&self, image: &LatentImage) -> Result<Tensor> {
        let (c, h, w) = image.dims();
        let f = self.config.downsample_factor();
        if c != self.config.in_channels || h % f != 0 || w % f != 0 {
            return Err(invalid(format!("image {:?} invalid for the backbone", image.data.dims())));
        }
        let p = self.config.feature_timestep;
        let z = (image.data.unsqueeze(0)? * self.schedule.alpha_bar(p)?.sqrt())?;
        let temb = time_features(&self.params, &[p], &self.config, z.dtype(), z.device())?;
        let skips = encoder(&self.params, &self.config, &z, &temb)?;
        let deep = skips.last().expect("at least one scale");
        Ok(deep.mean((2, 3))?.squeeze(0)?)
    }
}

/// One pretraining example: a clean latent plus its caption.
#[derive(Debug, Clone)]
pub struct CaptionedImage {
    /// `[C, H, W]` in `[-1, 1]`
    pub image: Tensor,
    pub scene_word: String,
    /// Indices into the class list of the classes present in the image.
    pub present_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of omitting the scene token from a caption.
    pub scene_drop_prob: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            scene_drop_prob: 0.2,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
}

const MASKED: f64 = -1e9;

/// Trains the denoiser and the text table with the noise-prediction
/// objective, uniform timesteps, then freezes the result.
pub fn pretrain_backbone(
    corpus: &[CaptionedImage],
    class_names: &[String],
    config: &BackboneConfig,
    train: &PretrainConfig,
    seed: u64,
) -> Result<(Backbone, Vec<PretrainRecord>)> {
    if corpus.is_empty() {
        return Err(invalid("pretraining corpus is empty"));
    }
    let init = init_params(config, seed)?;
    if train.steps == 0 {
        return Ok((Backbone::freeze(config.clone(), init)?, Vec::new()));
    }
    let schedule = config.schedule()?;
    let vars = VarSet::from_params(&init)?;
    let params = vars.params();
    let mut opt = Adam::new();
    let dtype = config.dtype();
    let dev = Device::Cpu;
    let text = TextEncoder::new(config.vocab.clone(), params.get("text/table")?.clone())?;

    let class_ids: Vec<Vec<u32>> = class_names
        .iter()
        .map(|c| text.word_ids(&prompt::category_text(c)))
        .collect::<Result<_>>()?;
    let mut scene_words: Vec<String> = corpus.iter().map(|c| c.scene_word.clone()).collect();
    scene_words.sort();
    scene_words.dedup();
    let scene_ids: Vec<Vec<u32>> = scene_words
        .iter()
        .map(|w| text.word_ids(&prompt::scene_text(w)))
        .collect::<Result<_>>()?;
    let num_classes = class_names.len();
    let m = num_classes + 1;

    let mut rng = nn::seeded_rng(seed, 0x9e7a);
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let table = params.get("text/table")?;
        let class_tok = class_ids
            .iter()
            .map(|ids| TextEncoder::embed_ids(table, ids))
            .collect::<Result<Vec<_>>>()?;
        let scene_tok = scene_ids
            .iter()
            .map(|ids| TextEncoder::embed_ids(table, ids))
            .collect::<Result<Vec<_>>>()?;

        let bsz = train.batch_size;
        let mut imgs = Vec::with_capacity(bsz);
        let mut tsteps = Vec::with_capacity(bsz);
        let mut tok_rows = Vec::with_capacity(bsz);
        let mut mask = Vec::with_capacity(bsz * m);
        for _ in 0..bsz {
            let ex = &corpus[rng.gen_range(0..corpus.len())];
            imgs.push(ex.image.clone());
            tsteps.push(rng.gen_range(0..schedule.horizon()));
            let si = scene_words.binary_search(&ex.scene_word).expect("scene word indexed");
            let mut rows: Vec<&Tensor> = class_tok.iter().collect();
            rows.push(&scene_tok[si]);
            tok_rows.push(Tensor::stack(&rows, 0)?);
            for c in 0..num_classes {
                mask.push(if ex.present_classes.contains(&c) { 0.0 } else { MASKED });
            }
            let drop = rng.gen_bool(train.scene_drop_prob.clamp(0.0, 1.0));
            mask.push(if drop { MASKED } else { 0.0 });
        }
        let z0 = Tensor::stack(&imgs, 0)?.to_dtype(dtype)?;
        let eps = nn::normal_tensor(&mut rng, z0.dims(), 1.0, dtype, &dev)?;
        let mut zs = Vec::with_capacity(bsz);
        for (i, &p) in tsteps.iter().enumerate() {
            zs.push(diffusion::noise_tensor(&z0.get(i)?, p, &eps.get(i)?, &schedule)?);
        }
        let z = Tensor::stack(&zs, 0)?;
        let tokens = Tensor::stack(&tok_rows, 0)?;
        let mask = Tensor::from_vec(mask, (bsz, 1, m), &dev)?.to_dtype(dtype)?;
        let pass = denoiser_forward(&params, config, &z, &tsteps, &tokens, Some(&mask))?;
        let loss = diffusion::diffusion_loss(&eps, &pass.eps_hat)?;
        let lv = nn::scalar(&loss)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("diffusion loss at pretraining step {step}")));
        }
        let grads = loss.backward()?;
        opt.step(&vars, &grads, train.lr)?;
        log.push(PretrainRecord { step, loss: lv });
        if train.log_every > 0 && (step + 1) % train.log_every == 0 {
            let recent = &log[log.len().saturating_sub(train.log_every)..];
            let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
            info!(step = step + 1, loss = mean, "pretraining");
        }
    }
    Ok((Backbone::freeze(config.clone(), vars.snapshot()?)?, log))
}
