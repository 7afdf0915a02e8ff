//! Category and scene prompts and their bundling into the conditioning
//! sequence `[category tokens..., scene token]`.

use std::collections::{BTreeMap, HashSet};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::diffusion::LatentImage;
use crate::error::{invalid, Error, Result};
use crate::nn;

pub const CATEGORY_TEMPLATE_PREFIX: &str = "a photo of a";

pub fn category_text(class_name: &str) -> String {
    format!("{CATEGORY_TEMPLATE_PREFIX} {class_name}")
}

pub fn scene_text(scene: &str) -> String {
    format!("a {scene} photo")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Text,
    Image,
    Learned,
}

#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    /// `[N]`
    pub vector: Tensor,
    pub source: TokenSource,
}

impl TokenEmbedding {
    pub fn new(vector: Tensor, source: TokenSource) -> Result<Self> {
        if vector.rank() != 1 {
            return Err(invalid(format!("token must be a vector, got {:?}", vector.dims())));
        }
        nn::ensure_finite(&vector, "token embedding")?;
        Ok(Self { vector, source })
    }

    pub fn dim(&self) -> usize {
        self.vector.dims()[0]
    }
}

/// Word-level embedding table; a template embeds as the mean of its word rows.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vec<String>,
    index: BTreeMap<String, u32>,
    /// `[V, N]`
    table: Tensor,
}

impl TextEncoder {
    pub fn new(vocab: Vec<String>, table: Tensor) -> Result<Self> {
        let (v, _) = table.dims2()?;
        if v != vocab.len() {
            return Err(invalid(format!(
                "vocabulary has {} words but table has {v} rows",
                vocab.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { vocab, index, table })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn word_ids(&self, template: &str) -> Result<Vec<u32>> {
        let words: Vec<&str> = template.split_whitespace().collect();
        if words.is_empty() {
            return Err(invalid("empty prompt template"));
        }
        words
            .into_iter()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    /// Mean of the rows of `table` selected by `ids`; differentiable in `table`.
    pub fn embed_ids(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, table.device())?;
        Ok(table.index_select(&idx, 0)?.mean(0)?)
    }

    pub fn encode(&self, template: &str) -> Result<TokenEmbedding> {
        let ids = self.word_ids(template)?;
        TokenEmbedding::new(Self::embed_ids(&self.table, &ids)?, TokenSource::Text)
    }
}

pub fn encode_text_prompt(encoder: &TextEncoder, template: &str) -> Result<TokenEmbedding> {
    encoder.encode(template)
}

/// Global-average-pooled deepest encoder map of the frozen backbone, through
/// the backbone's fixed random projection.
pub fn encode_image_prompt(backbone: &Backbone, image: &LatentImage) -> Result<TokenEmbedding> {
    let v = backbone.image_embedding(image)?;
    TokenEmbedding::new(v, TokenSource::Image)
}

#[derive(Debug, Clone)]
pub struct CategoryPrompt {
    pub class_names: Vec<String>,
    pub tokens: Vec<TokenEmbedding>,
}

impl CategoryPrompt {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, N]`
    pub fn tensor(&self) -> Result<Tensor> {
        let rows: Vec<&Tensor> = self.tokens.iter().map(|t| &t.vector).collect();
        Ok(Tensor::stack(&rows, 0)?)
    }
}

pub fn build_category_prompt(encoder: &TextEncoder, class_names: &[String]) -> Result<CategoryPrompt> {
    if class_names.is_empty() {
        return Err(invalid("category prompt needs at least one class"));
    }
    let mut seen = HashSet::new();
    for n in class_names {
        if !seen.insert(n) {
            return Err(invalid(format!("duplicate class name {n:?}")));
        }
    }
    let tokens = class_names
        .iter()
        .map(|n| encoder.encode(&category_text(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CategoryPrompt {
        class_names: class_names.to_vec(),
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    SourceText,
    TargetText,
    IrrelevantText,
    Learned,
    Image,
}

#[derive(Debug, Clone)]
pub enum ScenePayload {
    Text(String),
    Image(LatentImage),
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SceneDescriptor {
    Text { kind: SceneKind, template: String },
    Image { reference: String },
    Learned { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ScenePrompt {
    pub token: TokenEmbedding,
    pub descriptor: SceneDescriptor,
}

impl ScenePrompt {
    pub fn is_learned(&self) -> bool {
        matches!(self.descriptor, SceneDescriptor::Learned { .. })
    }
}

pub const LEARNED_INIT_STD: f64 = 0.02;

pub fn make_scene_prompt(
    kind: SceneKind,
    payload: ScenePayload,
    backbone: &Backbone,
    image_reference: Option<&str>,
) -> Result<ScenePrompt> {
    match (kind, payload) {
        (
            SceneKind::SourceText | SceneKind::TargetText | SceneKind::IrrelevantText,
            ScenePayload::Text(template),
        ) => {
            let token = backbone.text_encoder().encode(&template)?;
            Ok(ScenePrompt {
                token,
                descriptor: SceneDescriptor::Text { kind, template },
            })
        }
        (SceneKind::Learned, ScenePayload::Seed(seed)) => {
            let token = learned_token(seed, backbone.config().token_dim, backbone.dtype(), backbone.device())?;
            Ok(ScenePrompt {
                token,
                descriptor: SceneDescriptor::Learned { seed },
            })
        }
        (SceneKind::Image, ScenePayload::Image(img)) => {
            let token = encode_image_prompt(backbone, &img)?;
            Ok(ScenePrompt {
                token,
                descriptor: SceneDescriptor::Image {
                    reference: image_reference.unwrap_or("<in-memory>").to_string(),
                },
            })
        }
        (k, p) => Err(invalid(format!(
            "scene prompt kind {k:?} does not accept payload {}",
            match p {
                ScenePayload::Text(_) => "text",
                ScenePayload::Image(_) => "image",
                ScenePayload::Seed(_) => "seed",
            }
        ))),
    }
}

/// Seeded `N(0, 0.02^2)` initialization of a learnable scene token.
pub fn learned_token(seed: u64, dim: usize, dtype: DType, device: &Device) -> Result<TokenEmbedding> {
    let mut rng = nn::seeded_rng(seed, 0x5ce7e);
    let v = nn::normal_tensor(&mut rng, &[dim], LEARNED_INIT_STD, dtype, device)?;
    TokenEmbedding::new(v, TokenSource::Learned)
}

/// Conditioning sequence: `C` category tokens, then (optionally) the scene token.
#[derive(Debug, Clone)]
pub struct PromptBundle {
    pub tokens: Vec<TokenEmbedding>,
    pub num_categories: usize,
}

impl PromptBundle {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_scene(&self) -> bool {
        self.tokens.len() == self.num_categories + 1
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].dim()
    }

    /// `[M, N]`
    pub fn tensor(&self) -> Result<Tensor> {
        let rows: Vec<&Tensor> = self.tokens.iter().map(|t| &t.vector).collect();
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn scene(&self) -> Option<&TokenEmbedding> {
        if self.has_scene() {
            self.tokens.last()
        } else {
            None
        }
    }
}

pub fn bundle(cat: &CategoryPrompt, scene: &ScenePrompt) -> Result<PromptBundle> {
    let n = scene.token.dim();
    if let Some(bad) = cat.tokens.iter().find(|t| t.dim() != n) {
        return Err(invalid(format!(
            "category token dim {} does not match scene token dim {n}",
            bad.dim()
        )));
    }
    let mut tokens = cat.tokens.clone();
    tokens.push(scene.token.clone());
    Ok(PromptBundle {
        tokens,
        num_categories: cat.num_classes(),
    })
}

/// Category tokens only (`M = C`), used by the no-scene-prompt baseline.
pub fn bundle_categories_only(cat: &CategoryPrompt) -> PromptBundle {
    PromptBundle {
        tokens: cat.tokens.clone(),
        num_categories: cat.num_classes(),
    }
}

/// Stacks category tokens with a (possibly tracked) scene vector: `[C+1, N]`.
pub fn conditioning_with_scene(categories: &Tensor, scene: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[categories, &scene.unsqueeze(0)?], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_encoder() -> TextEncoder {
        let vocab: Vec<String> = ["a", "photo", "of", "car", "road", "night"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rng = nn::seeded_rng(7, 0);
        let table = nn::normal_tensor(&mut rng, &[vocab.len(), 8], 1.0, DType::F64, &Device::Cpu).unwrap();
        TextEncoder::new(vocab, table).unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic_and_distinct() {
        let enc = toy_encoder();
        let a = nn::to_f64_vec(&enc.encode("a photo of a car").unwrap().vector).unwrap();
        let b = nn::to_f64_vec(&enc.encode("a photo of a car").unwrap().vector).unwrap();
        let c = nn::to_f64_vec(&enc.encode("a photo of a road").unwrap().vector).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn single_word_is_the_table_row() {
        let enc = toy_encoder();
        let got = nn::to_f64_vec(&enc.encode("night").unwrap().vector).unwrap();
        let row = nn::to_f64_vec(&enc.table().get(5).unwrap()).unwrap();
        assert_eq!(got, row);
    }

    #[test]
    fn unknown_word_is_reported() {
        let enc = toy_encoder();
        match enc.encode("a photo of a bus") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "bus"),
            other => panic!("expected OOV error, got {other:?}"),
        }
        assert!(enc.encode("   ").is_err());
    }

    #[test]
    fn category_prompt_rules() {
        let enc = toy_encoder();
        let cat = build_category_prompt(&enc, &["road".into()]).unwrap();
        assert_eq!(cat.num_classes(), 1);
        assert!(build_category_prompt(&enc, &[]).is_err());
        assert!(build_category_prompt(&enc, &["car".into(), "car".into()]).is_err());
    }

    #[test]
    fn bundle_layout_and_scene_swap() {
        let enc = toy_encoder();
        let cat = build_category_prompt(&enc, &["car".into(), "road".into()]).unwrap();
        let s1 = ScenePrompt {
            token: enc.encode("night").unwrap(),
            descriptor: SceneDescriptor::Text {
                kind: SceneKind::TargetText,
                template: "night".into(),
            },
        };
        let s2 = ScenePrompt {
            token: learned_token(3, 8, DType::F64, &Device::Cpu).unwrap(),
            descriptor: SceneDescriptor::Learned { seed: 3 },
        };
        let b1 = bundle(&cat, &s1).unwrap();
        let b2 = bundle(&cat, &s2).unwrap();
        assert_eq!(b1.len(), 3);
        assert!(b1.has_scene());
        let t1 = nn::to_f64_vec(&b1.tensor().unwrap()).unwrap();
        let t2 = nn::to_f64_vec(&b2.tensor().unwrap()).unwrap();
        assert_eq!(t1[..16], t2[..16]);
        assert_ne!(t1[16..], t2[16..]);
        let again = nn::to_f64_vec(&bundle(&cat, &s1).unwrap().tensor().unwrap()).unwrap();
        assert_eq!(t1, again);

        let wrong = ScenePrompt {
            token: learned_token(3, 4, DType::F64, &Device::Cpu).unwrap(),
            descriptor: SceneDescriptor::Learned { seed: 3 },
        };
        assert!(bundle(&cat, &wrong).is_err());
    }

    #[test]
    fn learned_init_is_seeded() {
        let a = nn::to_f64_vec(&learned_token(11, 64, DType::F32, &Device::Cpu).unwrap().vector).unwrap();
        let b = nn::to_f64_vec(&learned_token(11, 64, DType::F32, &Device::Cpu).unwrap().vector).unwrap();
        let c = nn::to_f64_vec(&learned_token(12, 64, DType::F32, &Device::Cpu).unwrap().vector).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let std = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!(std > 0.01 && std < 0.03);
    }

    #[test]
    fn many_class_prompts() {
        let mut vocab: Vec<String> = vec!["a".into(), "photo".into(), "of".into()];
        let names: Vec<String> = (0..150).map(|i| format!("class{i}")).collect();
        vocab.extend(names.iter().cloned());
        let mut rng = nn::seeded_rng(1, 0);
        let table = nn::normal_tensor(&mut rng, &[vocab.len(), 4], 1.0, DType::F32, &Device::Cpu).unwrap();
        let enc = TextEncoder::new(vocab, table).unwrap();
        let cat = build_category_prompt(&enc, &names[..19]).unwrap();
        assert_eq!(bundle_categories_only(&cat).len(), 19);
        let s = ScenePrompt {
            token: enc.encode("photo").unwrap(),
            descriptor: SceneDescriptor::Text {
                kind: SceneKind::SourceText,
                template: "photo".into(),
            },
        };
        assert_eq!(bundle(&cat, &s).unwrap().len(), 20);
        let cat150 = build_category_prompt(&enc, &names).unwrap();
        assert_eq!(cat150.num_classes(), 150);
    }
}
