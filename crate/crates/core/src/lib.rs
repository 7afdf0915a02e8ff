//! Prompt-conditioned segmentation on top of a frozen toy diffusion denoiser,
//! with prompt-randomization training and test-time scene-prompt tuning.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dg;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod head;
pub mod label;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod ttda;

pub use backbone::{
    pretrain_backbone, Backbone, BackboneConfig, BackboneOutput, CaptionedImage, PretrainConfig, PretrainRecord,
};
pub use config::{load_config, parse_config, ExperimentConfig, Mode, SceneChoice, SceneSpec};
pub use data::{gen_dataset, gen_scene, DatasetIndex, DatasetSpec, DomainSpec, LayoutConfig, SceneSample};
pub use dg::{
    consistency_loss, consistency_loss_logits, total_loss, train_baseline, train_prompt_randomization, TrainConfig,
    TrainState,
};
pub use diffusion::{diffusion_loss, forward_noise, LatentImage, NoiseSchedule, Timestep};
pub use error::{Error, Result};
pub use experiment::{build_report, report, run, MetricsRecord, RunOptions, RunSummary};
pub use head::{ce_loss, class_balanced_ce_loss, softmax_probs, HeadConfig, HeadSpec, SegHead};
pub use label::{LabelMap, IGNORE_INDEX};
pub use metrics::{accumulate, iou, relative_generalization, ConfusionMatrix, IouReport};
pub use model::SegModel;
pub use nn::ParamSet;
pub use prompt::{
    build_category_prompt, bundle, encode_image_prompt, encode_text_prompt, make_scene_prompt, CategoryPrompt,
    PromptBundle, SceneKind, ScenePayload, ScenePrompt, TokenEmbedding, TokenSource,
};
pub use ttda::{adapt, adapt_step, pseudo_label, AdaptState, TtdaConfig};
