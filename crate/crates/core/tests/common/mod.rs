//! Shared fixtures and the property checks behind acceptance criteria 1-7.
#![allow(dead_code)]

use std::collections::HashSet;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use promptseg::backbone::init_params;
use promptseg::checkpoint;
use promptseg::data::{DomainSpec, LayoutConfig};
use promptseg::dg::{consistency_loss, consistency_loss_logits};
use promptseg::diffusion::noise_tensor;
use promptseg::head::HeadSpec;
use promptseg::nn::{self, ParamSet};
use promptseg::prompt::{make_scene_prompt, scene_text};
use promptseg::ttda::scene_pass;
use promptseg::{
    accumulate, adapt, build_category_prompt, ce_loss, class_balanced_ce_loss, gen_scene, iou, relative_generalization,
    total_loss, AdaptState, Backbone, BackboneConfig, ConfusionMatrix, HeadConfig, LabelMap, NoiseSchedule, SceneKind,
    ScenePayload, SceneSample, SegHead, SegModel, TtdaConfig, IGNORE_INDEX,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(r: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn t64(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn vec64(t: &Tensor) -> Vec<f64> {
    nn::to_f64_vec(t).unwrap()
}

pub fn tiny_backbone_config(double: bool) -> BackboneConfig {
    BackboneConfig {
        channels: vec![4, 6, 8],
        attn_dim: 4,
        token_dim: 6,
        time_dim: 4,
        double_precision: double,
        ..BackboneConfig::default()
    }
}

pub fn class_names() -> Vec<String> {
    promptseg::data::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect()
}

/// Randomly initialized model conditioned on the source scene word.
pub fn tiny_model(cfg: &BackboneConfig, seed: u64, head_width: usize) -> SegModel {
    let bb = Backbone::freeze(cfg.clone(), init_params(cfg, seed).unwrap()).unwrap();
    let names = class_names();
    let categories = build_category_prompt(bb.text_encoder(), &names).unwrap();
    let scene = make_scene_prompt(SceneKind::SourceText, ScenePayload::Text(scene_text("domainA")), &bb, None).unwrap();
    let spec = HeadSpec::new(
        cfg,
        names.len() + 1,
        names.len(),
        &HeadConfig {
            width: head_width,
            ..HeadConfig::default()
        },
    )
    .unwrap();
    let head = SegHead::init(spec, seed + 100, cfg.dtype()).unwrap();
    SegModel {
        backbone: bb,
        head,
        categories,
        scene: Some(scene.token.vector),
    }
}

pub fn scenes(domain: &str, seeds: std::ops::Range<u64>, size: usize) -> Vec<SceneSample> {
    let layout = LayoutConfig {
        height: size,
        width: size,
        ..LayoutConfig::default()
    };
    let dom = DomainSpec::default_domains()
        .into_iter()
        .find(|d| d.name == domain)
        .expect("known domain");
    seeds.map(|s| gen_scene(s, &dom, 6, &layout).unwrap()).collect()
}

/// Worst coordinate error relative to the largest finite-difference magnitude.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn central_differences(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, c: u8, ignore_rate: f64) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if r.gen_bool(ignore_rate) { IGNORE_INDEX } else { r.gen_range(0..c) })
        .collect();
    LabelMap::new(h, w, data).unwrap()
}

/// Criterion 1: confusion-matrix IoU against per-class pixel sets.
pub fn check_iou_oracle() -> Check {
    let t = Instant::now();
    let c = 4u8;
    let mut r = rng(1);
    let mut cm = ConfusionMatrix::new(c as usize);
    let mut pred_sets: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); c as usize];
    let mut gt_sets: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); c as usize];
    for m in 0..200 {
        // skewed class draws so some classes are rare in some maps
        let gt = random_map(&mut r, 8, 8, c, 0.05);
        let pred = random_map(&mut r, 8, 8, c, 0.0);
        accumulate(&mut cm, &pred, &gt).unwrap();
        for (i, (&g, &p)) in gt.data.iter().zip(&pred.data).enumerate() {
            if g == IGNORE_INDEX {
                continue;
            }
            gt_sets[g as usize].insert((m, i));
            pred_sets[p as usize].insert((m, i));
        }
    }
    let report = iou(&cm).unwrap();
    let mut ok = true;
    let mut present = Vec::new();
    for k in 0..c as usize {
        let inter = pred_sets[k].intersection(&gt_sets[k]).count() as u64;
        let union = pred_sets[k].union(&gt_sets[k]).count() as u64;
        let row: u64 = (0..c as usize).map(|j| cm.get(k, j)).sum();
        let col: u64 = (0..c as usize).map(|i| cm.get(i, k)).sum();
        ok &= cm.get(k, k) == inter && row + col - cm.get(k, k) == union;
        let expected = if union == 0 { None } else { Some(inter as f64 / union as f64) };
        ok &= report.per_class[k] == expected;
        present.extend(expected);
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    ok &= report.miou == miou;
    let secs = t.elapsed().as_secs_f64();
    Check::new(ok && secs < 10.0, format!("exact counts {ok}, mIoU {:.4}, {secs:.2}s", 100.0 * miou))
}

/// Published generalization, oracle and relative values.
pub const RELATIVE_TABLE: [(f64, f64, f64); 6] = [
    (38.9, 79.2, 49.1),
    (45.6, 76.4, 59.7),
    (46.0, 79.9, 57.6),
    (42.7, 76.8, 55.6),
    (39.0, 70.0, 55.7),
    (49.2, 74.7, 65.9),
];

/// Criterion 2.
pub fn check_relative_table() -> Check {
    let got: Vec<f64> = RELATIVE_TABLE
        .iter()
        .map(|&(g, o, _)| (relative_generalization(g, o).unwrap() * 10.0).round() / 10.0)
        .collect();
    let ok = got.iter().zip(&RELATIVE_TABLE).all(|(v, row)| (v - row.2).abs() < 1e-9);
    Check::new(ok, format!("{got:?}"))
}

/// Criterion 3: moments of the forward process from 10^5 draws.
pub fn check_noising_statistics() -> Check {
    let t = Instant::now();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let p = 40;
    let ab = schedule.alpha_bar(p).unwrap();
    let z0 = [0.8, -0.3, 0.0, 1.5];
    let n = 100_000;
    let mut r = rng(3);
    let eps = t64(normals(&mut r, n * z0.len(), 1.0), &[n, z0.len()]);
    let base = t64(z0.repeat(n), &[n, z0.len()]);
    let z = vec64(&noise_tensor(&base, p, &eps, &schedule).unwrap());
    let mut ok = true;
    let mut worst_se = 0.0f64;
    let mut worst_var = 0.0f64;
    for (j, &x0) in z0.iter().enumerate() {
        let xs: Vec<f64> = (0..n).map(|i| z[i * z0.len() + j]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let dev_se = (mean - ab.sqrt() * x0).abs() / se;
        let dev_var = (var - (1.0 - ab)).abs() / (1.0 - ab);
        worst_se = worst_se.max(dev_se);
        worst_var = worst_var.max(dev_var);
        ok &= dev_se <= 3.0 && dev_var <= 0.02;
    }
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        ok && secs < 30.0,
        format!("mean dev {worst_se:.2} SE, var dev {:.2}%, {secs:.2}s", 100.0 * worst_var),
    )
}

fn random_probs(r: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    nn::softmax(&t64(normals(r, n, 2.0), &shape), 1).unwrap()
}

/// Direct summation of `Σ_{p≠q} KL(P_p ‖ P_q)` averaged over pixels.
pub fn kl_oracle(maps: &[Vec<f64>], c: usize, pixels: usize) -> f64 {
    let mut total = 0.0;
    for (a, pa) in maps.iter().enumerate() {
        for (b, pb) in maps.iter().enumerate() {
            if a == b {
                continue;
            }
            for px in 0..pixels {
                for k in 0..c {
                    let (x, y) = (pa[k * pixels + px], pb[k * pixels + px]);
                    total += x * (x / y).ln();
                }
            }
        }
    }
    total / pixels as f64
}

/// Criterion 4.
pub fn check_consistency_properties() -> Check {
    let mut r = rng(4);
    let shape = [1, 4, 3, 3];
    let (c, pixels) = (4, 9);
    let mut min_value = f64::INFINITY;
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let a = random_probs(&mut r, shape);
        let b = random_probs(&mut r, shape);
        let v = nn::scalar(&consistency_loss(&[a.clone(), b.clone()]).unwrap()).unwrap();
        min_value = min_value.min(v);
        worst_oracle = worst_oracle.max((v - kl_oracle(&[vec64(&a), vec64(&b)], c, pixels)).abs());
    }
    let mut worst_identical = 0.0f64;
    for _ in 0..100 {
        let a = random_probs(&mut r, shape);
        let v = nn::scalar(&consistency_loss(&[a.clone(), a.clone()]).unwrap()).unwrap();
        worst_identical = worst_identical.max(v.abs());
    }
    let labels = random_map(&mut r, 3, 3, 4, 0.0);
    let logits: Vec<Tensor> = (0..3).map(|_| t64(normals(&mut r, 36, 1.5), &shape)).collect();
    let single = total_loss(&logits[..1], &[&labels], 0.7).unwrap();
    let ce0 = nn::scalar(&ce_loss(&logits[0], &[&labels]).unwrap()).unwrap();
    let k1_exact = nn::scalar(&single.total).unwrap().to_bits() == ce0.to_bits();
    let zero = total_loss(&logits, &[&labels], 0.0).unwrap();
    let ces: Vec<f64> = logits
        .iter()
        .map(|l| nn::scalar(&ce_loss(l, &[&labels]).unwrap()).unwrap())
        .collect();
    let sum = ces[0] + ces[1] + ces[2];
    let lambda0 = nn::scalar(&zero.total).unwrap().to_bits() == sum.to_bits() && zero.consistency.is_none();
    let ok = min_value >= 0.0 && worst_identical <= 1e-10 && worst_oracle <= 1e-9 && k1_exact && lambda0;
    Check::new(
        ok,
        format!(
            "min {min_value:.3e}, identical {worst_identical:.1e}, oracle err {worst_oracle:.1e}, K=1 exact {k1_exact}, λ=0 exact {lambda0}"
        ),
    )
}

fn loss_and_grad(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> (f64, Vec<f64>) {
    let v = Var::from_tensor(x).unwrap();
    let loss = f(v.as_tensor());
    let g = loss.backward().unwrap();
    (nn::scalar(&loss).unwrap(), vec64(g.get(v.as_tensor()).unwrap()))
}

/// Gradient of the cross-entropy with respect to logits on a 2×2, C=3 map.
pub fn ce_gradient_error(seed: u64, class_balanced: bool) -> f64 {
    let mut r = rng(seed);
    let shape = [1, 3, 2, 2];
    let x = normals(&mut r, 12, 1.0);
    let labels = LabelMap::new(2, 2, vec![0, 2, 2, IGNORE_INDEX]).unwrap();
    let loss = |t: &Tensor| {
        if class_balanced {
            class_balanced_ce_loss(t, &[&labels]).unwrap()
        } else {
            ce_loss(t, &[&labels]).unwrap()
        }
    };
    let (_, analytic) = loss_and_grad(&t64(x.clone(), &shape), loss);
    let numeric = central_differences(&x, 1e-5, |v| nn::scalar(&loss(&t64(v.to_vec(), &shape))).unwrap());
    relative_error(&analytic, &numeric)
}

/// Gradient of the pairwise KL term with respect to each of K=2 logit maps.
pub fn consistency_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [1, 3, 2, 2];
    let maps: Vec<Vec<f64>> = (0..2).map(|_| normals(&mut r, 12, 1.0)).collect();
    let mut worst = 0.0f64;
    for k in 0..2 {
        for via_probs in [false, true] {
            let loss = |t: &Tensor, maps: &[Vec<f64>]| {
                let mut ls: Vec<Tensor> = maps.iter().map(|m| t64(m.clone(), &shape)).collect();
                ls[k] = t.clone();
                if via_probs {
                    let ps: Vec<Tensor> = ls.iter().map(|l| nn::softmax(l, 1).unwrap()).collect();
                    consistency_loss(&ps).unwrap()
                } else {
                    consistency_loss_logits(&ls, false).unwrap()
                }
            };
            let (_, analytic) = loss_and_grad(&t64(maps[k].clone(), &shape), |t| loss(t, &maps));
            let numeric = central_differences(&maps[k], 1e-5, |v| {
                nn::scalar(&loss(&t64(v.to_vec(), &shape), &maps)).unwrap()
            });
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    worst
}

/// Gradient of the pseudo-label objective with respect to all N coordinates of
/// the scene token, labels held at the argmax of the unperturbed prediction.
pub fn token_gradient_error(seed: u64, class_balanced: bool) -> f64 {
    let cfg = tiny_backbone_config(true);
    let model = tiny_model(&cfg, seed, 4);
    let sample = &scenes("domainC", seed..seed + 1, 16)[0];
    let image = sample.latent(DType::F64).unwrap();
    let token = model.scene.clone().unwrap();
    let pass = scene_pass(&model, &image, &token, None, class_balanced).unwrap();
    let analytic = vec64(&pass.grad.unwrap());
    let pseudo = pass.pseudo;
    let x = vec64(&token);
    let n = x.len();
    let numeric = central_differences(&x, 1e-5, |v| {
        let cond = model.conditioning_for(Some(&t64(v.to_vec(), &[n]))).unwrap();
        let logits = model.logits_with(&image.unsqueeze(0).unwrap(), &cond).unwrap();
        let l = if class_balanced {
            class_balanced_ce_loss(&logits, &[&pseudo]).unwrap()
        } else {
            ce_loss(&logits, &[&pseudo]).unwrap()
        };
        nn::scalar(&l).unwrap()
    });
    relative_error(&analytic, &numeric)
}

/// Criterion 5.
pub fn check_gradients() -> Check {
    let t = Instant::now();
    let mut ce = 0.0f64;
    let mut lc = 0.0f64;
    let mut lt = 0.0f64;
    for seed in 0..5 {
        ce = ce.max(ce_gradient_error(seed, false)).max(ce_gradient_error(seed, true));
        lc = lc.max(consistency_gradient_error(seed));
    }
    for seed in 0..3 {
        lt = lt.max(token_gradient_error(seed, false)).max(token_gradient_error(seed, true));
    }
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        ce < 1e-4 && lc < 1e-4 && lt < 1e-4 && secs < 120.0,
        format!("rel err CE {ce:.1e}, L_c {lc:.1e}, L_t {lt:.1e}, {secs:.1}s"),
    )
}

fn serialized(ps: &ParamSet) -> Vec<u8> {
    checkpoint::encode(ps, serde_json::Value::Null).unwrap()
}

fn frozen_bytes(model: &SegModel) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let mut cats = ParamSet::new();
    cats.insert("category_tokens", model.categories.tensor().unwrap());
    (serialized(model.backbone.params()), serialized(&model.head.params), serialized(&cats))
}

/// Criterion 6.
pub fn check_ttda_isolation() -> Check {
    let cfg = BackboneConfig {
        channels: vec![8, 8, 8],
        attn_dim: 8,
        token_dim: 8,
        time_dim: 8,
        ..BackboneConfig::default()
    };
    let model = tiny_model(&cfg, 6, 8);
    let stream = scenes("domainC", 0..60, 16);
    let before = frozen_bytes(&model);
    let count = AdaptState::new(&model).unwrap().trainable_parameter_count();
    let ttda = TtdaConfig {
        lr: 0.5,
        steps: 2,
        class_balanced: true,
        ..TtdaConfig::default()
    };
    let out = adapt(&model, &stream, &ttda).unwrap();
    let after = frozen_bytes(&model);
    let moved = vec64(&(&out.state.token - &out.state.initial_token).unwrap())
        .iter()
        .any(|v| *v != 0.0);
    let same = before == after;
    Check::new(
        same && count == cfg.token_dim && moved,
        format!(
            "{} images, frozen bytes identical {same}, trainable {count} (N = {}), token moved {moved}",
            stream.len(),
            cfg.token_dim
        ),
    )
}

/// Criterion 7.
pub fn check_attention_normalization() -> Check {
    let cfg = BackboneConfig::default();
    let bb = Backbone::freeze(cfg.clone(), init_params(&cfg, 7).unwrap()).unwrap();
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let m = 2 + i % 8;
        let img = Tensor::from_vec(
            normals(&mut r, 3 * 32 * 32, 0.7).iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (1, 3, 32, 32),
            &Device::Cpu,
        )
        .unwrap();
        let scale = 0.5 + 2.5 * r.gen::<f64>();
        let toks = Tensor::from_vec(
            normals(&mut r, m * cfg.token_dim, scale).iter().map(|&v| v as f32).collect::<Vec<_>>(),
            (m, cfg.token_dim),
            &Device::Cpu,
        )
        .unwrap();
        let out = bb.extract(&img, &toks).unwrap();
        worst = worst.max(out.attention_normalization_error().unwrap());
    }
    Check::new(worst <= 1e-5, format!("max |Σ_m a - 1| = {worst:.2e} over 100 inputs"))
}
