//! Procedural multi-domain segmentation benchmark.
//!
//! A scene is a horizon-split background (two classes) with one geometric
//! object per remaining class, placed independently with integer-valued
//! jitter and a random stacking order. The layout and the labels depend only
//! on the seed; each domain applies a global, label-preserving photometric
//! transform to the rendered image.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::label::LabelMap;
use crate::nn;

pub const DEFAULT_CLASSES: &[&str] = &["sky", "road", "car", "tree", "sign", "person"];
/// Extra class words available to the enlarged category-prompt experiment.
pub const AUX_CLASSES: &[&str] = &["building", "bus", "bicycle", "fence", "wall", "pole"];
pub const IRRELEVANT_SCENES: &[&str] = &["water", "grass", "sand", "painting"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    WideBox,
    Disc,
    Triangle,
    TallBox,
}

impl Shape {
    pub fn for_object(k: usize) -> Self {
        [Shape::WideBox, Shape::Disc, Shape::Triangle, Shape::TallBox][k % 4]
    }

    /// Whether the pixel with center `(px, py)` lies inside a shape of size
    /// `s` centered at `(cx, cy)` (all in pixel units).
    pub fn contains(self, px: f64, py: f64, cx: f64, cy: f64, s: f64) -> bool {
        let dx = px - cx;
        let dy = py - cy;
        let half = s / 2.0;
        match self {
            Shape::WideBox => dx.abs() <= half && dy.abs() <= s / 3.0,
            Shape::Disc => dx * dx + dy * dy <= half * half,
            Shape::Triangle => {
                let from_top = dy + half;
                (0.0..=s).contains(&from_top) && dx.abs() <= from_top / 2.0
            }
            Shape::TallBox => dx.abs() <= s / 5.0 && dy.abs() <= half,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of horizon rows as fractions of the height.
    pub horizon: (f64, f64),
    /// Inclusive range of object sizes as fractions of the width.
    pub object_size: (f64, f64),
    pub min_object_pixels: usize,
    pub max_retries: usize,
    /// Per-channel uniform color jitter amplitude per object.
    pub color_jitter: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            horizon: (0.35, 0.6),
            object_size: (0.22, 0.4),
            min_object_pixels: 3,
            max_retries: 64,
            color_jitter: 0.06,
        }
    }
}

impl LayoutConfig {
    pub fn horizon_rows(&self) -> (usize, usize) {
        let lo = (self.horizon.0 * self.height as f64).round() as usize;
        let hi = (self.horizon.1 * self.height as f64).round() as usize;
        (lo.min(self.height), hi.clamp(lo, self.height))
    }

    pub fn size_range(&self) -> (usize, usize) {
        let lo = ((self.object_size.0 * self.width as f64).round() as usize).max(2);
        let hi = ((self.object_size.1 * self.width as f64).round() as usize).max(lo);
        (lo, hi.min(self.width.min(self.height)))
    }
}

/// Placement of one object: integer center and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: usize,
    pub cx: usize,
    pub cy: usize,
    pub size: usize,
}

/// Valid centers for a size-`s` object: the shape's bounding box stays inside.
pub fn center_range(extent: usize, s: usize) -> (usize, usize) {
    let half = s / 2;
    (half, extent - (s - half))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Base RGB color per class; missing entries fall back to the default palette.
    pub palette: Vec<[f64; 3]>,
    pub brightness: f64,
    pub contrast: f64,
    pub hue_degrees: f64,
    pub noise_std: f64,
    /// Blend weight toward `fog_color`.
    pub fog: f64,
    pub fog_color: [f64; 3],
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "domainA".into(),
            palette: Vec::new(),
            brightness: 1.0,
            contrast: 1.0,
            hue_degrees: 0.0,
            noise_std: 0.0,
            fog: 0.0,
            fog_color: [0.7, 0.7, 0.7],
        }
    }
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 1.0 && self.contrast == 1.0 && self.hue_degrees == 0.0 && self.noise_std == 0.0 && self.fog == 0.0
    }

    /// Source, mild-shift and strong-shift domains of the default benchmark.
    pub fn default_domains() -> Vec<DomainSpec> {
        vec![
            Self::identity("domainA"),
            Self {
                name: "domainB".into(),
                brightness: 0.85,
                hue_degrees: 25.0,
                ..Self::default()
            },
            Self {
                name: "domainC".into(),
                contrast: 0.45,
                noise_std: 0.05,
                fog: 0.3,
                ..Self::default()
            },
        ]
    }

    fn base_color(&self, class: usize) -> [f64; 3] {
        self.palette.get(class).copied().unwrap_or_else(|| default_palette(class))
    }

    /// Applies the photometric transform to a single RGB triple (no noise).
    fn transform(&self, rgb: [f64; 3]) -> [f64; 3] {
        let mut c = rgb.map(|v| v * self.brightness);
        c = c.map(|v| 0.5 + self.contrast * (v - 0.5));
        if self.hue_degrees != 0.0 {
            c = rotate_hue(c, self.hue_degrees);
        }
        for (v, f) in c.iter_mut().zip(self.fog_color) {
            *v = (1.0 - self.fog) * *v + self.fog * f;
        }
        c
    }
}

pub fn default_palette(class: usize) -> [f64; 3] {
    const P: [[f64; 3]; 6] = [
        [0.55, 0.75, 0.95],
        [0.35, 0.35, 0.38],
        [0.85, 0.20, 0.20],
        [0.15, 0.60, 0.20],
        [0.95, 0.85, 0.15],
        [0.80, 0.55, 0.85],
    ];
    if class < P.len() {
        P[class]
    } else {
        let t = class as f64 * 0.618_033_988_75;
        [
            0.5 + 0.4 * (6.283 * t).sin(),
            0.5 + 0.4 * (6.283 * t + 2.1).sin(),
            0.5 + 0.4 * (6.283 * t + 4.2).sin(),
        ]
    }
}

/// Rotation about the gray axis of RGB space.
fn rotate_hue(c: [f64; 3], degrees: f64) -> [f64; 3] {
    let th = degrees.to_radians();
    let (s, co) = th.sin_cos();
    let k = 1.0 / 3.0;
    let sq = (1.0f64 / 3.0).sqrt();
    let m = [
        [co + (1.0 - co) * k, k * (1.0 - co) - sq * s, k * (1.0 - co) + sq * s],
        [k * (1.0 - co) + sq * s, co + k * (1.0 - co), k * (1.0 - co) - sq * s],
        [k * (1.0 - co) - sq * s, k * (1.0 - co) + sq * s, co + k * (1.0 - co)],
    ];
    [0, 1, 2].map(|r| m[r][0] * c[0] + m[r][1] * c[1] + m[r][2] * c[2])
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    /// `[3, H, W]` channel-major, values in `[0, 1]`, quantized to 8 bits.
    pub image: Vec<f32>,
    pub labels: LabelMap,
    pub domain: String,
    pub seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    /// RGB tensor `[3, H, W]` in `[0, 1]`.
    pub fn rgb_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.image, (3, self.height(), self.width()), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Clean latent `[3, H, W]` in `[-1, 1]`.
    pub fn latent(&self, dtype: DType) -> Result<Tensor> {
        Ok(self.rgb_tensor(dtype)?.affine(2.0, -1.0)?)
    }
}

/// Latent batch `[B, 3, H, W]` for a slice of samples.
pub fn latent_batch(samples: &[&SceneSample], dtype: DType) -> Result<Tensor> {
    let ts = samples.iter().map(|s| s.latent(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Samples the layout for `seed`: horizon row and object placements in
/// stacking order (last drawn on top).
pub fn sample_layout(seed: u64, num_classes: usize, layout: &LayoutConfig, attempt: usize) -> (usize, Vec<Placement>) {
    let mut rng = nn::seeded_rng(seed, 0x1a40 + attempt as u64);
    let (h_lo, h_hi) = layout.horizon_rows();
    let horizon = rng.gen_range(h_lo..=h_hi);
    let (s_lo, s_hi) = layout.size_range();
    let mut objs: Vec<Placement> = (2..num_classes)
        .map(|class| {
            let size = rng.gen_range(s_lo..=s_hi);
            let (x0, x1) = center_range(layout.width, size);
            let (y0, y1) = center_range(layout.height, size);
            Placement {
                class,
                cx: rng.gen_range(x0..=x1),
                cy: rng.gen_range(y0..=y1),
                size,
            }
        })
        .collect();
    objs.shuffle(&mut rng);
    (horizon, objs)
}

/// Label map of a layout.
pub fn rasterize(horizon: usize, objs: &[Placement], layout: &LayoutConfig) -> LabelMap {
    let (h, w) = (layout.height, layout.width);
    let mut labels = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let mut c = if y < horizon { 0 } else { 1 };
            for o in objs {
                if Shape::for_object(o.class - 2).contains(x as f64 + 0.5, y as f64 + 0.5, o.cx as f64, o.cy as f64, o.size as f64) {
                    c = o.class as u8;
                }
            }
            labels.set(y, x, c);
        }
    }
    labels
}

/// Untransformed render `[3, H, W]` in `[0, 1]` and its labels.
pub fn render(seed: u64, num_classes: usize, layout: &LayoutConfig, palette_of: &DomainSpec) -> Result<(Vec<f64>, LabelMap)> {
    if num_classes < 3 {
        return Err(invalid("the layout needs at least 3 classes"));
    }
    for attempt in 0..layout.max_retries.max(1) {
        let (horizon, objs) = sample_layout(seed, num_classes, layout, attempt);
        let labels = rasterize(horizon, &objs, layout);
        let mut counts = vec![0usize; num_classes];
        for &c in &labels.data {
            counts[c as usize] += 1;
        }
        let ok = counts[2..].iter().all(|&n| n >= layout.min_object_pixels)
            && (horizon == 0 || counts[0] > 0)
            && (horizon == layout.height || counts[1] > 0);
        if !ok {
            continue;
        }
        let mut rng = nn::seeded_rng(seed, 0xc010 + attempt as u64);
        let jitter: Vec<[f64; 3]> = (0..num_classes)
            .map(|_| [0, 1, 2].map(|_| rng.gen_range(-layout.color_jitter..=layout.color_jitter)))
            .collect();
        let (h, w) = (layout.height, layout.width);
        let mut img = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let c = labels.get(y, x) as usize;
                let mut rgb = palette_of.base_color(c);
                for k in 0..3 {
                    rgb[k] += jitter[c][k];
                }
                // background shading toward the horizon
                if c == 0 {
                    let t = y as f64 / horizon.max(1) as f64;
                    rgb = rgb.map(|v| v + 0.12 * t);
                } else if c == 1 {
                    let t = (y - horizon.min(y)) as f64 / (h - horizon).max(1) as f64;
                    rgb = rgb.map(|v| v - 0.1 * t);
                }
                for k in 0..3 {
                    img[(k * h + y) * w + x] = rgb[k].clamp(0.0, 1.0);
                }
            }
        }
        return Ok((img, labels));
    }
    Err(Error::Dataset(format!(
        "could not place all objects for seed {seed} within {} attempts",
        layout.max_retries
    )))
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Renders the layout for `seed` and applies `domain`'s transform to the image.
pub fn gen_scene(seed: u64, domain: &DomainSpec, num_classes: usize, layout: &LayoutConfig) -> Result<SceneSample> {
    let (raw, labels) = render(seed, num_classes, layout, domain)?;
    let (h, w) = (layout.height, layout.width);
    let mut rng: ChaCha8Rng = nn::seeded_rng(seed ^ fnv1a(domain.name.as_bytes()), 0xd0);
    let mut image = vec![0f32; raw.len()];
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|k| raw[(k * h + y) * w + x]);
            let t = if domain.is_identity() { px } else { domain.transform(px) };
            for k in 0..3 {
                let mut v = t[k];
                if domain.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v += domain.noise_std * z;
                }
                image[(k * h + y) * w + x] = quantize(v);
            }
        }
    }
    Ok(SceneSample {
        image,
        labels,
        domain: domain.name.clone(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub seed_start: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub layout: LayoutConfig,
    pub domains: Vec<DomainSpec>,
    pub splits: Vec<SplitSpec>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            layout: LayoutConfig::default(),
            domains: DomainSpec::default_domains(),
            splits: vec![
                SplitSpec {
                    name: "train".into(),
                    seed_start: 0,
                    count: 400,
                },
                SplitSpec {
                    name: "val".into(),
                    seed_start: 100_000,
                    count: 50,
                },
                SplitSpec {
                    name: "test".into(),
                    seed_start: 200_000,
                    count: 200,
                },
            ],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 3 || self.classes.len() > 254 {
            return Err(invalid("dataset needs between 3 and 254 classes"));
        }
        if self.domains.is_empty() {
            return Err(invalid("dataset needs at least one domain"));
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return Err(invalid(format!("duplicate domain {:?}", d.name)));
            }
        }
        let mut split_names = BTreeSet::new();
        for (i, a) in self.splits.iter().enumerate() {
            if !split_names.insert(&a.name) {
                return Err(invalid(format!("duplicate split {:?}", a.name)));
            }
            for b in &self.splits[i + 1..] {
                let overlap = a.seed_start < b.seed_start + b.count && b.seed_start < a.seed_start + a.count;
                if overlap && a.count > 0 && b.count > 0 {
                    return Err(invalid(format!("seed ranges of splits {:?} and {:?} overlap", a.name, b.name)));
                }
            }
        }
        let f = 8;
        if self.layout.height % f != 0 || self.layout.width % f != 0 {
            return Err(invalid(format!("image size must be a multiple of {f}")));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Dataset(format!("unknown domain {name:?}")))
    }

    pub fn split(&self, name: &str) -> Result<&SplitSpec> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Dataset(format!("unknown split {name:?}")))
    }

    /// In-memory generation of one split for one domain.
    pub fn generate(&self, split: &str, domain: &str) -> Result<Vec<SceneSample>> {
        let sp = self.split(split)?;
        let d = self.domain(domain)?;
        (sp.seed_start..sp.seed_start + sp.count)
            .map(|seed| gen_scene(seed, d, self.classes.len(), &self.layout))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub domain: String,
    pub seed: u64,
    pub image_path: String,
    pub label_path: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "dataset.json";

/// Writes every split × domain to `out_dir` as PNG files plus a JSONL manifest.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path, force: bool) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Dataset(format!(
                "{} exists and is not empty (use force to overwrite)",
                out_dir.display()
            )));
        }
        for sub in ["images", "labels"] {
            let p = out_dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut records = Vec::new();
    for split in &spec.splits {
        for domain in &spec.domains {
            let img_dir = PathBuf::from("images").join(&split.name).join(&domain.name);
            let lbl_dir = PathBuf::from("labels").join(&split.name).join(&domain.name);
            fs::create_dir_all(out_dir.join(&img_dir)).map_err(io_err(out_dir.join(&img_dir)))?;
            fs::create_dir_all(out_dir.join(&lbl_dir)).map_err(io_err(out_dir.join(&lbl_dir)))?;
            for seed in split.seed_start..split.seed_start + split.count {
                let s = gen_scene(seed, domain, spec.classes.len(), &spec.layout)?;
                let name = format!("{seed:08}.png");
                let ip = img_dir.join(&name);
                let lp = lbl_dir.join(&name);
                save_rgb_png(&s, &out_dir.join(&ip))?;
                save_label_png(&s.labels, &out_dir.join(&lp))?;
                records.push(ManifestRecord {
                    id: format!("{}/{}/{seed:08}", split.name, domain.name),
                    split: split.name.clone(),
                    domain: domain.name.clone(),
                    seed,
                    image_path: path_string(&ip),
                    label_path: path_string(&lp),
                });
            }
        }
    }
    let mpath = out_dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(io_err(&mpath))?;
    }
    let spath = out_dir.join(SPEC_FILE);
    fs::write(&spath, serde_json::to_string_pretty(spec)? + "\n").map_err(io_err(&spath))?;
    Ok(records)
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn save_rgb_png(s: &SceneSample, path: &Path) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                buf[(y * w + x) * 3 + k] = (s.image[(k * h + y) * w + x] * 255.0).round() as u8;
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

fn save_label_png(l: &LabelMap, path: &Path) -> Result<()> {
    image::save_buffer(path, &l.data, l.width as u32, l.height as u32, image::ExtendedColorType::L8)?;
    Ok(())
}

/// Reads an RGB PNG into `[3, H, W]` floats in `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for k in 0..3 {
            out[(k * h + y as usize) * w + x as usize] = p.0[k] as f32 / 255.0;
        }
    }
    Ok((out, h, w))
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(h, w, img.into_raw())
}

/// On-disk dataset written by [`gen_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub spec: DatasetSpec,
    pub records: Vec<ManifestRecord>,
}

impl DatasetIndex {
    pub fn open(root: &Path) -> Result<Self> {
        let spath = root.join(SPEC_FILE);
        let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(&spath).map_err(io_err(&spath))?)?;
        let mpath = root.join(MANIFEST_FILE);
        let f = fs::File::open(&mpath).map_err(io_err(&mpath))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&mpath))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            spec,
            records,
        })
    }

    pub fn load(&self, split: &str, domain: &str, limit: Option<usize>) -> Result<Vec<SceneSample>> {
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| r.split == split && r.domain == domain) {
            if limit.is_some_and(|l| out.len() >= l) {
                break;
            }
            let (image, h, w) = load_rgb_png(&self.root.join(&r.image_path))?;
            let labels = load_label_png(&self.root.join(&r.label_path))?;
            if labels.height != h || labels.width != w {
                return Err(Error::Dataset(format!("image/label size mismatch for {}", r.id)));
            }
            out.push(SceneSample {
                image,
                labels,
                domain: r.domain.clone(),
                seed: r.seed,
            });
        }
        if out.is_empty() {
            return Err(Error::Dataset(format!("no samples for split {split:?}, domain {domain:?}")));
        }
        Ok(out)
    }
}
