//! Procedural unpaired bimodal segmentation data.
//!
//! A scene is a label map of simple shapes with a fixed layout grammar
//! (class 2 always touches class 1). Each modality renders the same kind of
//! scene through its own appearance profile: per-class intensities, noise, a
//! smooth additive bias field and optional contrast inversion. Modalities
//! draw scenes from disjoint seed ranges, so no label map is shared.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mmseg_autodiff::io::{self as tio, Dtype};
use mmseg_autodiff::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Ellipse,
    RoundedRect,
    Annulus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassShape {
    pub family: ShapeFamily,
    /// Radius (or half-extent) range in pixels.
    pub size: (f64, f64),
    /// Class this shape must touch, if any.
    pub adjacent_to: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Shapes for classes `1..Z`; painted in order, later classes win.
    pub shapes: Vec<ClassShape>,
    /// Maximum displacement of the first shape from the image center, in pixels.
    pub position_jitter: f64,
    /// Every foreground class must cover at least this fraction of pixels.
    pub min_fraction: f64,
    /// Required share of samples meeting `min_fraction` for every class.
    pub balance_rate: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::for_extent(64, 64, 4)
    }
}

impl SceneSpec {
    /// Standard layout scaled to the image: class 1 is a large ellipse,
    /// class 2 a smaller ellipse touching it, class 3 a rounded rectangle,
    /// further classes cycle through annulus, ellipse and rectangle.
    pub fn for_extent(height: usize, width: usize, classes: usize) -> Self {
        let s = height.min(width) as f64 / 64.0;
        let shapes = (1..classes)
            .map(|c| match c {
                1 => ClassShape {
                    family: ShapeFamily::Ellipse,
                    size: (9.0 * s, 14.0 * s),
                    adjacent_to: None,
                },
                2 => ClassShape {
                    family: ShapeFamily::Ellipse,
                    size: (5.0 * s, 8.0 * s),
                    adjacent_to: Some(1),
                },
                _ => ClassShape {
                    family: [ShapeFamily::RoundedRect, ShapeFamily::Annulus, ShapeFamily::Ellipse][(c - 3) % 3],
                    size: (5.0 * s, 8.0 * s),
                    adjacent_to: None,
                },
            })
            .collect();
        SceneSpec {
            height,
            width,
            classes,
            shapes,
            position_jitter: 8.0 * s,
            min_fraction: 0.01,
            balance_rate: 0.9,
            max_attempts: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.shapes.len() != self.classes - 1 || self.classes > 256 {
            return Err(Error::config(format!(
                "{} shapes for {} classes",
                self.shapes.len(),
                self.classes
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if let Some(a) = s.adjacent_to {
                if a == 0 || a as usize > i {
                    return Err(Error::config(format!(
                        "class {} may only touch an earlier foreground class, not {a}",
                        i + 1
                    )));
                }
            }
            if !(s.size.0 > 0.0 && s.size.0 <= s.size.1) {
                return Err(Error::config(format!("bad size range {:?} for class {}", s.size, i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    family: ShapeFamily,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dy + s * dx, -s * dy + c * dx);
        match self.family {
            ShapeFamily::Ellipse => (u / self.ry).powi(2) + (v / self.rx).powi(2) <= 1.0,
            ShapeFamily::RoundedRect => {
                let r = 0.35 * self.ry.min(self.rx);
                let qy = (u.abs() - (self.ry - r)).max(0.0);
                let qx = (v.abs() - (self.rx - r)).max(0.0);
                qy * qy + qx * qx <= r * r
            }
            ShapeFamily::Annulus => {
                let d = ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt();
                (0.5..=1.0).contains(&d)
            }
        }
    }

    /// Distance from the center to the outline along direction `(sy, sx)`.
    fn reach(&self, sy: f64, sx: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * sy + s * sx, -s * sy + c * sx);
        1.0 / ((u / self.ry).powi(2) + (v / self.rx).powi(2)).sqrt()
    }

    fn bounds(&self) -> f64 {
        self.ry.max(self.rx)
    }
}

fn touches(map: &LabelMap, a: u8, b: u8) -> bool {
    for y in 0..map.height {
        for x in 0..map.width {
            if map.get(y, x) != a {
                continue;
            }
            let n = [
                (y > 0).then(|| map.get(y - 1, x)),
                (y + 1 < map.height).then(|| map.get(y + 1, x)),
                (x > 0).then(|| map.get(y, x - 1)),
                (x + 1 < map.width).then(|| map.get(y, x + 1)),
            ];
            if n.into_iter().flatten().any(|v| v == b) {
                return true;
            }
        }
    }
    false
}

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<LabelMap> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut placed: Vec<Placed> = Vec::new();
    let mut map = LabelMap::filled(spec.height, spec.width, 0);
    for shape in &spec.shapes {
        let ry = rng.random_range(shape.size.0..=shape.size.1);
        let rx = rng.random_range(shape.size.0..=shape.size.1);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let mut p = Placed {
            family: shape.family,
            cy: 0.0,
            cx: 0.0,
            ry,
            rx,
            angle,
        };
        match shape.adjacent_to {
            Some(a) => {
                let anchor = placed[a as usize - 1];
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (sy, sx) = theta.sin_cos();
                // overlap slightly so the painted shapes share a boundary
                let d = anchor.reach(sy, sx) + 0.6 * p.reach(sy, sx);
                p.cy = anchor.cy + d * sy;
                p.cx = anchor.cx + d * sx;
            }
            None if placed.is_empty() => {
                let j = spec.position_jitter;
                p.cy = h / 2.0 + rng.random_range(-j..=j);
                p.cx = w / 2.0 + rng.random_range(-j..=j);
            }
            None => {
                let r = p.bounds() + 1.0;
                if 2.0 * r >= h.min(w) {
                    return None;
                }
                p.cy = rng.random_range(r..h - r);
                p.cx = rng.random_range(r..w - r);
            }
        }
        let r = p.bounds();
        if p.cy - r < 0.0 || p.cx - r < 0.0 || p.cy + r > h || p.cx + r > w {
            return None;
        }
        placed.push(p);
    }
    for (k, p) in placed.iter().enumerate() {
        for y in 0..spec.height {
            for x in 0..spec.width {
                if p.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    map.set(y, x, (k + 1) as u8);
                }
            }
        }
    }
    for c in 1..spec.classes {
        if map.fraction(c as u8) < spec.min_fraction {
            return None;
        }
    }
    for (k, shape) in spec.shapes.iter().enumerate() {
        if let Some(a) = shape.adjacent_to {
            if !touches(&map, (k + 1) as u8, a) {
                return None;
            }
        }
    }
    Some(map)
}

/// Draws a label map satisfying the size and adjacency constraints,
/// retrying up to `max_attempts` times.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabelMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..spec.max_attempts {
        if let Some(map) = try_scene(spec, &mut rng) {
            return Ok(map);
        }
    }
    Err(Error::Generation {
        seed,
        attempts: spec.max_attempts,
    })
}

/// Appearance of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceProfile {
    pub name: String,
    /// Base intensity per class, background first.
    pub class_means: Vec<f64>,
    pub noise_std: f64,
    /// Peak amplitude of the additive smooth bias field.
    pub bias_amplitude: f64,
    /// Render `1 − mean` instead of `mean`.
    pub invert: bool,
    /// Pixel shift of the two neighboring slices (0 renders three copies of
    /// the same labels).
    pub slice_jitter: usize,
}

impl AppearanceProfile {
    /// Low noise, flat field, high contrast.
    pub fn modality_a(classes: usize) -> Self {
        AppearanceProfile {
            name: "A".into(),
            class_means: cycle(&[0.1, 0.85, 0.6, 0.35, 0.7], classes),
            noise_std: 0.06,
            bias_amplitude: 0.0,
            invert: false,
            slice_jitter: 1,
        }
    }

    /// Noisier, inverted, lower-contrast, with a bias field.
    pub fn modality_b(classes: usize) -> Self {
        AppearanceProfile {
            name: "B".into(),
            class_means: cycle(&[0.2, 0.5, 0.75, 0.35, 0.6], classes),
            noise_std: 0.15,
            bias_amplitude: 0.12,
            invert: true,
            slice_jitter: 1,
        }
    }

    /// Effective per-class intensity after inversion.
    pub fn intensity(&self, class: u8) -> f64 {
        let m = self.class_means[class as usize];
        if self.invert {
            1.0 - m
        } else {
            m
        }
    }
}

fn cycle(base: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| base[i % base.len()]).collect()
}

/// One modality-tagged image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, zero mean and unit variance over all values.
    pub image: Tensor,
    pub label: LabelMap,
    pub modality: usize,
}

impl Sample {
    /// The image as channels-last `[H, W, 3]`, the layout the model consumes.
    pub fn channels_last(&self) -> Tensor {
        let (h, w) = (self.label.height, self.label.width);
        let src = self.image.data();
        let mut out = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for c in 0..3 {
                out.push(src[c * h * w + p]);
            }
        }
        Tensor::new([h, w, 3], out).expect("consistent extents")
    }
}

fn shifted(label: &LabelMap, dy: isize, dx: isize) -> LabelMap {
    let (h, w) = (label.height as isize, label.width as isize);
    let mut out = label.clone();
    for y in 0..h {
        for x in 0..w {
            let sy = (y - dy).clamp(0, h - 1);
            let sx = (x - dx).clamp(0, w - 1);
            out.set(y as usize, x as usize, label.get(sy as usize, sx as usize));
        }
    }
    out
}

/// Renders the three slices for `label` under `profile`, then normalizes.
pub fn render_modality(label: &LabelMap, profile: &AppearanceProfile, modality: usize, seed: u64) -> Result<Sample> {
    if let Some(&bad) = label.data.iter().find(|&&v| v as usize >= profile.class_means.len()) {
        return Err(Error::LabelRange {
            label: bad,
            classes: profile.class_means.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (h, w) = (label.height, label.width);
    let ky = rng.random_range(0.3..1.0);
    let kx = rng.random_range(0.3..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let j = profile.slice_jitter as isize;
    let mut data = Vec::with_capacity(3 * h * w);
    for slice in 0..3 {
        let lab = if slice == 0 || j == 0 {
            label.clone()
        } else {
            let dy = rng.random_range(-(j as i64)..=j as i64) as isize;
            let dx = rng.random_range(-(j as i64)..=j as i64) as isize;
            shifted(label, dy, dx)
        };
        for y in 0..h {
            for x in 0..w {
                let bias = profile.bias_amplitude
                    * (std::f64::consts::TAU * (ky * y as f64 / h as f64 + kx * x as f64 / w as f64) + phase).sin();
                let noise = if profile.noise_std > 0.0 {
                    profile.noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push(profile.intensity(lab.get(y, x)) + bias + noise);
            }
        }
    }
    normalize(&mut data);
    Ok(Sample {
        image: Tensor::new([3, h, w], data)?,
        label: label.clone(),
        modality,
    })
}

/// Zero mean, unit variance (population); constant inputs are only centered.
pub fn normalize(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in data.iter_mut() {
        *v -= mean;
        if sd > 0.0 {
            *v /= sd;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// 70/10/20 split sizes for `n` samples.
pub fn split_counts(n: usize) -> [usize; 3] {
    let train = (n as f64 * 0.7).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn split_of(index: usize, counts: [usize; 3]) -> Split {
    if index < counts[0] {
        Split::Train
    } else if index < counts[0] + counts[1] {
        Split::Val
    } else {
        Split::Test
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Scene seed of sample `index` of `modality`. Each modality owns a block of
/// 2³² consecutive seeds.
pub fn scene_seed(master: u64, modality: usize, index: usize) -> u64 {
    splitmix(master)
        .wrapping_add((modality as u64) << 32)
        .wrapping_add(index as u64)
}

pub fn label_hash(label: &LabelMap) -> String {
    let mut h = Sha256::new();
    h.update((label.height as u64).to_le_bytes());
    h.update((label.width as u64).to_le_bytes());
    h.update(&label.data);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub profiles: Vec<AppearanceProfile>,
    /// Samples per modality.
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl DatasetSpec {
    /// Two modalities, `n` samples each, on the default 64×64 four-class scene.
    pub fn bimodal(n: usize, seed: u64) -> Self {
        DatasetSpec {
            scene: SceneSpec::default(),
            profiles: vec![AppearanceProfile::modality_a(4), AppearanceProfile::modality_b(4)],
            counts: vec![n, n],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.profiles.len() != self.counts.len() || self.profiles.is_empty() {
            return Err(Error::config("one sample count per appearance profile required"));
        }
        for p in &self.profiles {
            if p.class_means.len() != self.scene.classes {
                return Err(Error::config(format!(
                    "profile {} has {} class intensities for {} classes",
                    p.name,
                    p.class_means.len(),
                    self.scene.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub modality: usize,
    pub split: Split,
    /// Position within the modality's split.
    pub index: usize,
    pub seed: u64,
    pub label_hash: String,
    pub sample: Sample,
}

impl SampleRecord {
    pub fn relative_path(&self, profiles: &[AppearanceProfile]) -> PathBuf {
        PathBuf::from(&profiles[self.modality].name)
            .join(self.split.as_str())
            .join(format!("{:04}.tnsr", self.index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn modality_names(&self) -> Vec<String> {
        self.spec.profiles.iter().map(|p| p.name.clone()).collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.spec.profiles.iter().position(|p| p.name == name)
    }

    pub fn samples(&self, modality: usize, split: Split) -> Vec<&Sample> {
        self.records
            .iter()
            .filter(|r| r.modality == modality && r.split == split)
            .map(|r| &r.sample)
            .collect()
    }
}

/// Generates every sample in memory.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut seen: Vec<HashSet<String>> = vec![HashSet::new(); spec.counts.len()];
    for (m, &n) in spec.counts.iter().enumerate() {
        let counts = split_counts(n);
        let mut meeting = 0usize;
        for i in 0..n {
            let seed = scene_seed(spec.seed, m, i);
            let label = generate_scene(&spec.scene, seed)?;
            let balanced = (1..spec.scene.classes).all(|c| label.fraction(c as u8) >= spec.scene.min_fraction);
            meeting += balanced as usize;
            let hash = label_hash(&label);
            seen[m].insert(hash.clone());
            let sample = render_modality(&label, &spec.profiles[m], m, seed)?;
            let split = split_of(i, counts);
            let index = match split {
                Split::Train => i,
                Split::Val => i - counts[0],
                Split::Test => i - counts[0] - counts[1],
            };
            records.push(SampleRecord {
                modality: m,
                split,
                index,
                seed,
                label_hash: hash,
                sample,
            });
        }
        if n > 0 && (meeting as f64) < spec.scene.balance_rate * n as f64 {
            return Err(Error::Data(format!(
                "class balance: only {meeting}/{n} samples of modality {} cover every class",
                spec.profiles[m].name
            )));
        }
    }
    for a in 0..seen.len() {
        for b in a + 1..seen.len() {
            if let Some(h) = seen[a].intersection(&seen[b]).next() {
                return Err(Error::Data(format!("label map {h} appears in two modalities")));
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        records,
    })
}

pub const MANIFEST: &str = "manifest.txt";
const FORMAT: &str = "mmseg-synth/1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn manifest_text(ds: &Dataset) -> String {
    let s = &ds.spec;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(": ");
        out.push_str(&v);
        out.push('\n');
    };
    kv("format", FORMAT.into());
    kv("seed", s.seed.to_string());
    kv("height", s.scene.height.to_string());
    kv("width", s.scene.width.to_string());
    kv("classes", s.scene.classes.to_string());
    kv("counts", join(&s.counts));
    kv("scene", toml::to_string(&s.scene).unwrap_or_default().trim_end().replace('\n', "; "));
    for p in &s.profiles {
        let n = &p.name;
        kv(&format!("profile.{n}.class_means"), join(&p.class_means));
        kv(&format!("profile.{n}.intensities"), join(&(0..p.class_means.len()).map(|c| p.intensity(c as u8)).collect::<Vec<_>>()));
        kv(&format!("profile.{n}.noise_std"), p.noise_std.to_string());
        kv(&format!("profile.{n}.bias_amplitude"), p.bias_amplitude.to_string());
        kv(&format!("profile.{n}.invert"), p.invert.to_string());
        kv(&format!("profile.{n}.slice_jitter"), p.slice_jitter.to_string());
    }
    for r in &ds.records {
        out.push('\n');
        out.push_str(&format!("modality: {}\n", s.profiles[r.modality].name));
        out.push_str(&format!("split: {}\n", r.split.as_str()));
        out.push_str(&format!("index: {}\n", r.index));
        out.push_str(&format!("seed: {}\n", r.seed));
        out.push_str(&format!("file: {}\n", r.relative_path(&s.profiles).display()));
        out.push_str(&format!("label_sha256: {}\n", r.label_hash));
    }
    out
}

/// Writes the dataset under `dir`: one file per sample (image record then
/// label record) and a manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for r in &ds.records {
        let path = dir.join(r.relative_path(&ds.spec.profiles));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let wrap = |e: mmseg_autodiff::TensorError| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        };
        tio::write_tensor(&mut w, &r.sample.image, Dtype::F64).map_err(wrap)?;
        tio::write_bytes(&mut w, &[r.sample.label.height, r.sample.label.width], &r.sample.label.data).map_err(wrap)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest_text(ds)).map_err(|e| Error::io(&path, e))
}

/// Generates and writes in one step.
pub fn make_unpaired_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Dataset> {
    let ds = generate_dataset(spec)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}

type Record = Vec<(String, String)>;

fn parse_records(text: &str) -> Vec<Record> {
    let mut out = Vec::new();
    let mut cur = Record::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if let Some((k, v)) = line.split_once(':') {
            cur.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn field<'a>(rec: &'a Record, key: &str, path: &Path) -> Result<&'a str> {
    rec.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing key `{key}`"),
        })
}

fn parse_num<T: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<T> {
    v.parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("bad value `{v}` for `{key}`"),
    })
}

fn parse_list<T: std::str::FromStr>(v: &str, key: &str, path: &Path) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(x.trim(), key, path)).collect()
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let records = parse_records(&text);
    let header = records.first().ok_or_else(|| Error::Format {
        path: mpath.clone(),
        msg: "empty manifest".into(),
    })?;
    if field(header, "format", &mpath)? != FORMAT {
        return Err(Error::Format {
            path: mpath,
            msg: "unsupported manifest format".into(),
        });
    }
    let scene_text = field(header, "scene", &mpath)?.replace("; ", "\n");
    let scene: SceneSpec = toml::from_str(&scene_text).map_err(|e| Error::Format {
        path: mpath.clone(),
        msg: format!("scene: {e}"),
    })?;
    let counts: Vec<usize> = parse_list(field(header, "counts", &mpath)?, "counts", &mpath)?;
    let seed: u64 = parse_num(field(header, "seed", &mpath)?, "seed", &mpath)?;
    let mut profiles = Vec::new();
    for (k, _) in header.iter().filter(|(k, _)| k.ends_with(".class_means")) {
        let name = k
            .strip_prefix("profile.")
            .and_then(|s| s.strip_suffix(".class_means"))
            .unwrap_or_default()
            .to_string();
        let get = |f: &str| field(header, &format!("profile.{name}.{f}"), &mpath);
        profiles.push(AppearanceProfile {
            class_means: parse_list(get("class_means")?, "class_means", &mpath)?,
            noise_std: parse_num(get("noise_std")?, "noise_std", &mpath)?,
            bias_amplitude: parse_num(get("bias_amplitude")?, "bias_amplitude", &mpath)?,
            invert: parse_num(get("invert")?, "invert", &mpath)?,
            slice_jitter: parse_num(get("slice_jitter")?, "slice_jitter", &mpath)?,
            name,
        });
    }
    let spec = DatasetSpec {
        scene,
        profiles,
        counts,
        seed,
    };
    spec.validate()?;

    let mut out = Vec::new();
    for rec in &records[1..] {
        let mname = field(rec, "modality", &mpath)?;
        let modality = spec
            .profiles
            .iter()
            .position(|p| p.name == mname)
            .ok_or_else(|| Error::Format {
                path: mpath.clone(),
                msg: format!("unknown modality {mname}"),
            })?;
        let split = Split::parse(field(rec, "split", &mpath)?).ok_or_else(|| Error::Format {
            path: mpath.clone(),
            msg: "bad split".into(),
        })?;
        let file = dir.join(field(rec, "file", &mpath)?);
        let f = File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut r = BufReader::new(f);
        let wrap = |e: mmseg_autodiff::TensorError| Error::Format {
            path: file.clone(),
            msg: e.to_string(),
        };
        let image = tio::read_tensor(&mut r).map_err(wrap)?;
        let (shape, data) = tio::read_bytes(&mut r).map_err(wrap)?;
        if shape.len() != 2 || image.shape() != [3, shape[0], shape[1]] {
            return Err(Error::Format {
                path: file,
                msg: format!("image {:?} vs label {shape:?}", image.shape()),
            });
        }
        let label = LabelMap::new(shape[0], shape[1], data)?;
        let hash = label_hash(&label);
        if hash != field(rec, "label_sha256", &mpath)? {
            return Err(Error::Format {
                path: file,
                msg: "label hash does not match manifest".into(),
            });
        }
        out.push(SampleRecord {
            modality,
            split,
            index: parse_num(field(rec, "index", &mpath)?, "index", &mpath)?,
            seed: parse_num(field(rec, "seed", &mpath)?, "seed", &mpath)?,
            label_hash: hash,
            sample: Sample { image, label, modality },
        });
    }
    Ok(Dataset { spec, records: out })
}
