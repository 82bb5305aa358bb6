//! Procedural street scenes on a cylindrical world, rendered through a
//! pinhole camera (labeled source domain) and as equirectangular panoramas
//! (target domain) with a color-style gap between the two.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use numkit::Rng;
use serde::{Deserialize, Serialize};

use crate::erpgeo::{erp_to_dir, pinhole_to_dir, wrap_longitude, SphereDir};
use crate::error::{DatrError, Result};

pub const CLASS_NAMES: [&str; 5] = ["sky", "ground", "building", "pole", "vehicle"];
pub const SKY: u8 = 0;
pub const GROUND: u8 = 1;
pub const BUILDING: u8 = 2;
pub const POLE: u8 = 3;
pub const VEHICLE: u8 = 4;

/// Camera height above the ground plane (world units).
pub const CAMERA_HEIGHT: f64 = 1.6;
const MAX_SCENE_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Section of the cylinder of radius `depth` between two longitudes and
    /// two heights.
    Panel {
        lon_center: f64,
        lon_half: f64,
        y_bottom: f64,
        y_top: f64,
    },
    /// Angular disk on the view sphere.
    Cap { center: SphereDir, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    pub depth: f64,
    pub shape: Shape,
}

impl SceneObject {
    fn hits(&self, dir: SphereDir) -> bool {
        match self.shape {
            Shape::Panel {
                lon_center,
                lon_half,
                y_bottom,
                y_top,
            } => {
                if wrap_longitude(dir.longitude - lon_center).abs() > lon_half {
                    return false;
                }
                if dir.latitude.abs() >= FRAC_PI_2 - 1e-12 {
                    return false;
                }
                let y = self.depth * dir.latitude.tan();
                (y_bottom..=y_top).contains(&y)
            }
            Shape::Cap { center, radius } => center.angle_to(dir) <= radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub classes: usize,
    /// Sorted by increasing depth.
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn empty(classes: usize) -> Self {
        Self {
            seed: 0,
            classes,
            objects: Vec::new(),
        }
    }

    pub fn push(&mut self, obj: SceneObject) {
        self.objects.push(obj);
        self.objects.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    }

    /// Class of the frontmost surface along `dir`, and the index of the
    /// object that produced it.
    pub fn cast(&self, dir: SphereDir) -> (u8, Option<usize>) {
        for (i, o) in self.objects.iter().enumerate() {
            if o.hits(dir) {
                return (o.class, Some(i));
            }
        }
        if self.classes > 1 && dir.latitude < 0.0 {
            (GROUND, None)
        } else {
            (SKY, None)
        }
    }

    pub fn classify(&self, dir: SphereDir) -> u8 {
        self.cast(dir).0
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.uniform_range(lo, hi)
}

fn panel(rng: &mut Rng, class: u8, lon_center: f64, depth: (f64, f64), width: (f64, f64), top: (f64, f64)) -> SceneObject {
    let d = uniform(rng, depth.0, depth.1);
    let w = uniform(rng, width.0, width.1);
    SceneObject {
        class,
        depth: d,
        shape: Shape::Panel {
            lon_center: wrap_longitude(lon_center),
            lon_half: (w / 2.0 / d).min(PI),
            y_bottom: -CAMERA_HEIGHT,
            y_top: uniform(rng, top.0, top.1),
        },
    }
}

fn draw_scene(rng: &mut Rng, classes: usize, front_half: f64) -> SceneSpec {
    let mut scene = SceneSpec::empty(classes);
    let front = |rng: &mut Rng| uniform(rng, -front_half, front_half);
    let anywhere = |rng: &mut Rng| uniform(rng, -PI, PI);
    if classes > BUILDING as usize {
        let n = 4 + rng.below(4) as usize;
        for i in 0..n {
            let lon = if i == 0 { front(rng) } else { anywhere(rng) };
            scene.push(panel(rng, BUILDING, lon, (14.0, 30.0), (10.0, 40.0), (4.0, 22.0)));
        }
    }
    if classes > POLE as usize {
        let n = 2 + rng.below(3) as usize;
        for i in 0..n {
            let lon = if i == 0 { front(rng) * 0.8 } else { anywhere(rng) };
            scene.push(panel(rng, POLE, lon, (3.0, 8.0), (0.25, 0.45), (3.0, 7.0)));
        }
    }
    if classes > VEHICLE as usize {
        let n = 2 + rng.below(3) as usize;
        for i in 0..n {
            let lon = if i == 0 { front(rng) * 0.7 } else { anywhere(rng) };
            scene.push(panel(rng, VEHICLE, lon, (5.0, 12.0), (2.0, 4.5), (-0.2, 0.2)));
        }
    }
    scene
}

/// Random street scene with at least one object of every class in front of
/// the pinhole camera; layouts where a class is not visible at all in a
/// coarse pinhole render are redrawn.
pub fn sample_scene(rng: &mut Rng, classes: usize, hfov: f64) -> Result<SceneSpec> {
    if !(2..=CLASS_NAMES.len()).contains(&classes) {
        return Err(DatrError::Config(format!(
            "synthetic scenes support 2..={} classes, got {classes}",
            CLASS_NAMES.len()
        )));
    }
    let seed = rng.next_u64();
    let mut local = Rng::new(seed);
    let mut scene = draw_scene(&mut local, classes, hfov / 2.0 * 0.8);
    for _ in 1..MAX_SCENE_TRIES {
        let (_, labels) = render_labels_pinhole(&scene, 32, 32, hfov)?;
        if (0..classes as u8).all(|c| labels.contains(&c)) {
            break;
        }
        scene = draw_scene(&mut local, classes, hfov / 2.0 * 0.8);
    }
    scene.seed = seed;
    Ok(scene)
}

/// Rendering appearance of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub means: [[f64; 3]; 5],
    pub object_jitter: f64,
    pub pixel_noise: f64,
    pub gain_jitter: f64,
    pub texture: f64,
}

impl Style {
    pub fn source() -> Self {
        Self {
            means: [
                [0.55, 0.70, 0.92],
                [0.38, 0.36, 0.34],
                [0.62, 0.50, 0.40],
                [0.85, 0.80, 0.25],
                [0.75, 0.15, 0.15],
            ],
            object_jitter: 0.05,
            pixel_noise: 0.02,
            gain_jitter: 0.05,
            texture: 0.12,
        }
    }

    /// The source palette seen through a different camera response: lower
    /// contrast, a warm cast, more sensor noise and stronger texture.
    pub fn target() -> Self {
        let src = Self::source();
        let tint = [0.03, 0.0, -0.03];
        let means = src.means.map(|m| std::array::from_fn(|c| 0.85 * m[c] + 0.07 + tint[c]));
        Self {
            means,
            object_jitter: 0.06,
            pixel_noise: 0.035,
            gain_jitter: 0.07,
            texture: 0.16,
        }
    }
}

/// Channels-last RGB image in `[0, 1]` with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

fn surface_texture(class: u8, dir: SphereDir, depth: f64) -> f64 {
    match class {
        BUILDING => {
            // window grid in world units on the facade
            let y = depth * dir.latitude.tan();
            let x = depth * dir.longitude;
            let wy = (y / 1.6).rem_euclid(1.0);
            let wx = (x / 2.0).rem_euclid(1.0);
            if wy > 0.45 && wy < 0.85 && wx > 0.3 && wx < 0.75 {
                -1.0
            } else {
                0.3
            }
        }
        GROUND => {
            let dist = CAMERA_HEIGHT / (-dir.latitude).tan().max(1e-3);
            ((dist * 0.8).sin() * 0.5).clamp(-0.5, 0.5)
        }
        SKY => dir.latitude.max(0.0) * 0.8 - 0.2,
        VEHICLE => {
            let y = depth * dir.latitude.tan();
            if y < -1.1 {
                -1.5
            } else if y > -0.3 {
                -0.5
            } else {
                0.4
            }
        }
        _ => 0.0,
    }
}

fn render<F>(scene: &SceneSpec, height: usize, width: usize, style: &Style, rng: &mut Rng, dir_of: F) -> Result<Sample>
where
    F: Fn(usize, usize) -> Result<SphereDir>,
{
    let gain = 1.0 + rng.normal() * style.gain_jitter;
    let object_colors: Vec<[f64; 3]> = scene
        .objects
        .iter()
        .map(|o| {
            let m = style.means[o.class as usize];
            let j = rng.normal() * style.object_jitter;
            [m[0] + j, m[1] + j, m[2] + j]
        })
        .collect();
    let mut image = Vec::with_capacity(height * width * 3);
    let mut labels = Vec::with_capacity(height * width);
    for v in 0..height {
        for u in 0..width {
            let dir = dir_of(u, v)?;
            let (class, obj) = scene.cast(dir);
            let (base, depth) = match obj {
                Some(i) => (object_colors[i], scene.objects[i].depth),
                None => (style.means[class as usize], 0.0),
            };
            let tex = surface_texture(class, dir, depth) * style.texture;
            for b in base {
                let val = (b + tex) * gain + rng.normal() * style.pixel_noise;
                image.push(val.clamp(0.0, 1.0) as f32);
            }
            labels.push(class);
        }
    }
    Ok(Sample {
        height,
        width,
        image,
        labels,
    })
}

pub fn render_pinhole(scene: &SceneSpec, width: usize, height: usize, hfov: f64, style: &Style, rng: &mut Rng) -> Result<Sample> {
    render(scene, height, width, style, rng, |u, v| {
        pinhole_to_dir(u as f64, v as f64, width, height, hfov)
    })
}

pub fn render_erp(scene: &SceneSpec, width: usize, height: usize, style: &Style, rng: &mut Rng) -> Result<Sample> {
    if width != 2 * height {
        return Err(DatrError::Config(format!("ERP size {width}x{height} must have a 2:1 aspect")));
    }
    render(scene, height, width, style, rng, |u, v| erp_to_dir(u as f64, v as f64, width, height))
}

/// Label map of a pinhole view without color synthesis.
pub fn render_labels_pinhole(scene: &SceneSpec, width: usize, height: usize, hfov: f64) -> Result<(usize, Vec<u8>)> {
    let mut labels = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            labels.push(scene.classify(pinhole_to_dir(u as f64, v as f64, width, height, hfov)?));
        }
    }
    Ok((width, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub scene: SceneSpec,
    pub pinhole: Sample,
    pub erp: Sample,
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub classes: usize,
    pub pinhole_size: [usize; 2],
    pub erp_size: [usize; 2],
    pub hfov_deg: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 5,
            pinhole_size: [128, 128],
            erp_size: [128, 256],
            hfov_deg: 90.0,
            n_train: 128,
            n_val: 32,
        }
    }
}

impl GenConfig {
    pub fn hfov(&self) -> f64 {
        self.hfov_deg.to_radians()
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(DatrError::Config(format!(
                "classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(DatrError::Config(format!("hfov {} must be in (0, 180) degrees", self.hfov_deg)));
        }
        let [eh, ew] = self.erp_size;
        if ew != 2 * eh || eh == 0 {
            return Err(DatrError::Config(format!("ERP size {eh}x{ew} must be H x 2H")));
        }
        if self.pinhole_size.contains(&0) {
            return Err(DatrError::Config("pinhole size must be positive".into()));
        }
        Ok(())
    }
}

/// Split name and its seed offset so splits never share scenes.
fn split_stream(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1,
        other => 2 + other.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)),
    }
}

/// Pair `index` of `split`; a pure function of the configuration.
pub fn generate_pair(cfg: &GenConfig, split: &str, index: usize) -> Result<SamplePair> {
    let base = Rng::derived(cfg.seed, split_stream(split)).next_u64();
    let mut scene_rng = Rng::derived(base, 3 * index as u64);
    let scene = sample_scene(&mut scene_rng, cfg.classes, cfg.hfov())?;
    let [ph, pw] = cfg.pinhole_size;
    let [eh, ew] = cfg.erp_size;
    let pinhole = render_pinhole(&scene, pw, ph, cfg.hfov(), &Style::source(), &mut Rng::derived(base, 3 * index as u64 + 1))?;
    let erp = render_erp(&scene, ew, eh, &Style::target(), &mut Rng::derived(base, 3 * index as u64 + 2))?;
    Ok(SamplePair { scene, pinhole, erp })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, s: &Sample) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    buf.extend(s.image.iter().map(|&v| quantize(v)));
    fs::write(path, buf).map_err(|e| DatrError::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(labels);
    fs::write(path, buf).map_err(|e| DatrError::io(path, e))
}

/// Parse a binary PNM header, returning `(magic, width, height, maxval, payload offset)`.
fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DatrError::Format(format!("{}: truncated PNM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DatrError::Format(format!("{}: bad PNM header field {s:?}", path.display())))
    };
    Ok((fields[0].clone(), num(&fields[1])?, num(&fields[2])?, num(&fields[3])?, pos))
}

fn read_pnm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| DatrError::io(path, e))?;
    let (m, w, h, maxval, off) = parse_pnm(path, &bytes)?;
    if m != magic || maxval != 255 {
        return Err(DatrError::Format(format!(
            "{}: expected {magic} with maxval 255, found {m} / {maxval}",
            path.display()
        )));
    }
    let need = w * h * channels;
    if bytes.len() < off + need {
        return Err(DatrError::Format(format!("{}: payload shorter than {w}x{h}x{channels}", path.display())));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

/// Image as `(width, height, [h * w * 3] values in [0, 1])`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, raw) = read_pnm(path, "P6", 3)?;
    Ok((w, h, raw.into_iter().map(|b| b as f32 / 255.0).collect()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P5", 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub classes: usize,
    pub pinhole_size: [usize; 2],
    pub erp_size: [usize; 2],
    pub hfov_deg: f64,
    pub seed: u64,
    pub splits: Vec<SplitInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub count: usize,
    pub target_labels: bool,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| DatrError::io(p, e))
}

pub fn stem(i: usize) -> String {
    format!("{i:04}")
}

/// Write one split. Target labels are written only when `target_labels`.
pub fn write_dataset(pairs: &[SamplePair], dir: &Path, split: &str, target_labels: bool) -> Result<SplitInfo> {
    let root = dir.join(split);
    for domain in ["source", "target"] {
        create_dir(&root.join(domain).join("images"))?;
        if domain == "source" || target_labels {
            create_dir(&root.join(domain).join("labels"))?;
        }
    }
    let mut index = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let s = stem(i);
        write_ppm(&root.join("source/images").join(format!("{s}.ppm")), &pair.pinhole)?;
        write_pgm(
            &root.join("source/labels").join(format!("{s}.pgm")),
            pair.pinhole.width,
            pair.pinhole.height,
            &pair.pinhole.labels,
        )?;
        write_ppm(&root.join("target/images").join(format!("{s}.ppm")), &pair.erp)?;
        if target_labels {
            write_pgm(
                &root.join("target/labels").join(format!("{s}.pgm")),
                pair.erp.width,
                pair.erp.height,
                &pair.erp.labels,
            )?;
        }
        index.push_str(&s);
        index.push('\n');
    }
    let ip = root.join("index.txt");
    fs::write(&ip, index).map_err(|e| DatrError::io(&ip, e))?;
    Ok(SplitInfo {
        name: split.to_string(),
        count: pairs.len(),
        target_labels,
    })
}

/// Generate and write the `train` (unlabeled target) and `val` (labeled
/// target) splits plus `meta.json`.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<Meta> {
    cfg.validate()?;
    create_dir(dir)?;
    let mut splits = Vec::new();
    for (split, n, labeled) in [("train", cfg.n_train, false), ("val", cfg.n_val, true)] {
        let pairs = (0..n).map(|i| generate_pair(cfg, split, i)).collect::<Result<Vec<_>>>()?;
        splits.push(write_dataset(&pairs, dir, split, labeled)?);
    }
    let meta = Meta {
        classes: cfg.classes,
        pinhole_size: cfg.pinhole_size,
        erp_size: cfg.erp_size,
        hfov_deg: cfg.hfov_deg,
        seed: cfg.seed,
        splits,
    };
    write_meta(dir, &meta)?;
    Ok(meta)
}

pub fn write_meta(dir: &Path, meta: &Meta) -> Result<()> {
    let p = dir.join("meta.json");
    let mut text = serde_json::to_string_pretty(meta).map_err(|e| DatrError::Format(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(&p).map_err(|e| DatrError::io(&p, e))?;
    f.write_all(text.as_bytes()).map_err(|e| DatrError::io(&p, e))
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).map_err(|e| DatrError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| DatrError::Format(format!("{}: {e}", p.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Source,
    Target,
}

impl DomainKind {
    fn dir(self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Target => "target",
        }
    }
}

/// In-memory split of one domain. `labels` is `None` when the split ships
/// no labels for that domain.
#[derive(Debug, Clone)]
pub struct DomainSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Option<Vec<Vec<u8>>>,
}

impl DomainSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Collect same-sized samples; labels are kept when `labeled`.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>, labeled: bool) -> Result<Self> {
        let mut it = samples.into_iter().peekable();
        let (height, width) = match it.peek() {
            Some(s) => (s.height, s.width),
            None => return Err(DatrError::Config("no samples".into())),
        };
        let mut set = Self { height, width, images: Vec::new(), labels: labeled.then(Vec::new) };
        for s in it {
            if (s.height, s.width) != (height, width) {
                return Err(DatrError::Config(format!(
                    "sample {}x{} differs from {height}x{width}",
                    s.height, s.width
                )));
            }
            set.images.push(s.image.clone());
            if let Some(l) = set.labels.as_mut() {
                l.push(s.labels.clone());
            }
        }
        Ok(set)
    }
}

fn read_index(root: &Path) -> Result<Vec<String>> {
    let p = root.join("index.txt");
    let text = fs::read_to_string(&p).map_err(|e| DatrError::io(&p, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn load_domain(dir: &Path, split: &str, domain: DomainKind) -> Result<DomainSet> {
    let root = dir.join(split);
    let stems = read_index(&root)?;
    let base: PathBuf = root.join(domain.dir());
    let label_dir = base.join("labels");
    let has_labels = label_dir.is_dir();
    let mut images = Vec::with_capacity(stems.len());
    let mut labels = Vec::with_capacity(stems.len());
    let mut size = None;
    for s in &stems {
        let (w, h, img) = read_ppm(&base.join("images").join(format!("{s}.ppm")))?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(DatrError::Format(format!("{s}: image size differs within {}", base.display())));
        }
        images.push(img);
        if has_labels {
            let (lw, lh, lab) = read_pgm(&label_dir.join(format!("{s}.pgm")))?;
            if (lh, lw) != (h, w) {
                return Err(DatrError::Format(format!("{s}: label size {lw}x{lh} != image {w}x{h}")));
            }
            labels.push(lab);
        }
    }
    let (height, width) = size.unwrap_or((0, 0));
    Ok(DomainSet {
        height,
        width,
        images,
        labels: has_labels.then_some(labels),
    })
}

/// Angular extent of a [`Shape::Cap`] in longitude at its center row.
pub fn cap_longitude_span(center_lat: f64, radius: f64) -> f64 {
    // half-width satisfies cos(r) = sin^2(lat) + cos^2(lat) cos(dlon)
    let c = center_lat.cos();
    let cos_d = ((radius.cos() - center_lat.sin().powi(2)) / (c * c)).clamp(-1.0, 1.0);
    2.0 * cos_d.acos()
}

/// Longitude covered by `pixels` ERP columns of a `width`-wide panorama.
pub fn columns_to_longitude(pixels: usize, width: usize) -> f64 {
    pixels as f64 * TAU / width as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_sky_and_ground() {
        let scene = SceneSpec::empty(2);
        assert_eq!(scene.classify(SphereDir::new(0.3, 0.2)), SKY);
        assert_eq!(scene.classify(SphereDir::new(0.3, -0.2)), GROUND);
    }

    #[test]
    fn nearer_object_wins() {
        let mut scene = SceneSpec::empty(5);
        let p = |class, depth| SceneObject {
            class,
            depth,
            shape: Shape::Panel {
                lon_center: 0.0,
                lon_half: 0.5,
                y_bottom: -CAMERA_HEIGHT,
                y_top: 100.0,
            },
        };
        scene.push(p(BUILDING, 20.0));
        scene.push(p(POLE, 5.0));
        assert_eq!(scene.classify(SphereDir::new(0.0, 0.1)), POLE);
    }

    #[test]
    fn same_seed_same_scene() {
        let a = sample_scene(&mut Rng::new(5), 5, FRAC_PI_2).unwrap();
        let b = sample_scene(&mut Rng::new(5), 5, FRAC_PI_2).unwrap();
        assert_eq!(a, b);
        assert!(sample_scene(&mut Rng::new(5), 1, FRAC_PI_2).is_err());
    }

    #[test]
    fn cap_span_grows_with_latitude() {
        let r = 0.05;
        let eq = cap_longitude_span(0.0, r);
        let hi = cap_longitude_span(60f64.to_radians(), r);
        assert!((eq - 2.0 * r).abs() < 1e-12);
        assert!((hi / eq - 2.0).abs() < 0.01);
    }

    #[test]
    fn pnm_header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n# c\n2 1\n255\n\x01\x02").unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (2, 1, vec![1, 2]));
        fs::write(&p, b"P5\n2 1\n255\n\x01").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
