//! Deterministic synthetic scene generator: attribute-bearing raster
//! images, oracle teacher annotations with controlled omission noise, and
//! behavior-conditioned trajectories.
//!
//! Every attribute value owns a distinct color signature in a fixed image
//! region, so a small fixed detector recovers the full attribute set from
//! pixels alone. That makes the distillation task learnable by
//! construction and gives evaluation an identifiability ceiling.
//! Coordinate histories are drawn before the behavior is consulted, so
//! waiting and crossing scenes with the same seed share bit-identical
//! histories and only the image carries the separating signal.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::Annotation;
use crate::rng::{categorical, normal, uniform, SeedKey};

// ── attributes ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PedestrianType {
    Adult,
    Child,
    Elderly,
    Worker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    Crossing,
    Waiting,
    Standing,
    Walking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CarriedObject {
    Umbrella,
    Dog,
    Stroller,
    Phone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Crosswalk,
    Sidewalk,
    Road,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lighting {
    Day,
    Night,
}

impl PedestrianType {
    pub const ALL: [PedestrianType; 4] = [
        PedestrianType::Adult,
        PedestrianType::Child,
        PedestrianType::Elderly,
        PedestrianType::Worker,
    ];

    pub fn word(self) -> &'static str {
        match self {
            PedestrianType::Adult => "adult",
            PedestrianType::Child => "child",
            PedestrianType::Elderly => "elderly",
            PedestrianType::Worker => "worker",
        }
    }
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [
        Behavior::Crossing,
        Behavior::Waiting,
        Behavior::Standing,
        Behavior::Walking,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Behavior::Crossing => "crossing",
            Behavior::Waiting => "waiting",
            Behavior::Standing => "standing",
            Behavior::Walking => "walking",
        }
    }
}

impl CarriedObject {
    pub const ALL: [CarriedObject; 4] = [
        CarriedObject::Umbrella,
        CarriedObject::Dog,
        CarriedObject::Stroller,
        CarriedObject::Phone,
    ];

    pub fn word(self) -> &'static str {
        match self {
            CarriedObject::Umbrella => "umbrella",
            CarriedObject::Dog => "dog",
            CarriedObject::Stroller => "stroller",
            CarriedObject::Phone => "phone",
        }
    }
}

impl Surface {
    pub const ALL: [Surface; 3] = [Surface::Crosswalk, Surface::Sidewalk, Surface::Road];

    pub fn word(self) -> &'static str {
        match self {
            Surface::Crosswalk => "crosswalk",
            Surface::Sidewalk => "sidewalk",
            Surface::Road => "road",
        }
    }
}

/// Ground-truth attribute set of one scene, mirroring the five label
/// families of the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub pedestrian_type: PedestrianType,
    pub behavior: Behavior,
    pub carried_object: Option<CarriedObject>,
    pub surface: Surface,
    pub lighting: Lighting,
}

impl AttributeSet {
    /// The words the oracle teacher can mention for this scene. Daylight is
    /// unremarkable and never reported (the teacher reports what requires
    /// attention), so `Day` contributes no word.
    pub fn annotation_words(&self) -> Vec<&'static str> {
        let mut words = vec![self.pedestrian_type.word(), self.behavior.word()];
        words.push(self.surface.word());
        if let Some(obj) = self.carried_object {
            words.push(obj.word());
        }
        if self.lighting == Lighting::Night {
            words.push("night");
        }
        words
    }
}

// ── generation parameters ───────────────────────────────────────────

/// Attribute marginals plus render settings. Probability tables must be
/// valid distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub type_probs: [f64; 4],
    pub behavior_probs: [f64; 4],
    /// Probability that the pedestrian carries anything at all.
    pub carried_present: f64,
    pub carried_probs: [f64; 4],
    pub surface_probs: [f64; 3],
    pub night_prob: f64,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            type_probs: [0.25; 4],
            behavior_probs: [0.25; 4],
            carried_present: 0.5,
            carried_probs: [0.25; 4],
            surface_probs: [1.0 / 3.0; 3],
            night_prob: 0.25,
            noise_sigma: 0.02,
            height: 64,
            width: 64,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let check_table = |name: &str, t: &[f64]| -> Result<()> {
            if t.iter().any(|&p| p < 0.0) || (t.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "{name} is not a probability table: {t:?}"
                )));
            }
            Ok(())
        };
        check_table("type_probs", &self.type_probs)?;
        check_table("behavior_probs", &self.behavior_probs)?;
        check_table("carried_probs", &self.carried_probs)?;
        check_table("surface_probs", &self.surface_probs)?;
        for (name, p) in [("carried_present", self.carried_present), ("night_prob", self.night_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0,1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig("render size must be at least 16x16".into()));
        }
        Ok(())
    }

    /// Stable short hash of the parameter set, used in dataset manifests.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("params serialize");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 12)
    }
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

// ── scene ───────────────────────────────────────────────────────────

/// Rendered scene: 3xHxW floats in \[0,1\] plus the attributes that
/// produced it. Re-rendering from (seed, params) is bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub truth: AttributeSet,
    pub seed: u64,
}

impl Scene {
    pub fn image_id(&self) -> String {
        format!("scene-{}", self.seed)
    }

    /// Pixel (c, y, x) accessor into the CHW buffer.
    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.image[(c * self.height + y) * self.width + x]
    }

    /// Image as HWC rows (one row per pixel), the layout the encoders eat.
    pub fn to_rows(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut rows = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rows[(y * w + x) * 3 + c] = self.pixel(c, y, x);
                }
            }
        }
        rows
    }

    pub fn mean_intensity(&self) -> f64 {
        self.image.iter().sum::<f64>() / self.image.len() as f64
    }
}

const NIGHT_SCALE: f64 = 0.45;
/// Above this strip brightness a scene reads as daylight. Fixed at render
/// time: day strips sit at 0.85, night strips at 0.85 * NIGHT_SCALE.
const LIGHT_STRIP_THRESHOLD: f64 = 0.6;
/// Day scenes always average above this, night scenes below it.
pub const NIGHT_MEAN_THRESHOLD: f64 = 0.37;

const BG: [f64; 3] = [0.5, 0.5, 0.5];
const STRIP: [f64; 3] = [0.85, 0.85, 0.85];

fn type_color(t: PedestrianType) -> [f64; 3] {
    match t {
        PedestrianType::Adult => [0.95, 0.05, 0.05],
        PedestrianType::Child => [0.05, 0.95, 0.05],
        PedestrianType::Elderly => [0.05, 0.05, 0.95],
        PedestrianType::Worker => [0.95, 0.95, 0.05],
    }
}

fn behavior_color(b: Behavior) -> [f64; 3] {
    match b {
        Behavior::Crossing => [0.95, 0.05, 0.95],
        Behavior::Waiting => [0.05, 0.95, 0.95],
        Behavior::Standing => [0.95, 0.5, 0.05],
        Behavior::Walking => [0.05, 0.5, 0.95],
    }
}

fn carried_color(c: CarriedObject) -> [f64; 3] {
    match c {
        CarriedObject::Umbrella => [0.5, 0.05, 0.05],
        CarriedObject::Dog => [0.05, 0.5, 0.05],
        CarriedObject::Stroller => [0.5, 0.05, 0.95],
        CarriedObject::Phone => [0.95, 0.5, 0.95],
    }
}

fn surface_color(s: Surface) -> [f64; 3] {
    match s {
        Surface::Crosswalk => [0.95, 0.95, 0.95],
        Surface::Sidewalk => [0.5, 0.95, 0.5],
        Surface::Road => [0.05, 0.05, 0.05],
    }
}

/// Fractional (y0, y1, x0, x1) regions so any render size keeps the layout.
const REGION_STRIP: [f64; 4] = [0.0, 0.09, 0.0, 1.0];
const REGION_TYPE: [f64; 4] = [0.19, 0.375, 0.0625, 0.25];
const REGION_BEHAVIOR: [f64; 4] = [0.19, 0.375, 0.40, 0.59];
const REGION_CARRIED: [f64; 4] = [0.19, 0.375, 0.75, 0.9375];
const REGION_SURFACE: [f64; 4] = [0.72, 0.90, 0.0625, 0.9375];

fn region_pixels(frac: [f64; 4], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let y0 = (frac[0] * h as f64).round() as usize;
    let y1 = ((frac[1] * h as f64).round() as usize).min(h);
    let x0 = (frac[2] * w as f64).round() as usize;
    let x1 = ((frac[3] * w as f64).round() as usize).min(w);
    (y0, y1, x0, x1)
}

/// Renders a scene with attributes sampled from the marginals and seeded
/// jitter (pedestrian blob offset, background noise).
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let key = SeedKey::new(seed);
    let mut attr_rng = key.stream("scene/attrs").rng();

    let pedestrian_type = PedestrianType::ALL[categorical(&mut attr_rng, &params.type_probs)];
    let behavior = Behavior::ALL[categorical(&mut attr_rng, &params.behavior_probs)];
    let carried_object = if uniform(&mut attr_rng, 0.0, 1.0) < params.carried_present {
        Some(CarriedObject::ALL[categorical(&mut attr_rng, &params.carried_probs)])
    } else {
        // keep the draw count fixed so downstream attributes do not shift
        let _ = categorical(&mut attr_rng, &params.carried_probs);
        None
    };
    let surface = Surface::ALL[categorical(&mut attr_rng, &params.surface_probs)];
    let lighting = if uniform(&mut attr_rng, 0.0, 1.0) < params.night_prob {
        Lighting::Night
    } else {
        Lighting::Day
    };
    let truth = AttributeSet {
        pedestrian_type,
        behavior,
        carried_object,
        surface,
        lighting,
    };

    let (h, w) = (params.height, params.width);
    let mut image = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for p in image[c * h * w..(c + 1) * h * w].iter_mut() {
            *p = BG[c];
        }
    }

    let paint = |frac: [f64; 4], color: [f64; 3], image: &mut [f64]| {
        let (y0, y1, x0, x1) = region_pixels(frac, h, w);
        for c in 0..3 {
            for y in y0..y1 {
                for x in x0..x1 {
                    image[(c * h + y) * w + x] = color[c];
                }
            }
        }
    };

    paint(REGION_STRIP, STRIP, &mut image);
    paint(REGION_TYPE, type_color(pedestrian_type), &mut image);
    paint(REGION_BEHAVIOR, behavior_color(behavior), &mut image);
    if let Some(obj) = carried_object {
        paint(REGION_CARRIED, carried_color(obj), &mut image);
    }
    paint(REGION_SURFACE, surface_color(surface), &mut image);

    // Decorative pedestrian blob at a jittered position, colored by type.
    let mut render_rng = key.stream("scene/render").rng();
    let cy = (0.47 + uniform(&mut render_rng, 0.0, 0.12)) * h as f64;
    let cx = (0.33 + uniform(&mut render_rng, 0.0, 0.30)) * w as f64;
    let radius = h as f64 / 14.0;
    let blob = type_color(pedestrian_type);
    let y_lo = (cy - radius).floor().max(0.0) as usize;
    let y_hi = ((cy + radius).ceil() as usize).min(h - 1);
    for y in y_lo..=y_hi {
        for x in (cx - radius).floor().max(0.0) as usize..=((cx + radius).ceil() as usize).min(w - 1) {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                for c in 0..3 {
                    image[(c * h + y) * w + x] = blob[c];
                }
            }
        }
    }

    for p in image.iter_mut() {
        *p = (*p + normal(&mut render_rng, params.noise_sigma)).clamp(0.0, 1.0);
    }
    if lighting == Lighting::Night {
        for p in image.iter_mut() {
            *p *= NIGHT_SCALE;
        }
    }

    Ok(Scene {
        image,
        height: h,
        width: w,
        truth,
        seed,
    })
}

// ── pixel-signature detector (identifiability oracle) ───────────────

fn region_mean(scene: &Scene, frac: [f64; 4]) -> [f64; 3] {
    let (y0, y1, x0, x1) = region_pixels(frac, scene.height, scene.width);
    let mut mean = [0.0; 3];
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    for c in 0..3 {
        for y in y0..y1 {
            for x in x0..x1 {
                mean[c] += scene.pixel(c, y, x);
            }
        }
        mean[c] /= n;
    }
    mean
}

fn nearest<T: Copy>(mean: [f64; 3], candidates: &[(T, [f64; 3])]) -> T {
    let mut best = candidates[0].0;
    let mut best_d = f64::INFINITY;
    for &(value, color) in candidates {
        let d: f64 = mean
            .iter()
            .zip(&color)
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        if d < best_d {
            best_d = d;
            best = value;
        }
    }
    best
}

/// Recovers the full attribute set from pixels using the fixed region
/// signatures. At default noise this is exact, which upper-bounds any
/// trained student on this data.
pub fn detect_attributes(scene: &Scene) -> AttributeSet {
    let strip = region_mean(scene, REGION_STRIP);
    let strip_brightness = (strip[0] + strip[1] + strip[2]) / 3.0;
    let lighting = if strip_brightness >= LIGHT_STRIP_THRESHOLD {
        Lighting::Day
    } else {
        Lighting::Night
    };
    let unscale = match lighting {
        Lighting::Day => 1.0,
        Lighting::Night => 1.0 / NIGHT_SCALE,
    };
    let mean_of = |frac| {
        let m = region_mean(scene, frac);
        [m[0] * unscale, m[1] * unscale, m[2] * unscale]
    };

    let types: Vec<_> = PedestrianType::ALL.iter().map(|&t| (t, type_color(t))).collect();
    let behaviors: Vec<_> = Behavior::ALL.iter().map(|&b| (b, behavior_color(b))).collect();
    let surfaces: Vec<_> = Surface::ALL.iter().map(|&s| (s, surface_color(s))).collect();
    let mut carried: Vec<(Option<CarriedObject>, [f64; 3])> = CarriedObject::ALL
        .iter()
        .map(|&o| (Some(o), carried_color(o)))
        .collect();
    carried.push((None, BG));

    AttributeSet {
        pedestrian_type: nearest(mean_of(REGION_TYPE), &types),
        behavior: nearest(mean_of(REGION_BEHAVIOR), &behaviors),
        carried_object: nearest(mean_of(REGION_CARRIED), &carried),
        surface: nearest(mean_of(REGION_SURFACE), &surfaces),
        lighting,
    }
}

// ── oracle teacher ──────────────────────────────────────────────────

/// Template annotation: pedestrian type and behavior always, each optional
/// attribute word independently kept with probability `1 - omit_prob`,
/// glued with stopword filler. Mirrors an autoregressive teacher that
/// reports the notable aspects and drops the rest.
pub fn teacher_annotate(scene: &Scene, omit_prob: f64, seed: u64) -> Annotation {
    assert!((0.0..=1.0).contains(&omit_prob), "omit_prob outside [0,1]");
    let mut rng = SeedKey::new(seed).stream("teacher/omit").rng();
    let truth = &scene.truth;

    let mut text = format!(
        "The {} is {}.",
        truth.pedestrian_type.word(),
        truth.behavior.word()
    );
    let keep = |rng: &mut rand_chacha::ChaCha12Rng| uniform(rng, 0.0, 1.0) >= omit_prob;
    if keep(&mut rng) {
        text.push_str(&format!(" They are on the {}.", truth.surface.word()));
    }
    let carried_kept = keep(&mut rng);
    if let (Some(obj), true) = (truth.carried_object, carried_kept) {
        text.push_str(&format!(" They have a {} with them.", obj.word()));
    }
    if truth.lighting == Lighting::Night && keep(&mut rng) {
        text.push_str(" It is night.");
    }
    Annotation::new(scene.image_id(), text)
}

// ── trajectories ────────────────────────────────────────────────────

pub const HISTORY_LEN: usize = 10;
pub const FUTURE_LEN: usize = 30;
pub const FRAME_DT: f64 = 0.1;
pub const TRAJ_NOISE_SIGMA: f64 = 0.02;
const CROSSING_SPEED: f64 = 1.2;
const WALKING_SPEED: f64 = 1.0;

/// 1 s coordinate history plus 3 s future at 10 Hz, tied to the scene that
/// produced it (re-renderable from the seed).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub history: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    pub scene_seed: u64,
}

/// History is near-stationary noise around the start point and is drawn
/// before the behavior is consulted: waiting and crossing scenes with the
/// same seed get bit-identical histories. The future depends on behavior.
pub fn generate_trajectory(scene: &Scene, seed: u64) -> TrajectorySample {
    let key = SeedKey::new(seed);
    let mut start_rng = key.stream("traj/start").rng();
    let p0 = [
        uniform(&mut start_rng, -4.0, 4.0),
        uniform(&mut start_rng, -4.0, 4.0),
    ];

    let mut hist_rng = key.stream("traj/history").rng();
    let history = (0..HISTORY_LEN)
        .map(|_| {
            [
                p0[0] + normal(&mut hist_rng, TRAJ_NOISE_SIGMA),
                p0[1] + normal(&mut hist_rng, TRAJ_NOISE_SIGMA),
            ]
        })
        .collect();

    let velocity = match scene.truth.behavior {
        Behavior::Waiting | Behavior::Standing => [0.0, 0.0],
        Behavior::Crossing => [0.0, CROSSING_SPEED],
        Behavior::Walking => [WALKING_SPEED, 0.0],
    };
    let mut future_rng = key.stream("traj/future").rng();
    let future = (1..=FUTURE_LEN)
        .map(|k| {
            let t = k as f64 * FRAME_DT;
            [
                p0[0] + velocity[0] * t + normal(&mut future_rng, TRAJ_NOISE_SIGMA),
                p0[1] + velocity[1] * t + normal(&mut future_rng, TRAJ_NOISE_SIGMA),
            ]
        })
        .collect();

    TrajectorySample {
        history,
        future,
        scene_seed: scene.seed,
    }
}

// ── dataset manifest and raw export ─────────────────────────────────

/// Writes `seed<TAB>params_hash` per line; scenes are re-rendered on
/// demand rather than persisted.
pub fn save_manifest(seeds: &[u64], params: &SceneParams, path: &Path) -> Result<()> {
    let hash = params.hash();
    let mut out = String::new();
    for seed in seeds {
        out.push_str(&format!("{seed}\t{hash}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a manifest back, verifying every record against `params`.
pub fn load_manifest(path: &Path, params: &SceneParams) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)?;
    let want = params.hash();
    let mut seeds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (seed, hash) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: expected seed<TAB>params_hash", lineno + 1),
        })?;
        if hash != want {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: params hash {hash} != expected {want}", lineno + 1),
            });
        }
        seeds.push(seed.parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: bad seed: {e}", lineno + 1),
        })?);
    }
    Ok(seeds)
}

/// Image as little-endian f32 bytes (CHW order), the raw export payload.
pub fn image_f32_bytes(scene: &Scene) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(scene.image.len() * 4);
    for &v in &scene.image {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

/// Raw export: one flat f32 blob plus a text manifest of shapes/offsets.
pub fn export_raw_images(scenes: &[Scene], blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut manifest = String::new();
    for scene in scenes {
        manifest.push_str(&format!(
            "{}\tshape=3x{}x{}\toffset={}\n",
            scene.image_id(),
            scene.height,
            scene.width,
            blob.len()
        ));
        blob.extend_from_slice(&image_f32_bytes(scene));
    }
    std::fs::write(blob_path, blob)?;
    std::fs::write(manifest_path, manifest)?;
    Ok(())
}

/// Serializes trajectory samples: 40 coordinate pairs then the scene seed,
/// tab-separated, one sample per line.
pub fn save_trajectories(samples: &[TrajectorySample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        for p in s.history.iter().chain(&s.future) {
            out.push_str(&format!("{}\t{}\t", p[0], p[1]));
        }
        out.push_str(&format!("{}\n", s.scene_seed));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectorySample>> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let want = 2 * (HISTORY_LEN + FUTURE_LEN) + 1;
        if fields.len() != want {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: {} fields, expected {want}", lineno + 1, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: bad float: {e}", lineno + 1),
            })
        };
        let mut points = Vec::with_capacity(HISTORY_LEN + FUTURE_LEN);
        for pair in fields[..want - 1].chunks_exact(2) {
            points.push([parse(pair[0])?, parse(pair[1])?]);
        }
        let scene_seed = fields[want - 1].parse().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: bad seed: {e}", lineno + 1),
        })?;
        samples.push(TrajectorySample {
            history: points[..HISTORY_LEN].to_vec(),
            future: points[HISTORY_LEN..].to_vec(),
            scene_seed,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{content_tokens, TokenizerConfig};

    fn params() -> SceneParams {
        SceneParams::default()
    }

    #[test]
    fn rendering_is_bit_identical() {
        let a = generate_scene(1234, &params()).unwrap();
        let b = generate_scene(1234, &params()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(1235, &params()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invalid_marginals_are_rejected() {
        let mut p = params();
        p.type_probs = [0.5, 0.5, 0.5, 0.5];
        assert!(generate_scene(1, &p).is_err());
        let mut p = params();
        p.night_prob = 1.5;
        assert!(generate_scene(1, &p).is_err());
    }

    #[test]
    fn detector_recovers_every_attribute() {
        let p = params();
        for seed in 0..300 {
            let scene = generate_scene(seed, &p).unwrap();
            assert_eq!(detect_attributes(&scene), scene.truth, "seed {seed}");
        }
    }

    #[test]
    fn night_scenes_are_darker_than_threshold() {
        let p = params();
        let mut seen = (false, false);
        for seed in 0..200 {
            let scene = generate_scene(seed, &p).unwrap();
            match scene.truth.lighting {
                Lighting::Day => {
                    seen.0 = true;
                    assert!(scene.mean_intensity() > NIGHT_MEAN_THRESHOLD);
                }
                Lighting::Night => {
                    seen.1 = true;
                    assert!(scene.mean_intensity() < NIGHT_MEAN_THRESHOLD);
                }
            }
        }
        assert!(seen.0 && seen.1);
    }

    #[test]
    fn behavior_marginal_matches_monte_carlo() {
        // 1000 seeds, P(crossing) = 0.5: binomial 3-sigma band is ±0.047.
        let mut p = params();
        p.behavior_probs = [0.5, 0.5, 0.0, 0.0];
        let crossing = (0..1000)
            .filter(|&s| generate_scene(s, &p).unwrap().truth.behavior == Behavior::Crossing)
            .count();
        let freq = crossing as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&freq), "crossing freq {freq}");
    }

    #[test]
    fn omit_prob_edges() {
        let p = params();
        let cfg = TokenizerConfig::default();
        for seed in 0..50 {
            let scene = generate_scene(seed, &p).unwrap();
            let full = teacher_annotate(&scene, 0.0, seed);
            let tokens = content_tokens(&full.text, &cfg);
            for word in scene.truth.annotation_words() {
                assert!(tokens.iter().any(|t| t == word), "missing {word} in `{}`", full.text);
            }
            let bare = teacher_annotate(&scene, 1.0, seed);
            let tokens = content_tokens(&bare.text, &cfg);
            assert_eq!(
                tokens,
                vec![scene.truth.pedestrian_type.word(), scene.truth.behavior.word()]
            );
        }
    }

    #[test]
    fn annotation_tokens_are_subset_of_truth_words() {
        let p = params();
        let cfg = TokenizerConfig::default();
        for seed in 100..200 {
            let scene = generate_scene(seed, &p).unwrap();
            let ann = teacher_annotate(&scene, 0.3, seed);
            let words = scene.truth.annotation_words();
            for token in content_tokens(&ann.text, &cfg) {
                assert!(words.contains(&token.as_str()), "{token} not in truth");
            }
        }
    }

    #[test]
    fn omission_rate_matches_monte_carlo() {
        // 2000 umbrella scenes at omit 0.3: mention rate 0.7 +- 0.05.
        let mut p = params();
        p.carried_present = 1.0;
        p.carried_probs = [1.0, 0.0, 0.0, 0.0];
        let mut mentioned = 0;
        for seed in 0..2000 {
            let scene = generate_scene(seed, &p).unwrap();
            let ann = teacher_annotate(&scene, 0.3, seed);
            if ann.text.contains("umbrella") {
                mentioned += 1;
            }
        }
        let rate = mentioned as f64 / 2000.0;
        assert!((rate - 0.7).abs() < 0.05, "umbrella mention rate {rate}");
    }

    #[test]
    fn standing_future_stays_put_and_crossing_travels() {
        let mut p = params();
        p.behavior_probs = [0.0, 0.0, 1.0, 0.0]; // standing
        for seed in 0..100 {
            let scene = generate_scene(seed, &p).unwrap();
            let t = generate_trajectory(&scene, seed);
            let p0 = t.history[0];
            let max_disp = t
                .future
                .iter()
                .map(|q| ((q[0] - p0[0]).powi(2) + (q[1] - p0[1]).powi(2)).sqrt())
                .fold(0.0, f64::max);
            assert!(max_disp < 0.2, "seed {seed}: displacement {max_disp}");
        }

        p.behavior_probs = [1.0, 0.0, 0.0, 0.0]; // crossing
        for seed in 0..100 {
            let scene = generate_scene(seed, &p).unwrap();
            let t = generate_trajectory(&scene, seed);
            let p0 = t.history[0];
            let q = t.future[FUTURE_LEN - 1];
            let d = ((q[0] - p0[0]).powi(2) + (q[1] - p0[1]).powi(2)).sqrt();
            assert!((d - 3.6).abs() < 0.2, "seed {seed}: travel {d}");
        }
    }

    #[test]
    fn matched_seeds_share_histories_across_behaviors() {
        let mut waiting = params();
        waiting.behavior_probs = [0.0, 1.0, 0.0, 0.0];
        let mut crossing = params();
        crossing.behavior_probs = [1.0, 0.0, 0.0, 0.0];
        for seed in 0..50 {
            let a = generate_trajectory(&generate_scene(seed, &waiting).unwrap(), seed);
            let b = generate_trajectory(&generate_scene(seed, &crossing).unwrap(), seed);
            assert_eq!(a.history, b.history, "seed {seed}");
            assert_ne!(a.future, b.future, "seed {seed}");
        }
    }

    #[test]
    fn manifest_roundtrip_checks_params_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let p = params();
        save_manifest(&[1, 2, 42], &p, &path).unwrap();
        assert_eq!(load_manifest(&path, &p).unwrap(), vec![1, 2, 42]);
        let mut other = p.clone();
        other.night_prob = 0.5;
        assert!(load_manifest(&path, &other).is_err());
    }

    #[test]
    fn trajectory_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.tsv");
        let p = params();
        let samples: Vec<TrajectorySample> = (0..5)
            .map(|s| generate_trajectory(&generate_scene(s, &p).unwrap(), s))
            .collect();
        save_trajectories(&samples, &path).unwrap();
        let loaded = load_trajectories(&path).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn raw_export_writes_f32_blob() {
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("images.f32");
        let manifest = dir.path().join("images.tsv");
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, &params()).unwrap()).collect();
        export_raw_images(&scenes, &blob, &manifest).unwrap();
        let bytes = std::fs::read(&blob).unwrap();
        assert_eq!(bytes.len(), 3 * 3 * 64 * 64 * 4);
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("shape=3x64x64"));
    }
}
