//! Deterministic two-domain synthetic segmentation benchmark.
//!
//! Every scene is a function of a single `u64` seed: a background, one
//! horizontal road band, and a handful of shapes parked in disjoint grid
//! cells (so no class is ever fully painted over). The target domain renders
//! the *same* geometry for a given seed and then pushes the image through a
//! configurable appearance shift: hue rotation, contrast, brightness, a
//! triangle-wave texture overlay, and pixel noise. Each stage is skipped
//! entirely when its parameter is zero, so an all-zero shift reproduces the
//! source image byte for byte.
//!
//! Determinism is taken seriously: randomness comes from a counter-based
//! stream cipher RNG, and even the trigonometry for the hue rotation is
//! computed locally (range-reduced Taylor series) instead of calling libm,
//! so the same seed yields the same bytes on every platform.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::{self, ImageError};
use crate::labelmap::LabelMap;
use crate::real::Real;
use crate::tensor::Tensor;

/// Base colors for class ids 1..=12 (sRGB-ish, in [0,1]).
const PALETTE: [[f64; 3]; 12] = [
    [0.35, 0.55, 0.25], // 1: background meadow
    [0.30, 0.30, 0.32], // 2: road
    [0.75, 0.20, 0.15], // 3
    [0.20, 0.35, 0.70], // 4
    [0.80, 0.70, 0.20], // 5
    [0.55, 0.25, 0.60], // 6
    [0.20, 0.65, 0.60], // 7
    [0.85, 0.45, 0.15], // 8
    [0.50, 0.50, 0.80], // 9
    [0.60, 0.40, 0.30], // 10
    [0.25, 0.55, 0.40], // 11
    [0.70, 0.30, 0.45], // 12
];

pub const MAX_CLASSES: usize = PALETTE.len();

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    Image(ImageError),
    BadParams(String),
    ManifestParse { line: usize, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Image(e) => write!(f, "{e}"),
            DataError::BadParams(m) => write!(f, "{m}"),
            DataError::ManifestParse { line, message } => write!(f, "line {line}: {message}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<ImageError> for DataError {
    fn from(e: ImageError) -> Self {
        DataError::Image(e)
    }
}

// ---------------------------------------------------------------------------
// Portable math helpers (no libm, so byte-level outputs are reproducible).

fn reduce_to_pi(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = x % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Taylor sine after range reduction; ~1e-14 absolute error on [-pi, pi].
pub(crate) fn portable_sin(x: f64) -> f64 {
    let x = reduce_to_pi(x);
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for k in 1..=13 {
        term *= -x2 / ((2 * k) as f64 * (2 * k + 1) as f64);
        sum += term;
    }
    sum
}

pub(crate) fn portable_cos(x: f64) -> f64 {
    let x = reduce_to_pi(x);
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=13 {
        term *= -x2 / ((2 * k - 1) as f64 * (2 * k) as f64);
        sum += term;
    }
    sum
}

/// Triangle wave with period 1 mapping to [-1, 1], exact in floating point.
fn triangle(t: f64) -> f64 {
    let frac = t - t.floor();
    if frac < 0.5 {
        4.0 * frac - 1.0
    } else {
        3.0 - 4.0 * frac
    }
}

/// Approximate standard normal from twelve uniforms.
fn irwin_hall(rng: &mut ChaCha8Rng) -> f64 {
    let mut s = 0.0;
    for _ in 0..12 {
        s += rng.gen::<f64>();
    }
    s - 6.0
}

fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    debug_assert!(lo <= hi);
    let span = (hi - lo + 1) as f64;
    let v = lo + (rng.gen::<f64>() * span) as usize;
    v.min(hi)
}

// ---------------------------------------------------------------------------

/// Geometry of the generated scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            classes: 5,
            height: 64,
            width: 64,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes < 3 || self.classes > MAX_CLASSES {
            return Err(DataError::BadParams(format!(
                "classes must be in 3..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(DataError::BadParams(format!(
                "scenes need at least 16x16 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Appearance gap between the two domains. Every component at zero disables
/// that stage completely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftParams {
    /// Hue rotation around the gray axis, in degrees.
    pub hue_degrees: f64,
    /// Contrast change: values are scaled by `1 + contrast` around 0.5.
    pub contrast: f64,
    /// Additive brightness offset.
    pub brightness: f64,
    /// Triangle-wave overlay frequency across the image diagonal (0 = off);
    /// the amplitude is fixed at 0.15.
    pub texture_freq: f64,
    /// Standard deviation of per-pixel noise.
    pub noise_sigma: f64,
}

pub const TEXTURE_AMPLITUDE: f64 = 0.15;

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            hue_degrees: 40.0,
            contrast: -0.25,
            brightness: -0.10,
            texture_freq: 6.0,
            noise_sigma: 0.05,
        }
    }
}

impl ShiftParams {
    pub const NONE: ShiftParams = ShiftParams {
        hue_degrees: 0.0,
        contrast: 0.0,
        brightness: 0.0,
        texture_freq: 0.0,
        noise_sigma: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

/// One rendered scene: interleaved RGB bytes plus per-pixel class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub labels: LabelMap,
}

struct Shape {
    round: bool,
    cy: f64,
    cx: f64,
    radius_y: f64,
    radius_x: f64,
    class: u8,
}

/// Render the label geometry and float image for one seed. Both domains
/// call this with the same seed to share geometry; the shift is applied
/// afterwards for the target domain.
fn render_base(
    params: &SceneParams,
    seed: u64,
    excluded_class: Option<u8>,
) -> (Vec<f64>, LabelMap) {
    let (h, w, classes) = (params.height, params.width, params.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Road band: full width, confined so grid cells still poke out.
    let road_y = uniform_usize(&mut rng, h / 8, h * 5 / 8);
    let road_thickness = uniform_usize(&mut rng, h / 12 + 1, h / 6 + 1);

    // Shapes live in disjoint cells of a 3x2 grid, so later shapes never
    // erase earlier ones and the class guarantee below is structural.
    let n_shapes = uniform_usize(&mut rng, 2, 6);
    let shape_classes: Vec<u8> = {
        let pool: Vec<u8> = (3..=classes as u8)
            .filter(|c| Some(*c) != excluded_class)
            .collect();
        // classes >= 3 and at most one exclusion keeps the pool non-empty.
        (0..n_shapes).map(|i| pool[i % pool.len()]).collect()
    };
    let cell_w = w as f64 / 3.0;
    let cell_h = h as f64 / 2.0;
    let mut shapes = Vec::with_capacity(n_shapes);
    for (i, &class) in shape_classes.iter().enumerate() {
        let cell = i % 6;
        let (row, col) = (cell / 3, cell % 3);
        let margin = 0.18;
        let cy = (row as f64 + margin + rng.gen::<f64>() * (1.0 - 2.0 * margin)) * cell_h;
        let cx = (col as f64 + margin + rng.gen::<f64>() * (1.0 - 2.0 * margin)) * cell_w;
        let max_r = cell_h.min(cell_w) * 0.38;
        let radius_y = max_r * (0.45 + 0.55 * rng.gen::<f64>());
        let radius_x = max_r * (0.45 + 0.55 * rng.gen::<f64>());
        shapes.push(Shape {
            round: rng.gen::<f64>() < 0.5,
            cy,
            cx,
            radius_y,
            radius_x,
            class,
        });
    }

    // Small per-class, per-scene brightness jitter.
    let jitter: Vec<f64> = (0..=classes).map(|_| rng.gen::<f64>() * 0.16 - 0.08).collect();

    let mut labels = vec![1u8; h * w];
    for y in road_y..(road_y + road_thickness).min(h) {
        for x in 0..w {
            labels[y * w + x] = 2;
        }
    }
    for s in &shapes {
        let y_lo = (s.cy - s.radius_y).floor().max(0.0) as usize;
        let y_hi = ((s.cy + s.radius_y).ceil() as usize).min(h - 1);
        let x_lo = (s.cx - s.radius_x).floor().max(0.0) as usize;
        let x_hi = ((s.cx + s.radius_x).ceil() as usize).min(w - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dy = (y as f64 + 0.5 - s.cy) / s.radius_y;
                let dx = (x as f64 + 0.5 - s.cx) / s.radius_x;
                let inside = if s.round {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    labels[y * w + x] = s.class;
                }
            }
        }
    }

    let mut image = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let class = labels[y * w + x] as usize;
            let base = PALETTE[class - 1];
            let j = 1.0 + jitter[class];
            for ch in 0..3 {
                image[(y * w + x) * 3 + ch] = (base[ch] * j).clamp(0.0, 1.0);
            }
        }
    }
    (image, LabelMap::new(h, w, labels).unwrap())
}

/// Rotation of an RGB vector around the gray axis by `degrees`.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let theta = degrees * std::f64::consts::PI / 180.0;
    let (s, c) = (portable_sin(theta), portable_cos(theta));
    let a = 1.0 / 3.0f64.sqrt();
    // Rodrigues formula with axis (a, a, a).
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            m[i][j] = eye * c + (1.0 - c) * a * a;
        }
    }
    // Cross-product term: K = [[0,-a,a],[a,0,-a],[-a,a,0]] * sin.
    m[0][1] += -a * s;
    m[0][2] += a * s;
    m[1][0] += a * s;
    m[1][2] += -a * s;
    m[2][0] += -a * s;
    m[2][1] += a * s;
    m
}

fn apply_shift(
    image: &mut [f64],
    h: usize,
    w: usize,
    shift: &ShiftParams,
    seed: u64,
) {
    if shift.hue_degrees != 0.0 {
        let m = hue_matrix(shift.hue_degrees);
        for p in 0..h * w {
            let (r, g, b) = (image[p * 3], image[p * 3 + 1], image[p * 3 + 2]);
            for ch in 0..3 {
                image[p * 3 + ch] = m[ch][0] * r + m[ch][1] * g + m[ch][2] * b;
            }
        }
    }
    if shift.contrast != 0.0 {
        let k = 1.0 + shift.contrast;
        for v in image.iter_mut() {
            *v = 0.5 + (*v - 0.5) * k;
        }
    }
    if shift.brightness != 0.0 {
        for v in image.iter_mut() {
            *v += shift.brightness;
        }
    }
    if shift.texture_freq != 0.0 {
        let diag = (h + w) as f64;
        for y in 0..h {
            for x in 0..w {
                let t = shift.texture_freq * (y + x) as f64 / diag;
                let overlay = TEXTURE_AMPLITUDE * triangle(t);
                for ch in 0..3 {
                    image[(y * w + x) * 3 + ch] += overlay;
                }
            }
        }
    }
    if shift.noise_sigma != 0.0 {
        // Separate stream so geometry draws stay aligned across domains.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for v in image.iter_mut() {
            *v += shift.noise_sigma * irwin_hall(&mut rng);
        }
    }
}

fn quantize(image: &[f64]) -> Vec<u8> {
    image
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Render one scene for a domain. `target_only_class`, when set, is a class
/// that source scenes must never contain; target scenes keep it in their
/// shape rotation.
pub fn render_scene(
    params: &SceneParams,
    shift: &ShiftParams,
    seed: u64,
    domain: Domain,
    target_only_class: Option<u8>,
) -> Result<Scene, DataError> {
    params.validate()?;
    if let Some(c) = target_only_class {
        if c < 3 || c as usize > params.classes {
            return Err(DataError::BadParams(format!(
                "target-only class {c} must be a shape class in 3..={}",
                params.classes
            )));
        }
        if params.classes == 3 {
            return Err(DataError::BadParams(
                "cannot reserve the only shape class for the target domain".into(),
            ));
        }
    }
    let excluded = match domain {
        Domain::Source => target_only_class,
        Domain::Target => None,
    };
    let (mut image, labels) = render_base(params, seed, excluded);
    if domain == Domain::Target {
        apply_shift(&mut image, params.height, params.width, shift, seed);
    }
    Ok(Scene {
        width: params.width,
        height: params.height,
        rgb: quantize(&image),
        labels,
    })
}

// ---------------------------------------------------------------------------
// Dataset + manifest.

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub domain: Domain,
    pub seed: u64,
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Ordered list of `<domain> <seed> <image-path> <label-path>` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.domain.as_str(),
                e.seed,
                e.image.display(),
                e.labels.display()
            ));
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(DataError::ManifestParse {
                    line,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let domain = Domain::parse(fields[0]).ok_or_else(|| DataError::ManifestParse {
                line,
                message: format!("unknown domain {:?}", fields[0]),
            })?;
            let seed: u64 = fields[1].parse().map_err(|_| DataError::ManifestParse {
                line,
                message: format!("bad seed {:?}", fields[1]),
            })?;
            entries.push(ManifestEntry {
                domain,
                seed,
                image: PathBuf::from(fields[2]),
                labels: PathBuf::from(fields[3]),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::decode(&std::fs::read_to_string(path)?)
    }

    pub fn domain_entries(&self, domain: Domain) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.domain == domain).collect()
    }
}

/// Counts and seed layout for a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneParams,
    pub shift: ShiftParams,
    pub source_train: usize,
    pub target_train: usize,
    /// Evaluation scenes per domain.
    pub eval_per_domain: usize,
    pub source_seed_base: u64,
    pub target_seed_base: u64,
    pub eval_seed_base: u64,
    pub target_only_class: Option<u8>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scene: SceneParams::default(),
            shift: ShiftParams::default(),
            source_train: 200,
            target_train: 200,
            eval_per_domain: 50,
            source_seed_base: 10_000,
            target_seed_base: 20_000,
            eval_seed_base: 90_000,
            target_only_class: None,
        }
    }
}

/// Write a full dataset under `root`: PPM/PGM pairs plus `train.manifest`
/// and `eval.manifest` (paths inside are relative to `root`).
pub fn generate_dataset(root: &Path, spec: &DatasetSpec) -> Result<(Manifest, Manifest), DataError> {
    spec.scene.validate()?;
    std::fs::create_dir_all(root)?;
    let mut train = Manifest::default();
    let mut eval = Manifest::default();

    let emit = |manifest: &mut Manifest,
                    dir: &str,
                    domain: Domain,
                    seed: u64|
     -> Result<(), DataError> {
        let scene = render_scene(&spec.scene, &spec.shift, seed, domain, spec.target_only_class)?;
        let sub = root.join(dir);
        std::fs::create_dir_all(&sub)?;
        let image_rel = PathBuf::from(dir).join(format!("scene_{seed}.ppm"));
        let label_rel = PathBuf::from(dir).join(format!("scene_{seed}.pgm"));
        imageio::save_ppm(&root.join(&image_rel), scene.width, scene.height, &scene.rgb)?;
        imageio::save_pgm(&root.join(&label_rel), &scene.labels)?;
        manifest.entries.push(ManifestEntry {
            domain,
            seed,
            image: image_rel,
            labels: label_rel,
        });
        Ok(())
    };

    for i in 0..spec.source_train {
        emit(&mut train, "source_train", Domain::Source, spec.source_seed_base + i as u64)?;
    }
    for i in 0..spec.target_train {
        emit(&mut train, "target_train", Domain::Target, spec.target_seed_base + i as u64)?;
    }
    for i in 0..spec.eval_per_domain {
        emit(&mut eval, "source_eval", Domain::Source, spec.eval_seed_base + i as u64)?;
    }
    for i in 0..spec.eval_per_domain {
        emit(&mut eval, "target_eval", Domain::Target, spec.eval_seed_base + i as u64)?;
    }

    train.save(&root.join("train.manifest"))?;
    eval.save(&root.join("eval.manifest"))?;
    Ok((train, eval))
}

/// Load one manifest entry as a `[3, h, w]` tensor plus its label map.
/// Relative paths resolve against `base` (the manifest's directory).
pub fn load_sample<T: Real>(
    base: &Path,
    entry: &ManifestEntry,
) -> Result<(Tensor<T>, LabelMap), DataError> {
    let (w, h, rgb) = imageio::load_ppm(&base.join(&entry.image))?;
    let labels = imageio::load_pgm(&base.join(&entry.labels))?;
    Ok((imageio::rgb_to_tensor(w, h, &rgb), labels))
}
