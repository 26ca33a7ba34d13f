//! Procedural clear and rainy street scenes with exact segmentation truth,
//! dataset materialization, and loaders for image folders.
//!
//! Class ids: 0 sky, 1 road, 2 vehicle, 3 light. Images are `3 x H x W`
//! tensors in `[0, 1]`; on disk they are 8-bit RGB PNGs, with segmentation
//! maps as 8-bit grayscale PNGs of class ids in a `seg/` subfolder carrying
//! the same file name.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::semantic::{load_segmap, SegMap};
use crate::substrate::Tensor;
use crate::{Error, Result};

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const VEHICLE: u8 = 2;
pub const LIGHT: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SEGMAP_DIR: &str = "seg";

pub type Color = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Pixel rows `top..top + height`, columns `left..left + width`.
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Pixels whose centers lie within `radius` of `(cy, cx)`.
    Circle { cy: f64, cx: f64, radius: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                height,
                width,
            } => (top..top + height).contains(&y) && (left..left + width).contains(&x),
            Shape::Circle { cy, cx, radius } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= radius * radius
            }
        }
    }

    fn within(&self, height: usize, width: usize) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                height: h,
                width: w,
            } => h > 0 && w > 0 && top + h <= height && left + w <= width,
            Shape::Circle { cy, cx, radius } => {
                radius > 0.0
                    && cy - radius >= 0.0
                    && cx - radius >= 0.0
                    && cy + radius <= height as f64
                    && cx + radius <= width as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    /// Sky color at the top edge; it lightens toward the horizon.
    pub sky: Color,
    pub road: Color,
}

/// Everything needed to render one clear scene. Objects are painted in
/// order, later ones on top.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Horizon position as a fraction of the height, in `(0, 1)`.
    pub horizon: f64,
    pub objects: Vec<SceneObject>,
    pub palette: Palette,
    /// Amplitude of per-pixel texture noise.
    pub grain: f64,
}

impl SceneSpec {
    pub fn horizon_row(&self) -> usize {
        (self.horizon * self.height as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("scene canvas must be non-empty".into()));
        }
        let row = self.horizon_row();
        if !(self.horizon > 0.0 && self.horizon < 1.0) || row == 0 || row >= self.height {
            return Err(Error::Invalid(format!(
                "horizon {} leaves no sky or no road",
                self.horizon
            )));
        }
        if !(0.0..=1.0).contains(&self.grain) {
            return Err(Error::Invalid(format!(
                "grain {} outside [0, 1]",
                self.grain
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if usize::from(o.class) >= NUM_CLASSES {
                return Err(Error::ClassOutOfRange {
                    index: o.class,
                    num_classes: NUM_CLASSES,
                });
            }
            if !o.shape.within(self.height, self.width) {
                return Err(Error::Invalid(format!("object {i} leaves the canvas")));
            }
            if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Invalid(format!(
                    "object {i} has a color outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Draw a random scene from `dist`.
    pub fn random(seed: u64, height: usize, width: usize, dist: &SceneDistribution) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = rng.gen_range(dist.horizon.0..=dist.horizon.1);
        let row = ((horizon * height as f64).round() as usize).clamp(1, height - 1);
        let sky = [
            rng.gen_range(0.35..0.6),
            rng.gen_range(0.55..0.8),
            rng.gen_range(0.8..0.98),
        ];
        let g = rng.gen_range(0.3..0.5);
        let road = [g, g, g + rng.gen_range(0.0..0.05)];
        let mut objects = Vec::new();

        let vehicles = rng.gen_range(dist.vehicles.0..=dist.vehicles.1);
        for _ in 0..vehicles {
            let h = rng.gen_range(height / 10..=height / 4).max(1);
            let w = rng.gen_range(width / 8..=width / 3).max(1);
            let road_rows = height - row;
            let bottom_lo = (row + h.min(road_rows)).min(height);
            let bottom = rng.gen_range(bottom_lo..=height);
            let top = bottom.saturating_sub(h);
            let left = rng.gen_range(0..=width - w);
            let color = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
            ];
            objects.push(SceneObject {
                class: VEHICLE,
                shape: Shape::Rect {
                    top,
                    left,
                    height: bottom - top,
                    width: w,
                },
                color,
            });
        }

        let lights = rng.gen_range(dist.lights.0..=dist.lights.1);
        for _ in 0..lights {
            let radius = rng.gen_range(1.0..(height.min(width) as f64 / 16.0).max(1.5));
            let cy = rng.gen_range(radius..(row as f64).max(radius + 1e-9));
            let cx = rng.gen_range(radius..width as f64 - radius);
            let warm = rng.gen_range(0.0..0.25);
            objects.push(SceneObject {
                class: LIGHT,
                shape: Shape::Circle { cy, cx, radius },
                color: [1.0, 1.0 - warm * 0.3, 1.0 - warm],
            });
        }

        Self {
            seed,
            height,
            width,
            horizon: row as f64 / height as f64,
            objects,
            palette: Palette { sky, road },
            grain: dist.grain,
        }
    }
}

/// Ranges that [`SceneSpec::random`] samples from.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDistribution {
    pub horizon: (f64, f64),
    pub vehicles: (usize, usize),
    pub lights: (usize, usize),
    pub grain: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            horizon: (0.35, 0.6),
            vehicles: (1, 3),
            lights: (1, 3),
            grain: 0.02,
        }
    }
}

/// Rain rendering parameters. `darkening` is a multiplicative brightness
/// factor (1 leaves the image unchanged); the remaining intensities are
/// no-ops at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherParams {
    pub streak_count: usize,
    /// Streak angle range in degrees from vertical.
    pub streak_angle: (f64, f64),
    pub streak_opacity: f64,
    pub streak_length: f64,
    pub darkening: f64,
    pub reflection: f64,
    pub mist_radius: usize,
}

impl WeatherParams {
    /// Parameters that leave every image unchanged.
    pub fn identity() -> Self {
        Self {
            streak_count: 0,
            streak_angle: (0.0, 0.0),
            streak_opacity: 0.0,
            streak_length: 0.0,
            darkening: 1.0,
            reflection: 0.0,
            mist_radius: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("darkening", self.darkening)?;
        unit("reflection", self.reflection)?;
        unit("streak opacity", self.streak_opacity)?;
        let (lo, hi) = self.streak_angle;
        if !(lo <= hi && lo >= -90.0 && hi <= 90.0) {
            return Err(Error::Invalid(format!(
                "streak angle range ({lo}, {hi}) invalid"
            )));
        }
        if !(self.streak_length >= 0.0 && self.streak_length.is_finite()) {
            return Err(Error::Invalid("streak length must be non-negative".into()));
        }
        Ok(())
    }

    pub fn random(rng: &mut impl Rng, dist: &WeatherDistribution) -> Self {
        let pick = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if lo < hi {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        };
        Self {
            streak_count: rng.gen_range(dist.streak_count.0..=dist.streak_count.1),
            streak_angle: dist.streak_angle,
            streak_opacity: pick(rng, dist.streak_opacity),
            streak_length: pick(rng, dist.streak_length),
            darkening: pick(rng, dist.darkening),
            reflection: pick(rng, dist.reflection),
            mist_radius: rng.gen_range(dist.mist_radius.0..=dist.mist_radius.1),
        }
    }
}

/// Ranges that [`WeatherParams::random`] samples from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherDistribution {
    pub streak_count: (usize, usize),
    pub streak_angle: (f64, f64),
    pub streak_opacity: (f64, f64),
    pub streak_length: (f64, f64),
    pub darkening: (f64, f64),
    pub reflection: (f64, f64),
    pub mist_radius: (usize, usize),
}

impl Default for WeatherDistribution {
    fn default() -> Self {
        Self {
            streak_count: (20, 40),
            streak_angle: (-20.0, 5.0),
            streak_opacity: (0.25, 0.45),
            streak_length: (4.0, 9.0),
            darkening: (0.55, 0.75),
            reflection: (0.25, 0.45),
            mist_radius: (0, 1),
        }
    }
}

fn pixel_index(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

/// Render the clear scene and its segmentation map.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Tensor, SegMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let row = spec.horizon_row();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = vec![0.0; 3 * h * w];
    let mut classes = vec![SKY; h * w];
    for y in 0..h {
        for x in 0..w {
            let (class, base) = if y < row {
                let lift = 0.25 * y as f64 / row as f64;
                (SKY, spec.palette.sky.map(|c| c + (1.0 - c) * lift))
            } else {
                (ROAD, spec.palette.road)
            };
            let mut color = base;
            let mut class = class;
            for o in &spec.objects {
                if o.shape.contains(y, x) {
                    color = o.color;
                    class = o.class;
                }
            }
            let noise = spec.grain * (rng.gen::<f64>() * 2.0 - 1.0);
            for (c, v) in color.iter().enumerate() {
                img[pixel_index(c, y, x, h, w)] = (v + noise).clamp(0.0, 1.0);
            }
            classes[y * w + x] = class;
        }
    }
    Ok((
        Tensor::new(vec![3, h, w], img)?,
        SegMap::new(h, w, NUM_CLASSES, classes)?,
    ))
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::Invalid(format!(
            "expected a 3 x H x W image, got {s:?}"
        ))),
    }
}

fn box_blur(data: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut horizontal = vec![0.0; data.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                let s: f64 = (lo..=hi).map(|k| data[pixel_index(c, y, k, h, w)]).sum();
                horizontal[pixel_index(c, y, x, h, w)] = s / (hi - lo + 1) as f64;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for c in 0..3 {
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(radius), (y + radius).min(h - 1));
            for x in 0..w {
                let s: f64 = (lo..=hi)
                    .map(|k| horizontal[pixel_index(c, k, x, h, w)])
                    .sum();
                out[pixel_index(c, y, x, h, w)] = s / (hi - lo + 1) as f64;
            }
        }
    }
    out
}

/// Composite rain onto a clear image: darkening, streaks, mirrored road
/// reflections and mist blur, in that order. The segmentation map only
/// locates the road and the horizon; it is not modified.
pub fn apply_rain(
    image: &Tensor,
    segmap: &SegMap,
    wp: &WeatherParams,
    seed: u64,
) -> Result<Tensor> {
    wp.validate()?;
    let (h, w) = image_dims(image)?;
    if segmap.height() != h || segmap.width() != w {
        return Err(Error::SegMapSize(h, w, segmap.height(), segmap.width()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = image.data().to_vec();

    if wp.darkening != 1.0 {
        for v in &mut out {
            *v *= wp.darkening;
        }
    }

    if wp.streak_count > 0 && wp.streak_opacity > 0.0 && wp.streak_length > 0.0 {
        let mut coverage = vec![0.0f64; h * w];
        for _ in 0..wp.streak_count {
            let (lo, hi) = wp.streak_angle;
            let angle = if lo < hi { rng.gen_range(lo..=hi) } else { lo }.to_radians();
            let (y0, x0) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
            let (dy, dx) = (angle.cos(), angle.sin());
            let steps = (wp.streak_length * 2.0).ceil() as usize;
            for s in 0..=steps {
                let t = s as f64 * 0.5;
                let (y, x) = (y0 + dy * t, x0 + dx * t);
                if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                    coverage[y as usize * w + x as usize] = 1.0;
                }
            }
        }
        const STREAK: Color = [0.85, 0.88, 0.92];
        for (i, &m) in coverage.iter().enumerate() {
            if m > 0.0 {
                let a = wp.streak_opacity * m;
                for (c, s) in STREAK.iter().enumerate() {
                    let k = c * h * w + i;
                    out[k] = (1.0 - a) * out[k] + a * s;
                }
            }
        }
    }

    if wp.reflection > 0.0 {
        if let Some(horizon) = segmap
            .classes()
            .iter()
            .position(|&c| c == ROAD)
            .map(|i| i / w)
        {
            let source = out.clone();
            for y in horizon..h {
                let Some(mirror) = (2 * horizon).checked_sub(y + 1) else {
                    break;
                };
                for x in 0..w {
                    if segmap.get(y, x) != ROAD {
                        continue;
                    }
                    for c in 0..3 {
                        let k = pixel_index(c, y, x, h, w);
                        let m = source[pixel_index(c, mirror, x, h, w)];
                        out[k] = (1.0 - wp.reflection) * out[k] + wp.reflection * m;
                    }
                }
            }
        }
    }

    if wp.mist_radius > 0 {
        out = box_blur(&out, h, w, wp.mist_radius);
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// Quantize a `3 x H x W` tensor to 8-bit RGB.
pub fn to_rgb8(image: &Tensor) -> Result<RgbImage> {
    let (h, w) = image_dims(image)?;
    let d = image.data();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| q(d[pixel_index(c, y, x, h, w)])))
    }))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[pixel_index(c, y as usize, x as usize, h, w)] = f64::from(p.0[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches buffer")
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    to_rgb8(image)?
        .save(path)
        .map_err(|e| Error::image(path, e))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(from_rgb8(&img.to_rgb8()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    TrainA,
    TestA,
    TrainB,
    TestB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainA, Split::TestA, Split::TrainB, Split::TestB];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainA => "trainA",
            Split::TestA => "testA",
            Split::TrainB => "trainB",
            Split::TestB => "testB",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether this split belongs to the rainy domain.
    pub fn is_rainy(self) -> bool {
        matches!(self, Split::TrainB | Split::TestB)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    /// Paths relative to the manifest's root.
    pub image: PathBuf,
    pub segmap: PathBuf,
}

/// Dataset index: one tab-separated `split image segmap` line per item.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\n",
                    e.split,
                    e.image.display(),
                    e.segmap.display()
                )
            })
            .collect()
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Read `path`, which is either a manifest file or a directory
    /// containing one.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, image, segmap] = fields[..] else {
                return Err(Error::Invalid(format!(
                    "{}:{}: expected 3 tab-separated fields",
                    file.display(),
                    n + 1
                )));
            };
            let split = Split::parse(split).ok_or_else(|| {
                Error::Invalid(format!(
                    "{}:{}: unknown split {split:?}",
                    file.display(),
                    n + 1
                ))
            })?;
            entries.push(ManifestEntry {
                split,
                image: image.into(),
                segmap: segmap.into(),
            });
        }
        Ok(Self { root, entries })
    }

    /// All referenced files exist and no file appears twice.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            for p in [&e.image, &e.segmap] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::Invalid(format!("missing file {}", full.display())));
                }
                if !seen.insert(p.clone()) {
                    return Err(Error::Invalid(format!("{} listed twice", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Load every item of `split` with its segmentation map.
    pub fn load_split(&self, split: Split) -> Result<Vec<DomainItem>> {
        self.split(split)
            .map(|e| {
                let image = load_image(&self.root.join(&e.image))?;
                let segmap = load_segmap(&self.root.join(&e.segmap), NUM_CLASSES)?;
                check_sizes(&e.image, &image, &segmap)?;
                Ok(DomainItem {
                    name: e
                        .image
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    image,
                    segmap: Some(segmap),
                })
            })
            .collect()
    }
}

/// Item counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train_a: usize,
    pub test_a: usize,
    pub train_b: usize,
    pub test_b: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::TrainA => self.train_a,
            Split::TestA => self.test_a,
            Split::TrainB => self.train_b,
            Split::TestB => self.test_b,
        }
    }
}

/// Settings for [`build_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub counts: SplitCounts,
    pub height: usize,
    pub width: usize,
    pub scenes: SceneDistribution,
    pub weather: WeatherDistribution,
}

/// Render every split under `root` and write the manifest. Clear (A) and
/// rainy (B) items are drawn from disjoint scene seeds.
pub fn build_dataset(spec: &DatasetSpec, root: &Path, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut entries = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        let seg_dir = dir.join(SEGMAP_DIR);
        fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
        for i in 0..spec.counts.get(split) {
            let scene_seed = loop {
                let s = rng.gen::<u64>();
                if used.insert(s) {
                    break s;
                }
            };
            let scene = SceneSpec::random(scene_seed, spec.height, spec.width, &spec.scenes);
            let (clear, segmap) = gen_scene(&scene)?;
            let image = if split.is_rainy() {
                let wp = WeatherParams::random(&mut rng, &spec.weather);
                apply_rain(&clear, &segmap, &wp, rng.gen())?
            } else {
                clear
            };
            let name = format!("{i:05}.png");
            let image_rel = Path::new(split.name()).join(&name);
            let seg_rel = Path::new(split.name()).join(SEGMAP_DIR).join(&name);
            save_image(&root.join(&image_rel), &image)?;
            segmap.save(&root.join(&seg_rel))?;
            entries.push(ManifestEntry {
                split,
                image: image_rel,
                segmap: seg_rel,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

/// One loaded image with its optional segmentation map.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainItem {
    pub name: String,
    pub image: Tensor,
    pub segmap: Option<SegMap>,
}

fn check_sizes(path: &Path, image: &Tensor, segmap: &SegMap) -> Result<()> {
    let (h, w) = image_dims(image)?;
    if segmap.height() != h || segmap.width() != w {
        return Err(Error::Invalid(format!(
            "{}: image is {h}x{w} but its segmentation map is {}x{}",
            path.display(),
            segmap.height(),
            segmap.width()
        )));
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Load every PNG in `dir` in lexicographic file-name order. Segmentation
/// maps are read from `dir/seg/<same name>` when present; a missing map is
/// an error only when `expect_segmaps` is set.
pub fn load_image_folder(dir: &Path, expect_segmaps: bool) -> Result<Vec<DomainItem>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| is_image(p))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let image = load_image(&path)?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let seg_path = dir.join(SEGMAP_DIR).join(&name);
            let segmap = if seg_path.is_file() {
                let s = load_segmap(&seg_path, NUM_CLASSES)?;
                check_sizes(&path, &image, &s)?;
                Some(s)
            } else if expect_segmaps {
                return Err(Error::Invalid(format!(
                    "missing segmentation map {}",
                    seg_path.display()
                )));
            } else {
                None
            };
            Ok(DomainItem {
                name,
                image,
                segmap,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_spec(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            seed: 5,
            height: 32,
            width: 40,
            horizon: 0.5,
            objects,
            palette: Palette {
                sky: [0.4, 0.6, 0.9],
                road: [0.35, 0.35, 0.37],
            },
            grain: 0.02,
        }
    }

    fn rect(top: usize, left: usize, height: usize, width: usize) -> SceneObject {
        SceneObject {
            class: VEHICLE,
            shape: Shape::Rect {
                top,
                left,
                height,
                width,
            },
            color: [0.8, 0.1, 0.1],
        }
    }

    #[test]
    fn empty_scene_has_two_regions() {
        let (img, seg) = gen_scene(&plain_spec(vec![])).unwrap();
        assert_eq!(img.shape(), &[3, 32, 40]);
        let present: HashSet<u8> = seg.classes().iter().copied().collect();
        assert_eq!(present, HashSet::from([SKY, ROAD]));
        assert!(seg.classes()[..16 * 40].iter().all(|&c| c == SKY));
        assert!(seg.classes()[16 * 40..].iter().all(|&c| c == ROAD));
    }

    #[test]
    fn rendering_is_seeded() {
        let spec = SceneSpec::random(9, 64, 64, &SceneDistribution::default());
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        let other = SceneSpec::random(10, 64, 64, &SceneDistribution::default());
        assert_ne!(gen_scene(&spec).unwrap().0, gen_scene(&other).unwrap().0);
    }

    #[test]
    fn vehicle_area_matches_rectangles() {
        let objects = vec![rect(18, 2, 5, 7), rect(20, 15, 10, 12), rect(2, 30, 4, 4)];
        let area: usize = 5 * 7 + 10 * 12 + 4 * 4;
        let (_, seg) = gen_scene(&plain_spec(objects)).unwrap();
        assert_eq!(
            seg.classes().iter().filter(|&&c| c == VEHICLE).count(),
            area
        );
    }

    #[test]
    fn topmost_object_wins() {
        let light = SceneObject {
            class: LIGHT,
            shape: Shape::Circle {
                cy: 22.0,
                cx: 10.0,
                radius: 2.0,
            },
            color: [1.0, 1.0, 0.9],
        };
        let (img, seg) = gen_scene(&plain_spec(vec![rect(18, 2, 10, 16), light])).unwrap();
        assert_eq!(seg.get(21, 9), LIGHT);
        assert_eq!(seg.get(18, 2), VEHICLE);
        for y in 0..32 {
            for x in 0..40 {
                let inside_light =
                    (y as f64 + 0.5 - 22.0).powi(2) + (x as f64 + 0.5 - 10.0).powi(2) <= 4.0;
                let inside_rect = (18..28).contains(&y) && (2..18).contains(&x);
                let want = if inside_light {
                    LIGHT
                } else if inside_rect {
                    VEHICLE
                } else if y < 16 {
                    SKY
                } else {
                    ROAD
                };
                assert_eq!(seg.get(y, x), want, "({y}, {x})");
            }
        }
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        assert!(gen_scene(&plain_spec(vec![rect(30, 0, 5, 5)])).is_err());
        let mut bad = plain_spec(vec![]);
        bad.horizon = 1.0;
        assert!(gen_scene(&bad).is_err());
        let mut bad_class = rect(0, 0, 2, 2);
        bad_class.class = 9;
        assert!(gen_scene(&plain_spec(vec![bad_class])).is_err());
    }

    #[test]
    fn identity_weather() {
        let (img, seg) = gen_scene(&plain_spec(vec![rect(18, 2, 5, 7)])).unwrap();
        assert_eq!(
            apply_rain(&img, &seg, &WeatherParams::identity(), 3).unwrap(),
            img
        );
    }

    #[test]
    fn pure_darkening_scales_exactly() {
        let (img, seg) = gen_scene(&plain_spec(vec![rect(18, 2, 5, 7)])).unwrap();
        let wp = WeatherParams {
            darkening: 0.5,
            ..WeatherParams::identity()
        };
        let out = apply_rain(&img, &seg, &wp, 3).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_eq!(*b, a / 2.0);
        }
    }

    #[test]
    fn darkening_lowers_mean_brightness() {
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        let spec = SceneSpec::random(1, 64, 64, &SceneDistribution::default());
        let (img, seg) = gen_scene(&spec).unwrap();
        for d in [0.0, 0.3, 0.9, 0.99] {
            let wp = WeatherParams {
                darkening: d,
                ..WeatherParams::identity()
            };
            assert!(mean(&apply_rain(&img, &seg, &wp, 0).unwrap()) < mean(&img));
        }
    }

    #[test]
    fn reflections_mirror_sky_onto_road() {
        let (img, seg) = gen_scene(&plain_spec(vec![])).unwrap();
        let wp = WeatherParams {
            reflection: 1.0,
            ..WeatherParams::identity()
        };
        let out = apply_rain(&img, &seg, &wp, 0).unwrap();
        let at = |t: &Tensor, c, y, x| t.data()[pixel_index(c, y, x, 32, 40)];
        for x in 0..40 {
            for c in 0..3 {
                assert_eq!(at(&out, c, 16, x), at(&img, c, 15, x));
                assert_eq!(at(&out, c, 31, x), at(&img, c, 0, x));
                assert_eq!(at(&out, c, 3, x), at(&img, c, 3, x));
            }
        }
        assert_eq!(seg, gen_scene(&plain_spec(vec![])).unwrap().1);
    }

    #[test]
    fn full_rain_is_seeded_and_bounded() {
        let spec = SceneSpec::random(4, 64, 64, &SceneDistribution::default());
        let (img, seg) = gen_scene(&spec).unwrap();
        let wp = WeatherParams::random(
            &mut ChaCha8Rng::seed_from_u64(1),
            &WeatherDistribution::default(),
        );
        let a = apply_rain(&img, &seg, &wp, 8).unwrap();
        assert_eq!(a, apply_rain(&img, &seg, &wp, 8).unwrap());
        assert_ne!(a, apply_rain(&img, &seg, &wp, 9).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rgb8_round_trip() {
        let (img, _) = gen_scene(&plain_spec(vec![])).unwrap();
        let back = from_rgb8(&to_rgb8(&img).unwrap());
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(to_rgb8(&back).unwrap(), to_rgb8(&img).unwrap());
    }
}
