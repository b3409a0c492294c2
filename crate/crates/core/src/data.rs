//! Procedural shapes corpus and episodic K-shot sampling.
//!
//! Twelve shape families are split into four folds of three. An episode of
//! the test split draws its class from the held-out fold; the train split
//! draws from the other nine classes. Every sample is a pure function of
//! its class and seed.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::{mix_seed, Tensor};

pub const NUM_CLASSES: usize = 12;
pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = NUM_CLASSES / NUM_FOLDS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    BarH,
    BarV,
    LShape,
    TShape,
    Diamond,
    Crescent,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::Star,
        ShapeClass::BarH,
        ShapeClass::BarV,
        ShapeClass::LShape,
        ShapeClass::TShape,
        ShapeClass::Diamond,
        ShapeClass::Crescent,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid("shape class", format!("unknown class id {id}")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Star => "star",
            ShapeClass::BarH => "bar-h",
            ShapeClass::BarV => "bar-v",
            ShapeClass::LShape => "l-shape",
            ShapeClass::TShape => "t-shape",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Crescent => "crescent",
        }
    }

    /// Membership test in the shape's own frame, where the shape fits the
    /// unit disc and `v` points down.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeClass::Circle => r2 <= 1.0,
            ShapeClass::Square => u.abs() <= SQUARE_HALF_SIDE && v.abs() <= SQUARE_HALF_SIDE,
            ShapeClass::Triangle => in_polygon(u, v, &regular_polygon(3, &[1.0])),
            ShapeClass::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            ShapeClass::Ring => (0.3025..=1.0).contains(&r2),
            ShapeClass::Star => in_polygon(u, v, &regular_polygon(10, &[1.0, 0.45])),
            ShapeClass::BarH => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeClass::BarV => u.abs() <= 0.3 && v.abs() <= 1.0,
            ShapeClass::LShape => {
                ((-0.7..=-0.2).contains(&u) && (-0.9..=0.9).contains(&v))
                    || ((-0.7..=0.7).contains(&u) && (0.4..=0.9).contains(&v))
            }
            ShapeClass::TShape => {
                ((-0.9..=0.9).contains(&u) && (-0.9..=-0.45).contains(&v))
                    || (u.abs() <= 0.25 && (-0.9..=0.9).contains(&v))
            }
            ShapeClass::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeClass::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.64,
        }
    }
}

/// Half side of the square family relative to the placement radius.
pub const SQUARE_HALF_SIDE: f64 = 0.75;

/// Vertices at alternating radii, first vertex pointing up.
fn regular_polygon(count: usize, radii: &[f64]) -> Vec<(f64, f64)> {
    (0..count)
        .map(|i| {
            let angle = -PI / 2.0 + 2.0 * PI * i as f64 / count as f64;
            let r = radii[i % radii.len()];
            (r * angle.cos(), r * angle.sin())
        })
        .collect()
}

fn in_polygon(x: f64, y: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One of the four disjoint class partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassFold {
    pub fold_id: usize,
    pub class_ids: Vec<usize>,
}

pub fn fold(fold_id: usize) -> Result<ClassFold> {
    if fold_id >= NUM_FOLDS {
        return Err(Error::invalid("fold", format!("fold {fold_id} outside 0..{NUM_FOLDS}")));
    }
    Ok(ClassFold {
        fold_id,
        class_ids: (fold_id * CLASSES_PER_FOLD..(fold_id + 1) * CLASSES_PER_FOLD).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn split_classes(split: Split, test_fold: usize) -> Result<Vec<usize>> {
    let held_out = fold(test_fold)?.class_ids;
    Ok(match split {
        Split::Test => held_out,
        Split::Train => (0..NUM_CLASSES).filter(|c| !held_out.contains(c)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub min_fg: usize,
    pub distractor_prob: f64,
    pub max_attempts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_fg: 16,
            distractor_prob: 0.5,
            max_attempts: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!("image_size must be a positive multiple of 8, got {}", self.image_size)));
        }
        if self.min_fg == 0 || self.min_fg > self.image_size * self.image_size {
            return Err(Error::Config("min_fg must lie in 1..=image_size^2".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must lie in [0, 1]".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Where the target shape was drawn, in pixels and radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, 1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor,
    pub class_id: usize,
    pub placement: Placement,
}

impl Sample {
    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Sample,
    pub class_id: usize,
    pub seed: u64,
}

impl Episode {
    /// All K+1 samples of `class_id`, derived from `seed`.
    pub fn generate(cfg: &DataConfig, class_id: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("episode", "K must be at least 1"));
        }
        let query = generate_sample(cfg, class_id, mix_seed(seed, 0))?;
        let support = (1..=k as u64)
            .map(|i| generate_sample(cfg, class_id, mix_seed(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            support,
            query,
            class_id,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// Canonical little-endian serialization used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.class_id as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.support.len() as u64).to_le_bytes());
        for s in self.support.iter().chain(std::iter::once(&self.query)) {
            for &v in s.image.data().iter().chain(s.mask.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

pub fn sample_episode(cfg: &DataConfig, split: Split, test_fold: usize, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::invalid("sample_episode", "K must be at least 1"));
    }
    let classes = split_classes(split, test_fold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let class_id = *classes.choose(&mut rng).expect("every split is non-empty");
    Episode::generate(cfg, class_id, k, seed)
}

/// Smooth random field in `[-1, 1]`: a coarse grid of uniform values,
/// bilinearly interpolated up to `size x size`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let grid = rng.gen_range(3..=8usize);
    let knots: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scale = (grid - 1) as f64 / (size - 1).max(1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y as f64 * scale;
        let (y0, ly) = ((gy.floor() as usize).min(grid - 2), gy - (gy.floor() as usize).min(grid - 2) as f64);
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx.floor() as usize).min(grid - 2);
            let lx = gx - x0 as f64;
            let at = |yy: usize, xx: usize| knots[yy * grid + xx];
            let top = at(y0, x0) * (1.0 - lx) + at(y0, x0 + 1) * lx;
            let bot = at(y0 + 1, x0) * (1.0 - lx) + at(y0 + 1, x0 + 1) * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

fn random_placement(rng: &mut ChaCha8Rng, size: usize) -> Placement {
    let s = size as f64;
    Placement {
        cx: rng.gen_range(0.3 * s..0.7 * s),
        cy: rng.gen_range(0.3 * s..0.7 * s),
        radius: rng.gen_range(0.16 * s..0.3 * s),
        rotation: rng.gen_range(-20f64..20.0).to_radians(),
    }
}

/// Pixel-centre coverage of `class` at `placement`.
pub fn rasterize(class: ShapeClass, placement: &Placement, size: usize) -> Vec<bool> {
    let (sin, cos) = placement.rotation.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - placement.cx;
            let dy = y as f64 + 0.5 - placement.cy;
            let u = (dx * cos + dy * sin) / placement.radius;
            let v = (-dx * sin + dy * cos) / placement.radius;
            out.push(class.contains(u, v));
        }
    }
    out
}

fn paint(image: &mut [f64], size: usize, region: &[bool], color: [f64; 3], texture: &[f64]) {
    let plane = size * size;
    for (p, _) in region.iter().enumerate().filter(|(_, &inside)| inside) {
        for (c, &base) in color.iter().enumerate() {
            image[c * plane + p] = (base * (1.0 + 0.15 * texture[p])).clamp(0.0, 1.0);
        }
    }
}

fn contrasting_color(rng: &mut ChaCha8Rng, against: [f64; 3]) -> [f64; 3] {
    let mut color = [0.0; 3];
    for _ in 0..16 {
        color = [rng.gen(), rng.gen(), rng.gen()];
        let diff: f64 = color.iter().zip(&against).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= 0.25 {
            break;
        }
    }
    color
}

/// Render one labelled sample of `class_id`.
pub fn generate_sample(cfg: &DataConfig, class_id: usize, seed: u64) -> Result<Sample> {
    let class = ShapeClass::from_id(class_id)?;
    let size = cfg.image_size;
    if size < 8 {
        return Err(Error::invalid("generate_sample", "image size must be at least 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts.max(1) {
        let plane = size * size;
        let base: [f64; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let mut image = vec![0.0; 3 * plane];
        for c in 0..3 {
            let amp = rng.gen_range(0.1..0.35);
            let noise = value_noise(&mut rng, size);
            for p in 0..plane {
                image[c * plane + p] = (base[c] + amp * noise[p]).clamp(0.0, 1.0);
            }
        }

        if rng.gen_bool(cfg.distractor_prob) {
            let others: Vec<_> = ShapeClass::ALL.iter().filter(|&&c| c != class).collect();
            let distractor = **others.choose(&mut rng).expect("eleven other classes");
            let placement = random_placement(&mut rng, size);
            let color = contrasting_color(&mut rng, base);
            let texture = value_noise(&mut rng, size);
            paint(&mut image, size, &rasterize(distractor, &placement, size), color, &texture);
        }

        let placement = random_placement(&mut rng, size);
        let color = contrasting_color(&mut rng, base);
        let texture = value_noise(&mut rng, size);
        let region = rasterize(class, &placement, size);
        paint(&mut image, size, &region, color, &texture);

        let fg = region.iter().filter(|&&r| r).count();
        if fg < cfg.min_fg {
            continue;
        }
        let image = Tensor::new(&[1, 3, size, size], image.into_iter().map(|v| v as f32).collect())?;
        let mask = Tensor::new(&[1, 1, size, size], region.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect())?;
        return Ok(Sample {
            image,
            mask,
            class_id,
            placement,
        });
    }
    Err(Error::DegenerateSample {
        class_id,
        min_fg: cfg.min_fg,
        attempts: cfg.max_attempts.max(1),
    })
}

/// Nearest-neighbour source index: the input cell containing the centre of
/// output cell `dst`.
pub fn nearest_index(dst: usize, len_in: usize, len_out: usize) -> usize {
    ((2 * dst + 1) * len_in / (2 * len_out)).min(len_in - 1)
}

/// Nearest-neighbour resize of a `[N, 1, H, W]` binary mask.
pub fn downsample_mask<T: crate::Real>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4("downsample_mask")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("downsample_mask", "output size must be positive"));
    }
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in mask.data().chunks(h * w) {
        for y in 0..out_h {
            let sy = nearest_index(y, h, out_h);
            for x in 0..out_w {
                out.push(plane[sy * w + nearest_index(x, w, out_w)]);
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB bytes of a `[1, 3, H, W]` image.
pub fn image_rgb_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (_, c, h, w) = image.dims4("image_rgb_bytes")?;
    if c != 3 {
        return Err(Error::shape("image_rgb_bytes", "channels", 3, c));
    }
    let plane = h * w;
    Ok((0..plane)
        .flat_map(|p| (0..3).map(move |ch| to_u8(image.data()[ch * plane + p])))
        .collect())
}

/// Write `per_class` samples of every class as `<dir>/<class>/<i>_image.ppm`
/// and `<dir>/<class>/<i>_mask.pgm`.
pub fn dump_corpus(cfg: &DataConfig, dir: &Path, per_class: usize, seed: u64) -> Result<()> {
    let size = cfg.image_size;
    for class in ShapeClass::ALL {
        let class_dir = dir.join(class.name());
        std::fs::create_dir_all(&class_dir)?;
        for i in 0..per_class {
            let sample = generate_sample(cfg, class.id(), mix_seed(mix_seed(seed, class.id() as u64), i as u64))?;
            pnm::write_ppm(&class_dir.join(format!("{i:04}_image.ppm")), size, size, &image_rgb_bytes(&sample.image)?)?;
            let mask: Vec<u8> = sample.mask.data().iter().map(|&m| to_u8(m)).collect();
            pnm::write_pgm(&class_dir.join(format!("{i:04}_mask.pgm")), size, size, &mask)?;
        }
    }
    Ok(())
}
