//! Synthetic multi-scale segmentation data.
//!
//! Scenes composite discs, rectangles and thin bars over a noisy background.
//! Small and large variants of the same shape share a color distribution, so
//! telling their classes apart requires enough context to judge object size —
//! local appearance alone is ambiguous. Size strata span at least a 1:8
//! ratio to exercise multi-scale aggregation.

pub mod augment;
pub mod dataset;
pub mod pnm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// One image/label pair. The image is (1,3,H,W) with values in [0,1]; the
/// label map is (1,H,W) with class ids or the ignore value.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, label: LabelMap) -> Self {
        let s = image.shape();
        assert_eq!(
            (s.h, s.w),
            (label.h, label.w),
            "image {}x{} and label {}x{} disagree",
            s.h,
            s.w,
            label.h,
            label.w
        );
        Sample { image, label }
    }

    pub fn height(&self) -> usize {
        self.label.h
    }

    pub fn width(&self) -> usize {
        self.label.w
    }
}

/// Inclusive pixel-radius range of one object-size stratum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RadiusRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    /// Total classes including background class 0.
    pub num_classes: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub small: RadiusRange,
    pub medium: RadiusRange,
    pub large: RadiusRange,
    pub objects_per_image: usize,
    /// Standard deviation of the additive per-pixel Gaussian noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 6,
            canvas: 64,
            small: RadiusRange { min: 2, max: 4 },
            medium: RadiusRange { min: 6, max: 12 },
            large: RadiusRange { min: 16, max: 28 },
            objects_per_image: 7,
            noise_level: 0.04,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("scene_spec", "need at least background plus one class"));
        }
        if self.canvas < 8 {
            return Err(Error::invalid("scene_spec", "canvas too small"));
        }
        for (name, r) in [("small", self.small), ("medium", self.medium), ("large", self.large)] {
            if r.min == 0 || r.max < r.min {
                return Err(Error::invalid("scene_spec", format!("bad {name} radius range")));
            }
        }
        if self.large.max < 8 * self.small.min {
            return Err(Error::invalid(
                "scene_spec",
                format!(
                    "size strata span {}:{} is below the required 1:8 ratio",
                    self.small.min, self.large.max
                ),
            ));
        }
        Ok(())
    }
}

const BACKGROUND_VALUE: f64 = 0.5;

/// Mean image value used when augmentation pads a crop.
pub const PAD_VALUE: f64 = BACKGROUND_VALUE;

#[derive(Clone, Copy)]
enum ShapeKind {
    Disc,
    Rect,
    Bar,
}

#[derive(Clone, Copy)]
enum Stratum {
    Small,
    Medium,
    Large,
}

/// Shape family, size stratum and base color per foreground class. Small and
/// large variants of a family share the color on purpose.
fn class_style(class: usize) -> (ShapeKind, Stratum, [f64; 3]) {
    const DISC_COLOR: [f64; 3] = [0.80, 0.25, 0.25];
    const RECT_COLOR: [f64; 3] = [0.25, 0.35, 0.80];
    const BAR_COLOR: [f64; 3] = [0.25, 0.75, 0.35];
    match (class - 1) % 5 {
        0 => (ShapeKind::Disc, Stratum::Small, DISC_COLOR),
        1 => (ShapeKind::Disc, Stratum::Large, DISC_COLOR),
        2 => (ShapeKind::Rect, Stratum::Small, RECT_COLOR),
        3 => (ShapeKind::Rect, Stratum::Large, RECT_COLOR),
        _ => (ShapeKind::Bar, Stratum::Medium, BAR_COLOR),
    }
}

fn stratum_range(spec: &SceneSpec, stratum: Stratum) -> RadiusRange {
    match stratum {
        Stratum::Small => spec.small,
        Stratum::Medium => spec.medium,
        Stratum::Large => spec.large,
    }
}

/// Deterministic per-sample stream: mixes the dataset seed with the index.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Renders sample `index` of the dataset described by `spec`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = sample_rng(spec.seed, index);
    let side = spec.canvas;
    let shape = Shape::new(1, 3, side, side);
    let mut image = Tensor::full(shape, BACKGROUND_VALUE);
    let mut label = LabelMap::filled(1, side, side, 0);

    for _ in 0..spec.objects_per_image {
        let class = rng.random_range(1..spec.num_classes);
        let (kind, stratum, base_color) = class_style(class);
        let range = stratum_range(spec, stratum);
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        let color: [f64; 3] = std::array::from_fn(|c| (base_color[c] + jitter[c]).clamp(0.0, 1.0));
        let cy = rng.random_range(0..side) as isize;
        let cx = rng.random_range(0..side) as isize;

        let paint = |y: isize, x: isize, image: &mut Tensor, label: &mut LabelMap| {
            if y < 0 || x < 0 || y as usize >= side || x as usize >= side {
                return;
            }
            let (y, x) = (y as usize, x as usize);
            let data = image.data_mut();
            for c in 0..3 {
                data[shape.index(0, c, y, x)] = color[c];
            }
            label.data_mut()[y * side + x] = class as u8;
        };

        match kind {
            ShapeKind::Disc => {
                let r = rng.random_range(range.min..=range.max) as isize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy * dy + dx * dx <= r * r {
                            paint(cy + dy, cx + dx, &mut image, &mut label);
                        }
                    }
                }
            }
            ShapeKind::Rect => {
                let ry = rng.random_range(range.min..=range.max) as isize;
                let rx = rng.random_range(range.min..=range.max) as isize;
                for dy in -ry..=ry {
                    for dx in -rx..=rx {
                        paint(cy + dy, cx + dx, &mut image, &mut label);
                    }
                }
            }
            ShapeKind::Bar => {
                let len = rng.random_range(range.min..=range.max) as isize * 2;
                let thickness = rng.random_range(1..=2usize) as isize;
                let horizontal = rng.random_bool(0.5);
                for along in -len..=len {
                    for across in 0..thickness {
                        let (dy, dx) = if horizontal { (across, along) } else { (along, across) };
                        paint(cy + dy, cx + dx, &mut image, &mut label);
                    }
                }
            }
        }
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level).expect("valid noise level");
        let data = image.data_mut();
        for v in data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(Sample::new(image, label))
}

/// Pixel counts per class over the first `count` samples of a spec.
pub fn class_histogram(spec: &SceneSpec, count: u64) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; spec.num_classes];
    for i in 0..count {
        let sample = generate_scene(spec, i)?;
        for &v in sample.label.data() {
            hist[v as usize] += 1;
        }
    }
    Ok(hist)
}
