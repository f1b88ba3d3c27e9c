//! Deterministic synthetic driving scenes: flat-colored vehicles
//! (rectangles), pedestrians (thin vertical bars) and signs (discs) on a
//! noisy gray background, plus a PPM/text on-disk format.

mod store;

pub use store::{load_dataset, write_dataset, Dataset, Manifest, MANIFEST_FILE};

use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["vehicle", "pedestrian", "sign"];

/// Mean RGB of each class before jitter.
const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [[0.85, 0.15, 0.15], [0.15, 0.25, 0.9], [0.95, 0.9, 0.05]];
const COLOR_JITTER: f64 = 0.05;
const MAX_PLACEMENT_TRIES: usize = 100;
/// Largest allowed intersection with an earlier object, as a fraction of the
/// smaller box.
const MAX_OVERLAP: f64 = 0.25;

/// Inclusive pixel ranges for width and height.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeRange {
    pub w: (usize, usize),
    pub h: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassSizes {
    pub small: SizeRange,
    pub large: SizeRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub img_size: usize,
    /// Inclusive range of attempted objects per image.
    pub objects_per_image: (usize, usize),
    /// Probability of drawing from a class's small range.
    pub small_fraction: f64,
    pub sizes: [ClassSizes; NUM_CLASSES],
    /// Background gray level is drawn from this range per image.
    pub background: (f64, f64),
    /// Per-pixel, per-channel uniform noise in `[-a, a]`.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let r = |w, h| SizeRange { w, h };
        SceneSpec {
            img_size: 64,
            objects_per_image: (1, 6),
            small_fraction: 0.35,
            sizes: [
                ClassSizes {
                    small: r((10, 18), (7, 12)),
                    large: r((18, 40), (12, 28)),
                },
                ClassSizes {
                    small: r((4, 6), (14, 28)),
                    large: r((6, 10), (28, 48)),
                },
                // discs: only `w` is used
                ClassSizes {
                    small: r((8, 14), (8, 14)),
                    large: r((16, 30), (16, 30)),
                },
            ],
            background: (0.25, 0.45),
            noise_amplitude: 0.1,
            seed: 7,
        }
    }
}

impl SceneSpec {
    /// Default scene at `img_size`, with object sizes scaled from the 64 px
    /// ranges (unchanged at 64).
    pub fn with_seed(seed: u64, img_size: usize) -> Self {
        let base = SceneSpec::default();
        let scale = |(a, b): (usize, usize)| {
            let f = |v: usize| ((v * img_size) as f64 / base.img_size as f64).round().max(3.0) as usize;
            (f(a), f(b).max(f(a)))
        };
        let sizes = base.sizes.map(|c| ClassSizes {
            small: SizeRange {
                w: scale(c.small.w),
                h: scale(c.small.h),
            },
            large: SizeRange {
                w: scale(c.large.w),
                h: scale(c.large.h),
            },
        });
        SceneSpec { seed, img_size, sizes, ..base }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || hi < lo {
            return bad(format!("objects_per_image range {lo}..={hi} is invalid"));
        }
        if self.img_size < 8 {
            return bad(format!("img_size {} is too small", self.img_size));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) {
            return bad(format!("small_fraction {} outside [0, 1]", self.small_fraction));
        }
        for (c, s) in self.sizes.iter().enumerate() {
            for r in [s.small, s.large] {
                let ok = |(a, b): (usize, usize)| a >= 3 && b >= a && b <= self.img_size;
                if !ok(r.w) || !ok(r.h) {
                    return bad(format!("class {c} size range {r:?} must lie in [3, {}]", self.img_size));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3, S, S)`, values are multiples of 1/255 in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: Vec<GroundTruth>,
    /// Objects dropped after exhausting placement attempts.
    pub placement_failures: usize,
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Paints one object with its top-left corner at `origin` and returns the
/// tight bounding box.
pub fn place_object(image: &mut Tensor<f32>, class_id: usize, origin: (usize, usize), size: (usize, usize), color: [f64; 3]) -> BBox {
    let (x0, y0) = origin;
    let (w, h) = if class_id == 2 { (size.0, size.0) } else { size };
    let inside = |px: usize, py: usize| {
        if class_id != 2 {
            return true;
        }
        // pixel centers inside the inscribed circle; touches all four sides
        let r = w as f64 / 2.0;
        let dx = px as f64 + 0.5 - r;
        let dy = py as f64 + 0.5 - r;
        dx * dx + dy * dy <= r * r
    };
    for py in 0..h {
        for px in 0..w {
            if inside(px, py) {
                for (c, &v) in color.iter().enumerate() {
                    image.set(&[c, y0 + py, x0 + px], quantize(v));
                }
            }
        }
    }
    BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

pub fn generate_scene(rng: &mut Rng64, spec: &SceneSpec, image_id: usize) -> Sample {
    let s = spec.img_size;
    let base = rng.range(spec.background.0, spec.background.1);
    let a = spec.noise_amplitude;
    let mut image = Tensor::from_fn(&[3, s, s], |_| quantize(base + rng.range(-a, a)));

    let (lo, hi) = spec.objects_per_image;
    let count = rng.int_inclusive(lo as i64, hi as i64) as usize;
    let mut labels: Vec<GroundTruth> = Vec::with_capacity(count);
    let mut failures = 0;
    for _ in 0..count {
        let class_id = rng.below(NUM_CLASSES as u64) as usize;
        let sizes = spec.sizes[class_id];
        let range = if rng.uniform() < spec.small_fraction { sizes.small } else { sizes.large };
        let pick = |rng: &mut Rng64, (a, b): (usize, usize)| rng.int_inclusive(a as i64, b as i64) as usize;
        let w = pick(rng, range.w);
        let h = if class_id == 2 { w } else { pick(rng, range.h) };
        let color: [f64; 3] = std::array::from_fn(|c| CLASS_COLORS[class_id][c] + rng.range(-COLOR_JITTER, COLOR_JITTER));
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x0 = rng.below((s - w + 1) as u64) as usize;
            let y0 = rng.below((s - h + 1) as u64) as usize;
            let candidate = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            let fits = labels
                .iter()
                .all(|g| intersection(&g.bbox, &candidate) <= MAX_OVERLAP * g.bbox.area().min(candidate.area()));
            if fits {
                placed = Some((x0, y0));
                break;
            }
        }
        match placed {
            Some(origin) => {
                let bbox = place_object(&mut image, class_id, origin, (w, h), color);
                labels.push(GroundTruth { bbox, class_id, image_id });
            }
            None => failures += 1,
        }
    }
    Sample {
        image,
        labels,
        placement_failures: failures,
    }
}

/// `n` scenes from one stream, image ids `0..n`.
pub fn generate_split(rng: &mut Rng64, spec: &SceneSpec, n: usize) -> Vec<Sample> {
    (0..n).map(|i| generate_scene(rng, spec, i)).collect()
}

/// Train and validation splits drawn in that order from a single stream seeded
/// by `spec.seed`.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_val: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let mut rng = Rng64::new(spec.seed);
    let train = generate_split(&mut rng, spec, n_train);
    let val = generate_split(&mut rng, spec, n_val);
    Ok((train, val))
}
