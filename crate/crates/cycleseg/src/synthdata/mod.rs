//! Seeded synthetic co-segmentation scenes.
//!
//! Each group shares one common shape class drawn in a group-wide base color
//! (jittered per image) over a tinted noisy background, plus up to two
//! distractor shapes of other classes in well-separated hues. Masks mark
//! exactly the common shape's pixels. Everything is a pure function of the
//! seed.

pub mod pnm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shape class '{s}'")))
    }

    fn contains(&self, dx: f64, dy: f64, s: f64) -> bool {
        match self {
            ShapeClass::Disk => dx * dx + dy * dy <= s * s,
            ShapeClass::Square => dx.abs() <= 0.9 * s && dy.abs() <= 0.9 * s,
            // apex up: (0,-s), base corners (-s, s) and (s, s)
            ShapeClass::Triangle => dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0,
            ShapeClass::Cross => {
                (dx.abs() <= s / 3.0 && dy.abs() <= s) || (dy.abs() <= s / 3.0 && dx.abs() <= s)
            }
            ShapeClass::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= s * s && d2 >= (0.55 * s) * (0.55 * s)
            }
        }
    }
}

/// Scene recipe: canvas, class vocabulary (the split lives here), distractor
/// budget, background noise amplitude, and the group seed.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub canvas: usize,
    pub classes: Vec<ShapeClass>,
    /// vocabulary distractors are drawn from (minus the common class);
    /// empty means `classes`. Letting evaluation scenes borrow training
    /// shapes as distractors keeps the common-object identity unambiguous
    /// when the held-out class list is short.
    pub distractor_classes: Vec<ShapeClass>,
    pub max_distractors: usize,
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            canvas: 64,
            classes: ShapeClass::ALL.to_vec(),
            distractor_classes: Vec::new(),
            max_distractors: 2,
            noise_amp: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 16 {
            return Err(Error::InvalidConfig("canvas must be >= 16".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("class vocabulary is empty".into()));
        }
        if self.max_distractors > 2 {
            return Err(Error::InvalidConfig("at most 2 distractors".into()));
        }
        Ok(())
    }
}

/// One co-segmentation instance: an ordered set of images sharing a common
/// class, with pixel-perfect masks.
pub struct ImageGroup {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub common: ShapeClass,
}

struct Instance {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f64; 3],
}

impl Instance {
    fn overlaps(&self, other: &Instance) -> bool {
        let gap = 1.0;
        (self.cx - other.cx).abs() <= self.size + other.size + gap
            && (self.cy - other.cy).abs() <= self.size + other.size + gap
    }
}

/// Mix a base seed with an index into a fresh stream seed (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Generate one group of `group_size >= 2` images sharing a common class.
pub fn generate(spec: &SceneSpec, group_size: usize) -> Result<ImageGroup> {
    generate_inner(spec, group_size, None)
}

/// Same, but with the common class pinned (it must be in the vocabulary);
/// used for per-class evaluation groups.
pub fn generate_for_class(
    spec: &SceneSpec,
    group_size: usize,
    common: ShapeClass,
) -> Result<ImageGroup> {
    if !spec.classes.contains(&common) {
        return Err(Error::InvalidConfig(format!(
            "class {} not in the vocabulary",
            common.name()
        )));
    }
    generate_inner(spec, group_size, Some(common))
}

fn generate_inner(
    spec: &SceneSpec,
    group_size: usize,
    force_common: Option<ShapeClass>,
) -> Result<ImageGroup> {
    spec.validate()?;
    if group_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let canvas = spec.canvas as f64;

    let common =
        force_common.unwrap_or_else(|| spec.classes[rng.gen_range(0..spec.classes.len())]);
    let base_hue: f64 = rng.gen_range(0.0..1.0);
    let base_sat: f64 = rng.gen_range(0.55..0.95);
    let base_val: f64 = rng.gen_range(0.65..1.0);
    // hues already taken group-wide; distractors must stay clear of every
    // one of them or a recurring distractor color would be a second
    // legitimate common object
    let mut used_hues: Vec<f64> = vec![base_hue];

    let size_range = (canvas * 0.12, canvas * 0.21);
    let mut images = Vec::with_capacity(group_size);
    let mut masks = Vec::with_capacity(group_size);

    for _ in 0..group_size {
        let mut instances: Vec<Instance> = Vec::new();

        // common instance, always present and fully in canvas
        let size = rng.gen_range(size_range.0..size_range.1);
        let cx = rng.gen_range(size + 1.0..canvas - size - 1.0);
        let cy = rng.gen_range(size + 1.0..canvas - size - 1.0);
        let jitter = |rng: &mut ChaCha8Rng, v: f64| (v + rng.gen_range(-0.07..0.07)).clamp(0.0, 1.0);
        let base_rgb = hsv_to_rgb(base_hue, base_sat, base_val);
        let color = [
            jitter(&mut rng, base_rgb[0]),
            jitter(&mut rng, base_rgb[1]),
            jitter(&mut rng, base_rgb[2]),
        ];
        instances.push(Instance {
            class: common,
            cx,
            cy,
            size,
            color,
        });

        // distractors from other classes, hue kept away from the base
        let pool: &[ShapeClass] = if spec.distractor_classes.is_empty() {
            &spec.classes
        } else {
            &spec.distractor_classes
        };
        let others: Vec<ShapeClass> = pool
            .iter()
            .copied()
            .filter(|c| *c != common)
            .collect();
        let want = if others.is_empty() {
            0
        } else {
            rng.gen_range(0..=spec.max_distractors)
        };
        for _ in 0..want {
            let class = others[rng.gen_range(0..others.len())];
            let size = rng.gen_range(size_range.0..size_range.1);
            let mut hue = rng.gen_range(0.0..1.0);
            for _ in 0..24 {
                let clear_of_base = hue_distance(hue, base_hue) >= 0.18;
                let clear_of_rest = used_hues[1..]
                    .iter()
                    .all(|&h| hue_distance(hue, h) >= 0.08);
                if clear_of_base && clear_of_rest {
                    break;
                }
                hue = rng.gen_range(0.0..1.0);
            }
            used_hues.push(hue);
            let color = hsv_to_rgb(hue, rng.gen_range(0.55..0.95), rng.gen_range(0.65..1.0));
            let mut placed = false;
            for _ in 0..40 {
                let cx = rng.gen_range(size + 1.0..canvas - size - 1.0);
                let cy = rng.gen_range(size + 1.0..canvas - size - 1.0);
                let cand = Instance {
                    class,
                    cx,
                    cy,
                    size,
                    color,
                };
                if instances.iter().all(|i| !i.overlaps(&cand)) {
                    instances.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                // crowded canvas: drop this distractor rather than overlap
                continue;
            }
        }

        // raster: background tint + noise, then instances
        let h = spec.canvas;
        let w = spec.canvas;
        let tint: [f64; 3] = [
            rng.gen_range(0.12..0.4),
            rng.gen_range(0.12..0.4),
            rng.gen_range(0.12..0.4),
        ];
        let mut pixels = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let n: f64 = rng.gen_range(-spec.noise_amp..spec.noise_amp);
                for ch in 0..3 {
                    pixels[ch * h * w + y * w + x] = (tint[ch] + n).clamp(0.0, 1.0);
                }
            }
        }
        let mut mask = vec![0.0; h * w];
        for (idx, inst) in instances.iter().enumerate() {
            let is_common = idx == 0;
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 + 0.5) - inst.cx;
                    let dy = (y as f64 + 0.5) - inst.cy;
                    if inst.class.contains(dx, dy, inst.size) {
                        for ch in 0..3 {
                            pixels[ch * h * w + y * w + x] = inst.color[ch];
                        }
                        if is_common {
                            mask[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }

        images.push(Tensor::new(vec![1, 3, h, w], pixels)?);
        masks.push(Tensor::new(vec![1, 1, h, w], mask)?);
    }

    Ok(ImageGroup {
        images,
        masks,
        common,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec {
            seed: 77,
            ..Default::default()
        };
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        assert_eq!(a.common, b.common);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.bit_eq(y));
        }
        for (x, y) in a.masks.iter().zip(&b.masks) {
            assert!(x.bit_eq(y));
        }
        let c = generate(
            &SceneSpec {
                seed: 78,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(a.images.iter().zip(&c.images).any(|(x, y)| !x.bit_eq(y)));
    }

    #[test]
    fn every_mask_is_nonempty_binary_and_images_in_range() {
        for seed in 0..30 {
            let spec = SceneSpec {
                seed,
                ..Default::default()
            };
            let g = generate(&spec, 2).unwrap();
            for m in &g.masks {
                let count: f64 = m.data().iter().sum();
                assert!(count > 0.0, "seed {seed}: empty mask");
                assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
            for img in &g.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn disk_mask_area_tracks_pi_r_squared() {
        // rasterization oracle: count pixels of a centered disk
        for &r in &[4.0f64, 6.0, 9.0, 12.0] {
            let canvas = 64;
            let c = canvas as f64 / 2.0;
            let mut count = 0.0;
            for y in 0..canvas {
                for x in 0..canvas {
                    let dx = (x as f64 + 0.5) - c;
                    let dy = (y as f64 + 0.5) - c;
                    if ShapeClass::Disk.contains(dx, dy, r) {
                        count += 1.0;
                    }
                }
            }
            let ideal = std::f64::consts::PI * r * r;
            assert!(
                (count - ideal).abs() <= 4.0 * r,
                "r={r}: area {count} vs {ideal}"
            );
        }
    }

    #[test]
    fn distractors_never_use_the_common_class() {
        // with 2 classes, any distractor is the other class; masks must
        // cover exactly one connected common instance area anyway, so this
        // is an indirect check via the split rule below
        let spec = SceneSpec {
            classes: vec![ShapeClass::Disk],
            seed: 5,
            ..Default::default()
        };
        let g = generate(&spec, 2).unwrap();
        assert_eq!(g.common, ShapeClass::Disk);
    }

    #[test]
    fn class_split_discipline() {
        let train = SceneSpec {
            classes: vec![ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle],
            ..Default::default()
        };
        let test = SceneSpec {
            classes: vec![ShapeClass::Cross, ShapeClass::Ring],
            ..Default::default()
        };
        let mut train_classes = std::collections::HashSet::new();
        let mut test_classes = std::collections::HashSet::new();
        for i in 0..40 {
            let mut s = train.clone();
            s.seed = derive_seed(1, i);
            train_classes.insert(generate(&s, 2).unwrap().common);
            let mut s = test.clone();
            s.seed = derive_seed(2, i);
            test_classes.insert(generate(&s, 2).unwrap().common);
        }
        assert!(train_classes.is_disjoint(&test_classes));
        assert!(train_classes.len() >= 2, "should sample several classes");
    }

    #[test]
    fn rejects_bad_configs() {
        let spec = SceneSpec::default();
        assert!(generate(&spec, 1).is_err());
        let bad = SceneSpec {
            classes: vec![],
            ..Default::default()
        };
        assert!(generate(&bad, 2).is_err());
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(0, 0);
        let b = derive_seed(0, 1);
        let c = derive_seed(1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(0, 0));
    }
}
