//! Seeded synthetic head-CT phantoms.
//!
//! Every phantom is an ellipsoidal head: air (-1000 HU) outside, a 3 mm
//! skull shell (~800 HU, above the 300 HU skull-proxy cut), and brain
//! parenchyma drawn from a per-case base level plus Gaussian noise, clamped
//! to [-20, 40] HU. Voxels straddling two tissues take the mean over a
//! 3x3x3 sub-grid (partial volume), so bone and calcium get rims in the
//! blood HU range. Lesions are ellipsoids of 50-90 HU placed in the central
//! part of the brain. Calcification distractors are small spheres of
//! 150-400 HU, most of them hugging the inner table of the skull (dural
//! calcification), the rest deep (basal-ganglia-like). All values are rounded
//! to whole HU so that a phantom survives a trip through the slice format.
//!
//! Recipes differ in lesion contrast and size and in calcification load:
//!
//! | recipe            | lesions | lesion HU | radius mm | calcifications |
//! |-------------------|---------|-----------|-----------|----------------|
//! | `public_positive` | 1-2     | 68-90     | 3.5-6.0   | none           |
//! | `local_positive`  | 1-2     | 52-90     | 2.5-6.0   | 0-2            |
//! | `subtle_positive` | 1       | 50-60     | 2.5-4.0   | 0-1            |
//! | `hard_negative`   | none    | -         | -         | 1-3            |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dicom::{SliceImage, VolumeImage};
use crate::grid::{Grid, Mask, Shape, Spacing};

pub const AIR_HU: f64 = -1000.0;
pub const BRAIN_HU_RANGE: (f64, f64) = (-20.0, 40.0);
pub const SKULL_THICKNESS_MM: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub spacing: Spacing,
    /// Range for the per-case parenchyma base level.
    pub brain_base_hu: (f64, f64),
    pub noise_sd: f64,
    pub lesion_count: (usize, usize),
    pub lesion_hu: (f64, f64),
    pub lesion_radius_mm: (f64, f64),
    pub calcification_count: (usize, usize),
    pub calcification_hu: (f64, f64),
    pub calcification_radius_mm: (f64, f64),
    /// Fraction of calcifications placed against the skull.
    pub dural_fraction: f64,
}

impl PhantomSpec {
    fn base(shape: Shape, spacing: Spacing) -> Self {
        Self {
            shape,
            spacing,
            brain_base_hu: (22.0, 34.0),
            noise_sd: 4.0,
            lesion_count: (0, 0),
            lesion_hu: (50.0, 90.0),
            lesion_radius_mm: (2.5, 6.0),
            calcification_count: (0, 0),
            calcification_hu: (150.0, 400.0),
            calcification_radius_mm: (1.5, 3.0),
            dural_fraction: 0.7,
        }
    }

    pub fn public_positive(shape: Shape, spacing: Spacing) -> Self {
        Self {
            lesion_count: (1, 2),
            lesion_hu: (68.0, 90.0),
            lesion_radius_mm: (3.5, 6.0),
            ..Self::base(shape, spacing)
        }
    }

    pub fn local_positive(shape: Shape, spacing: Spacing) -> Self {
        Self {
            lesion_count: (1, 2),
            lesion_hu: (52.0, 90.0),
            calcification_count: (0, 2),
            ..Self::base(shape, spacing)
        }
    }

    pub fn subtle_positive(shape: Shape, spacing: Spacing) -> Self {
        Self {
            lesion_count: (1, 1),
            lesion_hu: (50.0, 60.0),
            lesion_radius_mm: (2.5, 4.0),
            calcification_count: (0, 1),
            ..Self::base(shape, spacing)
        }
    }

    pub fn hard_negative(shape: Shape, spacing: Spacing) -> Self {
        Self {
            calcification_count: (1, 3),
            ..Self::base(shape, spacing)
        }
    }

    pub fn generate(&self, seed: u64) -> Phantom {
        generate(self, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Centre in mm, relative to voxel (0,0,0).
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub hu: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub seed: u64,
    pub volume: VolumeImage,
    pub mask: Mask,
    pub lesions: Vec<Ellipsoid>,
    pub calcifications: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn is_positive(&self) -> bool {
        self.mask.count() > 0
    }

    /// Encode as stored slices (stored = HU + 1024, slope 1, intercept -1024).
    pub fn to_slices(&self) -> Vec<SliceImage> {
        let v = &self.volume;
        let s = v.shape();
        (0..s.nz)
            .map(|z| SliceImage {
                study_uid: v.study_uid.clone(),
                series_uid: v.series_uid.clone(),
                sop_uid: format!("{}.{}", v.series_uid, z + 1),
                rows: s.ny as u16,
                cols: s.nx as u16,
                pixel_spacing: [v.spacing.sy, v.spacing.sx],
                slice_location: v.origin[2] + z as f64 * v.spacing.sz,
                image_position: [v.origin[0], v.origin[1], v.origin[2] + z as f64 * v.spacing.sz],
                rescale_slope: 1.0,
                rescale_intercept: -1024.0,
                bits_stored: 16,
                pixel_data: v
                    .voxels
                    .slice_z(z)
                    .iter()
                    .map(|&hu| (hu + 1024.0) as i16)
                    .collect(),
            })
            .collect()
    }
}

pub fn study_uid_for_seed(seed: u64) -> String {
    format!("1.2.826.0.1.3680043.9.7.{seed}")
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn count(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn generate(spec: &PhantomSpec, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.shape;
    let sp = spec.spacing;
    let center = [
        (shape.nx as f64 - 1.0) / 2.0 * sp.sx,
        (shape.ny as f64 - 1.0) / 2.0 * sp.sy,
        (shape.nz as f64 - 1.0) / 2.0 * sp.sz,
    ];
    let outer = [
        0.46 * shape.nx as f64 * sp.sx,
        0.44 * shape.ny as f64 * sp.sy,
        0.9 * shape.nz as f64 * sp.sz,
    ];
    let inner = outer.map(|a| (a - SKULL_THICKNESS_MM).max(a * 0.5));
    let rho = |p: [f64; 3], axes: [f64; 3]| -> f64 {
        (0..3)
            .map(|k| ((p[k] - center[k]) / axes[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    // Random point whose normalized radius inside the brain lies in [lo, hi).
    let point_in_shell = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> [f64; 3] {
        let r = rng.random_range(lo..hi);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let u: f64 = rng.random_range(-0.6..0.6);
        let h = (1.0 - u * u).sqrt();
        let dir = [h * theta.cos(), h * theta.sin(), u];
        [
            center[0] + r * dir[0] * inner[0],
            center[1] + r * dir[1] * inner[1],
            center[2] + r * dir[2] * inner[2],
        ]
    };

    let base = uniform(&mut rng, spec.brain_base_hu);

    let mut calcifications = Vec::new();
    for _ in 0..count(&mut rng, spec.calcification_count) {
        let dural = rng.random::<f64>() < spec.dural_fraction;
        let c = if dural {
            point_in_shell(&mut rng, 0.82, 0.93)
        } else {
            point_in_shell(&mut rng, 0.0, 0.4)
        };
        let r = uniform(&mut rng, spec.calcification_radius_mm);
        calcifications.push(Ellipsoid {
            center: c,
            radii: [r, r, r.max(0.6 * sp.sz)],
            hu: uniform(&mut rng, spec.calcification_hu),
        });
    }
    let mut lesions = Vec::new();
    for _ in 0..count(&mut rng, spec.lesion_count) {
        let c = point_in_shell(&mut rng, 0.0, 0.5);
        let radii = [
            uniform(&mut rng, spec.lesion_radius_mm),
            uniform(&mut rng, spec.lesion_radius_mm),
            uniform(&mut rng, spec.lesion_radius_mm).max(0.75 * sp.sz),
        ];
        lesions.push(Ellipsoid {
            center: c,
            radii,
            hu: uniform(&mut rng, spec.lesion_hu),
        });
    }

    // Noise-free tissue value at a point, and that tissue's noise gain.
    let tissue = |p: [f64; 3]| -> (f64, f64) {
        if rho(p, outer) > 1.0 {
            (AIR_HU, 0.0)
        } else if rho(p, inner) > 1.0 {
            (800.0, 10.0)
        } else if let Some(l) = lesions.iter().find(|l| l.contains(p)) {
            (l.hu, 1.0)
        } else if let Some(c) = calcifications.iter().find(|c| c.contains(p)) {
            (c.hu, 3.0)
        } else {
            (base, 1.0)
        }
    };
    const SUB: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];

    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).expect("finite noise sd");
    let mut mask = Vec::with_capacity(shape.len());
    let mut voxels = Vec::with_capacity(shape.len());
    for z in 0..shape.nz {
        for y in 0..shape.ny {
            for x in 0..shape.nx {
                let p = [x as f64 * sp.sx, y as f64 * sp.sy, z as f64 * sp.sz];
                let n = noise.sample(&mut rng);
                // Partial volume: average the tissue over a 3x3x3 sub-grid.
                let (mut value, mut gain) = (0.0, 0.0);
                let mut pure_brain = true;
                for dz in SUB {
                    for dy in SUB {
                        for dx in SUB {
                            let q = [p[0] + dx * sp.sx, p[1] + dy * sp.sy, p[2] + dz * sp.sz];
                            let (v, g) = tissue(q);
                            pure_brain &= v == base && g == 1.0;
                            value += v;
                            gain += g;
                        }
                    }
                }
                let mut hu = value / 27.0 + n * gain / 27.0;
                if pure_brain {
                    hu = hu.clamp(BRAIN_HU_RANGE.0, BRAIN_HU_RANGE.1);
                }
                mask.push(lesions.iter().any(|l| l.contains(p)));
                voxels.push(hu.round());
            }
        }
    }

    let study_uid = study_uid_for_seed(seed);
    Phantom {
        seed,
        volume: VolumeImage {
            series_uid: format!("{study_uid}.1"),
            study_uid,
            spacing: sp,
            origin: [0.0, 0.0, 0.0],
            voxels: Grid::from_vec(shape, voxels).expect("generated full grid"),
        },
        mask: Grid::from_vec(shape, mask).expect("generated full grid"),
        lesions,
        calcifications,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::assemble_volume;

    fn shape() -> Shape {
        Shape::new(32, 32, 12)
    }

    #[test]
    fn generation_is_seeded() {
        let spec = PhantomSpec::local_positive(shape(), Spacing::new(1.0, 1.0, 2.0));
        assert_eq!(spec.generate(11), spec.generate(11));
        assert_ne!(spec.generate(11).volume, spec.generate(12).volume);
    }

    #[test]
    fn value_ranges_follow_recipe() {
        let sp = Spacing::new(1.0, 1.0, 2.0);
        for seed in 0..5 {
            let p = PhantomSpec::hard_negative(shape(), sp).generate(seed);
            assert!(!p.is_positive());
            assert!(!p.calcifications.is_empty());
            assert!(p.calcifications.iter().all(|c| (150.0..400.0).contains(&c.hu)));
            let pos = PhantomSpec::public_positive(shape(), sp).generate(seed);
            assert!(pos.is_positive());
            for (&hu, &m) in pos.volume.voxels.as_slice().iter().zip(pos.mask.as_slice()) {
                if m {
                    assert!(hu > 40.0, "lesion voxel at {hu} HU");
                }
            }
            let skull = pos.volume.voxels.as_slice().iter().filter(|&&h| h > 300.0).count();
            assert!(skull > 0, "no skull-proxy shell");
        }
    }

    #[test]
    fn slices_reassemble_to_the_same_volume() {
        let p = PhantomSpec::local_positive(shape(), Spacing::new(0.8, 0.8, 2.5)).generate(3);
        let v = assemble_volume(p.to_slices()).unwrap();
        assert_eq!(v, p.volume);
    }
}
