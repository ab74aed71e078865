//! Handcrafted per-voxel features for the reference classifier.

use crate::dicom::VolumeImage;
use crate::grid::{Grid, Shape, Spacing};

/// Voxels above this HU value form the skull-proxy shell.
pub const SHELL_HU: f64 = 300.0;

/// Soft-tissue window. The classifier is fitted on, and the pipeline only
/// scores, voxels inside it; air and bone are never lesion.
pub const TISSUE_WINDOW_HU: (f64, f64) = (-100.0, 100.0);

pub fn in_tissue_window(hu: f64) -> bool {
    (TISSUE_WINDOW_HU.0..=TISSUE_WINDOW_HU.1).contains(&hu)
}

pub const FEATURE_COUNT: usize = 5;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "hu",
    "local_mean_r1",
    "local_std_r1",
    "gradient_magnitude",
    "dist_to_boundary",
];

/// `[hu, local_mean_r1, local_std_r1, gradient_magnitude, dist_to_boundary]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelFeatures(pub [f64; FEATURE_COUNT]);

impl VoxelFeatures {
    pub fn hu(&self) -> f64 {
        self.0[0]
    }
    pub fn local_mean(&self) -> f64 {
        self.0[1]
    }
    pub fn local_std(&self) -> f64 {
        self.0[2]
    }
    pub fn gradient_magnitude(&self) -> f64 {
        self.0[3]
    }
    pub fn dist_to_boundary(&self) -> f64 {
        self.0[4]
    }
}

pub type FeatureGrid = Grid<VoxelFeatures>;

#[inline]
fn clamp_step(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).clamp(0, n as isize - 1) as usize
}

/// Compute features for every voxel. Neighbourhoods at the volume border are
/// clamped (edge voxels are replicated), so every voxel sees 27 samples.
pub fn extract_features(volume: &VolumeImage) -> FeatureGrid {
    let v = &volume.voxels;
    let shape = v.shape();
    let sp = volume.spacing;
    let dist = boundary_distance(v, sp);

    Grid::from_fn(shape, |x, y, z| {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for dz in -1..=1 {
            let zz = clamp_step(z, dz, shape.nz);
            for dy in -1..=1 {
                let yy = clamp_step(y, dy, shape.ny);
                for dx in -1..=1 {
                    let val = *v.get(clamp_step(x, dx, shape.nx), yy, zz);
                    sum += val;
                    sum_sq += val * val;
                }
            }
        }
        let mean = sum / 27.0;
        let var = (sum_sq / 27.0 - mean * mean).max(0.0);

        let axis = |lo: (usize, usize, usize), hi: (usize, usize, usize), steps: usize, s: f64| {
            if steps == 0 {
                0.0
            } else {
                (v.get(hi.0, hi.1, hi.2) - v.get(lo.0, lo.1, lo.2)) / (steps as f64 * s)
            }
        };
        let (x0, x1) = (clamp_step(x, -1, shape.nx), clamp_step(x, 1, shape.nx));
        let (y0, y1) = (clamp_step(y, -1, shape.ny), clamp_step(y, 1, shape.ny));
        let (z0, z1) = (clamp_step(z, -1, shape.nz), clamp_step(z, 1, shape.nz));
        let gx = axis((x0, y, z), (x1, y, z), x1 - x0, sp.sx);
        let gy = axis((x, y0, z), (x, y1, z), y1 - y0, sp.sy);
        let gz = axis((x, y, z0), (x, y, z1), z1 - z0, sp.sz);

        VoxelFeatures([
            *v.get(x, y, z),
            mean,
            // Constant neighbourhoods must give exactly zero.
            if var < 1e-9 * (1.0 + mean * mean) { 0.0 } else { var.sqrt() },
            (gx * gx + gy * gy + gz * gz).sqrt(),
            *dist.get(x, y, z),
        ])
    })
}

/// Distance in mm from each voxel to the nearest skull-proxy voxel
/// (HU > [`SHELL_HU`]) or to the in-plane edge of the field of view,
/// whichever is closer. Shell voxels are at distance zero.
pub fn boundary_distance(voxels: &Grid<f64>, spacing: Spacing) -> Grid<f64> {
    let shape = voxels.shape();
    let mut sq: Vec<f64> = voxels
        .as_slice()
        .iter()
        .map(|&hu| if hu > SHELL_HU { 0.0 } else { f64::INFINITY })
        .collect();
    squared_edt_axis(&mut sq, shape, 0, spacing.sx);
    squared_edt_axis(&mut sq, shape, 1, spacing.sy);
    squared_edt_axis(&mut sq, shape, 2, spacing.sz);
    Grid::from_fn(shape, |x, y, z| {
        let edge_x = ((x as f64 + 0.5) * spacing.sx).min((shape.nx as f64 - 0.5 - x as f64) * spacing.sx);
        let edge_y = ((y as f64 + 0.5) * spacing.sy).min((shape.ny as f64 - 0.5 - y as f64) * spacing.sy);
        sq[shape.index(x, y, z)].sqrt().min(edge_x).min(edge_y)
    })
}

/// One pass of the separable exact squared Euclidean distance transform
/// (lower envelope of parabolas) along `axis`, in physical units.
fn squared_edt_axis(data: &mut [f64], shape: Shape, axis: usize, step: f64) {
    let (n, stride, outer): (usize, usize, Vec<usize>) = match axis {
        0 => (
            shape.nx,
            1,
            (0..shape.nz)
                .flat_map(|z| (0..shape.ny).map(move |y| shape.index(0, y, z)))
                .collect(),
        ),
        1 => (
            shape.ny,
            shape.nx,
            (0..shape.nz)
                .flat_map(|z| (0..shape.nx).map(move |x| shape.index(x, 0, z)))
                .collect(),
        ),
        _ => (
            shape.nz,
            shape.nx * shape.ny,
            (0..shape.ny)
                .flat_map(|y| (0..shape.nx).map(move |x| shape.index(x, y, 0)))
                .collect(),
        ),
    };
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut hull = vec![0usize; n];
    let mut bounds = vec![0.0f64; n + 1];
    for start in outer {
        for i in 0..n {
            f[i] = data[start + i * stride];
        }
        lower_envelope(&f, &mut out, &mut hull, &mut bounds, step);
        for i in 0..n {
            data[start + i * stride] = out[i];
        }
    }
}

fn lower_envelope(f: &[f64], out: &mut [f64], hull: &mut [usize], bounds: &mut [f64], step: f64) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    hull[0] = finite[0];
    bounds[0] = f64::NEG_INFINITY;
    bounds[1] = f64::INFINITY;
    for &q in &finite[1..] {
        let mut s;
        loop {
            let p = hull[k];
            s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // bounds[0] is -inf, so this never underflows.
            if s <= bounds[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        hull[k] = q;
        bounds[k] = s;
        bounds[k + 1] = f64::INFINITY;
    }
    let mut j = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        while bounds[j + 1] < pos(i) {
            j += 1;
        }
        let d = pos(i) - pos(hull[j]);
        *o = d * d + f[hull[j]];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(shape: Shape, spacing: Spacing, f: impl FnMut(usize, usize, usize) -> f64) -> VolumeImage {
        VolumeImage {
            study_uid: "1.2".into(),
            series_uid: "1.2.1".into(),
            spacing,
            origin: [0.0; 3],
            voxels: Grid::from_fn(shape, f),
        }
    }

    #[test]
    fn constant_volume_has_no_texture() {
        let v = volume(Shape::new(4, 5, 3), Spacing::new(0.5, 0.5, 2.0), |_, _, _| 50.0);
        let f = extract_features(&v);
        assert_eq!(f.shape(), v.shape());
        for vf in f.as_slice() {
            assert_eq!(vf.local_std(), 0.0);
            assert_eq!(vf.gradient_magnitude(), 0.0);
            assert_eq!(vf.local_mean(), 50.0);
        }
    }

    #[test]
    fn single_bright_voxel_mean() {
        let v = volume(Shape::new(5, 5, 5), Spacing::default(), |x, y, z| {
            if (x, y, z) == (2, 2, 2) {
                80.0
            } else {
                0.0
            }
        });
        let f = extract_features(&v);
        let c = f.get(2, 2, 2);
        let oracle: f64 = (0..27).map(|i| if i == 13 { 80.0 } else { 0.0 }).sum::<f64>() / 27.0;
        assert!((c.local_mean() - oracle).abs() < 1e-12);
        assert!((c.local_mean() - 80.0 / 27.0).abs() < 1e-12);
        // Neighbour at (3,2,2): central difference over 2 mm.
        assert!((f.get(3, 2, 2).gradient_magnitude() - 40.0).abs() < 1e-12);
    }

    #[test]
    fn edt_matches_brute_force() {
        let shape = Shape::new(7, 6, 4);
        let sp = Spacing::new(0.7, 1.3, 2.0);
        let shell = [(0, 0, 0), (6, 5, 3), (3, 2, 1)];
        let v = Grid::from_fn(shape, |x, y, z| if shell.contains(&(x, y, z)) { 1000.0 } else { 0.0 });
        let d = boundary_distance(&v, sp);
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..7 {
                    let brute = shell
                        .iter()
                        .map(|&(a, b, c)| {
                            let dx = (x as f64 - a as f64) * sp.sx;
                            let dy = (y as f64 - b as f64) * sp.sy;
                            let dz = (z as f64 - c as f64) * sp.sz;
                            (dx * dx + dy * dy + dz * dz).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    let edge = ((x as f64 + 0.5) * sp.sx)
                        .min((6.5 - x as f64) * sp.sx)
                        .min((y as f64 + 0.5) * sp.sy)
                        .min((5.5 - y as f64) * sp.sy);
                    let expect = brute.min(edge);
                    assert!((d.get(x, y, z) - expect).abs() < 1e-9, "at {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn distances_are_non_negative_without_shell() {
        let v = volume(Shape::new(3, 3, 1), Spacing::default(), |_, _, _| 20.0);
        let f = extract_features(&v);
        assert!(f.as_slice().iter().all(|vf| vf.dist_to_boundary() >= 0.0));
        assert_eq!(f.get(1, 1, 0).dist_to_boundary(), 1.5);
    }
}
