//! Thresholding and 26-connected component labeling.

use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Mask, ProbMap, Shape, Spacing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based, ordered by descending voxel count, ties by smallest voxel index.
    pub id: usize,
    /// Linear voxel indices in ascending order.
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn first_index(&self) -> usize {
        self.voxels[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub components: Vec<Component>,
}

/// All components of `mask` under 26-connectivity, unordered ids.
pub fn label_components(mask: &Mask) -> Vec<Component> {
    let shape = mask.shape();
    let data = mask.as_slice();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if !data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            voxels.push(i);
            for_each_neighbor(shape, i, |j| {
                if data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            });
        }
        voxels.sort_unstable();
        out.push(Component { id: 0, voxels });
    }
    out
}

#[inline]
fn for_each_neighbor(shape: Shape, i: usize, mut f: impl FnMut(usize)) {
    let (x, y, z) = shape.coords(i);
    for dz in -1i64..=1 {
        let zz = z as i64 + dz;
        if zz < 0 || zz >= shape.nz as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let yy = y as i64 + dy;
            if yy < 0 || yy >= shape.ny as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let xx = x as i64 + dx;
                if xx < 0 || xx >= shape.nx as i64 || (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                f(shape.index(xx as usize, yy as usize, zz as usize));
            }
        }
    }
}

/// Mark voxels `>= threshold`, drop components smaller than
/// `min_component_volume_mm3`, and number the survivors.
pub fn binarize_and_filter(map: &ProbMap, threshold: f64, min_component_volume_mm3: f64, spacing: Spacing) -> Segmentation {
    let raw: Mask = map.map(|&p| p >= threshold);
    let voxel_mm3 = spacing.voxel_volume_mm3();
    let mut components: Vec<Component> = label_components(&raw)
        .into_iter()
        .filter(|c| c.len() as f64 * voxel_mm3 >= min_component_volume_mm3)
        .collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a.first_index().cmp(&b.first_index())));
    let mut mask = Grid::filled(map.shape(), false);
    for (k, c) in components.iter_mut().enumerate() {
        c.id = k + 1;
        for &i in &c.voxels {
            mask.as_mut_slice()[i] = true;
        }
    }
    Segmentation { mask, components }
}
