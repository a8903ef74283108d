use crate::geometry::{min_image, Vec3};

use super::Sphere;

/// Uniform periodic grid of sphere references in compressed-row layout.
///
/// A sphere is registered in every cell overlapped by its bounding box grown by
/// `margin` (periodic images included), so any sphere within `margin` of a point
/// is listed in that point's cell.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    side: f64,
    cells_per_axis: usize,
    cell: f64,
    margin: f64,
    offsets: Vec<u32>,
    items: Vec<u32>,
}

impl SpatialGrid {
    pub fn build(side: f64, spheres: &[Sphere], min_cell: f64, margin: f64) -> Self {
        let cells_per_axis = ((side / min_cell).floor() as usize).clamp(1, 1024);
        let cell = side / cells_per_axis as f64;
        let n = cells_per_axis;
        let total = n * n * n;

        let mut ranges: Vec<[Vec<usize>; 3]> = Vec::with_capacity(spheres.len());
        let mut counts = vec![0u32; total];
        for s in spheres {
            let reach = s.radius + margin;
            let axes = [0, 1, 2].map(|a| axis_cells(s.center[a] - reach, s.center[a] + reach, cell, n));
            for &i in &axes[0] {
                for &j in &axes[1] {
                    for &k in &axes[2] {
                        counts[(i * n + j) * n + k] += 1;
                    }
                }
            }
            ranges.push(axes);
        }

        let mut offsets = Vec::with_capacity(total + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for c in &counts {
            acc += c;
            offsets.push(acc);
        }
        let mut fill = offsets[..total].to_vec();
        let mut items = vec![0u32; acc as usize];
        for (id, axes) in ranges.iter().enumerate() {
            for &i in &axes[0] {
                for &j in &axes[1] {
                    for &k in &axes[2] {
                        let c = (i * n + j) * n + k;
                        items[fill[c] as usize] = id as u32;
                        fill[c] += 1;
                    }
                }
            }
        }

        SpatialGrid {
            side,
            cells_per_axis,
            cell,
            margin,
            offsets,
            items,
        }
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Cell index of a wrapped point.
    #[inline]
    pub fn cell_of(&self, p: Vec3) -> usize {
        let n = self.cells_per_axis;
        let idx = |x: f64| ((x / self.cell) as usize).min(n - 1);
        (idx(p.0[0]) * n + idx(p.0[1])) * n + idx(p.0[2])
    }

    /// Sphere ids registered in the cell containing `p` (which must be wrapped).
    #[inline]
    pub fn candidates(&self, p: Vec3) -> &[u32] {
        let c = self.cell_of(p);
        &self.items[self.offsets[c] as usize..self.offsets[c + 1] as usize]
    }

    /// Sphere strictly containing the wrapped point `p`, if any.
    pub fn locate(&self, spheres: &[Sphere], p: Vec3) -> Option<usize> {
        self.candidates(p).iter().map(|&i| i as usize).find(|&i| {
            let s = &spheres[i];
            min_image(p, s.center, self.side).norm2() < s.radius * s.radius
        })
    }

    pub fn total_refs(&self) -> usize {
        self.items.len()
    }
}

fn axis_cells(lo: f64, hi: f64, cell: f64, n: usize) -> Vec<usize> {
    let first = (lo / cell).floor() as i64;
    let last = (hi / cell).floor() as i64;
    if last - first + 1 >= n as i64 {
        return (0..n).collect();
    }
    (first..=last).map(|c| c.rem_euclid(n as i64) as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_crossing_face_is_found_from_both_sides() {
        let spheres = vec![Sphere::new(Vec3::new(0.5, 5.0, 5.0), 1.0)];
        let grid = SpatialGrid::build(10.0, &spheres, 2.0, 0.0);
        assert_eq!(grid.locate(&spheres, Vec3::new(9.8, 5.0, 5.0)), Some(0));
        assert_eq!(grid.locate(&spheres, Vec3::new(1.2, 5.0, 5.0)), Some(0));
        assert_eq!(grid.locate(&spheres, Vec3::new(2.0, 5.0, 5.0)), None);
    }

    #[test]
    fn margin_extends_registration() {
        let spheres = vec![Sphere::new(Vec3::new(5.0, 5.0, 5.0), 1.0)];
        let grid = SpatialGrid::build(10.0, &spheres, 1.0, 1.5);
        assert!(grid.candidates(Vec3::new(7.3, 5.0, 5.0)).contains(&0));
        assert!(grid.candidates(Vec3::new(8.5, 5.0, 5.0)).is_empty());
    }
}
