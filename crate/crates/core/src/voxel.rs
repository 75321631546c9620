//! Cubic voxelization of a point cloud with per-voxel membership.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::Point;

/// Default cube edge, meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.2;

/// Where a voxel's reference point sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenterMode {
    /// Geometric center of the grid cell.
    #[default]
    Cell,
    /// Mean of the member points.
    Centroid,
}

pub type CellIndex = [i64; 3];

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub center_mode: CenterMode,
    /// Cell index -> voxel ordinal.
    pub voxel_ids: HashMap<CellIndex, usize>,
    /// Cell index of each voxel, by ordinal.
    pub cells: Vec<CellIndex>,
    /// Member point indices of each voxel, in point order.
    pub membership: Vec<Vec<usize>>,
    pub centers: Vec<Point>,
    pub point_to_voxel: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn cell_center(&self, cell: CellIndex) -> Point {
        cell.map(|i| (i as f64 + 0.5) * self.voxel_size)
    }
}

pub fn cell_of(point: &Point, voxel_size: f64) -> CellIndex {
    point.map(|c| (c / voxel_size).floor() as i64)
}

/// Voxelizes with cell-center reference points.
pub fn voxelize(cloud: &[Point], voxel_size: f64) -> Result<VoxelGrid> {
    voxelize_with(cloud, voxel_size, CenterMode::Cell)
}

/// Voxel ordinals follow first occurrence in `cloud`.
pub fn voxelize_with(cloud: &[Point], voxel_size: f64, center_mode: CenterMode) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mut voxel_ids = HashMap::new();
    let mut cells = Vec::new();
    let mut membership: Vec<Vec<usize>> = Vec::new();
    let mut point_to_voxel = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.iter().enumerate() {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::at_point(i, Error::NonFiniteCoordinate));
        }
        let cell = cell_of(p, voxel_size);
        let j = *voxel_ids.entry(cell).or_insert_with(|| {
            cells.push(cell);
            membership.push(Vec::new());
            cells.len() - 1
        });
        membership[j].push(i);
        point_to_voxel.push(j);
    }
    let centers = match center_mode {
        CenterMode::Cell => cells.iter().map(|c| c.map(|i| (i as f64 + 0.5) * voxel_size)).collect(),
        CenterMode::Centroid => membership
            .iter()
            .map(|m| {
                let mut s = [0.0; 3];
                for &i in m {
                    for (a, b) in s.iter_mut().zip(cloud[i]) {
                        *a += b;
                    }
                }
                s.map(|v| v / m.len() as f64)
            })
            .collect(),
    };
    Ok(VoxelGrid {
        voxel_size,
        center_mode,
        voxel_ids,
        cells,
        membership,
        centers,
        point_to_voxel,
    })
}

/// Offset of every point from the reference point of its voxel.
pub fn voxel_offsets(grid: &VoxelGrid, cloud: &[Point]) -> Result<Vec<Point>> {
    if cloud.len() != grid.num_points() {
        return Err(Error::shape(&[cloud.len()], &[grid.num_points()]));
    }
    Ok(cloud
        .iter()
        .zip(&grid.point_to_voxel)
        .map(|(p, &j)| {
            let c = grid.centers[j];
            [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
        })
        .collect())
}

/// Most frequent member label per voxel; ties go to the smallest class id.
pub fn majority_label(grid: &VoxelGrid, labels: &[u32]) -> Result<Vec<u32>> {
    if labels.len() != grid.num_points() {
        return Err(Error::LabelCount {
            expected: grid.num_points(),
            found: labels.len(),
        });
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    Ok(grid
        .membership
        .iter()
        .map(|members| {
            counts.clear();
            for &i in members {
                *counts.entry(labels[i]).or_default() += 1;
            }
            counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&l, _)| l)
                .expect("voxels are never empty")
        })
        .collect())
}
