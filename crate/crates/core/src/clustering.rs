//! Heatmap thresholding and connected-cluster decomposition.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

/// Linking window for hysteresis growth, given as full odd extents per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Neighborhood {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    fn radii(&self) -> (isize, isize, isize) {
        ((self.x / 2) as isize, (self.y / 2) as isize, (self.z / 2) as isize)
    }
}

impl Default for Neighborhood {
    fn default() -> Self {
        Self::new(15, 15, 5)
    }
}

/// Two-level thresholding with the low level fixed at `t_high / 2`.
///
/// Voxels at or above `t_high` seed a breadth-first growth through voxels at or
/// above `t_high / 2`; a weak voxel joins when it lies inside the window of any
/// already accepted voxel. Growth is transitive.
pub fn hysteresis_cluster(heatmap: &Volume, t_high: f32, window: Neighborhood) -> Result<Volume> {
    if !(t_high > 0.0) || !t_high.is_finite() {
        return Err(Error::Precondition(format!("t_high must be > 0, got {t_high}")));
    }
    let dims = heatmap.dims();
    let t_low = t_high / 2.0;
    let data = heatmap.data();
    let mut accepted = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for (i, &h) in data.iter().enumerate() {
        if h >= t_high {
            accepted[i] = true;
            queue.push_back(i);
        }
    }
    let (rx, ry, rz) = window.radii();
    let (w, h, d) = (dims.width as isize, dims.height as isize, dims.depth as isize);
    while let Some(i) = queue.pop_front() {
        let (x, y, z) = dims.coords(i);
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let (x0, x1) = ((x - rx).max(0), (x + rx).min(w - 1));
        let (y0, y1) = ((y - ry).max(0), (y + ry).min(h - 1));
        let (z0, z1) = ((z - rz).max(0), (z + rz).min(d - 1));
        for zz in z0..=z1 {
            for yy in y0..=y1 {
                let row = dims.index(0, yy as usize, zz as usize);
                for xx in x0..=x1 {
                    let j = row + xx as usize;
                    if !accepted[j] && data[j] >= t_low {
                        accepted[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    Ok(Volume::mask_from_fn(dims, |i| accepted[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Face6,
    Full26,
}

/// Voxel count, centroid and inclusive bounding box of a voxel set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub voxel_count: usize,
    pub centroid: [f64; 3],
    /// `[min, max]` corners, inclusive.
    pub bbox: [[usize; 3]; 2],
}

pub fn cluster_stats(voxels: &[(usize, usize, usize)]) -> Result<ClusterStats> {
    if voxels.is_empty() {
        return Err(Error::Precondition("cluster_stats on an empty voxel set".into()));
    }
    let mut sum = [0f64; 3];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &(x, y, z) in voxels {
        for (a, v) in [x, y, z].into_iter().enumerate() {
            sum[a] += v as f64;
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let n = voxels.len() as f64;
    Ok(ClusterStats {
        voxel_count: voxels.len(),
        centroid: [sum[0] / n, sum[1] / n, sum[2] / n],
        bbox: [lo, hi],
    })
}

/// One connected component of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Sorted linear voxel indices.
    pub voxels: Vec<usize>,
    pub voxel_count: usize,
    pub centroid: [f64; 3],
    pub bbox: [[usize; 3]; 2],
}

impl Cluster {
    /// Builds a cluster from linear indices, computing its statistics.
    pub fn from_indices(id: usize, mut voxels: Vec<usize>, dims: Dims) -> Result<Self> {
        voxels.sort_unstable();
        voxels.dedup();
        let coords: Vec<_> = voxels.iter().map(|&i| dims.coords(i)).collect();
        let stats = cluster_stats(&coords)?;
        Ok(Self {
            id,
            voxels,
            voxel_count: stats.voxel_count,
            centroid: stats.centroid,
            bbox: stats.bbox,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub source_dims: Dims,
    pub clusters: Vec<Cluster>,
}

impl ClusterSet {
    pub fn empty(dims: Dims) -> Self {
        Self {
            source_dims: dims,
            clusters: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn total_voxels(&self) -> usize {
        self.clusters.iter().map(|c| c.voxel_count).sum()
    }

    /// Rasterizes the union of all clusters.
    pub fn to_mask(&self) -> Volume {
        let mut data = vec![0.0f32; self.source_dims.len()];
        for c in &self.clusters {
            for &i in &c.voxels {
                data[i] = 1.0;
            }
        }
        Volume::from_parts_unchecked(data, self.source_dims, [1.0; 3])
    }
}

/// Labels maximal connected components of a binary mask. Clusters are numbered
/// in scan order of their first voxel.
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> Result<ClusterSet> {
    mask.ensure_binary()?;
    let dims = mask.dims();
    let data = mask.data();
    let offsets: Vec<(isize, isize, isize)> = match connectivity {
        Connectivity::Face6 => vec![
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ],
        Connectivity::Full26 => {
            let mut v = Vec::with_capacity(26);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (dx, dy, dz) != (0, 0, 0) {
                            v.push((dx, dy, dz));
                        }
                    }
                }
            }
            v
        }
    };
    let (w, h, d) = (dims.width as isize, dims.height as isize, dims.depth as isize);
    let mut seen = vec![false; dims.len()];
    let mut clusters = Vec::new();
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if data[start] == 0.0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y, z) = dims.coords(i);
            for &(dx, dy, dz) in &offsets {
                let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if nx < 0 || ny < 0 || nz < 0 || nx >= w || ny >= h || nz >= d {
                    continue;
                }
                let j = dims.index(nx as usize, ny as usize, nz as usize);
                if data[j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        clusters.push(Cluster::from_indices(clusters.len(), members, dims)?);
    }
    Ok(ClusterSet {
        source_dims: dims,
        clusters,
    })
}
