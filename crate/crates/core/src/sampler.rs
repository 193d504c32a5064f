//! Filter-point sampling around mesh nodes and the full-node index matrix.
//!
//! Every node gets a patch of `P` filter points. Geometric patches
//! (rectangular, circular) place points on the sphere around the node and
//! read each one from its nearest mesh node; polygonal patches use the
//! node's neighbor rings directly. Row `n` of a [`SamplerIndexMap`] lists the
//! node indices read by node `n`, so convolution is a gather followed by a
//! matrix product.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::icosphere::{IcosphereHierarchy, IcosphereLevel};
use crate::vec3::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatchSpec {
    /// `sx * sy` grid on the tangent plane; `spacing` in radians.
    Rectangular { sx: usize, sy: usize, spacing: f64 },
    /// Concentric rings at multiples of `ring_step` radians.
    Circular {
        rings: usize,
        points_per_ring: usize,
        ring_step: f64,
        include_center: bool,
    },
    /// Mesh nodes up to graph distance `order`.
    Polygonal { order: usize },
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PatchSpec::Rectangular { sx, sy, spacing } => {
                if sx == 0 || sy == 0 {
                    return Err(Error::Config("rectangular patch needs sx, sy >= 1".into()));
                }
                let reach = (sx.max(sy) - 1) as f64 / 2.0 * spacing;
                if !(spacing > 0.0) || reach >= PI / 2.0 {
                    return Err(Error::Config(format!(
                        "rectangular spacing {spacing} must be positive and keep the patch within a hemisphere"
                    )));
                }
            }
            PatchSpec::Circular {
                rings,
                points_per_ring,
                ring_step,
                ..
            } => {
                if rings == 0 || points_per_ring < 3 {
                    return Err(Error::Config(
                        "circular patch needs rings >= 1 and points_per_ring >= 3".into(),
                    ));
                }
                if !(ring_step > 0.0) || rings as f64 * ring_step >= PI {
                    return Err(Error::Config(format!("invalid ring step {ring_step}")));
                }
            }
            PatchSpec::Polygonal { order } => {
                if order == 0 {
                    return Err(Error::Config("polygonal patch order must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Patch geometry relative to the mesh resolution, resolved per level.
/// Spacings are multiples of the level's mean edge angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PatchTemplate {
    Rectangular { sx: usize, sy: usize, scale: f64 },
    Circular {
        rings: usize,
        points_per_ring: usize,
        scale: f64,
        include_center: bool,
    },
    Polygonal { order: usize },
}

impl Default for PatchTemplate {
    fn default() -> Self {
        PatchTemplate::Rectangular {
            sx: 5,
            sy: 5,
            scale: 1.0,
        }
    }
}

impl PatchTemplate {
    pub fn resolve(&self, level: &IcosphereLevel) -> PatchSpec {
        match *self {
            PatchTemplate::Rectangular { sx, sy, scale } => PatchSpec::Rectangular {
                sx,
                sy,
                spacing: scale * level.mean_edge_angle(),
            },
            PatchTemplate::Circular {
                rings,
                points_per_ring,
                scale,
                include_center,
            } => PatchSpec::Circular {
                rings,
                points_per_ring,
                ring_step: scale * level.mean_edge_angle(),
                include_center,
            },
            PatchTemplate::Polygonal { order } => PatchSpec::Polygonal { order },
        }
    }
}

/// East/north tangent frame at a unit vector. East is `z × n`, or `x` at a pole.
pub fn tangent_frame(n: Vec3) -> (Vec3, Vec3) {
    let c = vec3::cross([0.0, 0.0, 1.0], n);
    let east = if vec3::norm(c) < 1e-9 {
        [1.0, 0.0, 0.0]
    } else {
        vec3::normalize(c)
    };
    let north = vec3::cross(n, east);
    (east, north)
}

/// Gnomonic `sx * sy` grid around `node`, y outer and x inner. Points on the
/// two grid axes sit at exact multiples of `spacing` in angle.
pub fn rectangular_patch_points(
    level: &IcosphereLevel,
    node: usize,
    sx: usize,
    sy: usize,
    spacing: f64,
) -> Vec<Vec3> {
    let n = level.position(node);
    let (east, north) = tangent_frame(n);
    let cx = (sx as f64 - 1.0) / 2.0;
    let cy = (sy as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(sx * sy);
    for iy in 0..sy {
        let ty = ((iy as f64 - cy) * spacing).tan();
        for ix in 0..sx {
            let tx = ((ix as f64 - cx) * spacing).tan();
            if tx == 0.0 && ty == 0.0 {
                out.push(n);
                continue;
            }
            let p = vec3::add(n, vec3::add(vec3::scale(east, tx), vec3::scale(north, ty)));
            out.push(vec3::normalize(p));
        }
    }
    out
}

/// Concentric rings around `node`; azimuth starts at the east direction.
pub fn circular_patch_points(
    level: &IcosphereLevel,
    node: usize,
    rings: usize,
    points_per_ring: usize,
    ring_step: f64,
    include_center: bool,
) -> Vec<Vec3> {
    let n = level.position(node);
    let (east, north) = tangent_frame(n);
    let mut out = Vec::with_capacity(rings * points_per_ring + usize::from(include_center));
    if include_center {
        out.push(n);
    }
    for r in 1..=rings {
        let theta = r as f64 * ring_step;
        let (st, ct) = theta.sin_cos();
        for k in 0..points_per_ring {
            let alpha = 2.0 * PI * k as f64 / points_per_ring as f64;
            let (sa, ca) = alpha.sin_cos();
            let dir = vec3::add(vec3::scale(east, ca), vec3::scale(north, sa));
            out.push(vec3::add(vec3::scale(n, ct), vec3::scale(dir, st)));
        }
    }
    out
}

/// Widest `order`-ring over all nodes of the level.
pub fn polygonal_width(level: &IcosphereLevel, order: usize) -> usize {
    (0..level.len())
        .map(|n| level.neighbor_ring(n, order).map_or(1, |r| r.len()))
        .max()
        .unwrap_or(1)
}

/// Ring members of `node` padded with `node` itself up to `width`.
pub fn polygonal_patch_points(
    level: &IcosphereLevel,
    node: usize,
    order: usize,
    width: usize,
) -> Result<Vec<usize>> {
    let mut ring = level.neighbor_ring(node, order)?;
    if ring.len() > width {
        return Err(Error::Shape(format!(
            "ring of node {node} has {} members, wider than {width}",
            ring.len()
        )));
    }
    ring.resize(width, node);
    Ok(ring)
}

/// Full-node filter-point index matrix: `indices[n * width + p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerIndexMap {
    level: usize,
    patch: PatchSpec,
    nodes: usize,
    width: usize,
    indices: Vec<u32>,
}

impl SamplerIndexMap {
    pub fn build(hierarchy: &IcosphereHierarchy, level: usize, patch: PatchSpec) -> Result<Self> {
        patch.validate()?;
        let mesh = hierarchy.level(level)?;
        let nodes = mesh.len();
        let rows: Vec<Vec<usize>> = match patch {
            PatchSpec::Polygonal { order } => {
                let width = polygonal_width(mesh, order);
                (0..nodes)
                    .map(|n| polygonal_patch_points(mesh, n, order, width))
                    .collect::<Result<_>>()?
            }
            PatchSpec::Rectangular { sx, sy, spacing } => (0..nodes)
                .into_par_iter()
                .map(|n| {
                    rectangular_patch_points(mesh, n, sx, sy, spacing)
                        .into_iter()
                        .map(|p| nearest_from(mesh, n, p))
                        .collect()
                })
                .collect(),
            PatchSpec::Circular {
                rings,
                points_per_ring,
                ring_step,
                include_center,
            } => (0..nodes)
                .into_par_iter()
                .map(|n| {
                    circular_patch_points(mesh, n, rings, points_per_ring, ring_step, include_center)
                        .into_iter()
                        .map(|p| nearest_from(mesh, n, p))
                        .collect()
                })
                .collect(),
        };
        let width = rows.first().map_or(0, Vec::len);
        let indices = rows.iter().flatten().map(|&i| i as u32).collect();
        Ok(Self {
            level,
            patch,
            nodes,
            width,
            indices,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn patch(&self) -> PatchSpec {
        self.patch
    }

    /// Node count `N`.
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Filter points per node `P`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, node: usize) -> &[u32] {
        &self.indices[node * self.width..(node + 1) * self.width]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// SHA-256 over level, shape and little-endian indices.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.level as u64).to_le_bytes());
        h.update((self.nodes as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for &i in &self.indices {
            h.update(i.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Nearest node to a filter point of `start`; the walk begins at the node
/// itself since filter points lie within a few edges of it.
fn nearest_from(mesh: &IcosphereLevel, start: usize, p: Vec3) -> usize {
    mesh.walk_to_nearest(start, p)
}

/// Row `n` of the full-node filter point matrix for one channel plane:
/// `out[n * P + p] = values[indices[n][p]]`.
pub fn gather(values: &[f64], map: &SamplerIndexMap) -> Result<Vec<f64>> {
    if values.len() != map.nodes() {
        return Err(Error::Shape(format!(
            "gather expects {} node values, got {}",
            map.nodes(),
            values.len()
        )));
    }
    Ok(map.indices().iter().map(|&i| values[i as usize]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hier(k: usize) -> IcosphereHierarchy {
        IcosphereHierarchy::build(k).unwrap()
    }

    #[test]
    fn single_point_rectangle_is_node() {
        let h = hier(2);
        let l = h.level(2).unwrap();
        let pts = rectangular_patch_points(l, 17, 1, 1, 0.1);
        assert_eq!(pts, vec![l.position(17)]);
    }

    #[test]
    fn five_by_five_center_is_node() {
        let h = hier(3);
        let l = h.level(3).unwrap();
        for node in [0, 100, 641] {
            let pts = rectangular_patch_points(l, node, 5, 5, l.mean_edge_angle());
            assert_eq!(pts.len(), 25);
            assert!(vec3::dist2(pts[12], l.position(node)).sqrt() < 1e-12);
        }
    }

    #[test]
    fn pole_patch_stays_within_diagonal_radius() {
        let h = hier(1);
        let l = h.level(1).unwrap();
        let pole = (0..l.len())
            .find(|&i| vec3::dist2(l.position(i), [0.0, 0.0, 1.0]) < 1e-20)
            .expect("level 1 has a node on +z");
        let pts = rectangular_patch_points(l, pole, 3, 3, 0.1);
        assert_eq!(pts.len(), 9);
        for p in pts {
            assert!(vec3::angle(p, l.position(pole)) <= 0.1 * 2f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn circular_rings_sit_at_multiples_of_step() {
        let h = hier(2);
        let l = h.level(2).unwrap();
        let step = 0.07;
        let pts = circular_patch_points(l, 50, 3, 8, step, true);
        assert_eq!(pts.len(), 25);
        assert_eq!(pts[0], l.position(50));
        for r in 0..3 {
            for k in 0..8 {
                let p = pts[1 + r * 8 + k];
                let a = vec3::dot(p, l.position(50)).clamp(-1.0, 1.0).acos();
                assert!((a - (r + 1) as f64 * step).abs() < 1e-10);
            }
        }
        assert_eq!(circular_patch_points(l, 3, 1, 4, step, true).len(), 5);
        assert_eq!(circular_patch_points(l, 3, 2, 12, step, true).len(), 25);
    }

    #[test]
    fn polygonal_rows_are_padded_with_self() {
        let h = hier(3);
        let l = h.level(3).unwrap();
        let width = polygonal_width(l, 1);
        assert_eq!(width, 7);
        let pent = polygonal_patch_points(l, 0, 1, width).unwrap();
        assert_eq!(pent.len(), 7);
        assert_eq!(pent.iter().filter(|&&i| i == 0).count(), 2);
        let hex = (0..l.len()).find(|&i| l.degree(i) == 6).unwrap();
        let row = polygonal_patch_points(l, hex, 1, width).unwrap();
        assert_eq!(row.iter().filter(|&&i| i == hex).count(), 1);
        assert_eq!(polygonal_width(l, 2), 19);
    }

    #[test]
    fn one_by_one_map_is_identity() {
        let h = hier(3);
        let m = SamplerIndexMap::build(&h, 3, PatchSpec::Rectangular { sx: 1, sy: 1, spacing: 0.1 }).unwrap();
        assert_eq!(m.width(), 1);
        for n in 0..m.nodes() {
            assert_eq!(m.row(n), &[n as u32]);
        }
    }

    #[test]
    fn five_by_five_rows_stay_within_four_hops() {
        let h = hier(3);
        let l = h.level(3).unwrap();
        let spec = PatchTemplate::default().resolve(l);
        let m = SamplerIndexMap::build(&h, 3, spec).unwrap();
        for n in 0..m.nodes() {
            assert_eq!(m.row(n)[12], n as u32);
            let ring: std::collections::HashSet<_> = l.neighbor_ring(n, 4).unwrap().into_iter().collect();
            for &i in m.row(n) {
                assert!(ring.contains(&(i as usize)));
            }
        }
    }

    #[test]
    fn circular_ring_at_hexagon_hits_each_neighbor() {
        // Holds where the east direction lines up with a neighbor; elsewhere the
        // six ring points straddle neighbor directions and may repeat one.
        let h = hier(4);
        let l = h.level(4).unwrap();
        let spec = PatchSpec::Circular {
            rings: 1,
            points_per_ring: 6,
            ring_step: l.mean_edge_angle(),
            include_center: false,
        };
        let m = SamplerIndexMap::build(&h, 4, spec).unwrap();
        let aligned = |n: usize| {
            let p = l.position(n);
            let (east, north) = tangent_frame(p);
            l.neighbors(n).iter().all(|&j| {
                let d = vec3::sub(l.position(j), p);
                let az = vec3::dot(d, north).atan2(vec3::dot(d, east)).to_degrees();
                let off = (az.rem_euclid(60.0) + 30.0).rem_euclid(60.0) - 30.0;
                off.abs() < 10.0
            })
        };
        let mut checked = 0;
        for n in (0..l.len()).filter(|&i| l.degree(i) == 6 && aligned(i)) {
            let mut row: Vec<usize> = m.row(n).iter().map(|&i| i as usize).collect();
            row.sort_unstable();
            assert_eq!(row, l.neighbors(n), "node {n}");
            checked += 1;
        }
        assert!(checked > 10, "only {checked} aligned nodes");
        for n in 0..l.len() {
            let ring = l.neighbor_ring(n, 2).unwrap();
            for &i in m.row(n) {
                assert!(ring.binary_search(&(i as usize)).is_ok());
            }
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let h = hier(3);
        let spec = PatchTemplate::default().resolve(h.level(3).unwrap());
        let a = SamplerIndexMap::build(&h, 3, spec).unwrap();
        let b = SamplerIndexMap::build(&hier(3), 3, spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn gather_identity_constant_and_one_hot() {
        let h = hier(2);
        let l = h.level(2).unwrap();
        let id = SamplerIndexMap::build(&h, 2, PatchSpec::Rectangular { sx: 1, sy: 1, spacing: 0.1 }).unwrap();
        let vals: Vec<f64> = (0..l.len()).map(|i| (i as f64).sin()).collect();
        assert_eq!(gather(&vals, &id).unwrap(), vals);

        let m = SamplerIndexMap::build(&h, 2, PatchTemplate::default().resolve(l)).unwrap();
        let c = vec![2.5; l.len()];
        assert!(gather(&c, &m).unwrap().iter().all(|&v| v == 2.5));
        let mut hot = vec![0.0; l.len()];
        hot[5] = 1.0;
        let g = gather(&hot, &m).unwrap();
        for (k, &idx) in m.indices().iter().enumerate() {
            assert_eq!(g[k], if idx == 5 { 1.0 } else { 0.0 });
        }
        assert!(matches!(gather(&c[1..], &m), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_patches_are_rejected() {
        let h = hier(1);
        for bad in [
            PatchSpec::Rectangular { sx: 0, sy: 3, spacing: 0.1 },
            PatchSpec::Rectangular { sx: 3, sy: 3, spacing: 0.0 },
            PatchSpec::Circular { rings: 1, points_per_ring: 2, ring_step: 0.1, include_center: true },
            PatchSpec::Polygonal { order: 0 },
        ] {
            assert!(matches!(SamplerIndexMap::build(&h, 1, bad), Err(Error::Config(_))));
        }
    }
}
