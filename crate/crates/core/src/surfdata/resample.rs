use std::collections::HashMap;

use super::NodeMap;
use crate::error::{Error, Result};
use crate::icosphere::IcosphereLevel;
use crate::vec3::{self, Vec3};

/// Arbitrary closed triangulated sphere carrying `values[v * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceMesh {
    pub positions: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SourceMesh {
    /// Checks sizes, index bounds and the sphere Euler characteristic.
    pub fn validate(&self) -> Result<()> {
        let v = self.positions.len();
        if self.values.len() != v * self.channels || self.mask.len() != v {
            return Err(Error::Shape(format!(
                "source mesh with {v} vertices has {} values and {} mask flags",
                self.values.len(),
                self.mask.len()
            )));
        }
        if self.faces.iter().flatten().any(|&i| i >= v) {
            return Err(Error::Geometry("face index out of range".into()));
        }
        let mut edges = std::collections::HashSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        let euler = v as i64 - edges.len() as i64 + self.faces.len() as i64;
        if euler != 2 {
            return Err(Error::Geometry(format!("source mesh Euler characteristic is {euler}, expected 2")));
        }
        Ok(())
    }

    /// The icosphere level itself as a source mesh.
    pub fn from_level(level: &IcosphereLevel, channels: usize, values: Vec<f64>, mask: Vec<bool>) -> Self {
        Self {
            positions: level.positions().to_vec(),
            faces: level.faces().to_vec(),
            channels,
            values,
            mask,
        }
    }
}

const COINCIDENT: f64 = 1e-9;
const INSIDE_TOL: f64 = -1e-12;

struct Locator<'a> {
    src: &'a SourceMesh,
    /// Faces with counter-clockwise (outward) winding.
    faces: Vec<[usize; 3]>,
    /// `across[f][k]`: face sharing the edge opposite corner `k`.
    across: Vec<[usize; 3]>,
    vertex_face: Vec<usize>,
    grid: HashMap<(i32, i32, i32), Vec<usize>>,
    cell: f64,
}

impl<'a> Locator<'a> {
    fn new(src: &'a SourceMesh) -> Result<Self> {
        let faces: Vec<[usize; 3]> = src
            .faces
            .iter()
            .map(|&[a, b, c]| {
                let p = &src.positions;
                if vec3::det(p[a], p[b], p[c]) < 0.0 {
                    [a, c, b]
                } else {
                    [a, b, c]
                }
            })
            .collect();
        let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[(k + 1) % 3], f[(k + 2) % 3]);
                by_edge.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let mut across = vec![[usize::MAX; 3]; faces.len()];
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[(k + 1) % 3], f[(k + 2) % 3]);
                let shared = &by_edge[&(a.min(b), a.max(b))];
                if shared.len() != 2 {
                    return Err(Error::Geometry(format!(
                        "edge ({a}, {b}) belongs to {} faces, expected 2",
                        shared.len()
                    )));
                }
                across[fi][k] = if shared[0] == fi { shared[1] } else { shared[0] };
            }
        }
        let mut vertex_face = vec![usize::MAX; src.positions.len()];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if vertex_face[v] == usize::MAX {
                    vertex_face[v] = fi;
                }
            }
        }
        let cells = ((src.positions.len() as f64 / 2.0).cbrt().ceil() as usize).max(1);
        let cell = 2.0 / cells as f64;
        let mut grid: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        for (i, p) in src.positions.iter().enumerate() {
            grid.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Ok(Self {
            src,
            faces,
            across,
            vertex_face,
            grid,
            cell,
        })
    }

    fn key(p: Vec3, cell: f64) -> (i32, i32, i32) {
        let k = |x: f64| ((x + 1.0) / cell).floor() as i32;
        (k(p[0]), k(p[1]), k(p[2]))
    }

    /// Nearest source vertex, searching grid shells outward.
    fn nearest_vertex(&self, p: Vec3) -> usize {
        let (cx, cy, cz) = Self::key(p, self.cell);
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = (2.0 / self.cell).ceil() as i32 + 1;
        for r in 0..=max_r {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(vs) = self.grid.get(&(cx + dx, cy + dy, cz + dz)) {
                            for &v in vs {
                                let d = vec3::dist2(self.src.positions[v], p);
                                if d < best.0 || (d == best.0 && v < best.1) {
                                    best = (d, v);
                                }
                            }
                        }
                    }
                }
            }
            // every unvisited cell is at least r * cell away
            if best.1 != usize::MAX && best.0.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        best.1
    }

    /// Signed sub-volumes; all non-negative inside the face's cone.
    fn coords(&self, f: usize, p: Vec3) -> [f64; 3] {
        let [a, b, c] = self.faces[f].map(|i| self.src.positions[i]);
        [vec3::det(p, b, c), vec3::det(a, p, c), vec3::det(a, b, p)]
    }

    fn contains(&self, f: usize, p: Vec3) -> Option<[f64; 3]> {
        let w = self.coords(f, p);
        let scale = w.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
        w.iter().all(|&x| x / scale >= INSIDE_TOL).then_some(w)
    }

    fn locate(&self, p: Vec3, start: usize) -> Option<(usize, [f64; 3])> {
        let mut f = start;
        for _ in 0..self.faces.len() {
            let w = self.coords(f, p);
            if let Some(w) = self.contains(f, p) {
                return Some((f, w));
            }
            let k = (0..3).min_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap();
            f = self.across[f][k];
        }
        (0..self.faces.len()).find_map(|f| self.contains(f, p).map(|w| (f, w)))
    }
}

/// Barycentric resampling onto `target`: each target node takes the weighted
/// source values of the face whose cone contains it (weights from the ray
/// through the face plane). A target node within 1e-9 of a source vertex
/// copies it. A node is masked out when any vertex with nonzero weight is.
pub fn resample_to_icosphere(src: &SourceMesh, target: &IcosphereLevel) -> Result<NodeMap> {
    src.validate()?;
    let loc = Locator::new(src)?;
    let c = src.channels;
    let n = target.len();
    let mut values = vec![0.0; n * c];
    let mut mask = vec![true; n];
    for t in 0..n {
        let p = target.position(t);
        let v = loc.nearest_vertex(p);
        let out = &mut values[t * c..(t + 1) * c];
        if vec3::dist2(src.positions[v], p) < COINCIDENT * COINCIDENT {
            out.copy_from_slice(&src.values[v * c..(v + 1) * c]);
            mask[t] = src.mask[v];
            continue;
        }
        let (f, w) = loc
            .locate(p, loc.vertex_face[v])
            .ok_or_else(|| Error::Geometry(format!("no source face contains target node {t}")))?;
        let total: f64 = w.iter().sum();
        for (k, &vi) in loc.faces[f].iter().enumerate() {
            let wk = w[k].max(0.0) / total;
            if wk > 0.0 {
                mask[t] &= src.mask[vi];
                for ch in 0..c {
                    out[ch] += wk * src.values[vi * c + ch];
                }
            }
        }
    }
    NodeMap::new(target.level(), c, values, mask)
}
