//! Icosahedral subdivision hierarchy.
//!
//! Level 0 is the regular icosahedron; every finer level inserts one node at
//! the normalized midpoint of each edge and splits each triangle into four.
//! Node indices are parent-first: the first `N_k` nodes of level `k + 1` are
//! the nodes of level `k`, unchanged, followed by the edge midpoints in
//! ascending `(min endpoint, max endpoint)` order. Pooling relies on this.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

/// Deepest level the builder accepts (163842 nodes).
pub const MAX_LEVEL: usize = 7;

const PHI: f64 = 1.618_033_988_749_895;

/// Golden-ratio vertex set in a fixed order. The 2-fold symmetry axes of this
/// solid are the coordinate axes, so a half turn about any axis maps the mesh
/// onto itself at every level.
const BASE_VERTICES: [Vec3; 12] = [
    [-1.0, PHI, 0.0],
    [1.0, PHI, 0.0],
    [-1.0, -PHI, 0.0],
    [1.0, -PHI, 0.0],
    [0.0, -1.0, PHI],
    [0.0, 1.0, PHI],
    [0.0, -1.0, -PHI],
    [0.0, 1.0, -PHI],
    [PHI, 0.0, -1.0],
    [PHI, 0.0, 1.0],
    [-PHI, 0.0, -1.0],
    [-PHI, 0.0, 1.0],
];

/// Counter-clockwise seen from outside.
const BASE_FACES: [[usize; 3]; 20] = [
    [0, 11, 5],
    [0, 5, 1],
    [0, 1, 7],
    [0, 7, 10],
    [0, 10, 11],
    [1, 5, 9],
    [5, 11, 4],
    [11, 10, 2],
    [10, 7, 6],
    [7, 1, 8],
    [3, 9, 4],
    [3, 4, 2],
    [3, 2, 6],
    [3, 6, 8],
    [3, 8, 9],
    [4, 9, 5],
    [2, 4, 11],
    [6, 2, 10],
    [8, 6, 7],
    [9, 8, 1],
];

/// Node count of level `k`: `10 * 4^k + 2`.
pub fn node_count(level: usize) -> usize {
    10 * 4usize.pow(level as u32) + 2
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcosphereLevel {
    level: usize,
    positions: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    adjacency: Vec<Vec<usize>>,
}

impl IcosphereLevel {
    fn from_parts(level: usize, positions: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        let mut adjacency = vec![Vec::with_capacity(6); positions.len()];
        for f in &faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Self {
            level,
            positions,
            faces,
            adjacency,
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn position(&self, node: usize) -> Vec3 {
        self.positions[node]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Sorted neighbor indices of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as `(lo, hi)` pairs in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Mean chord length over all edges.
    pub fn mean_edge_length(&self) -> f64 {
        let (sum, n) = self.edges().fold((0.0, 0usize), |(s, n), (i, j)| {
            (s + vec3::dist2(self.positions[i], self.positions[j]).sqrt(), n + 1)
        });
        sum / n as f64
    }

    /// Mean great-circle angle over all edges, in radians.
    pub fn mean_edge_angle(&self) -> f64 {
        let (sum, n) = self.edges().fold((0.0, 0usize), |(s, n), (i, j)| {
            (s + vec3::angle(self.positions[i], self.positions[j]), n + 1)
        });
        sum / n as f64
    }

    /// Histogram of node degrees, indexed by degree.
    pub fn degree_histogram(&self) -> Vec<usize> {
        let max = self.adjacency.iter().map(Vec::len).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for nb in &self.adjacency {
            hist[nb.len()] += 1;
        }
        hist
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.len() {
            return Err(Error::Index(format!(
                "node {node} out of range for level {} ({} nodes)",
                self.level,
                self.len()
            )));
        }
        Ok(())
    }

    /// All nodes within graph distance `order` of `node`, itself included,
    /// sorted ascending.
    pub fn neighbor_ring(&self, node: usize, order: usize) -> Result<Vec<usize>> {
        self.check_node(node)?;
        let mut dist = BTreeMap::new();
        dist.insert(node, 0usize);
        let mut queue = VecDeque::from([node]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if d == order {
                continue;
            }
            for &nb in &self.adjacency[cur] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(nb) {
                    e.insert(d + 1);
                    queue.push_back(nb);
                }
            }
        }
        Ok(dist.into_keys().collect())
    }

    /// Nearest node by Euclidean distance, ties to the lowest index. Linear scan.
    pub fn nearest_node_brute(&self, point: Vec3) -> usize {
        let mut best = (f64::INFINITY, 0usize);
        for (i, &p) in self.positions.iter().enumerate() {
            let d = vec3::dist2(p, point);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Greedy descent over the mesh graph starting at `start`. On a convex-hull
    /// triangulation this terminates at the nearest node.
    pub fn walk_to_nearest(&self, start: usize, point: Vec3) -> usize {
        let mut cur = start;
        let mut cur_d = vec3::dist2(self.positions[cur], point);
        loop {
            let mut best = (cur_d, cur);
            for &nb in &self.adjacency[cur] {
                let d = vec3::dist2(self.positions[nb], point);
                if d < best.0 || (d == best.0 && nb < best.1) {
                    best = (d, nb);
                }
            }
            if best.1 == cur {
                return cur;
            }
            cur = best.1;
            cur_d = best.0;
        }
    }

    /// Plain-text OBJ listing, 1-based face indices.
    pub fn write_obj<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# icosphere level {} ({} nodes)", self.level, self.len())?;
        for p in &self.positions {
            writeln!(out, "v {} {} {}", p[0], p[1], p[2])?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    fn subdivide(&self) -> IcosphereLevel {
        let n = self.len();
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                midpoint.insert((a.min(b), a.max(b)), 0);
            }
        }
        let mut positions = Vec::with_capacity(n + midpoint.len());
        positions.extend_from_slice(&self.positions);
        for (rank, (&(a, b), slot)) in midpoint.iter_mut().enumerate() {
            *slot = n + rank;
            let m = vec3::add(self.positions[a], self.positions[b]);
            positions.push(vec3::normalize(m));
        }
        let mid = |a: usize, b: usize| midpoint[&(a.min(b), a.max(b))];
        let mut faces = Vec::with_capacity(self.faces.len() * 4);
        for &[a, b, c] in &self.faces {
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            faces.push([a, ab, ca]);
            faces.push([b, bc, ab]);
            faces.push([c, ca, bc]);
            faces.push([ab, bc, ca]);
        }
        IcosphereLevel::from_parts(self.level + 1, positions, faces)
    }
}

/// Levels `0..=max_level` plus the pooling groups between consecutive levels.
#[derive(Clone, Debug, PartialEq)]
pub struct IcosphereHierarchy {
    levels: Vec<IcosphereLevel>,
    /// `pooling[k][i]`: level `k + 1` members averaged into node `i` of level `k`.
    pooling: Vec<Vec<Vec<usize>>>,
}

impl IcosphereHierarchy {
    pub fn build(max_level: usize) -> Result<Self> {
        if max_level > MAX_LEVEL {
            return Err(Error::Config(format!(
                "icosphere level {max_level} exceeds the supported maximum {MAX_LEVEL}"
            )));
        }
        let base = BASE_VERTICES.iter().map(|&v| vec3::normalize(v)).collect();
        let mut levels = vec![IcosphereLevel::from_parts(0, base, BASE_FACES.to_vec())];
        for _ in 0..max_level {
            let next = levels.last().unwrap().subdivide();
            levels.push(next);
        }
        let pooling = (0..max_level)
            .map(|k| {
                let fine = &levels[k + 1];
                (0..levels[k].len())
                    .map(|i| {
                        let mut g = Vec::with_capacity(7);
                        g.push(i);
                        g.extend_from_slice(fine.neighbors(i));
                        g.sort_unstable();
                        g
                    })
                    .collect()
            })
            .collect();
        Ok(Self { levels, pooling })
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[IcosphereLevel] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> Result<&IcosphereLevel> {
        self.levels.get(k).ok_or_else(|| {
            Error::Index(format!(
                "level {k} not built (hierarchy goes to level {})",
                self.max_level()
            ))
        })
    }

    /// Groups pooling level `coarse_level + 1` down to `coarse_level`.
    pub fn pooling_groups(&self, coarse_level: usize) -> Result<&[Vec<usize>]> {
        self.pooling.get(coarse_level).map(Vec::as_slice).ok_or_else(|| {
            Error::Index(format!(
                "no pooling groups for coarse level {coarse_level} (max level {})",
                self.max_level()
            ))
        })
    }

    /// Nearest node of level `k` to `point`, ties to the lowest index.
    ///
    /// Starts from a scan of the 12 base nodes and refines one level at a time,
    /// using the parent-first ordering to seed each walk.
    pub fn nearest_node(&self, k: usize, point: Vec3) -> usize {
        let mut cur = self.levels[0].nearest_node_brute(point);
        for lvl in &self.levels[..=k] {
            cur = lvl.walk_to_nearest(cur, point);
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_zero_is_icosahedron() {
        let h = IcosphereHierarchy::build(0).unwrap();
        let l = h.level(0).unwrap();
        assert_eq!(l.len(), 12);
        assert_eq!(l.faces().len(), 20);
        assert_eq!(l.edge_count(), 30);
        assert!((0..12).all(|i| l.degree(i) == 5));
    }

    #[test]
    fn base_faces_point_outward() {
        let h = IcosphereHierarchy::build(2).unwrap();
        for l in h.levels() {
            for &[a, b, c] in l.faces() {
                assert!(vec3::det(l.position(a), l.position(b), l.position(c)) > 0.0);
            }
        }
    }

    #[test]
    fn node_counts_follow_formula() {
        let h = IcosphereHierarchy::build(3).unwrap();
        let counts: Vec<_> = h.levels().iter().map(IcosphereLevel::len).collect();
        assert_eq!(counts, vec![12, 42, 162, 642]);
        for (k, l) in h.levels().iter().enumerate() {
            assert_eq!(l.len(), node_count(k));
            assert_eq!(l.faces().len(), 20 * 4usize.pow(k as u32));
            assert_eq!(l.edge_count(), 30 * 4usize.pow(k as u32));
            assert_eq!(l.len() + l.faces().len() - l.edge_count(), 2);
        }
    }

    #[test]
    fn rejects_level_above_max() {
        assert!(matches!(IcosphereHierarchy::build(8), Err(Error::Config(_))));
    }

    #[test]
    fn parent_positions_are_preserved() {
        let h = IcosphereHierarchy::build(4).unwrap();
        for k in 0..4 {
            let (c, f) = (&h.levels()[k], &h.levels()[k + 1]);
            assert_eq!(c.positions(), &f.positions()[..c.len()]);
        }
    }

    #[test]
    fn adjacency_is_symmetric_and_degrees_are_five_or_six() {
        let h = IcosphereHierarchy::build(3).unwrap();
        for l in h.levels() {
            let hist = l.degree_histogram();
            assert_eq!(hist[5], 12);
            assert_eq!(hist.iter().sum::<usize>(), l.len());
            assert_eq!(hist[5] + hist.get(6).copied().unwrap_or(0), l.len());
            for i in 0..l.len() {
                for &j in l.neighbors(i) {
                    assert!(l.neighbors(j).binary_search(&i).is_ok());
                }
            }
        }
    }

    #[test]
    fn positions_are_unit() {
        let h = IcosphereHierarchy::build(4).unwrap();
        for p in h.levels()[4].positions() {
            assert!((vec3::norm(*p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_length_roughly_halves() {
        let h = IcosphereHierarchy::build(5).unwrap();
        for k in 0..5 {
            let a = h.levels()[k].mean_edge_length();
            let b = h.levels()[k + 1].mean_edge_length();
            assert!(b < a);
            // Level 0 -> 1 is the coarsest step and shrinks least (ratio ~0.554).
            assert!((b / a - 0.5).abs() < 0.1, "ratio {}", b / a);
            if k > 0 {
                assert!((b / a - 0.5).abs() < 0.025, "ratio {}", b / a);
            }
        }
    }

    #[test]
    fn ring_of_order_zero_is_self() {
        let h = IcosphereHierarchy::build(0).unwrap();
        assert_eq!(h.level(0).unwrap().neighbor_ring(0, 0).unwrap(), vec![0]);
        assert_eq!(h.level(0).unwrap().neighbor_ring(3, 1).unwrap().len(), 6);
    }

    #[test]
    fn ring_out_of_range_is_index_error() {
        let h = IcosphereHierarchy::build(1).unwrap();
        assert!(matches!(
            h.level(1).unwrap().neighbor_ring(42, 1),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn second_ring_at_hexagon_node_has_nineteen_nodes() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let l = h.level(2).unwrap();
        // Independent oracle: distance matrix by repeated relaxation.
        let n = l.len();
        let hex = (0..n).find(|&i| l.degree(i) == 6 && l.neighbors(i).iter().all(|&j| l.degree(j) == 6)).unwrap();
        let mut dist = vec![usize::MAX; n];
        dist[hex] = 0;
        for _ in 0..2 {
            let snapshot = dist.clone();
            for (i, &d) in snapshot.iter().enumerate() {
                if d != usize::MAX {
                    for &j in l.neighbors(i) {
                        dist[j] = dist[j].min(d + 1);
                    }
                }
            }
        }
        let expected: Vec<_> = (0..n).filter(|&i| dist[i] <= 2).collect();
        assert_eq!(expected.len(), 19);
        assert_eq!(l.neighbor_ring(hex, 2).unwrap(), expected);
    }

    #[test]
    fn pooling_groups_have_expected_sizes() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let g0 = h.pooling_groups(0).unwrap();
        assert_eq!(g0.len(), 12);
        assert!(g0.iter().all(|g| g.len() == 6));
        let g1 = h.pooling_groups(1).unwrap();
        assert_eq!(g1.len(), 42);
        assert_eq!(g1.iter().filter(|g| g.len() == 6).count(), 12);
        assert_eq!(g1.iter().filter(|g| g.len() == 7).count(), 30);
        assert!(g1[..12].iter().all(|g| g.len() == 6));
        assert!(h.pooling_groups(2).is_err());
    }

    #[test]
    fn pooling_groups_cover_fine_level() {
        let h = IcosphereHierarchy::build(3).unwrap();
        for k in 0..3 {
            let nc = h.levels()[k].len();
            let nf = h.levels()[k + 1].len();
            let mut hits = vec![0usize; nf];
            for g in h.pooling_groups(k).unwrap() {
                for &j in g {
                    hits[j] += 1;
                }
            }
            assert!(hits[..nc].iter().all(|&c| c == 1));
            assert!(hits[nc..].iter().all(|&c| c == 2));
            assert_eq!(hits.iter().sum::<usize>(), nc + 2 * (nf - nc));
        }
    }

    #[test]
    fn nearest_node_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let h = IcosphereHierarchy::build(5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3000 {
            let p = vec3::normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            for k in [0, 2, 5] {
                assert_eq!(h.nearest_node(k, p), h.levels()[k].nearest_node_brute(p));
            }
        }
    }

    #[test]
    fn half_turn_about_z_is_a_mesh_symmetry() {
        let h = IcosphereHierarchy::build(3).unwrap();
        let l = h.level(3).unwrap();
        for p in l.positions() {
            let q = [-p[0], -p[1], p[2]];
            let j = l.nearest_node_brute(q);
            assert!(vec3::dist2(l.position(j), q) < 1e-24);
        }
    }

    #[test]
    fn obj_export_lists_vertices_and_faces() {
        let h = IcosphereHierarchy::build(1).unwrap();
        let mut buf = Vec::new();
        h.level(1).unwrap().write_obj(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 42);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 80);
        for line in text.lines().filter(|l| l.starts_with("f ")) {
            assert!(line[2..].split(' ').all(|t| (1..=42).contains(&t.parse::<usize>().unwrap())));
        }
    }
}
