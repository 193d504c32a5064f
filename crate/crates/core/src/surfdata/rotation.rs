use serde::{Deserialize, Serialize};

use super::NodeMap;
use crate::error::{Error, Result};
use crate::icosphere::IcosphereHierarchy;
use crate::vec3::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => [1.0, 0.0, 0.0],
            Axis::Y => [0.0, 1.0, 0.0],
            Axis::Z => [0.0, 0.0, 1.0],
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Config(format!("unknown axis '{s}', expected x, y or z"))),
        }
    }
}

/// Proper rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Right-handed rotation about `axis` (normalized here) by `degrees`.
    pub fn from_axis_angle(axis: Vec3, degrees: f64) -> Result<Self> {
        if vec3::norm(axis) < 1e-12 || !degrees.is_finite() {
            return Err(Error::Config("rotation needs a nonzero axis and a finite angle".into()));
        }
        let [x, y, z] = vec3::normalize(axis);
        let (s, c) = degrees.to_radians().sin_cos();
        let t = 1.0 - c;
        Ok(Self {
            m: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
        })
    }

    pub fn about(axis: Axis, degrees: f64) -> Self {
        Self::from_axis_angle(axis.unit(), degrees).expect("unit axis")
    }

    /// Accepts a matrix whose rows are orthonormal with determinant 1 (1e-10).
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { m };
        let qtq = r.transpose().compose(&r);
        let id = Self::identity();
        let off = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (qtq.m[i][j] - id.m[i][j]).abs())
            .fold(0.0, f64::max);
        if off > 1e-10 || (r.determinant() - 1.0).abs() > 1e-10 {
            return Err(Error::Config("matrix is not a proper rotation".into()));
        }
        Ok(r)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        vec3::det(self.m[0], self.m[1], self.m[2])
    }

    pub fn transpose(&self) -> Self {
        let m = self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        [vec3::dot(self.m[0], p), vec3::dot(self.m[1], p), vec3::dot(self.m[2], p)]
    }
}

/// Pull-back resampling: node `n` of the output takes the values and mask of
/// the node nearest to `qᵀ · position(n)`.
pub fn rotate_map(map: &NodeMap, q: &Rotation, hierarchy: &IcosphereHierarchy) -> Result<NodeMap> {
    let mesh = hierarchy.level(map.level)?;
    let back = q.transpose();
    let c = map.channels;
    let mut out = map.clone();
    if *q == Rotation::identity() {
        return Ok(out);
    }
    for n in 0..mesh.len() {
        let src = hierarchy.nearest_node(map.level, back.apply(mesh.position(n)));
        out.values[n * c..(n + 1) * c].copy_from_slice(map.node_values(src));
        out.mask[n] = map.mask[src];
    }
    Ok(out)
}
