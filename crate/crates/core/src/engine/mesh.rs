//! Mesh convolution and mesh mean pooling.
//!
//! Convolution gathers each node's filter points into a row of the
//! full-node matrix `I` (`N x P*C_in`) and multiplies by the filter bank
//! (`P*C_in x C_out`). The gathered matrix is rebuilt in the backward pass
//! instead of being cached; at 10242 nodes and 36 channels it is ~74 MB per
//! sample.

use rayon::prelude::*;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::sampler::SamplerIndexMap;

/// Shared filter bank: `weights[(p * c_in + c) * c_out + f]`, plus one bias
/// per output channel. Used by mesh and image convolutions alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub points: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(points: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            points,
            in_channels,
            out_channels,
            weights: vec![0.0; points * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn at(&self, p: usize, c: usize, f: usize) -> f64 {
        self.weights[(p * self.in_channels + c) * self.out_channels + f]
    }

    pub fn set(&mut self, p: usize, c: usize, f: usize, v: f64) {
        self.weights[(p * self.in_channels + c) * self.out_channels + f] = v;
    }

    pub fn check(&self) -> Result<()> {
        if self.weights.len() != self.points * self.in_channels * self.out_channels
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Shape(format!(
                "filter bank {}x{}x{} has {} weights and {} biases",
                self.points,
                self.in_channels,
                self.out_channels,
                self.weights.len(),
                self.bias.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite filter weight".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn check_conv(input: &Tensor, map: &SamplerIndexMap, w: &ConvWeights) -> Result<()> {
    input.expect_rank(3, "mesh convolution")?;
    w.check()?;
    let (n, c) = (input.dims()[1], input.dims()[2]);
    if n != map.nodes() {
        return Err(Error::Shape(format!(
            "mesh convolution input has {n} nodes, index map (level {}) has {}",
            map.level(),
            map.nodes()
        )));
    }
    if c != w.in_channels || map.width() != w.points {
        return Err(Error::Shape(format!(
            "mesh convolution: input channels {c} / filter points {} vs weights {}x{}",
            map.width(),
            w.points,
            w.in_channels
        )));
    }
    Ok(())
}

/// Full-node filter point matrix for one sample (`N x P*C`).
fn gather_rows(sample: &[f64], map: &SamplerIndexMap, channels: usize) -> Vec<f64> {
    let mut cols = Vec::with_capacity(map.indices().len() * channels);
    for &idx in map.indices() {
        let at = idx as usize * channels;
        cols.extend_from_slice(&sample[at..at + channels]);
    }
    cols
}

/// `out[b][n][f] = sum_{p,c} in[b][idx[n][p]][c] * w[p][c][f] + bias[f]`.
pub fn mesh_conv_forward(input: &Tensor, map: &SamplerIndexMap, w: &ConvWeights) -> Result<Tensor> {
    check_conv(input, map, w)?;
    input.check_finite("mesh convolution input")?;
    let (batch, nodes, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let cout = w.out_channels;
    let k = w.points * cin;
    let mut out = Tensor::zeros(vec![batch, nodes, cout]);
    out.data_mut()
        .par_chunks_mut(nodes * cout)
        .enumerate()
        .for_each(|(b, o)| {
            let cols = gather_rows(input.sample(b), map, cin);
            for row in o.chunks_mut(cout) {
                row.copy_from_slice(&w.bias);
            }
            gemm(nodes, k, cout, &cols, false, &w.weights, false, 1.0, o);
        });
    Ok(out)
}

/// Exact transpose of [`mesh_conv_forward`]. Weight gradients are summed
/// over samples in ascending order.
pub fn mesh_conv_backward(
    input: &Tensor,
    map: &SamplerIndexMap,
    w: &ConvWeights,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    check_conv(input, map, w)?;
    let (batch, nodes, cin) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let cout = w.out_channels;
    if grad_out.dims() != [batch, nodes, cout] {
        return Err(Error::Shape(format!(
            "mesh convolution gradient dims {:?}, expected {:?}",
            grad_out.dims(),
            [batch, nodes, cout]
        )));
    }
    let k = w.points * cin;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let cols = gather_rows(input.sample(b), map, cin);
            let go = grad_out.sample(b);
            let mut gw = vec![0.0; k * cout];
            gemm(k, nodes, cout, &cols, true, go, false, 0.0, &mut gw);
            let mut gb = vec![0.0; cout];
            for row in go.chunks(cout) {
                for (acc, g) in gb.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            let mut gcols = vec![0.0; nodes * k];
            gemm(nodes, cout, k, go, false, &w.weights, true, 0.0, &mut gcols);
            let mut gin = vec![0.0; nodes * cin];
            for (&idx, g) in map.indices().iter().zip(gcols.chunks(cin)) {
                let at = idx as usize * cin;
                for (acc, v) in gin[at..at + cin].iter_mut().zip(g) {
                    *acc += v;
                }
            }
            (gin, gw, gb)
        })
        .collect();

    let mut grad_in = Vec::with_capacity(batch * nodes * cin);
    let mut gw = vec![0.0; k * cout];
    let mut gb = vec![0.0; cout];
    for (gi, w_b, b_b) in per_sample {
        grad_in.extend_from_slice(&gi);
        gw.iter_mut().zip(&w_b).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(&b_b).for_each(|(a, v)| *a += v);
    }
    Ok(ConvGrads {
        input: Tensor::new(vec![batch, nodes, cin], grad_in)?,
        weights: gw,
        bias: gb,
    })
}

fn check_pool(input_nodes: usize, groups: &[Vec<usize>], fine_nodes: usize) -> Result<()> {
    if input_nodes != fine_nodes {
        return Err(Error::Shape(format!(
            "mean pool expects {fine_nodes} fine nodes, got {input_nodes}"
        )));
    }
    if let Some(bad) = groups.iter().flatten().find(|&&j| j >= fine_nodes) {
        return Err(Error::Shape(format!(
            "pooling group member {bad} outside the fine level ({fine_nodes} nodes)"
        )));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::Shape("empty pooling group".into()));
    }
    Ok(())
}

/// `out[b][i][c]` is the mean of `in[b][j][c]` over `j` in `groups[i]`.
pub fn mesh_mean_pool_forward(input: &Tensor, groups: &[Vec<usize>], fine_nodes: usize) -> Result<Tensor> {
    input.expect_rank(3, "mesh mean pool")?;
    let (batch, nodes, ch) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    check_pool(nodes, groups, fine_nodes)?;
    let coarse = groups.len();
    let mut out = vec![0.0; batch * coarse * ch];
    for b in 0..batch {
        let x = input.sample(b);
        let o = &mut out[b * coarse * ch..(b + 1) * coarse * ch];
        for (i, g) in groups.iter().enumerate() {
            let inv = 1.0 / g.len() as f64;
            let dst = &mut o[i * ch..(i + 1) * ch];
            for &j in g {
                for (d, v) in dst.iter_mut().zip(&x[j * ch..(j + 1) * ch]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Tensor::new(vec![batch, coarse, ch], out)
}

/// Each coarse gradient is shared equally among its group; fine nodes that
/// belong to two groups (edge midpoints) accumulate from both.
pub fn mesh_mean_pool_backward(grad_out: &Tensor, groups: &[Vec<usize>], fine_nodes: usize) -> Result<Tensor> {
    grad_out.expect_rank(3, "mesh mean pool gradient")?;
    let (batch, coarse, ch) = (grad_out.dims()[0], grad_out.dims()[1], grad_out.dims()[2]);
    if coarse != groups.len() {
        return Err(Error::Shape(format!(
            "mean pool gradient has {coarse} nodes, expected {}",
            groups.len()
        )));
    }
    check_pool(fine_nodes, groups, fine_nodes)?;
    let mut gin = vec![0.0; batch * fine_nodes * ch];
    for b in 0..batch {
        let go = grad_out.sample(b);
        let gi = &mut gin[b * fine_nodes * ch..(b + 1) * fine_nodes * ch];
        for (i, g) in groups.iter().enumerate() {
            let inv = 1.0 / g.len() as f64;
            let src = &go[i * ch..(i + 1) * ch];
            for &j in g {
                for (d, v) in gi[j * ch..(j + 1) * ch].iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
    }
    Tensor::new(vec![batch, fine_nodes, ch], gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tensor::inner;
    use crate::icosphere::IcosphereHierarchy;
    use crate::sampler::{PatchSpec, PatchTemplate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_weights(p: usize, ci: usize, co: usize, seed: u64) -> ConvWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ConvWeights::zeros(p, ci, co);
        w.weights.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        w.bias.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        w
    }

    #[test]
    fn identity_filter_reproduces_input() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let map = SamplerIndexMap::build(&h, 2, PatchSpec::Rectangular { sx: 1, sy: 1, spacing: 0.1 }).unwrap();
        let mut w = ConvWeights::zeros(1, 1, 1);
        w.weights[0] = 1.0;
        let x = random(vec![2, 162, 1], 1);
        assert_eq!(mesh_conv_forward(&x, &map, &w).unwrap(), x);
    }

    #[test]
    fn center_delta_filter_reproduces_input() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let spec = PatchTemplate::default().resolve(h.level(2).unwrap());
        let map = SamplerIndexMap::build(&h, 2, spec).unwrap();
        let mut w = ConvWeights::zeros(25, 1, 1);
        w.set(12, 0, 0, 1.0);
        let x = random(vec![1, 162, 1], 2);
        assert_eq!(mesh_conv_forward(&x, &map, &w).unwrap(), x);
    }

    #[test]
    fn conv_shape_errors() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let map = SamplerIndexMap::build(&h, 1, PatchSpec::Polygonal { order: 1 }).unwrap();
        let w = ConvWeights::zeros(7, 2, 3);
        assert!(matches!(mesh_conv_forward(&Tensor::zeros(vec![1, 162, 2]), &map, &w), Err(Error::Shape(_))));
        assert!(matches!(mesh_conv_forward(&Tensor::zeros(vec![1, 42, 1]), &map, &w), Err(Error::Shape(_))));
        let mut bad = Tensor::zeros(vec![1, 42, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(mesh_conv_forward(&bad, &map, &w), Err(Error::Numeric(_))));
    }

    #[test]
    fn conv_weight_gradient_matches_central_differences() {
        let h = IcosphereHierarchy::build(1).unwrap();
        let spec = PatchTemplate::Rectangular { sx: 3, sy: 3, scale: 1.0 }.resolve(h.level(1).unwrap());
        let map = SamplerIndexMap::build(&h, 1, spec).unwrap();
        let x = random(vec![2, 42, 2], 3);
        let w = random_weights(9, 2, 3, 4);
        let probe = random(vec![2, 42, 3], 5);
        let loss = |w: &ConvWeights| inner(mesh_conv_forward(&x, &map, w).unwrap().data(), probe.data());
        let g = mesh_conv_backward(&x, &map, &w, &probe).unwrap();
        let eps = 1e-5;
        for i in 0..w.weights.len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a.weights[i] += eps;
            b.weights[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let rel = (fd - g.weights[i]).abs() / fd.abs().max(g.weights[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "weight {i}: fd {fd} vs {}", g.weights[i]);
        }
        for f in 0..3 {
            let (mut a, mut b) = (w.clone(), w.clone());
            a.bias[f] += eps;
            b.bias[f] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            assert!((fd - g.bias[f]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn conv_backward_is_transpose_of_forward() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let spec = PatchTemplate::default().resolve(h.level(2).unwrap());
        let map = SamplerIndexMap::build(&h, 2, spec).unwrap();
        let mut w = random_weights(25, 2, 4, 6);
        w.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = random(vec![3, 162, 2], 7);
        let y = random(vec![3, 162, 4], 8);
        let lhs = inner(mesh_conv_forward(&x, &map, &w).unwrap().data(), y.data());
        let rhs = inner(x.data(), mesh_conv_backward(&x, &map, &w, &y).unwrap().input.data());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_is_linear_in_input() {
        let h = IcosphereHierarchy::build(2).unwrap();
        let spec = PatchTemplate::default().resolve(h.level(2).unwrap());
        let map = SamplerIndexMap::build(&h, 2, spec).unwrap();
        let mut w = random_weights(25, 1, 2, 9);
        w.bias = vec![0.0; 2];
        let x = random(vec![1, 162, 1], 10);
        let y = random(vec![1, 162, 1], 11);
        let combo = Tensor::new(
            vec![1, 162, 1],
            x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
        )
        .unwrap();
        let fx = mesh_conv_forward(&x, &map, &w).unwrap();
        let fy = mesh_conv_forward(&y, &map, &w).unwrap();
        let fc = mesh_conv_forward(&combo, &map, &w).unwrap();
        for i in 0..fc.len() {
            assert!((fc.data()[i] - (2.0 * fx.data()[i] - 0.5 * fy.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_preserves_constants_and_shrinks_level() {
        let h = IcosphereHierarchy::build(3).unwrap();
        let groups = h.pooling_groups(2).unwrap();
        let x = Tensor::new(vec![2, 642, 3], vec![1.75; 2 * 642 * 3]).unwrap();
        let y = mesh_mean_pool_forward(&x, groups, 642).unwrap();
        assert_eq!(y.dims(), &[2, 162, 3]);
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn pool_backward_is_exact_adjoint() {
        let h = IcosphereHierarchy::build(3).unwrap();
        let groups = h.pooling_groups(2).unwrap();
        let x = random(vec![2, 642, 3], 12);
        let y = random(vec![2, 162, 3], 13);
        let lhs = inner(mesh_mean_pool_forward(&x, groups, 642).unwrap().data(), y.data());
        let rhs = inner(x.data(), mesh_mean_pool_backward(&y, groups, 642).unwrap().data());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_rejects_wrong_level() {
        let h = IcosphereHierarchy::build(3).unwrap();
        let groups = h.pooling_groups(1).unwrap();
        assert!(matches!(
            mesh_mean_pool_forward(&Tensor::zeros(vec![1, 642, 1]), groups, 162),
            Err(Error::Shape(_))
        ));
    }
}
