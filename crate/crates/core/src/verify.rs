//! Built-in self checks: mesh geometry, gradient agreement with finite
//! differences, and parameter accounting against the reference tables.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{mesh_mean_pool_backward, mesh_mean_pool_forward, tensor::inner, Tensor};
use crate::error::{Error, Result};
use crate::icosphere::{node_count, IcosphereHierarchy};
use crate::model::{
    build_gcnn, build_pcnn, gradient_check, parameter_report, GcnnConfig, Model, PcnnConfig, Shape,
};
use crate::sampler::PatchTemplate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Geometry,
    Gradients,
    Params,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Geometry, Suite::Gradients, Suite::Params];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Geometry => "geometry",
            Suite::Gradients => "gradients",
            Suite::Params => "params",
        }
    }

    pub fn run(self) -> Result<Vec<Check>> {
        match self {
            Suite::Geometry => geometry_suite(),
            Suite::Gradients => gradients_suite(),
            Suite::Params => params_suite(),
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(suite: Suite, name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        suite: suite.name(),
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(dims: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// `|<Px, y> - <x, P^T y>|` relative to the larger inner product.
pub fn pool_adjoint_gap(hierarchy: &IcosphereHierarchy, coarse: usize, seed: u64) -> Result<f64> {
    let groups = hierarchy.pooling_groups(coarse)?;
    let fine = node_count(coarse + 1);
    let x = random_tensor(vec![2, fine, 3], seed);
    let y = random_tensor(vec![2, groups.len(), 3], seed + 1);
    let px = mesh_mean_pool_forward(&x, groups, fine)?;
    let pty = mesh_mean_pool_backward(&y, groups, fine)?;
    let (a, b) = (inner(px.data(), y.data()), inner(x.data(), pty.data()));
    Ok((a - b).abs() / a.abs().max(b.abs()).max(1.0))
}

pub fn geometry_suite() -> Result<Vec<Check>> {
    let s = Suite::Geometry;
    let started = Instant::now();
    let h = IcosphereHierarchy::build(6)?;
    let secs = started.elapsed().as_secs_f64();
    let mut out = vec![check(s, "build level 6 under 10 s", secs < 10.0, format!("{secs:.2} s"))];
    for mesh in h.levels() {
        let k = mesh.level();
        let n = mesh.len();
        let expected = 10 * 4usize.pow(k as u32) + 2;
        let hist = mesh.degree_histogram();
        let pentagons = hist.get(5).copied().unwrap_or(0);
        let euler = n as i64 - mesh.edge_count() as i64 + mesh.faces().len() as i64;
        out.push(check(
            s,
            format!("level {k} counts"),
            n == expected && pentagons == 12 && euler == 2,
            format!("nodes {n} (expected {expected}), degree-5 nodes {pentagons}, V-E+F {euler}"),
        ));
    }
    let groups = h.pooling_groups(5)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let sixes = sizes.iter().filter(|&&z| z == 6).count();
    let total: usize = sizes.iter().sum();
    let expected_total = 10242 + 2 * (40962 - 10242);
    out.push(check(
        s,
        "pooling groups 6 -> 5",
        groups.len() == 10242 && sizes.iter().all(|z| (6..=7).contains(z)) && sixes == 12 && total == expected_total,
        format!("{} groups, {sixes} of size 6, sizes sum {total} (expected {expected_total})", groups.len()),
    ));
    for coarse in [2, 5] {
        let gap = pool_adjoint_gap(&h, coarse, 7 + coarse as u64)?;
        out.push(check(
            s,
            format!("pool adjoint {} -> {coarse}", coarse + 1),
            gap < 1e-12,
            format!("relative gap {gap:.2e}"),
        ));
    }
    Ok(out)
}

/// The level-2 mesh network used for gradient checks.
pub fn miniature_gcnn() -> Result<Model> {
    build_gcnn(
        None,
        &GcnnConfig {
            input_level: 2,
            blocks: 2,
            filters: 4,
            patch: PatchTemplate::Rectangular { sx: 3, sy: 3, scale: 1.0 },
            hidden: 6,
            seed: 11,
            ..GcnnConfig::default()
        },
    )
}

/// The 16x16 image network used for gradient checks.
pub fn miniature_pcnn() -> Result<Model> {
    build_pcnn(&PcnnConfig {
        height: 16,
        width: 16,
        filters: 3,
        conv1_kernel: 3,
        conv1_stride: 1,
        conv1_pad: 1,
        conv2_kernel: 3,
        conv2_pad: 1,
        hidden: 5,
        seed: 12,
        ..PcnnConfig::default()
    })
}

pub fn gradients_suite() -> Result<Vec<Check>> {
    let s = Suite::Gradients;
    let started = Instant::now();
    let mut out = Vec::new();
    let cases = [
        ("miniature gcnn", miniature_gcnn()?, random_tensor(vec![4, 162, 2], 1), vec![0, 1, 1, 0]),
        ("miniature pcnn", miniature_pcnn()?, random_tensor(vec![3, 16, 16, 2], 2), vec![0, 1, 1]),
    ];
    for (name, model, x, labels) in cases {
        let g = gradient_check(&model, &x, &labels, 1e-5)?;
        out.push(check(
            s,
            format!("{name} gradients"),
            g.max_rel_error < 1e-4,
            format!(
                "{} parameters, max relative error {:.2e} (row {}), max absolute error {:.2e}",
                g.parameters, g.max_rel_error, g.worst_row, g.max_abs_error
            ),
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    out.push(check(s, "gradient checks under 60 s", secs < 60.0, format!("{secs:.1} s")));
    Ok(out)
}

fn extent(shape: &Shape) -> usize {
    match *shape {
        Shape::Mesh { level, .. } => node_count(level),
        Shape::Image { height, .. } => height,
        Shape::Flat { features } => features,
    }
}

/// Checks that each named row outputs the given extent (nodes, image side
/// or features).
fn chain_check(s: Suite, name: &str, model: &Model, expected: &[(&str, usize)]) -> Check {
    let mut bad = Vec::new();
    for &(row, want) in expected {
        match model.spec().rows.iter().position(|r| r.name == row) {
            Some(i) if extent(&model.shapes()[i + 1]) == want => {}
            Some(i) => bad.push(format!("{row}: {} != {want}", model.shapes()[i + 1])),
            None => bad.push(format!("{row}: missing")),
        }
    }
    let chain: Vec<String> = model.shapes().iter().map(|s| s.to_string()).collect();
    let detail = if bad.is_empty() { chain.join(" -> ") } else { bad.join("; ") };
    check(s, name, bad.is_empty(), detail)
}

pub fn params_suite() -> Result<Vec<Check>> {
    let s = Suite::Params;
    let mut out = Vec::new();
    let gcnn = build_gcnn(None, &GcnnConfig::default())?;
    let pcnn = build_pcnn(&PcnnConfig::default())?;
    for (arch, model) in [("gcnn", &gcnn), ("pcnn", &pcnn)] {
        let report = parameter_report(model);
        for row in &report.rows {
            if let Some(t) = &row.table {
                let status = if t.enforced { "" } else { " (reference figure inconsistent, not enforced)" };
                out.push(check(
                    s,
                    format!("{arch} {} bytes", row.name),
                    t.matches || !t.enforced,
                    format!("{} B vs table {} B{status}", t.actual_bytes, t.expected_bytes),
                ));
            }
        }
        if let Some(t) = &report.table_total {
            out.push(check(
                s,
                format!("{arch} total within {:.0}% of {} MB", 100.0 * t.tolerance, t.expected_mb),
                t.pass,
                format!("{} B = {:.4} MB", t.actual_bytes, t.actual_mb),
            ));
        }
    }
    let mut g = vec![("conv1", 40962)];
    let pools = [("pool1", 10242), ("pool2", 2562), ("pool3", 642), ("pool4", 162), ("pool5", 42)];
    g.extend(pools);
    g.extend([("fc6", 50), ("fc7", 2)]);
    out.push(chain_check(s, "gcnn shape chain", &gcnn, &g));
    let p = [
        ("conv1", 54),
        ("pool1", 27),
        ("conv2", 27),
        ("pool2", 13),
        ("conv3", 13),
        ("conv4", 13),
        ("conv5", 13),
        ("pool5", 6),
        ("fc6", 100),
        ("fc7", 2),
    ];
    out.push(chain_check(s, "pcnn shape chain", &pcnn, &p));
    let gf = gcnn.shapes()[1..21].iter().all(|sh| matches!(sh, Shape::Mesh { channels: 36, .. }));
    out.push(check(s, "gcnn features 36 through row 20", gf, ""));
    Ok(out)
}

pub fn run_suites(suites: &[Suite]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for s in suites {
        out.extend(s.run()?);
    }
    Ok(out)
}
