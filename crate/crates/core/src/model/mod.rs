//! Layer stacks for the mesh network and the projected-image baseline.
//!
//! A [`ModelSpec`] is the serializable description (rows in table order);
//! a [`Model`] owns the parameters, the shared geometry, and freeze flags.

mod audit;
mod build;
mod checkpoint;
mod gradcheck;

pub use audit::{parameter_report, ByteBasis, ParamRow, ParameterReport, TableCheck};
pub use build::{build_gcnn, build_pcnn, GcnnConfig, PcnnConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradient_check, GradientCheck};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{self, *};
use crate::error::{Error, Result};
use crate::icosphere::{node_count, IcosphereHierarchy};
use crate::sampler::{PatchSpec, SamplerIndexMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gcnn,
    Pcnn,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Gcnn => "gcnn",
            Arch::Pcnn => "pcnn",
        })
    }
}

/// Per-sample activation extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Mesh { level: usize, channels: usize },
    Image { height: usize, width: usize, channels: usize },
    Flat { features: usize },
}

impl Shape {
    /// Tensor dims for a batch of `batch` samples.
    pub fn dims(&self, batch: usize) -> Vec<usize> {
        match *self {
            Shape::Mesh { level, channels } => vec![batch, node_count(level), channels],
            Shape::Image {
                height,
                width,
                channels,
            } => vec![batch, height, width, channels],
            Shape::Flat { features } => vec![batch, features],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims(1).iter().product()
    }

    /// Size of the last (feature) dimension.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Mesh { channels, .. } | Shape::Image { channels, .. } => channels,
            Shape::Flat { features } => features,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Mesh { level, channels } => write!(f, "{}x1x{channels}", node_count(level)),
            Shape::Image {
                height,
                width,
                channels,
            } => write!(f, "{height}x{width}x{channels}"),
            Shape::Flat { features } => write!(f, "1x1x{features}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    MeshConv { filters: usize, patch: PatchSpec },
    /// Mean pooling one level down the hierarchy.
    MeshPool,
    BatchNorm,
    Relu,
    Dense { outputs: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize, pad: usize },
    Pool2d { kernel: usize, stride: usize },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::MeshConv { .. } => "mesh_conv",
            LayerSpec::MeshPool => "mesh_pool",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Pool2d { .. } => "pool2d",
            LayerSpec::Softmax => "softmax",
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let bad = |why: &str| Err(Error::Config(format!("{} after {input:?}: {why}", self.kind())));
        match (*self, input) {
            (LayerSpec::MeshConv { filters, patch }, Shape::Mesh { level, .. }) => {
                patch.validate()?;
                if filters == 0 {
                    return bad("zero filters");
                }
                Ok(Shape::Mesh {
                    level,
                    channels: filters,
                })
            }
            (LayerSpec::MeshPool, Shape::Mesh { level, channels }) => {
                if level == 0 {
                    return bad("no coarser level below 0");
                }
                Ok(Shape::Mesh {
                    level: level - 1,
                    channels,
                })
            }
            (LayerSpec::BatchNorm | LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Dense { outputs }, _) if outputs > 0 => Ok(Shape::Flat { features: outputs }),
            (
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    pad,
                },
                Shape::Image { height, width, .. },
            ) => match (
                out_extent(height, kernel, stride, pad),
                out_extent(width, kernel, stride, pad),
            ) {
                (Some(h), Some(w)) if filters > 0 => Ok(Shape::Image {
                    height: h,
                    width: w,
                    channels: filters,
                }),
                _ => bad("image too small for the kernel/stride chain"),
            },
            (LayerSpec::Pool2d { kernel, stride }, Shape::Image { height, width, channels }) => {
                match (out_extent(height, kernel, stride, 0), out_extent(width, kernel, stride, 0)) {
                    (Some(h), Some(w)) => Ok(Shape::Image {
                        height: h,
                        width: w,
                        channels,
                    }),
                    _ => bad("image too small for the pooling chain"),
                }
            }
            (LayerSpec::Softmax, s @ Shape::Flat { .. }) => Ok(s),
            _ => bad("incompatible input"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub name: String,
    pub layer: LayerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input: Shape,
    pub classes: usize,
    pub seed: u64,
    pub rows: Vec<RowSpec>,
}

impl ModelSpec {
    /// Activation shapes: the input followed by every row's output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input];
        for (i, row) in self.rows.iter().enumerate() {
            if row.layer == LayerSpec::Softmax && i + 1 != self.rows.len() {
                return Err(Error::Config(format!("softmax row '{}' must be last", row.name)));
            }
            let next = row
                .layer
                .output_shape(*shapes.last().unwrap())
                .map_err(|e| Error::Config(format!("row {} '{}': {e}", i + 1, row.name)))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Finest mesh level touched by a mesh layer, if any.
    pub fn mesh_level(&self) -> Option<usize> {
        match self.input {
            Shape::Mesh { level, .. }
                if self
                    .rows
                    .iter()
                    .any(|r| matches!(r.layer, LayerSpec::MeshConv { .. } | LayerSpec::MeshPool)) =>
            {
                Some(level)
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<Vec<Shape>> {
        let shapes = self.shapes()?;
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if *shapes.last().unwrap() != (Shape::Flat { features: self.classes }) {
            return Err(Error::Config(format!(
                "model ends in {:?}, expected {} class scores",
                shapes.last().unwrap(),
                self.classes
            )));
        }
        Ok(shapes)
    }
}

/// Runtime state of one table row.
#[derive(Clone, Debug)]
pub enum Layer {
    MeshConv {
        map: Arc<SamplerIndexMap>,
        weights: ConvWeights,
    },
    MeshPool {
        coarse_level: usize,
    },
    BatchNorm(BatchNormState),
    Relu,
    Dense(DenseWeights),
    Conv2d(Conv2dWeights),
    Pool2d {
        kernel: usize,
        stride: usize,
    },
    Softmax,
}

impl Layer {
    /// Trainable parameter slices, in serialization order.
    fn trainable(&self) -> Vec<&[f64]> {
        match self {
            Layer::MeshConv { weights, .. } => vec![&weights.weights, &weights.bias],
            Layer::BatchNorm(s) => vec![&s.scale, &s.shift],
            Layer::Dense(w) => vec![&w.weights, &w.bias],
            Layer::Conv2d(w) => vec![&w.weights, &w.bias],
            _ => vec![],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::MeshConv { weights, .. } => vec![&mut weights.weights, &mut weights.bias],
            Layer::BatchNorm(s) => vec![&mut s.scale, &mut s.shift],
            Layer::Dense(w) => vec![&mut w.weights, &mut w.bias],
            Layer::Conv2d(w) => vec![&mut w.weights, &mut w.bias],
            _ => vec![],
        }
    }

    /// Every stored value (trainable plus running statistics), in order.
    fn stored(&self) -> Vec<&[f64]> {
        match self {
            Layer::BatchNorm(s) => vec![&s.scale, &s.shift, &s.running_mean, &s.running_var],
            _ => self.trainable(),
        }
    }

    fn stored_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm(s) => vec![&mut s.scale, &mut s.shift, &mut s.running_mean, &mut s.running_var],
            _ => self.trainable_mut(),
        }
    }

    /// `(weight values, bias values)`; batch norm counts all four vectors as weights.
    pub fn param_counts(&self) -> (usize, usize) {
        match self {
            Layer::MeshConv { weights, .. } => (weights.weights.len(), weights.bias.len()),
            Layer::BatchNorm(s) => (4 * s.channels(), 0),
            Layer::Dense(w) => (w.weights.len(), w.bias.len()),
            Layer::Conv2d(w) => (w.weights.len(), w.bias.len()),
            _ => (0, 0),
        }
    }
}

/// Per-row gradients, aligned with the trainable slices of each row.
/// Rows below the first trainable row are left empty.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().flatten().copied().collect()
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Shape>,
    hierarchy: Option<Arc<IcosphereHierarchy>>,
    layers: Vec<Layer>,
    frozen: Vec<bool>,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
}

impl Model {
    /// Builds geometry and initial parameters for `spec`. Mesh models need a
    /// hierarchy reaching the input level; one is built when `None` is given.
    pub fn from_spec(spec: ModelSpec, hierarchy: Option<Arc<IcosphereHierarchy>>) -> Result<Self> {
        let shapes = spec.validate()?;
        let hierarchy = match spec.mesh_level() {
            None => hierarchy,
            Some(level) => match hierarchy {
                Some(h) if h.max_level() >= level => Some(h),
                _ => Some(Arc::new(IcosphereHierarchy::build(level)?)),
            },
        };
        let mut layers = Vec::with_capacity(spec.rows.len());
        for (i, row) in spec.rows.iter().enumerate() {
            let input = shapes[i];
            let layer = match (row.layer, input) {
                (LayerSpec::MeshConv { filters, patch }, Shape::Mesh { level, channels }) => {
                    let h = hierarchy.as_ref().expect("mesh model has a hierarchy");
                    let map = Arc::new(SamplerIndexMap::build(h, level, patch)?);
                    Layer::MeshConv {
                        weights: ConvWeights::zeros(map.width(), channels, filters),
                        map,
                    }
                }
                (LayerSpec::MeshPool, Shape::Mesh { level, .. }) => Layer::MeshPool {
                    coarse_level: level - 1,
                },
                (LayerSpec::BatchNorm, s) => Layer::BatchNorm(BatchNormState::new(s.channels())),
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::Dense { outputs }, s) => Layer::Dense(DenseWeights::zeros(s.numel(), outputs)),
                (
                    LayerSpec::Conv2d {
                        filters,
                        kernel,
                        stride,
                        pad,
                    },
                    s,
                ) => Layer::Conv2d(Conv2dWeights::zeros(
                    Conv2dGeometry { kernel, stride, pad },
                    s.channels(),
                    filters,
                )),
                (LayerSpec::Pool2d { kernel, stride }, _) => Layer::Pool2d { kernel, stride },
                (LayerSpec::Softmax, _) => Layer::Softmax,
                _ => unreachable!("shape inference accepted the row"),
            };
            layers.push(layer);
        }
        let mut model = Self {
            frozen: vec![false; layers.len()],
            spec,
            shapes,
            hierarchy,
            layers,
        };
        let seed = model.spec.seed;
        model.reinitialize(seed);
        Ok(model)
    }

    /// Fresh parameters from `seed`: uniform in ±sqrt(6 / (fan_in + fan_out))
    /// for weights, zero biases, unit batch-norm scale and running variance.
    /// Row `i` draws from stream `i` of the seeded generator.
    pub fn reinitialize(&mut self, seed: u64) {
        self.spec.seed = seed;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match layer {
                Layer::MeshConv { weights, .. } => {
                    let (p, ci, co) = (weights.points, weights.in_channels, weights.out_channels);
                    weights.weights = glorot(&mut rng, p * ci * co, p * ci, p * co);
                    weights.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                Layer::Conv2d(w) => {
                    let k2 = w.geometry.kernel * w.geometry.kernel;
                    w.weights = glorot(&mut rng, w.weights.len(), k2 * w.in_channels, k2 * w.out_channels);
                    w.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                Layer::Dense(w) => {
                    w.weights = glorot(&mut rng, w.weights.len(), w.inputs, w.outputs);
                    w.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                Layer::BatchNorm(s) => *s = BatchNormState::new(s.channels()),
                _ => {}
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> Arch {
        self.spec.arch
    }

    /// Input shape followed by each row's output shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn hierarchy(&self) -> Option<&Arc<IcosphereHierarchy>> {
        self.hierarchy.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn rows(&self) -> usize {
        self.layers.len()
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    /// Rows before the first fully connected layer: everything below the
    /// classifier head.
    pub fn default_freeze(&self) -> usize {
        self.spec
            .rows
            .iter()
            .position(|r| matches!(r.layer, LayerSpec::Dense { .. }))
            .unwrap_or(0)
    }

    /// Freezes the first `count` rows and unfreezes the rest.
    pub fn freeze_prefix(&mut self, count: usize) -> Result<()> {
        if count > self.layers.len() {
            return Err(Error::Config(format!(
                "cannot freeze {count} rows of a {}-row model",
                self.layers.len()
            )));
        }
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = i < count;
        }
        Ok(())
    }

    fn first_trainable(&self) -> usize {
        self.frozen.iter().position(|f| !f).unwrap_or(self.frozen.len())
    }

    /// Content hashes of the sampler maps, per row.
    pub fn map_hashes(&self) -> Vec<Option<String>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::MeshConv { map, .. } => Some(map.content_hash()),
                _ => None,
            })
            .collect()
    }

    /// All stored values per row (trainable parameters and running statistics).
    pub fn stored_values(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.stored().concat()).collect()
    }

    /// Replaces all stored values; lengths must match [`Self::stored_values`].
    pub fn set_stored_values(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        if rows.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} value rows for a {}-row model",
                rows.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, values)) in self.layers.iter().zip(rows).enumerate() {
            let expected: usize = layer.stored().iter().map(|s| s.len()).sum();
            if values.len() != expected {
                return Err(Error::Shape(format!(
                    "row {}: {} stored values, expected {expected}",
                    i + 1,
                    values.len()
                )));
            }
        }
        for (layer, values) in self.layers.iter_mut().zip(rows) {
            let mut at = 0;
            for slot in layer.stored_mut() {
                let n = slot.len();
                slot.copy_from_slice(&values[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Trainable parameters concatenated in row order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.trainable().concat()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().flat_map(|l| l.trainable()).map(|s| s.len()).sum();
        if values.len() != total {
            return Err(Error::Shape(format!("{} parameters, expected {total}", values.len())));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            for slot in layer.trainable_mut() {
                let n = slot.len();
                slot.copy_from_slice(&values[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    /// Class head from row `at` on, with this model's current parameters.
    pub fn head(&self, at: usize) -> Result<Model> {
        if at > self.layers.len() {
            return Err(Error::Config(format!("head split {at} beyond {} rows", self.layers.len())));
        }
        let spec = ModelSpec {
            arch: self.spec.arch,
            input: self.shapes[at],
            classes: self.spec.classes,
            seed: self.spec.seed,
            rows: self.spec.rows[at..].to_vec(),
        };
        let shapes = spec.validate()?;
        Ok(Model {
            spec,
            shapes,
            hierarchy: self.hierarchy.clone(),
            layers: self.layers[at..].to_vec(),
            frozen: self.frozen[at..].to_vec(),
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let expected = self.spec.input.dims(input.batch());
        if input.dims() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "model expects input dims {expected:?}, got {:?}",
                input.dims()
            )));
        }
        Ok(())
    }

    fn groups(&self, coarse_level: usize) -> Result<&[Vec<usize>]> {
        self.hierarchy
            .as_ref()
            .ok_or_else(|| Error::Config("mesh pooling without a hierarchy".into()))?
            .pooling_groups(coarse_level)
    }

    fn row_forward(&self, i: usize, x: &Tensor, mode: NormMode) -> Result<(Tensor, Option<BatchNormCache>)> {
        let out = match &self.layers[i] {
            Layer::MeshConv { map, weights } => mesh_conv_forward(x, map, weights)?,
            Layer::MeshPool { coarse_level } => {
                mesh_mean_pool_forward(x, self.groups(*coarse_level)?, node_count(coarse_level + 1))?
            }
            Layer::BatchNorm(state) => {
                let (y, cache) = batch_norm_forward(x, state, mode)?;
                return Ok((y, Some(cache)));
            }
            Layer::Relu => relu_forward(x),
            Layer::Dense(w) => {
                let flat = x.clone().reshape(vec![x.batch(), x.sample_len()])?;
                dense_forward(&flat, w)?
            }
            Layer::Conv2d(w) => conv2d_forward(x, w)?,
            Layer::Pool2d { kernel, stride } => mean_pool2d_forward(x, *kernel, *stride)?,
            Layer::Softmax => softmax(x)?,
        };
        Ok((out, None))
    }

    /// Runs rows `from..to` on activations shaped like `shapes()[from]`.
    pub fn forward_rows(&self, x: &Tensor, from: usize, to: usize, mode: NormMode) -> Result<Tensor> {
        if from > to || to > self.layers.len() {
            return Err(Error::Config(format!("row range {from}..{to} outside the model")));
        }
        let mut cur = x.clone();
        for i in from..to {
            let m = if self.frozen[i] { NormMode::Eval } else { mode };
            cur = self.row_forward(i, &cur, m)?.0;
        }
        Ok(cur)
    }

    fn logit_rows(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    /// Class scores before the softmax row.
    pub fn logits(&self, input: &Tensor, mode: NormMode) -> Result<Tensor> {
        self.check_input(input)?;
        self.forward_rows(input, 0, self.logit_rows(), mode)
    }

    /// Class probabilities.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(input, NormMode::Eval)?)
    }

    /// Mean cross-entropy and gradients of every trainable row. Frozen rows
    /// run with their running statistics.
    pub fn gradients(&self, input: &Tensor, labels: &[usize]) -> Result<(StepOutput, Gradients, Vec<Option<BatchNormCache>>)> {
        self.check_input(input)?;
        let first = self.first_trainable();
        let end = self.logit_rows();
        let mut acts = Vec::with_capacity(end + 1);
        let mut caches = vec![None; self.layers.len()];
        acts.push(input.clone());
        for i in 0..end {
            let mode = if self.frozen[i] { NormMode::Eval } else { NormMode::Train };
            let (y, cache) = self.row_forward(i, acts.last().unwrap(), mode)?;
            caches[i] = cache;
            if i < first {
                // activations below the trainable rows are never revisited
                acts.clear();
            }
            acts.push(y);
        }
        let offset = first.min(end);
        let logits = acts.last().unwrap().clone();
        logits.check_finite("logits")?;
        let (loss, mut grad) = softmax_cross_entropy(&logits, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let mut rows = vec![Vec::new(); self.layers.len()];
        for i in (first..end).rev() {
            let x = &acts[i - offset];
            let (gin, g) = match &self.layers[i] {
                Layer::MeshConv { map, weights } => {
                    let g = mesh_conv_backward(x, map, weights, &grad)?;
                    (g.input, vec![g.weights, g.bias])
                }
                Layer::MeshPool { coarse_level } => (
                    mesh_mean_pool_backward(&grad, self.groups(*coarse_level)?, node_count(coarse_level + 1))?,
                    vec![],
                ),
                Layer::BatchNorm(state) => {
                    let g = batch_norm_backward(&grad, state, caches[i].as_ref().unwrap())?;
                    (g.input, vec![g.scale, g.shift])
                }
                Layer::Relu => (relu_backward(x, &grad)?, vec![]),
                Layer::Dense(w) => {
                    let flat = x.clone().reshape(vec![x.batch(), x.sample_len()])?;
                    let g = dense_backward(&flat, w, &grad)?;
                    (g.input.reshape(x.dims().to_vec())?, vec![g.weights, g.bias])
                }
                Layer::Conv2d(w) => {
                    let g = conv2d_backward(x, w, &grad)?;
                    (g.input, vec![g.weights, g.bias])
                }
                Layer::Pool2d { kernel, stride } => (mean_pool2d_backward(x.dims(), &grad, *kernel, *stride)?, vec![]),
                Layer::Softmax => unreachable!("softmax is folded into the loss"),
            };
            rows[i] = g;
            grad = gin;
        }
        Ok((StepOutput { loss, logits }, Gradients { rows }, caches))
    }

    /// One SGD step on the unfrozen rows; running statistics of unfrozen
    /// batch-norm rows are updated. Nothing is written on a numeric error.
    pub fn train_step(&mut self, input: &Tensor, labels: &[usize], learning_rate: f64) -> Result<StepOutput> {
        let (out, grads, caches) = self.gradients(input, labels)?;
        if let Some(bad) = grads.rows.iter().flatten().flatten().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad}")));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            for (slot, g) in layer.trainable_mut().into_iter().zip(&grads.rows[i]) {
                engine::sgd_step(slot, g, learning_rate)?;
            }
            if let (Layer::BatchNorm(state), Some(cache)) = (layer, &caches[i]) {
                state.update_running(cache);
            }
        }
        Ok(out)
    }
}
