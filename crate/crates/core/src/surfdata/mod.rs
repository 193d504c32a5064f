//! Per-node surface samples: resampling, demeaning, rotation, projection,
//! synthetic data and file formats.

mod io;
mod projection;
mod resample;
mod rotation;
mod synth;

pub use io::{
    import_csv, load_images, load_node_maps, read_images, read_node_maps, save_images, save_node_maps, write_images,
    write_node_maps,
};
pub use projection::{project_equirectangular, ImageMap};
pub use resample::{resample_to_icosphere, SourceMesh};
pub use rotation::{rotate_map, Axis, Rotation};
pub use synth::{synthesize_dataset, Bump, ClassSpec, NoiseSpec, SynthSpec};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::icosphere::node_count;

/// One sample on an icosphere level: `values[n * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMap {
    pub level: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub label: Option<usize>,
    /// `false` marks nodes outside the valid region; their values are 0.
    pub mask: Vec<bool>,
    pub sample_id: String,
}

impl NodeMap {
    pub fn new(level: usize, channels: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = node_count(level);
        if values.len() != n * channels || mask.len() != n {
            return Err(Error::Shape(format!(
                "level {level} needs {n} nodes x {channels} channels and {n} mask flags, got {} values and {} flags",
                values.len(),
                mask.len()
            )));
        }
        let mut map = Self {
            level,
            channels,
            values,
            label: None,
            mask,
            sample_id: String::new(),
        };
        map.zero_masked();
        Ok(map)
    }

    pub fn nodes(&self) -> usize {
        self.mask.len()
    }

    pub fn value(&self, node: usize, channel: usize) -> f64 {
        self.values[node * self.channels + channel]
    }

    pub fn node_values(&self, node: usize) -> &[f64] {
        &self.values[node * self.channels..(node + 1) * self.channels]
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.sample_id = id.into();
        self
    }

    fn zero_masked(&mut self) {
        let c = self.channels;
        for (n, &m) in self.mask.iter().enumerate() {
            if !m {
                self.values[n * c..(n + 1) * c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Subtracts the mean over masked-in nodes, all channels pooled, from every
/// masked-in value.
pub fn demean(map: &NodeMap) -> Result<NodeMap> {
    let c = map.channels;
    let inside: Vec<f64> = map
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(n, _)| map.values[n * c..(n + 1) * c].iter().copied())
        .collect();
    if inside.is_empty() {
        return Err(Error::Data(format!("sample '{}' has no masked-in nodes", map.sample_id)));
    }
    let mean = crate::engine::linalg::pairwise_sum(&inside) / inside.len() as f64;
    let mut out = map.clone();
    for (n, &m) in map.mask.iter().enumerate() {
        if m {
            out.values[n * c..(n + 1) * c].iter_mut().for_each(|v| *v -= mean);
        }
    }
    Ok(out)
}

/// Stacks samples into a `B x N x C` tensor; all must share level and channels.
pub fn maps_to_tensor(maps: &[&NodeMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("no samples to stack".into()))?;
    let mut data = Vec::with_capacity(maps.len() * first.values.len());
    for m in maps {
        if m.level != first.level || m.channels != first.channels {
            return Err(Error::Data(format!(
                "sample '{}' is level {} x {} channels, expected level {} x {}",
                m.sample_id, m.level, m.channels, first.level, first.channels
            )));
        }
        data.extend_from_slice(&m.values);
    }
    Tensor::new(vec![maps.len(), first.nodes(), first.channels], data)
}
