use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Arch, LayerSpec, Model, ModelSpec, RowSpec, Shape};
use crate::error::{Error, Result};
use crate::icosphere::IcosphereHierarchy;
use crate::sampler::PatchTemplate;

/// Mesh network: `blocks` x (conv, batch norm, ReLU, mean pool), then a
/// hidden layer with batch norm and ReLU, then the class layer and softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnnConfig {
    pub input_level: usize,
    pub channels: usize,
    pub blocks: usize,
    pub filters: usize,
    pub patch: PatchTemplate,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for GcnnConfig {
    fn default() -> Self {
        Self {
            input_level: 6,
            channels: 2,
            blocks: 5,
            filters: 36,
            patch: PatchTemplate::default(),
            hidden: 50,
            classes: 2,
            seed: 0,
        }
    }
}

impl GcnnConfig {
    pub fn spec(&self, hierarchy: &IcosphereHierarchy) -> Result<ModelSpec> {
        if self.blocks == 0 || self.blocks > self.input_level {
            return Err(Error::Config(format!(
                "{} pooling blocks do not fit below level {}",
                self.blocks, self.input_level
            )));
        }
        let mut rows = Vec::new();
        let row = |name: String, layer| RowSpec { name, layer };
        for b in 1..=self.blocks {
            let level = hierarchy.level(self.input_level + 1 - b)?;
            rows.push(row(
                format!("conv{b}"),
                LayerSpec::MeshConv {
                    filters: self.filters,
                    patch: self.patch.resolve(level),
                },
            ));
            rows.push(row(format!("bn{b}"), LayerSpec::BatchNorm));
            rows.push(row(format!("relu{b}"), LayerSpec::Relu));
            rows.push(row(format!("pool{b}"), LayerSpec::MeshPool));
        }
        let h = self.blocks + 1;
        rows.push(row(format!("fc{h}"), LayerSpec::Dense { outputs: self.hidden }));
        rows.push(row(format!("bn{h}"), LayerSpec::BatchNorm));
        rows.push(row(format!("relu{h}"), LayerSpec::Relu));
        rows.push(row(format!("fc{}", h + 1), LayerSpec::Dense { outputs: self.classes }));
        rows.push(row("softmax".into(), LayerSpec::Softmax));
        Ok(ModelSpec {
            arch: Arch::Gcnn,
            input: Shape::Mesh {
                level: self.input_level,
                channels: self.channels,
            },
            classes: self.classes,
            seed: self.seed,
            rows,
        })
    }
}

/// Builds the mesh network on a shared hierarchy (built to the input level
/// when `None`).
pub fn build_gcnn(hierarchy: Option<Arc<IcosphereHierarchy>>, config: &GcnnConfig) -> Result<Model> {
    let hierarchy = match hierarchy {
        Some(h) if h.max_level() >= config.input_level => h,
        _ => Arc::new(IcosphereHierarchy::build(config.input_level)?),
    };
    let spec = config.spec(&hierarchy)?;
    Model::from_spec(spec, Some(hierarchy))
}

/// Projected-image baseline. Defaults reproduce the 224x224 table stack:
/// conv 11/4 pad 1, conv 5/1 pad 2, three conv 3/1 pad 1, 2x2 mean pools,
/// a 100-unit hidden layer and the class layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcnnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub filters: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv1_pad: usize,
    pub conv2_kernel: usize,
    pub conv2_pad: usize,
    pub conv_kernel: usize,
    pub pool: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for PcnnConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            channels: 2,
            filters: 64,
            conv1_kernel: 11,
            conv1_stride: 4,
            conv1_pad: 1,
            conv2_kernel: 5,
            conv2_pad: 2,
            conv_kernel: 3,
            pool: 2,
            hidden: 100,
            classes: 2,
            seed: 0,
        }
    }
}

impl PcnnConfig {
    pub fn spec(&self) -> ModelSpec {
        let f = self.filters;
        let conv = |kernel, stride, pad| LayerSpec::Conv2d {
            filters: f,
            kernel,
            stride,
            pad,
        };
        let pool = LayerSpec::Pool2d {
            kernel: self.pool,
            stride: self.pool,
        };
        let k = self.conv_kernel;
        let layers = [
            ("conv1", conv(self.conv1_kernel, self.conv1_stride, self.conv1_pad)),
            ("relu1", LayerSpec::Relu),
            ("norm1", LayerSpec::BatchNorm),
            ("pool1", pool),
            ("conv2", conv(self.conv2_kernel, 1, self.conv2_pad)),
            ("relu2", LayerSpec::Relu),
            ("norm2", LayerSpec::BatchNorm),
            ("pool2", pool),
            ("conv3", conv(k, 1, k / 2)),
            ("relu3", LayerSpec::Relu),
            ("conv4", conv(k, 1, k / 2)),
            ("relu4", LayerSpec::Relu),
            ("conv5", conv(k, 1, k / 2)),
            ("relu5", LayerSpec::Relu),
            ("pool5", pool),
            ("fc6", LayerSpec::Dense { outputs: self.hidden }),
            ("relu6", LayerSpec::Relu),
            ("fc7", LayerSpec::Dense { outputs: self.classes }),
            ("softmax", LayerSpec::Softmax),
        ];
        ModelSpec {
            arch: Arch::Pcnn,
            input: Shape::Image {
                height: self.height,
                width: self.width,
                channels: self.channels,
            },
            classes: self.classes,
            seed: self.seed,
            rows: layers
                .into_iter()
                .map(|(name, layer)| RowSpec {
                    name: name.into(),
                    layer,
                })
                .collect(),
        }
    }
}

pub fn build_pcnn(config: &PcnnConfig) -> Result<Model> {
    Model::from_spec(config.spec(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{NormMode, Tensor};

    #[test]
    fn default_pcnn_chain() {
        let m = build_pcnn(&PcnnConfig::default()).unwrap();
        assert_eq!(m.rows(), 19);
        let sides: Vec<usize> = m
            .shapes()
            .iter()
            .filter_map(|s| match s {
                Shape::Image { height, .. } => Some(*height),
                _ => None,
            })
            .collect();
        // input, conv1, relu1, norm1, pool1, conv2, relu2, norm2, pool2, conv3..relu5, pool5
        assert_eq!(sides, vec![224, 54, 54, 54, 27, 27, 27, 27, 13, 13, 13, 13, 13, 13, 13, 6]);
        assert_eq!(m.default_freeze(), 15);
    }

    #[test]
    fn small_pcnn_is_rejected() {
        let cfg = PcnnConfig {
            height: 20,
            width: 20,
            ..PcnnConfig::default()
        };
        assert!(matches!(build_pcnn(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn gcnn_level_chain() {
        let cfg = GcnnConfig {
            input_level: 3,
            blocks: 2,
            filters: 4,
            hidden: 6,
            ..GcnnConfig::default()
        };
        let m = build_gcnn(None, &cfg).unwrap();
        assert_eq!(m.rows(), 13);
        assert_eq!(m.default_freeze(), 8);
        assert_eq!(m.shapes()[8], Shape::Mesh { level: 1, channels: 4 });
        let x = Tensor::zeros(vec![2, 642, 2]);
        assert_eq!(m.logits(&x, NormMode::Eval).unwrap().dims(), &[2, 2]);
        let too_deep = GcnnConfig {
            input_level: 2,
            blocks: 3,
            ..GcnnConfig::default()
        };
        assert!(matches!(build_gcnn(None, &too_deep), Err(Error::Config(_))));
    }
}
