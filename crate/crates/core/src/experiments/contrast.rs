//! Rotation contrast: a mesh network and a projected-image network are each
//! trained once on unrotated synthetic maps, then their upper layers are
//! retrained on unrotated and on rotated copies of the same maps.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{stratified_split, train, transfer_experiment, CrossValidation, FoldPlan, RunRecord, Samples, TrainConfig};
use crate::error::Result;
use crate::icosphere::IcosphereHierarchy;
use crate::model::{build_gcnn, build_pcnn, GcnnConfig, Model, PcnnConfig};
use crate::surfdata::{
    demean, project_equirectangular, rotate_map, synthesize_dataset, Axis, ImageMap, NodeMap, Rotation, SynthSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    pub level: usize,
    pub samples: usize,
    pub seed: u64,
    pub axis: Axis,
    pub degrees: f64,
    pub folds: usize,
    pub test_fraction: f64,
    pub synth: SynthSpec,
    pub gcnn: GcnnConfig,
    pub pcnn: PcnnConfig,
    /// Unpadded projection size; the network input adds `2 * pad`.
    pub image_width: usize,
    pub image_height: usize,
    pub pad: usize,
    pub base_training: TrainConfig,
    pub head_training: TrainConfig,
    /// Skip the projected-image network.
    pub mesh_only: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        let (image_width, image_height, pad) = (112, 112, 5);
        Self {
            level: 4,
            samples: 600,
            seed: 1,
            axis: Axis::Z,
            degrees: 90.0,
            folds: 5,
            test_fraction: 0.1,
            synth: SynthSpec::default(),
            gcnn: GcnnConfig {
                input_level: 4,
                blocks: 4,
                filters: 16,
                ..GcnnConfig::default()
            },
            pcnn: PcnnConfig {
                height: image_height + 2 * pad,
                width: image_width + 2 * pad,
                filters: 32,
                hidden: 50,
                ..PcnnConfig::default()
            },
            image_width,
            image_height,
            pad,
            base_training: TrainConfig::default(),
            head_training: TrainConfig::default(),
            mesh_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchContrast {
    pub base: RunRecord,
    /// Head retrained on the unrotated maps.
    pub baseline: CrossValidation,
    pub rotated: CrossValidation,
    pub freeze: usize,
}

impl ArchContrast {
    /// Baseline minus rotated mean test accuracy, in percentage points.
    pub fn drop_points(&self) -> f64 {
        100.0 * (self.baseline.summary.mean_accuracy - self.rotated.summary.mean_accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub config: ContrastConfig,
    pub plan: FoldPlan,
    pub gcnn: ArchContrast,
    pub pcnn: Option<ArchContrast>,
    pub wall_clock_secs: f64,
}

fn run_arch(base: &mut Model, plain: &Samples, rotated: &Samples, plan: &FoldPlan, cfg: &ContrastConfig) -> Result<ArchContrast> {
    let (train_idx, val_idx) = plan.fold(0);
    let base_record = train(base, plain, &train_idx, &val_idx, &cfg.base_training)?;
    let freeze = base.default_freeze();
    Ok(ArchContrast {
        base: base_record,
        baseline: transfer_experiment(base, plain, freeze, plan, &cfg.head_training)?,
        rotated: transfer_experiment(base, rotated, freeze, plan, &cfg.head_training)?,
        freeze,
    })
}

fn project_all(maps: &[NodeMap], h: &IcosphereHierarchy, cfg: &ContrastConfig) -> Result<Vec<ImageMap>> {
    maps.par_iter()
        .map(|m| project_equirectangular(m, h, cfg.image_width, cfg.image_height, cfg.pad))
        .collect()
}

pub fn rotation_contrast(cfg: &ContrastConfig) -> Result<ContrastReport> {
    let started = Instant::now();
    let hierarchy = Arc::new(IcosphereHierarchy::build(cfg.level)?);
    let maps = synthesize_dataset(&hierarchy, cfg.level, cfg.samples, &cfg.synth, cfg.seed)?;
    let maps: Vec<NodeMap> = maps.par_iter().map(demean).collect::<Result<_>>()?;
    let q = Rotation::about(cfg.axis, cfg.degrees);
    let turned: Vec<NodeMap> = maps.par_iter().map(|m| rotate_map(m, &q, &hierarchy)).collect::<Result<_>>()?;
    let plain = Samples::from_node_maps(&maps)?;
    let plan = stratified_split(&plain.labels, cfg.folds, cfg.test_fraction, cfg.seed)?;

    let gcnn_cfg = GcnnConfig {
        input_level: cfg.level,
        channels: cfg.synth.channels,
        classes: cfg.synth.classes.len(),
        ..cfg.gcnn.clone()
    };
    let mut gcnn = build_gcnn(Some(hierarchy.clone()), &gcnn_cfg)?;
    let gcnn_result = run_arch(&mut gcnn, &plain, &Samples::from_node_maps(&turned)?, &plan, cfg)?;

    let pcnn_result = if cfg.mesh_only {
        None
    } else {
        let images = Samples::from_images(&project_all(&maps, &hierarchy, cfg)?)?;
        let turned_images = Samples::from_images(&project_all(&turned, &hierarchy, cfg)?)?;
        let pcnn_cfg = PcnnConfig {
            height: cfg.image_height + 2 * cfg.pad,
            width: cfg.image_width + 2 * cfg.pad,
            channels: cfg.synth.channels,
            classes: cfg.synth.classes.len(),
            ..cfg.pcnn.clone()
        };
        let mut pcnn = build_pcnn(&pcnn_cfg)?;
        Some(run_arch(&mut pcnn, &images, &turned_images, &plan, cfg)?)
    };
    Ok(ContrastReport {
        config: cfg.clone(),
        plan,
        gcnn: gcnn_result,
        pcnn: pcnn_result,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
