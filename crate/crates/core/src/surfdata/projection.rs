use std::f64::consts::PI;

use super::NodeMap;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::icosphere::IcosphereHierarchy;

/// One projected sample: `values[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub label: Option<usize>,
    pub sample_id: String,
}

impl ImageMap {
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.values[at..at + self.channels]
    }

    /// Stacks images into a `B x H x W x C` tensor.
    pub fn stack(images: &[&ImageMap]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Data("no images to stack".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.values.len());
        for im in images {
            if (im.height, im.width, im.channels) != (first.height, first.width, first.channels) {
                return Err(Error::Data(format!("image '{}' differs in size", im.sample_id)));
            }
            data.extend_from_slice(&im.values);
        }
        Tensor::new(vec![images.len(), first.height, first.width, first.channels], data)
    }
}

/// Unit vector for interior pixel `(u, v)` of a `width x height` grid.
pub fn pixel_direction(u: usize, v: usize, width: usize, height: usize) -> [f64; 3] {
    let lon = 2.0 * PI * (u as f64 + 0.5) / width as f64 - PI;
    let lat = PI / 2.0 - PI * (v as f64 + 0.5) / height as f64;
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Longitude/latitude image of `map` with `pad` extra pixels on each side.
///
/// Interior pixels take the nearest node's values (0 where masked out).
/// Padding columns wrap around in longitude; padding rows continue over the
/// pole, i.e. reflect the row index and shift longitude by half a turn.
pub fn project_equirectangular(
    map: &NodeMap,
    hierarchy: &IcosphereHierarchy,
    width: usize,
    height: usize,
    pad: usize,
) -> Result<ImageMap> {
    if width < 4 || height < 4 {
        return Err(Error::Config(format!("projection of {width}x{height} is too small (min 4x4)")));
    }
    if pad > height || pad > width {
        return Err(Error::Config(format!("padding {pad} exceeds the image size")));
    }
    hierarchy.level(map.level)?;
    let c = map.channels;
    let mut interior = vec![0.0; width * height * c];
    for v in 0..height {
        for u in 0..width {
            let node = hierarchy.nearest_node(map.level, pixel_direction(u, v, width, height));
            if map.mask[node] {
                interior[(v * width + u) * c..][..c].copy_from_slice(map.node_values(node));
            }
        }
    }
    let (pw, ph) = (width + 2 * pad, height + 2 * pad);
    let mut values = vec![0.0; pw * ph * c];
    let (w, h, p) = (width as isize, height as isize, pad as isize);
    for y in 0..ph {
        let mut v = y as isize - p;
        let mut shift = 0;
        if v < 0 {
            v = -1 - v;
            shift = w / 2;
        } else if v >= h {
            v = 2 * h - 1 - v;
            shift = w / 2;
        }
        for x in 0..pw {
            let u = (x as isize - p + shift).rem_euclid(w);
            let src = (v as usize * width + u as usize) * c;
            values[(y * pw + x) * c..][..c].copy_from_slice(&interior[src..src + c]);
        }
    }
    Ok(ImageMap {
        height: ph,
        width: pw,
        channels: c,
        values,
        label: map.label,
        sample_id: map.sample_id.clone(),
    })
}
