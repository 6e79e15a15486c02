//! Declarative model descriptions and the shape algebra over them.
//!
//! A `ModelSpec` lists layers from input to classifier head; `validate`
//! composes shapes layer by layer and rejects any stack whose forward pass
//! could not run. Parameter accounting (totals and retained-under-pruning
//! counts) works off the same description.

use crate::error::{Error, Result};
use crate::numerics::check_conv_geometry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// `blocks` groups of `units` competing linear units over an
    /// `in_dim`-vector; output width `blocks * units`.
    TwtaDense {
        in_dim: usize,
        blocks: usize,
        units: usize,
    },
    /// `kernels` groups of `maps` competing feature maps, same-padded
    /// `kernel_h x kernel_l` windows over `in_channels` channels.
    TwtaConv {
        kernel_h: usize,
        kernel_l: usize,
        in_channels: usize,
        kernels: usize,
        maps: usize,
    },
    /// 2x2 max pooling, stride 2, floor semantics on odd extents.
    MaxPool2,
    /// `[H, L, C]` to `[H * L * C]`, row-major.
    Flatten,
    /// Linear classifier emitting raw logits over all classes.
    Head { classes: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::TwtaDense { .. } => "twta_dense",
            LayerSpec::TwtaConv { .. } => "twta_conv",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Head { .. } => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// Shape of one example: `[features]` or `[H, L, C]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Global class count; must equal the head's width.
    pub total_classes: usize,
}

/// Per-layer input/output shapes produced by `ModelSpec::validate`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl ModelSpec {
    /// Check that adjacent layers compose and that exactly one head sits
    /// last; returns the full shape trace on success.
    pub fn validate(&self) -> Result<Vec<LayerShapes>> {
        if self.input_shape.iter().any(|&d| d == 0)
            || !(self.input_shape.len() == 1 || self.input_shape.len() == 3)
        {
            return Err(Error::Spec(format!(
                "input shape must be [features] or [H, L, C] with positive dims, got {:?}",
                self.input_shape
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("model has no layers; a head is required".into()));
        }
        let mut cur = self.input_shape.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut head_at = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Some(h) = head_at {
                return Err(Error::Spec(format!(
                    "head at layer {h} must be last, but layer {idx} ({}) follows it",
                    layer.name()
                )));
            }
            let upstream = |idx: usize| {
                if idx == 0 {
                    "the model input".to_string()
                } else {
                    format!("layer {} ({})", idx - 1, self.layers[idx - 1].name())
                }
            };
            let out = match *layer {
                LayerSpec::TwtaDense {
                    in_dim,
                    blocks,
                    units,
                } => {
                    if in_dim == 0 || blocks == 0 || units == 0 {
                        return Err(Error::Spec(format!(
                            "layer {idx} (twta_dense) has zero dims: in_dim={in_dim} \
                             blocks={blocks} units={units}"
                        )));
                    }
                    if cur != [in_dim] {
                        return Err(Error::Spec(format!(
                            "layer {idx} (twta_dense) expects input [{in_dim}], but {} \
                             produced {cur:?}",
                            upstream(idx)
                        )));
                    }
                    vec![blocks * units]
                }
                LayerSpec::TwtaConv {
                    kernel_h,
                    kernel_l,
                    in_channels,
                    kernels,
                    maps,
                } => {
                    if in_channels == 0 || kernels == 0 || maps == 0 {
                        return Err(Error::Spec(format!(
                            "layer {idx} (twta_conv) has zero dims: in_channels={in_channels} \
                             kernels={kernels} maps={maps}"
                        )));
                    }
                    check_conv_geometry(kernel_h, kernel_l, kernel_h / 2).map_err(|e| {
                        Error::Spec(format!("layer {idx} (twta_conv): {e}"))
                    })?;
                    if cur.len() != 3 || cur[2] != in_channels {
                        return Err(Error::Spec(format!(
                            "layer {idx} (twta_conv) expects [H, L, {in_channels}], but {} \
                             produced {cur:?}",
                            upstream(idx)
                        )));
                    }
                    vec![cur[0], cur[1], kernels * maps]
                }
                LayerSpec::MaxPool2 => {
                    if cur.len() != 3 || cur[0] < 2 || cur[1] < 2 {
                        return Err(Error::Spec(format!(
                            "layer {idx} (maxpool2) needs [H>=2, L>=2, C], but {} produced {cur:?}",
                            upstream(idx)
                        )));
                    }
                    vec![cur[0] / 2, cur[1] / 2, cur[2]]
                }
                LayerSpec::Flatten => {
                    if cur.len() != 3 {
                        return Err(Error::Spec(format!(
                            "layer {idx} (flatten) needs [H, L, C], but {} produced {cur:?}",
                            upstream(idx)
                        )));
                    }
                    vec![cur.iter().product()]
                }
                LayerSpec::Head { classes } => {
                    if classes == 0 {
                        return Err(Error::Spec(format!("layer {idx} (head) has zero classes")));
                    }
                    if cur.len() != 1 {
                        return Err(Error::Spec(format!(
                            "layer {idx} (head) expects flat features, but {} produced {cur:?}",
                            upstream(idx)
                        )));
                    }
                    if classes != self.total_classes {
                        return Err(Error::Spec(format!(
                            "head width {classes} disagrees with total_classes {}",
                            self.total_classes
                        )));
                    }
                    head_at = Some(idx);
                    vec![classes]
                }
            };
            trace.push(LayerShapes {
                input: cur.clone(),
                output: out.clone(),
            });
            cur = out;
        }
        if head_at != Some(self.layers.len() - 1) {
            return Err(Error::Spec(
                "model must end with exactly one head layer".into(),
            ));
        }
        Ok(trace)
    }

    /// Persistent (task-independent) parameter count: layer weights plus
    /// head weight and bias. Per-task winner logits are not included; they
    /// come and go with task registration.
    pub fn param_count(&self) -> Result<usize> {
        let trace = self.validate()?;
        let mut count = 0usize;
        for (layer, shapes) in self.layers.iter().zip(&trace) {
            count += match *layer {
                LayerSpec::TwtaDense {
                    in_dim,
                    blocks,
                    units,
                } => in_dim * blocks * units,
                LayerSpec::TwtaConv {
                    kernel_h,
                    kernel_l,
                    in_channels,
                    kernels,
                    maps,
                } => kernels * kernel_h * kernel_l * in_channels * maps,
                LayerSpec::Head { classes } => shapes.input[0] * classes + classes,
                LayerSpec::MaxPool2 | LayerSpec::Flatten => 0,
            };
        }
        Ok(count)
    }
}

/// Competition-weight accounting under per-task pruning: every block keeps
/// one of its `units`, so TWTA layers retain exactly `1/units` of their
/// weights. The head has no competition and is always fully retained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetainedParams {
    pub twta_total: usize,
    pub twta_retained: usize,
    pub head: usize,
}

pub fn retained_params(spec: &ModelSpec) -> Result<RetainedParams> {
    let trace = spec.validate()?;
    let mut out = RetainedParams {
        twta_total: 0,
        twta_retained: 0,
        head: 0,
    };
    for (layer, shapes) in spec.layers.iter().zip(&trace) {
        match *layer {
            LayerSpec::TwtaDense {
                in_dim,
                blocks,
                units,
            } => {
                out.twta_total += in_dim * blocks * units;
                out.twta_retained += in_dim * blocks;
            }
            LayerSpec::TwtaConv {
                kernel_h,
                kernel_l,
                in_channels,
                kernels,
                maps,
            } => {
                let per_map = kernel_h * kernel_l * in_channels;
                out.twta_total += kernels * per_map * maps;
                out.twta_retained += kernels * per_map;
            }
            LayerSpec::Head { classes } => out.head += shapes.input[0] * classes + classes,
            LayerSpec::MaxPool2 | LayerSpec::Flatten => {}
        }
    }
    Ok(out)
}

/// Fraction of TWTA weights kept at inference: `1/units` for a uniform
/// block size, or the weight-count-weighted mixture otherwise. A model with
/// no TWTA weights retains everything, i.e. 1.0.
pub fn count_retained_fraction(spec: &ModelSpec) -> Result<f64> {
    let rp = retained_params(spec)?;
    if rp.twta_total == 0 {
        return Ok(1.0);
    }
    Ok(rp.twta_retained as f64 / rp.twta_total as f64)
}
