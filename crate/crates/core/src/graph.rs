//! Linear-chain DNN graph: layer parameters, the JSON model format and
//! shape inference.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorops::{conv_input_dims, conv_output_dims, pool_out_dim, LayoutTag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("malformed model document: {0}")]
    Malformed(String),
    #[error("layer '{id}': unknown op '{op}'")]
    UnknownOp { id: String, op: String },
    #[error("duplicate layer id '{0}'")]
    DuplicateId(String),
    #[error("layer '{id}': layout {layout} must pair with kernel layout {expected}, got {kernel_layout}")]
    LayoutMismatch {
        id: String,
        layout: String,
        kernel_layout: String,
        expected: String,
    },
    #[error("layer '{id}': {reason}")]
    InvalidParams { id: String, reason: String },
    #[error("kernel {r}x{s} larger than padded input {padded_h}x{padded_w}")]
    KernelTooLarge {
        r: usize,
        s: usize,
        padded_h: usize,
        padded_w: usize,
    },
    #[error("layer '{id}': expected input shape {expected}, predecessor produces {found}")]
    ShapeMismatch { id: String, expected: Shape, found: Shape },
    #[error("cannot determine the model input shape; first layer '{0}' needs an explicit input_shape")]
    UnknownInputShape(String),
}

/// Convolution parameters. `p`/`q` are zero until [`ConvLayerParams::infer_output`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayerParams {
    pub n: usize,
    pub r: usize,
    pub s: usize,
    pub c: usize,
    pub k: usize,
    pub g: usize,
    pub h: usize,
    pub w: usize,
    pub p: usize,
    pub q: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl ConvLayerParams {
    /// Batch 1, no padding, unit strides.
    pub fn new(r: usize, s: usize, c: usize, k: usize, g: usize, h: usize, w: usize) -> Self {
        ConvLayerParams {
            n: 1,
            r,
            s,
            c,
            k,
            g,
            h,
            w,
            p: 0,
            q: 0,
            pad_h: 0,
            pad_w: 0,
            stride_h: 1,
            stride_w: 1,
        }
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_stride(mut self, stride_h: usize, stride_w: usize) -> Self {
        self.stride_h = stride_h;
        self.stride_w = stride_w;
        self
    }

    pub fn c_per_group(&self) -> usize {
        self.c / self.g
    }

    pub fn k_per_group(&self) -> usize {
        self.k / self.g
    }

    /// Dense MAC count, padding positions included.
    pub fn macs(&self) -> u64 {
        (self.k * self.c_per_group() * self.r * self.s * self.p * self.q) as u64
    }

    /// Checks the structural invariants (everything but `p`/`q`).
    pub fn check(&self) -> Result<(), String> {
        if self.n != 1 {
            return Err(format!("batch n={} unsupported, must be 1", self.n));
        }
        for (name, v) in [
            ("r", self.r),
            ("s", self.s),
            ("c", self.c),
            ("k", self.k),
            ("g", self.g),
            ("h", self.h),
            ("w", self.w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
        ] {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if !self.c.is_multiple_of(self.g) || !self.k.is_multiple_of(self.g) {
            return Err(format!(
                "c={} and k={} must both be divisible by g={}",
                self.c, self.k, self.g
            ));
        }
        Ok(())
    }

    pub fn infer_output(&mut self) -> Result<(), GraphError> {
        let (p, q) = conv_out_dims(self)?;
        self.p = p;
        self.q = q;
        Ok(())
    }
}

/// `p = floor((h + 2 pad_h - r) / stride_h) + 1`, likewise for `q`.
pub fn conv_out_dims(params: &ConvLayerParams) -> Result<(usize, usize), GraphError> {
    let padded_h = params.h + 2 * params.pad_h;
    let padded_w = params.w + 2 * params.pad_w;
    if padded_h < params.r || padded_w < params.s {
        return Err(GraphError::KernelTooLarge {
            r: params.r,
            s: params.s,
            padded_h,
            padded_w,
        });
    }
    let sh = params.stride_h.max(1);
    let sw = params.stride_w.max(1);
    Ok(((padded_h - params.r) / sh + 1, (padded_w - params.s) / sw + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FcLayerParams {
    pub in_features: usize,
    pub out_features: usize,
    pub batch: usize,
}

impl FcLayerParams {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        FcLayerParams {
            in_features,
            out_features,
            batch: 1,
        }
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }

    pub fn check(&self) -> Result<(), String> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err("in_features and out_features must be >= 1".into());
        }
        if self.batch != 1 {
            return Err(format!("batch {} unsupported, must be 1", self.batch));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "NCHW")]
    Nchw,
    #[serde(rename = "NHWC")]
    Nhwc,
}

impl Layout {
    pub fn tag(self) -> LayoutTag {
        match self {
            Layout::Nchw => LayoutTag::Nchw,
            Layout::Nhwc => LayoutTag::Nhwc,
        }
    }

    pub fn paired_kernel(self) -> KernelLayout {
        match self {
            Layout::Nchw => KernelLayout::Kcrs,
            Layout::Nhwc => KernelLayout::Rsck,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelLayout {
    #[serde(rename = "KCRS")]
    Kcrs,
    #[serde(rename = "RSCK")]
    Rsck,
}

impl KernelLayout {
    pub fn tag(self) -> LayoutTag {
        match self {
            KernelLayout::Kcrs => LayoutTag::Kcrs,
            KernelLayout::Rsck => LayoutTag::Rsck,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub pool: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Conv2d {
        params: ConvLayerParams,
        layout: Layout,
        kernel_layout: KernelLayout,
    },
    Dense(FcLayerParams),
    Relu,
    MaxPool2d(PoolParams),
    BiasAdd,
    Flatten,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Dense(_) => "dense",
            Op::Relu => "relu",
            Op::MaxPool2d(_) => "maxpool2d",
            Op::BiasAdd => "bias_add",
            Op::Flatten => "flatten",
        }
    }

    /// Conv2d and dense run on the accelerator; everything else on the host.
    pub fn is_offloadable(&self) -> bool {
        matches!(self, Op::Conv2d { .. } | Op::Dense(_))
    }
}

/// Activation shape with the layout its buffer is stored in.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    pub dims: Vec<usize>,
    pub tag: LayoutTag,
}

impl Shape {
    pub fn new(dims: Vec<usize>, tag: LayoutTag) -> Self {
        Shape { dims, tag }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "({}) {}", dims.join(","), self.tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub op: Op,
    /// Raw weight blob overriding the seeded generator.
    pub weights: Option<PathBuf>,
    pub input_shape: Option<Shape>,
    pub output_shape: Option<Shape>,
}

impl Layer {
    pub fn new(id: impl Into<String>, op: Op) -> Self {
        Layer {
            id: id.into(),
            op,
            weights: None,
            input_shape: None,
            output_shape: None,
        }
    }

    pub fn conv_params(&self) -> Option<&ConvLayerParams> {
        match &self.op {
            Op::Conv2d { params, .. } => Some(params),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    /// Seed of the deterministic weight generator.
    pub seed: u64,
    /// Needed only when the first layer does not define its own input.
    pub input: Option<Shape>,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Shape of the tensor fed to the first layer.
    pub fn input_shape(&self) -> Result<Shape, GraphError> {
        if let Some(s) = &self.input {
            return Ok(s.clone());
        }
        let Some(first) = self.layers.first() else {
            return Err(GraphError::UnknownInputShape(String::new()));
        };
        match &first.op {
            Op::Conv2d { params, layout, .. } => Ok(Shape::new(conv_input_dims(params, layout.tag()), layout.tag())),
            Op::Dense(fc) => Ok(Shape::new(vec![1, fc.in_features], LayoutTag::Matrix)),
            _ => Err(GraphError::UnknownInputShape(first.id.clone())),
        }
    }

    pub fn output_shape(&self) -> Option<&Shape> {
        self.layers.last().and_then(|l| l.output_shape.as_ref())
    }
}

// ---------------------------------------------------------------------------
// JSON document

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_layout: Option<LayoutTag>,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    id: String,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<Layout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_layout: Option<KernelLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<PathBuf>,
}

impl RawLayer {
    /// Names of the keys that are present.
    fn present_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        macro_rules! probe {
            ($($f:ident),*) => {$( if self.$f.is_some() { keys.push(stringify!($f)); } )*};
        }
        probe!(
            layout,
            kernel_layout,
            r,
            s,
            c,
            k,
            g,
            h,
            w,
            pad_h,
            pad_w,
            stride_h,
            stride_w,
            in_features,
            out_features,
            pool,
            stride,
            weights
        );
        keys
    }

    fn into_layer(self) -> Result<Layer, GraphError> {
        let id = self.id.clone();
        let allowed: &[&str] = match self.op.as_str() {
            "conv2d" => &[
                "layout",
                "kernel_layout",
                "r",
                "s",
                "c",
                "k",
                "g",
                "h",
                "w",
                "pad_h",
                "pad_w",
                "stride_h",
                "stride_w",
                "weights",
            ],
            "dense" => &["in_features", "out_features", "weights"],
            "maxpool2d" => &["pool", "stride"],
            "bias_add" => &["weights"],
            "relu" | "flatten" => &[],
            other => {
                return Err(GraphError::UnknownOp {
                    id,
                    op: other.to_string(),
                })
            }
        };
        if let Some(bad) = self.present_keys().into_iter().find(|k| !allowed.contains(k)) {
            return Err(GraphError::Malformed(format!(
                "layer '{id}': key '{bad}' is not valid for op {}",
                self.op
            )));
        }
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| GraphError::Malformed(format!("layer '{id}': missing required key '{name}'")))
        };
        let invalid = |reason: String| GraphError::InvalidParams { id: id.clone(), reason };
        let op = match self.op.as_str() {
            "conv2d" => {
                let layout = self
                    .layout
                    .ok_or_else(|| GraphError::Malformed(format!("layer '{id}': missing required key 'layout'")))?;
                let kernel_layout = self.kernel_layout.unwrap_or(layout.paired_kernel());
                if kernel_layout != layout.paired_kernel() {
                    return Err(GraphError::LayoutMismatch {
                        id,
                        layout: layout.tag().to_string(),
                        kernel_layout: kernel_layout.tag().to_string(),
                        expected: layout.paired_kernel().tag().to_string(),
                    });
                }
                let params = ConvLayerParams {
                    n: 1,
                    r: need(self.r, "r")?,
                    s: need(self.s, "s")?,
                    c: need(self.c, "c")?,
                    k: need(self.k, "k")?,
                    g: self.g.unwrap_or(1),
                    h: need(self.h, "h")?,
                    w: need(self.w, "w")?,
                    p: 0,
                    q: 0,
                    pad_h: self.pad_h.unwrap_or(0),
                    pad_w: self.pad_w.unwrap_or(0),
                    stride_h: self.stride_h.unwrap_or(1),
                    stride_w: self.stride_w.unwrap_or(1),
                };
                params.check().map_err(invalid)?;
                Op::Conv2d {
                    params,
                    layout,
                    kernel_layout,
                }
            }
            "dense" => {
                let fc = FcLayerParams::new(
                    need(self.in_features, "in_features")?,
                    need(self.out_features, "out_features")?,
                );
                fc.check().map_err(invalid)?;
                Op::Dense(fc)
            }
            "maxpool2d" => {
                let pool = need(self.pool, "pool")?;
                let stride = self.stride.unwrap_or(pool);
                if pool == 0 || stride == 0 {
                    return Err(invalid("pool and stride must be >= 1".into()));
                }
                Op::MaxPool2d(PoolParams { pool, stride })
            }
            "bias_add" => Op::BiasAdd,
            "relu" => Op::Relu,
            _ => Op::Flatten,
        };
        Ok(Layer {
            id: self.id,
            op,
            weights: self.weights,
            input_shape: None,
            output_shape: None,
        })
    }

    fn from_layer(layer: &Layer) -> RawLayer {
        let mut raw = RawLayer {
            id: layer.id.clone(),
            op: layer.op.name().to_string(),
            weights: layer.weights.clone(),
            ..RawLayer::default()
        };
        match &layer.op {
            Op::Conv2d {
                params,
                layout,
                kernel_layout,
            } => {
                raw.layout = Some(*layout);
                raw.kernel_layout = Some(*kernel_layout);
                raw.r = Some(params.r);
                raw.s = Some(params.s);
                raw.c = Some(params.c);
                raw.k = Some(params.k);
                raw.g = Some(params.g);
                raw.h = Some(params.h);
                raw.w = Some(params.w);
                raw.pad_h = Some(params.pad_h);
                raw.pad_w = Some(params.pad_w);
                raw.stride_h = Some(params.stride_h);
                raw.stride_w = Some(params.stride_w);
            }
            Op::Dense(fc) => {
                raw.in_features = Some(fc.in_features);
                raw.out_features = Some(fc.out_features);
            }
            Op::MaxPool2d(pp) => {
                raw.pool = Some(pp.pool);
                raw.stride = Some(pp.stride);
            }
            Op::Relu | Op::BiasAdd | Op::Flatten => {}
        }
        raw
    }
}

/// Parses a model document. Shapes are left uninferred.
pub fn parse_model(text: &str) -> Result<Model, GraphError> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))?;
    let input = match (raw.input_shape, raw.input_layout) {
        (None, None) => None,
        (Some(dims), tag) => {
            let tag = tag.unwrap_or(if dims.len() == 2 {
                LayoutTag::Matrix
            } else {
                LayoutTag::Nchw
            });
            if !matches!(tag, LayoutTag::Nchw | LayoutTag::Nhwc | LayoutTag::Matrix) || dims.len() != tag.rank() {
                return Err(GraphError::Malformed(format!(
                    "input_shape {dims:?} is not a valid {tag} activation"
                )));
            }
            Some(Shape::new(dims, tag))
        }
        (None, Some(_)) => return Err(GraphError::Malformed("input_layout given without input_shape".into())),
    };
    let mut seen = HashSet::new();
    let mut layers = Vec::with_capacity(raw.layers.len());
    for rl in raw.layers {
        if !seen.insert(rl.id.clone()) {
            return Err(GraphError::DuplicateId(rl.id));
        }
        layers.push(rl.into_layer()?);
    }
    Ok(Model {
        name: raw.name,
        seed: raw.seed,
        input,
        layers,
    })
}

pub fn serialize_model(model: &Model) -> String {
    let raw = RawModel {
        name: model.name.clone(),
        seed: model.seed,
        input_shape: model.input.as_ref().map(|s| s.dims.clone()),
        input_layout: model.input.as_ref().map(|s| s.tag),
        layers: model.layers.iter().map(RawLayer::from_layer).collect(),
    };
    serde_json::to_string_pretty(&raw).expect("model serializes")
}

/// Fills every layer's input/output shape and the conv output extents,
/// checking that consecutive layers compose.
pub fn infer_shapes(model: &Model) -> Result<Model, GraphError> {
    let mut out = model.clone();
    if out.layers.is_empty() {
        return Ok(out);
    }
    let mut current = out.input_shape()?;
    for layer in &mut out.layers {
        let mismatch = |expected: Shape, found: &Shape| GraphError::ShapeMismatch {
            id: layer.id.clone(),
            expected,
            found: found.clone(),
        };
        let next = match &mut layer.op {
            Op::Conv2d { params, layout, .. } => {
                params.infer_output()?;
                let expected = Shape::new(conv_input_dims(params, layout.tag()), layout.tag());
                if expected != current {
                    return Err(mismatch(expected, &current));
                }
                Shape::new(conv_output_dims(params, layout.tag()), layout.tag())
            }
            Op::Dense(fc) => {
                let expected = Shape::new(vec![1, fc.in_features], LayoutTag::Matrix);
                if expected != current {
                    return Err(mismatch(expected, &current));
                }
                Shape::new(vec![1, fc.out_features], LayoutTag::Matrix)
            }
            Op::Relu | Op::BiasAdd => current.clone(),
            Op::MaxPool2d(pp) => {
                let (h, w) = match current.tag {
                    LayoutTag::Nchw => (current.dims[2], current.dims[3]),
                    LayoutTag::Nhwc => (current.dims[1], current.dims[2]),
                    _ => {
                        return Err(GraphError::InvalidParams {
                            id: layer.id.clone(),
                            reason: format!("maxpool2d needs a 4-D activation, got {current}"),
                        })
                    }
                };
                let (Some(oh), Some(ow)) = (pool_out_dim(h, pp.pool, pp.stride), pool_out_dim(w, pp.pool, pp.stride))
                else {
                    return Err(GraphError::InvalidParams {
                        id: layer.id.clone(),
                        reason: format!("pool window {} larger than input {h}x{w}", pp.pool),
                    });
                };
                let mut dims = current.dims.clone();
                if current.tag == LayoutTag::Nchw {
                    dims[2] = oh;
                    dims[3] = ow;
                } else {
                    dims[1] = oh;
                    dims[2] = ow;
                }
                Shape::new(dims, current.tag)
            }
            Op::Flatten => Shape::new(vec![1, current.numel()], LayoutTag::Matrix),
        };
        layer.input_shape = Some(current);
        layer.output_shape = Some(next.clone());
        current = next;
    }
    Ok(out)
}
