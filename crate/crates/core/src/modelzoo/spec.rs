use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Channel-major shape of one sample's activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Four parallel branches concatenated along channels: 1x1; 1x1 then 3x3;
    /// 1x1 then 5x5; 3x3 max pool then 1x1. Every conv is followed by a ReLU.
    Inception {
        conv1x1: usize,
        reduce3x3: usize,
        conv3x3: usize,
        reduce5x5: usize,
        conv5x5: usize,
        pool_proj: usize,
    },
    FullyConnected {
        output_dim: usize,
    },
    Relu,
    /// Cross-channel normalization: `x / (k + alpha/size * sum x^2)^beta`.
    LocalResponseNorm {
        size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Inception { .. } => "inception",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::LocalResponseNorm { .. } => "local_response_norm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn lrn_default() -> Self {
        LayerKind::LocalResponseNorm {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |what: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(format!("{what} must be at least 1"))
            }
        };
        match *self {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                ..
            } => {
                positive("filters", filters)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerKind::MaxPool {
                kernel,
                stride,
                pad,
            }
            | LayerKind::AvgPool {
                kernel,
                stride,
                pad,
            } => {
                positive("kernel", kernel)?;
                positive("stride", stride)?;
                if pad >= kernel {
                    return Err(format!(
                        "pool pad {pad} must be smaller than kernel {kernel}"
                    ));
                }
                Ok(())
            }
            LayerKind::Inception {
                conv1x1,
                reduce3x3,
                conv3x3,
                reduce5x5,
                conv5x5,
                pool_proj,
            } => {
                for (n, v) in [
                    ("conv1x1", conv1x1),
                    ("reduce3x3", reduce3x3),
                    ("conv3x3", conv3x3),
                    ("reduce5x5", reduce5x5),
                    ("conv5x5", conv5x5),
                    ("pool_proj", pool_proj),
                ] {
                    positive(n, v)?;
                }
                Ok(())
            }
            LayerKind::FullyConnected { output_dim } => positive("output_dim", output_dim),
            LayerKind::LocalResponseNorm {
                size,
                alpha,
                beta,
                k,
            } => {
                if size % 2 == 0 {
                    return Err(format!("lrn size must be odd, got {size}"));
                }
                if !(alpha >= 0.0 && beta >= 0.0 && k > 0.0) {
                    return Err("lrn needs alpha >= 0, beta >= 0, k > 0".into());
                }
                Ok(())
            }
            LayerKind::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(format!("dropout rate must lie in [0, 1), got {rate}"))
                }
            }
            LayerKind::Relu | LayerKind::Softmax => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Googlenet,
    GooglenetR,
    Vgg,
    VggR,
    Cifar,
}

impl ArchName {
    pub const ALL: [ArchName; 5] = [
        ArchName::Googlenet,
        ArchName::GooglenetR,
        ArchName::Vgg,
        ArchName::VggR,
        ArchName::Cifar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::Googlenet => "googlenet",
            ArchName::GooglenetR => "googlenet_r",
            ArchName::Vgg => "vgg",
            ArchName::VggR => "vgg_r",
            ArchName::Cifar => "cifar",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        ArchName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

/// A named read-out point: `tap` is the public name, `layer` the layer whose
/// output is returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedTap {
    pub tap: String,
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: ArchName,
    /// (height, width, channels)
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub output_dim: usize,
    pub named_taps: Vec<NamedTap>,
}

/// Output size of a convolution (floor rounding).
pub fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Output size of a pooling window with ceil rounding; the last window must
/// start inside the image or the left padding.
pub fn pool_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        return None;
    }
    let mut out = (padded - kernel).div_ceil(stride) + 1;
    if pad > 0 && (out - 1) * stride >= len + pad {
        out -= 1;
    }
    Some(out)
}

/// Name, shape and fan-in of one learnable tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn inception_branches(name: &str, kind: &LayerKind) -> Vec<Vec<LayerSpec>> {
    let LayerKind::Inception {
        conv1x1,
        reduce3x3,
        conv3x3,
        reduce5x5,
        conv5x5,
        pool_proj,
    } = *kind
    else {
        unreachable!("inception_branches on a non-inception layer");
    };
    let conv = |suffix: &str, filters: usize, kernel: usize| {
        LayerSpec::new(
            format!("{name}/{suffix}"),
            LayerKind::Conv {
                filters,
                kernel,
                stride: 1,
                pad: kernel / 2,
            },
        )
    };
    let relu = |suffix: &str| LayerSpec::new(format!("{name}/relu_{suffix}"), LayerKind::Relu);
    vec![
        vec![conv("1x1", conv1x1, 1), relu("1x1")],
        vec![
            conv("3x3_reduce", reduce3x3, 1),
            relu("3x3_reduce"),
            conv("3x3", conv3x3, 3),
            relu("3x3"),
        ],
        vec![
            conv("5x5_reduce", reduce5x5, 1),
            relu("5x5_reduce"),
            conv("5x5", conv5x5, 5),
            relu("5x5"),
        ],
        vec![
            LayerSpec::new(
                format!("{name}/pool"),
                LayerKind::MaxPool {
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ),
            conv("pool_proj", pool_proj, 1),
            relu("pool_proj"),
        ],
    ]
}

/// Shape after one layer plus the parameters it owns, appended to `params`.
pub(crate) fn layer_step(
    layer: &LayerSpec,
    input: Shape,
    params: &mut Vec<ParamInfo>,
) -> Result<Shape, ModelError> {
    let bad = |msg: String| ModelError::Shape {
        layer: layer.name.clone(),
        msg,
    };
    layer.kind.validate().map_err(bad)?;
    let out = match layer.kind {
        LayerKind::Conv {
            filters,
            kernel,
            stride,
            pad,
        } => {
            let h = conv_out(input.h, kernel, stride, pad);
            let w = conv_out(input.w, kernel, stride, pad);
            let (Some(h), Some(w)) = (h, w) else {
                return Err(bad(format!(
                    "kernel {kernel} larger than padded input {input}"
                )));
            };
            let fan_in = input.c * kernel * kernel;
            params.push(ParamInfo {
                name: format!("{}.weight", layer.name),
                shape: vec![filters, input.c, kernel, kernel],
                fan_in,
                is_bias: false,
            });
            params.push(ParamInfo {
                name: format!("{}.bias", layer.name),
                shape: vec![filters],
                fan_in,
                is_bias: true,
            });
            Shape::new(filters, h, w)
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        }
        | LayerKind::AvgPool {
            kernel,
            stride,
            pad,
        } => {
            let h = pool_out(input.h, kernel, stride, pad);
            let w = pool_out(input.w, kernel, stride, pad);
            let (Some(h), Some(w)) = (h, w) else {
                return Err(bad(format!(
                    "window {kernel} larger than padded input {input}"
                )));
            };
            Shape::new(input.c, h, w)
        }
        LayerKind::Inception { .. } => {
            let mut c = 0;
            for branch in inception_branches(&layer.name, &layer.kind) {
                let mut s = input;
                for sub in &branch {
                    s = layer_step(sub, s, params)?;
                }
                if (s.h, s.w) != (input.h, input.w) {
                    return Err(bad(format!("branch changed spatial size to {s}")));
                }
                c += s.c;
            }
            Shape::new(c, input.h, input.w)
        }
        LayerKind::FullyConnected { output_dim } => {
            let fan_in = input.len();
            params.push(ParamInfo {
                name: format!("{}.weight", layer.name),
                shape: vec![output_dim, fan_in],
                fan_in,
                is_bias: false,
            });
            params.push(ParamInfo {
                name: format!("{}.bias", layer.name),
                shape: vec![output_dim],
                fan_in,
                is_bias: true,
            });
            Shape::new(output_dim, 1, 1)
        }
        LayerKind::Relu
        | LayerKind::LocalResponseNorm { .. }
        | LayerKind::Dropout { .. }
        | LayerKind::Softmax => input,
    };
    Ok(out)
}

impl ArchitectureSpec {
    pub fn input(&self) -> Shape {
        Shape::new(self.input_shape.2, self.input_shape.0, self.input_shape.1)
    }

    /// Output shape of every layer, in order.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>, ModelError> {
        Ok(self.infer()?.0)
    }

    pub fn param_infos(&self) -> Result<Vec<ParamInfo>, ModelError> {
        Ok(self.infer()?.1)
    }

    fn infer(&self) -> Result<(Vec<Shape>, Vec<ParamInfo>), ModelError> {
        let mut shape = self.input();
        if shape.is_empty() {
            return Err(ModelError::Shape {
                layer: "input".into(),
                msg: format!("empty input shape {shape}"),
            });
        }
        let mut seen = std::collections::HashSet::new();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut params = Vec::new();
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(ModelError::Shape {
                    layer: layer.name.clone(),
                    msg: "duplicate layer name".into(),
                });
            }
            shape = layer_step(layer, shape, &mut params)?;
            shapes.push(shape);
        }
        match self.head_index() {
            Some(i) => match self.layers[i].kind {
                LayerKind::FullyConnected { output_dim } if output_dim == self.output_dim => {}
                _ => {
                    return Err(ModelError::Shape {
                        layer: self.layers[i].name.clone(),
                        msg: format!("head width differs from output_dim {}", self.output_dim),
                    })
                }
            },
            None => return Err(ModelError::NoHead),
        }
        for t in &self.named_taps {
            if self.layer_index(&t.layer).is_none() {
                return Err(ModelError::UnknownTap(t.tap.clone()));
            }
        }
        Ok((shapes, params))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the last fully-connected layer.
    pub fn head_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::FullyConnected { .. }))
    }

    pub fn head_layer(&self) -> Option<&str> {
        self.head_index().map(|i| self.layers[i].name.as_str())
    }

    pub fn tap(&self, tap: &str) -> Result<&NamedTap, ModelError> {
        self.named_taps
            .iter()
            .find(|t| t.tap == tap)
            .ok_or_else(|| ModelError::UnknownTap(tap.to_string()))
    }

    /// Activation shape produced at a named tap.
    pub fn tap_shape(&self, tap: &str) -> Result<Shape, ModelError> {
        let t = self.tap(tap)?;
        let idx = self
            .layer_index(&t.layer)
            .ok_or_else(|| ModelError::UnknownTap(tap.into()))?;
        Ok(self.infer_shapes()?[idx])
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.named_taps.iter().map(|t| t.tap.as_str()).collect()
    }

    pub fn spec_hash(&self) -> String {
        crate::util::short_hash(&serde_json::to_vec(self).expect("spec serializes"))
    }

    pub fn parameter_count(&self) -> Result<usize, ModelError> {
        Ok(self.param_infos()?.iter().map(ParamInfo::len).sum())
    }
}

struct Builder {
    layers: Vec<LayerSpec>,
    taps: Vec<NamedTap>,
}

impl Builder {
    fn new() -> Self {
        Self {
            layers: Vec::new(),
            taps: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, kind: LayerKind) -> &mut Self {
        self.layers.push(LayerSpec::new(name, kind));
        self
    }

    fn tap(&mut self, tap: &str) -> &mut Self {
        let layer = self.layers.last().expect("tap after a layer").name.clone();
        self.taps.push(NamedTap {
            tap: tap.to_string(),
            layer,
        });
        self
    }

    fn conv(
        &mut self,
        name: &str,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> &mut Self {
        self.push(
            name,
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                pad,
            },
        )
    }

    fn relu(&mut self, name: &str) -> &mut Self {
        self.push(name, LayerKind::Relu)
    }

    fn max_pool(&mut self, name: &str, kernel: usize, stride: usize) -> &mut Self {
        self.push(
            name,
            LayerKind::MaxPool {
                kernel,
                stride,
                pad: 0,
            },
        )
    }

    fn fc(&mut self, name: &str, output_dim: usize) -> &mut Self {
        self.push(name, LayerKind::FullyConnected { output_dim })
    }

    fn finish(&mut self, name: ArchName, side: usize, output_dim: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            name,
            input_shape: (side, side, 3),
            layers: std::mem::take(&mut self.layers),
            output_dim,
            named_taps: std::mem::take(&mut self.taps),
        }
    }
}

pub const DEFAULT_OUTPUT_DIM: usize = 2;

/// The twelve GoogLeNet read-out points, in network order.
pub const GOOGLENET_TAPS: [&str; 12] = [
    "conv1", "conv2", "incep1", "incep2", "incep3", "incep4", "incep5", "incep6", "incep7",
    "incep8", "incep9", "fc",
];

fn googlenet(name: ArchName) -> ArchitectureSpec {
    let reduced = name == ArchName::GooglenetR;
    let mut b = Builder::new();
    if reduced {
        b.conv("conv1/7x7_s2", 32, 5, 1, 2);
    } else {
        b.conv("conv1/7x7_s2", 64, 7, 2, 3);
    }
    b.tap("conv1")
        .relu("conv1/relu_7x7")
        .max_pool("pool1/3x3_s2", 3, if reduced { 1 } else { 2 })
        .push("pool1/norm1", LayerKind::lrn_default())
        .conv("conv2/3x3_reduce", 64, 1, 1, 0)
        .relu("conv2/relu_3x3_reduce")
        .conv("conv2/3x3", 192, 3, 1, 1)
        .tap("conv2")
        .relu("conv2/relu_3x3")
        .push("conv2/norm2", LayerKind::lrn_default())
        .max_pool("pool2/3x3_s2", 3, 2);
    let blocks: [(&str, [usize; 6]); 9] = [
        ("inception_3a", [64, 96, 128, 16, 32, 32]),
        ("inception_3b", [128, 128, 192, 32, 96, 64]),
        ("inception_4a", [192, 96, 208, 16, 48, 64]),
        ("inception_4b", [160, 112, 224, 24, 64, 64]),
        ("inception_4c", [128, 128, 256, 24, 64, 64]),
        ("inception_4d", [112, 144, 288, 32, 64, 64]),
        ("inception_4e", [256, 160, 320, 32, 128, 128]),
        ("inception_5a", [256, 160, 320, 32, 128, 128]),
        ("inception_5b", [384, 192, 384, 48, 128, 128]),
    ];
    for (i, (block, w)) in blocks.iter().enumerate() {
        b.push(
            block,
            LayerKind::Inception {
                conv1x1: w[0],
                reduce3x3: w[1],
                conv3x3: w[2],
                reduce5x5: w[3],
                conv5x5: w[4],
                pool_proj: w[5],
            },
        )
        .tap(&format!("incep{}", i + 1));
        match *block {
            "inception_3b" => {
                b.max_pool("pool3/3x3_s2", 3, 2);
            }
            "inception_4e" => {
                b.max_pool("pool4/3x3_s2", 3, 2);
            }
            _ => {}
        }
    }
    b.push(
        "pool5/7x7_s1",
        LayerKind::AvgPool {
            kernel: 7,
            stride: 1,
            pad: 0,
        },
    )
    .push("pool5/drop_7x7_s1", LayerKind::Dropout { rate: 0.4 })
    .fc("loss3/classifier", DEFAULT_OUTPUT_DIM)
    .tap("fc")
    .push("prob", LayerKind::Softmax);
    b.finish(name, if reduced { 64 } else { 224 }, DEFAULT_OUTPUT_DIM)
}

fn vgg_classifier(b: &mut Builder) {
    b.fc("fc6", 4096)
        .tap("fc6")
        .relu("relu6")
        .push("drop6", LayerKind::Dropout { rate: 0.5 })
        .fc("fc7", 4096)
        .tap("fc7")
        .relu("relu7")
        .push("drop7", LayerKind::Dropout { rate: 0.5 })
        .fc("fc8", DEFAULT_OUTPUT_DIM)
        .tap("fc8")
        .push("prob", LayerKind::Softmax);
}

fn vgg() -> ArchitectureSpec {
    let mut b = Builder::new();
    let stages: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    for (s, (convs, filters)) in stages.iter().enumerate() {
        for i in 1..=*convs {
            let name = format!("conv{}_{}", s + 1, i);
            b.conv(&name, *filters, 3, 1, 1);
            if i == *convs {
                b.tap(&format!("conv{}", s + 1));
            }
            b.relu(&format!("relu{}_{}", s + 1, i));
        }
        b.max_pool(&format!("pool{}", s + 1), 2, 2);
    }
    vgg_classifier(&mut b);
    b.finish(ArchName::Vgg, 224, DEFAULT_OUTPUT_DIM)
}

fn vgg_r() -> ArchitectureSpec {
    let mut b = Builder::new();
    b.conv("conv1_1", 64, 3, 1, 1)
        .tap("conv1_1")
        .relu("relu1_1")
        .conv("conv1_2", 64, 3, 1, 1)
        .tap("conv1_2")
        .relu("relu1_2")
        .max_pool("pool1", 2, 2);
    vgg_classifier(&mut b);
    b.finish(ArchName::VggR, 80, DEFAULT_OUTPUT_DIM)
}

fn cifar() -> ArchitectureSpec {
    let avg = LayerKind::AvgPool {
        kernel: 3,
        stride: 2,
        pad: 0,
    };
    let mut b = Builder::new();
    b.conv("conv1", 32, 5, 1, 2)
        .tap("conv1")
        .max_pool("pool1", 3, 2)
        .relu("relu1")
        .conv("conv2", 32, 5, 1, 2)
        .tap("conv2")
        .relu("relu2")
        .push("pool2", avg.clone())
        .conv("conv3", 64, 5, 1, 2)
        .tap("conv3")
        .relu("relu3")
        .push("pool3", avg)
        .fc("ip1", 64)
        .tap("ip1")
        .fc("ip2", DEFAULT_OUTPUT_DIM)
        .tap("ip2")
        .push("prob", LayerKind::Softmax);
    b.finish(ArchName::Cifar, 80, DEFAULT_OUTPUT_DIM)
}

pub fn build_architecture(name: ArchName) -> ArchitectureSpec {
    match name {
        ArchName::Googlenet | ArchName::GooglenetR => googlenet(name),
        ArchName::Vgg => vgg(),
        ArchName::VggR => vgg_r(),
        ArchName::Cifar => cifar(),
    }
}

pub fn build_architecture_named(name: &str) -> Result<ArchitectureSpec, ModelError> {
    Ok(build_architecture(name.parse()?))
}

/// Replaces the width of the last fully-connected layer.
pub fn adapt_output_head(
    spec: &ArchitectureSpec,
    new_dim: usize,
) -> Result<ArchitectureSpec, ModelError> {
    if new_dim < 2 {
        return Err(ModelError::BadOutputDim(new_dim));
    }
    let idx = spec.head_index().ok_or(ModelError::NoHead)?;
    let mut out = spec.clone();
    out.layers[idx].kind = LayerKind::FullyConnected {
        output_dim: new_dim,
    };
    out.output_dim = new_dim;
    Ok(out)
}
