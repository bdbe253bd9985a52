use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{validate_class_names, Metadata, ModelGraph, Normalization};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerSpec};
use crate::tensor::{ConvSpec, Padding};

pub const DEFAULT_INPUT_SIZE: usize = 224;

/// Widths of the two dense blocks in the transfer head.
pub const HEAD_WIDTHS: [usize; 2] = [2048, 1536];

const SCRATCH_FILTERS: [usize; 3] = [32, 64, 128];
const SCRATCH_DROPOUT: f32 = 0.5;
const VGG_DROPOUT: f32 = 0.5;
const HEAD_DROPOUT: f32 = 0.3;

/// VGG configuration D; 0 marks a 2x2 max pool.
const VGG16_PLAN: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];
const VGG_DENSE: usize = 4096;

/// MobileNetV2 inverted-residual stages: (expansion, channels, repeats, stride).
const MOBILENET_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];
const MOBILENET_STEM: usize = 32;
const MOBILENET_FEATURES: usize = 1280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ScratchCnn,
    Vgg16,
    MobilenetV2,
    MobilenetTransfer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ScratchCnn => "scratch_cnn",
            Arch::Vgg16 => "vgg16",
            Arch::MobilenetV2 => "mobilenet_v2",
            Arch::MobilenetTransfer => "mobilenet_transfer",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" | "scratch_cnn" => Ok(Arch::ScratchCnn),
            "vgg16" | "vgg" => Ok(Arch::Vgg16),
            "mobilenet" | "mobilenet_v2" => Ok(Arch::MobilenetV2),
            "transfer" | "mobilenet_transfer" => Ok(Arch::MobilenetTransfer),
            other => Err(Error::config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub arch: Arch,
    pub width_multiplier: f64,
    pub num_classes: usize,
    /// Square input side in pixels.
    pub input_size: usize,
}

impl ArchPreset {
    pub fn new(arch: Arch, width_multiplier: f64, num_classes: usize) -> Self {
        Self {
            arch,
            width_multiplier,
            num_classes,
            input_size: DEFAULT_INPUT_SIZE,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width_multiplier;
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::config(format!("width multiplier {w} outside (0, 1]")));
        }
        if self.num_classes < 2 {
            return Err(Error::config("a preset needs at least two classes"));
        }
        if self.input_size == 0 {
            return Err(Error::config("input size must be positive"));
        }
        Ok(())
    }

    /// `ceil(c * width)`; a configuration error if that rounds to zero.
    fn scaled(&self, channels: usize) -> Result<usize> {
        let c = (channels as f64 * self.width_multiplier - 1e-9).ceil().max(0.0) as usize;
        if c == 0 {
            return Err(Error::config(format!(
                "width {} leaves a layer of {channels} channels empty",
                self.width_multiplier
            )));
        }
        Ok(c)
    }

    /// Builds the preset with placeholder class names `class_0, class_1, ...`
    /// (zero-padded so they sort in index order).
    pub fn build(&self, seed: u64) -> Result<ModelGraph> {
        let digits = (self.num_classes.max(2) - 1).to_string().len();
        let names = (0..self.num_classes)
            .map(|i| format!("class_{i:0digits$}"))
            .collect();
        self.build_with_classes(names, seed)
    }

    pub fn build_with_classes(&self, class_names: Vec<String>, seed: u64) -> Result<ModelGraph> {
        let preset = ArchPreset {
            num_classes: class_names.len(),
            ..*self
        };
        preset.validate()?;
        validate_class_names(&class_names)?;
        let input_shape = [preset.input_size, preset.input_size, 3];
        let plan = match preset.arch {
            Arch::ScratchCnn => preset.scratch_plan()?,
            Arch::Vgg16 => preset.vgg_plan()?,
            Arch::MobilenetV2 => preset.mobilenet_plan(false)?,
            Arch::MobilenetTransfer => preset.mobilenet_plan(true)?,
        };
        let metadata = Metadata {
            arch: preset.arch.name().to_string(),
            seed,
            width_multiplier: preset.width_multiplier,
            body_len: plan.body_len,
            dropout_rates: plan.dropout_rates,
            head_widths: plan.head_widths,
            normalization: Normalization::for_input(input_shape),
        };
        let mut graph = ModelGraph::build(plan.specs, input_shape, class_names, metadata)?;
        if preset.arch == Arch::MobilenetTransfer {
            graph.freeze(super::FreezeSelector::Body);
        }
        Ok(graph)
    }

    fn scratch_plan(&self) -> Result<Plan> {
        let mut p = Plan::default();
        let mut cin = 3;
        let mut side = self.input_size;
        for filters in SCRATCH_FILTERS {
            let c = self.scaled(filters)?;
            for _ in 0..2 {
                p.push(LayerKind::Conv {
                    spec: ConvSpec::new(3, 1, Padding::Same, cin, c),
                    bias: false,
                });
                p.push(LayerKind::batch_norm(c));
                p.push(LayerKind::Relu);
                cin = c;
            }
            if side < 2 {
                return Err(Error::config(format!(
                    "input size {} too small for three pooling stages",
                    self.input_size
                )));
            }
            side = (side - 2) / 2 + 1;
            p.push(LayerKind::MeanPool { window: 2, stride: 2 });
            p.dropout(SCRATCH_DROPOUT);
        }
        p.push(LayerKind::Flatten);
        p.body_len = p.specs.len();
        p.classifier(side * side * cin, self.num_classes);
        Ok(p)
    }

    fn vgg_plan(&self) -> Result<Plan> {
        let mut p = Plan::default();
        let mut cin = 3;
        let mut side = self.input_size;
        for &v in &VGG16_PLAN {
            if v == 0 {
                if side < 2 {
                    return Err(Error::config(format!(
                        "input size {} too small for five pooling stages",
                        self.input_size
                    )));
                }
                side = (side - 2) / 2 + 1;
                p.push(LayerKind::MaxPool { window: 2, stride: 2 });
            } else {
                let c = self.scaled(v)?;
                p.push(LayerKind::Conv {
                    spec: ConvSpec::new(3, 1, Padding::Same, cin, c),
                    bias: true,
                });
                p.push(LayerKind::Relu);
                cin = c;
            }
        }
        p.push(LayerKind::Flatten);
        p.body_len = p.specs.len();
        let dense = self.scaled(VGG_DENSE)?;
        let mut inputs = side * side * cin;
        for _ in 0..2 {
            p.push(LayerKind::Dense { inputs, units: dense });
            p.push(LayerKind::Relu);
            p.dropout(VGG_DROPOUT);
            p.head_widths.push(dense);
            inputs = dense;
        }
        p.classifier(inputs, self.num_classes);
        Ok(p)
    }

    fn mobilenet_plan(&self, transfer: bool) -> Result<Plan> {
        let mut p = Plan::default();
        let mut cin = self.scaled(MOBILENET_STEM)?;
        let mut side = self.input_size.div_ceil(2);
        p.push(LayerKind::Conv {
            spec: ConvSpec::new(3, 2, Padding::Same, 3, cin),
            bias: false,
        });
        p.push(LayerKind::batch_norm(cin));
        p.push(LayerKind::Relu6);
        for (t, c, n, s) in MOBILENET_STAGES {
            let cout = self.scaled(c)?;
            for r in 0..n {
                let stride = if r == 0 { s } else { 1 };
                let block_start = p.specs.len();
                let hidden = cin * t;
                if t != 1 {
                    p.push(LayerKind::pointwise(cin, hidden, false));
                    p.push(LayerKind::batch_norm(hidden));
                    p.push(LayerKind::Relu6);
                }
                p.push(LayerKind::DepthwiseConv {
                    spec: ConvSpec::new(3, stride, Padding::Same, hidden, hidden),
                });
                p.push(LayerKind::batch_norm(hidden));
                p.push(LayerKind::Relu6);
                p.push(LayerKind::pointwise(hidden, cout, false));
                p.push(LayerKind::batch_norm(cout));
                if stride == 1 && cin == cout {
                    p.push(LayerKind::ResidualAdd { from: block_start });
                }
                side = side.div_ceil(stride);
                cin = cout;
            }
        }
        // The final feature width is not reduced for multipliers below 1.
        let features = MOBILENET_FEATURES;
        p.push(LayerKind::pointwise(cin, features, false));
        p.push(LayerKind::batch_norm(features));
        p.push(LayerKind::Relu6);
        p.push(LayerKind::MeanPool { window: side, stride: side });
        p.push(LayerKind::Flatten);
        p.body_len = p.specs.len();
        let mut inputs = features;
        if transfer {
            for units in HEAD_WIDTHS {
                p.push(LayerKind::Dense { inputs, units });
                p.push(LayerKind::batch_norm(units));
                p.push(LayerKind::Relu);
                p.dropout(HEAD_DROPOUT);
                p.head_widths.push(units);
                inputs = units;
            }
        }
        p.classifier(inputs, self.num_classes);
        Ok(p)
    }
}

#[derive(Default)]
struct Plan {
    specs: Vec<LayerSpec>,
    body_len: usize,
    dropout_rates: Vec<f32>,
    head_widths: Vec<usize>,
}

impl Plan {
    fn push(&mut self, kind: LayerKind) {
        self.specs.push(LayerSpec::new(kind));
    }

    fn dropout(&mut self, rate: f32) {
        self.push(LayerKind::Dropout { rate });
        self.dropout_rates.push(rate);
    }

    fn classifier(&mut self, inputs: usize, classes: usize) {
        self.push(LayerKind::Dense { inputs, units: classes });
        self.push(LayerKind::Softmax);
    }
}
