use std::fmt;
use std::str::FromStr;

use crate::error::{EmtError, Result};
use crate::numerics::Activation;

/// Image channels (RGB).
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchId {
    Espcn,
    Srcnn,
    Edsr1,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::Espcn, ArchId::Srcnn, ArchId::Edsr1];

    pub fn name(self) -> &'static str {
        match self {
            ArchId::Espcn => "espcn",
            ArchId::Srcnn => "srcnn",
            ArchId::Edsr1 => "edsr1",
        }
    }

    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            ArchId::Espcn => 0,
            ArchId::Srcnn => 1,
            ArchId::Edsr1 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ArchId::Espcn),
            1 => Ok(ArchId::Srcnn),
            2 => Ok(ArchId::Edsr1),
            other => Err(EmtError::Format(format!("unknown architecture code {other}"))),
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchId {
    type Err = EmtError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "espcn" => Ok(ArchId::Espcn),
            "srcnn" => Ok(ArchId::Srcnn),
            "edsr1" | "edsr-1" => Ok(ArchId::Edsr1),
            other => Err(EmtError::invalid(format!(
                "unknown architecture '{other}' (expected espcn, srcnn or edsr1)"
            ))),
        }
    }
}

/// One convolution and where its parameters live in the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// Start of the (C_out, C_in, k, k) weights; the C_out biases follow.
    pub offset: usize,
}

impl ConvSpec {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// A step of the feed-forward graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Node {
    Conv(usize),
    Act(Activation),
    PixelShuffle(usize),
    /// Bicubic upscale of the network input (SRCNN pre-upsampling).
    Upsample(usize),
    /// Remember the current activation as the residual skip.
    SaveSkip,
    /// Add the remembered skip to the current activation.
    AddSkip,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub arch_id: ArchId,
    pub scale: usize,
    pub convs: Vec<ConvSpec>,
    pub nodes: Vec<Node>,
}

impl ArchSpec {
    pub fn new(arch_id: ArchId, scale: usize) -> Result<Self> {
        if !(2..=4).contains(&scale) {
            return Err(EmtError::invalid(format!(
                "unsupported pair ({arch_id}, x{scale}); scales 2, 3 and 4 are registered"
            )));
        }
        let img = IMAGE_CHANNELS;
        let up = img * scale * scale;
        // (cin, cout, kernel) per conv, in layer order
        let (layers, nodes): (Vec<(usize, usize, usize)>, Vec<Node>) = match arch_id {
            ArchId::Espcn => (
                vec![(img, 64, 5), (64, 32, 3), (32, up, 3)],
                vec![
                    Node::Conv(0),
                    Node::Act(Activation::Tanh),
                    Node::Conv(1),
                    Node::Act(Activation::Tanh),
                    Node::Conv(2),
                    Node::PixelShuffle(scale),
                ],
            ),
            ArchId::Srcnn => (
                vec![(img, 64, 9), (64, 32, 5), (32, img, 5)],
                vec![
                    Node::Upsample(scale),
                    Node::Conv(0),
                    Node::Act(Activation::Relu),
                    Node::Conv(1),
                    Node::Act(Activation::Relu),
                    Node::Conv(2),
                ],
            ),
            ArchId::Edsr1 => (
                vec![(img, 64, 3), (64, 64, 3), (64, 64, 3), (64, up, 3)],
                vec![
                    Node::Conv(0),
                    Node::SaveSkip,
                    Node::Conv(1),
                    Node::Act(Activation::Relu),
                    Node::Conv(2),
                    Node::AddSkip,
                    Node::Conv(3),
                    Node::PixelShuffle(scale),
                ],
            ),
        };
        let mut offset = 0;
        let convs = layers
            .into_iter()
            .map(|(cin, cout, kernel)| {
                let c = ConvSpec {
                    cin,
                    cout,
                    kernel,
                    offset,
                };
                offset += c.param_len();
                c
            })
            .collect();
        Ok(ArchSpec {
            arch_id,
            scale,
            convs,
            nodes,
        })
    }

    /// Total parameter count P.
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvSpec::param_len).sum()
    }

    /// Output (H, W) for an LR input of (H, W).
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h * self.scale, w * self.scale)
    }
}
