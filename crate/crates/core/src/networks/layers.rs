//! Layer tables for the encoder, discriminators and decoders.

use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Conv,
    /// Transposed ("fractional-stride") convolution, ×2 upsampling.
    FConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stride {
    One,
    Two,
    /// Stride 1/2, i.e. a transposed convolution with stride 2.
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
    None,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: Stride,
    pub pad: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl LayerSpec {
    /// Weight tensor shape: `O×C×K×K` for convolutions, `C×O×K×K` for
    /// transposed convolutions.
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.op {
            LayerOp::Conv => [
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ],
            LayerOp::FConv => [
                self.in_channels,
                self.out_channels,
                self.kernel,
                self.kernel,
            ],
        }
    }

    /// Layers followed by batch normalization carry no bias.
    pub fn has_bias(&self) -> bool {
        !self.batch_norm
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        let extra = if self.batch_norm {
            2 * self.out_channels
        } else {
            self.out_channels
        };
        w + extra
    }
}

fn scaled(channels: usize, divisor: usize) -> usize {
    (channels / divisor).max(1)
}

fn down(
    in_channels: usize,
    out_channels: usize,
    batch_norm: bool,
    activation: Activation,
) -> LayerSpec {
    LayerSpec {
        op: LayerOp::Conv,
        in_channels,
        out_channels,
        kernel: 5,
        stride: Stride::Two,
        pad: 2,
        batch_norm,
        activation,
    }
}

fn pointwise(
    in_channels: usize,
    out_channels: usize,
    batch_norm: bool,
    activation: Activation,
) -> LayerSpec {
    LayerSpec {
        op: LayerOp::Conv,
        in_channels,
        out_channels,
        kernel: 1,
        stride: Stride::One,
        pad: 0,
        batch_norm,
        activation,
    }
}

fn up(
    in_channels: usize,
    out_channels: usize,
    batch_norm: bool,
    activation: Activation,
) -> LayerSpec {
    LayerSpec {
        op: LayerOp::FConv,
        in_channels,
        out_channels,
        kernel: 5,
        stride: Stride::Half,
        pad: 2,
        batch_norm,
        activation,
    }
}

/// Encoder feature widths `f_1..f_5` and bottleneck width.
pub fn encoder_widths(divisor: usize) -> ([usize; 5], usize) {
    let f = [32, 64, 128, 256, 256].map(|c| scaled(c, divisor));
    (f, scaled(128, divisor))
}

/// Five stride-2 5×5 convolutions and a 1×1 head; no batch normalization.
pub fn encoder_specs(divisor: usize) -> Vec<LayerSpec> {
    let (f, head) = encoder_widths(divisor);
    let mut specs = Vec::with_capacity(6);
    let mut prev = 3;
    for &c in &f {
        specs.push(down(prev, c, false, Activation::LeakyRelu));
        prev = c;
    }
    specs.push(pointwise(prev, head, false, Activation::LeakyRelu));
    specs
}

/// Same trunk as the encoder with batch normalization on layers 2–5 and a
/// one-channel sigmoid head. Conditional discriminators see 6 input channels.
pub fn discriminator_specs(divisor: usize, conditional: bool) -> Vec<LayerSpec> {
    let (f, _) = encoder_widths(divisor);
    let mut specs = Vec::with_capacity(6);
    let mut prev = if conditional { 6 } else { 3 };
    for (i, &c) in f.iter().enumerate() {
        specs.push(down(prev, c, i > 0, Activation::LeakyRelu));
        prev = c;
    }
    specs.push(pointwise(prev, 1, false, Activation::Sigmoid));
    specs
}

/// 1×1 expansion of the bottleneck followed by five ×2 transposed
/// convolutions. Inputs of layers 3–6 are concatenated with encoder features
/// `f_4, f_3, f_2, f_1`.
pub fn decoder_specs(divisor: usize, out_channels: usize) -> Vec<LayerSpec> {
    let (f, head) = encoder_widths(divisor);
    let d = |c| scaled(c, divisor);
    let (c256, c128, c64, c32) = (d(256), d(128), d(64), d(32));
    alloc::vec![
        pointwise(head, c256, true, Activation::Relu),
        up(c256, c256, true, Activation::Relu),
        up(c256 + f[3], c128, true, Activation::Relu),
        up(c128 + f[2], c64, true, Activation::Relu),
        up(c64 + f[1], c32, true, Activation::Relu),
        up(c32 + f[0], out_channels, false, Activation::Sigmoid),
    ]
}

/// Number of leading decoder layers shared between generation branches.
pub const SHARED_DECODER_LAYERS: usize = 3;
