//! Resolution-preserving building blocks.
//!
//! * [`RestormerBlock`]: multi-head attention across the channel axis
//!   (the score matrix is `channels x channels` per head) followed by a gated
//!   depthwise feed-forward network.
//! * [`LiteTransformerBlock`]: half the channels go through spatial
//!   self-attention (long range), the other half through a depthwise 3x3
//!   branch (short range); a flattened, non-expanding feed-forward follows.
//! * [`Brb`]: bottleneck residual block, pointwise expand, depthwise 3x3,
//!   pointwise project.
//! * [`InnBlock`]: a stack of affine coupling layers whose coupling functions
//!   are BRBs. Exactly invertible for any parameter values.
//!
//! All final residual projections start at zero so every block is the
//! identity at initialization.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::ops::{self, dims4};
use crate::params::Scope;

const PROJ_STD: f64 = 0.02;
const DEPTHWISE_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_expansion: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 8,
            num_layers: 1,
            ffn_expansion: 2.0,
        }
    }
}

impl BlockConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Self {
        Self {
            embed_dim,
            num_heads,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return Err(FuseError::config("block dims must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(FuseError::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.ffn_expansion > 0.0) {
            return Err(FuseError::config("ffn_expansion must be positive"));
        }
        Ok(())
    }
}

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = dims4(x)?;
    if c != expected {
        return Err(FuseError::config(format!(
            "{what} configured for {expected} channels, input has {c}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(s: &mut Scope, c: usize) -> Result<Self> {
        Ok(Self {
            weight: s.ones("weight", &[c])?,
            bias: s.zeros("bias", &[c])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_channels(x, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Pointwise {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Pointwise {
    pub(crate) fn new(s: &mut Scope, inp: usize, out: usize, bias: bool, zero: bool) -> Result<Self> {
        let weight = if zero {
            s.zeros("weight", &[out, inp])?
        } else {
            s.trunc_normal("weight", &[out, inp], PROJ_STD)?
        };
        let bias = if bias { Some(s.zeros("bias", &[out])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv1x1(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
struct Depthwise {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Depthwise {
    fn new(s: &mut Scope, c: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: s.trunc_normal("weight", &[c, 9], DEPTHWISE_STD)?,
            bias: if bias { Some(s.zeros("bias", &[c])?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::depthwise3x3(x, &self.weight, self.bias.as_ref())
    }
}

/// Dense 3x3 convolution, used for image-to-feature and feature-to-image maps.
#[derive(Debug, Clone)]
pub(crate) struct Conv3x3 {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Conv3x3 {
    pub(crate) fn new(s: &mut Scope, inp: usize, out: usize, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: s.trunc_normal("weight", &[out, inp, 3, 3], PROJ_STD)?,
            bias: if bias { Some(s.zeros("bias", &[out])?) } else { None },
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv3x3(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
struct ChannelAttention {
    heads: usize,
    temperature: Tensor,
    qkv: Pointwise,
    qkv_dw: Depthwise,
    proj: Pointwise,
}

impl ChannelAttention {
    fn new(s: &mut Scope, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            temperature: s.ones("temperature", &[heads])?,
            qkv: Pointwise::new(&mut s.sub("qkv"), c, 3 * c, false, false)?,
            qkv_dw: Depthwise::new(&mut s.sub("qkv_dw"), 3 * c, false)?,
            proj: Pointwise::new(&mut s.sub("proj"), c, c, false, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = dims4(x)?;
        let ch = c / self.heads;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * c, c)?.reshape((b, self.heads, ch, h * w))?)
        };
        let q = ops::l2_normalize_last(&split(0)?)?;
        let k = ops::l2_normalize_last(&split(1)?)?;
        let v = split(2)?;
        let scores = q
            .matmul(&k.t()?)?
            .broadcast_mul(&self.temperature.reshape((1, self.heads, 1, 1))?)?;
        let attn = ops::softmax_last(&scores)?;
        let out = attn.matmul(&v.contiguous()?)?.reshape((b, c, h, w))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct GatedFeedForward {
    hidden: usize,
    proj_in: Pointwise,
    dw: Depthwise,
    proj_out: Pointwise,
}

impl GatedFeedForward {
    fn new(s: &mut Scope, c: usize, expansion: f64) -> Result<Self> {
        let hidden = ((c as f64) * expansion).round().max(1.0) as usize;
        Ok(Self {
            hidden,
            proj_in: Pointwise::new(&mut s.sub("proj_in"), c, 2 * hidden, false, false)?,
            dw: Depthwise::new(&mut s.sub("dw"), 2 * hidden, false)?,
            proj_out: Pointwise::new(&mut s.sub("proj_out"), hidden, c, false, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dw.forward(&self.proj_in.forward(x)?)?;
        let gate = ops::gelu(&h.narrow(1, 0, self.hidden)?)?;
        let gated = (gate * h.narrow(1, self.hidden, self.hidden)?)?;
        self.proj_out.forward(&gated)
    }
}

/// Pre-norm transformer block with transposed (channel-wise) attention.
#[derive(Debug, Clone)]
pub struct RestormerBlock {
    cfg: BlockConfig,
    norm1: LayerNorm,
    attn: ChannelAttention,
    norm2: LayerNorm,
    ffn: GatedFeedForward,
}

impl RestormerBlock {
    pub fn new(s: &mut Scope, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        Ok(Self {
            cfg,
            norm1: LayerNorm::new(&mut s.sub("norm1"), c)?,
            attn: ChannelAttention::new(&mut s.sub("attn"), c, cfg.num_heads)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), c)?,
            ffn: GatedFeedForward::new(&mut s.sub("ffn"), c, cfg.ffn_expansion)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.cfg.embed_dim, "restormer block")?;
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }
}

/// Long-short range attention block.
#[derive(Debug, Clone)]
pub struct LiteTransformerBlock {
    cfg: BlockConfig,
    half: usize,
    norm1: LayerNorm,
    qkv: Pointwise,
    local_in: Pointwise,
    local_dw: Depthwise,
    proj: Pointwise,
    norm2: LayerNorm,
    ffn_in: Pointwise,
    ffn_out: Pointwise,
}

impl LiteTransformerBlock {
    pub fn new(s: &mut Scope, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        if !c.is_multiple_of(2) {
            return Err(FuseError::config(format!(
                "lite transformer block splits channels evenly; embed_dim {c} is odd"
            )));
        }
        let half = c / 2;
        if !half.is_multiple_of(cfg.num_heads) {
            return Err(FuseError::config(format!(
                "attention half of {half} channels is not divisible by {} heads",
                cfg.num_heads
            )));
        }
        Ok(Self {
            cfg,
            half,
            norm1: LayerNorm::new(&mut s.sub("norm1"), c)?,
            qkv: Pointwise::new(&mut s.sub("qkv"), half, 3 * half, true, false)?,
            local_in: Pointwise::new(&mut s.sub("local_in"), half, half, true, false)?,
            local_dw: Depthwise::new(&mut s.sub("local_dw"), half, true)?,
            proj: Pointwise::new(&mut s.sub("proj"), c, c, true, true)?,
            norm2: LayerNorm::new(&mut s.sub("norm2"), c)?,
            ffn_in: Pointwise::new(&mut s.sub("ffn_in"), c, c, true, false)?,
            ffn_out: Pointwise::new(&mut s.sub("ffn_out"), c, c, true, true)?,
        })
    }

    fn long_range(&self, x: &Tensor) -> Result<Tensor> {
        let (b, a, h, w) = dims4(x)?;
        let heads = self.cfg.num_heads;
        let hd = a / heads;
        let qkv = self.qkv.forward(x)?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * a, a)?.reshape((b * heads, hd, h * w))?)
        };
        let out = ops::spatial_attention(&part(0)?, &part(1)?, &part(2)?, 1.0 / (hd as f64).sqrt())?;
        Ok(out.reshape((b, a, h, w))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.cfg.embed_dim, "lite transformer block")?;
        let y = self.norm1.forward(x)?;
        let long = self.long_range(&y.narrow(1, 0, self.half)?)?;
        let short = self
            .local_dw
            .forward(&self.local_in.forward(&y.narrow(1, self.half, self.half)?)?)?;
        let mixed = self.proj.forward(&Tensor::cat(&[long, short], 1)?)?;
        let x = (x + mixed)?;
        let ff = self
            .ffn_out
            .forward(&ops::gelu(&self.ffn_in.forward(&self.norm2.forward(&x)?)?)?)?;
        Ok((x + ff)?)
    }
}

/// Bottleneck residual block. The identity skip is only added when the block
/// is built with `skip` and `in_ch == out_ch`.
#[derive(Debug, Clone)]
pub struct Brb {
    in_ch: usize,
    out_ch: usize,
    skip: bool,
    expand: Pointwise,
    dw: Depthwise,
    project: Pointwise,
}

impl Brb {
    pub fn new(s: &mut Scope, in_ch: usize, out_ch: usize, hidden: usize, skip: bool) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || hidden == 0 {
            return Err(FuseError::config("BRB channel counts must be positive"));
        }
        Ok(Self {
            in_ch,
            out_ch,
            skip: skip && in_ch == out_ch,
            expand: Pointwise::new(&mut s.sub("expand"), in_ch, hidden, true, false)?,
            dw: Depthwise::new(&mut s.sub("dw"), hidden, true)?,
            project: Pointwise::new(&mut s.sub("project"), hidden, out_ch, true, true)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    /// Scalar parameter count of a BRB with these dimensions.
    pub fn param_count(in_ch: usize, out_ch: usize, hidden: usize) -> usize {
        (in_ch * hidden + hidden) + (9 * hidden + hidden) + (hidden * out_ch + out_ch)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.in_ch, "BRB")?;
        let h = ops::gelu(&self.expand.forward(x)?)?;
        let h = ops::gelu(&self.dw.forward(&h)?)?;
        let y = self.project.forward(&h)?;
        if self.skip {
            Ok((x + y)?)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub channels: usize,
    pub split: usize,
    pub layers: usize,
    /// Bound applied to the log-scale produced by the scale subnet.
    pub clamp: f64,
    pub subnet_expansion: usize,
}

impl CouplingSpec {
    pub fn new(channels: usize, layers: usize) -> Self {
        Self {
            channels,
            split: channels / 2,
            layers,
            clamp: 2.0,
            subnet_expansion: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split == 0 || self.split >= self.channels {
            return Err(FuseError::config(format!(
                "coupling split {} must satisfy 1 <= c < {}",
                self.split, self.channels
            )));
        }
        if self.layers == 0 {
            return Err(FuseError::config("coupling needs at least one layer"));
        }
        if !(self.clamp > 0.0) {
            return Err(FuseError::config("coupling clamp must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CouplingLayer {
    shift_second: Brb,
    log_scale: Brb,
    shift_first: Brb,
}

/// Stack of affine coupling layers.
///
/// Per layer, with `a = x[..c]` and `b = x[c..]`:
///
/// ```text
/// b' = b + I1(a)
/// a' = a * exp(clamp(I2(b'))) + I3(b')
/// ```
#[derive(Debug, Clone)]
pub struct InnBlock {
    spec: CouplingSpec,
    layers: Vec<CouplingLayer>,
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let probe = x.detach().abs()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if probe.is_finite() {
        Ok(())
    } else {
        Err(FuseError::NonFinite(format!("{what} input contains NaN or infinite values")))
    }
}

impl InnBlock {
    pub fn new(s: &mut Scope, spec: CouplingSpec) -> Result<Self> {
        spec.validate()?;
        let first = spec.split;
        let second = spec.channels - spec.split;
        let hidden = |c: usize| c * spec.subnet_expansion;
        let layers = (0..spec.layers)
            .map(|k| {
                let mut ls = s.sub(format!("layer{k}"));
                Ok(CouplingLayer {
                    shift_second: Brb::new(&mut ls.sub("shift_second"), first, second, hidden(first), false)?,
                    log_scale: Brb::new(&mut ls.sub("log_scale"), second, first, hidden(second), false)?,
                    shift_first: Brb::new(&mut ls.sub("shift_first"), second, first, hidden(second), false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    pub fn param_count(spec: &CouplingSpec) -> usize {
        let first = spec.split;
        let second = spec.channels - spec.split;
        let per_layer = Brb::param_count(first, second, first * spec.subnet_expansion)
            + 2 * Brb::param_count(second, first, second * spec.subnet_expansion);
        per_layer * spec.layers
    }

    fn halves(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.spec.split;
        Ok((x.narrow(1, 0, c)?, x.narrow(1, c, self.spec.channels - c)?))
    }

    fn scale(&self, layer: &CouplingLayer, second: &Tensor) -> Result<Tensor> {
        let clamp = self.spec.clamp;
        Ok(layer.log_scale.forward(second)?.clamp(-clamp, clamp)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.spec.channels, "coupling block")?;
        ensure_finite(x, "coupling block")?;
        let (mut a, mut b) = self.halves(x)?;
        for layer in &self.layers {
            b = (b + layer.shift_second.forward(&a)?)?;
            let s = self.scale(layer, &b)?;
            a = ((a * s.exp()?)? + layer.shift_first.forward(&b)?)?;
        }
        Ok(Tensor::cat(&[a, b], 1)?)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        check_channels(y, self.spec.channels, "coupling block")?;
        ensure_finite(y, "coupling block")?;
        let (mut a, mut b) = self.halves(y)?;
        for layer in self.layers.iter().rev() {
            let s = self.scale(layer, &b)?;
            a = ((a - layer.shift_first.forward(&b)?)? * s.neg()?.exp()?)?;
            b = (b - layer.shift_second.forward(&a)?)?;
        }
        Ok(Tensor::cat(&[a, b], 1)?)
    }
}
