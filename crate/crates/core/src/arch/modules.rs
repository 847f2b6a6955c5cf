//! Supported module tokens and their closed-form layer math.
//!
//! Every composite module is expanded into convolution primitives, mirroring
//! how the Ultralytics modules are assembled. Parameter totals count every
//! tensor registered on the module (conv weights, conv biases, and the two
//! affine terms of each batch norm; running statistics are buffers).

use serde::Serialize;

/// How a layer's repeat count is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepeatRule {
    /// `n` stacked copies built with identical arguments.
    Sequential,
    /// The count is consumed by the module itself (inner bottleneck stack).
    Internal,
    /// Only a single instance is meaningful.
    Single,
}

/// How output channels are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRule {
    /// `args[0]`, width-scaled.
    FromFirstArg,
    /// Sum of input channels.
    SumInputs,
    /// Same as the single input.
    PassThrough,
    /// Detection head; produces no feature map for later layers.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ModuleKind {
    Conv,
    Bottleneck,
    Spp,
    Sppf,
    C2f,
    ScDown,
    Psa,
    Concat,
    Upsample,
    Detect,
    V10Detect,
}

#[derive(Debug)]
pub struct ModuleSig {
    pub token: &'static str,
    pub kind: ModuleKind,
    pub min_args: usize,
    pub max_args: usize,
    pub channel_rule: ChannelRule,
    pub repeat_rule: RepeatRule,
}

pub static MODULE_TABLE: &[ModuleSig] = &[
    sig("Conv", ModuleKind::Conv, 1, 7, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("Bottleneck", ModuleKind::Bottleneck, 1, 5, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("SPP", ModuleKind::Spp, 1, 2, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("SPPF", ModuleKind::Sppf, 1, 2, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("C2f", ModuleKind::C2f, 1, 4, ChannelRule::FromFirstArg, RepeatRule::Internal),
    sig("SCDown", ModuleKind::ScDown, 3, 3, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("PSA", ModuleKind::Psa, 1, 2, ChannelRule::FromFirstArg, RepeatRule::Sequential),
    sig("Concat", ModuleKind::Concat, 0, 1, ChannelRule::SumInputs, RepeatRule::Single),
    sig("nn.Upsample", ModuleKind::Upsample, 2, 3, ChannelRule::PassThrough, RepeatRule::Sequential),
    sig("Detect", ModuleKind::Detect, 1, 1, ChannelRule::Head, RepeatRule::Single),
    sig("v10Detect", ModuleKind::V10Detect, 1, 1, ChannelRule::Head, RepeatRule::Single),
];

const fn sig(
    token: &'static str,
    kind: ModuleKind,
    min_args: usize,
    max_args: usize,
    channel_rule: ChannelRule,
    repeat_rule: RepeatRule,
) -> ModuleSig {
    ModuleSig {
        token,
        kind,
        min_args,
        max_args,
        channel_rule,
        repeat_rule,
    }
}

pub fn lookup(token: &str) -> Option<&'static ModuleSig> {
    MODULE_TABLE.iter().find(|s| s.token == token)
}

impl ModuleKind {
    pub fn sig(self) -> &'static ModuleSig {
        MODULE_TABLE
            .iter()
            .find(|s| s.kind == self)
            .expect("every kind has a table entry")
    }

    pub fn is_detect(self) -> bool {
        matches!(self, ModuleKind::Detect | ModuleKind::V10Detect)
    }
}

/// Number of box-distribution bins in the anchor-free heads.
pub const REG_MAX: u64 = 16;

/// Resolved, module-specific arguments (after width scaling and channel
/// insertion).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "module", rename_all = "snake_case")]
pub enum ModuleOp {
    Conv {
        k: u64,
        s: u64,
        p: Option<u64>,
        g: u64,
        d: u64,
    },
    Bottleneck {
        shortcut: bool,
        g: u64,
        k: (u64, u64),
        e: f64,
    },
    Spp {
        kernels: Vec<u64>,
    },
    Sppf {
        k: u64,
    },
    C2f {
        n: u64,
        shortcut: bool,
        g: u64,
        e: f64,
    },
    ScDown {
        k: u64,
        s: u64,
    },
    Psa {
        e: f64,
    },
    Concat,
    Upsample {
        factor: u64,
    },
    Detect {
        nc: u64,
    },
    V10Detect {
        nc: u64,
    },
}

/// One convolution with optional batch norm, at a fixed output resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvPrim {
    pub c_in: u64,
    pub c_out: u64,
    pub k: u64,
    pub groups: u64,
    pub bias: bool,
    pub norm: bool,
    pub out_hw: (u64, u64),
}

impl ConvPrim {
    /// Ultralytics `Conv`: bias-free convolution followed by batch norm.
    fn conv(c_in: u64, c_out: u64, k: u64, groups: u64, out_hw: (u64, u64)) -> Self {
        Self {
            c_in,
            c_out,
            k,
            groups,
            bias: false,
            norm: true,
            out_hw,
        }
    }

    /// Plain `nn.Conv2d` with bias.
    fn plain(c_in: u64, c_out: u64, k: u64, out_hw: (u64, u64)) -> Self {
        Self {
            c_in,
            c_out,
            k,
            groups: 1,
            bias: true,
            norm: false,
            out_hw,
        }
    }

    pub fn params(&self) -> u64 {
        let weights = self.k * self.k * (self.c_in / self.groups) * self.c_out;
        weights + if self.bias { self.c_out } else { 0 } + if self.norm { 2 * self.c_out } else { 0 }
    }

    pub fn macs(&self) -> u64 {
        self.k * self.k * (self.c_in / self.groups) * self.c_out * self.out_hw.0 * self.out_hw.1
    }
}

/// Primitive expansion of one module instance.
#[derive(Debug, Default, Clone)]
pub struct Expansion {
    pub convs: Vec<ConvPrim>,
    /// Non-convolution multiply-accumulates (attention products, DFL).
    pub extra_macs: u64,
    /// Parameters that are not convolutions (the DFL projection).
    pub extra_params: u64,
}

impl Expansion {
    pub fn params(&self) -> u64 {
        self.convs.iter().map(ConvPrim::params).sum::<u64>() + self.extra_params
    }

    pub fn macs(&self) -> u64 {
        self.convs.iter().map(ConvPrim::macs).sum::<u64>() + self.extra_macs
    }
}

/// Output spatial size of a padded convolution (`autopad` semantics).
pub fn conv_out(size: u64, k: u64, s: u64, p: Option<u64>, d: u64) -> u64 {
    let eff = d * (k - 1) + 1;
    let pad = p.unwrap_or(eff / 2);
    (size + 2 * pad).saturating_sub(eff) / s + 1
}

fn conv_hw(hw: (u64, u64), k: u64, s: u64, p: Option<u64>, d: u64) -> (u64, u64) {
    (conv_out(hw.0, k, s, p, d), conv_out(hw.1, k, s, p, d))
}

/// Expands a single module instance.
///
/// `c_in` holds one entry per input; `in_hw` the matching spatial sizes.
/// Pass `(1, 1)` sizes when only parameter counts are needed.
pub fn expand(op: &ModuleOp, c_in: &[u64], c_out: u64, in_hw: &[(u64, u64)]) -> Expansion {
    let c1 = c_in.first().copied().unwrap_or(0);
    let hw = in_hw.first().copied().unwrap_or((1, 1));
    let mut x = Expansion::default();
    match op {
        ModuleOp::Conv { k, s, p, g, d } => {
            x.convs.push(ConvPrim::conv(c1, c_out, *k, *g, conv_hw(hw, *k, *s, *p, *d)));
        }
        ModuleOp::Bottleneck { g, k, e, .. } => {
            let hidden = (c_out as f64 * e) as u64;
            x.convs.push(ConvPrim::conv(c1, hidden, k.0, 1, hw));
            x.convs.push(ConvPrim::conv(hidden, c_out, k.1, *g, hw));
        }
        ModuleOp::Spp { kernels } => {
            let hidden = c1 / 2;
            x.convs.push(ConvPrim::conv(c1, hidden, 1, 1, hw));
            x.convs
                .push(ConvPrim::conv(hidden * (kernels.len() as u64 + 1), c_out, 1, 1, hw));
        }
        ModuleOp::Sppf { .. } => {
            let hidden = c1 / 2;
            x.convs.push(ConvPrim::conv(c1, hidden, 1, 1, hw));
            x.convs.push(ConvPrim::conv(hidden * 4, c_out, 1, 1, hw));
        }
        ModuleOp::C2f { n, g, e, .. } => {
            let c = (c_out as f64 * e) as u64;
            x.convs.push(ConvPrim::conv(c1, 2 * c, 1, 1, hw));
            x.convs.push(ConvPrim::conv((2 + n) * c, c_out, 1, 1, hw));
            for _ in 0..*n {
                x.convs.push(ConvPrim::conv(c, c, 3, 1, hw));
                x.convs.push(ConvPrim::conv(c, c, 3, *g, hw));
            }
        }
        ModuleOp::ScDown { k, s } => {
            x.convs.push(ConvPrim::conv(c1, c_out, 1, 1, hw));
            x.convs
                .push(ConvPrim::conv(c_out, c_out, *k, c_out, conv_hw(hw, *k, *s, None, 1)));
        }
        ModuleOp::Psa { e } => {
            let c = (c1 as f64 * e) as u64;
            x.convs.push(ConvPrim::conv(c1, 2 * c, 1, 1, hw));
            x.convs.push(ConvPrim::conv(2 * c, c1, 1, 1, hw));
            let (heads, key_dim, head_dim) = attention_dims(c);
            let qkv = c + 2 * key_dim * heads;
            x.convs.push(ConvPrim::conv(c, qkv, 1, 1, hw));
            x.convs.push(ConvPrim::conv(c, c, 1, 1, hw));
            x.convs.push(ConvPrim::conv(c, c, 3, c, hw));
            x.convs.push(ConvPrim::conv(c, 2 * c, 1, 1, hw));
            x.convs.push(ConvPrim::conv(2 * c, c, 1, 1, hw));
            let tokens = hw.0 * hw.1;
            x.extra_macs = tokens * tokens * heads * (key_dim + head_dim);
        }
        ModuleOp::Concat | ModuleOp::Upsample { .. } => {}
        ModuleOp::Detect { nc } | ModuleOp::V10Detect { nc } => {
            let light = matches!(op, ModuleOp::V10Detect { .. });
            let c2 = 16.max(c1 / 4).max(REG_MAX * 4);
            let c3 = c1.max((*nc).min(100));
            let copies = if light { 2 } else { 1 };
            let mut anchors = 0;
            for (&ch, &level_hw) in c_in.iter().zip(in_hw.iter().chain(std::iter::repeat(&(1, 1)))) {
                anchors += level_hw.0 * level_hw.1;
                for _ in 0..copies {
                    x.convs.push(ConvPrim::conv(ch, c2, 3, 1, level_hw));
                    x.convs.push(ConvPrim::conv(c2, c2, 3, 1, level_hw));
                    x.convs.push(ConvPrim::plain(c2, 4 * REG_MAX, 1, level_hw));
                    if light {
                        x.convs.push(ConvPrim::conv(ch, ch, 3, ch, level_hw));
                        x.convs.push(ConvPrim::conv(ch, c3, 1, 1, level_hw));
                        x.convs.push(ConvPrim::conv(c3, c3, 3, c3, level_hw));
                        x.convs.push(ConvPrim::conv(c3, c3, 1, 1, level_hw));
                    } else {
                        x.convs.push(ConvPrim::conv(ch, c3, 3, 1, level_hw));
                        x.convs.push(ConvPrim::conv(c3, c3, 3, 1, level_hw));
                    }
                    x.convs.push(ConvPrim::plain(c3, *nc, 1, level_hw));
                }
            }
            // DFL: a frozen 1x1 projection over the REG_MAX bins of each box side.
            x.extra_params = REG_MAX;
            x.extra_macs = REG_MAX * 4 * anchors;
        }
    }
    x
}

/// `(num_heads, key_dim, head_dim)` of the PSA attention block over `dim`
/// channels.
pub fn attention_dims(dim: u64) -> (u64, u64, u64) {
    let heads = (dim / 64).max(1);
    let head_dim = dim / heads;
    let key_dim = (head_dim as f64 * 0.5) as u64;
    (heads, key_dim, head_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_has_one_signature() {
        for s in MODULE_TABLE {
            assert_eq!(MODULE_TABLE.iter().filter(|o| o.kind == s.kind).count(), 1);
            assert_eq!(lookup(s.token).unwrap().kind, s.kind);
        }
        assert!(lookup("FooBar").is_none());
    }

    #[test]
    fn single_conv_primitive() {
        let op = ModuleOp::Conv {
            k: 3,
            s: 1,
            p: None,
            g: 1,
            d: 1,
        };
        let x = expand(&op, &[3], 32, &[(64, 64)]);
        assert_eq!(x.params(), 3 * 32 * 9 + 2 * 32);
        assert_eq!(x.macs(), 3 * 32 * 9 * 64 * 64);
    }

    #[test]
    fn conv_output_sizes() {
        assert_eq!(conv_out(64, 3, 1, None, 1), 64);
        assert_eq!(conv_out(64, 3, 2, None, 1), 32);
        assert_eq!(conv_out(65, 3, 2, None, 1), 33);
        assert_eq!(conv_out(64, 1, 1, None, 1), 64);
    }

    #[test]
    fn bottleneck_expansion() {
        let op = ModuleOp::Bottleneck {
            shortcut: true,
            g: 1,
            k: (3, 3),
            e: 0.5,
        };
        let x = expand(&op, &[64], 64, &[(1, 1)]);
        // 64 -> 32 (3x3) -> 64 (3x3), each with a batch norm
        assert_eq!(x.params(), (64 * 32 * 9 + 64) + (32 * 64 * 9 + 128));
    }
}
