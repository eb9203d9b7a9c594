//! Convolutional layers: light and advanced attentive convolution, gated
//! convolution and its multi-granular / beneficiary uses, plus the
//! comparison layers (vanilla convolution, attentive pooling and the
//! attention-only stack).
//!
//! All width-3 windows zero-pad at both sequence boundaries, so every layer
//! preserves the number of positions.

use serde::{Deserialize, Serialize};

use crate::attention::{attentive_context, match_scores, Attended, AttentionMask, MatchMethod, MatchParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Initializer, ParamId, ParamStore};

/// Whether intra-context attention may pick a position's own hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelfMode {
    #[default]
    IncludeSelf,
    ExcludeSelf,
}

fn lookup(store: &ParamStore, name: String) -> Result<ParamId> {
    store
        .id(&name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// `[h_{i-1}; h_i; h_{i+1}]` per column, zero beyond either end.
pub fn window3(g: &mut Graph<'_>, h: NodeId) -> Result<NodeId> {
    let left = g.shift_cols(h, -1);
    let right = g.shift_cols(h, 1);
    g.concat_rows(&[left, h, right])
}

/// Width-3 filter bank: `window` is `d_out x 3 d_in`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub window: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(ConvParams {
            window: store.add(format!("{prefix}.window"), init.glorot(d_out, 3 * d_in))?,
            bias: store.add(format!("{prefix}.bias"), init.zeros(&[d_out]))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(ConvParams {
            window: lookup(store, format!("{prefix}.window"))?,
            bias: lookup(store, format!("{prefix}.bias"))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.window, self.bias]
    }
}

/// `tanh(W1 [h_{i-1}; h_i; h_{i+1}] + b)` at every position.
pub fn vanilla_conv(g: &mut Graph<'_>, h: NodeId, p: &ConvParams) -> Result<NodeId> {
    let win = window3(g, h)?;
    let window = g.param(p.window);
    let b = g.param(p.bias);
    let z = g.matmul(window, win)?;
    let z = g.add_bias(z, b)?;
    Ok(g.tanh(z))
}

/// Light attentive convolution filters: `window` (`d x 3d`) over the local
/// window, `attentive` (`d x d_c`) over the attentive context, one shared bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LightAttConvParams {
    pub window: ParamId,
    pub attentive: ParamId,
    pub bias: ParamId,
}

impl LightAttConvParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        d_context: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(LightAttConvParams {
            window: store.add(format!("{prefix}.window"), init.glorot(d_out, 3 * d_in))?,
            attentive: store.add(format!("{prefix}.attentive"), init.glorot(d_out, d_context))?,
            bias: store.add(format!("{prefix}.bias"), init.zeros(&[d_out]))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(LightAttConvParams {
            window: lookup(store, format!("{prefix}.window"))?,
            attentive: lookup(store, format!("{prefix}.attentive"))?,
            bias: lookup(store, format!("{prefix}.bias"))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.window, self.attentive, self.bias]
    }
}

/// `tanh(W1 [h_{i-1}; h_i; h_{i+1}] + W2 c_i + b)`, computed as a width-3
/// convolution over `hx` plus a width-1 convolution over `cx`, summed
/// before the nonlinearity.
pub fn light_attconv(g: &mut Graph<'_>, hx: NodeId, cx: NodeId, p: &LightAttConvParams) -> Result<NodeId> {
    let (m, mc) = (g.value(hx).cols(), g.value(cx).cols());
    if m != mc {
        return Err(Error::dim(
            "light_attconv",
            format!("{m} target positions but {mc} attentive-context columns"),
        ));
    }
    let win = window3(g, hx)?;
    let window = g.param(p.window);
    let attentive = g.param(p.attentive);
    let b = g.param(p.bias);
    let local = g.matmul(window, win)?;
    let attentive = g.matmul(attentive, cx)?;
    let z = g.add(local, attentive)?;
    let z = g.add_bias(z, b)?;
    Ok(g.tanh(z))
}

/// Gated convolution over windows of `width` hidden states (1 or 3):
/// candidate `tanh(W_h i + candidate_bias)`, gate `sigmoid(W_g i + gate_bias)`, output
/// `gate * u + (1 - gate) * candidate` with `u` the central state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatedConvParams {
    pub candidate: ParamId,
    pub candidate_bias: ParamId,
    pub gate: ParamId,
    pub gate_bias: ParamId,
    pub width: usize,
}

impl GatedConvParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        width: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if width != 1 && width != 3 {
            return Err(Error::Contract(format!(
                "gated convolution width must be 1 or 3, got {width}"
            )));
        }
        Ok(GatedConvParams {
            candidate: store.add(format!("{prefix}.candidate"), init.glorot(d, width * d))?,
            candidate_bias: store.add(format!("{prefix}.candidate_bias"), init.zeros(&[d]))?,
            gate: store.add(format!("{prefix}.gate"), init.glorot(d, width * d))?,
            gate_bias: store.add(format!("{prefix}.gate_bias"), init.zeros(&[d]))?,
            width,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(GatedConvParams {
            candidate: lookup(store, format!("{prefix}.candidate"))?,
            candidate_bias: lookup(store, format!("{prefix}.candidate_bias"))?,
            gate: lookup(store, format!("{prefix}.gate"))?,
            gate_bias: lookup(store, format!("{prefix}.gate_bias"))?,
            width,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.candidate, self.candidate_bias, self.gate, self.gate_bias]
    }
}

/// Applies the gated convolution at every position of `h` (`d x m`).
pub fn gated_conv(g: &mut Graph<'_>, h: NodeId, p: &GatedConvParams) -> Result<NodeId> {
    let d = g.value(h).rows();
    let expected = p.width * d;
    let got = g.store().get(p.candidate).cols();
    if (p.width != 1 && p.width != 3) || got != expected {
        return Err(Error::Contract(format!(
            "gated convolution expects a window of {} states ({expected} inputs), filters take {got}",
            p.width
        )));
    }
    let input = if p.width == 1 { h } else { window3(g, h)? };
    let (candidate, candidate_bias, gate, gate_bias) = (
        g.param(p.candidate),
        g.param(p.candidate_bias),
        g.param(p.gate),
        g.param(p.gate_bias),
    );
    let cand = g.matmul(candidate, input)?;
    let cand = g.add_bias(cand, candidate_bias)?;
    let cand = g.tanh(cand);
    let gate = g.matmul(gate, input)?;
    let gate = g.add_bias(gate, gate_bias)?;
    let gate = g.sigmoid(gate);
    let keep = g.mul(gate, h)?;
    let neg = g.scale(gate, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let mixed = g.mul(rest, cand)?;
    g.add(keep, mixed)
}

/// Unigram and trigram gated convolutions whose outputs are stacked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MgranParams {
    pub uni: GatedConvParams,
    pub tri: GatedConvParams,
}

impl MgranParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, init: &mut Initializer) -> Result<Self> {
        Ok(MgranParams {
            uni: GatedConvParams::register(store, &format!("{prefix}.uni"), d, 1, init)?,
            tri: GatedConvParams::register(store, &format!("{prefix}.tri"), d, 3, init)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(MgranParams {
            uni: GatedConvParams::lookup(store, &format!("{prefix}.uni"), 1)?,
            tri: GatedConvParams::lookup(store, &format!("{prefix}.tri"), 3)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.uni.param_ids();
        v.extend(self.tri.param_ids());
        v
    }
}

/// `d x m -> 2d x m`: rows `0..d` unigram, rows `d..2d` trigram.
pub fn mgran(g: &mut Graph<'_>, h: NodeId, p: &MgranParams) -> Result<NodeId> {
    let uni = gated_conv(g, h, &p.uni)?;
    let tri = gated_conv(g, h, &p.tri)?;
    g.concat_rows(&[uni, tri])
}

/// Unigram gated convolution producing the map that receives the
/// attentive context.
pub fn beneficiary(g: &mut Graph<'_>, h: NodeId, p: &GatedConvParams) -> Result<NodeId> {
    if p.width != 1 {
        return Err(Error::Contract("beneficiary uses a unigram gated convolution".into()));
    }
    gated_conv(g, h, p)
}

/// Output of one attentive layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub hidden: NodeId,
    pub attention: Attended,
}

/// Matching + attentive context + light attentive convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LightLayer {
    pub matching: MatchParams,
    pub conv: LightAttConvParams,
}

impl LightLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        method: MatchMethod,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(LightLayer {
            matching: MatchParams::register(store, &format!("{prefix}.match"), method, d, init)?,
            conv: LightAttConvParams::register(store, &format!("{prefix}.conv"), d, d, d, init)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, d: usize, method: MatchMethod) -> Result<Self> {
        Ok(LightLayer {
            matching: MatchParams::lookup(store, &format!("{prefix}.match"), method, d)?,
            conv: LightAttConvParams::lookup(store, &format!("{prefix}.conv"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, hx: NodeId, hy: NodeId, mask: &AttentionMask) -> Result<LayerOutput> {
        let scores = match_scores(g, hx, hy, &self.matching)?;
        let attention = attentive_context(g, scores, hy, mask)?;
        let hidden = light_attconv(g, hx, attention.context, &self.conv)?;
        Ok(LayerOutput { hidden, attention })
    }
}

/// Multi-granular source and focus, gated beneficiary, matching at size
/// `2d`, and a light convolution whose context filter is `d x 2d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdvancedParams {
    pub source: MgranParams,
    pub focus: MgranParams,
    pub beneficiary: GatedConvParams,
    pub matching: MatchParams,
    pub conv: LightAttConvParams,
}

impl AdvancedParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        method: MatchMethod,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(AdvancedParams {
            source: MgranParams::register(store, &format!("{prefix}.source"), d, init)?,
            focus: MgranParams::register(store, &format!("{prefix}.focus"), d, init)?,
            beneficiary: GatedConvParams::register(store, &format!("{prefix}.bene"), d, 1, init)?,
            matching: MatchParams::register(store, &format!("{prefix}.match"), method, 2 * d, init)?,
            conv: LightAttConvParams::register(store, &format!("{prefix}.conv"), d, d, 2 * d, init)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, d: usize, method: MatchMethod) -> Result<Self> {
        Ok(AdvancedParams {
            source: MgranParams::lookup(store, &format!("{prefix}.source"))?,
            focus: MgranParams::lookup(store, &format!("{prefix}.focus"))?,
            beneficiary: GatedConvParams::lookup(store, &format!("{prefix}.bene"), 1)?,
            matching: MatchParams::lookup(store, &format!("{prefix}.match"), method, 2 * d)?,
            conv: LightAttConvParams::lookup(store, &format!("{prefix}.conv"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, hx: NodeId, hy: NodeId, mask: &AttentionMask) -> Result<LayerOutput> {
        advanced_attconv(g, hx, hy, mask, self)
    }
}

pub fn advanced_attconv(
    g: &mut Graph<'_>,
    hx: NodeId,
    hy: NodeId,
    mask: &AttentionMask,
    p: &AdvancedParams,
) -> Result<LayerOutput> {
    let source = mgran(g, hx, &p.source)?;
    let focus = mgran(g, hy, &p.focus)?;
    let scores = match_scores(g, source, focus, &p.matching)?;
    let attention = attentive_context(g, scores, focus, mask)?;
    let bene = beneficiary(g, hx, &p.beneficiary)?;
    let hidden = light_attconv(g, bene, attention.context, &p.conv)?;
    Ok(LayerOutput { hidden, attention })
}

/// Either attentive layer, for use where the context is the text itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttConvLayer {
    Light(LightLayer),
    Advanced(AdvancedParams),
}

impl AttConvLayer {
    pub fn forward(&self, g: &mut Graph<'_>, hx: NodeId, hy: NodeId, mask: &AttentionMask) -> Result<LayerOutput> {
        match self {
            AttConvLayer::Light(l) => l.forward(g, hx, hy, mask),
            AttConvLayer::Advanced(a) => a.forward(g, hx, hy, mask),
        }
    }
}

/// Attentive convolution with the text as its own context.
pub fn intra_attconv(g: &mut Graph<'_>, hx: NodeId, layer: &AttConvLayer, mode: SelfMode) -> Result<LayerOutput> {
    let m = g.value(hx).cols();
    let mask = match mode {
        SelfMode::IncludeSelf => AttentionMask::all(m),
        SelfMode::ExcludeSelf => {
            if m < 2 {
                return Err(Error::EmptyContext(
                    "excluding self leaves no context in a one-token text".into(),
                ));
            }
            AttentionMask::all(m).without_diagonal()
        }
    };
    layer.forward(g, hx, hx, &mask)
}

/// Pooled sentence vectors of the attentive-pooling baseline together with
/// the pooling weights.
#[derive(Clone, Copy, Debug)]
pub struct PooledPair {
    pub x: NodeId,
    pub y: NodeId,
    pub x_weights: NodeId,
    pub y_weights: NodeId,
}

/// Both texts go through the same width-3 convolution; each hidden state
/// is scored by dot product against every hidden state of the other text,
/// scores are summed per state and softmax-normalized, and each text is
/// represented by its weighted mean hidden state.
pub fn attentive_pooling(g: &mut Graph<'_>, hx: NodeId, hy: NodeId, conv: &ConvParams) -> Result<PooledPair> {
    let px = vanilla_conv(g, hx, conv)?;
    let py = vanilla_conv(g, hy, conv)?;
    let pxt = g.transpose(px);
    let s = g.matmul(pxt, py)?;
    let row = g.sum_cols(s);
    let row = g.transpose(row);
    let x_weights = g.softmax_rows(row)?;
    let col = g.sum_rows(s);
    let y_weights = g.softmax_rows(col)?;
    let wx = g.transpose(x_weights);
    let wy = g.transpose(y_weights);
    let x = g.matmul(px, wx)?;
    let y = g.matmul(py, wy)?;
    Ok(PooledPair {
        x,
        y,
        x_weights,
        y_weights,
    })
}

/// One layer of the attention-only stack: `tanh(W (h_i + c_i) + b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoConvLayer {
    pub matching: MatchParams,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const NO_CONV_DEPTH: usize = 4;

impl NoConvLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        method: MatchMethod,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(NoConvLayer {
            matching: MatchParams::register(store, &format!("{prefix}.match"), method, d, init)?,
            weight: store.add(format!("{prefix}.weight"), init.glorot(d, d))?,
            bias: store.add(format!("{prefix}.bias"), init.zeros(&[d]))?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, d: usize, method: MatchMethod) -> Result<Self> {
        Ok(NoConvLayer {
            matching: MatchParams::lookup(store, &format!("{prefix}.match"), method, d)?,
            weight: lookup(store, format!("{prefix}.weight"))?,
            bias: lookup(store, format!("{prefix}.bias"))?,
        })
    }
}

/// Runs the stack. With `hy == None` each layer attends over its own input
/// (the intra-context case), otherwise over the fixed context map `hy`.
pub fn no_conv_stack(
    g: &mut Graph<'_>,
    hx: NodeId,
    hy: Option<NodeId>,
    mask: &AttentionMask,
    layers: &[NoConvLayer],
) -> Result<(NodeId, Vec<Attended>)> {
    let mut h = hx;
    let mut atts = Vec::with_capacity(layers.len());
    for layer in layers {
        let ctx = hy.unwrap_or(h);
        let scores = match_scores(g, h, ctx, &layer.matching)?;
        let att = attentive_context(g, scores, ctx, mask)?;
        let s = g.add(h, att.context)?;
        let w = g.param(layer.weight);
        let b = g.param(layer.bias);
        let z = g.matmul(w, s)?;
        let z = g.add_bias(z, b)?;
        h = g.tanh(z);
        atts.push(att);
    }
    Ok((h, atts))
}
