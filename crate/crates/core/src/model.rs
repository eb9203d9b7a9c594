//! The full classifier: embedding lookup, one encoder layer, max pooling
//! over positions, and a softmax head.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::{Attended, AttentionMask, MatchMethod};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{
    attentive_pooling, intra_attconv, no_conv_stack, vanilla_conv, AdvancedParams, AttConvLayer, ConvParams,
    LightLayer, NoConvLayer, SelfMode, NO_CONV_DEPTH,
};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::batch::ExampleView;
use crate::text::dataset::EncodedExample;
use crate::text::embeddings::EmbeddingMatrix;
use crate::text::vocab::Vocabulary;

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const EMBEDDING_PARAM: &str = "embedding";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Light,
    Advanced,
    VanillaCnn,
    AttentivePooling,
    NoConv,
    NoContext,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Light,
        Variant::Advanced,
        Variant::VanillaCnn,
        Variant::AttentivePooling,
        Variant::NoConv,
        Variant::NoContext,
    ];

    /// Whether the variant produces per-position attention matrices.
    pub fn has_attention_map(self) -> bool {
        matches!(self, Variant::Light | Variant::Advanced | Variant::NoConv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    Intra,
    Single,
    MultiWise,
    MultiConc,
}

fn parse_kebab<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} {s:?}")))
}

fn show_kebab<T: Serialize>(v: &T, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => f.write_str(&s),
        _ => Err(fmt::Error),
    }
}

macro_rules! kebab_str {
    ($($t:ty => $what:literal),*) => {$(
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                parse_kebab(s, $what)
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                show_kebab(self, f)
            }
        }
    )*};
}

kebab_str!(Variant => "variant", ContextMode => "context mode", MatchMethod => "match method", SelfMode => "self mode");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub context_mode: ContextMode,
    /// Hidden size, also the embedding size.
    pub d: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub match_method: MatchMethod,
    #[serde(default)]
    pub self_mode: SelfMode,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, context_mode: ContextMode, d: usize, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            context_mode,
            d,
            num_classes,
            match_method: MatchMethod::default(),
            self_mode: SelfMode::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num-classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Size of the vector fed to the classifier head.
    pub fn representation_size(&self) -> usize {
        match (self.variant, self.context_mode) {
            (Variant::AttentivePooling, _) => 2 * self.d,
            (Variant::VanillaCnn, mode) if mode != ContextMode::Intra => 2 * self.d,
            _ => self.d,
        }
    }
}

fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    50
}
fn default_epochs() -> usize {
    10
}
fn default_eps() -> f64 {
    1e-8
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_eps")]
    pub adagrad_epsilon: f64,
    /// Dev-set evaluation period in epochs.
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default = "default_true")]
    pub fine_tune_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            adagrad_epsilon: default_eps(),
            eval_every: default_one(),
            fine_tune_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.learning_rate) {
            return Err(Error::Config(format!(
                "learning-rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !pos(self.adagrad_epsilon) {
            return Err(Error::Config(format!(
                "adagrad-epsilon must be positive, got {}",
                self.adagrad_epsilon
            )));
        }
        for (name, v) in [
            ("batch-size", self.batch_size),
            ("epochs", self.epochs),
            ("eval-every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Encoder {
    Attentive(Box<AttConvLayer>),
    Vanilla(ConvParams),
    Pooling(ConvParams),
    NoConv(Vec<NoConvLayer>),
}

/// One attention matrix produced while encoding an example.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub context: usize,
    pub attended: Attended,
    pub mask: AttentionMask,
    /// Token ids along the attended axis (possibly padded; see `mask`).
    pub context_ids: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Sentence representation fed to the head.
    pub rep: NodeId,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `1 x K` class probabilities.
    pub probs: NodeId,
    pub encoded: Encoded,
}

/// Materialized, unpadded attention weights for export.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub context: usize,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
    /// `row_ids.len() x col_ids.len()`.
    pub weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub store: ParamStore,
    pub embedding: ParamId,
    encoder: Encoder,
    head_w: ParamId,
    head_b: ParamId,
}

/// Concatenates contexts in order, one separator between neighbours.
pub fn join_contexts(contexts: &[Vec<usize>], separator: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, c) in contexts.iter().enumerate() {
        if k > 0 {
            out.push(separator);
        }
        out.extend_from_slice(c);
    }
    out
}

fn unpadded(ids: &[usize], mask: &[bool]) -> Vec<usize> {
    ids.iter().zip(mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect()
}

/// `-log(max(p[label], floor))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs `f` on an unpadded view of `ex`.
pub fn with_view<R>(ex: &EncodedExample, f: impl FnOnce(&ExampleView<'_>) -> R) -> R {
    let masks = crate::text::batch::full_masks(ex);
    let view = ExampleView::unpadded(ex, &masks);
    f(&view)
}

impl Model {
    /// Fresh model: encoder and head weights drawn under `config.seed`.
    /// Context-concatenation models need the separator in `vocab`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        labels: Vec<String>,
        embeddings: EmbeddingMatrix,
    ) -> Result<Model> {
        config.validate()?;
        if labels.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for num-classes {}",
                labels.len(),
                config.num_classes
            )));
        }
        if embeddings.table.shape() != [vocab.len(), config.d] {
            return Err(Error::dim(
                "Model::new",
                format!(
                    "embedding table {:?} for vocabulary {} and d {}",
                    embeddings.table.shape(),
                    vocab.len(),
                    config.d
                ),
            ));
        }
        if config.context_mode == ContextMode::MultiConc && vocab.separator().is_none() {
            return Err(Error::Contract(
                "context concatenation needs the separator token in the vocabulary".into(),
            ));
        }
        let d = config.d;
        let method = config.match_method;
        let mut store = ParamStore::new();
        let embedding = store.add(EMBEDDING_PARAM, embeddings.table)?;
        let mut init = Initializer::new(config.seed.wrapping_add(1));
        let encoder = match config.variant {
            Variant::Light => Encoder::Attentive(Box::new(AttConvLayer::Light(LightLayer::register(
                &mut store, "light", d, method, &mut init,
            )?))),
            Variant::Advanced => Encoder::Attentive(Box::new(AttConvLayer::Advanced(AdvancedParams::register(
                &mut store, "advanced", d, method, &mut init,
            )?))),
            Variant::VanillaCnn | Variant::NoContext => {
                Encoder::Vanilla(ConvParams::register(&mut store, "conv", d, d, &mut init)?)
            }
            Variant::AttentivePooling => Encoder::Pooling(ConvParams::register(&mut store, "conv", d, d, &mut init)?),
            Variant::NoConv => Encoder::NoConv(
                (0..NO_CONV_DEPTH)
                    .map(|l| NoConvLayer::register(&mut store, &format!("layer{l}"), d, method, &mut init))
                    .collect::<Result<_>>()?,
            ),
        };
        let rep = config.representation_size();
        let head_w = store.add("head.weight", init.glorot(config.num_classes, rep))?;
        let head_b = store.add("head.bias", init.zeros(&[config.num_classes]))?;
        Ok(Model {
            config,
            vocab,
            labels,
            store,
            embedding,
            encoder,
            head_w,
            head_b,
        })
    }

    /// Rebuilds a model around existing parameters, which must have exactly
    /// the names, order and shapes a fresh model of `config` would have.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, labels: Vec<String>, store: ParamStore) -> Result<Model> {
        let emb_shape = [vocab.len(), config.d];
        let mut model = Model::new(
            config,
            vocab,
            labels,
            EmbeddingMatrix {
                table: Tensor::zeros(&emb_shape),
                trainable: true,
            },
        )?;
        let want: Vec<(&str, &[usize])> = model.store.iter().map(|(_, n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = store.iter().map(|(_, n, t)| (n, t.shape())).collect();
        if want != got {
            let diff = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", want.len(), got.len()));
            return Err(Error::Config(format!(
                "parameters do not fit the model configuration: {diff}"
            )));
        }
        model.store = store;
        Ok(model)
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    fn embed(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<NodeId> {
        g.embed(self.embedding, ids)
    }

    fn intra_mask(&self, m: usize) -> Result<AttentionMask> {
        match self.config.self_mode {
            SelfMode::IncludeSelf => Ok(AttentionMask::all(m)),
            SelfMode::ExcludeSelf if m < 2 => Err(Error::EmptyContext(
                "excluding self leaves no context in a one-token text".into(),
            )),
            SelfMode::ExcludeSelf => Ok(AttentionMask::all(m).without_diagonal()),
        }
    }

    fn max_conv(&self, g: &mut Graph<'_>, h: NodeId, conv: &ConvParams) -> Result<NodeId> {
        let c = vanilla_conv(g, h, conv)?;
        g.max_over_positions(c)
    }

    fn encode_intra(&self, g: &mut Graph<'_>, hx: NodeId, ids: &[usize]) -> Result<Encoded> {
        let mut attention = Vec::new();
        let rep = match &self.encoder {
            Encoder::Attentive(layer) => {
                let out = intra_attconv(g, hx, layer, self.config.self_mode)?;
                attention.push(AttentionRecord {
                    layer: 0,
                    context: 0,
                    attended: out.attention,
                    mask: self.intra_mask(ids.len())?,
                    context_ids: ids.to_vec(),
                });
                g.max_over_positions(out.hidden)?
            }
            Encoder::NoConv(layers) => {
                let mask = self.intra_mask(ids.len())?;
                let (out, atts) = no_conv_stack(g, hx, None, &mask, layers)?;
                for (l, a) in atts.into_iter().enumerate() {
                    attention.push(AttentionRecord {
                        layer: l,
                        context: 0,
                        attended: a,
                        mask: mask.clone(),
                        context_ids: ids.to_vec(),
                    });
                }
                g.max_over_positions(out)?
            }
            Encoder::Vanilla(conv) => self.max_conv(g, hx, conv)?,
            Encoder::Pooling(conv) => {
                let p = attentive_pooling(g, hx, hx, conv)?;
                g.concat_rows(&[p.x, p.y])?
            }
        };
        Ok(Encoded { rep, attention })
    }

    /// Encodes the text against one context. `x_conv` caches the pooled
    /// text convolution of the Siamese baseline across contexts.
    #[allow(clippy::too_many_arguments)]
    fn encode_pair(
        &self,
        g: &mut Graph<'_>,
        hx: NodeId,
        ctx: &[usize],
        mask: &[bool],
        k: usize,
        x_conv: &mut Option<NodeId>,
        attention: &mut Vec<AttentionRecord>,
    ) -> Result<NodeId> {
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptyContext(format!("context {k} has no tokens")));
        }
        match &self.encoder {
            Encoder::Attentive(layer) => {
                let hy = self.embed(g, ctx)?;
                let amask = AttentionMask::columns(mask);
                let out = layer.forward(g, hx, hy, &amask)?;
                attention.push(AttentionRecord {
                    layer: 0,
                    context: k,
                    attended: out.attention,
                    mask: amask,
                    context_ids: ctx.to_vec(),
                });
                g.max_over_positions(out.hidden)
            }
            Encoder::NoConv(layers) => {
                let hy = self.embed(g, ctx)?;
                let amask = AttentionMask::columns(mask);
                let (out, atts) = no_conv_stack(g, hx, Some(hy), &amask, layers)?;
                for (l, a) in atts.into_iter().enumerate() {
                    attention.push(AttentionRecord {
                        layer: l,
                        context: k,
                        attended: a,
                        mask: amask.clone(),
                        context_ids: ctx.to_vec(),
                    });
                }
                g.max_over_positions(out)
            }
            Encoder::Vanilla(conv) => {
                let x = match *x_conv {
                    Some(x) => x,
                    None => {
                        let x = self.max_conv(g, hx, conv)?;
                        *x_conv = Some(x);
                        x
                    }
                };
                let hy = self.embed(g, &unpadded(ctx, mask))?;
                let y = self.max_conv(g, hy, conv)?;
                g.concat_rows(&[x, y])
            }
            Encoder::Pooling(conv) => {
                let hy = self.embed(g, &unpadded(ctx, mask))?;
                let p = attentive_pooling(g, hx, hy, conv)?;
                g.concat_rows(&[p.x, p.y])
            }
        }
    }

    /// Builds the sentence representation of `ex` in `g`.
    pub fn encode(&self, g: &mut Graph<'_>, ex: &ExampleView<'_>) -> Result<Encoded> {
        let mode = self.config.context_mode;
        if mode == ContextMode::Intra && !ex.contexts.is_empty() {
            return Err(Error::Config(format!(
                "intra-context model given an example with {} context(s)",
                ex.contexts.len()
            )));
        }
        let hx = self.embed(g, ex.text)?;
        if self.config.variant == Variant::NoContext {
            let Encoder::Vanilla(conv) = &self.encoder else {
                unreachable!("no-context uses a plain convolution")
            };
            let rep = self.max_conv(g, hx, conv)?;
            return Ok(Encoded {
                rep,
                attention: Vec::new(),
            });
        }
        let mut attention = Vec::new();
        let mut x_conv = None;
        let rep = match mode {
            ContextMode::Intra => return self.encode_intra(g, hx, ex.text),
            ContextMode::Single => match ex.contexts.as_slice() {
                [] => return Err(Error::EmptyContext("single-context example has no context".into())),
                [(ids, mask)] => self.encode_pair(g, hx, ids, mask, 0, &mut x_conv, &mut attention)?,
                more => {
                    return Err(Error::Config(format!(
                        "single-context model given {} contexts",
                        more.len()
                    )))
                }
            },
            ContextMode::MultiWise => {
                if ex.contexts.is_empty() {
                    return Err(Error::EmptyContext("multi-context example has no contexts".into()));
                }
                let mut reps = Vec::with_capacity(ex.contexts.len());
                for (k, (ids, mask)) in ex.contexts.iter().enumerate() {
                    reps.push(self.encode_pair(g, hx, ids, mask, k, &mut x_conv, &mut attention)?);
                }
                g.max_of(&reps)?
            }
            ContextMode::MultiConc => {
                if ex.contexts.is_empty() {
                    return Err(Error::EmptyContext("multi-context example has no contexts".into()));
                }
                let sep = self
                    .vocab
                    .separator()
                    .ok_or_else(|| Error::Contract("vocabulary lacks the separator token".into()))?;
                let parts: Vec<Vec<usize>> = ex.contexts.iter().map(|(ids, m)| unpadded(ids, m)).collect();
                if let Some(k) = parts.iter().position(Vec::is_empty) {
                    return Err(Error::EmptyContext(format!("context {k} has no tokens")));
                }
                let joined = join_contexts(&parts, sep);
                let mask = vec![true; joined.len()];
                self.encode_pair(g, hx, &joined, &mask, 0, &mut x_conv, &mut attention)?
            }
        };
        Ok(Encoded { rep, attention })
    }

    /// Class probabilities as a `1 x K` node.
    pub fn forward(&self, g: &mut Graph<'_>, ex: &ExampleView<'_>) -> Result<Forward> {
        let encoded = self.encode(g, ex)?;
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let logits = g.matmul(w, encoded.rep)?;
        let logits = g.add_bias(logits, b)?;
        let logits = g.transpose(logits);
        let probs = g.softmax_rows(logits)?;
        Ok(Forward { probs, encoded })
    }

    /// Cross-entropy of one example; returns `(loss, probs)`.
    pub fn example_loss(&self, g: &mut Graph<'_>, ex: &ExampleView<'_>) -> Result<(NodeId, NodeId)> {
        let f = self.forward(g, ex)?;
        let loss = g.neg_log_pick(f.probs, ex.label, PROB_FLOOR)?;
        Ok((loss, f.probs))
    }

    /// Mean cross-entropy over `examples`.
    pub fn batch_loss(&self, g: &mut Graph<'_>, examples: &[EncodedExample]) -> Result<NodeId> {
        let mut losses = Vec::with_capacity(examples.len());
        for ex in examples {
            let (loss, _) = with_view(ex, |v| self.example_loss(g, v))?;
            losses.push(loss);
        }
        g.mean(&losses)
    }

    pub fn probabilities(&self, ex: &ExampleView<'_>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, ex)?;
        Ok(g.value(f.probs).data().to_vec())
    }

    pub fn predict(&self, ex: &EncodedExample) -> Result<Vec<f64>> {
        with_view(ex, |v| self.probabilities(v))
    }

    /// Unpadded attention matrices of `ex`, ordered by context then layer.
    pub fn attention_maps(&self, ex: &EncodedExample) -> Result<Vec<AttentionMap>> {
        with_view(ex, |v| {
            let mut g = Graph::new(&self.store);
            let enc = self.encode(&mut g, v)?;
            Ok(enc
                .attention
                .iter()
                .map(|r| {
                    let w = g.value(r.attended.weights).as_matrix();
                    let keep: Vec<usize> = (0..w.cols()).filter(|&j| r.mask.columns[j]).collect();
                    AttentionMap {
                        layer: r.layer,
                        context: r.context,
                        row_ids: ex.text.clone(),
                        col_ids: keep.iter().map(|&j| r.context_ids[j]).collect(),
                        weights: Tensor::from_fn(w.rows(), keep.len(), |i, k| w.get(i, keep[k])),
                    }
                })
                .collect())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

/// Exact tensor-size enumeration. The embedding table is left out unless
/// `include_embeddings`.
pub fn count_params(store: &ParamStore, include_embeddings: bool) -> ParamCount {
    let rows: Vec<ParamRow> = store
        .iter()
        .filter(|(_, name, _)| include_embeddings || *name != EMBEDDING_PARAM)
        .map(|(_, name, t)| ParamRow {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            size: t.len(),
        })
        .collect();
    let total = rows.iter().map(|r| r.size).sum();
    ParamCount { rows, total }
}

/// Entries of the encoder's weight matrices: rank-2 tensors other than the
/// embedding table and the classifier head. Biases and matching vectors are
/// not counted.
pub fn encoder_weight_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(_, name, t)| *name != EMBEDDING_PARAM && !name.starts_with("head.") && t.shape().len() == 2)
        .map(|(_, _, t)| t.len())
        .sum()
}
