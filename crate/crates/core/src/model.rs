//! The scoring model: embeddings, shared encoder, cross-attention,
//! keyword gating, and the bilinear head, composable into any of the six
//! ablation variants, plus the checkpoint format.
//!
//! Scoring builds a fresh differentiation graph per batch (or per
//! evaluation group); parameters enter the graph once and every example
//! in the batch shares them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng as _};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::attend;
use crate::autodiff::{AdError, Graph, NodeId};
use crate::corpus::{CorpusError, KnowledgeBase, Triple, Vocabulary};
use crate::encoders::{encode, encode_bi, EncodeError, EncodedSequence, GruNodes, GruParams};
use crate::knowledge::{
    describe, fuse, fuse_literal, gate_coefficients, simple_add_fuse, DescribeCache, GateNodes,
};
use crate::matrix::Matrix;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error(
        "unknown variant {0:?}; valid names: DE-GRU, DE-biGRU, A-DE-GRU, \
         A-DE-biGRU, AK+-DE-biGRU, AK-DE-biGRU"
    )]
    UnknownVariant(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gru,
    BiGru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    None,
    SimpleAdd,
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub use_attention: bool,
    pub knowledge: KnowledgeMode,
    /// Word-embedding dimension D.
    pub embed_dim: usize,
    /// Encoder hidden size H per direction.
    pub hidden: usize,
    pub max_context_tokens: usize,
    pub max_response_tokens: usize,
    /// Optional GRU pre-activation biases (off: the update equations
    /// carry none).
    pub gru_biases: bool,
    /// Apply the gate's convex combination to non-keywords as well,
    /// attenuating them by `1 - beta`.
    pub literal_eq9: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::BiGru,
            use_attention: true,
            knowledge: KnowledgeMode::Gated,
            embed_dim: 200,
            hidden: 300,
            max_context_tokens: 320,
            max_response_tokens: 160,
            gru_biases: false,
            literal_eq9: false,
        }
    }
}

impl ModelConfig {
    /// Dimension of encoder outputs: H, or 2H for the bidirectional kind.
    pub fn encoder_dim(&self) -> usize {
        match self.encoder {
            EncoderKind::Gru => self.hidden,
            EncoderKind::BiGru => 2 * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.max_context_tokens == 0 || self.max_response_tokens == 0 {
            return Err(ModelError::Config("length limits must be positive".into()));
        }
        if self.knowledge != KnowledgeMode::None {
            if !self.use_attention {
                return Err(ModelError::Config(
                    "knowledge variants build on the attention variant".into(),
                ));
            }
            if !self.embed_dim.is_multiple_of(2) {
                return Err(ModelError::Config(
                    "knowledge variants need an even embedding dimension \
                     (the description encoder runs at embed_dim/2 per direction)"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// The six ablation variants, in reporting order.
pub const VARIANT_NAMES: [&str; 6] = [
    "DE-GRU",
    "DE-biGRU",
    "A-DE-GRU",
    "A-DE-biGRU",
    "AK+-DE-biGRU",
    "AK-DE-biGRU",
];

/// Config for a named variant. Dimensions and limits are the defaults;
/// callers override them afterwards.
pub fn build_variant(name: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    // The simple-addition variant is usually typeset with a subscript
    // plus; accept that spelling too.
    let canonical = name.replace('\u{208a}', "+");
    match canonical.as_str() {
        "DE-GRU" => {
            config.encoder = EncoderKind::Gru;
            config.use_attention = false;
            config.knowledge = KnowledgeMode::None;
        }
        "DE-biGRU" => {
            config.encoder = EncoderKind::BiGru;
            config.use_attention = false;
            config.knowledge = KnowledgeMode::None;
        }
        "A-DE-GRU" => {
            config.encoder = EncoderKind::Gru;
            config.use_attention = true;
            config.knowledge = KnowledgeMode::None;
        }
        "A-DE-biGRU" => {
            config.encoder = EncoderKind::BiGru;
            config.use_attention = true;
            config.knowledge = KnowledgeMode::None;
        }
        "AK+-DE-biGRU" => {
            config.encoder = EncoderKind::BiGru;
            config.use_attention = true;
            config.knowledge = KnowledgeMode::SimpleAdd;
        }
        "AK-DE-biGRU" => {
            config.encoder = EncoderKind::BiGru;
            config.use_attention = true;
            config.knowledge = KnowledgeMode::Gated;
        }
        _ => return Err(ModelError::UnknownVariant(name.to_string())),
    }
    Ok(config)
}

/// Name of the variant a config corresponds to, if it is one of the six.
pub fn variant_name(config: &ModelConfig) -> Option<&'static str> {
    let key = (config.encoder, config.use_attention, config.knowledge);
    Some(match key {
        (EncoderKind::Gru, false, KnowledgeMode::None) => "DE-GRU",
        (EncoderKind::BiGru, false, KnowledgeMode::None) => "DE-biGRU",
        (EncoderKind::Gru, true, KnowledgeMode::None) => "A-DE-GRU",
        (EncoderKind::BiGru, true, KnowledgeMode::None) => "A-DE-biGRU",
        (EncoderKind::BiGru, true, KnowledgeMode::SimpleAdd) => "AK+-DE-biGRU",
        (EncoderKind::BiGru, true, KnowledgeMode::Gated) => "AK-DE-biGRU",
        _ => return None,
    })
}

/// Bilinear matrices producing the two attention logit streams.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_c: Matrix,
    pub w_a: Matrix,
}

/// Description-encoder parameters plus, for the gated variant, the two
/// gate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeParams {
    pub desc_fwd: GruParams,
    pub desc_bwd: GruParams,
    pub gate: Option<GatePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatePair {
    /// Maps the context embedding (dim E) to gate logits (dim D).
    pub u: Matrix,
    /// Maps the word embedding (dim D) to gate logits (dim D).
    pub v: Matrix,
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub enc_fwd: GruParams,
    pub enc_bwd: Option<GruParams>,
    pub attention: Option<AttentionParams>,
    pub knowledge: Option<KnowledgeParams>,
    pub bilinear: Matrix,
    pub bias: Matrix,
}

impl ModelParams {
    /// Fresh parameters: embeddings uniform in +-0.1 (or the provided
    /// pre-trained table), weight matrices uniform in +-1/sqrt(fan-in),
    /// bias zero.
    pub fn init<R: Rng>(
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut R,
        pretrained: Option<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden;
        let e = config.encoder_dim();
        let embedding = match pretrained {
            Some(table) => {
                if table.shape() != (vocab_size, d) {
                    return Err(ModelError::Config(format!(
                        "embedding table is {:?}, expected ({vocab_size}, {d})",
                        table.shape()
                    )));
                }
                table
            }
            None => {
                let mut table = Matrix::uniform(rng, vocab_size, d, -0.1, 0.1);
                table
                    .row_mut(Vocabulary::PAD_ID as usize)
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                table
            }
        };
        let eb = 1.0 / (e as f64).sqrt();
        let db = 1.0 / (d as f64).sqrt();
        Ok(ModelParams {
            embedding,
            enc_fwd: GruParams::init(rng, h, d, config.gru_biases),
            enc_bwd: matches!(config.encoder, EncoderKind::BiGru)
                .then(|| GruParams::init(rng, h, d, config.gru_biases)),
            attention: config.use_attention.then(|| AttentionParams {
                w_c: Matrix::uniform(rng, e, e, -eb, eb),
                w_a: Matrix::uniform(rng, e, e, -eb, eb),
            }),
            knowledge: (config.knowledge != KnowledgeMode::None).then(|| KnowledgeParams {
                desc_fwd: GruParams::init(rng, d / 2, d, config.gru_biases),
                desc_bwd: GruParams::init(rng, d / 2, d, config.gru_biases),
                gate: (config.knowledge == KnowledgeMode::Gated).then(|| GatePair {
                    u: Matrix::uniform(rng, e, d, -eb, eb),
                    v: Matrix::uniform(rng, d, d, -db, db),
                }),
            }),
            bilinear: Matrix::uniform(rng, e, e, -eb, eb),
            bias: Matrix::zeros(1, 1),
        })
    }

    /// Named tensors in a fixed order; the optimizer, the gradient
    /// extraction, and the checkpoint all iterate this order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        out.push(("embedding".to_string(), &self.embedding));
        gru_tensors("enc_fwd", &self.enc_fwd, &mut out);
        if let Some(bwd) = &self.enc_bwd {
            gru_tensors("enc_bwd", bwd, &mut out);
        }
        if let Some(a) = &self.attention {
            out.push(("attn.w_c".to_string(), &a.w_c));
            out.push(("attn.w_a".to_string(), &a.w_a));
        }
        if let Some(k) = &self.knowledge {
            gru_tensors("know.desc_fwd", &k.desc_fwd, &mut out);
            gru_tensors("know.desc_bwd", &k.desc_bwd, &mut out);
            if let Some(gate) = &k.gate {
                out.push(("know.gate.u".to_string(), &gate.u));
                out.push(("know.gate.v".to_string(), &gate.v));
            }
        }
        out.push(("bilinear_m".to_string(), &self.bilinear));
        out.push(("bias".to_string(), &self.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        out.push(("embedding".to_string(), &mut self.embedding));
        gru_tensors_mut("enc_fwd", &mut self.enc_fwd, &mut out);
        if let Some(bwd) = &mut self.enc_bwd {
            gru_tensors_mut("enc_bwd", bwd, &mut out);
        }
        if let Some(a) = &mut self.attention {
            out.push(("attn.w_c".to_string(), &mut a.w_c));
            out.push(("attn.w_a".to_string(), &mut a.w_a));
        }
        if let Some(k) = &mut self.knowledge {
            gru_tensors_mut("know.desc_fwd", &mut k.desc_fwd, &mut out);
            gru_tensors_mut("know.desc_bwd", &mut k.desc_bwd, &mut out);
            if let Some(gate) = &mut k.gate {
                out.push(("know.gate.u".to_string(), &mut gate.u));
                out.push(("know.gate.v".to_string(), &mut gate.v));
            }
        }
        out.push(("bilinear_m".to_string(), &mut self.bilinear));
        out.push(("bias".to_string(), &mut self.bias));
        out
    }
}

const GRU_TENSOR_NAMES: [&str; 6] = ["w_z", "u_z", "w_r", "u_r", "w_h", "u_h"];
const GRU_BIAS_NAMES: [&str; 3] = ["b_z", "b_r", "b_h"];

fn gru_tensors<'a>(prefix: &str, p: &'a GruParams, out: &mut Vec<(String, &'a Matrix)>) {
    let mats = [&p.w_z, &p.u_z, &p.w_r, &p.u_r, &p.w_h, &p.u_h];
    for (name, m) in GRU_TENSOR_NAMES.iter().zip(mats) {
        out.push((format!("{prefix}.{name}"), m));
    }
    if let Some(biases) = &p.biases {
        for (name, m) in GRU_BIAS_NAMES.iter().zip(biases.iter()) {
            out.push((format!("{prefix}.{name}"), m));
        }
    }
}

fn gru_tensors_mut<'a>(
    prefix: &str,
    p: &'a mut GruParams,
    out: &mut Vec<(String, &'a mut Matrix)>,
) {
    let mats = [
        &mut p.w_z, &mut p.u_z, &mut p.w_r, &mut p.u_r, &mut p.w_h, &mut p.u_h,
    ];
    for (name, m) in GRU_TENSOR_NAMES.iter().zip(mats) {
        out.push((format!("{prefix}.{name}"), m));
    }
    if let Some(biases) = &mut p.biases {
        for (name, m) in GRU_BIAS_NAMES.iter().zip(biases.iter_mut()) {
            out.push((format!("{prefix}.{name}"), m));
        }
    }
}

/// Graph handles for one insertion of the parameters.
struct ParamNodes {
    embedding: NodeId,
    enc_fwd: GruNodes,
    enc_bwd: Option<GruNodes>,
    w_c: Option<NodeId>,
    w_a: Option<NodeId>,
    desc_fwd: Option<GruNodes>,
    desc_bwd: Option<GruNodes>,
    gate: Option<GateNodes>,
    bilinear: NodeId,
    bias: NodeId,
}

impl ParamNodes {
    fn insert(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let embedding = g.leaf(params.embedding.clone(), trainable);
        let enc_fwd = params.enc_fwd.insert(g, trainable);
        let enc_bwd = params.enc_bwd.as_ref().map(|p| p.insert(g, trainable));
        let (w_c, w_a) = match &params.attention {
            Some(a) => (
                Some(g.leaf(a.w_c.clone(), trainable)),
                Some(g.leaf(a.w_a.clone(), trainable)),
            ),
            None => (None, None),
        };
        let (desc_fwd, desc_bwd, gate) = match &params.knowledge {
            Some(k) => {
                let fwd = k.desc_fwd.insert(g, trainable);
                let bwd = k.desc_bwd.insert(g, trainable);
                let gate = k.gate.as_ref().map(|pair| {
                    let u = g.leaf(pair.u.clone(), trainable);
                    let v = g.leaf(pair.v.clone(), trainable);
                    GateNodes::new(g, u, v)
                });
                (Some(fwd), Some(bwd), gate)
            }
            None => (None, None, None),
        };
        let bilinear = g.leaf(params.bilinear.clone(), trainable);
        let bias = g.leaf(params.bias.clone(), trainable);
        ParamNodes {
            embedding,
            enc_fwd,
            enc_bwd,
            w_c,
            w_a,
            desc_fwd,
            desc_bwd,
            gate,
            bilinear,
            bias,
        }
    }

    /// Gradients in the same order as [`ModelParams::tensors`].
    fn grads(&self, g: &Graph, params: &ModelParams) -> Vec<(String, Matrix)> {
        let mut ids: Vec<(String, NodeId)> = Vec::new();
        ids.push(("embedding".into(), self.embedding));
        gru_node_ids("enc_fwd", &self.enc_fwd, &mut ids);
        if let Some(bwd) = &self.enc_bwd {
            gru_node_ids("enc_bwd", bwd, &mut ids);
        }
        if let (Some(w_c), Some(w_a)) = (self.w_c, self.w_a) {
            ids.push(("attn.w_c".into(), w_c));
            ids.push(("attn.w_a".into(), w_a));
        }
        if let (Some(fwd), Some(bwd)) = (&self.desc_fwd, &self.desc_bwd) {
            gru_node_ids("know.desc_fwd", fwd, &mut ids);
            gru_node_ids("know.desc_bwd", bwd, &mut ids);
            if let Some(gate) = &self.gate {
                ids.push(("know.gate.u".into(), gate.u));
                ids.push(("know.gate.v".into(), gate.v));
            }
        }
        ids.push(("bilinear_m".into(), self.bilinear));
        ids.push(("bias".into(), self.bias));

        debug_assert_eq!(
            ids.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
            params
                .tensors()
                .iter()
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>(),
            "gradient order must mirror the tensor order"
        );
        ids.into_iter()
            .map(|(name, id)| (name, g.grad(id).clone()))
            .collect()
    }
}

fn gru_node_ids(prefix: &str, p: &GruNodes, out: &mut Vec<(String, NodeId)>) {
    let ids = [p.w_z, p.u_z, p.w_r, p.u_r, p.w_h, p.u_h];
    for (name, id) in GRU_TENSOR_NAMES.iter().zip(ids) {
        out.push((format!("{prefix}.{name}"), id));
    }
    if let Some(biases) = &p.biases {
        for (name, id) in GRU_BIAS_NAMES.iter().zip(biases.iter()) {
            out.push((format!("{prefix}.{name}"), *id));
        }
    }
}

/// Gate vectors per response token, `None` where the gate does not apply.
type GateTrace = Vec<Option<Vec<f64>>>;

/// Per-example forward diagnostics: attention weights over context and
/// response steps (empty when the variant has no attention) and the gate
/// vector per response token (`None` where the mechanism does not apply).
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub alpha_context: Vec<f64>,
    pub alpha_response: Vec<f64>,
    pub beta: GateTrace,
}

/// One scored (context, response) pair.
#[derive(Debug, Clone)]
pub struct Scored {
    /// Graph handle of the probability, for loss building.
    pub prob: NodeId,
    /// The probability value.
    pub probability: f64,
    pub diagnostics: Diagnostics,
}

/// Forward-pass builder. One `Scorer` owns one graph: parameters enter
/// once and are shared by every pair scored through it. Create a new one
/// after any parameter update.
pub struct Scorer<'a> {
    g: Graph,
    nodes: ParamNodes,
    params: &'a ModelParams,
    config: &'a ModelConfig,
    kb: &'a KnowledgeBase,
    cache: DescribeCache,
}

impl<'a> Scorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        config: &'a ModelConfig,
        kb: &'a KnowledgeBase,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut g = Graph::new();
        let nodes = ParamNodes::insert(&mut g, params, trainable);
        Ok(Scorer {
            g,
            nodes,
            params,
            config,
            kb,
            cache: DescribeCache::new(),
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.g
    }

    fn embed_tokens(&mut self, ids: &[u32]) -> Result<Vec<NodeId>> {
        ids.iter()
            .map(|&id| {
                self.g
                    .embed_row(self.nodes.embedding, id as usize)
                    .map_err(Into::into)
            })
            .collect()
    }

    fn encode_inputs(&mut self, inputs: &[NodeId]) -> Result<EncodedSequence> {
        let mask = vec![true; inputs.len()];
        let enc = match (self.config.encoder, &self.nodes.enc_bwd) {
            (EncoderKind::Gru, _) => encode(&mut self.g, &self.nodes.enc_fwd, inputs, &mask)?,
            (EncoderKind::BiGru, Some(bwd)) => {
                let bwd = *bwd;
                encode_bi(&mut self.g, &self.nodes.enc_fwd, &bwd, inputs, &mask)?
            }
            (EncoderKind::BiGru, None) => {
                return Err(ModelError::Config(
                    "bidirectional config without backward encoder parameters".into(),
                ))
            }
        };
        Ok(enc)
    }

    fn encode_context(&mut self, context: &[Vec<u32>]) -> Result<EncodedSequence> {
        let flat = crate::corpus::flatten_utterances(context);
        if flat.is_empty() {
            return Err(ModelError::EmptyInput("context"));
        }
        let inputs = self.embed_tokens(&flat)?;
        self.encode_inputs(&inputs)
    }

    /// Response token embeddings after description fusion, plus the per
    /// token gate diagnostics.
    fn response_inputs(
        &mut self,
        response: &[u32],
        context_final: NodeId,
    ) -> Result<(Vec<NodeId>, GateTrace)> {
        if response.is_empty() {
            return Err(ModelError::EmptyInput("response"));
        }
        let mut inputs = Vec::with_capacity(response.len());
        let mut betas = Vec::with_capacity(response.len());
        for &id in response {
            let w_t = self.g.embed_row(self.nodes.embedding, id as usize)?;
            let (x_t, beta_diag) = match self.config.knowledge {
                KnowledgeMode::None => (w_t, None),
                KnowledgeMode::SimpleAdd => {
                    let d = self.describe_word(id)?;
                    (simple_add_fuse(&mut self.g, &d, w_t)?, None)
                }
                KnowledgeMode::Gated => {
                    let d = self.describe_word(id)?;
                    let gate = self.gate_nodes()?;
                    if d.is_keyword {
                        let beta = gate_coefficients(&mut self.g, &gate, context_final, w_t)?;
                        let fused = fuse(&mut self.g, beta, &d, w_t)?;
                        (fused, Some(self.g.value(beta).data().to_vec()))
                    } else if self.config.literal_eq9 {
                        let beta = gate_coefficients(&mut self.g, &gate, context_final, w_t)?;
                        let fused = fuse_literal(&mut self.g, beta, &d, w_t)?;
                        (fused, Some(self.g.value(beta).data().to_vec()))
                    } else {
                        (w_t, None)
                    }
                }
            };
            inputs.push(x_t);
            betas.push(beta_diag);
        }
        Ok((inputs, betas))
    }

    fn describe_word(&mut self, id: u32) -> Result<crate::knowledge::DescriptionEmbedding> {
        let (fwd, bwd) = match (&self.nodes.desc_fwd, &self.nodes.desc_bwd) {
            (Some(f), Some(b)) => (*f, *b),
            _ => {
                return Err(ModelError::Config(
                    "knowledge mode without description encoder parameters".into(),
                ))
            }
        };
        describe(
            &mut self.g,
            &mut self.cache,
            id,
            self.kb,
            &fwd,
            &bwd,
            self.nodes.embedding,
            self.config.embed_dim,
        )
        .map_err(Into::into)
    }

    fn gate_nodes(&self) -> Result<GateNodes> {
        self.nodes.gate.ok_or_else(|| {
            ModelError::Config("gated knowledge mode without gate parameters".into())
        })
    }

    /// Score one candidate against an already-encoded context.
    fn score_against(&mut self, context_enc: &EncodedSequence, response: &[u32]) -> Result<Scored> {
        let (resp_inputs, beta) = self.response_inputs(response, context_enc.final_state)?;
        let resp_enc = self.encode_inputs(&resp_inputs)?;

        let (hc, hr, alpha_context, alpha_response) = if self.config.use_attention {
            let (w_c, w_a) = match (self.nodes.w_c, self.nodes.w_a) {
                (Some(c), Some(a)) => (c, a),
                _ => {
                    return Err(ModelError::Config(
                        "attention config without attention parameters".into(),
                    ))
                }
            };
            let ctx_att = attend(&mut self.g, context_enc, resp_enc.final_state, w_c)?;
            let resp_att = attend(&mut self.g, &resp_enc, context_enc.final_state, w_a)?;
            (
                ctx_att.vector,
                resp_att.vector,
                self.g.value(ctx_att.weights).data().to_vec(),
                self.g.value(resp_att.weights).data().to_vec(),
            )
        } else {
            (
                context_enc.final_state,
                resp_enc.final_state,
                Vec::new(),
                Vec::new(),
            )
        };

        let prob = bilinear_head(&mut self.g, self.nodes.bilinear, self.nodes.bias, hc, hr)?;
        Ok(Scored {
            prob,
            probability: self.g.value(prob).scalar(),
            diagnostics: Diagnostics {
                alpha_context,
                alpha_response,
                beta,
            },
        })
    }

    /// Probability that `response` answers `context`, with diagnostics.
    pub fn score_pair(&mut self, context: &[Vec<u32>], response: &[u32]) -> Result<Scored> {
        let context_enc = self.encode_context(context)?;
        self.score_against(&context_enc, response)
    }

    /// Score several candidates against one context, encoding the context
    /// once.
    pub fn score_group(
        &mut self,
        context: &[Vec<u32>],
        candidates: &[Vec<u32>],
    ) -> Result<Vec<Scored>> {
        let context_enc = self.encode_context(context)?;
        candidates
            .iter()
            .map(|cand| self.score_against(&context_enc, cand))
            .collect()
    }

    /// Mean binary cross entropy over a batch of triples; returns the
    /// loss node and its value.
    pub fn batch_loss(&mut self, batch: &[Triple]) -> Result<(NodeId, f64)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyInput("batch"));
        }
        let mut probs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for triple in batch {
            let scored = self.score_pair(&triple.context, &triple.response)?;
            probs.push(scored.prob);
            labels.push(if triple.label { 1.0 } else { 0.0 });
        }
        let loss = bce_loss(&mut self.g, &probs, &labels)?;
        Ok((loss, self.g.value(loss).scalar()))
    }

    /// Backpropagate from a scalar root (typically the batch loss).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.g.backward(root).map_err(Into::into)
    }

    /// Parameter gradients, aligned with [`ModelParams::tensors`].
    pub fn grads(&self) -> Vec<(String, Matrix)> {
        self.nodes.grads(&self.g, self.params)
    }
}

/// `sigma(hc' M hr + b)`.
pub fn bilinear_head(
    g: &mut Graph,
    m: NodeId,
    bias: NodeId,
    hc: NodeId,
    hr: NodeId,
) -> Result<NodeId> {
    let mhr = g.matmul(m, hr)?;
    let hc_t = g.transpose(hc);
    let dot = g.matmul(hc_t, mhr)?;
    let with_bias = g.add(dot, bias)?;
    g.sigmoid(with_bias).map_err(Into::into)
}

/// Mean binary cross entropy of scored probabilities against labels.
pub fn bce_loss(g: &mut Graph, probs: &[NodeId], labels: &[f64]) -> Result<NodeId> {
    if probs.is_empty() {
        return Err(ModelError::EmptyInput("batch"));
    }
    let row = g.concat_cols(probs)?; // 1 x N
    let column = g.transpose(row); // N x 1
    g.bce_loss(column, labels).map_err(Into::into)
}

// ── Checkpoint ───────────────────────────────────────────────────────

/// On-disk model archive: config, vocabulary, and every named tensor.
/// JSON keyed by tensor name; loading validates shapes against the
/// config and the vocabulary against its recorded hash.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub vocab_hash: u64,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn build(config: &ModelConfig, vocab: &Vocabulary, params: &ModelParams) -> Self {
        Checkpoint {
            config: config.clone(),
            vocab: vocab.tokens().to_vec(),
            vocab_hash: vocab.hash64(),
            tensors: params
                .tensors()
                .into_iter()
                .map(|(name, m)| (name, m.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, body).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&body).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Reassemble config, vocabulary, and parameters, validating every
    /// tensor's presence and shape.
    pub fn into_parts(self) -> Result<(ModelConfig, Vocabulary, ModelParams)> {
        let bad = |msg: String| ModelError::Checkpoint {
            path: "<archive>".into(),
            msg,
        };
        self.config.validate()?;
        let vocab = Vocabulary::from_tokens(self.vocab)?;
        if vocab.hash64() != self.vocab_hash {
            return Err(bad("vocabulary does not match its recorded hash".into()));
        }

        // Build a skeleton with the right structure, then fill it from
        // the archive, enforcing shape agreement.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(&self.config, vocab.len(), &mut rng, None)?;
        let mut tensors = self.tensors;
        for (name, slot) in params.tensors_mut() {
            let Some(loaded) = tensors.remove(&name) else {
                return Err(bad(format!("missing tensor {name:?}")));
            };
            if loaded.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {name:?} is {:?}, expected {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            *slot = loaded;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra:?}")));
        }
        Ok((self.config, vocab, params))
    }
}
