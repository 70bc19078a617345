//! Frozen encoder/decoder abstractions, deterministic toy stand-ins and tokenizers.
//!
//! The encoder produces per-token states that are mask-mean pooled into a
//! sentence vector. The decoder exposes its embedding matrix, hidden states
//! and logits; its reserved rows (`<foreign_emb>`, `<f0>`…) are zero. Both
//! are immutable once built: trainers bind their weights as graph constants
//! and only low-rank deltas supplied from outside can change the effective
//! projections.

pub mod bpe;
pub mod tokenizer;
pub mod transformer;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::tensor::{Bound, Graph, Matrix, ParamSet, Var};
use crate::{rng, Error, Result};
pub use tokenizer::{slot_token, CharTokenizer, Tokenizer, EOS, FOREIGN_EMB};
pub use transformer::{LowRank, NoDelta, StackConfig};

/// Vocabulary ids of the reserved marker tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedTokens {
    pub foreign_emb: usize,
    pub slots: Vec<usize>,
}

impl ReservedTokens {
    pub fn from_tokenizer(tok: &dyn Tokenizer, k: usize) -> Result<Self> {
        let id = |t: &str| {
            tok.token_id(t)
                .ok_or_else(|| Error::Config(format!("tokenizer lacks reserved token {t}")))
        };
        Ok(Self {
            foreign_emb: id(FOREIGN_EMB)?,
            slots: (0..k).map(|i| id(&slot_token(i))).collect::<Result<_>>()?,
        })
    }

    pub fn all(&self) -> Vec<usize> {
        let mut v = vec![self.foreign_emb];
        v.extend(&self.slots);
        v
    }

    pub fn contains(&self, id: usize) -> bool {
        id == self.foreign_emb || self.slots.contains(&id)
    }
}

/// Mean of the rows of `token_states` whose mask entry is nonzero.
pub fn mask_mean_pool(token_states: &Matrix, attention_mask: &[u8]) -> Result<Array1<f64>> {
    if token_states.nrows() != attention_mask.len() {
        return Err(Error::Shape(format!(
            "{} token states but mask of length {}",
            token_states.nrows(),
            attention_mask.len()
        )));
    }
    let keep: Vec<usize> = attention_mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m != 0)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySequence);
    }
    let selected = token_states.select(Axis(0), &keep);
    Ok(selected.sum_axis(Axis(0)) / keep.len() as f64)
}

/// Which decoder state serves as the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherLayer {
    /// Final block output after the closing RMSNorm.
    #[default]
    PostNorm,
    /// Final block output before the closing RMSNorm.
    PreNorm,
    /// Residual stream after block `i` (0-based).
    Block(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    pub vector: Array1<f64>,
    pub position: usize,
    pub layer: TeacherLayer,
}

/// Hidden states of every layer for one sequence.
#[derive(Clone, Debug)]
pub struct DecoderStates {
    pub layers: Vec<Matrix>,
    pub pre_norm: Matrix,
    pub hidden: Matrix,
}

impl DecoderStates {
    pub fn select(&self, layer: TeacherLayer) -> Result<&Matrix> {
        match layer {
            TeacherLayer::PostNorm => Ok(&self.hidden),
            TeacherLayer::PreNorm => Ok(&self.pre_norm),
            TeacherLayer::Block(i) => self
                .layers
                .get(i)
                .ok_or_else(|| Error::Config(format!("no decoder block {i}"))),
        }
    }
}

/// Graph handles from a decoder forward pass.
pub struct DecoderGraph {
    pub stack: transformer::StackOutput,
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    config: StackConfig,
    weights: ParamSet,
}

impl FrozenEncoder {
    pub fn new(config: StackConfig, weights: ParamSet) -> Self {
        Self { config, weights }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.dim
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    /// Per-token hidden states, `seq × hidden_dim`. Masked positions are
    /// excluded as attention keys.
    pub fn encode(&self, token_ids: &[usize], attention_mask: &[u8]) -> Result<Matrix> {
        if token_ids.len() != attention_mask.len() {
            return Err(Error::Shape("token ids and mask differ in length".into()));
        }
        if token_ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(bad) = token_ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside encoder vocabulary"
            )));
        }
        let mask: Vec<bool> = attention_mask.iter().map(|m| *m != 0).collect();
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g, false);
        let x = g.gather_rows(w.get("embed"), token_ids);
        let out = transformer::forward(&self.config, &mut g, &w, &NoDelta, x, Some(&mask));
        Ok(g.value(out.hidden).clone())
    }

    /// Encode then mask-mean pool: the sentence vector `z_F`.
    pub fn sentence_vector(&self, token_ids: &[usize]) -> Result<Array1<f64>> {
        let mask = vec![1u8; token_ids.len()];
        let states = self.encode(token_ids, &mask)?;
        mask_mean_pool(&states, &mask)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "encoder",
            serde_json::json!({ "config": self.config }),
            self.weights.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "encoder" {
            return Err(Error::Checkpoint(format!(
                "expected encoder, found {}",
                ck.kind
            )));
        }
        Ok(Self::new(ck.meta_field("config")?, ck.params.clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoder {
    config: StackConfig,
    weights: ParamSet,
    reserved: ReservedTokens,
}

impl FrozenDecoder {
    pub fn new(config: StackConfig, weights: ParamSet, reserved: ReservedTokens) -> Self {
        Self {
            config,
            weights,
            reserved,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn reserved(&self) -> &ReservedTokens {
        &self.reserved
    }

    pub fn embedding_matrix(&self) -> &Matrix {
        self.weights.get("embed")
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    /// Base embedding rows for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        if let Some(bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside decoder vocabulary"
            )));
        }
        Ok(self.embedding_matrix().select(Axis(0), ids))
    }

    /// Binds base weights as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.weights.bind(g, false)
    }

    /// Forward over embedding rows already in the graph, with optional deltas.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        w: &Bound,
        delta: &dyn LowRank,
        rows: Var,
    ) -> DecoderGraph {
        let stack = transformer::forward(&self.config, g, w, delta, rows, None);
        let logits = g.matmul(stack.hidden, w.get("lm_head"));
        DecoderGraph { stack, logits }
    }

    fn check_rows(&self, rows: &Matrix) -> Result<()> {
        if rows.ncols() != self.config.dim || rows.nrows() == 0 {
            return Err(Error::Shape(format!(
                "expected n × {} embedding rows, got {:?}",
                self.config.dim,
                rows.dim()
            )));
        }
        Ok(())
    }

    pub fn forward_hidden(&self, embedding_rows: &Matrix) -> Result<DecoderStates> {
        self.check_rows(embedding_rows)?;
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let x = g.constant(embedding_rows.clone());
        let out = transformer::forward(&self.config, &mut g, &w, &NoDelta, x, None);
        Ok(DecoderStates {
            layers: out.layers.iter().map(|v| g.value(*v).clone()).collect(),
            pre_norm: g.value(out.pre_norm).clone(),
            hidden: g.value(out.hidden).clone(),
        })
    }

    /// Next-token logits, `seq × vocab`; equals `forward_hidden(..).hidden · lm_head`.
    pub fn forward_logits(&self, embedding_rows: &Matrix) -> Result<Matrix> {
        let states = self.forward_hidden(embedding_rows)?;
        Ok(states.hidden.dot(self.weights.get("lm_head")))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "decoder",
            serde_json::json!({ "config": self.config, "reserved": self.reserved }),
            self.weights.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "decoder" {
            return Err(Error::Checkpoint(format!(
                "expected decoder, found {}",
                ck.kind
            )));
        }
        Ok(Self::new(
            ck.meta_field("config")?,
            ck.params.clone(),
            ck.meta_field("reserved")?,
        ))
    }
}

/// Decoder state at the last occurrence of `reserved_id` in `prompt_ids`.
pub fn extract_teacher(
    decoder: &FrozenDecoder,
    prompt_ids: &[usize],
    reserved_id: usize,
) -> Result<TeacherTarget> {
    extract_teacher_at(decoder, prompt_ids, reserved_id, TeacherLayer::default())
}

pub fn extract_teacher_at(
    decoder: &FrozenDecoder,
    prompt_ids: &[usize],
    reserved_id: usize,
    layer: TeacherLayer,
) -> Result<TeacherTarget> {
    if !decoder.reserved().contains(reserved_id) {
        return Err(Error::Config(format!(
            "token {reserved_id} is not a reserved token"
        )));
    }
    let position = prompt_ids
        .iter()
        .rposition(|&t| t == reserved_id)
        .ok_or(Error::ReservedPositionNotFound)?;
    // Causal attention: tokens after the marker cannot affect its state.
    let rows = decoder.embed(&prompt_ids[..=position])?;
    let states = decoder.forward_hidden(&rows)?;
    let vector = states.select(layer)?.row(position).to_owned();
    Ok(TeacherTarget {
        vector,
        position,
        layer,
    })
}

/// Median row L2 norm of the embedding matrix, skipping reserved rows.
/// Even counts average the two middle values.
pub fn median_embedding_norm(decoder: &FrozenDecoder) -> f64 {
    let reserved = decoder.reserved().all();
    let norms: Vec<f64> = decoder
        .embedding_matrix()
        .outer_iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(i))
        .map(|(_, r)| r.dot(&r).sqrt())
        .collect();
    median(&norms)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub encoder_dim: usize,
    pub decoder_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Padded vocabulary size; `None` uses exactly what the tokenizer needs.
    pub vocab_size: Option<usize>,
    pub mlp_ratio: usize,
    /// Number of `<fk>` slot tokens reserved in the decoder vocabulary.
    pub slots: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            encoder_dim: 32,
            decoder_dim: 64,
            layers: 2,
            heads: 4,
            vocab_size: None,
            mlp_ratio: 4,
            slots: 8,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("heads, layers and mlp_ratio must be positive".into());
        }
        for (name, d) in [
            ("encoder_dim", self.encoder_dim),
            ("decoder_dim", self.decoder_dim),
        ] {
            if d == 0 || d % self.heads != 0 {
                return bad(format!(
                    "{name}={d} must be a positive multiple of heads={}",
                    self.heads
                ));
            }
            if (d / self.heads) % 2 != 0 {
                return bad(format!("{name}/heads must be even for rotary positions"));
            }
        }
        Ok(())
    }
}

/// Toy stand-ins: models plus the tokenizers each side reads.
#[derive(Clone, Debug)]
pub struct ToyModels {
    pub encoder: FrozenEncoder,
    pub decoder: FrozenDecoder,
    /// Decoder tokenizer: ASCII characters, foreign script via byte fallback.
    pub tokenizer: CharTokenizer,
    /// Encoder tokenizer: ASCII plus the foreign script as whole characters.
    pub encoder_tokenizer: CharTokenizer,
}

pub fn decoder_tokenizer(slots: usize) -> CharTokenizer {
    CharTokenizer::new(&CharTokenizer::ascii_alphabet(), slots)
}

pub fn encoder_tokenizer(slots: usize) -> CharTokenizer {
    let alphabet = CharTokenizer::ascii_alphabet() + &crate::data::foreign_alphabet();
    CharTokenizer::new(&alphabet, slots)
}

pub fn build_toy_models(config: &ToyModelConfig) -> Result<ToyModels> {
    config.validate()?;
    let tokenizer = decoder_tokenizer(config.slots);
    let encoder_tokenizer = encoder_tokenizer(config.slots);
    let vocab = |needed: usize| match config.vocab_size {
        Some(v) if v < needed => Err(Error::Config(format!(
            "vocab_size {v} smaller than the {needed} tokens the tokenizer needs"
        ))),
        Some(v) => Ok(v),
        None => Ok(needed),
    };
    let enc_cfg = StackConfig {
        dim: config.encoder_dim,
        layers: config.layers,
        heads: config.heads,
        mlp_hidden: config.encoder_dim * config.mlp_ratio,
        vocab_size: vocab(encoder_tokenizer.vocab_size())?,
        causal: false,
        lm_head: false,
    };
    let dec_cfg = StackConfig {
        dim: config.decoder_dim,
        layers: config.layers,
        heads: config.heads,
        mlp_hidden: config.decoder_dim * config.mlp_ratio,
        vocab_size: vocab(tokenizer.vocab_size())?,
        causal: true,
        lm_head: true,
    };
    let reserved = ReservedTokens::from_tokenizer(&tokenizer, config.slots)?;
    let enc_w =
        transformer::init_weights(&enc_cfg, &[], &mut rng::stream(config.seed, "toy/encoder"));
    let dec_w = transformer::init_weights(
        &dec_cfg,
        &reserved.all(),
        &mut rng::stream(config.seed, "toy/decoder"),
    );
    Ok(ToyModels {
        encoder: FrozenEncoder::new(enc_cfg, enc_w),
        decoder: FrozenDecoder::new(dec_cfg, dec_w, reserved),
        tokenizer,
        encoder_tokenizer,
    })
}
