//! Transformer encoder with masked-token and next-sentence heads.
//!
//! Blocks are post-norm: `x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`. The
//! masked-token output layer reuses the token embedding table.
//!
//! A batch is a list of sequences that are stacked row-wise, so every dense
//! layer is a single matrix product. Attention runs per sequence and head.
//! Sequences may be passed without their padding; rows past
//! `attention_length` never influence real rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Params, Real, Tensor, Var};
use crate::pretrain_data::PretrainInstance;

pub const INIT_STD: f64 = 0.02;
/// Truncation point of the initializer, in standard deviations.
pub const INIT_TRUNCATION: f64 = 2.0;
/// Standard deviation of a standard normal truncated to `[-2, 2]`.
pub const TRUNCATED_UNIT_STD: f64 = 0.879_625_661_034_24;

#[derive(Debug, Error, PartialEq)]
pub enum BertError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab_size}")]
    InvalidToken { position: usize, id: u32, vocab_size: usize },
    #[error("sequence of {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub type_vocab: usize,
}

impl BertConfig {
    /// Two layers of width 64; trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 2,
            intermediate: 256,
            max_positions: 128,
            vocab_size,
            dropout: 0.1,
            type_vocab: 2,
        }
    }

    /// The twelve-layer base size.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            max_positions: 512,
            vocab_size,
            dropout: 0.1,
            type_vocab: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), BertError> {
        let dims = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("type_vocab", self.type_vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(BertError::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(BertError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(BertError::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Samples the initializer: a normal truncated at two standard deviations,
/// rescaled so the sampled entries have standard deviation `std`.
pub fn truncated_normal<R: rand::Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= INIT_TRUNCATION {
            return z * std / TRUNCATED_UNIT_STD;
        }
    }
}

fn dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) {
    store.insert(
        format!("{name}.weight"),
        Tensor::from_fn(&[rows, cols], |_| truncated_normal(rng, INIT_STD) as f32),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cols]));
}

fn layer_norm_params(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.gain"), Tensor::full(&[width], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[width]));
}

/// Fresh encoder and head parameters. Matrices are drawn in a fixed order
/// from one generator seeded with `seed`.
pub fn init_weights(config: &BertConfig, seed: u64) -> Result<ParamStore, BertError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let mut s = ParamStore::new();
    let mut table = |s: &mut ParamStore, name: &str, rows: usize| {
        s.insert(name, Tensor::from_fn(&[rows, h], |_| truncated_normal(&mut rng, INIT_STD) as f32));
    };
    table(&mut s, "embeddings.token", config.vocab_size);
    table(&mut s, "embeddings.position", config.max_positions);
    table(&mut s, "embeddings.segment", config.type_vocab);
    layer_norm_params(&mut s, "embeddings.ln", h);
    for l in 0..config.layers {
        for part in ["query", "key", "value", "output"] {
            dense(&mut s, &mut rng, &format!("layer.{l}.attn.{part}"), h, h);
        }
        layer_norm_params(&mut s, &format!("layer.{l}.attn.ln"), h);
        dense(&mut s, &mut rng, &format!("layer.{l}.ffn.in"), h, config.intermediate);
        dense(&mut s, &mut rng, &format!("layer.{l}.ffn.out"), config.intermediate, h);
        layer_norm_params(&mut s, &format!("layer.{l}.ffn.ln"), h);
    }
    dense(&mut s, &mut rng, "mlm.transform", h, h);
    layer_norm_params(&mut s, "mlm.ln", h);
    s.insert("mlm.output_bias", Tensor::zeros(&[config.vocab_size]));
    dense(&mut s, &mut rng, "pooler", h, h);
    dense(&mut s, &mut rng, "nsp", h, 2);
    Ok(s)
}

/// One input sequence. `ids` may be longer than `attention_length` (padding)
/// or exactly as long.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub ids: &'a [u32],
    pub segment_ids: &'a [u8],
    pub attention_length: usize,
}

impl<'a> SeqInput<'a> {
    pub fn new(ids: &'a [u32], segment_ids: &'a [u8], attention_length: usize) -> Self {
        Self {
            ids,
            segment_ids,
            attention_length,
        }
    }

    /// The instance without its padding rows.
    pub fn trimmed(instance: &'a PretrainInstance) -> Self {
        let n = instance.attention_length;
        Self::new(&instance.ids[..n], &instance.segment_ids[..n], n)
    }
}

/// Output of [`encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[total rows, H]`, sequences stacked in input order.
    pub hidden: Var,
    /// First row of each sequence.
    pub offsets: Vec<usize>,
    /// Attention probabilities `[T, T]`, indexed `[layer][sequence][head]`,
    /// when requested.
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl Encoded {
    pub fn row(&self, sequence: usize, position: usize) -> usize {
        self.offsets[sequence] + position
    }
}

fn linear<R: Real>(g: &mut Graph<R>, p: &Params, name: &str, x: Var) -> Result<Var, AutodiffError> {
    let h = g.matmul(x, p[&format!("{name}.weight")])?;
    g.add(h, p[&format!("{name}.bias")])
}

fn norm<R: Real>(g: &mut Graph<R>, p: &Params, name: &str, x: Var) -> Result<Var, AutodiffError> {
    g.layer_norm(x, p[&format!("{name}.gain")], p[&format!("{name}.bias")])
}

/// Runs the encoder. Dropout is active when `g` is in training mode.
pub fn encode<R: Real>(
    g: &mut Graph<R>,
    p: &Params,
    config: &BertConfig,
    batch: &[SeqInput],
    record_attention: bool,
) -> Result<Encoded, BertError> {
    if batch.is_empty() {
        return Err(BertError::Contract("empty batch".into()));
    }
    let mut token_ids = Vec::new();
    let mut position_ids = Vec::new();
    let mut segment_ids = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len());
    for seq in batch {
        let len = seq.ids.len();
        if len > config.max_positions {
            return Err(BertError::TooLong {
                len,
                max: config.max_positions,
            });
        }
        if seq.segment_ids.len() != len || seq.attention_length == 0 || seq.attention_length > len {
            return Err(BertError::Contract(format!(
                "sequence of {len} ids has {} segment ids and attention length {}",
                seq.segment_ids.len(),
                seq.attention_length
            )));
        }
        if let Some((position, &id)) = seq.ids.iter().enumerate().find(|(_, &id)| id as usize >= config.vocab_size) {
            return Err(BertError::InvalidToken {
                position,
                id,
                vocab_size: config.vocab_size,
            });
        }
        if let Some(&s) = seq.segment_ids.iter().find(|&&s| s as usize >= config.type_vocab) {
            return Err(BertError::Contract(format!("segment id {s} out of range")));
        }
        offsets.push(token_ids.len());
        token_ids.extend(seq.ids.iter().map(|&i| i as usize));
        position_ids.extend(0..len);
        segment_ids.extend(seq.segment_ids.iter().map(|&s| s as usize));
    }

    let tok = g.embedding_lookup(p["embeddings.token"], &token_ids)?;
    let pos = g.embedding_lookup(p["embeddings.position"], &position_ids)?;
    let seg = g.embedding_lookup(p["embeddings.segment"], &segment_ids)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let x = norm(g, p, "embeddings.ln", x)?;
    let mut x = g.dropout(x, config.dropout);

    let d = config.head_dim();
    let scale = R::c(1.0 / (d as f64).sqrt());
    let mut attention = Vec::new();
    for l in 0..config.layers {
        let q = linear(g, p, &format!("layer.{l}.attn.query"), x)?;
        let k = linear(g, p, &format!("layer.{l}.attn.key"), x)?;
        let v = linear(g, p, &format!("layer.{l}.attn.value"), x)?;
        let mut contexts = Vec::with_capacity(batch.len());
        let mut layer_probs = Vec::new();
        for (b, seq) in batch.iter().enumerate() {
            let t = seq.ids.len();
            let mut heads = Vec::with_capacity(config.heads);
            let mut seq_probs = Vec::new();
            for a in 0..config.heads {
                let qa = g.slice(q, 0, offsets[b], t)?;
                let qa = g.slice(qa, 1, a * d, d)?;
                let ka = g.slice(k, 0, offsets[b], t)?;
                let ka = g.slice(ka, 1, a * d, d)?;
                let va = g.slice(v, 0, offsets[b], t)?;
                let va = g.slice(va, 1, a * d, d)?;
                let kt = g.transpose(ka)?;
                let scores = g.matmul(qa, kt)?;
                let scores = g.scale(scores, scale);
                let probs = g.masked_softmax(scores, seq.attention_length)?;
                if record_attention {
                    seq_probs.push(probs);
                }
                let probs = g.dropout(probs, config.dropout);
                heads.push(g.matmul(probs, va)?);
            }
            if record_attention {
                layer_probs.push(seq_probs);
            }
            contexts.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        if record_attention {
            attention.push(layer_probs);
        }
        let ctx = if contexts.len() == 1 { contexts[0] } else { g.concat(&contexts, 0)? };
        let out = linear(g, p, &format!("layer.{l}.attn.output"), ctx)?;
        let out = g.dropout(out, config.dropout);
        let res = g.add(x, out)?;
        x = norm(g, p, &format!("layer.{l}.attn.ln"), res)?;

        let hdn = linear(g, p, &format!("layer.{l}.ffn.in"), x)?;
        let hdn = g.gelu(hdn);
        let out = linear(g, p, &format!("layer.{l}.ffn.out"), hdn)?;
        let out = g.dropout(out, config.dropout);
        let res = g.add(x, out)?;
        x = norm(g, p, &format!("layer.{l}.ffn.ln"), res)?;
    }
    Ok(Encoded {
        hidden: x,
        offsets,
        attention,
    })
}

/// Vocabulary logits `[rows.len(), V]` at the given hidden rows.
pub fn mlm_logits<R: Real>(g: &mut Graph<R>, p: &Params, hidden: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
    let h = g.embedding_lookup(hidden, rows)?;
    let h = linear(g, p, "mlm.transform", h)?;
    let h = g.gelu(h);
    let h = norm(g, p, "mlm.ln", h)?;
    let table = g.transpose(p["embeddings.token"])?;
    let logits = g.matmul(h, table)?;
    g.add(logits, p["mlm.output_bias"])
}

/// Pooled `[CLS]` representations `[rows.len(), H]`.
pub fn pooled<R: Real>(g: &mut Graph<R>, p: &Params, hidden: Var, cls_rows: &[usize]) -> Result<Var, AutodiffError> {
    let h = g.embedding_lookup(hidden, cls_rows)?;
    let h = linear(g, p, "pooler", h)?;
    Ok(g.tanh(h))
}

pub fn nsp_logits<R: Real>(g: &mut Graph<R>, p: &Params, hidden: Var, cls_rows: &[usize]) -> Result<Var, AutodiffError> {
    let pooled = pooled(g, p, hidden, cls_rows)?;
    linear(g, p, "nsp", pooled)
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Masked-token loss plus next-sentence loss.
    pub loss: Var,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub mlm_correct: usize,
    pub mlm_total: usize,
    pub nsp_correct: usize,
}

pub(crate) fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked-token loss averaged over all masked positions of the batch, plus
/// next-sentence loss averaged over the batch.
pub fn mlm_nsp_loss<R: Real>(
    g: &mut Graph<R>,
    p: &Params,
    config: &BertConfig,
    batch: &[PretrainInstance],
) -> Result<PretrainOutput, BertError> {
    if let Some(i) = batch.iter().position(|i| i.mlm_positions.is_empty()) {
        return Err(BertError::Contract(format!("instance {i} has no masked positions")));
    }
    let inputs: Vec<SeqInput> = batch.iter().map(SeqInput::trimmed).collect();
    let enc = encode(g, p, config, &inputs, false)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, inst) in batch.iter().enumerate() {
        for (&pos, &label) in inst.mlm_positions.iter().zip(&inst.mlm_labels) {
            if pos >= inst.attention_length {
                return Err(BertError::Contract(format!("masked position {pos} is padding")));
            }
            rows.push(enc.row(b, pos));
            labels.push(Some(label as usize));
        }
    }
    let logits = mlm_logits(g, p, enc.hidden, &rows)?;
    let mlm = g.cross_entropy(logits, &labels)?;
    let cls: Vec<usize> = (0..batch.len()).map(|b| enc.row(b, 0)).collect();
    let nsp = nsp_logits(g, p, enc.hidden, &cls)?;
    let nsp_targets: Vec<Option<usize>> = batch.iter().map(|i| Some(i.nsp_label.class())).collect();
    let nsp_loss = g.cross_entropy(nsp, &nsp_targets)?;
    let loss = g.add(mlm, nsp_loss)?;

    let lv = g.value(logits);
    let mlm_correct = (0..rows.len()).filter(|&r| Some(argmax(lv.row(r))) == labels[r]).count();
    let nv = g.value(nsp);
    let nsp_correct = (0..batch.len()).filter(|&b| Some(argmax(nv.row(b))) == nsp_targets[b]).count();
    Ok(PretrainOutput {
        loss,
        mlm_loss: g.value(mlm).item().f64(),
        nsp_loss: g.value(nsp_loss).item().f64(),
        mlm_correct,
        mlm_total: rows.len(),
        nsp_correct,
    })
}
