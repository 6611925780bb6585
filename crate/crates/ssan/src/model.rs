//! The classifier family: 1- and 2-layer SSAN, a 2-layer Transformer
//! encoder, and the Bow/Ave logistic-regression baselines.
//!
//! A [`ModelSpec`] fully determines the parameter set; [`init_params`]
//! creates it and [`forward`] runs it over a [`Batch`]. Parameters live in
//! a flat name→tensor map so the optimizer, the parameter counter, and
//! the checkpoint format all see the same namespace.
//!
//! SSAN pipeline: dropout(embeddings [+ position encoding]) → per layer
//! (Q/K/V feed-forwards → single-head attention → feed-forward → dropout)
//! → masked mean over valid positions → feed-forward → dropout → bias-free
//! linear map to class logits. The Transformer swaps the layer body for
//! the standard encoder layer (multi-head attention and inner
//! feed-forward, each with residual connection and layer norm).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention, attention_rpr, learned_pe, multi_head, sinusoidal_pe, AttentionSpec, Mask,
    MultiHeadParams, PositionMethod, RelativePositionTable,
};
use crate::data::{Batch, EmbeddingMatrix, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Ssan1,
    Ssan2,
    TransformerEncoder2,
    Bow,
    Ave,
}

/// Whether a forward pass applies dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Everything needed to build and run one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub d_model: usize,
    pub n_classes: usize,
    pub attention: AttentionSpec,
    /// Dropout on input embeddings, layer outputs, and the pooled head.
    pub dropout_rate: f64,
    /// Inner width of the Transformer feed-forward sublayer.
    pub ffn_inner_dim: usize,
    /// L2 penalty weight on Bow/Ave weight matrices.
    pub l2_lambda: f64,
    /// Input width for Bow (vocabulary size including reserved ids).
    pub vocab_size: usize,
    /// Use plain linear Q/K/V projections instead of ReLU ones.
    pub qkv_linear: bool,
}

impl ModelSpec {
    pub fn ssan1(d_model: usize, n_classes: usize, position: PositionMethod) -> Result<ModelSpec> {
        let spec = ModelSpec {
            arch: Arch::Ssan1,
            d_model,
            n_classes,
            attention: AttentionSpec::new(d_model, 1, position)?,
            dropout_rate: 0.0,
            ffn_inner_dim: d_model,
            l2_lambda: 0.0,
            vocab_size: 0,
            qkv_linear: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ssan2(d_model: usize, n_classes: usize, position: PositionMethod) -> Result<ModelSpec> {
        let mut spec = Self::ssan1(d_model, n_classes, position)?;
        spec.arch = Arch::Ssan2;
        spec.validate()?;
        Ok(spec)
    }

    pub fn transformer(
        d_model: usize,
        n_classes: usize,
        heads: usize,
        position: PositionMethod,
    ) -> Result<ModelSpec> {
        let spec = ModelSpec {
            arch: Arch::TransformerEncoder2,
            d_model,
            n_classes,
            attention: AttentionSpec::new(d_model, heads, position)?,
            dropout_rate: 0.0,
            ffn_inner_dim: d_model,
            l2_lambda: 0.0,
            vocab_size: 0,
            qkv_linear: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn bow(vocab_size: usize, n_classes: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            arch: Arch::Bow,
            d_model: 0,
            n_classes,
            attention: AttentionSpec::new(1, 1, PositionMethod::None)?,
            dropout_rate: 0.0,
            ffn_inner_dim: 0,
            l2_lambda: 0.0,
            vocab_size,
            qkv_linear: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ave(d_model: usize, n_classes: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            arch: Arch::Ave,
            d_model,
            n_classes,
            attention: AttentionSpec::new(d_model, 1, PositionMethod::None)?,
            dropout_rate: 0.0,
            ffn_inner_dim: 0,
            l2_lambda: 0.0,
            vocab_size: 0,
            qkv_linear: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<ModelSpec> {
        self.dropout_rate = rate;
        self.validate()?;
        Ok(self)
    }

    pub fn with_clip_k(mut self, clip_k: usize) -> Result<ModelSpec> {
        self.attention = self.attention.with_clip_k(clip_k)?;
        Ok(self)
    }

    pub fn with_max_len(mut self, max_len: usize) -> ModelSpec {
        self.attention = self.attention.clone().with_max_len(max_len);
        self
    }

    pub fn with_ffn_inner(mut self, dim: usize) -> Result<ModelSpec> {
        self.ffn_inner_dim = dim;
        self.validate()?;
        Ok(self)
    }

    pub fn with_l2(mut self, lambda: f64) -> Result<ModelSpec> {
        self.l2_lambda = lambda;
        self.validate()?;
        Ok(self)
    }

    pub fn with_qkv_linear(mut self, linear: bool) -> ModelSpec {
        self.qkv_linear = linear;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidRate(self.dropout_rate));
        }
        match self.arch {
            Arch::Ssan1 | Arch::Ssan2 => {
                self.attention.validate()?;
                if self.attention.d_model != self.d_model || self.d_model == 0 {
                    return Err(Error::InvalidSpec(
                        "SSAN d_model must match its attention spec".into(),
                    ));
                }
                if self.attention.heads != 1 {
                    return Err(Error::InvalidSpec("SSAN attention is single-head".into()));
                }
            }
            Arch::TransformerEncoder2 => {
                self.attention.validate()?;
                if self.attention.d_model != self.d_model || self.d_model == 0 {
                    return Err(Error::InvalidSpec(
                        "Transformer d_model must match its attention spec".into(),
                    ));
                }
                if self.ffn_inner_dim == 0 {
                    return Err(Error::InvalidSpec("ffn_inner_dim must be positive".into()));
                }
            }
            Arch::Bow => {
                if self.vocab_size < 3 {
                    return Err(Error::InvalidSpec(
                        "Bow needs a vocabulary beyond the reserved ids".into(),
                    ));
                }
            }
            Arch::Ave => {
                if self.d_model == 0 {
                    return Err(Error::InvalidSpec("Ave needs d_model > 0".into()));
                }
            }
        }
        if self.l2_lambda < 0.0 {
            return Err(Error::InvalidSpec("l2_lambda must be nonnegative".into()));
        }
        Ok(())
    }

    /// Attention layers in the stack (0 for the baselines).
    pub fn layers(&self) -> usize {
        match self.arch {
            Arch::Ssan1 => 1,
            Arch::Ssan2 | Arch::TransformerEncoder2 => 2,
            Arch::Bow | Arch::Ave => 0,
        }
    }
}

/// Flat parameter-path → tensor map; exactly the trainable set for a spec
/// (word embeddings live in [`EmbeddingMatrix`], outside this map).
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn insert(&mut self, path: &str, t: Tensor) {
        t.set_requires_grad(true);
        self.map.insert(path.to_string(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map
            .get(path)
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total trainable scalars.
    pub fn total_params(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Rebuilds the table view over this layer's RPR tensors.
    pub fn rpr_table(&self, layer: usize, clip_k: usize) -> Result<RelativePositionTable> {
        Ok(RelativePositionTable {
            key_table: self.get(&format!("layer{layer}.rpr_key"))?.clone(),
            value_table: self.get(&format!("layer{layer}.rpr_value"))?.clone(),
            clip_k,
        })
    }

    /// Independent copy of every tensor (checkpoint snapshots).
    pub fn deep_clone(&self) -> ModelParams {
        ModelParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.deep_clone()))
                .collect(),
        }
    }

    pub fn clear_grads(&self) {
        for t in self.map.values() {
            t.clear_grad();
        }
    }
}

fn zeros_param(d: usize) -> Tensor {
    let t = Tensor::zeros(vec![d]);
    t.set_requires_grad(true);
    t
}

fn uniform_param<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let t = Tensor::rand_uniform(shape, -bound, bound, rng);
    t.set_requires_grad(true);
    t
}

/// Builds the full trainable parameter set for `spec`. Weight matrices
/// are Glorot-uniform, biases zero, RPR and learned-position tables
/// uniform on `[-0.1, 0.1)`. Deterministic for a fixed RNG state.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ModelParams> {
    spec.validate()?;
    let mut params = ModelParams::default();
    let d = spec.d_model;
    let att = &spec.attention;

    match spec.arch {
        Arch::Ssan1 | Arch::Ssan2 => {
            for layer in 1..=spec.layers() {
                for name in ["wq", "wk", "wv"] {
                    params.insert(&format!("layer{layer}.{name}"), glorot_uniform(d, d, rng));
                }
                for name in ["bq", "bk", "bv"] {
                    params.insert(&format!("layer{layer}.{name}"), zeros_param(d));
                }
                params.insert(&format!("layer{layer}.w_post"), glorot_uniform(d, d, rng));
                params.insert(&format!("layer{layer}.b_post"), zeros_param(d));
                if att.position == PositionMethod::Rpr {
                    let rows = 2 * att.clip_k + 1;
                    params.insert(
                        &format!("layer{layer}.rpr_key"),
                        uniform_param(vec![rows, att.d_k()], 0.1, rng),
                    );
                    params.insert(
                        &format!("layer{layer}.rpr_value"),
                        uniform_param(vec![rows, att.d_k()], 0.1, rng),
                    );
                }
            }
            finish_pooled_head(&mut params, spec, rng);
        }
        Arch::TransformerEncoder2 => {
            let (dk, dv, h, f) = (att.d_k(), att.d_v(), att.heads, spec.ffn_inner_dim);
            for layer in 1..=2 {
                for head in 0..h {
                    for name in ["wq", "wk", "wv"] {
                        params.insert(
                            &format!("layer{layer}.head{head}.{name}"),
                            glorot_uniform(d, dk, rng),
                        );
                    }
                }
                params.insert(&format!("layer{layer}.wo"), glorot_uniform(h * dv, d, rng));
                params.insert(&format!("layer{layer}.ffn.w1"), glorot_uniform(d, f, rng));
                params.insert(&format!("layer{layer}.ffn.b1"), zeros_param(f));
                params.insert(&format!("layer{layer}.ffn.w2"), glorot_uniform(f, d, rng));
                params.insert(&format!("layer{layer}.ffn.b2"), zeros_param(d));
                for norm in ["norm1", "norm2"] {
                    params.insert(&format!("layer{layer}.{norm}.gain"), {
                        let t = Tensor::ones(vec![d]);
                        t.set_requires_grad(true);
                        t
                    });
                    params.insert(&format!("layer{layer}.{norm}.bias"), zeros_param(d));
                }
                if att.position == PositionMethod::Rpr {
                    let rows = 2 * att.clip_k + 1;
                    params.insert(
                        &format!("layer{layer}.rpr_key"),
                        uniform_param(vec![rows, dk], 0.1, rng),
                    );
                    params.insert(
                        &format!("layer{layer}.rpr_value"),
                        uniform_param(vec![rows, dk], 0.1, rng),
                    );
                }
            }
            finish_pooled_head(&mut params, spec, rng);
        }
        Arch::Bow => {
            params.insert("out.w", glorot_uniform(spec.vocab_size, spec.n_classes, rng));
            params.insert("out.b", zeros_param(spec.n_classes));
        }
        Arch::Ave => {
            params.insert("out.w", glorot_uniform(d, spec.n_classes, rng));
            params.insert("out.b", zeros_param(spec.n_classes));
        }
    }
    Ok(params)
}

fn finish_pooled_head<R: Rng + ?Sized>(params: &mut ModelParams, spec: &ModelSpec, rng: &mut R) {
    let d = spec.d_model;
    if spec.attention.position == PositionMethod::Learned {
        params.insert(
            "pos.table",
            uniform_param(vec![spec.attention.max_len, d], 0.1, rng),
        );
    }
    params.insert("pool.w", glorot_uniform(d, d, rng));
    params.insert("pool.b", zeros_param(d));
    params.insert("out.w", glorot_uniform(d, spec.n_classes, rng));
}

/// Mean over valid positions only: `[b, n, d]` → `[b, d]`, dividing each
/// row by its own valid-token count.
pub fn masked_mean(tape: &mut Tape, x: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (b, n, d) = match x.shape() {
        [b, n, d] => (*b, *n, *d),
        s => return Err(Error::shape("masked_mean", s, &[])),
    };
    if mask.batch() != b || mask.seq_len() != n {
        return Err(Error::shape("masked_mean", x.shape(), &[mask.batch(), mask.seq_len()]));
    }
    let keep = Tensor::new(vec![b, n, 1], mask.keep_tensor().to_vec())?;
    let kept = tape.mul(x, &keep)?;
    let summed = tape.sum_axis(&kept, 1)?;
    let inv: Vec<f64> = mask.valid_counts().iter().map(|&c| 1.0 / c as f64).collect();
    let inv = Tensor::new(vec![b, 1], inv)?;
    tape.mul(&summed, &inv)
}

fn ff(tape: &mut Tape, x: &Tensor, w: &Tensor, b: Option<&Tensor>, relu: bool) -> Result<Tensor> {
    let mut h = tape.matmul(x, w)?;
    if let Some(b) = b {
        h = tape.add(&h, b)?;
    }
    if relu {
        h = tape.relu(&h)?;
    }
    Ok(h)
}

fn maybe_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: &Tensor,
    rate: f64,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    tape.dropout(x, rate, phase == Phase::Train, rng)
}

/// Looks up embeddings for a batch: `[b, n, d]` with padding rows zero.
fn embed(
    tape: &mut Tape,
    emb: Option<&EmbeddingMatrix>,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<Tensor> {
    let emb = emb.ok_or(Error::MissingEmbeddings)?;
    if emb.dim != spec.d_model {
        return Err(Error::DimMismatch {
            expected: spec.d_model,
            found: emb.dim,
        });
    }
    let b = batch.size();
    let flat = tape.gather_rows(&emb.matrix, &batch.token_ids)?;
    tape.reshape(&flat, vec![b, batch.n_max, spec.d_model])
}

/// Adds sinusoidal or learned position vectors to the input embeddings
/// (no-op for `None` and `Rpr`).
fn add_positions(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    n: usize,
) -> Result<Tensor> {
    match spec.attention.position {
        PositionMethod::None | PositionMethod::Rpr => Ok(x.clone()),
        PositionMethod::Sinusoidal => {
            let pe = sinusoidal_pe(n, spec.d_model);
            tape.add(x, &pe)
        }
        PositionMethod::Learned => {
            let pe = learned_pe(tape, params.get("pos.table")?, n)?;
            tape.add(x, &pe)
        }
    }
}

/// Shared tail: masked mean → pooled feed-forward → dropout → bias-free
/// output projection.
fn pooled_head<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    mask: &Mask,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    let pooled = masked_mean(tape, x, mask)?;
    let hidden = ff(tape, &pooled, params.get("pool.w")?, Some(params.get("pool.b")?), true)?;
    let hidden = maybe_dropout(tape, &hidden, spec.dropout_rate, phase, rng)?;
    tape.matmul(&hidden, params.get("out.w")?)
}

/// SSAN forward pass to logits `[b, n_classes]`.
pub fn ssan_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    emb: Option<&EmbeddingMatrix>,
    batch: &Batch,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    let x = embed(tape, emb, spec, batch)?;
    let x = add_positions(tape, spec, params, &x, batch.n_max)?;
    let mut x = maybe_dropout(tape, &x, spec.dropout_rate, phase, rng)?;
    let relu_qkv = !spec.qkv_linear;

    for layer in 1..=spec.layers() {
        let name = |suffix: &str| format!("layer{layer}.{suffix}");
        let q = ff(tape, &x, params.get(&name("wq"))?, Some(params.get(&name("bq"))?), relu_qkv)?;
        let k = ff(tape, &x, params.get(&name("wk"))?, Some(params.get(&name("bk"))?), relu_qkv)?;
        let v = ff(tape, &x, params.get(&name("wv"))?, Some(params.get(&name("bv"))?), relu_qkv)?;
        let (att, _) = if spec.attention.position == PositionMethod::Rpr {
            let table = params.rpr_table(layer, spec.attention.clip_k)?;
            attention_rpr(tape, &q, &k, &v, &table, Some(&batch.mask))?
        } else {
            attention(tape, &q, &k, &v, Some(&batch.mask))?
        };
        let att = maybe_dropout(tape, &att, spec.attention.attend_dropout_rate, phase, rng)?;
        let post = ff(tape, &att, params.get(&name("w_post"))?, Some(params.get(&name("b_post"))?), true)?;
        x = maybe_dropout(tape, &post, spec.dropout_rate, phase, rng)?;
    }
    pooled_head(tape, spec, params, &x, &batch.mask, phase, rng)
}

/// Two-layer Transformer encoder classifier forward pass.
pub fn transformer_encoder_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    emb: Option<&EmbeddingMatrix>,
    batch: &Batch,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    const NORM_EPS: f64 = 1e-6;
    let x = embed(tape, emb, spec, batch)?;
    let x = add_positions(tape, spec, params, &x, batch.n_max)?;
    let mut x = maybe_dropout(tape, &x, spec.dropout_rate, phase, rng)?;
    let h = spec.attention.heads;

    for layer in 1..=2 {
        let name = |suffix: &str| format!("layer{layer}.{suffix}");
        let pick = |params: &ModelParams, kind: &str| -> Result<Vec<Tensor>> {
            (0..h)
                .map(|i| Ok(params.get(&format!("layer{layer}.head{i}.{kind}"))?.clone()))
                .collect()
        };
        let mh_params = MultiHeadParams {
            wq: pick(params, "wq")?,
            wk: pick(params, "wk")?,
            wv: pick(params, "wv")?,
            wo: params.get(&name("wo"))?.clone(),
        };
        let table = if spec.attention.position == PositionMethod::Rpr {
            Some(params.rpr_table(layer, spec.attention.clip_k)?)
        } else {
            None
        };
        let mha = multi_head(
            tape,
            &spec.attention,
            &mh_params,
            &x,
            Some(&batch.mask),
            table.as_ref(),
        )?;
        let mha = maybe_dropout(tape, &mha, spec.dropout_rate, phase, rng)?;
        let sum = tape.add(&x, &mha)?;
        x = tape.layer_norm(
            &sum,
            params.get(&name("norm1.gain"))?,
            params.get(&name("norm1.bias"))?,
            NORM_EPS,
        )?;

        let inner = ff(tape, &x, params.get(&name("ffn.w1"))?, Some(params.get(&name("ffn.b1"))?), true)?;
        let ffn = ff(tape, &inner, params.get(&name("ffn.w2"))?, Some(params.get(&name("ffn.b2"))?), false)?;
        let ffn = maybe_dropout(tape, &ffn, spec.dropout_rate, phase, rng)?;
        let sum = tape.add(&x, &ffn)?;
        x = tape.layer_norm(
            &sum,
            params.get(&name("norm2.gain"))?,
            params.get(&name("norm2.bias"))?,
            NORM_EPS,
        )?;
    }
    pooled_head(tape, spec, params, &x, &batch.mask, phase, rng)
}

/// Bag-of-words logistic regression: token-count features to logits.
pub fn bow_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
) -> Result<Tensor> {
    let b = batch.size();
    let v = spec.vocab_size;
    let mut counts = vec![0.0; b * v];
    for row in 0..b {
        for col in 0..batch.n_max {
            if batch.mask.is_valid(row, col) {
                let id = batch.token_ids[row * batch.n_max + col];
                if id >= v {
                    return Err(Error::shape("bow_forward", &[v], &[id]));
                }
                counts[row * v + id] += 1.0;
            }
        }
    }
    let counts = Tensor::new(vec![b, v], counts)?;
    let logits = tape.matmul(&counts, params.get("out.w")?)?;
    tape.add(&logits, params.get("out.b")?)
}

/// Embedding-average logistic regression.
pub fn ave_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    emb: Option<&EmbeddingMatrix>,
    batch: &Batch,
) -> Result<Tensor> {
    let x = embed(tape, emb, spec, batch)?;
    let mean = masked_mean(tape, &x, &batch.mask)?;
    let logits = tape.matmul(&mean, params.get("out.w")?)?;
    tape.add(&logits, params.get("out.b")?)
}

/// Dispatches to the architecture's forward pass.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    spec: &ModelSpec,
    params: &ModelParams,
    emb: Option<&EmbeddingMatrix>,
    batch: &Batch,
    phase: Phase,
    rng: &mut R,
) -> Result<Tensor> {
    match spec.arch {
        Arch::Ssan1 | Arch::Ssan2 => ssan_forward(tape, spec, params, emb, batch, phase, rng),
        Arch::TransformerEncoder2 => {
            transformer_encoder_forward(tape, spec, params, emb, batch, phase, rng)
        }
        Arch::Bow => bow_forward(tape, spec, params, batch),
        Arch::Ave => ave_forward(tape, spec, params, emb, batch),
    }
}

/// Softmax probabilities from logits (pure helper; training folds the
/// softmax into the loss instead).
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::disabled();
    tape.softmax(logits, logits.shape().len() - 1)
}

// ── checkpointing ────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 8] = b"SSANCKP1";

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptEmbedding {
    dim: usize,
    coverage: f64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    spec: ModelSpec,
    labels: Vec<String>,
    vocab: Vec<String>,
    embedding: Option<CkptEmbedding>,
    entries: Vec<CkptEntry>,
}

/// A trained model with everything needed to evaluate it later.
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub embedding: Option<EmbeddingMatrix>,
}

/// Writes spec, labels, vocabulary, parameters, and the embedding matrix
/// as a flat binary archive: a JSON header followed by row-major f64
/// little-endian payloads. Round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries: Vec<CkptEntry> = ckpt
        .params
        .iter()
        .map(|(name, t)| CkptEntry {
            path: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if let Some(emb) = &ckpt.embedding {
        entries.push(CkptEntry {
            path: "__embedding__".to_string(),
            shape: emb.matrix.shape().to_vec(),
        });
    }
    let header = CkptHeader {
        spec: ckpt.spec.clone(),
        labels: ckpt.labels.clone(),
        vocab: ckpt.vocab.tokens().to_vec(),
        embedding: ckpt.embedding.as_ref().map(|e| CkptEmbedding {
            dim: e.dim,
            coverage: e.coverage,
            trainable: e.trainable,
        }),
        entries,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::BadCheckpoint(e.to_string()))?;

    let mut file = fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut write_tensor = |t: &Tensor| -> Result<()> {
        let data = t.data();
        let mut bytes = Vec::with_capacity(data.len() * 8);
        for v in data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
        Ok(())
    };
    for (_, t) in ckpt.params.iter() {
        write_tensor(t)?;
    }
    if let Some(emb) = &ckpt.embedding {
        write_tensor(&emb.matrix)?;
    }
    Ok(())
}

/// Reads a checkpoint and validates every parameter shape against what
/// the stored spec would initialize.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16 + header_len;
    if bytes.len() < body_start {
        return Err(Error::BadCheckpoint("truncated header".into()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    header.spec.validate()?;

    let mut offset = body_start;
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if bytes.len() < end {
            return Err(Error::BadCheckpoint("truncated tensor data".into()));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        Tensor::new(shape.to_vec(), data)
    };

    let mut params = ModelParams::default();
    let mut embedding = None;
    for entry in &header.entries {
        let t = read_tensor(&entry.shape)?;
        if entry.path == "__embedding__" {
            let meta = header
                .embedding
                .as_ref()
                .ok_or_else(|| Error::BadCheckpoint("embedding payload without metadata".into()))?;
            t.set_requires_grad(meta.trainable);
            embedding = Some(EmbeddingMatrix {
                matrix: t,
                dim: meta.dim,
                coverage: meta.coverage,
                trainable: meta.trainable,
            });
        } else {
            params.insert(&entry.path, t);
        }
    }
    if offset != bytes.len() {
        return Err(Error::BadCheckpoint("trailing bytes after tensors".into()));
    }

    // the stored spec fixes the legal parameter set; verify shape by shape
    let mut probe_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let expected = init_params(&header.spec, &mut probe_rng)?;
    if expected.len() != params.len() {
        return Err(Error::BadCheckpoint(format!(
            "expected {} parameters, found {}",
            expected.len(),
            params.len()
        )));
    }
    for (name, t) in expected.iter() {
        let stored = params
            .get(name)
            .map_err(|_| Error::BadCheckpoint(format!("missing parameter {name}")))?;
        if stored.shape() != t.shape() {
            return Err(Error::StateShapeMismatch {
                path: name.clone(),
                state: stored.shape().to_vec(),
                param: t.shape().to_vec(),
            });
        }
    }

    Ok(Checkpoint {
        spec: header.spec,
        params,
        labels: header.labels,
        vocab: Vocabulary::from_tokens(header.vocab),
        embedding,
    })
}

use rand::SeedableRng as _;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_marker_corpus, make_batch, Split};
    use crate::gradcheck::check_scalar_fn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            assert!((g - w).abs() <= tol, "element {i}: got {g}, want {w}");
        }
    }

    /// Toy corpus, vocab, random embeddings, and one batch.
    fn fixture(d: usize, batch_size: usize, seed: u64) -> (Vocabulary, EmbeddingMatrix, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = generate_marker_corpus(40, Split::Train, &mut rng);
        let vocab = Vocabulary::build(&[&corpus]);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let batch = make_batch(&corpus, &vocab, batch_size, &mut rng).unwrap();
        (vocab, emb, batch)
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::ssan1(8, 3, PositionMethod::Rpr).unwrap();
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na} differs across same-seed inits");
        }
    }

    #[test]
    fn glorot_variance_statistical_check() {
        // bound = √(6/600) = 0.1, variance = bound²/3
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = glorot_uniform(300, 300, &mut rng);
        let data = w.to_vec();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let want = 0.1 * 0.1 / 3.0;
        assert!((var - want).abs() / want < 0.15, "variance {var} vs {want}");
    }

    #[test]
    fn every_param_requires_grad_and_set_is_closed() {
        let spec = ModelSpec::transformer(12, 4, 2, PositionMethod::Rpr).unwrap();
        let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        for (name, t) in params.iter() {
            assert!(t.requires_grad(), "{name} must be trainable");
        }
        // the set is exactly reproducible from the spec
        let again = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let names_a: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        let names_b: Vec<&String> = again.iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn forward_shapes_across_architectures() {
        let d = 10;
        let (vocab, emb, batch) = fixture(d, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let specs = [
            ModelSpec::ssan1(d, 2, PositionMethod::Rpr).unwrap().with_clip_k(3).unwrap(),
            ModelSpec::ssan2(d, 2, PositionMethod::Sinusoidal).unwrap(),
            ModelSpec::transformer(d, 2, 2, PositionMethod::Learned).unwrap(),
            ModelSpec::bow(vocab.size(), 2).unwrap(),
            ModelSpec::ave(d, 2).unwrap(),
        ];
        for spec in specs {
            let params = init_params(&spec, &mut rng).unwrap();
            let mut tape = Tape::new();
            let logits =
                forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
                    .unwrap();
            assert_eq!(logits.shape(), &[3, 2], "{:?}", spec.arch);
        }
    }

    #[test]
    fn missing_embeddings_rejected_except_bow() {
        let d = 6;
        let (vocab, _, batch) = fixture(d, 2, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);

        let spec = ModelSpec::ssan1(d, 2, PositionMethod::None).unwrap();
        let params = init_params(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            forward(&mut tape, &spec, &params, None, &batch, Phase::Eval, &mut rng),
            Err(Error::MissingEmbeddings)
        ));

        let bow = ModelSpec::bow(vocab.size(), 2).unwrap();
        let bow_params = init_params(&bow, &mut rng).unwrap();
        assert!(forward(&mut tape, &bow, &bow_params, None, &batch, Phase::Eval, &mut rng).is_ok());
    }

    #[test]
    fn single_token_identity_weights_give_relu_chain() {
        // identity projections, zero tables and biases: with one token the
        // attention step is an identity, so the logit vector is a selector
        // applied to relu(embedding)
        let d = 4;
        let spec = ModelSpec::ssan1(d, 2, PositionMethod::Rpr).unwrap().with_clip_k(2).unwrap();
        let mut params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(30)).unwrap();
        let eye = {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            data
        };
        for name in ["layer1.wq", "layer1.wk", "layer1.wv", "layer1.w_post", "pool.w"] {
            params.insert(name, Tensor::new(vec![d, d], eye.clone()).unwrap());
        }
        for name in ["layer1.bq", "layer1.bk", "layer1.bv", "layer1.b_post", "pool.b"] {
            params.insert(name, Tensor::zeros(vec![d]));
        }
        params.insert("layer1.rpr_key", Tensor::zeros(vec![5, d]));
        params.insert("layer1.rpr_value", Tensor::zeros(vec![5, d]));
        // out.w selects the first two features
        let mut sel = vec![0.0; d * 2];
        sel[0] = 1.0;
        sel[3] = 1.0; // feature 1 → class 1
        params.insert("out.w", Tensor::new(vec![d, 2], sel).unwrap());

        let corpus = crate::data::Corpus {
            split: Split::Train,
            examples: vec![crate::data::Example {
                tokens: vec!["solo".into()],
                label: 0,
            }],
            label_names: vec!["a".into(), "b".into()],
        };
        let vocab = Vocabulary::build(&[&corpus]);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let batch = make_batch(&corpus, &vocab, 1, &mut rng).unwrap();

        let mut tape = Tape::new();
        let logits =
            ssan_forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
                .unwrap();
        let e = &emb.matrix.to_vec()[vocab.id("solo") * d..vocab.id("solo") * d + d];
        let r: Vec<f64> = e.iter().map(|&v| v.max(0.0)).collect();
        assert_close(&logits.to_vec(), &[r[0], r[1]], 1e-12);
    }

    #[test]
    fn position_none_is_permutation_invariant() {
        let d = 8;
        let spec = ModelSpec::ssan1(d, 3, PositionMethod::None).unwrap();
        let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
        let corpus = crate::data::Corpus {
            split: Split::Train,
            examples: vec![crate::data::Example {
                tokens: ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
                label: 0,
            }],
            label_names: vec!["x".into(), "y".into(), "z".into()],
        };
        let vocab = Vocabulary::build(&[&corpus]);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let batch = make_batch(&corpus, &vocab, 1, &mut rng).unwrap();

        let mut shuffled = batch.clone();
        shuffled.token_ids.reverse();

        let mut tape = Tape::new();
        let a = ssan_forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
            .unwrap();
        let b =
            ssan_forward(&mut tape, &spec, &params, Some(&emb), &shuffled, Phase::Eval, &mut rng)
                .unwrap();
        assert_close(&a.to_vec(), &b.to_vec(), 1e-9);
    }

    #[test]
    fn rpr_and_pe_are_position_sensitive() {
        let d = 8;
        for position in [PositionMethod::Rpr, PositionMethod::Sinusoidal, PositionMethod::Learned] {
            let spec = ModelSpec::ssan1(d, 2, position).unwrap().with_clip_k(3).unwrap();
            let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
            let corpus = crate::data::Corpus {
                split: Split::Train,
                examples: vec![crate::data::Example {
                    tokens: ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
                    label: 0,
                }],
                label_names: vec!["x".into(), "y".into()],
            };
            let vocab = Vocabulary::build(&[&corpus]);
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
            let batch = make_batch(&corpus, &vocab, 1, &mut rng).unwrap();
            let mut shuffled = batch.clone();
            shuffled.token_ids.reverse();

            let mut tape = Tape::new();
            let a =
                ssan_forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
                    .unwrap();
            let b = ssan_forward(
                &mut tape, &spec, &params, Some(&emb), &shuffled, Phase::Eval, &mut rng,
            )
            .unwrap();
            let diff: f64 = a
                .to_vec()
                .iter()
                .zip(b.to_vec().iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6, "{position:?} should be order-sensitive, diff {diff}");
        }
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let d = 6;
        let (_, emb, batch) = fixture(d, 4, 50);
        for spec in [
            ModelSpec::ssan1(d, 2, PositionMethod::Rpr).unwrap().with_clip_k(2).unwrap(),
            ModelSpec::transformer(d, 2, 2, PositionMethod::Sinusoidal).unwrap(),
        ] {
            let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(51)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(52);
            let mut tape = Tape::new();
            let train =
                forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Train, &mut rng)
                    .unwrap();
            let eval =
                forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
                    .unwrap();
            assert_eq!(train.to_vec(), eval.to_vec(), "{:?}", spec.arch);
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let d = 9;
        let (_, emb, batch) = fixture(d, 3, 60);
        let spec = ModelSpec::ssan2(d, 4, PositionMethod::Rpr).unwrap().with_clip_k(2).unwrap();
        let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(61)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut tape = Tape::new();
        let a = forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
            .unwrap();
        let b = forward(&mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)
            .unwrap();
        let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn transformer_residual_transmits_identity_under_uniform_attention() {
        // zero W^K makes every key equal (scores all zero → uniform
        // weights); distinct inputs must still produce distinct logits
        // because the residual path carries the tokens directly
        let d = 8;
        let spec = ModelSpec::transformer(d, 2, 2, PositionMethod::None).unwrap();
        let mut params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(70)).unwrap();
        for layer in 1..=2 {
            for head in 0..2 {
                params.insert(
                    &format!("layer{layer}.head{head}.wk"),
                    Tensor::zeros(vec![d, d / 2]),
                );
            }
        }
        let corpus = crate::data::Corpus {
            split: Split::Train,
            examples: vec![
                crate::data::Example {
                    tokens: vec!["p".into(), "q".into()],
                    label: 0,
                },
                crate::data::Example {
                    tokens: vec!["r".into(), "s".into()],
                    label: 1,
                },
            ],
            label_names: vec!["x".into(), "y".into()],
        };
        let vocab = Vocabulary::build(&[&corpus]);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let batch = crate::data::epoch_batches(&corpus, &vocab, 2).unwrap().remove(0);

        let mut tape = Tape::new();
        let logits = transformer_encoder_forward(
            &mut tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng,
        )
        .unwrap();
        let data = logits.to_vec();
        let diff: f64 = (0..2).map(|c| (data[c] - data[2 + c]).abs()).sum();
        assert!(diff > 1e-9, "rows should differ, got {data:?}");
    }

    #[test]
    fn ssan_full_graph_gradcheck_small() {
        let d = 5;
        let (_, emb, batch) = fixture(d, 2, 80);
        let spec = ModelSpec::ssan1(d, 2, PositionMethod::Rpr).unwrap().with_clip_k(2).unwrap();
        let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(81)).unwrap();
        let leaves: Vec<(&str, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.as_str(), t.clone()))
            .collect();
        let labels = batch.labels.clone();
        let outcome = check_scalar_fn(&leaves, |tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let logits =
                ssan_forward(tape, &spec, &params, Some(&emb), &batch, Phase::Eval, &mut rng)?;
            crate::train::cross_entropy(tape, &logits, &labels)
        })
        .unwrap();
        assert!(
            outcome.ok(),
            "ssan1 gradcheck {:.3e} at {}[{}]",
            outcome.max_rel_err,
            outcome.worst_leaf,
            outcome.worst_index
        );
    }

    #[test]
    fn bow_zero_weights_give_uniform_probabilities() {
        let (vocab, _, batch) = fixture(4, 3, 90);
        let spec = ModelSpec::bow(vocab.size(), 2).unwrap();
        let mut params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(91)).unwrap();
        params.insert("out.w", Tensor::zeros(vec![vocab.size(), 2]));
        params.insert("out.b", Tensor::zeros(vec![2]));
        let mut tape = Tape::new();
        let logits = bow_forward(&mut tape, &spec, &params, &batch).unwrap();
        let probs = probabilities(&logits).unwrap();
        assert_close(&probs.to_vec(), &vec![0.5; 6], 1e-12);
    }

    #[test]
    fn ave_single_token_is_that_embedding() {
        let d = 5;
        let corpus = crate::data::Corpus {
            split: Split::Train,
            examples: vec![crate::data::Example {
                tokens: vec!["only".into()],
                label: 0,
            }],
            label_names: vec!["x".into(), "y".into()],
        };
        let vocab = Vocabulary::build(&[&corpus]);
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let batch = make_batch(&corpus, &vocab, 1, &mut rng).unwrap();

        let spec = ModelSpec::ave(d, 2).unwrap();
        let params = init_params(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let logits = ave_forward(&mut tape, &spec, &params, Some(&emb), &batch).unwrap();

        // oracle: e·W + b by hand
        let e = &emb.matrix.to_vec()[vocab.id("only") * d..(vocab.id("only") + 1) * d];
        let w = params.get("out.w").unwrap().to_vec();
        let b = params.get("out.b").unwrap().to_vec();
        let want: Vec<f64> = (0..2)
            .map(|c| b[c] + (0..d).map(|i| e[i] * w[i * 2 + c]).sum::<f64>())
            .collect();
        assert_close(&logits.to_vec(), &want, 1e-12);
    }

    #[test]
    fn masked_mean_respects_counts() {
        let mut tape = Tape::new();
        let x = Tensor::new(
            vec![2, 3, 2],
            vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
        )
        .unwrap();
        let mask = Mask::from_lengths(&[2, 3]).unwrap();
        let m = masked_mean(&mut tape, &x, &mask).unwrap();
        assert_close(&m.to_vec(), &[2.0, 3.0, 7.0, 8.0], 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let d = 7;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let corpus = generate_marker_corpus(20, Split::Train, &mut rng);
        let vocab = Vocabulary::build(&[&corpus]);
        let emb = EmbeddingMatrix::random(&vocab, d, &mut rng);
        let spec = ModelSpec::ssan1(d, 2, PositionMethod::Rpr).unwrap().with_clip_k(2).unwrap();
        let params = init_params(&spec, &mut rng).unwrap();

        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            spec: spec.clone(),
            params,
            labels: corpus.label_names.clone(),
            vocab: vocab.clone(),
            embedding: Some(emb),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.labels, corpus.label_names);
        assert_eq!(loaded.vocab, vocab);
        for (name, t) in ckpt.params.iter() {
            let l = loaded.params.get(name).unwrap();
            let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(l), "{name} not bit-exact");
        }
        let (a, b) = (ckpt.embedding.unwrap(), loaded.embedding.unwrap());
        assert_eq!(
            a.matrix.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.matrix.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPT__________").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadCheckpoint(_))));

        // truncate a real checkpoint mid-payload
        let spec = ModelSpec::ave(4, 2).unwrap();
        let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(
            &good,
            &Checkpoint {
                spec,
                params,
                labels: vec!["a".into(), "b".into()],
                vocab: Vocabulary::from_tokens(vec![]),
                embedding: None,
            },
        )
        .unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::BadCheckpoint(_))));
    }
}
