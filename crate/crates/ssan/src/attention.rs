//! Scaled dot-product attention and its positional variants.
//!
//! Covers single-head attention over padded batches, relative position
//! representations (per-offset key/value embeddings with clipping),
//! multi-head attention, and the sinusoidal/learned position encodings
//! that are added to input embeddings.
//!
//! The relative-position path never materializes an `n×n×d` tensor: the
//! query is multiplied against the `(2k+1)`-row tables once and the
//! results are routed by clipped offset through a gather/scatter pair
//! whose backward rules mirror each other.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// How a model injects word-order information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionMethod {
    /// No order information at all; the model is a bag of vectors.
    None,
    /// Fixed sinusoid added to the input embeddings.
    Sinusoidal,
    /// Trainable per-position vectors added to the input embeddings.
    Learned,
    /// Trainable per-relative-offset vectors inside attention.
    Rpr,
}

/// Attention hyperparameters shared by every model in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub heads: usize,
    pub position: PositionMethod,
    /// Maximum relative offset distinguished by RPR tables.
    pub clip_k: usize,
    /// Dropout applied to attention-layer outputs during training.
    pub attend_dropout_rate: f64,
    /// Longest position a learned-PE table covers.
    pub max_len: usize,
}

impl AttentionSpec {
    pub fn new(d_model: usize, heads: usize, position: PositionMethod) -> Result<AttentionSpec> {
        let spec = AttentionSpec {
            d_model,
            heads,
            position,
            clip_k: 10,
            attend_dropout_rate: 0.0,
            max_len: 128,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_clip_k(mut self, clip_k: usize) -> Result<AttentionSpec> {
        self.clip_k = clip_k;
        self.validate()?;
        Ok(self)
    }

    pub fn with_attend_dropout(mut self, rate: f64) -> Result<AttentionSpec> {
        self.attend_dropout_rate = rate;
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_len(mut self, max_len: usize) -> AttentionSpec {
        self.max_len = max_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::InvalidSpec(format!(
                "d_model and heads must be positive, got {} and {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::HeadDivisibility {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        if self.position == PositionMethod::Rpr && self.clip_k == 0 {
            return Err(Error::InvalidSpec("clip_k must be at least 1 for RPR".into()));
        }
        if !(0.0..1.0).contains(&self.attend_dropout_rate) {
            return Err(Error::InvalidRate(self.attend_dropout_rate));
        }
        Ok(())
    }

    /// Per-head key/query width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Per-head value width (always equal to `d_k` here).
    pub fn d_v(&self) -> usize {
        self.d_k()
    }
}

/// Validity of each position of a padded batch (true = real token).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    batch: usize,
    len: usize,
    valid: Vec<bool>,
}

impl Mask {
    /// Mask for sequences of the given lengths, padded to the longest.
    pub fn from_lengths(lengths: &[usize]) -> Result<Mask> {
        let width = lengths.iter().copied().max().unwrap_or(0);
        Self::with_width(lengths, width)
    }

    /// Mask padded to an explicit width (every length must fit).
    pub fn with_width(lengths: &[usize], width: usize) -> Result<Mask> {
        let mut valid = Vec::with_capacity(lengths.len() * width);
        for (row, &n) in lengths.iter().enumerate() {
            if n == 0 {
                return Err(Error::EmptyMaskRow { row });
            }
            if n > width {
                return Err(Error::SequenceTooLong {
                    len: n,
                    max_len: width,
                });
            }
            valid.extend((0..width).map(|t| t < n));
        }
        Ok(Mask {
            batch: lengths.len(),
            len: width,
            valid,
        })
    }

    /// General constructor from explicit validity rows.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Mask> {
        let width = rows.first().map_or(0, |r| r.len());
        let mut valid = Vec::with_capacity(rows.len() * width);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::shape("Mask::from_rows", &[width], &[r.len()]));
            }
            if !r.iter().any(|&v| v) {
                return Err(Error::EmptyMaskRow { row });
            }
            valid.extend_from_slice(r);
        }
        Ok(Mask {
            batch: rows.len(),
            len: width,
            valid,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn is_valid(&self, row: usize, pos: usize) -> bool {
        self.valid[row * self.len + pos]
    }

    /// Number of valid positions per row.
    pub fn valid_counts(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| (0..self.len).filter(|&t| self.is_valid(b, t)).count())
            .collect()
    }

    /// 0/1 tensor of shape `[batch, len]`, constant (no gradient).
    pub fn keep_tensor(&self) -> Tensor {
        let data = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.batch, self.len], data).expect("mask buffer sized by construction")
    }
}

/// Scaled dot-product compatibility of one key/query pair.
pub fn compatibility(k: &[f64], q: &[f64]) -> Result<f64> {
    if k.len() != q.len() || k.is_empty() {
        return Err(Error::shape("compatibility", &[k.len()], &[q.len()]));
    }
    let dot: f64 = k.iter().zip(q).map(|(a, b)| a * b).sum();
    Ok(dot / (k.len() as f64).sqrt())
}

/// Sets masked key columns of `scores` to the most negative finite value,
/// so softmax sends their weight to exactly zero.
fn apply_mask(tape: &mut Tape, scores: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let mask = match mask {
        Some(m) => m,
        None => return Ok(scores.clone()),
    };
    let n_k = *scores.shape().last().unwrap();
    if mask.seq_len() != n_k {
        return Err(Error::shape("attention mask", scores.shape(), &[mask.batch(), mask.seq_len()]));
    }
    let keep = mask.keep_tensor();
    // broadcast the key-validity row over all queries
    let keep = if scores.shape().len() == 3 {
        if mask.batch() != scores.shape()[0] {
            return Err(Error::shape(
                "attention mask",
                scores.shape(),
                &[mask.batch(), mask.seq_len()],
            ));
        }
        Tensor::new(vec![mask.batch(), 1, n_k], keep.to_vec())?
    } else {
        if mask.batch() != 1 {
            return Err(Error::shape(
                "attention mask",
                scores.shape(),
                &[mask.batch(), mask.seq_len()],
            ));
        }
        Tensor::new(vec![1, n_k], keep.to_vec())?
    };
    tape.masked_fill(scores, &keep, f64::MIN)
}

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
    let nd = q.shape().len();
    if nd < 2 || k.shape().len() != nd || v.shape().len() != nd {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    let d_k = q.shape()[nd - 1];
    if k.shape()[nd - 1] != d_k {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    if v.shape()[nd - 2] != k.shape()[nd - 2] {
        return Err(Error::shape(op, k.shape(), v.shape()));
    }
    if q.shape()[..nd - 2] != k.shape()[..nd - 2] || q.shape()[..nd - 2] != v.shape()[..nd - 2] {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    Ok(d_k)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V`.
///
/// `q` is `[b, n_q, d_k]`, `k` is `[b, n_k, d_k]`, `v` is `[b, n_k, d_v]`
/// (the batch dim may be omitted on all three). Returns the attended
/// output and the attention weights `[b, n_q, n_k]`.
pub fn attention(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor)> {
    let d_k = check_qkv("attention", q, k, v)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (d_k as f64).sqrt())?;
    let masked = apply_mask(tape, &scaled, mask)?;
    let weights = tape.softmax(&masked, masked.shape().len() - 1)?;
    let out = tape.matmul(&weights, v)?;
    Ok((out, weights))
}

/// Trainable per-offset key/value embeddings for relative positions.
///
/// Row `r` of each table holds the embedding of clipped offset `r − k`,
/// so tables have `2k+1` rows. One table pair is shared by all heads of a
/// layer; stacked layers each own their pair.
#[derive(Debug, Clone)]
pub struct RelativePositionTable {
    pub key_table: Tensor,
    pub value_table: Tensor,
    pub clip_k: usize,
}

impl RelativePositionTable {
    /// Trainable tables drawn uniform on `[-0.1, 0.1)`.
    pub fn init<R: Rng + ?Sized>(clip_k: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::check_clip(clip_k)?;
        let rows = 2 * clip_k + 1;
        let key_table = Tensor::rand_uniform(vec![rows, dim], -0.1, 0.1, rng);
        let value_table = Tensor::rand_uniform(vec![rows, dim], -0.1, 0.1, rng);
        key_table.set_requires_grad(true);
        value_table.set_requires_grad(true);
        Ok(RelativePositionTable {
            key_table,
            value_table,
            clip_k,
        })
    }

    /// All-zero trainable tables (attention_rpr then equals attention).
    pub fn zeros(clip_k: usize, dim: usize) -> Result<Self> {
        Self::check_clip(clip_k)?;
        let rows = 2 * clip_k + 1;
        let key_table = Tensor::zeros(vec![rows, dim]);
        let value_table = Tensor::zeros(vec![rows, dim]);
        key_table.set_requires_grad(true);
        value_table.set_requires_grad(true);
        Ok(RelativePositionTable {
            key_table,
            value_table,
            clip_k,
        })
    }

    fn check_clip(clip_k: usize) -> Result<()> {
        if clip_k == 0 {
            return Err(Error::InvalidSpec("clip_k must be at least 1 for RPR".into()));
        }
        Ok(())
    }

    /// Number of distinct offsets, `2k+1`.
    pub fn window(&self) -> usize {
        2 * self.clip_k + 1
    }

    pub fn dim(&self) -> usize {
        self.key_table.shape()[1]
    }
}

/// Table row for relative offset `delta = j − i`: offsets are clamped to
/// `[−k, k]` and shifted to `[0, 2k]`.
pub fn clip_offset(delta: i64, clip_k: usize) -> usize {
    let k = clip_k as i64;
    (delta.clamp(-k, k) + k) as usize
}

/// Expands per-offset values `r[b, i, offset]` into per-pair values
/// `[b, i, j]` by clipped offset `j − i`. Backward scatter-adds.
fn rel_gather(tape: &mut Tape, r: &Tensor, n_k: usize, clip_k: usize) -> Result<Tensor> {
    let (b, n_q, w) = match r.shape() {
        [b, n, w] => (*b, *n, *w),
        s => return Err(Error::shape("rel_gather", s, &[n_k])),
    };
    if w != 2 * clip_k + 1 {
        return Err(Error::shape("rel_gather", r.shape(), &[2 * clip_k + 1]));
    }
    let mut data = vec![0.0; b * n_q * n_k];
    {
        let rd = r.data();
        for bi in 0..b {
            for i in 0..n_q {
                let src = &rd[(bi * n_q + i) * w..(bi * n_q + i + 1) * w];
                let dst = &mut data[(bi * n_q + i) * n_k..(bi * n_q + i + 1) * n_k];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[clip_offset(j as i64 - i as i64, clip_k)];
                }
            }
        }
    }
    let out = tape.out("rel_gather", vec![b, n_q, n_k], data);
    tape.push(
        vec![r.clone()],
        out.clone(),
        Box::new(move |ctx, out, inputs| {
            let r = &inputs[0];
            if !ctx.wants(r) {
                return;
            }
            let og = out.grad_ref();
            let g = og.as_ref().unwrap();
            let mut gr = vec![0.0; r.numel()];
            for bi in 0..b {
                for i in 0..n_q {
                    let src = &g[(bi * n_q + i) * n_k..(bi * n_q + i + 1) * n_k];
                    let dst = &mut gr[(bi * n_q + i) * w..(bi * n_q + i + 1) * w];
                    for (j, s) in src.iter().enumerate() {
                        dst[clip_offset(j as i64 - i as i64, clip_k)] += s;
                    }
                }
            }
            r.accum_grad(&gr);
        }),
    );
    Ok(out)
}

/// Adjoint of [`rel_gather`]: folds per-pair weights `a[b, i, j]` into
/// per-offset sums `[b, i, offset]`. Backward gathers.
fn rel_scatter(tape: &mut Tape, a: &Tensor, clip_k: usize) -> Result<Tensor> {
    let (b, n_q, n_k) = match a.shape() {
        [b, n, m] => (*b, *n, *m),
        s => return Err(Error::shape("rel_scatter", s, &[])),
    };
    let w = 2 * clip_k + 1;
    let mut data = vec![0.0; b * n_q * w];
    {
        let ad = a.data();
        for bi in 0..b {
            for i in 0..n_q {
                let src = &ad[(bi * n_q + i) * n_k..(bi * n_q + i + 1) * n_k];
                let dst = &mut data[(bi * n_q + i) * w..(bi * n_q + i + 1) * w];
                for (j, s) in src.iter().enumerate() {
                    dst[clip_offset(j as i64 - i as i64, clip_k)] += s;
                }
            }
        }
    }
    let out = tape.out("rel_scatter", vec![b, n_q, w], data);
    tape.push(
        vec![a.clone()],
        out.clone(),
        Box::new(move |ctx, out, inputs| {
            let a = &inputs[0];
            if !ctx.wants(a) {
                return;
            }
            let og = out.grad_ref();
            let g = og.as_ref().unwrap();
            let mut ga = vec![0.0; a.numel()];
            for bi in 0..b {
                for i in 0..n_q {
                    let src = &g[(bi * n_q + i) * w..(bi * n_q + i + 1) * w];
                    let dst = &mut ga[(bi * n_q + i) * n_k..(bi * n_q + i + 1) * n_k];
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src[clip_offset(j as i64 - i as i64, clip_k)];
                    }
                }
            }
            a.accum_grad(&ga);
        }),
    );
    Ok(out)
}

/// Attention with relative position representations.
///
/// Compatibility becomes `q_i·(k_j + key_table[clip(j−i)])/√d_k` and each
/// output row gains `Σ_j α_ij·value_table[clip(j−i)]`. With all-zero
/// tables the result is bit-for-bit identical to [`attention`].
pub fn attention_rpr(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rpr: &RelativePositionTable,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor)> {
    let d_k = check_qkv("attention_rpr", q, k, v)?;
    if rpr.dim() != d_k || v.shape()[v.shape().len() - 1] != rpr.dim() {
        return Err(Error::shape("attention_rpr", q.shape(), rpr.key_table.shape()));
    }
    // run rank-2 inputs as a batch of one so the gather sees [b, n, w]
    if q.shape().len() == 2 {
        let (nq, d) = (q.shape()[0], q.shape()[1]);
        let nk = k.shape()[0];
        let dv = v.shape()[1];
        let q3 = tape.reshape(q, vec![1, nq, d])?;
        let k3 = tape.reshape(k, vec![1, nk, d])?;
        let v3 = tape.reshape(v, vec![1, nk, dv])?;
        let (out, weights) = attention_rpr(tape, &q3, &k3, &v3, rpr, mask)?;
        let out = tape.reshape(&out, vec![nq, dv])?;
        let weights = tape.reshape(&weights, vec![nq, nk])?;
        return Ok((out, weights));
    }

    let n_k = k.shape()[k.shape().len() - 2];
    let kt = tape.transpose_last2(k)?;
    let qk = tape.matmul(q, &kt)?;
    let key_t = tape.transpose_last2(&rpr.key_table)?;
    let q_rel = tape.matmul(q, &key_t)?; // [b, n_q, 2k+1]
    let rel_scores = rel_gather(tape, &q_rel, n_k, rpr.clip_k)?;
    let scores = tape.add(&qk, &rel_scores)?;
    let scaled = tape.scale(&scores, 1.0 / (d_k as f64).sqrt())?;
    let masked = apply_mask(tape, &scaled, mask)?;
    let weights = tape.softmax(&masked, masked.shape().len() - 1)?;
    let base = tape.matmul(&weights, v)?;
    let per_offset = rel_scatter(tape, &weights, rpr.clip_k)?;
    let rel_values = tape.matmul(&per_offset, &rpr.value_table)?;
    let out = tape.add(&base, &rel_values)?;
    Ok((out, weights))
}

/// Per-head projection weights and the output projection, all bias-free.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

impl MultiHeadParams {
    pub fn init<R: Rng + ?Sized>(spec: &AttentionSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (d, dk, dv, h) = (spec.d_model, spec.d_k(), spec.d_v(), spec.heads);
        let mut proj = |cols: usize, rng: &mut R| -> Vec<Tensor> {
            (0..h).map(|_| crate::tensor::glorot_uniform(d, cols, rng)).collect()
        };
        Ok(MultiHeadParams {
            wq: proj(dk, rng),
            wk: proj(dk, rng),
            wv: proj(dv, rng),
            wo: crate::tensor::glorot_uniform(h * dv, d, rng),
        })
    }

    /// Single head with identity projections (test fixture).
    pub fn identity(d_model: usize) -> Self {
        let eye = || {
            let mut data = vec![0.0; d_model * d_model];
            for i in 0..d_model {
                data[i * d_model + i] = 1.0;
            }
            let t = Tensor::new(vec![d_model, d_model], data).unwrap();
            t.set_requires_grad(true);
            t
        };
        MultiHeadParams {
            wq: vec![eye()],
            wk: vec![eye()],
            wv: vec![eye()],
            wo: eye(),
        }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    /// Trainable scalars in these projections.
    pub fn param_count(&self) -> usize {
        let per: usize = self.wq.iter().chain(&self.wk).chain(&self.wv).map(Tensor::numel).sum();
        per + self.wo.numel()
    }
}

/// Multi-head self-attention: h parallel attentions on learned
/// projections, concatenated and re-projected to `d_model`. With `rpr`
/// set, every head shares the one table pair.
pub fn multi_head(
    tape: &mut Tape,
    spec: &AttentionSpec,
    params: &MultiHeadParams,
    x: &Tensor,
    mask: Option<&Mask>,
    rpr: Option<&RelativePositionTable>,
) -> Result<Tensor> {
    spec.validate()?;
    if params.heads() != spec.heads
        || params.wk.len() != spec.heads
        || params.wv.len() != spec.heads
    {
        return Err(Error::InvalidSpec(format!(
            "multi_head params carry {} heads, spec wants {}",
            params.heads(),
            spec.heads
        )));
    }
    if *x.shape().last().unwrap_or(&0) != spec.d_model {
        return Err(Error::shape("multi_head", x.shape(), &[spec.d_model]));
    }
    let mut heads = Vec::with_capacity(spec.heads);
    for i in 0..spec.heads {
        let q = tape.matmul(x, &params.wq[i])?;
        let k = tape.matmul(x, &params.wk[i])?;
        let v = tape.matmul(x, &params.wv[i])?;
        let (out, _) = match rpr {
            Some(table) => attention_rpr(tape, &q, &k, &v, table, mask)?,
            None => attention(tape, &q, &k, &v, mask)?,
        };
        heads.push(out);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat(&refs, heads[0].shape().len() - 1)?;
    tape.matmul(&cat, &params.wo)
}

/// Fixed sinusoidal position encodings, `[n, d_model]`.
///
/// Column pairs `(2i, 2i+1)` hold `sin` and `cos` of
/// `pos / 10000^(2i/d_model)`. For odd `d_model` the last column is the
/// unpaired sine term.
pub fn sinusoidal_pe(n: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; n * d_model];
    for pos in 0..n {
        for j in 0..d_model {
            let pair = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
            data[pos * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d_model], data).expect("buffer sized by construction")
}

/// Trainable learned-position table, uniform on `[-0.1, 0.1)`.
pub fn learned_pe_table<R: Rng + ?Sized>(max_len: usize, d_model: usize, rng: &mut R) -> Tensor {
    let t = Tensor::rand_uniform(vec![max_len, d_model], -0.1, 0.1, rng);
    t.set_requires_grad(true);
    t
}

/// First `n` rows of a learned-position table, connected to the tape so
/// the rows receive gradients.
pub fn learned_pe(tape: &mut Tape, table: &Tensor, n: usize) -> Result<Tensor> {
    let max_len = match table.shape() {
        [rows, _] => *rows,
        s => return Err(Error::shape("learned_pe", s, &[])),
    };
    if n > max_len {
        return Err(Error::SequenceTooLong { len: n, max_len });
    }
    let ids: Vec<usize> = (0..n).collect();
    tape.gather_rows(table, &ids)
}
