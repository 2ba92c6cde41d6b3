//! A one-block causal transformer decoder with hand-written backprop,
//! conditioned on hard and soft prompts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_param_set;
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax, normal_mat, softmax_in_place, LayerNormCache, Linear};
use crate::params::ParamSet;
use crate::prompts::{HardPrompt, MappingNet, SoftPrompt, SoftPromptCache};
use crate::scalar::{lit, Scalar};
use crate::synthworld::{Caption, TokenId, BOS, EOS, PAD};
use crate::tensor::{gemm, matmul, Mat};

mod beam;

pub use beam::{decode, greedy};

/// Where the soft prompt sits relative to the hard prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    #[default]
    HardFirst,
    SoftFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub ffn_mult: usize,
    pub order: PromptOrder,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            max_seq: 48,
            ffn_mult: 4,
            order: PromptOrder::HardFirst,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dimension {} not divisible into {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.max_seq < 2 || self.ffn_mult == 0 {
            return Err(Error::Config("decoder needs max_seq >= 2 and ffn_mult >= 1".into()));
        }
        Ok(())
    }
}

/// Embeddings, one pre-norm block, final norm and an untied output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams<T> {
    pub heads: usize,
    pub order: PromptOrder,
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    /// Fused query, key and value projections, `d → 3d`.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub lnf_g: Mat<T>,
    pub lnf_b: Mat<T>,
    pub out: Linear<T>,
}

impl_param_set!(DecoderParams {
    tok_emb: Weight,
    pos_emb: Weight,
    ln1_g: Norm,
    ln1_b: Norm,
    ln2_g: Norm,
    ln2_b: Norm,
    lnf_g: Norm,
    lnf_b: Norm,
} nested { qkv, proj, ff1, ff2, out });

impl<T: Scalar> DecoderParams<T> {
    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(vocab_len: usize, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let ones = || Mat::from_vec(1, d, vec![T::one(); d]);
        Ok(Self {
            heads: cfg.heads,
            order: cfg.order,
            tok_emb: Mat::zeros(vocab_len, d),
            pos_emb: Mat::zeros(cfg.max_seq, d),
            ln1_g: ones(),
            ln1_b: Mat::zeros(1, d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            ln2_g: ones(),
            ln2_b: Mat::zeros(1, d),
            ff1: Linear::zeros(d, cfg.ffn_mult * d),
            ff2: Linear::zeros(cfg.ffn_mult * d, d),
            lnf_g: ones(),
            lnf_b: Mat::zeros(1, d),
            out: Linear::zeros(d, vocab_len),
        })
    }

    pub fn init<R: Rng + ?Sized>(vocab_len: usize, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(vocab_len, cfg)?;
        let d = cfg.model_dim;
        let h = cfg.ffn_mult * d;
        p.tok_emb = normal_mat(vocab_len, d, 0.1, rng);
        p.pos_emb = normal_mat(cfg.max_seq, d, 0.1, rng);
        p.qkv = Linear::init(d, 3 * d, rng);
        p.proj = Linear::init(d, d, rng);
        p.ff1 = Linear::init(d, h, rng);
        p.ff2 = Linear::init(h, d, rng);
        p.out = Linear::init(d, vocab_len, rng);
        Ok(p)
    }

    pub fn model_dim(&self) -> usize {
        self.tok_emb.cols()
    }

    pub fn vocab_len(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn max_seq(&self) -> usize {
        self.pos_emb.rows()
    }

    fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }
}

/// One input row of a prompted sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Row {
    Token(TokenId),
    Soft(usize),
}

/// Hard tokens and soft rows (in the configured order), then BOS and the
/// caption. Targets are the caption followed by EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedSequence<T> {
    pub hard: Vec<TokenId>,
    pub soft: Mat<T>,
    pub caption: Vec<TokenId>,
    pub order: PromptOrder,
}

impl<T: Scalar> PromptedSequence<T> {
    pub fn new(hard: &HardPrompt, soft: &SoftPrompt<T>, caption: &[TokenId], order: PromptOrder) -> Self {
        Self {
            hard: hard.tokens.clone(),
            soft: soft.rows().clone(),
            caption: caption.to_vec(),
            order,
        }
    }

    /// Rows before BOS.
    pub fn prefix_len(&self) -> usize {
        self.hard.len() + self.soft.rows()
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + 1 + self.caption.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rows(&self) -> Vec<Row> {
        let hard = self.hard.iter().map(|&t| Row::Token(t));
        let soft = (0..self.soft.rows()).map(Row::Soft);
        let mut out: Vec<Row> = match self.order {
            PromptOrder::HardFirst => hard.chain(soft).collect(),
            PromptOrder::SoftFirst => soft.chain(hard).collect(),
        };
        out.push(Row::Token(BOS));
        out.extend(self.caption.iter().map(|&t| Row::Token(t)));
        out
    }

    /// Per-position next-token targets; `None` on prompt positions.
    pub fn targets(&self) -> Vec<Option<TokenId>> {
        let mut t = vec![None; self.prefix_len()];
        t.extend(self.caption.iter().map(|&c| Some(c)));
        t.push(Some(EOS));
        t
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    rows: Vec<Row>,
    /// First row whose logits were computed.
    from: usize,
    ln1: LayerNormCache<T>,
    h1: Mat<T>,
    qkv: Mat<T>,
    /// Attention probabilities, one `(L − from)×L` matrix per head.
    probs: Vec<Mat<T>>,
    attn: Mat<T>,
    ln2: LayerNormCache<T>,
    h2: Mat<T>,
    pre_act: Mat<T>,
    act: Mat<T>,
    lnf: LayerNormCache<T>,
    h3: Mat<T>,
}

fn embed<T: Scalar>(params: &DecoderParams<T>, seq: &PromptedSequence<T>) -> Result<(Vec<Row>, Mat<T>)> {
    let d = params.model_dim();
    if seq.soft.rows() > 0 && seq.soft.cols() != d {
        return Err(Error::Input(format!("soft prompt width {} differs from model width {d}", seq.soft.cols())));
    }
    if seq.len() > params.max_seq() {
        return Err(Error::Input(format!(
            "sequence of {} rows exceeds max_seq {}",
            seq.len(),
            params.max_seq()
        )));
    }
    let rows = seq.rows();
    let mut x = Mat::zeros(rows.len(), d);
    for (i, row) in rows.iter().enumerate() {
        let src = match *row {
            Row::Token(t) => {
                if t as usize >= params.vocab_len() {
                    return Err(Error::Input(format!("token id {t} outside vocabulary")));
                }
                params.tok_emb.row(t as usize)
            }
            Row::Soft(k) => seq.soft.row(k),
        };
        for ((o, &a), &p) in x.row_mut(i).iter_mut().zip(src).zip(params.pos_emb.row(i)) {
            *o = a + p;
        }
    }
    Ok((rows, x))
}

/// Causal attention over `qkv` for the query rows `from..L`; writes the
/// per-head outputs into `attn` (one row per query) and returns the
/// probabilities.
fn attend<T: Scalar>(qkv: &Mat<T>, heads: usize, from: usize, attn: &mut Mat<T>) -> Vec<Mat<T>> {
    let len = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let nq = len - from;
    let q_all = qkv.row_block(from, nq).to_mat();
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = q_all.col_block(h * dh, dh);
        let k = qkv.col_block(d + h * dh, dh);
        let v = qkv.col_block(2 * d + h * dh, dh);
        let mut p = matmul(q, k.t());
        for i in 0..nq {
            let visible = from + i + 1;
            let row = p.row_mut(i);
            row[..visible].iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|s| *s = T::zero());
        }
        gemm(T::one(), p.view(), v, T::zero(), attn.col_block_mut(h * dh, dh));
        probs.push(p);
    }
    probs
}

fn ffn_forward<T: Scalar>(params: &DecoderParams<T>, h2: &Mat<T>) -> (Mat<T>, Mat<T>, Mat<T>) {
    let pre_act = params.ff1.forward(h2);
    let mut act = pre_act.clone();
    act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
    let f = params.ff2.forward(&act);
    (pre_act, act, f)
}

/// Logits for every position, with the cache needed by [`backward`].
pub fn forward_with_cache<T: Scalar>(
    params: &DecoderParams<T>,
    seq: &PromptedSequence<T>,
) -> Result<(Mat<T>, ForwardCache<T>)> {
    forward_from(params, seq, 0)
}

/// Logits for rows `from..L` only. With a single block, earlier rows matter
/// only through their keys and values, so everything after the attention
/// runs on the query rows alone.
pub fn forward_from<T: Scalar>(
    params: &DecoderParams<T>,
    seq: &PromptedSequence<T>,
    from: usize,
) -> Result<(Mat<T>, ForwardCache<T>)> {
    let (rows, x0) = embed(params, seq)?;
    let len = rows.len();
    if from >= len {
        return Err(Error::Input(format!("first logit row {from} outside a sequence of {len} rows")));
    }
    let d = params.model_dim();
    let nq = len - from;

    let (h1, ln1) = layer_norm(&x0, params.ln1_g.as_slice(), params.ln1_b.as_slice());
    let qkv = params.qkv.forward(&h1);
    let mut attn = Mat::zeros(nq, d);
    let probs = attend(&qkv, params.heads, from, &mut attn);
    let mut x1 = params.proj.forward(&attn);
    x1.add_assign(&x0.row_block(from, nq).to_mat());

    let (h2, ln2) = layer_norm(&x1, params.ln2_g.as_slice(), params.ln2_b.as_slice());
    let (pre_act, act, mut x2) = ffn_forward(params, &h2);
    x2.add_assign(&x1);

    let (h3, lnf) = layer_norm(&x2, params.lnf_g.as_slice(), params.lnf_b.as_slice());
    let logits = params.out.forward(&h3);
    let cache = ForwardCache {
        rows,
        from,
        ln1,
        h1,
        qkv,
        probs,
        attn,
        ln2,
        h2,
        pre_act,
        act,
        lnf,
        h3,
    };
    Ok((logits, cache))
}

/// Logits matrix, positions × vocabulary.
pub fn forward<T: Scalar>(params: &DecoderParams<T>, seq: &PromptedSequence<T>) -> Result<Mat<T>> {
    Ok(forward_with_cache(params, seq)?.0)
}

/// Logits of the last position only.
pub fn forward_last<T: Scalar>(params: &DecoderParams<T>, seq: &PromptedSequence<T>) -> Result<Vec<T>> {
    Ok(forward_from(params, seq, seq.len().saturating_sub(1))?.0.into_vec())
}

fn check_targets<T: Scalar>(logits: &Mat<T>, targets: &[Option<TokenId>]) -> Result<usize> {
    if targets.len() != logits.rows() {
        return Err(Error::Input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::Input("loss mask selects no positions".into()));
    }
    if let Some(&t) = targets.iter().flatten().find(|&&t| t as usize >= logits.cols()) {
        return Err(Error::Input(format!("target {t} outside vocabulary")));
    }
    Ok(count)
}

/// Mean negative log-likelihood over the positions with a target.
pub fn ce_loss<T: Scalar>(logits: &Mat<T>, targets: &[Option<TokenId>]) -> Result<T> {
    let count = check_targets(logits, targets)?;
    let mut total = T::zero();
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            total -= log_softmax(logits.row(r))[t as usize];
        }
    }
    Ok(total / T::from_usize(count).unwrap())
}

/// Loss and its gradient with respect to the logits.
pub fn ce_loss_grad<T: Scalar>(logits: &Mat<T>, targets: &[Option<TokenId>]) -> Result<(T, Mat<T>)> {
    let count = check_targets(logits, targets)?;
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut total = T::zero();
    let mut dlogits = Mat::zeros(logits.rows(), logits.cols());
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let lp = log_softmax(logits.row(r));
            total -= lp[t as usize];
            for (g, &l) in dlogits.row_mut(r).iter_mut().zip(&lp) {
                *g = l.exp() * inv;
            }
            dlogits.row_mut(r)[t as usize] -= inv;
        }
    }
    Ok((total * inv, dlogits))
}

/// Backpropagates `dlogits` (one row per logit row in `cache`); accumulates
/// into `grad` and returns the gradient of the soft-prompt rows.
pub fn backward<T: Scalar>(
    params: &DecoderParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Mat<T>,
    grad: &mut DecoderParams<T>,
) -> Mat<T> {
    let len = cache.rows.len();
    let from = cache.from;
    let d = params.model_dim();
    let heads = params.heads;
    let dh = params.head_dim();
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());

    let dh3 = params.out.backward(&cache.h3, dlogits, &mut grad.out);
    let dx2 = layer_norm_backward(
        &cache.lnf,
        params.lnf_g.as_slice(),
        &dh3,
        grad.lnf_g.as_mut_slice(),
        grad.lnf_b.as_mut_slice(),
    );

    let mut dact = params.ff2.backward(&cache.act, &dx2, &mut grad.ff2);
    for (g, &u) in dact.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
        *g *= gelu_grad(u);
    }
    let dh2 = params.ff1.backward(&cache.h2, &dact, &mut grad.ff1);
    let mut dx1 = layer_norm_backward(
        &cache.ln2,
        params.ln2_g.as_slice(),
        &dh2,
        grad.ln2_g.as_mut_slice(),
        grad.ln2_b.as_mut_slice(),
    );
    dx1.add_assign(&dx2);

    let dattn = params.proj.backward(&cache.attn, &dx1, &mut grad.proj);
    let mut dqkv = Mat::zeros(len, 3 * d);
    for h in 0..heads {
        let p = &cache.probs[h];
        let q = cache.qkv.col_block(h * dh, dh);
        let k = cache.qkv.col_block(d + h * dh, dh);
        let v = cache.qkv.col_block(2 * d + h * dh, dh);
        let dout = dattn.col_block(h * dh, dh);
        gemm(T::one(), p.view().t(), dout, T::zero(), dqkv.col_block_mut(2 * d + h * dh, dh));
        let mut ds = matmul(dout, v.t());
        for i in 0..ds.rows() {
            let last = from + i;
            let pr = p.row(i);
            let row = ds.row_mut(i);
            let dot = pr[..=last].iter().zip(&row[..=last]).map(|(&a, &b)| a * b).sum::<T>();
            for j in 0..len {
                row[j] = if j <= last { pr[j] * (row[j] - dot) * scale } else { T::zero() };
            }
        }
        let q = q.row_block(from, len - from);
        gemm(T::one(), ds.view(), k, T::zero(), dqkv.col_block_mut(h * dh, dh).row_block_mut(from, len - from));
        gemm(T::one(), ds.view().t(), q, T::zero(), dqkv.col_block_mut(d + h * dh, dh));
    }
    let dh1 = params.qkv.backward(&cache.h1, &dqkv, &mut grad.qkv);
    let mut dx0 = layer_norm_backward(
        &cache.ln1,
        params.ln1_g.as_slice(),
        &dh1,
        grad.ln1_g.as_mut_slice(),
        grad.ln1_b.as_mut_slice(),
    );
    for (i, r) in (from..len).enumerate() {
        dx0.row_mut(r).iter_mut().zip(dx1.row(i)).for_each(|(a, &b)| *a += b);
    }

    let soft_rows = cache.rows.iter().filter(|r| matches!(r, Row::Soft(_))).count();
    let mut dsoft = Mat::zeros(soft_rows, d);
    for (i, row) in cache.rows.iter().enumerate() {
        let g = dx0.row(i);
        grad.pos_emb.row_mut(i).iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        let dst = match *row {
            Row::Token(t) => grad.tok_emb.row_mut(t as usize),
            Row::Soft(k) => dsoft.row_mut(k),
        };
        dst.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }
    dsoft
}

/// Mapping network plus decoder: everything the captioner trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Captioner<T> {
    pub map: MappingNet<T>,
    pub dec: DecoderParams<T>,
}

impl_param_set!(Captioner {} nested { map, dec });

/// One training example: the (possibly augmented) embedding fed to the
/// mapping network, the hard prompt and the target caption.
#[derive(Debug, Clone)]
pub struct Example<'a, T> {
    pub embedding: &'a [T],
    pub hard: &'a HardPrompt,
    pub caption: &'a [TokenId],
}

impl<T: Scalar> Captioner<T> {
    fn prepare(&self, ex: &Example<'_, T>) -> Result<(PromptedSequence<T>, SoftPromptCache<T>)> {
        let (soft, cache) = self.map.forward(ex.embedding)?;
        Ok((PromptedSequence::new(ex.hard, &soft, ex.caption, self.dec.order), cache))
    }

    pub fn loss(&self, ex: &Example<'_, T>) -> Result<T> {
        let (seq, _) = self.prepare(ex)?;
        let from = seq.prefix_len();
        ce_loss(&forward_from(&self.dec, &seq, from)?.0, &seq.targets()[from..])
    }

    /// Mean loss over a batch with gradients for the mapping network and
    /// decoder, accumulated in batch order.
    pub fn loss_and_grad(&self, batch: &[Example<'_, T>]) -> Result<(T, Captioner<T>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut grad = self.zeros_like();
        let mut total = T::zero();
        let inv = T::one() / T::from_usize(batch.len()).unwrap();
        for ex in batch {
            let (seq, soft_cache) = self.prepare(ex)?;
            // Prompt rows carry no targets, so their logits are skipped.
            let from = seq.prefix_len();
            let (logits, cache) = forward_from(&self.dec, &seq, from)?;
            let (loss, mut dlogits) = ce_loss_grad(&logits, &seq.targets()[from..])?;
            dlogits.scale(inv);
            total += loss;
            let dsoft = backward(&self.dec, &cache, &dlogits, &mut grad.dec);
            self.map.backward(&soft_cache, &dsoft, &mut grad.map);
        }
        Ok((total * inv, grad))
    }

    /// Caption for an embedding and hard prompt.
    pub fn caption(&self, embedding: &[T], hard: &HardPrompt, beam: usize, max_len: usize) -> Result<Caption> {
        let soft = self.map.forward(embedding)?.0;
        decode(&self.dec, &soft, hard, beam, max_len)
    }
}

/// Ids that may never be generated.
pub(crate) fn is_banned(t: TokenId) -> bool {
    t == PAD || t == BOS
}
