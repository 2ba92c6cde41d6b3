//! Contrastive dual encoder: a mean-pooled text encoder and an audio encoder,
//! each a two-layer head followed by L2 normalization, trained with a
//! symmetric InfoNCE loss and a learnable temperature.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_param_set;
use crate::nn::{self, Mlp2, Mlp2Cache};
use crate::optim::{Adam, AdamHyper};
use crate::params::ParamSet;
use crate::retrieval::{Embedding, EmbeddingIndex};
use crate::rng::{self, Stream};
use crate::scalar::{lit, Scalar};
use crate::synthworld::{Caption, Split, TokenId};
use crate::tensor::{matmul, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualEncoderConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub init_temperature: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            token_dim: 32,
            hidden: 64,
            init_temperature: 0.07,
            iterations: 3000,
            batch_size: 64,
            lr: 3e-4,
        }
    }
}

/// Parameters of both encoders plus the log temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder<T> {
    pub tok_emb: Mat<T>,
    pub text_head: Mlp2<T>,
    pub audio_head: Mlp2<T>,
    /// 1×1.
    pub log_temp: Mat<T>,
}

impl_param_set!(DualEncoder { tok_emb: Weight, log_temp: Scalar } nested { text_head, audio_head });

/// One (iteration, loss) point of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

struct TextForward<T> {
    pooled: Mat<T>,
    cache: Mlp2Cache<T>,
    out: Mat<T>,
    norms: Vec<T>,
}

struct AudioForward<T> {
    input: Mat<T>,
    cache: Mlp2Cache<T>,
    out: Mat<T>,
    norms: Vec<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn init(vocab_len: usize, audio_dim: usize, cfg: &DualEncoderConfig, rng: &mut Stream) -> Self {
        Self {
            tok_emb: nn::normal_mat(vocab_len, cfg.token_dim, 1.0, rng),
            text_head: Mlp2::init(cfg.token_dim, cfg.hidden, cfg.embed_dim, rng),
            audio_head: Mlp2::init(audio_dim, cfg.hidden, cfg.embed_dim, rng),
            log_temp: Mat::from_vec(1, 1, vec![lit(cfg.init_temperature.ln())]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text_head.l2.output_dim()
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_head.l1.input_dim()
    }

    pub fn vocab_len(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn temperature(&self) -> T {
        self.log_temp.get(0, 0).exp()
    }

    fn pool(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Err(Error::Input("cannot encode an empty caption".into()));
        }
        let d = self.tok_emb.cols();
        let mut acc = vec![T::zero(); d];
        for &t in tokens {
            if t as usize >= self.vocab_len() {
                return Err(Error::Input(format!("token {t} outside vocabulary")));
            }
            for (a, &e) in acc.iter_mut().zip(self.tok_emb.row(t as usize)) {
                *a += e;
            }
        }
        let n = T::from_usize(tokens.len()).unwrap();
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    fn forward_text(&self, captions: &[&[TokenId]]) -> Result<TextForward<T>> {
        let d = self.tok_emb.cols();
        let mut pooled = Mat::zeros(captions.len(), d);
        for (i, c) in captions.iter().enumerate() {
            pooled.row_mut(i).copy_from_slice(&self.pool(c)?);
        }
        let (raw, cache) = self.text_head.forward(&pooled);
        let (out, norms) = nn::normalize_rows(&raw);
        Ok(TextForward {
            pooled,
            cache,
            out,
            norms,
        })
    }

    fn forward_audio(&self, clips: &[&[f64]]) -> Result<AudioForward<T>> {
        let dim = self.audio_dim();
        let mut input = Mat::zeros(clips.len(), dim);
        for (i, f) in clips.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::Input(format!("audio has {} features, expected {dim}", f.len())));
            }
            for (x, &v) in input.row_mut(i).iter_mut().zip(f.iter()) {
                *x = lit(v);
            }
        }
        let (raw, cache) = self.audio_head.forward(&input);
        let (out, norms) = nn::normalize_rows(&raw);
        Ok(AudioForward {
            input,
            cache,
            out,
            norms,
        })
    }

    /// Text embedding of a token sequence.
    pub fn encode_tokens(&self, tokens: &[TokenId]) -> Result<Embedding<T>> {
        let f = self.forward_text(&[tokens])?;
        Ok(Embedding::new_unchecked(f.out.row(0).to_vec()))
    }

    pub fn encode_text(&self, caption: &Caption) -> Result<Embedding<T>> {
        self.encode_tokens(caption.tokens())
    }

    pub fn encode_audio(&self, features: &[f64]) -> Result<Embedding<T>> {
        let f = self.forward_audio(&[features])?;
        Ok(Embedding::new_unchecked(f.out.row(0).to_vec()))
    }

    /// Embeds many captions at once.
    pub fn encode_text_batch(&self, captions: &[&[TokenId]]) -> Result<Vec<Embedding<T>>> {
        let f = self.forward_text(captions)?;
        Ok((0..captions.len())
            .map(|i| Embedding::new_unchecked(f.out.row(i).to_vec()))
            .collect())
    }

    pub fn encode_audio_batch(&self, clips: &[&[f64]]) -> Result<Vec<Embedding<T>>> {
        let f = self.forward_audio(clips)?;
        Ok((0..clips.len())
            .map(|i| Embedding::new_unchecked(f.out.row(i).to_vec()))
            .collect())
    }

    /// Symmetric InfoNCE over aligned `(audio, caption)` pairs.
    pub fn infonce_loss(&self, batch: &[(&[f64], &[TokenId])]) -> Result<T> {
        Ok(self.infonce_loss_and_grad(batch)?.0)
    }

    /// Loss and exact gradient with respect to every parameter.
    pub fn infonce_loss_and_grad(&self, batch: &[(&[f64], &[TokenId])]) -> Result<(T, DualEncoder<T>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty InfoNCE batch".into()));
        }
        let clips: Vec<&[f64]> = batch.iter().map(|p| p.0).collect();
        let caps: Vec<&[TokenId]> = batch.iter().map(|p| p.1).collect();
        let af = self.forward_audio(&clips)?;
        let tf = self.forward_text(&caps)?;
        let sims = matmul(af.out.view(), tf.out.view().t());
        let scale = (-self.log_temp.get(0, 0)).exp();
        let mut logits = sims.clone();
        logits.scale(scale);
        let (loss, dlogits) = infonce_from_logits(&logits);

        let mut grad = self.zeros_like();
        // logits = exp(-log_temp)·sims
        let dlog_temp = -dlogits
            .as_slice()
            .iter()
            .zip(logits.as_slice())
            .map(|(&d, &l)| d * l)
            .sum::<T>();
        grad.log_temp.set(0, 0, dlog_temp);
        let mut dsims = dlogits;
        dsims.scale(scale);
        let da_out = matmul(dsims.view(), tf.out.view());
        let dt_out = matmul(dsims.view().t(), af.out.view());

        let da_raw = nn::normalize_rows_backward(&af.out, &af.norms, &da_out);
        self.audio_head
            .backward(&af.input, &af.cache, &da_raw, &mut grad.audio_head);

        let dt_raw = nn::normalize_rows_backward(&tf.out, &tf.norms, &dt_out);
        let dpooled = self
            .text_head
            .backward(&tf.pooled, &tf.cache, &dt_raw, &mut grad.text_head);
        for (i, c) in caps.iter().enumerate() {
            let n = T::from_usize(c.len()).unwrap();
            for &t in c.iter() {
                for (g, &d) in grad.tok_emb.row_mut(t as usize).iter_mut().zip(dpooled.row(i)) {
                    *g += d / n;
                }
            }
        }
        Ok((loss, grad))
    }
}

/// Symmetric InfoNCE of a square logit matrix with targets on the diagonal.
/// Returns the loss and its gradient with respect to the logits.
pub fn infonce_from_logits<T: Scalar>(logits: &Mat<T>) -> (T, Mat<T>) {
    let b = logits.rows();
    assert_eq!(b, logits.cols(), "InfoNCE logits must be square");
    let bt = T::from_usize(b).unwrap();
    let half = lit::<T>(0.5);
    let mut grad = Mat::zeros(b, b);
    let mut loss = T::zero();
    // rows: audio → text
    for i in 0..b {
        let mut p = logits.row(i).to_vec();
        let ls = nn::log_softmax(&p);
        loss -= ls[i] * half / bt;
        nn::softmax_in_place(&mut p);
        for (j, &pj) in p.iter().enumerate() {
            let target = if i == j { T::one() } else { T::zero() };
            grad.set(i, j, grad.get(i, j) + half * (pj - target) / bt);
        }
    }
    // columns: text → audio
    for j in 0..b {
        let mut p: Vec<T> = (0..b).map(|i| logits.get(i, j)).collect();
        let ls = nn::log_softmax(&p);
        loss -= ls[j] * half / bt;
        nn::softmax_in_place(&mut p);
        for (i, &pi) in p.iter().enumerate() {
            let target = if i == j { T::one() } else { T::zero() };
            grad.set(i, j, grad.get(i, j) + half * (pi - target) / bt);
        }
    }
    (loss, grad)
}

/// InfoNCE of a similarity matrix at a fixed temperature.
pub fn infonce_from_similarities<T: Scalar>(sims: &Mat<T>, temperature: T) -> T {
    let mut logits = sims.clone();
    logits.scale(T::one() / temperature);
    infonce_from_logits(&logits).0
}

/// Trains the dual encoder with Adam on random batches of the pretraining split.
pub fn train_dual_encoder<T: Scalar>(
    split: &Split,
    vocab_len: usize,
    cfg: &DualEncoderConfig,
    seed: u64,
) -> Result<(DualEncoder<T>, Vec<LossPoint>)> {
    let records = split.records()?;
    if records.is_empty() {
        return Err(Error::Input("pretraining split is empty".into()));
    }
    let audio_dim = records[0].audio.len();
    let mut init_rng = rng::sub_stream(seed, rng::ns::INIT, 0);
    let mut params = DualEncoder::<T>::init(vocab_len, audio_dim, cfg, &mut init_rng);
    let mut opt = Adam::new(
        &params,
        AdamHyper {
            lr: cfg.lr,
            ..AdamHyper::default()
        },
    );
    let mut batch_rng = rng::stream(seed, rng::ns::PRETRAIN);
    let mut order: Vec<usize> = Vec::new();
    let batch_size = cfg.batch_size.min(records.len()).max(1);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if order.is_empty() {
                order = (0..records.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            idx.push(order.pop().unwrap());
        }
        let batch: Vec<(&[f64], &[TokenId])> = idx
            .iter()
            .map(|&i| (records[i].audio.as_slice(), records[i].captions[0].tokens()))
            .collect();
        let (loss, grad) = params.infonce_loss_and_grad(&batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric {
                step: it,
                message: format!("dual-encoder loss diverged ({loss})"),
            });
        }
        opt.step(&mut params, &grad, cfg.lr);
        curve.push(LossPoint {
            iteration: it,
            loss: loss.to_f64_lossy(),
        });
    }
    Ok((params, curve))
}

/// Mean paired cosine and the distance between modality centroids.
pub fn modality_gap_from_embeddings<T: Scalar>(audio: &[Embedding<T>], text: &[Embedding<T>]) -> Result<(f64, f64)> {
    if audio.is_empty() || audio.len() != text.len() {
        return Err(Error::Input("modality gap needs a nonempty aligned set".into()));
    }
    let n = audio.len() as f64;
    let d = audio[0].dim();
    let mut mean_cos = 0.0;
    let mut ca = vec![0.0; d];
    let mut ct = vec![0.0; d];
    for (a, t) in audio.iter().zip(text) {
        mean_cos += crate::tensor::dot(a.as_slice(), t.as_slice()).to_f64_lossy();
        for k in 0..d {
            ca[k] += a.as_slice()[k].to_f64_lossy();
            ct[k] += t.as_slice()[k].to_f64_lossy();
        }
    }
    let dist = ca
        .iter()
        .zip(&ct)
        .map(|(x, y)| ((x - y) / n).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((mean_cos / n, dist))
}

pub fn modality_gap<T: Scalar>(params: &DualEncoder<T>, pairs: &[(&[f64], &[TokenId])]) -> Result<(f64, f64)> {
    let clips: Vec<&[f64]> = pairs.iter().map(|p| p.0).collect();
    let caps: Vec<&[TokenId]> = pairs.iter().map(|p| p.1).collect();
    let a = params.encode_audio_batch(&clips)?;
    let t = params.encode_text_batch(&caps)?;
    modality_gap_from_embeddings(&a, &t)
}

/// Fraction of pairs whose nearest text (over the pairs' captions) is their
/// own caption. Retrieving a token-identical duplicate counts as a hit.
pub fn audio_to_text_recall_at_1<T: Scalar>(params: &DualEncoder<T>, pairs: &[(&[f64], &[TokenId])]) -> Result<f64> {
    let clips: Vec<&[f64]> = pairs.iter().map(|p| p.0).collect();
    let caps: Vec<&[TokenId]> = pairs.iter().map(|p| p.1).collect();
    let audio = params.encode_audio_batch(&clips)?;
    let text = params.encode_text_batch(&caps)?;
    let index = EmbeddingIndex::new(text.into_iter().enumerate().collect())?;
    let mut hits = 0usize;
    for (i, a) in audio.iter().enumerate() {
        let best = index.top_k(a, 1)?[0].0;
        if best == i || caps[best] == caps[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests;
