//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use super::{forward_last, is_banned, DecoderParams, PromptedSequence};
use crate::error::{Error, Result};
use crate::nn::log_softmax;
use crate::prompts::{HardPrompt, SoftPrompt};
use crate::scalar::Scalar;
use crate::synthworld::{Caption, TokenId, EOS};

fn sequence<T: Scalar>(
    params: &DecoderParams<T>,
    soft: &SoftPrompt<T>,
    hard: &HardPrompt,
    tokens: &[TokenId],
) -> PromptedSequence<T> {
    PromptedSequence::new(hard, soft, tokens, params.order)
}

/// Caption length cap after accounting for the prompt's share of `max_seq`.
fn length_cap<T: Scalar>(params: &DecoderParams<T>, soft: &SoftPrompt<T>, hard: &HardPrompt, max_len: usize) -> Result<usize> {
    let prefix = hard.tokens.len() + soft.len();
    if prefix + 1 > params.max_seq() {
        return Err(Error::Input(format!(
            "prompt of {prefix} rows leaves no room under max_seq {}",
            params.max_seq()
        )));
    }
    Ok(max_len.min(params.max_seq() - prefix))
}

fn next_log_probs<T: Scalar>(params: &DecoderParams<T>, seq: &PromptedSequence<T>) -> Result<Vec<f64>> {
    let logits = forward_last(params, seq)?;
    Ok(log_softmax(&logits).into_iter().map(|v| v.to_f64_lossy()).collect())
}

/// Argmax decoding; ties go to the smaller token id.
pub fn greedy<T: Scalar>(params: &DecoderParams<T>, soft: &SoftPrompt<T>, hard: &HardPrompt, max_len: usize) -> Result<Caption> {
    let cap = length_cap(params, soft, hard, max_len)?;
    let mut tokens = Vec::new();
    while tokens.len() < cap {
        let lp = next_log_probs(params, &sequence(params, soft, hard, &tokens))?;
        let mut best: Option<(TokenId, f64)> = None;
        for (t, &v) in lp.iter().enumerate() {
            let t = t as TokenId;
            if !is_banned(t) && best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        let (t, _) = best.ok_or_else(|| Error::Generation("no generatable token".into()))?;
        if t == EOS {
            break;
        }
        tokens.push(t);
    }
    Ok(Caption(tokens))
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over summed token log-probabilities without length
/// normalization. Candidates are ranked by score, then token id, then beam
/// index. An EOS candidate finishes a hypothesis only if it ranks within the
/// beam width. Search stops once the best finished score reaches the best
/// live score, since extending a hypothesis can only lower its score.
pub fn decode<T: Scalar>(
    params: &DecoderParams<T>,
    soft: &SoftPrompt<T>,
    hard: &HardPrompt,
    beam: usize,
    max_len: usize,
) -> Result<Caption> {
    if beam == 0 {
        return Err(Error::Input("beam width must be at least 1".into()));
    }
    let cap = length_cap(params, soft, hard, max_len)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();

    for _ in 0..cap {
        let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let lp = next_log_probs(params, &sequence(params, soft, hard, &hyp.tokens))?;
            for (t, &v) in lp.iter().enumerate() {
                let t = t as TokenId;
                if !is_banned(t) {
                    cands.push((hyp.score + v, t, b));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, t, b)) in cands.iter().enumerate() {
            if t == EOS {
                if rank < beam {
                    finished.push(Hyp {
                        tokens: live[b].tokens.clone(),
                        score,
                    });
                }
            } else {
                let mut tokens = live[b].tokens.clone();
                tokens.push(t);
                next.push(Hyp { tokens, score });
            }
            if next.len() == beam {
                break;
            }
        }
        live = next;

        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= live[0].score {
            break;
        }
    }
    // Hypotheses still live at the cap end there.
    finished.extend(live);
    finished.sort_by(by_score);
    finished
        .into_iter()
        .next()
        .map(|h| Caption(h.tokens))
        .ok_or_else(|| Error::Generation("beam search produced no hypothesis".into()))
}
