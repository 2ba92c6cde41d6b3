//! Soft prompts from augmented embeddings, and hard prompts naming
//! retrieved sound events.
//!
//! Every randomized operation has a `_with` form that takes its random draws
//! explicitly, so the selection rules can be tested without a generator.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointspace::DualEncoder;
use crate::nn::{Mlp2, Mlp2Cache};
use crate::retrieval::{Embedding, EmbeddingIndex};
use crate::scalar::{lit, Scalar};
use crate::synthworld::{EventType, TokenId, Vocab, COMMA};
use crate::tensor::Mat;

/// Two affine layers with tanh, `d → hidden → K·d_dec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNet<T> {
    pub mlp: Mlp2<T>,
    pub prompt_len: usize,
    pub model_dim: usize,
}

impl<T: Scalar> crate::params::ParamSet<T> for MappingNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, crate::params::ParamKind, &Mat<T>)) {
        self.mlp.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, crate::params::ParamKind, &mut Mat<T>)) {
        self.mlp.visit_mut(f)
    }
}

impl<T: Scalar> MappingNet<T> {
    pub fn init<R: Rng + ?Sized>(
        embed_dim: usize,
        hidden: usize,
        prompt_len: usize,
        model_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp2::init(embed_dim, hidden, prompt_len * model_dim, rng),
            prompt_len,
            model_dim,
        }
    }

    pub fn zeros(embed_dim: usize, hidden: usize, prompt_len: usize, model_dim: usize) -> Self {
        Self {
            mlp: Mlp2::zeros(embed_dim, hidden, prompt_len * model_dim),
            prompt_len,
            model_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.l1.input_dim()
    }

    /// Soft prompt plus the activations needed by [`MappingNet::backward`].
    pub fn forward(&self, v: &[T]) -> Result<(SoftPrompt<T>, SoftPromptCache<T>)> {
        if v.len() != self.embed_dim() {
            return Err(Error::Input(format!(
                "mapping network expects dimension {}, got {}",
                self.embed_dim(),
                v.len()
            )));
        }
        let input = Mat::from_vec(1, v.len(), v.to_vec());
        let (out, cache) = self.mlp.forward(&input);
        let rows = Mat::from_vec(self.prompt_len, self.model_dim, out.into_vec());
        Ok((SoftPrompt(rows), SoftPromptCache { input, cache }))
    }

    /// Accumulates parameter gradients given the gradient of the soft prompt.
    pub fn backward(&self, cache: &SoftPromptCache<T>, dprompt: &Mat<T>, grad: &mut MappingNet<T>) {
        let dy = Mat::from_vec(1, dprompt.as_slice().len(), dprompt.as_slice().to_vec());
        self.mlp.backward(&cache.input, &cache.cache, &dy, &mut grad.mlp);
    }
}

#[derive(Debug, Clone)]
pub struct SoftPromptCache<T> {
    input: Mat<T>,
    cache: Mlp2Cache<T>,
}

/// K rows of decoder-width vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt<T>(pub Mat<T>);

impl<T: Scalar> SoftPrompt<T> {
    pub fn rows(&self) -> &Mat<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Applies the mapping network and reshapes its output into K rows.
pub fn soft_prompt<T: Scalar>(map: &MappingNet<T>, v: &[T]) -> Result<SoftPrompt<T>> {
    Ok(map.forward(v)?.0)
}

/// Event-name token sequence with the retained event ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HardPrompt {
    pub tokens: Vec<TokenId>,
    pub events: Vec<usize>,
}

impl HardPrompt {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Renders "there are e1 , e2 in the audio"; no events gives an empty prompt.
pub fn hard_prompt(event_ids: &[usize], events: &[EventType], vocab: &Vocab) -> Result<HardPrompt> {
    if event_ids.is_empty() {
        return Ok(HardPrompt::default());
    }
    let mut tokens = vec![vocab.require("there")?, vocab.require("are")?];
    for (i, &e) in event_ids.iter().enumerate() {
        let event = events
            .get(e)
            .ok_or_else(|| Error::Input(format!("unknown event id {e}")))?;
        if i > 0 {
            tokens.push(COMMA);
        }
        for w in event.words() {
            tokens.push(vocab.require(w)?);
        }
    }
    for w in ["in", "the", "audio"] {
        tokens.push(vocab.require(w)?);
    }
    Ok(HardPrompt {
        tokens,
        events: event_ids.to_vec(),
    })
}

/// Keeps each event iff its uniform draw is at least `beta`.
pub fn prompt_dropout_with(event_ids: &[usize], beta: f64, uniforms: &[f64]) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Input(format!("dropout rate {beta} outside [0, 1]")));
    }
    assert_eq!(event_ids.len(), uniforms.len(), "one uniform per event");
    Ok(event_ids
        .iter()
        .zip(uniforms)
        .filter(|(_, &u)| u >= beta)
        .map(|(&e, _)| e)
        .collect())
}

/// Independent Bernoulli dropout of each event with rate `beta`.
pub fn prompt_dropout<R: Rng + ?Sized>(event_ids: &[usize], beta: f64, rng: &mut R) -> Result<Vec<usize>> {
    let uniforms: Vec<f64> = event_ids.iter().map(|_| rng.random::<f64>()).collect();
    prompt_dropout_with(event_ids, beta, &uniforms)
}

/// `e + noise`, not renormalized.
pub fn embed_augment_with<T: Scalar>(e: &Embedding<T>, noise: &[T]) -> Vec<T> {
    assert_eq!(e.dim(), noise.len());
    e.as_slice().iter().zip(noise).map(|(&x, &n)| x + n).collect()
}

/// Adds i.i.d. normal noise with standard deviation `sigma`.
pub fn embed_augment<T: Scalar, R: Rng + ?Sized>(e: &Embedding<T>, sigma: f64, rng: &mut R) -> Result<Vec<T>> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Input(format!("noise std {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(e.as_slice().to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|err| Error::Input(err.to_string()))?;
    let noise: Vec<T> = (0..e.dim()).map(|_| lit(normal.sample(rng))).collect();
    Ok(embed_augment_with(e, &noise))
}

/// Keys of the candidate set for instance replacement: the `n` nearest
/// corpus entries to `text_key`. With `include_self` the query itself is
/// guaranteed membership (it displaces the last candidate on an exact tie).
pub fn replacement_candidates<T: Scalar>(
    text_key: usize,
    index: &EmbeddingIndex<T>,
    n: usize,
    include_self: bool,
) -> Result<Vec<usize>> {
    let query = index
        .get(text_key)
        .ok_or_else(|| Error::Input(format!("text key {text_key} not in corpus index")))?;
    if n == 0 || n > index.len() {
        return Err(Error::Input(format!("N = {n} outside 1..={}", index.len())));
    }
    if include_self {
        let mut keys: Vec<usize> = index.top_k(&query, n)?.into_iter().map(|p| p.0).collect();
        if !keys.contains(&text_key) {
            keys.pop();
            keys.insert(0, text_key);
        }
        Ok(keys)
    } else {
        if index.len() < n + 1 {
            return Err(Error::Input(format!("N = {n} leaves no room to exclude the query")));
        }
        let keys = index
            .top_k(&query, n + 1)?
            .into_iter()
            .map(|p| p.0)
            .filter(|&k| k != text_key)
            .take(n)
            .collect();
        Ok(keys)
    }
}

/// Picks candidate `choice` (rank order) from the candidate set.
pub fn instance_replace_with<T: Scalar>(
    text_key: usize,
    index: &EmbeddingIndex<T>,
    n: usize,
    include_self: bool,
    choice: usize,
) -> Result<Embedding<T>> {
    let keys = replacement_candidates(text_key, index, n, include_self)?;
    let key = *keys
        .get(choice)
        .ok_or_else(|| Error::Input(format!("choice {choice} beyond {} candidates", keys.len())))?;
    Ok(index.get(key).expect("candidate keys come from the index"))
}

/// Replaces the query's embedding with a uniformly chosen member of its
/// top-`n` neighbour set.
pub fn instance_replace<T: Scalar, R: Rng + ?Sized>(
    text_key: usize,
    index: &EmbeddingIndex<T>,
    n: usize,
    include_self: bool,
    rng: &mut R,
) -> Result<Embedding<T>> {
    let keys = replacement_candidates(text_key, index, n, include_self)?;
    let key = keys[rng.random_range(0..keys.len())];
    Ok(index.get(key).expect("candidate keys come from the index"))
}

/// Index of event-label embeddings, each event name encoded as a one-event
/// caption of its bare words.
pub fn event_label_index<T: Scalar>(
    encoder: &DualEncoder<T>,
    events: &[EventType],
    vocab: &Vocab,
) -> Result<EmbeddingIndex<T>> {
    let names: Vec<Vec<TokenId>> = events
        .iter()
        .map(|e| e.words().map(|w| vocab.require(w)).collect())
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = names.iter().map(Vec::as_slice).collect();
    let embs = encoder.encode_text_batch(&refs)?;
    EmbeddingIndex::new(events.iter().map(|e| e.id).zip(embs).collect())
}
