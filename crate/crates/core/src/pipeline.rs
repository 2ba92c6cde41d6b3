//! Text-only captioner training, zero-shot inference through the audio
//! encoder, ablations and hyperparameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, greedy, Captioner, DecoderConfig, DecoderParams, Example};
use crate::error::{Error, Result};
use crate::jointspace::{DualEncoder, LossPoint};
use crate::metrics::{evaluate, EvalBatch, EvalItem, MetricReport};
use crate::optim::{warmup_lr, Adam, AdamHyper};
use crate::params::ParamSet;
use crate::prompts::{
    embed_augment, event_label_index, hard_prompt, prompt_dropout, replacement_candidates, HardPrompt, MappingNet,
};
use crate::retrieval::{Embedding, EmbeddingIndex};
use crate::rng;
use crate::scalar::Scalar;
use crate::synthworld::{Caption, Corpus, EventType, Split, SplitName, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerHyper {
    /// Candidate-set size for instance replacement.
    #[serde(rename = "N")]
    pub n: usize,
    /// Retrieved events per hard prompt.
    #[serde(rename = "M")]
    pub m: usize,
    /// Standard deviation of the embedding noise.
    pub sigma: f64,
    /// Soft-prompt length.
    #[serde(rename = "K")]
    pub k: usize,
    /// Prompt dropout rate.
    pub beta: f64,
    pub beam: usize,
    pub use_ia: bool,
    pub use_ea: bool,
    pub use_ap: bool,
    /// Whether the query caption belongs to its own candidate set.
    pub include_self: bool,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub mapping_hidden: usize,
    /// Decoding cap on caption tokens.
    pub max_len: usize,
    pub decoder: DecoderConfig,
}

impl Default for CaptionerHyper {
    fn default() -> Self {
        Self {
            n: 5,
            m: 4,
            sigma: 0.1,
            k: 10,
            beta: 0.6,
            beam: 3,
            use_ia: true,
            use_ea: true,
            use_ap: true,
            include_self: true,
            iterations: 3000,
            batch_size: 32,
            lr: 3e-4,
            warmup: 200,
            weight_decay: 0.02,
            mapping_hidden: 128,
            max_len: 16,
            decoder: DecoderConfig::default(),
        }
    }
}

impl CaptionerHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("N", self.n),
            ("K", self.k),
            ("beam", self.beam),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("mapping_hidden", self.mapping_hidden),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.use_ap && self.m == 0 {
            return Err(Error::Config("M must be positive when hard prompts are on".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta = {} outside [0, 1]", self.beta)));
        }
        let nonnegative = |v: f64| v >= 0.0;
        if !nonnegative(self.sigma) || !nonnegative(self.weight_decay) || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config("sigma, lr and weight_decay must be nonnegative (lr positive)".into()));
        }
        self.decoder.validate()
    }

    pub fn with_setting(&self, s: AblationSetting) -> Self {
        let (ia, ea, ap) = s.flags();
        Self {
            use_ia: ia,
            use_ea: ea,
            use_ap: ap,
            ..self.clone()
        }
    }
}

/// Component subsets: a = none, b = IA, c = EA, d = AP, e = IA+EA, f = all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationSetting {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    /// `(instance replacement, embedding augmentation, hard prompt)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::A => (false, false, false),
            Self::B => (true, false, false),
            Self::C => (false, true, false),
            Self::D => (false, false, true),
            Self::E => (true, true, false),
            Self::F => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
            Self::F => "f",
        }
    }
}

impl fmt::Display for AblationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation setting {s:?} (expected a-f)")))
    }
}

/// Event-label index with what is needed to render hard prompts.
#[derive(Debug, Clone)]
pub struct EventLabels<T> {
    pub index: EmbeddingIndex<T>,
    pub events: Vec<EventType>,
    pub vocab: Vocab,
}

impl<T: Scalar> EventLabels<T> {
    pub fn new(encoder: &DualEncoder<T>, events: &[EventType], vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            index: event_label_index(encoder, events, vocab)?,
            events: events.to_vec(),
            vocab: vocab.clone(),
        })
    }

    /// The `m` events nearest to `e`, most similar first.
    pub fn retrieve(&self, e: &Embedding<T>, m: usize) -> Result<Vec<usize>> {
        Ok(self.index.top_k(e, m.min(self.index.len()))?.into_iter().map(|p| p.0).collect())
    }

    pub fn prompt(&self, event_ids: &[usize]) -> Result<HardPrompt> {
        hard_prompt(event_ids, &self.events, &self.vocab)
    }
}

/// Training captions, one entry per source-train record (duplicates kept),
/// with their embeddings and the per-caption retrieval results the training
/// loop needs.
struct TextIndex<T> {
    captions: Vec<Vec<TokenId>>,
    index: EmbeddingIndex<T>,
    candidates: Vec<Vec<usize>>,
    events: Vec<Vec<usize>>,
}

fn build_text_index<T: Scalar>(
    split: &Split,
    encoder: &DualEncoder<T>,
    labels: &EventLabels<T>,
    hyper: &CaptionerHyper,
) -> Result<TextIndex<T>> {
    let captions: Vec<Vec<TokenId>> = (0..split.len()).map(|i| split.caption(i).tokens().to_vec()).collect();
    let refs: Vec<&[TokenId]> = captions.iter().map(Vec::as_slice).collect();
    let embs = encoder.encode_text_batch(&refs)?;
    let index = EmbeddingIndex::new(embs.iter().cloned().enumerate().collect())?;
    let candidates = if hyper.use_ia {
        (0..captions.len())
            .map(|k| replacement_candidates(k, &index, hyper.n, hyper.include_self))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let events = if hyper.use_ap {
        embs.iter().map(|e| labels.retrieve(e, hyper.m)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(TextIndex {
        captions,
        index,
        candidates,
        events,
    })
}

/// Trains the mapping network and decoder on source-domain text only. The
/// dual encoder is borrowed immutably and the source-train audio stays
/// locked throughout.
pub fn train_captioner<T: Scalar>(
    corpus: &Corpus,
    encoder: &DualEncoder<T>,
    hyper: &CaptionerHyper,
    seed: u64,
) -> Result<(Captioner<T>, Vec<LossPoint>)> {
    hyper.validate()?;
    let split = &corpus.source_train;
    if split.is_empty() {
        return Err(Error::Input("source_train split is empty".into()));
    }
    let _guard = split.lock_audio();
    let labels = EventLabels::new(encoder, &corpus.events, &corpus.vocab)?;
    let text = build_text_index(split, encoder, &labels, hyper)?;

    let mut init = rng::sub_stream(seed, rng::ns::INIT, 1);
    let dec_cfg = hyper.decoder;
    let mut model = Captioner {
        map: MappingNet::init(encoder.embed_dim(), hyper.mapping_hidden, hyper.k, dec_cfg.model_dim, &mut init),
        dec: DecoderParams::init(corpus.vocab.len(), &dec_cfg, &mut init)?,
    };
    let mut opt = Adam::new(
        &model,
        AdamHyper {
            lr: hyper.lr,
            weight_decay: hyper.weight_decay,
            ..AdamHyper::default()
        },
    );

    let mut batch_rng = rng::stream(seed, rng::ns::CAPTIONER);
    let mut replace_rng = rng::stream(seed, rng::ns::REPLACE);
    let mut noise_rng = rng::stream(seed, rng::ns::NOISE);
    let mut dropout_rng = rng::stream(seed, rng::ns::DROPOUT);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(hyper.iterations);

    for step in 0..hyper.iterations {
        let mut keys = Vec::with_capacity(hyper.batch_size);
        while keys.len() < hyper.batch_size {
            if order.is_empty() {
                order = (0..split.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            keys.push(order.pop().unwrap());
        }
        let mut embeddings = Vec::with_capacity(keys.len());
        let mut prompts = Vec::with_capacity(keys.len());
        for &key in &keys {
            let hard = if hyper.use_ap {
                let kept = prompt_dropout(&text.events[key], hyper.beta, &mut dropout_rng)?;
                labels.prompt(&kept)?
            } else {
                HardPrompt::default()
            };
            let e = if hyper.use_ia {
                let cands = &text.candidates[key];
                let pick = cands[replace_rng.random_range(0..cands.len())];
                text.index.get(pick).expect("candidate from index")
            } else {
                text.index.get(key).expect("key from index")
            };
            let v = if hyper.use_ea {
                embed_augment(&e, hyper.sigma, &mut noise_rng)?
            } else {
                e.into_vec()
            };
            embeddings.push(v);
            prompts.push(hard);
        }
        let batch: Vec<Example<'_, T>> = keys
            .iter()
            .enumerate()
            .map(|(i, &key)| Example {
                embedding: &embeddings[i],
                hard: &prompts[i],
                caption: &text.captions[key],
            })
            .collect();
        let (loss, grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Numeric {
                step,
                message: format!("captioner loss diverged ({loss})"),
            });
        }
        opt.step(&mut model, &grad, warmup_lr(hyper.lr, hyper.warmup, step));
        curve.push(LossPoint {
            iteration: step,
            loss: loss.to_f64_lossy(),
        });
    }
    Ok((model, curve))
}

/// Inference-time bundle: frozen encoder, trained captioner and label index.
#[derive(Debug, Clone, Copy)]
pub struct ZeroShot<'a, T> {
    pub encoder: &'a DualEncoder<T>,
    pub model: &'a Captioner<T>,
    pub labels: &'a EventLabels<T>,
    pub hyper: &'a CaptionerHyper,
}

impl<T: Scalar> ZeroShot<'_, T> {
    fn caption_embedding(&self, e: &Embedding<T>, beam: usize) -> Result<Caption> {
        let hard = if self.hyper.use_ap {
            self.labels.prompt(&self.labels.retrieve(e, self.hyper.m)?)?
        } else {
            HardPrompt::default()
        };
        let soft = self.model.map.forward(e.as_slice())?.0;
        if beam == 1 {
            greedy(&self.model.dec, &soft, &hard, self.hyper.max_len)
        } else {
            decode(&self.model.dec, &soft, &hard, beam, self.hyper.max_len)
        }
    }

    /// Audio embedding in place of the text embedding; no replacement, noise
    /// or dropout.
    pub fn caption(&self, features: &[f64]) -> Result<Caption> {
        self.caption_embedding(&self.encoder.encode_audio(features)?, self.hyper.beam)
    }

    /// Greedy text-to-text reconstruction through the text encoder.
    pub fn reconstruct(&self, caption: &[TokenId]) -> Result<Caption> {
        self.caption_embedding(&self.encoder.encode_tokens(caption)?, 1)
    }

    /// Captions every clip of `split` and scores against all its references.
    pub fn evaluate(&self, split: &Split) -> Result<MetricReport> {
        let items = (0..split.len())
            .map(|i| {
                Ok(EvalItem {
                    candidate: self.caption(split.audio(i)?)?.0,
                    references: split.captions(i).iter().map(|c| c.0.clone()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate(&EvalBatch::new(items)?)
    }
}

pub fn zero_shot_caption<T: Scalar>(
    features: &[f64],
    encoder: &DualEncoder<T>,
    model: &Captioner<T>,
    labels: &EventLabels<T>,
    hyper: &CaptionerHyper,
) -> Result<Caption> {
    ZeroShot {
        encoder,
        model,
        labels,
        hyper,
    }
    .caption(features)
}

/// Evaluation domains: in-domain is source_test, cross-domain is target_test.
pub const EVAL_SPLITS: [SplitName; 2] = [SplitName::SourceTest, SplitName::TargetTest];

/// One line of the result stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub setting: String,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Cell {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Cell { mean, std }
}

/// One summary row: a cell per (split, metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub cells: Vec<(SplitName, String, Cell)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTable {
    pub records: Vec<ResultRecord>,
    pub rows: Vec<SummaryRow>,
}

impl RunTable {
    /// Header plus one row per label; cells as `mean` and `std` column pairs.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("setting");
        if let Some(first) = self.rows.first() {
            for (split, metric, _) in &first.cells {
                out.push_str(&format!(",{0}.{1}.mean,{0}.{1}.std", split.as_str(), metric));
            }
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.label);
            for (_, _, c) in &row.cells {
                out.push_str(&format!(",{:?},{:?}", c.mean, c.std));
            }
            out.push('\n');
        }
        out
    }

    /// Per-seed values of one metric for one label, in seed order.
    pub fn values(&self, label: &str, split: SplitName, metric: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.setting == label && r.split == split.as_str() && r.metric == metric)
            .map(|r| (r.seed, r.value))
            .collect()
    }
}

/// Reports of one (config index, seed) cell, one per evaluation split.
type CellResult = ((usize, u64), Vec<MetricReport>);

/// Trains and evaluates one captioner per `(label, hyper, seed)` job on a
/// pool of `threads` workers. Results are merged by key, so the table does
/// not depend on scheduling.
pub fn run_grid<T: Scalar>(
    corpus: &Corpus,
    encoder: &DualEncoder<T>,
    configs: &[(String, CaptionerHyper)],
    seeds: &[u64],
    threads: usize,
) -> Result<RunTable> {
    if seeds.is_empty() {
        return Err(Error::Input("at least one seed is required".into()));
    }
    if configs.is_empty() {
        return Err(Error::Input("no settings to run".into()));
    }
    for (_, h) in configs {
        h.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let labels = EventLabels::new(encoder, &corpus.events, &corpus.vocab)?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let hyper = &configs[c].1;
                let (model, _) = train_captioner(corpus, encoder, hyper, seed)?;
                let zs = ZeroShot {
                    encoder,
                    model: &model,
                    labels: &labels,
                    hyper,
                };
                let reports = EVAL_SPLITS
                    .iter()
                    .map(|&s| zs.evaluate(corpus.split(s)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(((c, seed), reports))
            })
            .collect()
    });
    let mut merged: BTreeMap<(usize, u64), Vec<MetricReport>> = BTreeMap::new();
    for r in results {
        let (key, reports) = r?;
        merged.insert(key, reports);
    }

    let mut table = RunTable::default();
    for (c, (label, _)) in configs.iter().enumerate() {
        let mut cells = Vec::new();
        for (si, &split) in EVAL_SPLITS.iter().enumerate() {
            for (mi, metric) in MetricReport::NAMES.iter().enumerate() {
                let mut vals = Vec::with_capacity(seeds.len());
                for &seed in seeds {
                    let v = merged[&(c, seed)][si].values()[mi];
                    vals.push(v);
                    table.records.push(ResultRecord {
                        setting: label.clone(),
                        seed,
                        split: split.as_str().to_string(),
                        metric: metric.to_string(),
                        value: v,
                    });
                }
                cells.push((split, metric.to_string(), mean_std(&vals)));
            }
        }
        table.rows.push(SummaryRow {
            label: label.clone(),
            cells,
        });
    }
    Ok(table)
}

/// One captioner per (setting, seed), all sharing `encoder`.
pub fn run_ablation<T: Scalar>(
    corpus: &Corpus,
    encoder: &DualEncoder<T>,
    settings: &[AblationSetting],
    seeds: &[u64],
    base: &CaptionerHyper,
    threads: usize,
) -> Result<RunTable> {
    let configs: Vec<(String, CaptionerHyper)> = settings
        .iter()
        .map(|&s| (s.label().to_string(), base.with_setting(s)))
        .collect();
    run_grid(corpus, encoder, &configs, seeds, threads)
}

/// Hyperparameters a sweep can vary. `Sigma2` sets the noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    N,
    Sigma2,
    K,
    M,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::Sigma2 => "sigma2",
            Self::K => "K",
            Self::M => "M",
            Self::Beta => "beta",
        }
    }

    /// Default sweep values for this parameter.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::N => vec![1.0, 3.0, 5.0, 7.0, 10.0],
            Self::Sigma2 => vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            Self::K => vec![1.0, 5.0, 10.0, 15.0, 20.0],
            Self::M => vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0],
            Self::Beta => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }

    pub fn apply(self, base: &CaptionerHyper, value: f64) -> Result<CaptionerHyper> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        let mut h = base.clone();
        match self {
            Self::N => h.n = count()?,
            Self::K => h.k = count()?,
            Self::M => h.m = count()?,
            Self::Sigma2 if value >= 0.0 => h.sigma = value.sqrt(),
            Self::Beta => h.beta = value,
            Self::Sigma2 => return Err(Error::Config(format!("variance {value} is negative"))),
        }
        h.validate()?;
        Ok(h)
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "N" | "n" => Ok(Self::N),
            "sigma2" | "sigma^2" | "variance" => Ok(Self::Sigma2),
            "K" | "k" => Ok(Self::K),
            "M" | "m" => Ok(Self::M),
            "beta" => Ok(Self::Beta),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?} (N, sigma2, K, M, beta)"))),
        }
    }
}

/// One row per value, other hyperparameters held at `base` (the full model).
pub fn run_sweep<T: Scalar>(
    corpus: &Corpus,
    encoder: &DualEncoder<T>,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    base: &CaptionerHyper,
    threads: usize,
) -> Result<RunTable> {
    if values.is_empty() {
        return Err(Error::Input("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| Ok((format!("{}={v}", param.name()), param.apply(base, v)?)))
        .collect::<Result<Vec<_>>>()?;
    run_grid(corpus, encoder, &configs, seeds, threads)
}

#[cfg(test)]
mod tests;
