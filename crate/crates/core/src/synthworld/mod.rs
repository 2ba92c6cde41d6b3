//! Seeded synthetic world: sound events with latent acoustic signatures,
//! scenes mixing up to three events, rendered audio feature vectors and
//! templated captions for a pretraining domain plus a source and a target
//! captioning domain.

mod lexicon;
mod vocab;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub use vocab::{TokenId, Vocab, BOS, COMMA, EOS, PAD};

/// One sound-event category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventType {
    pub id: usize,
    pub name: String,
    pub signature: Vec<f64>,
}

impl EventType {
    /// Name split on underscores into word tokens.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.name.split('_')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainId {
    Pretrain,
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Slot(usize),
}

/// Caption template such as `"{0} and then {1}"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let pieces: Vec<Piece> = text
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                Some(idx) => idx
                    .parse()
                    .map(Piece::Slot)
                    .map_err(|_| Error::Config(format!("bad slot `{w}` in template `{text}`"))),
                None => Ok(Piece::Word(w.to_string())),
            })
            .collect::<Result<_>>()?;
        let t = Self { pieces };
        let n = t.slot_count();
        if n == 0 {
            return Err(Error::Config(format!("template `{text}` has no slot")));
        }
        let slots: BTreeSet<usize> = t.slots().collect();
        if slots != (0..n).collect() {
            return Err(Error::Config(format!("template `{text}` slots are not 0..{n}")));
        }
        Ok(t)
    }

    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(i) => Some(*i),
            Piece::Word(_) => None,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slots().count()
    }

    pub fn function_words(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Word(w) => Some(w.as_str()),
            Piece::Slot(_) => None,
        })
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: DomainId,
    pub event_weights: Vec<f64>,
    pub templates: Vec<Template>,
    pub scene_size_range: (usize, usize),
    pub audio_noise_std: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("domain has no templates".into()));
        }
        if self.event_weights.iter().any(|&w| w.is_nan() || w < 0.0) {
            return Err(Error::Config("negative or NaN event weight".into()));
        }
        let total: f64 = self.event_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("event weights sum to {total}")));
        }
        let (lo, hi) = self.scene_size_range;
        if lo < 1 || hi > 3 || lo > hi {
            return Err(Error::Config(format!("scene size range [{lo},{hi}] outside [1,3]")));
        }
        if self.audio_noise_std.is_nan() || self.audio_noise_std < 0.0 {
            return Err(Error::Config("audio noise std must be nonnegative".into()));
        }
        Ok(())
    }
}

pub const GAIN_RANGE: (f64, f64) = (0.5, 1.5);

/// Events present in one scene with their gains, ordered by event id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub events: Vec<(usize, f64)>,
}

impl Scene {
    pub fn event_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.events.iter().map(|&(e, _)| e)
    }
}

/// Rendered audio features. The originating scene is kept for debugging and
/// evaluation only; nothing on the captioning path takes an `AudioClip`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub features: Vec<f64>,
    pub provenance: Scene,
}

/// Token sequence over the word vocabulary, without special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(pub Vec<TokenId>);

impl Caption {
    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Generates the event inventory and the word vocabulary.
pub fn gen_world(seed: u64, num_events: usize, audio_dim: usize) -> Result<(Vec<EventType>, Vocab)> {
    if num_events < 2 {
        return Err(Error::Config(format!("need at least 2 events, got {num_events}")));
    }
    if audio_dim < 2 {
        return Err(Error::Config(format!("audio dimension must be >= 2, got {audio_dim}")));
    }
    let mut rng = rng::sub_stream(seed, rng::ns::CORPUS, 0);
    let scale = 1.0 / (audio_dim as f64).sqrt();
    let events: Vec<EventType> = (0..num_events)
        .map(|id| {
            let signature = (0..audio_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            EventType {
                id,
                name: event_name(id),
                signature,
            }
        })
        .collect();

    let mut words = BTreeSet::new();
    words.extend(lexicon::HARD_PROMPT_WORDS.iter().map(|w| w.to_string()));
    for t in lexicon::SOURCE_TEMPLATES.iter().chain(lexicon::TARGET_TEMPLATES) {
        words.extend(Template::parse(t)?.function_words().map(str::to_string));
    }
    for e in &events {
        words.extend(e.words().map(str::to_string));
    }
    Ok((events, Vocab::new(words)))
}

fn event_name(id: usize) -> String {
    let base = lexicon::EVENT_NAMES[id % lexicon::EVENT_NAMES.len()];
    match id / lexicon::EVENT_NAMES.len() {
        0 => base.to_string(),
        round => format!("{base}_{}", round + 1),
    }
}

pub fn source_templates() -> Vec<Template> {
    parse_all(lexicon::SOURCE_TEMPLATES)
}

pub fn target_templates() -> Vec<Template> {
    parse_all(lexicon::TARGET_TEMPLATES)
}

fn parse_all(texts: &[&str]) -> Vec<Template> {
    texts
        .iter()
        .map(|t| Template::parse(t).expect("built-in templates parse"))
        .collect()
}

/// `features = Σ gain·signature + noise`, noise i.i.d. normal with the
/// domain's std.
pub fn render_audio(
    scene: &Scene,
    events: &[EventType],
    domain: &DomainSpec,
    rng: &mut Stream,
) -> Result<AudioClip> {
    let dim = events
        .first()
        .map(|e| e.signature.len())
        .ok_or_else(|| Error::Input("empty event table".into()))?;
    let mut features = vec![0.0; dim];
    for &(e, gain) in &scene.events {
        let sig = &events
            .get(e)
            .ok_or_else(|| Error::Input(format!("unknown event id {e}")))?
            .signature;
        for (f, s) in features.iter_mut().zip(sig) {
            *f += gain * s;
        }
    }
    if domain.audio_noise_std > 0.0 {
        let noise = Normal::new(0.0, domain.audio_noise_std)
            .map_err(|e| Error::Config(format!("audio noise: {e}")))?;
        for f in &mut features {
            *f += noise.sample(rng);
        }
    }
    Ok(AudioClip {
        features,
        provenance: scene.clone(),
    })
}

/// Fills a template whose slot count matches the scene size, chosen
/// uniformly among the domain's templates.
pub fn render_caption(
    scene: &Scene,
    events: &[EventType],
    domain: &DomainSpec,
    vocab: &Vocab,
    rng: &mut Stream,
) -> Result<Caption> {
    let size = scene.events.len();
    let matching: Vec<&Template> = domain
        .templates
        .iter()
        .filter(|t| t.slot_count() == size)
        .collect();
    let template = matching.choose(rng).ok_or_else(|| {
        Error::Generation(format!(
            "no {:?} template with {size} slot(s)",
            domain.domain_id
        ))
    })?;
    fill_template(template, scene, events, vocab)
}

pub fn fill_template(
    template: &Template,
    scene: &Scene,
    events: &[EventType],
    vocab: &Vocab,
) -> Result<Caption> {
    let mut tokens = Vec::new();
    for piece in template.pieces() {
        match piece {
            Piece::Word(w) => tokens.push(vocab.require(w)?),
            Piece::Slot(i) => {
                let (e, _) = scene
                    .events
                    .get(*i)
                    .ok_or_else(|| Error::Generation(format!("slot {i} beyond scene size")))?;
                let event = events
                    .get(*e)
                    .ok_or_else(|| Error::Input(format!("unknown event id {e}")))?;
                for w in event.words() {
                    tokens.push(vocab.require(w)?);
                }
            }
        }
    }
    Ok(Caption(tokens))
}

/// Draws a scene: size uniform in the domain's range, events sampled without
/// replacement by weight, gains uniform in [`GAIN_RANGE`], sorted by id.
pub fn sample_scene(id: u64, domain: &DomainSpec, rng: &mut Stream) -> Scene {
    let (lo, hi) = domain.scene_size_range;
    let size = rng.random_range(lo..=hi);
    let mut weights = domain.event_weights.clone();
    let mut events = Vec::with_capacity(size);
    for _ in 0..size {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        // Floating-point round-off can land past the last positive weight.
        while weights[pick] <= 0.0 {
            pick -= 1;
        }
        weights[pick] = 0.0;
        events.push((pick, rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1)));
    }
    events.sort_by_key(|&(e, _)| e);
    Scene { id, events }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_events: usize,
    pub audio_dim: usize,
    pub pretrain_size: usize,
    pub source_train_size: usize,
    pub source_test_size: usize,
    pub target_test_size: usize,
    pub refs_per_test: usize,
    pub max_caption_len: usize,
    pub audio_noise_std: f64,
    pub scene_size_min: usize,
    pub scene_size_max: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_events: 48,
            audio_dim: 32,
            pretrain_size: 2000,
            source_train_size: 1500,
            source_test_size: 200,
            target_test_size: 200,
            refs_per_test: 3,
            max_caption_len: 16,
            audio_noise_std: 0.1,
            scene_size_min: 1,
            scene_size_max: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("pretrain_size", self.pretrain_size),
            ("source_train_size", self.source_train_size),
            ("source_test_size", self.source_test_size),
            ("target_test_size", self.target_test_size),
            ("refs_per_test", self.refs_per_test),
            ("max_caption_len", self.max_caption_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Pretrain,
    SourceTrain,
    SourceTest,
    TargetTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Pretrain,
        SplitName::SourceTrain,
        SplitName::SourceTest,
        SplitName::TargetTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Pretrain => "pretrain",
            SplitName::SourceTrain => "source_train",
            SplitName::SourceTest => "source_test",
            SplitName::TargetTest => "target_test",
        }
    }
}

/// One scene with its rendered audio and caption(s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scene: Scene,
    pub audio: Vec<f64>,
    pub captions: Vec<Caption>,
}

/// A corpus split whose audio can be locked against reads.
#[derive(Debug, Serialize, Deserialize)]
pub struct Split {
    pub name: SplitName,
    records: Vec<Record>,
    /// Number of live [`AudioLock`] guards.
    #[serde(skip)]
    audio_locked: AtomicUsize,
}

impl Clone for Split {
    fn clone(&self) -> Self {
        Self::new(self.name, self.records.clone())
    }
}

impl PartialEq for Split {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.records == other.records
    }
}

/// Keeps a split's audio unreadable until dropped.
pub struct AudioLock<'a> {
    split: &'a Split,
}

impl Drop for AudioLock<'_> {
    fn drop(&mut self) {
        self.split.audio_locked.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Split {
    pub fn new(name: SplitName, records: Vec<Record>) -> Self {
        Self {
            name,
            records,
            audio_locked: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scene(&self, i: usize) -> &Scene {
        &self.records[i].scene
    }

    pub fn captions(&self, i: usize) -> &[Caption] {
        &self.records[i].captions
    }

    pub fn caption(&self, i: usize) -> &Caption {
        &self.records[i].captions[0]
    }

    /// Audio features of record `i`; fails while the split is locked.
    pub fn audio(&self, i: usize) -> Result<&[f64]> {
        if self.audio_locked.load(Ordering::SeqCst) > 0 {
            return Err(Error::Access(format!(
                "audio of split {} read while locked",
                self.name.as_str()
            )));
        }
        Ok(&self.records[i].audio)
    }

    pub fn clip(&self, i: usize) -> Result<AudioClip> {
        Ok(AudioClip {
            features: self.audio(i)?.to_vec(),
            provenance: self.records[i].scene.clone(),
        })
    }

    pub fn lock_audio(&self) -> AudioLock<'_> {
        self.audio_locked.fetch_add(1, Ordering::SeqCst);
        AudioLock { split: self }
    }

    pub fn records(&self) -> Result<&[Record]> {
        if self.audio_locked.load(Ordering::SeqCst) > 0 {
            return Err(Error::Access(format!(
                "records of split {} read while audio is locked",
                self.name.as_str()
            )));
        }
        Ok(&self.records)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub events: Vec<EventType>,
    pub vocab: Vocab,
    pub pretrain_domain: DomainSpec,
    pub source_domain: DomainSpec,
    pub target_domain: DomainSpec,
    pub pretrain: Split,
    pub source_train: Split,
    pub source_test: Split,
    pub target_test: Split,
}

impl Corpus {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Pretrain => &self.pretrain,
            SplitName::SourceTrain => &self.source_train,
            SplitName::SourceTest => &self.source_test,
            SplitName::TargetTest => &self.target_test,
        }
    }

    /// Renders a caption as space-separated words.
    pub fn text(&self, caption: &Caption) -> String {
        self.vocab.render(caption.tokens())
    }
}

fn dirichlet_ones(n: usize, rng: &mut Stream) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Generates the full corpus; a pure function of `(config, seed)`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let (events, vocab) = gen_world(seed, config.num_events, config.audio_dim)?;
    let e = config.num_events;
    let mut weight_rng = rng::sub_stream(seed, rng::ns::CORPUS, 1);
    let source_weights = dirichlet_ones(e, &mut weight_rng);
    let target_weights = dirichlet_ones(e, &mut weight_rng);
    let size_range = (config.scene_size_min, config.scene_size_max);
    let source_domain = DomainSpec {
        domain_id: DomainId::Source,
        event_weights: source_weights,
        templates: source_templates(),
        scene_size_range: size_range,
        audio_noise_std: config.audio_noise_std,
    };
    let target_domain = DomainSpec {
        domain_id: DomainId::Target,
        event_weights: target_weights,
        templates: target_templates(),
        scene_size_range: size_range,
        audio_noise_std: config.audio_noise_std,
    };
    let pretrain_domain = DomainSpec {
        domain_id: DomainId::Pretrain,
        event_weights: vec![1.0 / e as f64; e],
        templates: source_templates()
            .into_iter()
            .chain(target_templates())
            .collect(),
        scene_size_range: size_range,
        audio_noise_std: config.audio_noise_std,
    };
    for d in [&pretrain_domain, &source_domain, &target_domain] {
        d.validate()?;
    }

    let mut next_id = 0u64;
    let mut make_split = |name: SplitName, domain: &DomainSpec, size: usize, refs: usize| -> Result<Split> {
        let mut rng = rng::sub_stream(seed, rng::ns::CORPUS, 10 + name as u64);
        let records = (0..size)
            .map(|_| {
                let scene = sample_scene(next_id, domain, &mut rng);
                next_id += 1;
                let audio = render_audio(&scene, &events, domain, &mut rng)?.features;
                let captions = (0..refs)
                    .map(|_| {
                        let c = render_caption(&scene, &events, domain, &vocab, &mut rng)?;
                        if c.len() > config.max_caption_len {
                            return Err(Error::Generation(format!(
                                "caption of {} tokens exceeds limit {}",
                                c.len(),
                                config.max_caption_len
                            )));
                        }
                        Ok(c)
                    })
                    .collect::<Result<_>>()?;
                Ok(Record {
                    scene,
                    audio,
                    captions,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Split::new(name, records))
    };
    let pretrain = make_split(SplitName::Pretrain, &pretrain_domain, config.pretrain_size, 1)?;
    let source_train = make_split(SplitName::SourceTrain, &source_domain, config.source_train_size, 1)?;
    let source_test = make_split(
        SplitName::SourceTest,
        &source_domain,
        config.source_test_size,
        config.refs_per_test,
    )?;
    let target_test = make_split(
        SplitName::TargetTest,
        &target_domain,
        config.target_test_size,
        config.refs_per_test,
    )?;
    Ok(Corpus {
        config: config.clone(),
        seed,
        events,
        vocab,
        pretrain_domain,
        source_domain,
        target_domain,
        pretrain,
        source_train,
        source_test,
        target_test,
    })
}
