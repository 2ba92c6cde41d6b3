//! Versioned on-disk artifacts.
//!
//! Every file opens with a schema line `#zerocap <kind> v<version>` and
//! loaders reject any other kind or version. Numbers are written as
//! shortest round-trip decimals, so a save/load cycle is exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::decoder::{Captioner, DecoderParams};
use crate::jointspace::{DualEncoder, DualEncoderConfig, LossPoint};
use crate::params::ParamSet;
use crate::pipeline::{CaptionerHyper, ResultRecord, RunTable};
use crate::prompts::MappingNet;
use crate::rng;
use crate::scalar::Scalar;
use crate::synthworld::{Corpus, CorpusConfig, DomainSpec, EventType, Record, Split, SplitName, Vocab};

pub const SCHEMA_VERSION: u32 = 1;

pub fn schema_line(kind: &str) -> String {
    format!("#zerocap {kind} v{SCHEMA_VERSION}")
}

fn parse_schema(path: &Path, line: &str, kind: &str) -> Result<()> {
    let mut parts = line.split(' ');
    let (tag, found, version) = (parts.next(), parts.next(), parts.next());
    if tag != Some("#zerocap") || found.is_none() || version.is_none() || parts.next().is_some() {
        return Err(Error::format(path, format!("missing schema line, found {line:?}")));
    }
    if found != Some(kind) {
        return Err(Error::format(
            path,
            format!("expected a {kind} file, found {}", found.unwrap_or_default()),
        ));
    }
    if version != Some(&format!("v{SCHEMA_VERSION}")) {
        return Err(Error::format(
            path,
            format!("unsupported schema version {}", version.unwrap_or_default()),
        ));
    }
    Ok(())
}

/// Writes `body` under a schema line, creating parent directories.
pub fn write_artifact(path: &Path, kind: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = schema_line(kind);
    text.push('\n');
    text.push_str(body);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_artifact`] and returns its body.
pub fn read_artifact(path: &Path, kind: &str) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    parse_schema(path, first, kind)?;
    Ok(body.to_string())
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("artifact serializes")
}

fn from_json<V: DeserializeOwned>(path: &Path, line_no: usize, text: &str) -> Result<V> {
    serde_json::from_str(text).map_err(|e| Error::format(path, format!("line {line_no}: {e}")))
}

/// One JSON value per line.
pub fn write_jsonl<V: Serialize>(path: &Path, kind: &str, items: &[V]) -> Result<()> {
    let body: String = items.iter().map(|v| to_json(v) + "\n").collect();
    write_artifact(path, kind, &body)
}

pub fn read_jsonl<V: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<V>> {
    let body = read_artifact(path, kind)?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| from_json(path, i + 2, l))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    config_hash: String,
    seed: u64,
    config: CorpusConfig,
    vocab: Vocab,
    events: Vec<EventType>,
    pretrain_domain: DomainSpec,
    source_domain: DomainSpec,
    target_domain: DomainSpec,
}

fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

/// Writes `meta.json` plus one record file per split.
pub fn save_corpus(dir: &Path, corpus: &Corpus, config_hash: &str) -> Result<()> {
    let meta = CorpusMeta {
        config_hash: config_hash.to_string(),
        seed: corpus.seed,
        config: corpus.config.clone(),
        vocab: corpus.vocab.clone(),
        events: corpus.events.clone(),
        pretrain_domain: corpus.pretrain_domain.clone(),
        source_domain: corpus.source_domain.clone(),
        target_domain: corpus.target_domain.clone(),
    };
    write_artifact(&dir.join("meta.json"), "corpus-meta", &(to_json(&meta) + "\n"))?;
    for name in SplitName::ALL {
        write_jsonl(&split_path(dir, name), "split", corpus.split(name).records()?)?;
    }
    Ok(())
}

/// Loads a corpus directory; returns the corpus and the config hash it was
/// generated under.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, String)> {
    let meta_path = dir.join("meta.json");
    let meta: CorpusMeta = from_json(&meta_path, 2, read_artifact(&meta_path, "corpus-meta")?.trim_end())?;
    let load = |name: SplitName| -> Result<Split> {
        let records: Vec<Record> = read_jsonl(&split_path(dir, name), "split")?;
        Ok(Split::new(name, records))
    };
    let corpus = Corpus {
        config: meta.config,
        seed: meta.seed,
        events: meta.events,
        vocab: meta.vocab,
        pretrain_domain: meta.pretrain_domain,
        source_domain: meta.source_domain,
        target_domain: meta.target_domain,
        pretrain: load(SplitName::Pretrain)?,
        source_train: load(SplitName::SourceTrain)?,
        source_test: load(SplitName::SourceTest)?,
        target_test: load(SplitName::TargetTest)?,
    };
    Ok((corpus, meta.config_hash))
}

/// Writes a header line, then for every tensor a shape line
/// `tensor <name> <rows> <cols>` and a line of row-major values.
pub fn save_params<T: Scalar, P: ParamSet<T>>(path: &Path, kind: &str, header: &impl Serialize, params: &P) -> Result<()> {
    let mut body = format!("header {}\nscalar {}\n", to_json(header), T::NAME);
    params.visit(&mut |name, _, m| {
        body.push_str(&format!("tensor {name} {} {}\n", m.rows(), m.cols()));
        let values: Vec<String> = m.as_slice().iter().map(|v| v.to_string()).collect();
        body.push_str(&values.join(" "));
        body.push('\n');
    });
    write_artifact(path, kind, &body)
}

/// Reads a file written by [`save_params`]. `build` turns the header into a
/// parameter set of the right shapes, which is then filled in.
pub fn load_params<T: Scalar, P: ParamSet<T>, H: DeserializeOwned>(
    path: &Path,
    kind: &str,
    build: impl FnOnce(&H) -> Result<P>,
) -> Result<(H, P)> {
    let body = read_artifact(path, kind)?;
    let mut lines = body.lines();
    let bad = |m: String| Error::format(path, m);
    let header: H = match lines.next().and_then(|l| l.strip_prefix("header ")) {
        Some(json) => from_json(path, 2, json)?,
        None => return Err(bad("missing header line".into())),
    };
    match lines.next().and_then(|l| l.strip_prefix("scalar ")) {
        Some(name) if name == T::NAME => {}
        Some(name) => return Err(bad(format!("stored as {name}, loading as {}", T::NAME))),
        None => return Err(bad("missing scalar line".into())),
    }
    let mut params = build(&header)?;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |name, _, m| {
        if failure.is_some() {
            return;
        }
        let shape = lines.next().unwrap_or_default();
        let want = format!("tensor {name} {} {}", m.rows(), m.cols());
        if shape != want {
            failure = Some(bad(format!("expected {want:?}, found {shape:?}")));
            return;
        }
        let values = lines.next().unwrap_or_default();
        let parsed: Option<Vec<T>> = values.split_ascii_whitespace().map(|v| v.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == m.as_slice().len() => m.as_mut_slice().copy_from_slice(&v),
            _ => failure = Some(bad(format!("bad values for tensor {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if lines.any(|l| !l.is_empty()) {
        return Err(bad("trailing data after the last tensor".into()));
    }
    Ok((header, params))
}

/// Header of a saved dual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHeader {
    /// Hash of the config the encoder was trained under.
    pub hash: String,
    pub vocab_len: usize,
    pub audio_dim: usize,
    pub config: DualEncoderConfig,
}

pub fn save_encoder<T: Scalar>(path: &Path, header: &EncoderHeader, enc: &DualEncoder<T>) -> Result<()> {
    save_params(path, "dual-encoder", header, enc)
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<(EncoderHeader, DualEncoder<T>)> {
    load_params(path, "dual-encoder", |h: &EncoderHeader| {
        // Values are overwritten; the stream only fixes the shapes.
        let mut scratch = rng::stream(0, "load");
        Ok(DualEncoder::init(h.vocab_len, h.audio_dim, &h.config, &mut scratch))
    })
}

/// Header of a saved captioner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionerHeader {
    pub hash: String,
    /// Hash of the dual encoder it was trained against.
    pub clap_hash: String,
    pub seed: u64,
    pub vocab_len: usize,
    pub embed_dim: usize,
    pub hyper: CaptionerHyper,
}

pub fn save_captioner<T: Scalar>(path: &Path, header: &CaptionerHeader, model: &Captioner<T>) -> Result<()> {
    save_params(path, "captioner", header, model)
}

pub fn load_captioner<T: Scalar>(path: &Path) -> Result<(CaptionerHeader, Captioner<T>)> {
    load_params(path, "captioner", |h: &CaptionerHeader| {
        let d = &h.hyper.decoder;
        Ok(Captioner {
            map: MappingNet::zeros(h.embed_dim, h.hyper.mapping_hidden, h.hyper.k, d.model_dim),
            dec: DecoderParams::zeros(h.vocab_len, d)?,
        })
    })
}

pub fn save_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    write_jsonl(path, "loss-curve", curve)
}

pub fn load_curve(path: &Path) -> Result<Vec<LossPoint>> {
    read_jsonl(path, "loss-curve")
}

pub fn save_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    write_jsonl(path, "results", records)
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>> {
    read_jsonl(path, "results")
}

pub fn save_summary(path: &Path, table: &RunTable) -> Result<()> {
    write_artifact(path, "summary", &table.summary_csv())
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub outputs: Vec<PathBuf>,
    /// The resolved config, as TOML.
    pub config: String,
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    write_artifact(path, "manifest", &body)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    from_json(path, 2, read_artifact(path, "manifest")?.trim_end())
}
