//! Command-line driver: corpus generation, dual-encoder pretraining,
//! captioner training, inference, evaluation, ablations and sweeps.
//!
//! Each command resolves one [`ExperimentConfig`] (flag over file over
//! default), checks that the artifacts it loads were produced under the same
//! upstream config, and writes its outputs plus a `manifest.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use zerocap::config::ExperimentConfig;
use zerocap::jointspace::{audio_to_text_recall_at_1, modality_gap, train_dual_encoder, DualEncoder};
use zerocap::pipeline::{
    run_ablation, run_sweep, train_captioner, AblationSetting, CaptionerHyper, EventLabels, ResultRecord, RunTable,
    SummaryRow, SweepParam, ZeroShot, EVAL_SPLITS,
};
use zerocap::store::{self, CaptionerHeader, EncoderHeader, Manifest};
use zerocap::synthworld::{gen_corpus, Corpus, SplitName, TokenId};
use zerocap::{Captioner32, DualEncoder32, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "zerocap", version, about = "Text-only trained zero-shot audio captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus(Common),
    /// Pretrain the contrastive dual encoder on the pretraining split.
    TrainClap(Common),
    /// Train a captioner on source-domain text only.
    TrainCaptioner {
        #[command(flatten)]
        common: Common,
        /// Component subset a-f; defaults to the config's flags.
        #[arg(long)]
        setting: Option<AblationSetting>,
    },
    /// Caption every clip of a split through the audio encoder.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "target_test", value_parser = parse_split)]
        split: SplitName,
    },
    /// Score the trained captioner on the in-domain and cross-domain test splits.
    Eval(Common),
    /// Train and score one captioner per (setting, seed).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "a,b,c,d,e,f")]
        settings: Vec<AblationSetting>,
        /// Use seeds 1..=n instead of the config's seed list.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Vary one hyperparameter over a grid with the full model.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// N, sigma2, K, M or beta.
        #[arg(long)]
        param: SweepParam,
        /// Grid values; defaults to the parameter's default grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        seeds: Option<u64>,
    },
}

fn parse_split(s: &str) -> std::result::Result<SplitName, String> {
    SplitName::ALL
        .into_iter()
        .find(|n| n.as_str() == s)
        .ok_or_else(|| format!("unknown split {s:?}"))
}

/// Flags shared by every command. Unset flags leave the config untouched.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long = "M")]
    pub m: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let h = &mut cfg.captioner;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(v) = self.n {
            h.n = v;
        }
        if let Some(v) = self.m {
            h.m = v;
        }
        if let Some(v) = self.sigma {
            h.sigma = v;
        }
        if let Some(v) = self.k {
            h.k = v;
        }
        if let Some(v) = self.beta {
            h.beta = v;
        }
        if let Some(v) = self.beam {
            h.beam = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Inference-only fields do not change the trained weights, so they are
/// left out of the captioner identity.
fn training_view(h: &CaptionerHyper) -> CaptionerHyper {
    let d = CaptionerHyper::default();
    CaptionerHyper {
        beam: d.beam,
        max_len: d.max_len,
        ..h.clone()
    }
}

fn consistency(what: &str, path: &Path, found: &str, want: &str) -> Result<()> {
    if found == want {
        return Ok(());
    }
    Err(Error::Consistency(format!(
        "{what} at {} was built under config {}, the current config expects {}",
        path.display(),
        short(found),
        short(want)
    )))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir();
    let (corpus, hash) = store::load_corpus(&dir)?;
    consistency("corpus", &dir, &hash, &cfg.corpus_hash())?;
    Ok(corpus)
}

fn load_clap(cfg: &ExperimentConfig) -> Result<DualEncoder32> {
    let path = cfg.clap_path();
    let (header, enc) = store::load_encoder(&path)?;
    consistency("dual encoder", &path, &header.hash, &cfg.clap_hash())?;
    Ok(enc)
}

/// Loads the captioner and the hyperparameters to run it with: the trained
/// ones, with beam width and length cap from the current config.
fn load_captioner(cfg: &ExperimentConfig) -> Result<(CaptionerHyper, Captioner32)> {
    let path = cfg.captioner_path();
    let (header, model): (CaptionerHeader, Captioner32) = store::load_captioner(&path)?;
    consistency("captioner", &path, &header.clap_hash, &cfg.clap_hash())?;
    let hyper = CaptionerHyper {
        beam: cfg.captioner.beam,
        max_len: cfg.captioner.max_len,
        ..header.hyper
    };
    hyper.validate()?;
    Ok((hyper, model))
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, start: Instant, outputs: Vec<PathBuf>) -> Result<()> {
    store::save_manifest(
        &dir.join("manifest.json"),
        &Manifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            wall_time_secs: start.elapsed().as_secs_f64(),
            outputs,
            config: cfg.to_toml(),
        },
    )
}

/// Held-out quality of the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClapQuality {
    pub split: String,
    pub pairs: usize,
    pub recall_at_1: f64,
    pub paired_cosine: f64,
    pub centroid_distance: f64,
}

pub fn clap_quality(corpus: &Corpus, enc: &DualEncoder<f32>, split: SplitName) -> Result<ClapQuality> {
    let s = corpus.split(split);
    let pairs = (0..s.len())
        .map(|i| Ok((s.audio(i)?, s.caption(i).tokens())))
        .collect::<Result<Vec<(&[f64], &[TokenId])>>>()?;
    let (paired_cosine, centroid_distance) = modality_gap(enc, &pairs)?;
    Ok(ClapQuality {
        split: split.as_str().to_string(),
        pairs: pairs.len(),
        recall_at_1: audio_to_text_recall_at_1(enc, &pairs)?,
        paired_cosine,
        centroid_distance,
    })
}

/// One generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub index: usize,
    pub caption: String,
    pub references: Vec<String>,
}

fn seed_list(cfg: &ExperimentConfig, n: Option<u64>) -> Result<Vec<u64>> {
    match n {
        Some(0) => Err(Error::Config("--seeds must be at least 1".into())),
        Some(n) => Ok((1..=n).collect()),
        None => Ok(cfg.seeds.clone()),
    }
}

fn save_table(dir: &Path, table: &RunTable) -> Result<Vec<PathBuf>> {
    let results = dir.join("results.jsonl");
    let summary = dir.join("summary.csv");
    store::save_results(&results, &table.records)?;
    store::save_summary(&summary, table)?;
    Ok(vec![results, summary])
}

fn setting_label(h: &CaptionerHyper) -> String {
    AblationSetting::ALL
        .into_iter()
        .find(|s| s.flags() == (h.use_ia, h.use_ea, h.use_ap))
        .map_or("custom", |s| s.label())
        .to_string()
}

/// Runs one command; `log` receives progress lines.
pub fn run(command: &Command, log: &mut dyn FnMut(&str)) -> Result<()> {
    let start = Instant::now();
    match command {
        Command::GenCorpus(common) => {
            let cfg = common.resolve()?;
            let corpus = gen_corpus(&cfg.world, cfg.seed)?;
            let dir = cfg.corpus_dir();
            store::save_corpus(&dir, &corpus, &cfg.corpus_hash())?;
            log(&format!("corpus written to {}", dir.display()));
            write_manifest(&dir, "gen-corpus", &cfg, start, vec![dir.clone()])
        }
        Command::TrainClap(common) => {
            let cfg = common.resolve()?;
            let corpus = load_corpus(&cfg)?;
            let (enc, curve) = train_dual_encoder::<f32>(&corpus.pretrain, corpus.vocab.len(), &cfg.clap, cfg.seed)?;
            let path = cfg.clap_path();
            let header = EncoderHeader {
                hash: cfg.clap_hash(),
                vocab_len: corpus.vocab.len(),
                audio_dim: enc.audio_dim(),
                config: cfg.clap.clone(),
            };
            store::save_encoder(&path, &header, &enc)?;
            let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let curve_path = dir.join("loss.jsonl");
            store::save_curve(&curve_path, &curve)?;
            let quality = EVAL_SPLITS
                .iter()
                .map(|&s| clap_quality(&corpus, &enc, s))
                .collect::<Result<Vec<_>>>()?;
            for q in &quality {
                log(&format!(
                    "{}: R@1 {:.3}, paired cosine {:.3}, centroid distance {:.3}",
                    q.split, q.recall_at_1, q.paired_cosine, q.centroid_distance
                ));
            }
            let quality_path = dir.join("quality.jsonl");
            store::write_jsonl(&quality_path, "clap-quality", &quality)?;
            write_manifest(&dir, "train-clap", &cfg, start, vec![path, curve_path, quality_path])
        }
        Command::TrainCaptioner { common, setting } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = setting {
                cfg.captioner = cfg.captioner.with_setting(*s);
            }
            let corpus = load_corpus(&cfg)?;
            let enc = load_clap(&cfg)?;
            let (model, curve) = train_captioner(&corpus, &enc, &cfg.captioner, cfg.seed)?;
            let path = cfg.captioner_path();
            let header = CaptionerHeader {
                hash: cfg.captioner_hash(&training_view(&cfg.captioner), cfg.seed),
                clap_hash: cfg.clap_hash(),
                seed: cfg.seed,
                vocab_len: corpus.vocab.len(),
                embed_dim: enc.embed_dim(),
                hyper: cfg.captioner.clone(),
            };
            store::save_captioner(&path, &header, &model)?;
            let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let curve_path = dir.join("loss.jsonl");
            store::save_curve(&curve_path, &curve)?;
            if let Some(last) = curve.last() {
                log(&format!("setting {}: final loss {:.4}", setting_label(&cfg.captioner), last.loss));
            }
            write_manifest(&dir, "train-captioner", &cfg, start, vec![path, curve_path])
        }
        Command::Infer { common, split } => {
            let cfg = common.resolve()?;
            let corpus = load_corpus(&cfg)?;
            let enc = load_clap(&cfg)?;
            let (hyper, model) = load_captioner(&cfg)?;
            let labels = EventLabels::new(&enc, &corpus.events, &corpus.vocab)?;
            let zs = ZeroShot {
                encoder: &enc,
                model: &model,
                labels: &labels,
                hyper: &hyper,
            };
            let s = corpus.split(*split);
            let lines = (0..s.len())
                .map(|i| {
                    Ok(CaptionLine {
                        index: i,
                        caption: corpus.text(&zs.caption(s.audio(i)?)?),
                        references: s.captions(i).iter().map(|c| corpus.text(c)).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = cfg.out.join("infer");
            let path = dir.join(format!("{}.jsonl", split.as_str()));
            store::write_jsonl(&path, "captions", &lines)?;
            log(&format!("{} captions written to {}", lines.len(), path.display()));
            write_manifest(&dir, "infer", &cfg, start, vec![path])
        }
        Command::Eval(common) => {
            let cfg = common.resolve()?;
            let corpus = load_corpus(&cfg)?;
            let enc = load_clap(&cfg)?;
            let (hyper, model) = load_captioner(&cfg)?;
            let labels = EventLabels::new(&enc, &corpus.events, &corpus.vocab)?;
            let zs = ZeroShot {
                encoder: &enc,
                model: &model,
                labels: &labels,
                hyper: &hyper,
            };
            let label = setting_label(&hyper);
            let mut table = RunTable::default();
            let mut cells = Vec::new();
            for split in EVAL_SPLITS {
                let report = zs.evaluate(corpus.split(split))?;
                log(&format!("{}: CIDEr-D {:.2}, BLEU-4 {:.2}", split.as_str(), report.cider, report.bleu4));
                for (metric, value) in report.named() {
                    table.records.push(ResultRecord {
                        setting: label.clone(),
                        seed: cfg.seed,
                        split: split.as_str().to_string(),
                        metric: metric.to_string(),
                        value,
                    });
                    cells.push((split, metric.to_string(), zerocap::pipeline::mean_std(&[value])));
                }
            }
            table.rows.push(SummaryRow { label, cells });
            let dir = cfg.out.join("eval");
            let outputs = save_table(&dir, &table)?;
            write_manifest(&dir, "eval", &cfg, start, outputs)
        }
        Command::Ablate {
            common,
            settings,
            seeds,
        } => {
            let cfg = common.resolve()?;
            let seeds = seed_list(&cfg, *seeds)?;
            let corpus = load_corpus(&cfg)?;
            let enc = load_clap(&cfg)?;
            let table = run_ablation(&corpus, &enc, settings, &seeds, &cfg.captioner, cfg.threads)?;
            let dir = cfg.out.join("ablate");
            let outputs = save_table(&dir, &table)?;
            log(&table.summary_csv());
            write_manifest(&dir, "ablate", &cfg, start, outputs)
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let cfg = common.resolve()?;
            let seeds = seed_list(&cfg, *seeds)?;
            let values = if values.is_empty() { param.default_grid() } else { values.clone() };
            let corpus = load_corpus(&cfg)?;
            let enc = load_clap(&cfg)?;
            let table = run_sweep(&corpus, &enc, *param, &values, &seeds, &cfg.captioner, cfg.threads)?;
            let dir = cfg.out.join(format!("sweep-{}", param.name()));
            let outputs = save_table(&dir, &table)?;
            log(&table.summary_csv());
            write_manifest(&dir, "sweep", &cfg, start, outputs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("zerocap").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(&file, "seed = 7\ncaptioner.beta = 0.2\ncaptioner.N = 3\n").unwrap();
        let cmd = parse(&["eval", "--config", file.to_str().unwrap(), "--beta", "0.4", "--K", "6"]);
        let Command::Eval(common) = cmd else { panic!() };
        let cfg = common.resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.captioner.beta, cfg.captioner.n, cfg.captioner.k), (0.4, 3, 6));
        assert_eq!(cfg.captioner.m, CaptionerHyper::default().m);
    }

    #[test]
    fn invalid_override_is_a_config_error() {
        let Command::Eval(common) = parse(&["eval", "--beta", "1.5"]) else { panic!() };
        assert!(matches!(common.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn list_flags() {
        let Command::Ablate { settings, seeds, .. } = parse(&["ablate", "--settings", "a,f", "--seeds", "5"]) else {
            panic!()
        };
        assert_eq!(settings, [AblationSetting::A, AblationSetting::F]);
        assert_eq!(seeds, Some(5));
        let Command::Sweep { param, values, .. } = parse(&["sweep", "--param", "beta", "--values", "0,0.2,1"]) else {
            panic!()
        };
        assert_eq!(param, SweepParam::Beta);
        assert_eq!(values, [0.0, 0.2, 1.0]);
        assert!(Cli::try_parse_from(["zerocap", "ablate", "--settings", "a,z"]).is_err());
        assert!(Cli::try_parse_from(["zerocap", "infer", "--split", "nope"]).is_err());
    }

    #[test]
    fn training_view_ignores_decoding_fields() {
        let a = CaptionerHyper::default();
        let b = CaptionerHyper {
            beam: 1,
            max_len: 4,
            ..a.clone()
        };
        assert_eq!(training_view(&a), training_view(&b));
        let c = CaptionerHyper { beta: 0.1, ..a.clone() };
        assert_ne!(training_view(&a), training_view(&c));
    }

    #[test]
    fn setting_labels() {
        let h = CaptionerHyper::default();
        assert_eq!(setting_label(&h), "f");
        assert_eq!(setting_label(&h.with_setting(AblationSetting::C)), "c");
    }
}
