//! Experiment configuration: one TOML file with flat dotted keys, e.g.
//!
//! ```toml
//! seed = 42
//! world.num_events = 48
//! captioner.beta = 0.6
//! ```
//!
//! Missing keys take defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jointspace::DualEncoderConfig;
use crate::pipeline::CaptionerHyper;
use crate::synthworld::CorpusConfig;

/// Locations of persisted artifacts. Unset entries resolve under the output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactPaths {
    pub corpus: Option<PathBuf>,
    pub clap: Option<PathBuf>,
    pub captioner: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for the corpus, the dual encoder and single captioner runs.
    pub seed: u64,
    /// Captioner seeds for ablations and sweeps.
    pub seeds: Vec<u64>,
    /// Worker threads for ablation and sweep fan-out.
    pub threads: usize,
    pub out: PathBuf,
    pub world: CorpusConfig,
    pub clap: DualEncoderConfig,
    pub captioner: CaptionerHyper,
    pub paths: ArtifactPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            seeds: (1..=5).collect(),
            threads: 1,
            out: PathBuf::from("runs"),
            world: CorpusConfig::default(),
            clap: DualEncoderConfig::default(),
            captioner: CaptionerHyper::default(),
            paths: ArtifactPaths::default(),
        }
    }
}

fn sha256_hex(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.captioner.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let c = &self.clap;
        if c.embed_dim == 0 || c.token_dim == 0 || c.hidden == 0 || c.batch_size == 0 {
            return Err(Error::Config("dual-encoder sizes must be positive".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(c.init_temperature) || !positive(c.lr) {
            return Err(Error::Config("dual-encoder temperature and lr must be positive".into()));
        }
        Ok(())
    }

    /// Identity of the corpus this config generates.
    pub fn corpus_hash(&self) -> String {
        sha256_hex(&(self.seed, &self.world))
    }

    /// Identity of the dual encoder trained on that corpus.
    pub fn clap_hash(&self) -> String {
        sha256_hex(&(self.corpus_hash(), &self.clap))
    }

    /// Identity of a captioner trained with `hyper` and `seed` on top of the
    /// dual encoder.
    pub fn captioner_hash(&self, hyper: &CaptionerHyper, seed: u64) -> String {
        sha256_hex(&(self.clap_hash(), hyper, seed))
    }

    /// Hash of the whole resolved config.
    pub fn hash(&self) -> String {
        sha256_hex(self)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.paths.corpus.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    pub fn clap_path(&self) -> PathBuf {
        self.paths.clap.clone().unwrap_or_else(|| self.out.join("clap").join("params.txt"))
    }

    pub fn captioner_path(&self) -> PathBuf {
        self.paths
            .captioner
            .clone()
            .unwrap_or_else(|| self.out.join("captioner").join("params.txt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dotted_keys_override_nested_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 7\nworld.num_events = 12\ncaptioner.N = 3\ncaptioner.beta = 0.2\ncaptioner.decoder.model_dim = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.world.num_events, 12);
        assert_eq!((cfg.captioner.n, cfg.captioner.beta), (3, 0.2));
        assert_eq!(cfg.captioner.decoder.model_dim, 32);
        assert_eq!(cfg.captioner.k, 10);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for text in ["captioner.gamma = 1", "threads = 0", "captioner.beta = 2.0", "seed = \"x\""] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.captioner.sigma = 0.25;
        cfg.paths.clap = Some(PathBuf::from("x/clap.txt"));
        assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn hashes_track_their_upstream_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.captioner.beta = 0.2;
        assert_eq!(a.corpus_hash(), b.corpus_hash());
        assert_eq!(a.clap_hash(), b.clap_hash());
        assert_ne!(a.hash(), b.hash());
        b.world.num_events = 12;
        assert_ne!(a.corpus_hash(), b.corpus_hash());
        assert_ne!(a.clap_hash(), b.clap_hash());
        assert_eq!(a.corpus_hash().len(), 64);
        let h = &a.captioner;
        assert_ne!(a.captioner_hash(h, 1), a.captioner_hash(h, 2));
    }

    #[test]
    fn missing_file_is_an_io_error_naming_the_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/cfg.toml"));
    }
}
