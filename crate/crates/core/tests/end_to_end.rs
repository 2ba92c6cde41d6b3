//! Small end-to-end runs through the public API: corpus, dual encoder,
//! captioner, persistence and evaluation.

use std::sync::OnceLock;

use zerocap::config::ExperimentConfig;
use zerocap::decoder::DecoderConfig;
use zerocap::jointspace::{train_dual_encoder, DualEncoderConfig};
use zerocap::pipeline::{run_ablation, train_captioner, AblationSetting, CaptionerHyper, EventLabels, ZeroShot};
use zerocap::store::{self, CaptionerHeader, EncoderHeader};
use zerocap::synthworld::{gen_corpus, Corpus, CorpusConfig, SplitName};
use zerocap::{Captioner32, DualEncoder32};

fn config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 9,
        world: CorpusConfig {
            num_events: 10,
            pretrain_size: 300,
            source_train_size: 60,
            source_test_size: 16,
            target_test_size: 16,
            ..CorpusConfig::default()
        },
        clap: DualEncoderConfig {
            embed_dim: 16,
            token_dim: 16,
            hidden: 32,
            iterations: 300,
            batch_size: 32,
            lr: 3e-3,
            ..DualEncoderConfig::default()
        },
        captioner: CaptionerHyper {
            k: 2,
            n: 3,
            m: 2,
            mapping_hidden: 16,
            iterations: 20,
            batch_size: 8,
            warmup: 5,
            max_len: 6,
            beam: 2,
            decoder: DecoderConfig {
                model_dim: 16,
                ..DecoderConfig::default()
            },
            ..CaptionerHyper::default()
        },
        ..ExperimentConfig::default()
    }
}

fn world() -> &'static (Corpus, DualEncoder32) {
    static CELL: OnceLock<(Corpus, DualEncoder32)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = config();
        let corpus = gen_corpus(&cfg.world, cfg.seed).unwrap();
        let (enc, curve) = train_dual_encoder(&corpus.pretrain, corpus.vocab.len(), &cfg.clap, cfg.seed).unwrap();
        assert!(curve.last().unwrap().loss < curve[0].loss);
        (corpus, enc)
    })
}

#[test]
fn corpus_generation_is_a_pure_function_of_config_and_seed() {
    let cfg = config();
    let a = gen_corpus(&cfg.world, cfg.seed).unwrap();
    assert_eq!(a, gen_corpus(&cfg.world, cfg.seed).unwrap());
    assert_ne!(a, gen_corpus(&cfg.world, cfg.seed + 1).unwrap());
    assert_eq!(a.target_test.len(), 16);
}

#[test]
fn persisted_models_caption_exactly_like_the_originals() {
    let cfg = config();
    let (corpus, enc) = world();
    let (model, _) = train_captioner(corpus, enc, &cfg.captioner, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();

    store::save_corpus(&dir.path().join("corpus"), corpus, &cfg.corpus_hash()).unwrap();
    let enc_header = EncoderHeader {
        hash: cfg.clap_hash(),
        vocab_len: corpus.vocab.len(),
        audio_dim: enc.audio_dim(),
        config: cfg.clap.clone(),
    };
    store::save_encoder(&dir.path().join("clap.txt"), &enc_header, enc).unwrap();
    let cap_header = CaptionerHeader {
        hash: cfg.captioner_hash(&cfg.captioner, 1),
        clap_hash: cfg.clap_hash(),
        seed: 1,
        vocab_len: corpus.vocab.len(),
        embed_dim: enc.embed_dim(),
        hyper: cfg.captioner.clone(),
    };
    store::save_captioner(&dir.path().join("cap.txt"), &cap_header, &model).unwrap();

    let (corpus2, hash) = store::load_corpus(&dir.path().join("corpus")).unwrap();
    let (_, enc2): (_, DualEncoder32) = store::load_encoder(&dir.path().join("clap.txt")).unwrap();
    let (header2, model2): (_, Captioner32) = store::load_captioner(&dir.path().join("cap.txt")).unwrap();
    assert_eq!(hash, cfg.corpus_hash());
    assert_eq!(header2, cap_header);

    let report = |c: &Corpus, e: &DualEncoder32, m: &Captioner32| {
        let labels = EventLabels::new(e, &c.events, &c.vocab).unwrap();
        let zs = ZeroShot {
            encoder: e,
            model: m,
            labels: &labels,
            hyper: &cfg.captioner,
        };
        zs.evaluate(c.split(SplitName::TargetTest)).unwrap()
    };
    assert_eq!(report(corpus, enc, &model), report(&corpus2, &enc2, &model2));
}

#[test]
fn ablation_table_has_one_row_per_setting() {
    let cfg = config();
    let (corpus, enc) = world();
    let settings = [AblationSetting::A, AblationSetting::D, AblationSetting::F];
    let table = run_ablation(corpus, enc, &settings, &[1], &cfg.captioner, 1).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["a", "d", "f"]);
    for row in &table.rows {
        assert_eq!(row.cells.len(), 12);
        assert!(row.cells.iter().all(|c| c.2.mean.is_finite() && c.2.mean >= 0.0));
    }
}
