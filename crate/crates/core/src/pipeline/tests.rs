use super::*;
use crate::jointspace::{train_dual_encoder, DualEncoderConfig};
use crate::synthworld::{gen_corpus, CorpusConfig};
use crate::tensor::Mat;
use std::sync::OnceLock;

fn tiny() -> &'static (Corpus, DualEncoder<f64>) {
    static CELL: OnceLock<(Corpus, DualEncoder<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = gen_corpus(
            &CorpusConfig {
                num_events: 8,
                pretrain_size: 300,
                source_train_size: 40,
                source_test_size: 12,
                target_test_size: 12,
                ..CorpusConfig::default()
            },
            5,
        )
        .unwrap();
        let cfg = DualEncoderConfig {
            embed_dim: 16,
            token_dim: 16,
            hidden: 32,
            iterations: 400,
            batch_size: 32,
            lr: 3e-3,
            ..DualEncoderConfig::default()
        };
        let (enc, _) = train_dual_encoder(&corpus.pretrain, corpus.vocab.len(), &cfg, 5).unwrap();
        (corpus, enc)
    })
}

fn small_hyper() -> CaptionerHyper {
    CaptionerHyper {
        k: 2,
        n: 3,
        mapping_hidden: 16,
        iterations: 12,
        batch_size: 6,
        lr: 1e-3,
        warmup: 3,
        decoder: DecoderConfig {
            model_dim: 16,
            ..DecoderConfig::default()
        },
        ..CaptionerHyper::default()
    }
}

#[test]
fn defaults_follow_the_reference_configuration() {
    let h = CaptionerHyper::default();
    assert_eq!((h.n, h.m, h.k, h.beam), (5, 4, 10, 3));
    assert_eq!((h.sigma, h.beta, h.weight_decay), (0.1, 0.6, 0.02));
    assert!(h.use_ia && h.use_ea && h.use_ap && h.include_self);
    h.validate().unwrap();
}

#[test]
fn setting_flags() {
    let want = [
        ("a", (false, false, false)),
        ("b", (true, false, false)),
        ("c", (false, true, false)),
        ("d", (false, false, true)),
        ("e", (true, true, false)),
        ("f", (true, true, true)),
    ];
    for (label, flags) in want {
        let s: AblationSetting = label.parse().unwrap();
        assert_eq!(s.flags(), flags);
        assert_eq!(s.to_string(), label);
    }
    assert!("g".parse::<AblationSetting>().is_err());
}

#[test]
fn invalid_hypers_are_config_errors() {
    for h in [
        CaptionerHyper {
            beta: 1.5,
            ..CaptionerHyper::default()
        },
        CaptionerHyper {
            k: 0,
            ..CaptionerHyper::default()
        },
        CaptionerHyper {
            sigma: -0.1,
            ..CaptionerHyper::default()
        },
    ] {
        assert!(matches!(h.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn training_is_deterministic_and_leaves_the_encoder_alone() {
    let (corpus, enc) = tiny();
    let before = enc.clone();
    let h = small_hyper();
    let (m1, c1) = train_captioner(corpus, enc, &h, 3).unwrap();
    let (m2, c2) = train_captioner(corpus, enc, &h, 3).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    assert_eq!(c1.len(), h.iterations);
    assert_eq!(&before, enc);
    let (m3, _) = train_captioner(corpus, enc, &h, 4).unwrap();
    assert_ne!(m1, m3);
    // The lock is released afterwards.
    assert!(corpus.source_train.audio(0).is_ok());
}

#[test]
fn base_setting_ignores_mechanism_hypers() {
    let (corpus, enc) = tiny();
    let a = small_hyper().with_setting(AblationSetting::A);
    let other = CaptionerHyper {
        n: 2,
        m: 1,
        sigma: 0.7,
        beta: 0.1,
        ..a.clone()
    };
    assert_eq!(
        train_captioner(corpus, enc, &a, 1).unwrap(),
        train_captioner(corpus, enc, &other, 1).unwrap()
    );
}

#[test]
fn zero_noise_augmentation_matches_replacement_only() {
    // With sigma = 0 no noise is drawn, and the replacement stream must be
    // untouched by the augmentation switch.
    let (corpus, enc) = tiny();
    let b = small_hyper().with_setting(AblationSetting::B);
    let e = CaptionerHyper {
        sigma: 0.0,
        ..small_hyper().with_setting(AblationSetting::E)
    };
    assert_eq!(train_captioner(corpus, enc, &b, 2).unwrap(), train_captioner(corpus, enc, &e, 2).unwrap());
}

#[test]
fn zero_shot_is_deterministic_and_bounded() {
    let (corpus, enc) = tiny();
    let h = CaptionerHyper {
        max_len: 5,
        ..small_hyper()
    };
    let (model, _) = train_captioner(corpus, enc, &h, 1).unwrap();
    let labels = EventLabels::new(enc, &corpus.events, &corpus.vocab).unwrap();
    for i in 0..4 {
        let clip = corpus.target_test.audio(i).unwrap();
        let a = zero_shot_caption(clip, enc, &model, &labels, &h).unwrap();
        assert_eq!(a, zero_shot_caption(clip, enc, &model, &labels, &h).unwrap());
        assert!(a.len() <= 5);
    }
}

/// Decoder whose attention averages the context and whose output reads
/// token identity straight back, so it repeats the event word of the hard
/// prompt.
fn copying_decoder(vocab_len: usize, max_seq: usize) -> DecoderParams<f64> {
    let cfg = DecoderConfig {
        model_dim: vocab_len,
        heads: 1,
        max_seq,
        ffn_mult: 1,
        ..DecoderConfig::default()
    };
    let mut p = DecoderParams::zeros(vocab_len, &cfg).unwrap();
    let d = vocab_len;
    for t in 0..d {
        p.tok_emb.set(t, t, 1.0);
        p.qkv.w.set(t, 2 * d + t, 1.0);
        p.proj.w.set(t, t, 1.0);
        p.out.w.set(t, t, 1.0);
    }
    p
}

#[test]
fn copying_decoder_names_the_retrieved_event() {
    let (corpus, enc) = tiny();
    let hyper = CaptionerHyper {
        m: 1,
        k: 1,
        max_len: 4,
        ..small_hyper()
    };
    let labels = EventLabels::new(enc, &corpus.events, &corpus.vocab).unwrap();
    let mut dec = copying_decoder(corpus.vocab.len(), 24);
    // Only event words carry a signal; prompt words and BOS stay silent.
    for w in ["there", "are", "in", "the", "audio"] {
        dec.tok_emb.row_mut(corpus.vocab.id(w).unwrap() as usize).fill(0.0);
    }
    for t in [crate::synthworld::BOS, crate::synthworld::COMMA] {
        dec.tok_emb.row_mut(t as usize).fill(0.0);
    }
    let model = Captioner {
        map: MappingNet::zeros(enc.embed_dim(), 4, 1, corpus.vocab.len()),
        dec,
    };
    let mut checked = 0;
    for ev in corpus.events.iter().filter(|e| !e.name.contains('_')) {
        let clip = ev.signature.clone();
        let e = enc.encode_audio(&clip).unwrap();
        assert_eq!(labels.retrieve(&e, 1).unwrap(), vec![ev.id], "encoder misses {}", ev.name);
        let c = zero_shot_caption(&clip, enc, &model, &labels, &hyper).unwrap();
        let word = corpus.vocab.id(&ev.name).unwrap();
        assert!(c.tokens().contains(&word), "{} -> {}", ev.name, corpus.text(&c));
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn mean_and_sample_std() {
    let c = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!((c.mean, c.std), (2.0, 1.0));
    assert_eq!(mean_std(&[4.0]).std, 0.0);
}

#[test]
fn sweep_parameters() {
    let base = CaptionerHyper::default();
    let h = SweepParam::Sigma2.apply(&base, 0.01).unwrap();
    assert!((h.sigma - 0.1).abs() < 1e-15);
    assert_eq!(SweepParam::N.apply(&base, 7.0).unwrap().n, 7);
    assert!(SweepParam::N.apply(&base, 2.5).is_err());
    assert!(SweepParam::Beta.apply(&base, 1.2).is_err());
    assert_eq!("beta".parse::<SweepParam>().unwrap(), SweepParam::Beta);
    assert_eq!(SweepParam::Beta.default_grid(), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(SweepParam::N.default_grid(), vec![1.0, 3.0, 5.0, 7.0, 10.0]);
}

fn quick() -> CaptionerHyper {
    CaptionerHyper {
        iterations: 3,
        max_len: 4,
        beam: 2,
        ..small_hyper()
    }
}

#[test]
fn ablation_bookkeeping_and_thread_independence() {
    let (corpus, enc) = tiny();
    let settings = [AblationSetting::A, AblationSetting::F];
    let one = run_ablation(corpus, enc, &settings, &[1, 2], &quick(), 1).unwrap();
    let two = run_ablation(corpus, enc, &settings, &[1, 2], &quick(), 2).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.rows.len(), 2);
    assert_eq!(one.records.len(), 2 * 2 * 2 * 6);
    assert_eq!(one.rows[0].cells.len(), 12);
    let csv = one.summary_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split(',').count(), 1 + 24);
    assert!(lines[1].starts_with("a,") && lines[2].starts_with("f,"));
    assert_eq!(one.values("f", SplitName::TargetTest, "cider").len(), 2);
}

#[test]
fn beta_sweep_emits_one_row_per_value() {
    let (corpus, enc) = tiny();
    let grid = SweepParam::Beta.default_grid();
    let t = run_sweep(corpus, enc, SweepParam::Beta, &grid, &[1], &quick(), 1).unwrap();
    let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["beta=0", "beta=0.2", "beta=0.4", "beta=0.6", "beta=0.8", "beta=1"]);
}

#[test]
fn grid_contracts() {
    let (corpus, enc) = tiny();
    assert!(run_ablation(corpus, enc, &[AblationSetting::A], &[], &quick(), 1).is_err());
    assert!(run_sweep(corpus, enc, SweepParam::N, &[], &[1], &quick(), 1).is_err());
}

#[test]
fn event_labels_render_prompts() {
    let (corpus, enc) = tiny();
    let labels = EventLabels::new(enc, &corpus.events, &corpus.vocab).unwrap();
    let e = enc.encode_tokens(&corpus.vocab.encode("rain").unwrap_or_else(|_| vec![4])).unwrap();
    let ids = labels.retrieve(&e, 3).unwrap();
    assert_eq!(ids.len(), 3);
    let h = labels.prompt(&ids).unwrap();
    assert_eq!(h.events, ids);
    let _ = Mat::<f64>::zeros(1, 1);
}
