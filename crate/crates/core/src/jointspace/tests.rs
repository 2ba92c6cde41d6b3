use super::*;
use crate::gradcheck::check_gradients;
use crate::nn::Linear;
use crate::synthworld::{gen_corpus, CorpusConfig};

fn eye2() -> Mat<f64> {
    Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0])
}

/// d = 2 encoder with identity-like heads.
fn hand_params() -> DualEncoder<f64> {
    DualEncoder {
        tok_emb: Mat::from_vec(3, 2, vec![0.0, 0.0, 0.5, 0.25, -1.0, 1.0]),
        text_head: Mlp2 {
            l1: Linear {
                w: eye2(),
                b: Mat::zeros(1, 2),
            },
            l2: Linear {
                w: eye2(),
                b: Mat::from_vec(1, 2, vec![0.1, -0.1]),
            },
        },
        audio_head: Mlp2 {
            l1: Linear {
                w: Mat::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.25]),
                b: Mat::from_vec(1, 2, vec![0.0, 0.5]),
            },
            l2: Linear {
                w: Mat::from_vec(2, 2, vec![1.0, 1.0, 0.0, 1.0]),
                b: Mat::zeros(1, 2),
            },
        },
        log_temp: Mat::from_vec(1, 1, vec![0.0]),
    }
}

#[test]
fn hand_sized_text_encoding() {
    let e = hand_params().encode_tokens(&[1]).unwrap();
    // normalize(tanh(0.5) + 0.1, tanh(0.25) − 0.1)
    let want = [0.9683372440875281, 0.2496457123865163];
    for (g, w) in e.as_slice().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn hand_sized_audio_encoding() {
    let e = hand_params().encode_audio(&[1.0, -2.0]).unwrap();
    // hidden = (tanh 0.5, tanh 0) → output (tanh 0.5, tanh 0.5)
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for g in e.as_slice() {
        assert!((g - h).abs() < 1e-12);
    }
}

#[test]
fn empty_caption_is_an_input_error() {
    assert!(matches!(hand_params().encode_tokens(&[]), Err(Error::Input(_))));
}

fn random_params(d: usize, seed: u64) -> DualEncoder<f64> {
    let cfg = DualEncoderConfig {
        embed_dim: d,
        token_dim: 6,
        hidden: 7,
        ..DualEncoderConfig::default()
    };
    DualEncoder::init(12, 5, &cfg, &mut rng::stream(seed, "test"))
}

#[test]
fn encodings_are_unit_norm_and_deterministic() {
    let p = random_params(8, 1);
    for toks in [&[4u32][..], &[4, 5, 6], &[11, 11, 3, 9]] {
        let a = p.encode_tokens(toks).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, p.encode_tokens(toks).unwrap());
    }
    let clip = [0.3, -0.1, 0.8, 0.0, 1.2];
    let a = p.encode_audio(&clip).unwrap();
    assert!((a.norm() - 1.0).abs() < 1e-6);
    assert_eq!(a, p.encode_audio(&clip).unwrap());
    assert!(p.encode_audio(&clip[..3]).is_err());
}

#[test]
fn single_pair_loss_is_zero() {
    let p = random_params(8, 2);
    let loss = p.infonce_loss(&[(&[0.1, 0.2, 0.3, 0.4, 0.5], &[4, 5])]).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn identical_batch_loss_is_ln_b() {
    let p = random_params(8, 3);
    let clip = [0.1, 0.2, 0.3, 0.4, 0.5];
    let cap = [4u32, 7];
    let batch = vec![(&clip[..], &cap[..]); 5];
    let loss = p.infonce_loss(&batch).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn two_by_two_identity_similarities() {
    let sims = eye2();
    let loss = infonce_from_similarities(&sims, 1.0);
    // −ln(e / (e + 1))
    assert!((loss - 0.3132616875182228).abs() < 1e-12);
}

#[test]
fn infonce_is_nonnegative() {
    let p = random_params(8, 4);
    let clips: Vec<Vec<f64>> = (0..6).map(|i| (0..5).map(|j| ((i * 5 + j) as f64).sin()).collect()).collect();
    let caps: Vec<Vec<u32>> = (0..6).map(|i| vec![3 + i as u32, 9]).collect();
    let batch: Vec<(&[f64], &[u32])> = clips.iter().zip(&caps).map(|(a, c)| (a.as_slice(), c.as_slice())).collect();
    assert!(p.infonce_loss(&batch).unwrap() >= 0.0);
}

#[test]
fn infonce_gradient_matches_finite_differences() {
    let p = random_params(8, 5);
    let clips: Vec<Vec<f64>> = (0..4).map(|i| (0..5).map(|j| ((i * 7 + j) as f64 * 0.37).cos()).collect()).collect();
    let caps: Vec<Vec<u32>> = vec![vec![1, 2, 3], vec![4, 4], vec![5, 6, 7, 8], vec![9]];
    let batch: Vec<(&[f64], &[u32])> = clips.iter().zip(&caps).map(|(a, c)| (a.as_slice(), c.as_slice())).collect();
    let (_, grad) = p.infonce_loss_and_grad(&batch).unwrap();
    let report = check_gradients(&p, &grad, 1e-4, |q| q.infonce_loss(&batch).unwrap());
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn modality_gap_of_identical_sets() {
    let e = |v: &[f64]| Embedding::try_new(v.to_vec()).unwrap();
    let set = vec![e(&[1.0, 0.0]), e(&[0.0, 1.0]), e(&[0.6, 0.8])];
    let (cos, dist) = modality_gap_from_embeddings(&set, &set).unwrap();
    assert!((cos - 1.0).abs() < 1e-12);
    assert_eq!(dist, 0.0);
}

#[test]
fn modality_gap_of_orthogonal_pairs() {
    let e = |v: &[f64]| Embedding::try_new(v.to_vec()).unwrap();
    let audio = vec![e(&[1.0, 0.0]), e(&[1.0, 0.0])];
    let text = vec![e(&[0.0, 1.0]), e(&[0.0, 1.0])];
    let (cos, dist) = modality_gap_from_embeddings(&audio, &text).unwrap();
    assert_eq!(cos, 0.0);
    assert!((dist - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn modality_gap_is_permutation_invariant() {
    let p = random_params(8, 6);
    let clips: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| ((i + 2 * j) as f64).sin()).collect()).collect();
    let caps: Vec<Vec<u32>> = (0..5).map(|i| vec![2 + i as u32, 10 - i as u32]).collect();
    let pairs: Vec<(&[f64], &[u32])> = clips.iter().zip(&caps).map(|(a, c)| (a.as_slice(), c.as_slice())).collect();
    let mut rev = pairs.clone();
    rev.reverse();
    let (c1, d1) = modality_gap(&p, &pairs).unwrap();
    let (c2, d2) = modality_gap(&p, &rev).unwrap();
    assert!((c1 - c2).abs() < 1e-12 && (d1 - d2).abs() < 1e-12);
}

fn tiny_corpus() -> crate::synthworld::Corpus {
    gen_corpus(
        &CorpusConfig {
            num_events: 8,
            pretrain_size: 120,
            source_train_size: 10,
            source_test_size: 10,
            target_test_size: 10,
            ..CorpusConfig::default()
        },
        9,
    )
    .unwrap()
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let corpus = tiny_corpus();
    let cfg = DualEncoderConfig {
        iterations: 150,
        batch_size: 16,
        lr: 3e-3,
        embed_dim: 16,
        hidden: 16,
        token_dim: 8,
        ..DualEncoderConfig::default()
    };
    let (a, curve_a) = train_dual_encoder::<f64>(&corpus.pretrain, corpus.vocab.len(), &cfg, 1).unwrap();
    let (b, curve_b) = train_dual_encoder::<f64>(&corpus.pretrain, corpus.vocab.len(), &cfg, 1).unwrap();
    assert_eq!(a, b);
    assert_eq!(curve_a, curve_b);
    let head: f64 = curve_a[..10].iter().map(|p| p.loss).sum::<f64>() / 10.0;
    let tail: f64 = curve_a[curve_a.len() - 10..].iter().map(|p| p.loss).sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn training_rejects_empty_split() {
    let empty = Split::new(crate::synthworld::SplitName::Pretrain, Vec::new());
    let r = train_dual_encoder::<f64>(&empty, 10, &DualEncoderConfig::default(), 0);
    assert!(matches!(r, Err(Error::Input(_))));
}
