mod common;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqw2v::autodiff::{attention_probs, Tape};
use vqw2v::mlm::{
    bigram_streams, build_vocab, sample_span_mask, MaskedEncoderConfig, MaskedLm, SpanMaskConfig, Vocabulary, MASK,
    PAD, UNK,
};
use vqw2v::params::uniform;
use vqw2v::tokens::{TokenHeader, TokenStream};

fn stream(frames: &[[u32; 2]], hash: u64) -> TokenStream {
    let mut s = TokenStream::new(TokenHeader::new(2, 8, hash, "t"));
    for f in frames {
        s.push(f).unwrap();
    }
    s
}

#[test]
fn vocabulary_examples() {
    let v = build_vocab(&[stream(&[[1, 2], [1, 2], [3, 4]], 5)]).unwrap();
    assert_eq!(v.tuple_count(), 2);
    assert_eq!(v.len(), 5);
    assert_eq!(v.id(&[1, 2]), 3);
    assert_eq!(v.id(&[3, 4]), 4);
    assert_eq!(v.id(&[7, 7]), UNK);
    assert!(build_vocab(&[]).is_err());
    let again = build_vocab(&[stream(&[[1, 2], [1, 2], [3, 4]], 5)]).unwrap();
    assert_eq!(v, again);
    assert!(build_vocab(&[stream(&[[1, 2]], 5), stream(&[[1, 2]], 6)]).is_err());
    assert_ne!(PAD, MASK);
}

#[test]
fn vocabulary_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<[u32; 2]> = (0..300).map(|_| [rng.random_range(0..8), rng.random_range(0..8)]).collect();
    let v = build_vocab(&[stream(&frames, 11)]).unwrap();
    assert!(v.tuple_count() <= 64.min(frames.len()));
    for id in 3..v.len() as u32 {
        assert_eq!(v.id(v.tuple(id).unwrap()), id);
    }
    let text = v.to_text();
    assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), v);
    assert!(v.encode(&stream(&frames, 12)).is_err());
}

#[test]
fn span_mask_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let m = sample_span_mask(100, &SpanMaskConfig { p: 0.1, span: 1 }, &mut rng).unwrap();
        assert_eq!(m.starts.len(), 10);
        assert_eq!(m.count(), 10);
    }
    let cfg = SpanMaskConfig { p: 0.05, span: 10 };
    for seed in 0..10_000 {
        let m = sample_span_mask(100, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(m.starts.len(), 5);
        assert_eq!(m.starts.iter().collect::<HashSet<_>>().len(), 5);
        // truncation at the end can only shrink the union below M when the
        // first start lies in the last M positions
        let floor = cfg.span.min(100 - m.starts[0]);
        assert!(m.count() >= floor && m.count() <= 50, "seed {seed}: {}", m.count());
        for p in m.positions() {
            assert!(m.starts.iter().any(|&s| s <= p && p < s + cfg.span));
        }
    }
    let a = sample_span_mask(64, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_span_mask(64, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
    assert!(sample_span_mask(0, &cfg, &mut rng).is_err());
    assert!(sample_span_mask(5, &SpanMaskConfig { p: 0.0, span: 3 }, &mut rng).is_err());
}

/// All start sets of size `n` from `0..t`, enumerated directly.
fn enumerated_fraction(t: usize, n: usize, m: usize) -> f64 {
    fn rec(t: usize, n: usize, m: usize, from: usize, chosen: &mut Vec<usize>, acc: &mut (f64, u64)) {
        if chosen.len() == n {
            let mut masked = vec![false; t];
            for &s in chosen.iter() {
                for x in masked.iter_mut().take((s + m).min(t)).skip(s) {
                    *x = true;
                }
            }
            acc.0 += masked.iter().filter(|&&b| b).count() as f64 / t as f64;
            acc.1 += 1;
            return;
        }
        for s in from..t {
            chosen.push(s);
            rec(t, n, m, s + 1, chosen, acc);
            chosen.pop();
        }
    }
    let mut acc = (0.0, 0);
    rec(t, n, m, 0, &mut Vec::new(), &mut acc);
    acc.0 / acc.1 as f64
}

#[test]
fn mask_fraction_oracle_agrees_with_enumeration() {
    for (t, m) in [(12, 3), (15, 4), (10, 10), (9, 1)] {
        for p in [0.1, 0.2, 0.3] {
            let n = (p * t as f64).round() as usize;
            let direct = enumerated_fraction(t, n, m);
            let formula = common::expected_mask_fraction(t, p, m);
            assert!((direct - formula).abs() < 1e-12, "T={t} p={p} M={m}: {direct} vs {formula}");
        }
    }
}

#[test]
fn mask_fraction_matches_oracle() {
    let cfg = SpanMaskConfig::default();
    let mean: f64 = (0..10_000u64)
        .map(|seed| sample_span_mask(200, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().count() as f64 / 200.0)
        .sum::<f64>()
        / 10_000.0;
    let expect = common::expected_mask_fraction(200, 0.05, 10);
    assert!((mean - expect).abs() / expect < 0.01, "{mean} vs {expect}");
    assert!((0.30..=0.50).contains(&mean));
}

fn tiny(dropout: f64) -> MaskedEncoderConfig {
    MaskedEncoderConfig { dropout, ..MaskedEncoderConfig::tiny() }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for heads in [1, 2, 4] {
        let q = uniform(&mut rng, &[13, 8], 4.0);
        let k = uniform(&mut rng, &[13, 8], 4.0);
        let p = attention_probs(&q, &k, heads).unwrap();
        for row in p.chunks(13) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn untrained_accuracy_is_chance() {
    let vocab_size = 3 + 50;
    let model = MaskedLm::new(&tiny(0.0), vocab_size, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut correct, mut total) = (0, 0);
    for _ in 0..150 {
        let ids: Vec<u32> = (0..64).map(|_| rng.random_range(3..vocab_size as u32)).collect();
        let mask = sample_span_mask(64, &SpanMaskConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let out = model.masked_loss(&mut tape, &b, &ids, &mask, false, &mut rng).unwrap().unwrap();
        correct += out.correct;
        total += out.masked;
    }
    let acc = correct as f64 / total as f64;
    let chance = 1.0 / vocab_size as f64;
    assert!(acc > 0.3 * chance && acc < 2.5 * chance, "accuracy {acc} vs chance {chance}");
}

#[test]
fn empty_mask_is_skipped() {
    let model = MaskedLm::new(&tiny(0.0), 10, 0).unwrap();
    let mask = vqw2v::mlm::SpanMask { starts: vec![], masked: vec![false; 4] };
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let out = model.masked_loss(&mut tape, &b, &[3, 4, 5, 6], &mask, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.is_none());
}

#[test]
fn features_are_bidirectional_and_deterministic() {
    let model = MaskedLm::new(&tiny(0.05), 20, 3).unwrap();
    let ids: Vec<u32> = (0..24).map(|i| 3 + (i * 7) % 17).collect();
    let f = model.extract_features(&ids).unwrap();
    assert_eq!(f.shape(), &[64, 24]);
    assert_eq!(f, model.extract_features(&ids).unwrap());
    let mut changed = ids.clone();
    let t0 = 12;
    changed[t0] = if ids[t0] == 5 { 6 } else { 5 };
    let g = model.extract_features(&changed).unwrap();
    let differs = |t: usize| (0..64).any(|r| (f.data()[r * 24 + t] - g.data()[r * 24 + t]).abs() > 1e-9);
    let before = (0..t0).filter(|&t| differs(t)).count();
    let after = (t0 + 1..24).filter(|&t| differs(t)).count();
    assert_eq!(before, t0);
    assert_eq!(after, 24 - t0 - 1);
    assert!(model.extract_features(&[3, 99]).is_err());
}

#[test]
fn bigram_streams_follow_a_fixed_successor() {
    let streams = bigram_streams(50, 8, 40, 1).unwrap();
    let mut next = std::collections::HashMap::new();
    for s in &streams {
        assert_eq!(s.len(), 40);
        for w in s.indices().windows(2) {
            assert_eq!(*next.entry(w[0]).or_insert(w[1]), w[1]);
        }
    }
    assert_eq!(streams, bigram_streams(50, 8, 40, 1).unwrap());
}
