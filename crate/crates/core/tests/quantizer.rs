use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqw2v::params::{uniform, ParamStore};
use vqw2v::quantizer::{
    argmax, codeword_usage, gumbel_noise, gumbel_probs, kmeans_quantize, partition, Backend, Mode, Quantizer,
    QuantizerConfig,
};
use vqw2v::tokens::{TokenHeader, TokenStream};

#[test]
fn kmeans_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for draw in 0..1000 {
        let dim = rng.random_range(1..6);
        let v = rng.random_range(2..40);
        // a coarse grid makes exact ties common
        let coarse = draw % 3 == 0;
        let value = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let book: Vec<Vec<f64>> = (0..v).map(|_| (0..dim).map(|_| value(&mut rng)).collect()).collect();
        let z: Vec<f64> = (0..dim).map(|_| value(&mut rng)).collect();
        let dists: Vec<f64> = book.iter().map(|e| e.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        let expect = dists.iter().position(|&d| d == best).unwrap();
        let rows: Vec<&[f64]> = book.iter().map(Vec::as_slice).collect();
        let got = kmeans_quantize(&z, &rows).unwrap();
        assert_eq!(got.index, expect, "draw {draw}");
        assert_eq!(got.distance, best);
        assert_eq!(got.codeword, book[expect]);
    }
}

#[test]
fn low_temperature_probabilities_approach_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let v = rng.random_range(2..50);
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let noise = gumbel_noise(&mut rng, v);
        let p = gumbel_probs(&logits, &noise, 1e-3);
        let shifted: Vec<f64> = logits.iter().zip(&noise).map(|(l, n)| l + n).collect();
        let winner = argmax(&shifted);
        let mut gap = f64::INFINITY;
        for (i, s) in shifted.iter().enumerate() {
            if i != winner {
                gap = gap.min(shifted[winner] - s);
            }
        }
        // skip draws whose top two are within 2e-2: the limit needs a margin
        if gap < 2e-2 {
            continue;
        }
        let worst =
            p.iter().enumerate().map(|(i, &pi)| (pi - if i == winner { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max deviation {worst}");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn training_probabilities_are_distributions() {
    for shared in [true, false] {
        let cfg = QuantizerConfig { shared_codebook: shared, ..QuantizerConfig::gumbel(4, 12) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let q = Quantizer::new(&cfg, 16, &mut store, &mut rng).unwrap();
        for tau in [2.0, 1.0, 0.5, 0.05] {
            let z = uniform(&mut rng, &[16, 9], 3.0);
            let out = q.quantize_sequence(&store, &z, Mode::Train { tau }, &mut rng).unwrap();
            let p = out.probs.unwrap();
            assert_eq!(p.shape(), &[9, 4, 12]);
            for row in p.data().chunks(12) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn infer_is_identical_across_runs_for_both_backends() {
    for backend in [Backend::Kmeans, Backend::Gumbel] {
        let cfg = QuantizerConfig { backend, ..QuantizerConfig::gumbel(2, 32) };
        let mut store = ParamStore::new();
        let q = Quantizer::new(&cfg, 8, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = uniform(&mut ChaCha8Rng::seed_from_u64(9), &[8, 30], 1.0);
        let a = q.quantize_sequence(&store, &z, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = q.quantize_sequence(&store, &z, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.z_hat, b.z_hat);
    }
}

fn stream_of(frames: &[[u32; 2]], vars: u32) -> TokenStream {
    let mut s = TokenStream::new(TokenHeader::new(2, vars, 1, "test"));
    for f in frames {
        s.push(f).unwrap();
    }
    s
}

#[test]
fn usage_examples() {
    let one = stream_of(&[[1, 2]], 4);
    assert_eq!(codeword_usage(&[one]).unwrap().unique, 1);

    let all: Vec<[u32; 2]> = (0..4).flat_map(|a| (0..4).map(move |b| [a, b])).collect();
    let u = codeword_usage(&[stream_of(&all, 4)]).unwrap();
    assert_eq!((u.unique, u.possible), (16, 16));
    assert_eq!(u.fraction, 1.0);

    let crafted = stream_of(
        &[
            [0, 0],
            [1, 1],
            [0, 0],
            [2, 3],
            [1, 1],
            [0, 0],
            [2, 3],
            [2, 3],
            [0, 0],
            [1, 1],
            [0, 0],
            [1, 1],
            [2, 3],
            [0, 0],
            [0, 0],
            [1, 1],
        ],
        4,
    );
    let u = codeword_usage(&[crafted]).unwrap();
    assert_eq!(u.unique, 3);
    assert_eq!(u.fraction, 3.0 / 16.0);
    assert_eq!(u.fraction_of_possible, 3.0 / 16.0);
}

#[test]
fn usage_errors() {
    assert!(codeword_usage(&[]).is_err());
    let a = stream_of(&[[0, 0]], 4);
    let b = stream_of(&[[0, 0]], 8);
    assert!(matches!(codeword_usage(&[a, b]), Err(vqw2v::Error::Incompatible(_))));
}

proptest! {
    #[test]
    fn partition_then_concat_is_identity(groups in 1usize..6, width in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..groups * width).map(|_| rng.random_range(-5.0..5.0)).collect();
        let rows = partition(&z, groups).unwrap();
        prop_assert_eq!(rows.len(), groups);
        prop_assert!(rows.iter().all(|r| r.len() == width));
        prop_assert_eq!(rows.concat(), z);
    }

    #[test]
    fn usage_never_decreases_when_tokens_are_added(
        frames in proptest::collection::vec((0u32..5, 0u32..5), 1..60),
        extra in proptest::collection::vec((0u32..5, 0u32..5), 1..20),
    ) {
        let base: Vec<[u32; 2]> = frames.iter().map(|&(a, b)| [a, b]).collect();
        let mut more = base.clone();
        more.extend(extra.iter().map(|&(a, b)| [a, b]));
        let u0 = codeword_usage(&[stream_of(&base, 5)]).unwrap().unique;
        let u1 = codeword_usage(&[stream_of(&more, 5)]).unwrap().unique;
        prop_assert!(u1 >= u0);
    }
}
