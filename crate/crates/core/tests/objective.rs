use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqw2v::autodiff::gradcheck;
use vqw2v::autodiff::{log_sigmoid, Tape, Tensor};
use vqw2v::convnet::StepHeads;
use vqw2v::objective::{contrastive_loss, sample_negatives, total_loss, LossConfig, NegativeDraw};
use vqw2v::params::{uniform, ParamStore};
use vqw2v::quantizer::{kmeans_aux_loss, Backend};

fn cfg(steps: usize, negatives: usize) -> LossConfig {
    LossConfig { steps, negatives, ..LossConfig::default() }
}

fn heads(steps: usize, din: usize, dout: usize, seed: u64) -> (StepHeads, ParamStore) {
    let mut store = ParamStore::new();
    let h = StepHeads::new(steps, din, dout, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (h, store)
}

fn loss_value(c: &Tensor, z: &Tensor, h: &StepHeads, store: &ParamStore, neg: &NegativeDraw, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let cv = tape.constant(c.clone());
    let zv = tape.constant(z.clone());
    let l = contrastive_loss(&mut tape, &b, cv, zv, h, neg, cfg).unwrap();
    tape.value(l).item()
}

/// Direct evaluation of the summed per-step loss from plain loops.
fn reference_loss(
    c: &Tensor,
    z: &Tensor,
    h: &StepHeads,
    store: &ParamStore,
    neg: &NegativeDraw,
    cfg: &LossConfig,
) -> f64 {
    let (dc, t) = (c.shape()[0], c.shape()[1]);
    let d = z.shape()[0];
    let col =
        |m: &Tensor, rows: usize, j: usize| (0..rows).map(|r| m.data()[r * m.shape()[1] + j]).collect::<Vec<f64>>();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for k in 1..=cfg.steps.min(t.saturating_sub(1)) {
        let (w, bias) = h.param_ids(k).unwrap();
        let (w, bias) = (store.get(w), store.get(bias));
        for i in 0..t - k {
            let ci = col(c, dc, i);
            let pred: Vec<f64> = (0..d).map(|r| dot(&w.data()[r * dc..(r + 1) * dc], &ci) + bias.data()[r]).collect();
            let pos = log_sigmoid(dot(&pred, &col(z, d, i + k)));
            let negs: f64 = neg.get(i, k).iter().map(|&n| log_sigmoid(-dot(&pred, &col(z, d, n)))).sum();
            total -= pos + cfg.lambda * negs / cfg.negatives as f64;
        }
    }
    total
}

#[test]
fn negatives_stay_in_range_and_are_reproducible() {
    let c = cfg(3, 10);
    let draw = sample_negatives(2, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(draw.step(1).iter().all(|&n| n < 2));
    assert_eq!(draw.step(1).len(), 10);
    assert!(draw.step(2).is_empty());
    let a = sample_negatives(50, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = sample_negatives(50, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert!(sample_negatives(1, &c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(sample_negatives(0, &c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn negatives_are_uniform() {
    // 101 frames, one step, 1000 negatives per position: 100,000 draws
    let t = 101;
    let draw = sample_negatives(t, &cfg(1, 1000), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut counts = vec![0usize; t];
    for &n in draw.step(1) {
        counts[n] += 1;
    }
    let n = draw.step(1).len() as f64;
    assert_eq!(n, 100_000.0);
    let expected = n / t as f64;
    let sigma = (n * (1.0 / t as f64) * (1.0 - 1.0 / t as f64)).sqrt();
    for &c in &counts {
        assert!((c as f64 - expected).abs() < 4.0 * sigma);
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 100 degrees of freedom: mean 100, sd ~14.1; 3 sd either side
    assert!((57.6..142.4).contains(&chi2), "chi2 = {chi2}");
}

#[test]
fn zero_representations_give_closed_form() {
    let (h, mut store) = heads(1, 3, 3, 0);
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let c = cfg(1, 10);
    let neg = sample_negatives(10, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let z = Tensor::zeros(&[3, 10]);
    let l = loss_value(&z, &z, &h, &store, &neg, &c);
    let expect = 9.0 * 2.0 * std::f64::consts::LN_2;
    assert!((l - expect).abs() < 1e-12);
    assert!((l - 12.477).abs() < 1e-3);
}

#[test]
fn perfect_scores_drive_loss_towards_zero() {
    // identity head; every positive and every negative score equals s
    let (h, mut store) = heads(1, 1, 1, 0);
    let (w, _) = h.param_ids(1).unwrap();
    store.get_mut(w).data_mut()[0] = 1.0;
    let mut neg = sample_negatives(3, &cfg(1, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    neg.set_step(1, vec![0, 0]).unwrap();
    let z = Tensor::new(vec![1, 3], vec![-1.0, 1.0, 1.0]).unwrap();
    let mut last = f64::INFINITY;
    for s in [1.0, 3.0, 10.0, 40.0] {
        let c = Tensor::new(vec![1, 3], vec![s; 3]).unwrap();
        let l = loss_value(&c, &z, &h, &store, &neg, &cfg(1, 1));
        assert!(l > 0.0 && l < last);
        assert!((l - 4.0 * (-s).exp().ln_1p()).abs() < 1e-12);
        last = l;
    }
    assert!(last < 1e-15);
}

#[test]
fn matches_reference_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20 {
        let (dc, d, t) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..14));
        let c = cfg(rng.random_range(1..6), rng.random_range(1..5));
        let (h, store) = heads(c.steps, dc, d, seed);
        let neg = sample_negatives(t, &c, &mut rng).unwrap();
        let cv = uniform(&mut rng, &[dc, t], 1.5);
        let zv = uniform(&mut rng, &[d, t], 1.5);
        let got = loss_value(&cv, &zv, &h, &store, &neg, &c);
        let want = reference_loss(&cv, &zv, &h, &store, &neg, &c);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        assert!(got > 0.0);
    }
}

#[test]
fn negative_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cfg(2, 4);
    let (h, store) = heads(2, 3, 3, 1);
    let cv = uniform(&mut rng, &[3, 9], 1.0);
    let zv = uniform(&mut rng, &[3, 9], 1.0);
    let neg = sample_negatives(9, &c, &mut rng).unwrap();
    let mut flipped = neg.clone();
    for k in 1..=2 {
        let mut s = neg.step(k).to_vec();
        for chunk in s.chunks_mut(4) {
            chunk.reverse();
        }
        flipped.set_step(k, s).unwrap();
    }
    let a = loss_value(&cv, &zv, &h, &store, &neg, &c);
    let b = loss_value(&cv, &zv, &h, &store, &flipped, &c);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn single_step_is_the_first_slice_of_many() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h8, store) = heads(8, 3, 3, 2);
    let cv = uniform(&mut rng, &[3, 12], 1.0);
    let zv = uniform(&mut rng, &[3, 12], 1.0);
    let c8 = cfg(8, 10);
    let neg = sample_negatives(12, &c8, &mut rng).unwrap();
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let cvar = tape.constant(cv.clone());
    let zvar = tape.constant(zv.clone());
    let l1 = contrastive_loss(&mut tape, &b, cvar, zvar, &h8, &neg, &cfg(1, 10)).unwrap();
    let direct = reference_loss(&cv, &zv, &h8, &store, &neg, &cfg(1, 10));
    assert!((tape.value(l1).item() - direct).abs() < 1e-12);
    let full = loss_value(&cv, &zv, &h8, &store, &neg, &c8);
    assert!(full > tape.value(l1).item());
}

#[test]
fn short_clips_skip_long_steps() {
    let (h, store) = heads(8, 2, 2, 0);
    let c = cfg(8, 2);
    let neg = sample_negatives(3, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cv = uniform(&mut ChaCha8Rng::seed_from_u64(1), &[2, 3], 1.0);
    let got = loss_value(&cv, &cv, &h, &store, &neg, &c);
    let want = reference_loss(&cv, &cv, &h, &store, &neg, &c);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences_on_four_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..10 {
        let (h, store) = heads(2, 3, 3, seed);
        let c = cfg(2, 3);
        let neg = sample_negatives(4, &c, &mut rng).unwrap();
        let inputs = [uniform(&mut rng, &[3, 4], 1.0), uniform(&mut rng, &[3, 4], 1.0)];
        let report = gradcheck::check(&inputs, |tape, vars| {
            let b = store.bind(tape);
            contrastive_loss(tape, &b, vars[0], vars[1], &h, &neg, &c)
        })
        .unwrap();
        assert!(report.max() < 1e-4, "seed {seed}: {}", report.max());
    }
}

#[test]
fn total_loss_assembly() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(2.0));
    let g = total_loss(&mut tape, w, Backend::Gumbel, None).unwrap();
    assert_eq!(tape.value(g).item(), 2.0);

    let z = tape.param(Tensor::vector(vec![0.5, -1.0]));
    let aux = kmeans_aux_loss(&mut tape, z, z, 0.25).unwrap();
    let k = total_loss(&mut tape, w, Backend::Kmeans, Some(&aux)).unwrap();
    assert_eq!(tape.value(k).item(), 2.0);

    let z = tape.param(Tensor::vector(vec![1.0]));
    let q = tape.param(Tensor::vector(vec![0.0]));
    let aux = kmeans_aux_loss(&mut tape, z, q, 0.25).unwrap();
    let k = total_loss(&mut tape, w, Backend::Kmeans, Some(&aux)).unwrap();
    assert!((tape.value(k).item() - 3.25).abs() < 1e-15);

    assert!(total_loss(&mut tape, w, Backend::Kmeans, None).is_err());
    assert!(total_loss(&mut tape, w, Backend::Gumbel, Some(&aux)).is_err());
}
