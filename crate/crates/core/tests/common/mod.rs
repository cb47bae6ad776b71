//! Independent oracles shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqw2v::autodiff::gradcheck::{max_relative_error, DEFAULT_FLOOR};
use vqw2v::autodiff::{Tape, Tensor, Var};
use vqw2v::convnet::{AggregatorConfig, EncoderConfig};
use vqw2v::model::{DrawKey, VqConfig, VqModel};
use vqw2v::objective::{contrastive_loss, sample_negatives, LossConfig};
use vqw2v::params::ParamStore;
use vqw2v::quantizer::{gumbel_noise, Backend, QuantizerConfig};
use vqw2v::rng::{substream, Stream};

/// A few-thousand-parameter model with the same topology as the presets.
pub fn tiny_config(backend: Backend) -> VqConfig {
    let mut encoder = EncoderConfig::small().with_channels(4);
    encoder.dropout = 0.0;
    let mut aggregator = AggregatorConfig::small().with_channels(6);
    aggregator.layers.truncate(3);
    aggregator.dropout = 0.0;
    VqConfig {
        encoder,
        aggregator,
        quantizer: QuantizerConfig { backend, ..QuantizerConfig::gumbel(2, 4) },
        loss: LossConfig { steps: 3, negatives: 2, ..LossConfig::default() },
    }
}

pub fn random_wave(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-0.9..0.9)).collect()
}

/// Values captured from the real forward pass that the surrogate holds fixed.
struct Frozen {
    z0: Vec<f64>,
    rows: Vec<Vec<usize>>,
    /// Per group selected codewords, k-means only.
    q0: Vec<Vec<f64>>,
    /// Per group `onehot - p`, Gumbel only.
    hard_minus_soft: Vec<Vec<f64>>,
}

/// Builds the smooth surrogate of the training loss: selections are frozen
/// at their values from `frozen`, each straight-through becomes
/// `value + constant`, so its exact derivative is what the estimator claims.
fn surrogate(
    tape: &mut Tape,
    model: &VqModel,
    store: &ParamStore,
    wave: &[f64],
    tau: f64,
    key: DrawKey,
    frozen: Option<&Frozen>,
) -> (Var, Option<Frozen>) {
    let cfg = model.config();
    let q = model.quantizer();
    let (groups, vars, dg) = (cfg.quantizer.groups, cfg.quantizer.vars, q.group_dim());
    let b = store.bind(tape);
    let mut dropout = substream(key.seed, Stream::Dropout, key.step, key.index);
    let mut gumbel = substream(key.seed, Stream::Gumbel, key.step, key.index);
    let mut negatives = substream(key.seed, Stream::Negatives, key.step, key.index);

    let z = model.encoder().forward(tape, &b, wave, true, &mut dropout).unwrap();
    let (d, t) = tape.value(z).dims2().unwrap();
    let zt = tape.transpose(z).unwrap();
    let z0 = frozen.map_or_else(|| tape.value(zt).data().to_vec(), |f| f.z0.clone());
    let rows_total = if cfg.quantizer.shared_codebook { vars } else { vars * groups };
    let table = tape.reshape(b.var(q.codebook_id()), vec![rows_total, dg]).unwrap();

    let logits = (cfg.quantizer.backend == Backend::Gumbel).then(|| {
        let id = |n: &str| b.var(store.id_of(n).unwrap());
        let input = tape.constant(Tensor::new(vec![t, d], z0.clone()).unwrap());
        let h = tape.linear(input, id("quantizer.logits.0.weight"), id("quantizer.logits.0.bias")).unwrap();
        let h = tape.relu(h);
        tape.linear(h, id("quantizer.logits.1.weight"), id("quantizer.logits.1.bias")).unwrap()
    });

    let mut outs = Vec::new();
    let mut qs = Vec::new();
    let mut captured = Frozen { z0: z0.clone(), rows: Vec::new(), q0: Vec::new(), hard_minus_soft: Vec::new() };
    for g in 0..groups {
        let zg = tape.slice_cols(zt, g * dg, (g + 1) * dg).unwrap();
        let z0g: Vec<f64> = (0..t).flat_map(|ti| z0[ti * d + g * dg..ti * d + (g + 1) * dg].to_vec()).collect();
        let group_rows: Vec<usize> =
            (0..vars).map(|v| if cfg.quantizer.shared_codebook { v } else { v * groups + g }).collect();
        match cfg.quantizer.backend {
            Backend::Kmeans => {
                let sel: Vec<usize> = match frozen {
                    Some(f) => f.rows[g].clone(),
                    None => {
                        let tv = tape.value(table).data().to_vec();
                        (0..t)
                            .map(|ti| {
                                let zrow = &z0g[ti * dg..(ti + 1) * dg];
                                let mut best = (0, f64::INFINITY);
                                for (v, &r) in group_rows.iter().enumerate() {
                                    let dist: f64 = zrow
                                        .iter()
                                        .zip(&tv[r * dg..(r + 1) * dg])
                                        .map(|(a, e)| (a - e) * (a - e))
                                        .sum();
                                    if dist < best.1 {
                                        best = (v, dist);
                                    }
                                }
                                group_rows[best.0]
                            })
                            .collect()
                    }
                };
                let qg = tape.gather_rows(table, &sel).unwrap();
                let q0 = frozen.map_or_else(|| tape.value(qg).data().to_vec(), |f| f.q0[g].clone());
                let offset: Vec<f64> = q0.iter().zip(&z0g).map(|(a, b)| a - b).collect();
                let off = tape.constant(Tensor::new(vec![t, dg], offset).unwrap());
                outs.push(tape.add(zg, off).unwrap());
                qs.push(qg);
                captured.rows.push(sel);
                captured.q0.push(q0);
            }
            Backend::Gumbel => {
                let logits = logits.unwrap();
                let lg = tape.slice_cols(logits, g * vars, (g + 1) * vars).unwrap();
                let noise = tape.constant(Tensor::new(vec![t, vars], gumbel_noise(&mut gumbel, t * vars)).unwrap());
                let noisy = tape.add(lg, noise).unwrap();
                let scaled = tape.scale(noisy, 1.0 / tau);
                let p = tape.softmax(scaled);
                let shift = match frozen {
                    Some(f) => f.hard_minus_soft[g].clone(),
                    None => {
                        let pv = tape.value(p).data();
                        let mut shift = vec![0.0; t * vars];
                        for ti in 0..t {
                            let row = &pv[ti * vars..(ti + 1) * vars];
                            let mut best = 0;
                            for v in 1..vars {
                                if row[v] > row[best] {
                                    best = v;
                                }
                            }
                            for v in 0..vars {
                                shift[ti * vars + v] = if v == best { 1.0 } else { 0.0 } - row[v];
                            }
                        }
                        shift
                    }
                };
                let sc = tape.constant(Tensor::new(vec![t, vars], shift.clone()).unwrap());
                let y = tape.add(p, sc).unwrap();
                let tg =
                    if cfg.quantizer.shared_codebook { table } else { tape.gather_rows(table, &group_rows).unwrap() };
                let qg = tape.matmul(y, tg).unwrap();
                let z0c = tape.constant(Tensor::new(vec![t, dg], z0g).unwrap());
                let ident = tape.sub(zg, z0c).unwrap();
                outs.push(tape.add(qg, ident).unwrap());
                captured.hard_minus_soft.push(shift);
            }
        }
    }
    let zhat_t = tape.concat_cols(&outs).unwrap();
    let zhat = tape.transpose(zhat_t).unwrap();
    let c = model.aggregator().forward(tape, &b, zhat, true, &mut dropout).unwrap();
    let neg = sample_negatives(t, &cfg.loss, &mut negatives).unwrap();
    let mut loss = contrastive_loss(tape, &b, c, zhat, model.heads(), &neg, &cfg.loss).unwrap();
    if cfg.quantizer.backend == Backend::Kmeans {
        // ||z₀ − q||² + γ||z − q₀||², per frame
        let qall = tape.concat_cols(&qs).unwrap();
        let q0all = tape.value(qall).data().to_vec();
        let q0all: Vec<f64> = match frozen {
            Some(f) => {
                (0..t).flat_map(|ti| (0..groups).flat_map(move |g| f.q0[g][ti * dg..(ti + 1) * dg].to_vec())).collect()
            }
            None => q0all,
        };
        let z0c = tape.constant(Tensor::new(vec![t, d], z0).unwrap());
        let q0c = tape.constant(Tensor::new(vec![t, d], q0all).unwrap());
        let d1 = tape.sub(z0c, qall).unwrap();
        let s1 = tape.mul(d1, d1).unwrap();
        let s1 = tape.sum(s1);
        let d2 = tape.sub(zt, q0c).unwrap();
        let s2 = tape.mul(d2, d2).unwrap();
        let s2 = tape.sum(s2);
        let s2 = tape.scale(s2, cfg.quantizer.gamma);
        let aux = tape.add(s1, s2).unwrap();
        let aux = tape.scale(aux, 1.0 / t as f64);
        loss = tape.add(loss, aux).unwrap();
    }
    (loss, frozen.is_none().then_some(captured))
}

/// Tolerated gap between one-sided slopes on a smooth stretch.
const KINK_SLACK: f64 = 1e-3;

pub struct PipelineCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// |surrogate(θ₀) − real loss(θ₀)|.
    pub value_gap: f64,
    pub encoder_grad_norm: f64,
    /// `(parameter, analytic, numeric)` at the largest error.
    pub worst: (String, f64, f64),
    /// Stencils that straddled a ReLU kink and were retried with a smaller step.
    pub kinks: usize,
}

/// Compares tape gradients of the full training loss against central
/// differences of the frozen-selection surrogate on `samples` random
/// parameter scalars plus one scalar from every tensor.
pub fn pipeline_gradcheck(backend: Backend, seed: u64, samples: usize) -> PipelineCheck {
    let cfg = tiny_config(backend);
    let model = VqModel::new(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let wave = random_wave(&mut rng, cfg.encoder.receptive_field() + 160 * 9);
    let key = DrawKey { seed, step: 3, index: 1 };
    let tau = 1.5;

    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let real = model.clip_loss(&mut tape, &b, &wave, tau, key).unwrap();
    let real_value = tape.value(real.loss).item();
    tape.backward(real.loss).unwrap();
    let grads = model.store.collect_grads(&tape, &b);

    let mut t0 = Tape::new();
    let (sv, frozen) = surrogate(&mut t0, &model, &model.store, &wave, tau, key, None);
    let frozen = frozen.unwrap();
    let value_gap = (t0.value(sv).item() - real_value).abs();

    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (i, t) in model.store.tensors().iter().enumerate() {
        picks.push((i, rng.random_range(0..t.numel())));
    }
    let n_tensors = model.store.len();
    for _ in 0..samples {
        let i = rng.random_range(0..n_tensors);
        picks.push((i, rng.random_range(0..model.store.tensors()[i].numel())));
    }

    let h = 1e-5;
    let mut kinks = 0;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut store = model.store.clone();
    for &(i, j) in &picks {
        let orig = store.tensors()[i].data()[j];
        let eval = |v: f64, store: &mut ParamStore| {
            store.tensors_mut()[i].data_mut()[j] = v;
            let mut tp = Tape::new();
            let (l, _) = surrogate(&mut tp, &model, store, &wave, tau, key, Some(&frozen));
            tp.value(l).item()
        };
        let centre = eval(orig, &mut store);
        let mut step = h;
        let mut estimate = 0.0;
        // a ReLU input crossing zero inside the stencil shows up as one-sided
        // slopes that disagree far beyond the O(h) curvature term; shrink
        // until the stencil fits on one side of the kink
        for _ in 0..4 {
            let plus = eval(orig + step, &mut store);
            let minus = eval(orig - step, &mut store);
            let (fwd, bwd) = ((plus - centre) / step, (centre - minus) / step);
            estimate = (plus - minus) / (2.0 * step);
            if (fwd - bwd).abs() <= KINK_SLACK * fwd.abs().max(bwd.abs()).max(1.0) {
                break;
            }
            step /= 10.0;
            kinks += 1;
        }
        store.tensors_mut()[i].data_mut()[j] = orig;
        analytic.push(grads[i][j]);
        numeric.push(estimate);
    }
    let encoder_grad_norm = model
        .store
        .iter()
        .zip(&grads)
        .filter(|((name, _), _)| name.starts_with("encoder."))
        .flat_map(|(_, g)| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    let worst = (0..picks.len())
        .max_by(|&a, &b| {
            let e = |k: usize| {
                (analytic[k] - numeric[k]).abs() / analytic[k].abs().max(numeric[k].abs()).max(DEFAULT_FLOOR)
            };
            e(a).total_cmp(&e(b))
        })
        .map(|k| (model.store.name(model.store.ids().nth(picks[k].0).unwrap()).to_string(), analytic[k], numeric[k]))
        .unwrap();
    PipelineCheck {
        worst,
        max_rel_err: max_relative_error(&analytic, &numeric, DEFAULT_FLOOR),
        checked: picks.len(),
        value_gap,
        encoder_grad_norm,
        kinks,
    }
}

/// Exact expected masked fraction of the span sampler: position `t` stays
/// unmasked iff none of the `min(t+1, M)` starts that would cover it is
/// among the `n` chosen out of `T`.
pub fn expected_mask_fraction(t_len: usize, p: f64, m: usize) -> f64 {
    let n = (p * t_len as f64).round() as usize;
    let log_choose = |a: usize, b: usize| -> f64 {
        if b > a {
            f64::NEG_INFINITY
        } else {
            ln_factorial(a) - ln_factorial(b) - ln_factorial(a - b)
        }
    };
    let total = log_choose(t_len, n);
    (0..t_len)
        .map(|t| {
            let w = (t + 1).min(m);
            1.0 - (log_choose(t_len - w, n) - total).exp()
        })
        .sum::<f64>()
        / t_len as f64
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}
