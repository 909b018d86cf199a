use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::*;
use super::tape::{threshold, Tape, Tensor};
use crate::error::Error;
use crate::phy::{CMatrix, ChannelMatrix, SystemConfig, C64};

struct Problem {
    cfg: SystemConfig,
    ext: FeatureExtractor,
    head: OutputHead,
    channels: Vec<ChannelMatrix>,
    requests: Vec<RateRequest>,
}

fn problem(seed: u64, batch: usize) -> Problem {
    let cfg = SystemConfig {
        n_tx: 4,
        n_users: 2,
        p_tx: 2.0,
        p_rf: 0.5,
        noise_power: 0.1,
    };
    let hyper = ModelHyper {
        embed_dim: 8,
        ffn_dim: 16,
        n_heads: 1,
        n_layers: 1,
        ..ModelHyper::default()
    }
    .with_system(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = FeatureExtractor::new(hyper.clone(), &mut rng).unwrap();
    let head = OutputHead::new(&hyper, &mut rng);
    let channels = (0..batch)
        .map(|_| {
            ChannelMatrix::new(CMatrix::from_fn(2, 4, |_, _| {
                C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }))
            .unwrap()
        })
        .collect();
    let requests = (0..batch)
        .map(|_| RateRequest::new(vec![rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)]).unwrap())
        .collect();
    Problem {
        cfg,
        ext,
        head,
        channels,
        requests,
    }
}

/// Rate-tracking plus normalized energy, evaluated on a fresh tape.
/// Returns the loss value and, if requested, gradients for extractor and head.
fn loss(
    p: &Problem,
    ext: &FeatureExtractor,
    head: &OutputHead,
    anchor: Option<&[f64]>,
    grads: bool,
) -> (f64, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let ep = ext.bind(&mut tape);
    let hp = head.bind(&mut tape);
    let feats = extractor_graph(
        &mut tape,
        &ep,
        ext,
        &p.channels,
        &p.requests,
        Mode::Eval,
        &mut rng,
    )
    .unwrap();
    let out = head_graph(
        &mut tape,
        &hp,
        &ext.hyper,
        feats,
        &p.requests,
        &p.cfg,
        anchor,
    )
    .unwrap();
    let rates = tape.rates(
        out.precoder,
        out.mask,
        out.gamma,
        flatten_channels(&p.channels),
        2,
        p.cfg.noise_power,
    );
    let targets = Tensor::from_vec(
        p.channels.len(),
        2,
        p.requests
            .iter()
            .flat_map(|r| r.targets().to_vec())
            .collect(),
    );
    let err = tape.sub_const(rates, &targets);
    let sq = tape.square(err);
    let l_ar = tape.mean(sq);
    let active = tape.row_sum(out.mask);
    let max_e = p.cfg.max_energy();
    let e = tape.combine(&[
        (out.gamma, p.cfg.p_tx / max_e),
        (active, p.cfg.p_rf / max_e),
    ]);
    let l_ec = tape.mean(e);
    let total = tape.combine(&[(l_ar, 0.9), (l_ec, 0.1)]);
    let value = tape.value(total).data[0];
    if !grads {
        return (value, Vec::new());
    }
    let mut g = tape.backward(total).unwrap();
    let all = ep.iter().chain(&hp).map(|&v| g.take(v)).collect();
    (value, all)
}

fn anchor_for(p: &Problem) -> Vec<f64> {
    let outs = forward_batch(
        &p.ext,
        &p.head,
        &p.channels,
        &p.requests,
        &p.cfg,
        Mode::Eval,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    outs.iter()
        .flat_map(|o| {
            o.pre_threshold[..4]
                .iter()
                .map(|&s| threshold(s) - s)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn every_parameter_matches_finite_differences() {
    let p = problem(21, 3);
    let anchor = anchor_for(&p);
    // The anchored loss agrees with the thresholded one at the base point.
    let (hard, _) = loss(&p, &p.ext, &p.head, None, false);
    let (base, grads) = loss(&p, &p.ext, &p.head, Some(&anchor), true);
    assert!((hard - base).abs() < 1e-12);

    let step = 1e-5;
    let n_ext = p.ext.tensors().len();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut ext = p.ext.clone();
                let mut head = p.head.clone();
                if t < n_ext {
                    ext.tensors_mut()[t].data[i] += delta;
                } else {
                    head.tensors_mut()[t - n_ext].data[i] += delta;
                }
                loss(&p, &ext, &head, Some(&anchor), false).0
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let a = g.data[i];
            let err = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            assert!(
                err <= 1e-4 * scale + 1e-8,
                "tensor {t} entry {i}: analytic {a} vs numeric {fd}"
            );
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
            checked += 1;
        }
    }
    assert_eq!(checked, p.ext.n_params() + p.head.n_params());
    assert!(worst < 1e-4);
}

#[test]
fn stop_gradient_target_gives_zero_gradients() {
    let p = problem(22, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let ep = p.ext.bind(&mut tape);
    let hp = p.head.bind(&mut tape);
    let feats = extractor_graph(
        &mut tape,
        &ep,
        &p.ext,
        &p.channels,
        &p.requests,
        Mode::Train,
        &mut rng,
    )
    .unwrap();
    let out = head_graph(
        &mut tape,
        &hp,
        &p.ext.hyper,
        feats,
        &p.requests,
        &p.cfg,
        None,
    )
    .unwrap();
    let rates = tape.rates(
        out.precoder,
        out.mask,
        out.gamma,
        flatten_channels(&p.channels),
        2,
        p.cfg.noise_power,
    );
    let detached = tape.value(rates).clone();
    let err = tape.sub_const(rates, &detached);
    let sq = tape.square(err);
    let l = tape.mean(sq);
    assert_eq!(tape.value(l).data[0], 0.0);
    let mut g = tape.backward(l).unwrap();
    for v in ep.iter().chain(&hp) {
        assert!(g.take(*v).data.iter().all(|&x| x == 0.0));
    }
}

fn sum_rate_grads(p: &Problem, range: std::ops::Range<usize>) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let ep = p.ext.bind(&mut tape);
    let hp = p.head.bind(&mut tape);
    let hs = &p.channels[range.clone()];
    let rs = &p.requests[range];
    let feats = extractor_graph(&mut tape, &ep, &p.ext, hs, rs, Mode::Eval, &mut rng).unwrap();
    let out = head_graph(&mut tape, &hp, &p.ext.hyper, feats, rs, &p.cfg, None).unwrap();
    let rates = tape.rates(
        out.precoder,
        out.mask,
        out.gamma,
        flatten_channels(hs),
        2,
        p.cfg.noise_power,
    );
    let n = tape.value(rates).len() as f64;
    let m = tape.mean(rates);
    let total = tape.scale(m, n);
    let mut g = tape.backward(total).unwrap();
    ep.iter().chain(&hp).map(|&v| g.take(v)).collect()
}

#[test]
fn batch_gradient_is_sum_of_sample_gradients() {
    let p = problem(23, 4);
    let whole = sum_rate_grads(&p, 0..4);
    let mut parts: Vec<Tensor> = whole
        .iter()
        .map(|t| Tensor::zeros(t.rows, t.cols))
        .collect();
    for k in 0..4 {
        for (acc, g) in parts.iter_mut().zip(sum_rate_grads(&p, k..k + 1)) {
            acc.add_assign(&g);
        }
    }
    for (a, b) in whole.iter().zip(&parts) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn consumed_graph_rejects_second_backward() {
    let p = problem(24, 1);
    let mut tape = Tape::new();
    let ep = p.ext.bind(&mut tape);
    let feats = extractor_graph(
        &mut tape,
        &ep,
        &p.ext,
        &p.channels,
        &p.requests,
        Mode::Eval,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let l = tape.mean(feats);
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::GraphConsumed)));
}
