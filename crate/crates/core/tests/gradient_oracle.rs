mod common;

use common::central_difference;
use hypsel_core::acoustic_model::{init_model, weighted_ce_gradient, ArchConfig, FrameGradientRequest};
use hypsel_core::corpus::Frames;
use hypsel_core::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    model: Model,
    utterances: Vec<(Frames, Vec<usize>, Vec<usize>)>,
    weights: Vec<(f64, f64)>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig {
        feature_dim: rng.random_range(1..=3),
        splice: rng.random_range(0..=1),
        hidden_layers: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=5)).collect(),
        num_states: rng.random_range(2..=5),
    };
    let model = init_model::<f64>(&arch, seed).unwrap();
    let utterances = (0..rng.random_range(1..=3))
        .map(|_| {
            let t = rng.random_range(1..=4);
            let data = (0..t * arch.feature_dim).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let labels = |rng: &mut ChaCha8Rng| (0..t).map(|_| rng.random_range(0..arch.num_states)).collect::<Vec<_>>();
            (Frames::new(arch.feature_dim, data).unwrap(), labels(&mut rng), labels(&mut rng))
        })
        .collect::<Vec<_>>();
    let weights = utterances
        .iter()
        .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Instance { model, utterances, weights }
}

/// The weighted log-likelihood objective, evaluated from log posteriors.
fn objective(model: &Model, inst: &Instance) -> f64 {
    inst.utterances
        .iter()
        .zip(&inst.weights)
        .map(|((frames, a, b), (wa, wb))| {
            let logp = model.log_posteriors(frames).unwrap();
            let sum = |labels: &[usize]| labels.iter().enumerate().map(|(t, &s)| logp.get(t, s)).sum::<f64>();
            wa * sum(a) + wb * sum(b)
        })
        .sum()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn weighted_gradient_matches_central_differences() {
    for seed in 0..25 {
        let inst = instance(seed);
        let requests: Vec<FrameGradientRequest<f64>> = inst
            .utterances
            .iter()
            .zip(&inst.weights)
            .flat_map(|((frames, a, b), (wa, wb))| {
                [
                    FrameGradientRequest { utterance_id: "u", frames, labels: a, weight: *wa },
                    FrameGradientRequest { utterance_id: "u", frames, labels: b, weight: *wb },
                ]
            })
            .collect();
        let analytic = weighted_ce_gradient(&inst.model, &requests).unwrap().to_flat();
        let theta = inst.model.parameters();
        let mut f = |x: &[f64]| {
            let mut m = inst.model.clone();
            for (i, v) in x.iter().enumerate() {
                *m.parameter_mut(i).unwrap() = *v;
            }
            objective(&m, &inst)
        };
        let numeric: Vec<f64> = (0..theta.len()).map(|i| central_difference(&mut f, &theta, i, 1e-5)).collect();
        let err = relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn zero_weights_give_zero_gradient() {
    let inst = instance(3);
    let (frames, a, _) = &inst.utterances[0];
    let req = [FrameGradientRequest { utterance_id: "u", frames, labels: a, weight: 0.0 }];
    let g = weighted_ce_gradient(&inst.model, &req).unwrap();
    assert!(g.values().all(|v| *v == 0.0));
}

#[test]
fn gradient_is_linear_in_weights() {
    let inst = instance(5);
    let (frames, a, _) = &inst.utterances[0];
    let one = weighted_ce_gradient(&inst.model, &[FrameGradientRequest { utterance_id: "u", frames, labels: a, weight: 1.0 }])
        .unwrap()
        .to_flat();
    let neg = weighted_ce_gradient(&inst.model, &[FrameGradientRequest { utterance_id: "u", frames, labels: a, weight: -0.5 }])
        .unwrap()
        .to_flat();
    for (x, y) in one.iter().zip(&neg) {
        assert!((x * -0.5 - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}
