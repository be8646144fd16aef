use std::sync::Arc;

use proptest::prelude::*;
use ptrm_core::inference::*;
use ptrm_core::model::{ModelConfig, QHeadKind, Trm};
use ptrm_core::puzzle::{build_dataset, DatasetSpec, PuzzleInstance, TypeCounts};
use ptrm_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(q_head: QHeadKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        seq_len: 16,
        hidden: 16,
        n_latent: 2,
        t_recursions: 2,
        n_sup: 3,
        expansion: 2,
        q_head,
    }
}

fn puzzles(n: usize) -> Vec<PuzzleInstance> {
    let spec = DatasetSpec {
        seed: 11,
        augmentation: 1,
        sudoku4: TypeCounts {
            count: n,
            val: n,
            golden: 0,
        },
        ..DatasetSpec::default()
    };
    build_dataset(&spec).unwrap().val
}

fn cfg(k: usize, sigma: f64, seed: u64) -> InferenceConfig {
    InferenceConfig {
        k,
        sigma,
        depth: 4,
        selector: Selector::BestQ,
        seed,
        langevin: None,
    }
}

fn bits(p: &Prediction) -> (Vec<u32>, u64) {
    (p.tokens.clone(), p.q.to_bits())
}

#[test]
fn zero_sigma_reduces_to_the_deterministic_pass() {
    let model = Trm::<f32>::init(config(QHeadKind::AttentionPooled), 3).unwrap();
    for p in puzzles(12) {
        let det = deterministic_infer(&model, &p.x, 4).unwrap();
        for k in [1, 4] {
            for seed in 0..3 {
                let out = ptrm_infer(&model, &p.x, &cfg(k, 0.0, seed), None).unwrap();
                assert_eq!(out.rollouts.len(), k);
                for r in &out.rollouts {
                    assert_eq!(bits(r), bits(&det[0]));
                }
                assert_eq!(out.selected, 0);
            }
        }
    }
}

#[test]
fn rollouts_depend_only_on_seed_and_index() {
    let model = Trm::<f32>::init(config(QHeadKind::LinearToken0), 3).unwrap();
    let p = &puzzles(1)[0];
    let a = ptrm_infer(&model, &p.x, &cfg(4, 0.3, 7), None).unwrap();
    let b = ptrm_infer(&model, &p.x, &cfg(9, 0.3, 7), None).unwrap();
    for (x, y) in a.rollouts.iter().zip(&b.rollouts) {
        assert_eq!(bits(x), bits(y));
    }
    let single = ptrm_infer(&model, &p.x, &cfg(1, 0.3, 7), None).unwrap();
    assert_eq!(bits(&single.rollouts[0]), bits(&a.rollouts[0]));
    let other = ptrm_infer(&model, &p.x, &cfg(4, 0.3, 8), None).unwrap();
    assert_ne!(other.rollouts[0].q.to_bits(), a.rollouts[0].q.to_bits());
}

#[test]
fn zero_sigma_noise_draws_nothing() {
    let z = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(inject_noise(&z, 0.0, &mut rng), z);
    assert_eq!(
        rng.random::<u64>(),
        ChaCha8Rng::seed_from_u64(1).random::<u64>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn injected_noise_matches_its_stream(sigma in 0.01f64..2.0, seed in any::<u64>()) {
        let z = Tensor::<f64>::new(vec![3, 2], vec![0.5; 6]).unwrap();
        let out = inject_noise(&z, sigma, &mut noise_rng(seed, 2, 1));
        let mut rng = noise_rng(seed, 2, 1);
        for &v in out.data() {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            prop_assert!((v - (0.5 + sigma * e)).abs() < 1e-12);
        }
    }
}

#[test]
fn trace_ends_at_the_returned_prediction() {
    let model = Trm::<f32>::init(config(QHeadKind::AttentionPooled), 5).unwrap();
    let p = &puzzles(1)[0];
    let (preds, trace) = deterministic_trace(&model, &p.x, 4).unwrap();
    assert_eq!(trace.len(), 4);
    assert_eq!(
        trace.iter().map(|s| s.step).collect::<Vec<_>>(),
        vec![1, 2, 3, 4]
    );
    assert_eq!(trace[3].tokens, preds[0].tokens);
    assert_eq!(trace[3].q[0].to_bits(), preds[0].q.to_bits());

    let c = cfg(3, 0.2, 1);
    let (rollouts, trace) = ptrm_trace(&model, &p.x, &c).unwrap();
    let plain = ptrm_infer(&model, &p.x, &c, None).unwrap();
    assert_eq!(rollouts, plain.rollouts);
    assert_eq!(trace[3].z.rows(), 3 * 16);
}

#[test]
fn evaluate_agrees_with_single_puzzle_inference() {
    let model = Trm::<f32>::init(config(QHeadKind::LinearToken0), 5).unwrap();
    let ps = puzzles(40);
    let summary = evaluate(&model, &ps, 3, 0).unwrap();
    for (p, pred) in ps.iter().zip(&summary.predictions) {
        let single = deterministic_infer(&model, &p.x, 3).unwrap();
        assert_eq!(bits(&single[0]), bits(pred));
    }
    assert_eq!(summary.count, 40);
}

#[test]
fn rollout_matrix_is_independent_of_thread_count() {
    let model = Trm::<f32>::init(config(QHeadKind::LinearToken0), 5).unwrap();
    let ps = puzzles(10);
    let c = cfg(5, 0.5, 3);
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| rollout_matrix(&model, &ps, &c, 0).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn zero_sigma_never_escapes() {
    let model = Trm::<f32>::init(config(QHeadKind::LinearToken0), 5).unwrap();
    let ps = puzzles(10);
    let report = basin_escape_experiment(&model, &ps, &cfg(6, 0.0, 1), 0).unwrap();
    assert_eq!(report.evaluated, 10);
    assert!(report.failed.iter().all(|r| r.escape_fraction == 0.0));
    assert_eq!(report.escaped_share, 0.0);
}

#[test]
fn selectors() {
    let r = |t: u32, q: f64| Prediction {
        tokens: vec![t, 1],
        q,
    };
    let rollouts = vec![r(2, 0.1), r(3, 0.9), r(2, 0.5), r(4, 0.9)];
    assert_eq!(select(&rollouts, Selector::BestQ, None).unwrap(), 1);
    assert_eq!(select(&rollouts, Selector::Mode, None).unwrap(), 0);
    assert_eq!(
        select(&rollouts, Selector::Oracle, Some((&[4, 1], 0))).unwrap(),
        3
    );
    assert_eq!(
        select(&rollouts, Selector::Oracle, Some((&[5, 1], 0))).unwrap(),
        1
    );
    assert!(matches!(
        select(&rollouts, Selector::Oracle, None),
        Err(ptrm_core::error::Error::Contract(_))
    ));
    assert!(select(&[], Selector::BestQ, None).is_err());
}

#[test]
fn bad_inference_inputs() {
    let model = Trm::<f32>::init(config(QHeadKind::LinearToken0), 5).unwrap();
    let x = vec![1u32; 16];
    assert!(ptrm_infer(&model, &x, &cfg(0, 0.1, 0), None)
        .unwrap_err()
        .is_config());
    assert!(ptrm_infer(&model, &x, &cfg(2, -0.1, 0), None)
        .unwrap_err()
        .is_config());
    assert!(ptrm_infer(&model, &x[..15], &cfg(2, 0.1, 0), None).is_err());
    assert!(deterministic_infer(&model, &x, 0).unwrap_err().is_config());
}

fn energy(model: &Trm<f64>, y: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    g.set_grad_enabled(false);
    let bp = model.bind(&mut g);
    let yv = g.constant(Arc::new(y.clone()));
    let q = model.q_logit(&mut g, &bp, yv).unwrap();
    g.value(q).data().iter().map(|&q| (-q).exp().ln_1p()).sum()
}

fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect(),
    )
    .unwrap()
}

#[test]
fn langevin_paths_match_manual_updates() {
    let mut c = config(QHeadKind::AttentionPooled);
    c.seq_len = 4;
    c.hidden = 8;
    let model = Trm::<f64>::init(c, 2).unwrap();
    let y0 = gaussian(&[8, 8], 1);
    let xi = |s: usize| Ok(gaussian(&[8, 8], 100 + s as u64));
    let eta = 0.01;
    let plain = LangevinConfig {
        steps: 1,
        eta,
        gradient: false,
    };
    let grad = LangevinConfig {
        steps: 1,
        eta,
        gradient: true,
    };

    // Noise-only: exactly y + sqrt(2 eta) xi.
    let out = langevin_refine(&model, &y0, &plain, xi).unwrap();
    let c = (2.0 * eta).sqrt();
    let manual: Vec<f64> = y0
        .data()
        .iter()
        .zip(xi(0).unwrap().data())
        .map(|(&v, &n)| v + c * n)
        .collect();
    assert_eq!(out.data(), manual.as_slice());

    // Gradient path differs from it by -eta * dE/dy; check against central differences.
    let with_grad = langevin_refine(&model, &y0, &grad, xi).unwrap();
    let h = 1e-6;
    for i in (0..64).step_by(5) {
        let mut up = y0.clone();
        up.data_mut()[i] += h;
        let mut dn = y0.clone();
        dn.data_mut()[i] -= h;
        let fd = (energy(&model, &up) - energy(&model, &dn)) / (2.0 * h);
        let g = (out.data()[i] - with_grad.data()[i]) / eta;
        assert!(
            (g - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
            "element {i}: {g} vs {fd}"
        );
    }
}

#[test]
fn zero_step_size_leaves_y_alone() {
    let mut c = config(QHeadKind::AttentionPooled);
    c.seq_len = 4;
    c.hidden = 8;
    let model = Trm::<f64>::init(c, 2).unwrap();
    let y0 = gaussian(&[8, 8], 1);
    let lc = LangevinConfig {
        steps: 3,
        eta: 0.0,
        gradient: true,
    };
    assert_eq!(
        langevin_refine(&model, &y0, &lc, |s| Ok(gaussian(&[8, 8], s as u64))).unwrap(),
        y0
    );
    let mut ic = cfg(1, 0.0, 0);
    ic.langevin = Some(LangevinConfig {
        steps: 1,
        eta: -0.1,
        gradient: true,
    });
    assert!(ptrm_infer(
        &Trm::<f32>::init(config(QHeadKind::AttentionPooled), 2).unwrap(),
        &[1; 16],
        &ic,
        None
    )
    .unwrap_err()
    .is_config());
}

#[test]
fn langevin_needs_the_pooled_head() {
    let model = Trm::<f64>::init(config(QHeadKind::LinearToken0), 2).unwrap();
    let y = Tensor::zeros(vec![16, 16]);
    let lc = LangevinConfig {
        steps: 1,
        eta: 0.1,
        gradient: true,
    };
    let err = langevin_refine(&model, &y, &lc, |_| Ok(Tensor::zeros(vec![16, 16]))).unwrap_err();
    assert!(err.is_config());
}

#[test]
fn langevin_inference_is_reproducible() {
    let model = Trm::<f32>::init(config(QHeadKind::AttentionPooled), 2).unwrap();
    let p = &puzzles(1)[0];
    let mut c = cfg(3, 0.1, 4);
    c.langevin = Some(LangevinConfig {
        steps: 2,
        eta: 0.05,
        gradient: true,
    });
    let a = ptrm_infer(&model, &p.x, &c, None).unwrap();
    let b = ptrm_infer(&model, &p.x, &c, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn injected_noise_has_the_requested_spread() {
    let z = Tensor::<f64>::zeros(vec![1000, 1000]);
    let out = inject_noise(&z, 0.2, &mut noise_rng(17, 0, 1));
    let n = out.numel() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.2).abs() <= 0.01 * 0.2, "std {std}");
    assert!(mean.abs() < 1e-3);
}

#[test]
fn small_noiseless_langevin_steps_lower_the_energy() {
    let mut c = config(QHeadKind::AttentionPooled);
    c.seq_len = 4;
    c.hidden = 8;
    let model = Trm::<f64>::init(c, 6).unwrap();
    // The drift term only: eta = 1e-4, N = 1, xi = 0.
    let lc = LangevinConfig {
        steps: 1,
        eta: 1e-4,
        gradient: true,
    };
    let trials = 200;
    let mut lowered = 0;
    for s in 0..trials {
        let y = gaussian(&[8, 8], 1000 + s);
        let out = langevin_refine(&model, &y, &lc, |_| Ok(Tensor::zeros(vec![8, 8]))).unwrap();
        lowered += usize::from(energy(&model, &out) <= energy(&model, &y));
    }
    assert!(lowered as f64 >= 0.95 * trials as f64, "{lowered}/{trials}");
}
