use std::time::Instant;

use cbpredict::diff::layers::{Conv1d, Linear};
use cbpredict::diff::{ops, Mode, ParamBuilder, ParamStore, Tape, Tensor};
use cbpredict::interpret::*;
use cbpredict::models::{
    AccelArch, FusionHead, FusionKind, Head, Modality, Model, ModelConfig, ModelKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(b: usize, len: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * len * 5)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::from_f64(&[b, len, 5], &data)
}

/// Conv1D(1->1, k=1) with unit weight, mean over time, then a linear head.
fn toy_cam(x: &[f64], head_w: [f64; 2], bias: f64) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    let mut pb = ParamBuilder::new(&mut store, 0);
    let conv = Conv1d::new(&mut pb, "conv", 1, 1, 1, 1, 0);
    let lin = Linear::new(&mut pb, "head", 1, 2);
    store.param_mut(conv.w).value = Tensor::from_f64(&[1, 1], &[1.0]);
    store.param_mut(conv.b).value = Tensor::from_f64(&[1], &[bias]);
    store.param_mut(lin.w).value = Tensor::from_f64(&[1, 2], &head_w);
    let mut tape = Tape::new(Mode::Infer, 0);
    let xv = tape.constant(Tensor::from_f64(&[1, x.len(), 1], x));
    let a = conv.forward(&mut tape, &store, xv).unwrap();
    let pooled = ops::mean_time(&mut tape, a).unwrap();
    let logits = lin.forward(&mut tape, &store, pooled).unwrap();
    grad_cam_on_tape(&mut tape, &mut store, a, logits, 1, x.len())
        .unwrap()
        .remove(0)
}

#[test]
fn toy_cam_matches_closed_form() {
    let x = [0.5, -1.0, 2.0, 0.0, 1.5, -0.3, 0.8, 1.0];
    // dlogit/dA_t = w/8 for every t, so CAM = ReLU(x) / max ReLU(x)
    let cam = toy_cam(&x, [-0.5, 0.7], 0.0);
    let mx = x.iter().copied().fold(0.0, f64::max);
    for (c, v) in cam.iter().zip(x) {
        assert!((c - v.max(0.0) / mx).abs() < 1e-6, "{cam:?}");
    }
    // a negative head weight flips the sign: CAM = ReLU(-x) / max
    let cam = toy_cam(&x, [0.5, -0.7], 0.0);
    for (c, v) in cam.iter().zip(x) {
        assert!((c - (-v).max(0.0)).abs() < 1e-6, "{cam:?}");
    }
}

#[test]
fn zero_input_gives_zero_cam() {
    let cam = toy_cam(&[0.0; 8], [0.3, 0.9], 0.0);
    assert!(cam.iter().all(|&v| v == 0.0));
}

fn built(kind: ModelKind, arch: AccelArch, seed: u64) -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::<f64>::new();
    let m = Model::build(&ModelConfig::new(kind, arch, 2), &mut store, seed).unwrap();
    (m, store)
}

#[test]
fn cam_is_normalized_and_full_length() {
    let (m, store) = built(
        ModelKind::Fused(FusionKind::ConcatMlp),
        AccelArch::ResNet,
        1,
    );
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 1,
    };
    let maps = grad_cam(&tm, random_input(3, 150, 2), 1).unwrap();
    assert_eq!(maps.len(), 3);
    for c in &maps {
        assert_eq!(c.values.len(), 150);
        assert!(c.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mx = c.values.iter().copied().fold(0.0, f64::max);
        assert!(mx == 1.0 || mx == 0.0);
    }
}

#[test]
fn cam_invariant_to_positive_head_scaling() {
    let (m, mut store) = built(
        ModelKind::Unimodal(Modality::Acc),
        AccelArch::DeepConvLstm,
        3,
    );
    let x = random_input(2, 150, 4);
    let before = grad_cam(
        &TrainedModel {
            model: &m,
            store: &store,
            epochs_trained: 1,
        },
        x.clone(),
        1,
    )
    .unwrap();
    let Head::Linear(l) = &m.head else {
        panic!("unimodal head")
    };
    for id in [l.w, l.b] {
        let p = store.param_mut(id);
        p.value = p.value.map(|v| 2.5 * v);
    }
    let after = grad_cam(
        &TrainedModel {
            model: &m,
            store: &store,
            epochs_trained: 1,
        },
        x,
        1,
    )
    .unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.argmax(), b.argmax());
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn cam_errors() {
    let x = random_input(1, 150, 5);
    let (m, store) = built(
        ModelKind::Unimodal(Modality::Acc),
        AccelArch::Transformer,
        1,
    );
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 3,
    };
    assert!(matches!(
        grad_cam(&tm, x.clone(), 1),
        Err(InterpretError::NoConvLayer)
    ));
    let (m, store) = built(ModelKind::Unimodal(Modality::Eda), AccelArch::ResNet, 1);
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 3,
    };
    assert!(matches!(
        grad_cam(&tm, x.clone(), 1),
        Err(InterpretError::NoConvLayer)
    ));
    let (m, store) = built(ModelKind::Unimodal(Modality::Acc), AccelArch::ResNet, 1);
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 0,
    };
    assert!(matches!(
        grad_cam(&tm, x, 1),
        Err(InterpretError::UntrainedModel)
    ));
}

fn fused(kind: FusionKind, seed: u64) -> (Model, ParamStore<f64>, Baseline) {
    let mut store = ParamStore::<f64>::new();
    let cfg = ModelConfig::miniature(ModelKind::Fused(kind), AccelArch::ResNet, 2, 20);
    let m = Model::build(&cfg, &mut store, seed).unwrap();
    let base = Baseline::fit(&m, &store, [random_input(8, 20, seed + 100)]).unwrap();
    (m, store, base)
}

#[test]
fn shapley_efficiency_on_every_fusion_head() {
    for kind in FusionKind::ALL {
        let (m, store, base) = fused(kind, 7);
        let tm = TrainedModel {
            model: &m,
            store: &store,
            epochs_trained: 1,
        };
        for w in modality_shapley(&tm, random_input(6, 20, 8), &base).unwrap() {
            let s: f64 = w.phi.iter().sum();
            assert!((s - (w.v_full - w.v_empty)).abs() <= 1e-9, "{kind:?}");
        }
    }
}

#[test]
fn zeroed_fusion_inputs_are_dummy_players() {
    let (m, mut store, base) = fused(FusionKind::ConcatMlp, 9);
    let Head::Fusion(FusionHead::ConcatMlp { hidden, .. }) = &m.head else {
        panic!("concat head")
    };
    let w = hidden[0].w;
    let acc_dim = m.acc.as_ref().unwrap().dim();
    let p = store.param_mut(w);
    let out = p.value.shape()[1];
    for r in acc_dim..p.value.shape()[0] {
        for c in 0..out {
            p.value.data_mut()[r * out + c] = 0.0;
        }
    }
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 1,
    };
    for w in modality_shapley(&tm, random_input(5, 20, 10), &base).unwrap() {
        assert_eq!(w.phi[1], 0.0);
        assert_eq!(w.phi[2], 0.0);
    }
}

#[test]
fn untrained_and_mismatched_baselines_are_rejected() {
    let (m, store, base) = fused(FusionKind::ConcatMlp, 1);
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 0,
    };
    assert!(matches!(
        modality_shapley(&tm, random_input(1, 20, 1), &base),
        Err(InterpretError::UntrainedModel)
    ));
    let mut store2 = ParamStore::<f64>::new();
    let cfg = ModelConfig::miniature(ModelKind::Unimodal(Modality::Acc), AccelArch::ResNet, 2, 20);
    let m2 = Model::build(&cfg, &mut store2, 1).unwrap();
    let tm2 = TrainedModel {
        model: &m2,
        store: &store2,
        epochs_trained: 1,
    };
    assert!(matches!(
        modality_shapley(&tm2, random_input(1, 20, 1), &base),
        Err(InterpretError::BaselineMismatch(_))
    ));
}

#[test]
fn summary_shares_sum_to_one() {
    let ws = [
        WindowShapley {
            phi: [0.3, -0.1, 0.0],
            v_full: 0.0,
            v_empty: 0.0,
        },
        WindowShapley {
            phi: [0.1, 0.1, 0.2],
            v_full: 0.0,
            v_empty: 0.0,
        },
    ];
    let a = ModalityAttribution::summarize(&ws).unwrap();
    assert!((a.phi_acc - 0.2).abs() < 1e-15);
    assert!((a.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("shap.csv");
    a.write_csv(&p).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert!(text.starts_with("modality,phi_mean_abs,share\nacc,"));
}

#[test]
fn enumeration_time_per_window() {
    let mut store = ParamStore::<f32>::new();
    let m = Model::build(
        &ModelConfig::new(
            ModelKind::Fused(FusionKind::ConcatMlp),
            AccelArch::ResNet,
            2,
        ),
        &mut store,
        0,
    )
    .unwrap();
    let x = random_input(64, 150, 1).cast::<f32>();
    let base = Baseline::fit(&m, &store, [x.clone()]).unwrap();
    let tm = TrainedModel {
        model: &m,
        store: &store,
        epochs_trained: 1,
    };
    let t0 = Instant::now();
    let ws = modality_shapley(&tm, x, &base).unwrap();
    let per = t0.elapsed().as_secs_f64() / ws.len() as f64;
    println!("shapley: {:.3} ms per window", per * 1e3);
    assert!(per < 1e-3);
}

proptest! {
    #[test]
    fn shapley_axioms_on_random_games(v in proptest::collection::vec(-5.0f64..5.0, 8)) {
        let phi = exact_shapley(3, &v);
        // efficiency
        prop_assert!((phi.iter().sum::<f64>() - (v[7] - v[0])).abs() <= 1e-9);
        // relabeling players 0 and 1 swaps their values (summation order
        // changes, hence the ulp tolerance)
        let swap = |s: usize| (s & 4) | ((s & 1) << 1) | ((s & 2) >> 1);
        let w: Vec<f64> = (0..8).map(|s| v[swap(s)]).collect();
        let psi = exact_shapley(3, &w);
        prop_assert!((psi[0] - phi[1]).abs() <= 1e-12);
        prop_assert!((psi[1] - phi[0]).abs() <= 1e-12);
        prop_assert!((psi[2] - phi[2]).abs() <= 1e-12);
    }

    #[test]
    fn symmetric_and_dummy_players(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // players 0 and 1 interchangeable, player 2 never changes the value
        let v: Vec<f64> = (0..8usize)
            .map(|s| {
                let k = (s & 1) + ((s >> 1) & 1);
                [0.0, a, b][k]
            })
            .collect();
        let phi = exact_shapley(3, &v);
        prop_assert_eq!(phi[0], phi[1]);
        prop_assert_eq!(phi[2], 0.0);
    }
}
