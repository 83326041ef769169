//! Finite-difference checks for every differentiable primitive and layer,
//! plus the small hand-computable forward examples.

use cbpredict::diff::gradcheck::{check_gradients, GradCheckOptions};
use cbpredict::diff::layers::{
    BatchNorm1d, Conv1d, ConvTranspose1d, LayerNorm, Linear, Lstm, MultiHeadSelfAttention,
    PatchEmbed, PositionalEncoding, TransformerBlock,
};
use cbpredict::diff::{
    ops, DiffError, Mode, ParamBuilder, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Registers `x` as a trainable leaf so its gradient is checked too.
fn input_param(store: &mut ParamStore<f64>, shape: &[usize], seed: u64) -> ParamId {
    store.push_param("input", ParamGroup::Head, rand_tensor(shape, seed))
}

/// Scalarizes an output with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let w = rand_tensor(tape.shape(y), seed ^ 0xabcdef);
    ops::weighted_sum(tape, y, &w)
}

fn assert_check<F>(name: &str, store: &mut ParamStore<f64>, f: F, mode: Mode)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, DiffError>,
{
    let opts = GradCheckOptions {
        mode,
        max_coords_per_param: 12,
        ..Default::default()
    };
    let r = check_gradients(store, f, &opts).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.passed(TOL),
        "{name}: max rel err {:.3e} at {}",
        r.max_rel_err,
        r.worst
    );
}

#[test]
fn elementwise_and_shape_ops() {
    let mut s = ParamStore::new();
    let a = input_param(&mut s, &[2, 3, 4], 1);
    let b = s.push_param("b", ParamGroup::Head, rand_tensor(&[2, 3, 4], 2));
    let p = s.push_param("p", ParamGroup::Head, rand_tensor(&[3, 4], 3));
    assert_check(
        "add/mul/broadcast/activations/permute/reshape",
        &mut s,
        |t, s| {
            let a = t.param(s, a);
            let b = t.param(s, b);
            let p = t.param(s, p);
            let x = ops::add(t, a, b)?;
            let x = ops::mul(t, x, a)?;
            let x = ops::add_broadcast(t, x, p)?;
            let y1 = ops::sigmoid(t, x)?;
            let y2 = ops::tanh(t, x)?;
            let y3 = ops::relu(t, x)?;
            let y = ops::concat(t, &[y1, y2, y3], 2)?;
            let y = ops::permute(t, y, &[2, 0, 1])?;
            let y = ops::reshape(t, y, &[12, 6])?;
            let y = ops::scale(t, y, 0.7)?;
            let y = ops::slice(t, y, 0, 2, 7)?;
            project(t, y, 4)
        },
        Mode::Train,
    );
}

#[test]
fn linear_and_bmm() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[2, 5, 3], 5);
    let (lin, other) = {
        let mut pb = ParamBuilder::new(&mut s, 6);
        let lin = Linear::new(&mut pb, "lin", 3, 4);
        let other = pb.param("o", &[2, 6, 4], cbpredict::diff::Init::Normal { std: 1.0 });
        (lin, other)
    };
    assert_check(
        "linear+bmm",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = lin.forward(t, s, x)?;
            let o = t.param(s, other);
            let z = ops::bmm(t, y, o, true)?;
            let z2 = ops::bmm(t, z, o, false)?;
            project(t, z2, 7)
        },
        Mode::Train,
    );
}

#[test]
fn softmax_and_cross_entropy() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[4, 3], 8);
    assert_check(
        "softmax",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = ops::softmax(t, x)?;
            project(t, y, 9)
        },
        Mode::Train,
    );
    assert_check(
        "cross_entropy",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            ops::softmax_cross_entropy(t, x, &[0, 2, 1, 2])
        },
        Mode::Train,
    );
    let target = rand_tensor(&[4, 3], 10);
    assert_check(
        "mse",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            ops::mse(t, x, &target)
        },
        Mode::Train,
    );
}

#[test]
fn conv_family() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[2, 11, 3], 11);
    let (c1, c2, ct) = {
        let mut pb = ParamBuilder::new(&mut s, 12);
        (
            Conv1d::new(&mut pb, "c1", 3, 4, 5, 2, 2),
            Conv1d::new(&mut pb, "c2", 4, 2, 3, 1, 1),
            ConvTranspose1d::new(&mut pb, "ct", 2, 3, 3, 2),
        )
    };
    assert_check(
        "conv1d/conv_transpose1d",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = c1.forward(t, s, x)?;
            let y = c2.forward(t, s, y)?;
            let y = ct.forward(t, s, y)?;
            project(t, y, 13)
        },
        Mode::Train,
    );
}

#[test]
fn pooling_and_gathers() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[2, 9, 3], 14);
    assert_check(
        "max_pool/mean_time/index_time/repeat_batch",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let p = ops::max_pool1d(t, x, 2, 2)?;
            let g = ops::index_time(t, p, &[0, 0, 1, 3, 3])?;
            let m = ops::mean_time(t, g)?;
            let r = ops::repeat_batch(t, m, 3)?;
            project(t, r, 15)
        },
        Mode::Train,
    );
}

#[test]
fn normalization_layers() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[3, 4, 5], 16);
    let (bn, ln) = {
        let mut pb = ParamBuilder::new(&mut s, 17);
        (
            BatchNorm1d::new(&mut pb, "bn", 5),
            LayerNorm::new(&mut pb, "ln", 5),
        )
    };
    // perturb affine params away from the identity init
    for p in s.params_mut() {
        if p.name != "input" {
            p.value = rand_tensor(p.value.shape(), 18).map(|v| 1.0 + 0.5 * v);
        }
    }
    assert_check(
        "batchnorm(train)+layernorm",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = bn.forward(t, s, x)?;
            let y = ln.forward(t, s, y)?;
            project(t, y, 19)
        },
        Mode::Train,
    );
    assert_check(
        "batchnorm(infer)",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = bn.forward(t, s, x)?;
            project(t, y, 20)
        },
        Mode::Infer,
    );
}

#[test]
fn lstm_layer() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[2, 4, 3], 21);
    let l = {
        let mut pb = ParamBuilder::new(&mut s, 22);
        Lstm::new(&mut pb, "lstm", 3, 5)
    };
    assert_check(
        "lstm",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let o = l.forward(t, s, x)?;
            let a = project(t, o.sequence, 23)?;
            let b = project(t, o.last, 24)?;
            ops::add(t, a, b)
        },
        Mode::Train,
    );
}

#[test]
fn attention_patch_positional_transformer() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[2, 6, 2], 25);
    let (pe, pos, attn, block) = {
        let mut pb = ParamBuilder::new(&mut s, 26);
        (
            PatchEmbed::new(&mut pb, "patch", 2, 2, 8),
            PositionalEncoding::new(&mut pb, "pos", 4, 8),
            MultiHeadSelfAttention::new(&mut pb, "attn", 8, 2),
            TransformerBlock::new(&mut pb, "block", 8, 2, 12, 0.0),
        )
    };
    for p in s.params_mut() {
        if p.name.starts_with("pos") {
            p.value = rand_tensor(p.value.shape(), 27);
        }
    }
    assert_check(
        "patch/pos/mhsa/transformer",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = pe.forward(t, s, x)?;
            let y = pos.forward(t, s, y)?;
            let a = attn.forward(t, s, y)?;
            let (z, _) = block.forward(t, s, a.out)?;
            project(t, z, 28)
        },
        Mode::Train,
    );
}

#[test]
fn dropout_is_deterministic_given_tape_seed() {
    let mut s = ParamStore::new();
    let x = input_param(&mut s, &[4, 6], 29);
    assert_check(
        "dropout",
        &mut s,
        |t, s| {
            let x = t.param(s, x);
            let y = ops::dropout(t, x, 0.3)?;
            project(t, y, 30)
        },
        Mode::Train,
    );
    let mut t = Tape::new(Mode::Infer, 0);
    let v = t.param(&s, x);
    let y = ops::dropout(&mut t, v, 0.5).unwrap();
    assert_eq!(t.value(y), &s.param(x).value);
}

#[test]
fn identity_linear_and_conv_examples() {
    let mut s = ParamStore::<f64>::new();
    let (lin, conv) = {
        let mut pb = ParamBuilder::new(&mut s, 0);
        (
            Linear::new(&mut pb, "l", 2, 2),
            Conv1d::new(&mut pb, "c", 1, 1, 3, 1, 1),
        )
    };
    s.param_mut(lin.w).value = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    s.param_mut(lin.b).value = Tensor::zeros(&[2]);
    s.param_mut(conv.w).value = Tensor::new(&[3, 1], vec![0.0, 1.0, 0.0]);
    let mut t = Tape::new(Mode::Infer, 0);
    let x = t.constant(Tensor::new(&[1, 2], vec![0.3, -1.7]));
    let y = lin.forward(&mut t, &s, x).unwrap();
    assert_eq!(t.value(y).data(), &[0.3, -1.7]);
    let seq = vec![0.5, -2.0, 3.25, 7.0, 0.0];
    let x = t.constant(Tensor::new(&[1, 5, 1], seq.clone()));
    let y = conv.forward(&mut t, &s, x).unwrap();
    assert_eq!(t.value(y).data(), seq.as_slice());
    let x = t.constant(Tensor::new(&[1, 4, 1], vec![1.0, 3.0, 2.0, 5.0]));
    let y = ops::max_pool1d(&mut t, x, 2, 2).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn scalar_product_gradient_and_consumed_tape() {
    let mut s = ParamStore::<f64>::new();
    let w = s.push_param("w", ParamGroup::Head, Tensor::new(&[1], vec![0.4]));
    let mut t = Tape::new(Mode::Train, 0);
    let wv = t.param(&s, w);
    let x = t.constant(Tensor::new(&[1], vec![3.0]));
    let y = ops::mul(&mut t, wv, x).unwrap();
    t.backward_scalar(y, &mut s).unwrap();
    assert_eq!(s.param(w).grad.data(), &[3.0]);
    assert_eq!(
        t.backward_scalar(y, &mut s).err(),
        Some(DiffError::TapeConsumed)
    );
}

#[test]
fn cross_entropy_reference_values() {
    let mut t = Tape::<f64>::new(Mode::Infer, 0);
    let x = t.constant(Tensor::zeros(&[3, 2]));
    let l = ops::softmax_cross_entropy(&mut t, x, &[0, 1, 1]).unwrap();
    assert!((t.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let x = t.constant(Tensor::new(&[1, 2], vec![800.0, -800.0]));
    let l = ops::softmax_cross_entropy(&mut t, x, &[0]).unwrap();
    assert!(t.value(l).data()[0].abs() < 1e-12);
    assert_eq!(
        ops::softmax_cross_entropy(&mut t, x, &[2]).err(),
        Some(DiffError::LabelOutOfRange {
            label: 2,
            classes: 2
        })
    );
}

#[test]
fn attention_rows_and_softmax_rows_sum_to_one() {
    let mut s = ParamStore::<f64>::new();
    let attn = {
        let mut pb = ParamBuilder::new(&mut s, 3);
        MultiHeadSelfAttention::new(&mut pb, "a", 8, 4)
    };
    let mut t = Tape::new(Mode::Infer, 0);
    let x = t.constant(rand_tensor(&[3, 7, 8], 31).map(|v| 4.0 * v));
    let o = attn.forward(&mut t, &s, x).unwrap();
    for row in t.value(o.weights).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_infer_ignores_batch_composition() {
    let mut s = ParamStore::<f64>::new();
    let bn = {
        let mut pb = ParamBuilder::new(&mut s, 3);
        BatchNorm1d::new(&mut pb, "bn", 2)
    };
    // give the running stats non-trivial values through a training pass
    let mut t = Tape::new(Mode::Train, 0);
    let x = t.constant(rand_tensor(&[4, 5, 2], 32));
    bn.forward(&mut t, &s, x).unwrap();
    t.commit_buffers(&mut s);
    let a = rand_tensor(&[1, 5, 2], 33);
    let b = rand_tensor(&[1, 5, 2], 34);
    let mut both = a.data().to_vec();
    both.extend_from_slice(b.data());
    let mut t = Tape::new(Mode::Infer, 0);
    let xa = t.constant(a);
    let ya = bn.forward(&mut t, &s, xa).unwrap();
    let xab = t.constant(Tensor::new(&[2, 5, 2], both));
    let yab = bn.forward(&mut t, &s, xab).unwrap();
    assert_eq!(t.value(ya).data(), &t.value(yab).data()[..10]);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut s = ParamStore::<f64>::new();
    let lin = {
        let mut pb = ParamBuilder::new(&mut s, 0);
        Linear::new(&mut pb, "l", 3, 2)
    };
    let mut t = Tape::new(Mode::Infer, 0);
    let x = t.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        lin.forward(&mut t, &s, x),
        Err(DiffError::ShapeMismatch { .. })
    ));
    let pe = {
        let mut pb = ParamBuilder::new(&mut s, 0);
        PatchEmbed::new(&mut pb, "p", 4, 1, 2)
    };
    let x = t.constant(Tensor::zeros(&[1, 10, 1]));
    assert_eq!(
        pe.forward(&mut t, &s, x).err(),
        Some(DiffError::PatchLengthIndivisible { len: 10, patch: 4 })
    );
}
