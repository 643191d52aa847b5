use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rep_core::math::{finite_difference_grad, max_relative_error, Graph, OpKind, Tensor, Var};
use rep_core::Result;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn input_shapes(kind: OpKind) -> Vec<Vec<usize>> {
    match kind {
        OpKind::MatMul => vec![vec![3, 4], vec![4, 2]],
        OpKind::Add | OpKind::ElementwiseMul | OpKind::FrobeniusInner => vec![vec![3, 4], vec![3, 4]],
        OpKind::ScalarMul => vec![vec![1], vec![3, 4]],
        OpKind::ConcatSequence => vec![vec![2, 3], vec![1, 3], vec![3, 3]],
        OpKind::LayerNorm | OpKind::Gelu | OpKind::Softmax | OpKind::Sigmoid => vec![vec![3, 5]],
        OpKind::Mean | OpKind::L2Norm => vec![vec![3, 4]],
    }
}

/// `⟨op(inputs), probe⟩`, so every output element carries its own weight.
fn probed<'g>(g: &'g Graph, kind: OpKind, inputs: &[Var<'g>], probe: &Tensor) -> Result<Var<'g>> {
    let out = g.forward_op(kind, inputs)?;
    out.frobenius(g.constant(probe.clone()))
}

fn output_shape(kind: OpKind, inputs: &[Tensor]) -> Vec<usize> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    g.forward_op(kind, &vars).unwrap().shape()
}

fn op_max_error(kind: OpKind, inputs: &[Tensor], probe: &Tensor) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = probed(&g, kind, &vars, probe).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let numeric = finite_difference_grad(
            |x| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if i == j { x.clone() } else { t.clone() }))
                    .collect();
                Ok(probed(&g, kind, &vars, probe)?.item())
            },
            &inputs[i],
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&grads.of(*var), &numeric, FLOOR));
    }
    worst
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in OpKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let inputs: Vec<Tensor> = input_shapes(kind).iter().map(|s| random(s, &mut rng)).collect();
            let probe = random(&output_shape(kind, &inputs), &mut rng);
            worst = worst.max(op_max_error(kind, &inputs, &probe));
        }
        assert!(worst <= 1e-4, "{kind:?}: max relative error {worst:e}");
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 6], &mut rng);
    let probe = random(&[4, 6], &mut rng);
    assert!(op_max_error(OpKind::LayerNorm, &[x], &probe) <= 1e-4);
}

/// Three stacked layers touching every op in the named set.
fn composition<'g>(g: &'g Graph, x: Var<'g>, a: Var<'g>, s: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    let h1 = g
        .forward_op(OpKind::MatMul, &[x, a])?
        .layer_norm()?
        .add(x)?
        .gelu()?;
    let h2 = g
        .forward_op(OpKind::ScalarMul, &[s, h1])?
        .softmax()?
        .mul(h1.sigmoid()?)?;
    let h3 = g.forward_op(OpKind::ConcatSequence, &[h2, x])?;
    let inner = g.forward_op(OpKind::FrobeniusInner, &[h3, g.constant(w.clone())])?;
    inner
        .add(h3.mean()?)?
        .add(g.forward_op(OpKind::L2Norm, &[h3])?)
}

#[test]
fn composition_of_all_ops_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = [random(&[4, 4], &mut rng), random(&[4, 4], &mut rng), random(&[1], &mut rng)];
        let w = random(&[8, 4], &mut rng);
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = composition(&g, vars[0], vars[1], vars[2], &w).unwrap();
        let grads = g.backward(loss).unwrap();
        for i in 0..3 {
            let numeric = finite_difference_grad(
                |t| {
                    let g = Graph::new();
                    let v: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(j, p)| g.constant(if i == j { t.clone() } else { p.clone() }))
                        .collect();
                    Ok(composition(&g, v[0], v[1], v[2], &w)?.item())
                },
                &params[i],
                H,
            )
            .unwrap();
            let err = max_relative_error(&grads.of(vars[i]), &numeric, FLOOR);
            assert!(err <= 1e-4, "seed {seed} param {i}: {err:e}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = [random(&[4, 4], &mut rng), random(&[4, 4], &mut rng), random(&[1], &mut rng)];
    let w = random(&[8, 4], &mut rng);
    let run = || {
        let g = Graph::new();
        let v: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = composition(&g, v[0], v[1], v[2], &w).unwrap();
        let grads = g.backward(loss).unwrap();
        v.iter().map(|x| grads.of(*x)).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bitwise_eq(y));
    }
}

#[test]
fn frobenius_matches_a_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let a = random(&[5, 3], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let mut oracle = 0.0;
        for r in 0..5 {
            for c in 0..3 {
                oracle += a.get(r, c) * b.get(r, c);
            }
        }
        let g = Graph::new();
        let got = g.constant(a).frobenius(g.constant(b)).unwrap().item();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(x in matrix()) {
        let g = Graph::new();
        let s = g.constant(x).softmax().unwrap().value();
        for r in 0..s.rows() {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(
        cols in 1usize..5,
        rows in prop::collection::vec(1usize..4, 1..4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor> = rows.iter().map(|&r| random(&[r, cols], &mut rng)).collect();
        let g = Graph::new();
        let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
        let joined = g.concat_rows(&vars).unwrap();
        let mut start = 0;
        for p in &parts {
            let back = joined.slice_rows(start, p.rows()).unwrap().value();
            prop_assert!(back.bitwise_eq(p));
            start += p.rows();
        }
    }

    #[test]
    fn identity_matmul_is_exact(x in matrix()) {
        let g = Graph::new();
        let i = g.constant(Tensor::identity(x.rows()));
        let out = i.matmul(g.constant(x.clone())).unwrap().value();
        prop_assert!(out.bitwise_eq(&x));
    }

    #[test]
    fn normalizing_gives_unit_norm(x in matrix()) {
        prop_assume!(x.norm() > 1e-6);
        let g = Graph::new();
        let v = g.constant(x);
        let inv = g.constant(Tensor::scalar(1.0 / v.l2_norm().unwrap().item()));
        let unit = inv.scalar_mul(v).unwrap();
        prop_assert!((unit.l2_norm().unwrap().item() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn shape_mismatch_names_the_op_and_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.forward_op(OpKind::MatMul, &[a, b]).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}
