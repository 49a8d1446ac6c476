//! Gradient checks and worked examples for the autodiff tape.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stts::tensor::{Activation, Graph, Reduction, Tensor, Var};
use stts::Error;

const STEP: f32 = 1e-3;
const REL_TOL: f64 = 1e-3;
const CASES: u64 = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar probe `Σ w ⊙ f(inputs)` accumulated in f64.
fn probe<F>(f: &F, inputs: &[Tensor], weights: &Tensor) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> stts::Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out)
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

/// Central finite differences against the tape, on `CASES` seeded draws of
/// inputs in [-1, 1]. Error metric: |analytic - numeric| / max(1, |a|, |n|).
fn grad_check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> stts::Result<Var>,
{
    for case in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 * case + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let weights = random_tensor(&mut rng, g.shape(out));
        let grads = g.backward_with(out, weights.clone()).unwrap();

        for (which, (var, input)) in vars.iter().zip(&inputs).enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[i] += STEP;
                let mut minus = inputs.clone();
                minus[which].data_mut()[i] -= STEP;
                let numeric = (probe(&f, &plus, &weights) - probe(&f, &minus, &weights))
                    / (2.0 * STEP as f64);
                let a = analytic.data()[i] as f64;
                let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                assert!(
                    err < REL_TOL,
                    "{name} case {case} input {which}[{i}]: analytic {a} numeric {numeric} err {err}"
                );
            }
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    assert!(matches!(g.matmul(a, a), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient() {
    grad_check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::from_rows(&[[1000.0, 0.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6 && d.iter().all(|v| v.is_finite()));

    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    for (got, want) in g.value(y).data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    let x = g.constant(Tensor::from_rows(&[[f32::NAN, 0.0]]).unwrap());
    assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn softmax_gradient() {
    grad_check("softmax", &[&[3, 5]], |g, v| g.softmax_rows(v[0]));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[10.0, -10.0]]).unwrap());
    let l = g.cross_entropy(x, &[0]).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    let x = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let l = g.cross_entropy(x, &[1]).unwrap();
    assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);

    assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_gradient() {
    grad_check("cross_entropy", &[&[2, 3]], |g, v| {
        g.cross_entropy(v[0], &[2, 0])
    });
}

#[test]
fn custom_node_examples() {
    // Identity forward, identity backward.
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
    let v = g.value(x).clone();
    let y = g
        .custom(&[x], v, Box::new(|up, _| Ok(vec![up.clone()])))
        .unwrap();
    let grads = g
        .backward_with(y, Tensor::from_rows(&[[3.0, 4.0]]).unwrap())
        .unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);

    // Doubling forward with a halving backward, followed by an exact
    // doubling: the pair composes to gradient 1.
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[0.5]]).unwrap());
    let doubled = Tensor::from_rows(&[[1.0]]).unwrap();
    let y = g
        .custom(
            &[x],
            doubled,
            Box::new(|up, _| {
                Ok(vec![Tensor::new(
                    up.shape().to_vec(),
                    up.data().iter().map(|v| v * 0.5).collect(),
                )?])
            }),
        )
        .unwrap();
    let z = g.scale(y, 2.0).unwrap();
    let z = g.reshape(z, Vec::<usize>::new()).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn custom_node_rejects_bad_gradient_shape() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2, 2]));
    let y = g
        .custom(
            &[x],
            Tensor::zeros(vec![1]),
            Box::new(|_, _| Ok(vec![Tensor::zeros(vec![3])])),
        )
        .unwrap();
    assert!(matches!(g.backward(y), Err(Error::Dimension(_))));
}

#[test]
fn custom_node_gradient() {
    // Elementwise cube with its analytic rule.
    grad_check("custom", &[&[2, 3]], |g, v| {
        let x = g.value(v[0]).clone();
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|a| a * a * a).collect(),
        )?;
        g.custom(
            &[v[0]],
            y,
            Box::new(|up, ins| {
                let d = ins[0]
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(a, u)| 3.0 * a * a * u)
                    .collect();
                Ok(vec![Tensor::new(up.shape().to_vec(), d)?])
            }),
        )
    });
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let r = g.constant(Tensor::new(vec![2], vec![10.0, 20.0]).unwrap());
    let s = g.add(a, a).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 4.0, 6.0, 8.0]);
    let s = g.add_row(a, r).unwrap();
    assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
    let s = g.mul_row(a, r).unwrap();
    assert_eq!(g.value(s).data(), &[10.0, 40.0, 30.0, 80.0]);
    let s = g.scale(a, -0.5).unwrap();
    assert_eq!(g.value(s).data(), &[-0.5, -1.0, -1.5, -2.0]);
    let s = g.activate(a, Activation::Identity).unwrap();
    assert_eq!(g.value(s).data(), g.value(a).data());
    let z = g.constant(Tensor::zeros(vec![1, 1]));
    let s = g.activate(z, Activation::Gelu).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
    let bad = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.add_row(a, bad), Err(Error::Dimension(_))));
    assert!(matches!(g.add(a, bad), Err(Error::Dimension(_))));
}

#[test]
fn elementwise_gradients() {
    grad_check("add", &[&[3, 2], &[3, 2]], |g, v| g.add(v[0], v[1]));
    grad_check("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    grad_check("mul_row", &[&[3, 4], &[1, 4]], |g, v| g.mul_row(v[0], v[1]));
    grad_check("scale", &[&[2, 3]], |g, v| g.scale(v[0], 1.7));
    grad_check("gelu", &[&[3, 3]], |g, v| {
        g.activate(v[0], Activation::Gelu)
    });
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[[1.0, 3.0], [5.0, 5.0]]).unwrap());
    let y = g.layer_norm(a).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);
    assert_eq!(&d[2..], &[0.0, 0.0]);
}

#[test]
fn layer_norm_gradient() {
    grad_check("layer_norm", &[&[3, 5]], |g, v| g.layer_norm(v[0]));
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, 3.0, 4.0, 2.0, 6.0]).unwrap());
    let m = g.reduce(a, 0, Reduction::Mean).unwrap();
    assert_eq!(g.value(m).data(), &[2.5, 3.5, 4.5]);
    let m = g.reduce(a, 1, Reduction::Max).unwrap();
    assert_eq!(g.value(m).data(), &[5.0, 6.0]);
    assert!(matches!(
        g.reduce(a, 2, Reduction::Max),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn reduce_gradients() {
    for axis in 0..3 {
        grad_check("reduce_mean", &[&[2, 3, 4]], move |g, v| {
            g.reduce(v[0], axis, Reduction::Mean)
        });
        grad_check("reduce_max", &[&[2, 3, 4]], move |g, v| {
            g.reduce(v[0], axis, Reduction::Max)
        });
    }
}

#[test]
fn shape_op_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[[5.0], [6.0]]).unwrap());
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let r = g.reshape(a, vec![4]).unwrap();
    assert_eq!(g.shape(r), &[4]);
    let s = g.select(a, 0, &[1, 1, 0]).unwrap();
    assert_eq!(g.value(s).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
    let s = g.select(a, 1, &[1]).unwrap();
    assert_eq!(g.value(s).data(), &[2.0, 4.0]);
    let t = g.transpose(a).unwrap();
    assert_eq!(g.value(t).data(), &[1.0, 3.0, 2.0, 4.0]);
    let row = g.constant(Tensor::new(vec![2], vec![7.0, 8.0]).unwrap());
    let br = g.broadcast_rows(row, 3).unwrap();
    assert_eq!(g.value(br).data(), &[7.0, 8.0, 7.0, 8.0, 7.0, 8.0]);
    assert!(matches!(g.select(a, 0, &[2]), Err(Error::Index(_))));
    assert!(matches!(g.reshape(a, vec![3]), Err(Error::Dimension(_))));
    assert!(matches!(g.concat(&[a, row], 1), Err(Error::Dimension(_))));
}

#[test]
fn shape_op_gradients() {
    grad_check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], vec![3, 4]));
    grad_check("concat_last", &[&[3, 2], &[3, 3]], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    grad_check("concat_first", &[&[1, 4], &[2, 4]], |g, v| {
        g.concat(&[v[0], v[1]], 0)
    });
    grad_check("select_rows", &[&[4, 3]], |g, v| {
        g.select(v[0], 0, &[3, 0, 3])
    });
    grad_check("select_cols", &[&[2, 5]], |g, v| g.select(v[0], 1, &[4, 1]));
    grad_check("transpose", &[&[2, 3]], |g, v| g.transpose(v[0]));
    grad_check("broadcast_rows", &[&[1, 3]], |g, v| {
        g.broadcast_rows(v[0], 4)
    });
}

#[test]
fn composed_network_gradient() {
    // Two-layer perceptron with layer norm and softmax attention weights.
    grad_check("composed", &[&[4, 3], &[3, 5], &[5], &[5, 2]], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.layer_norm(h)?;
        let h = g.activate(h, Activation::Gelu)?;
        let w = g.softmax_rows(h)?;
        let o = g.matmul(w, v[3])?;
        g.cross_entropy(o, &[0, 1, 1, 0])
    });
}

#[test]
fn backward_is_single_use() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.scale(x, 3.0).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    assert!(matches!(g.backward(y), Err(Error::Tape(_))));
}

#[test]
fn shared_input_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.add(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f32..50.0, 1..12), 1..6)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for r in g.value(y).data().chunks(width) {
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
            prop_assert!(r.iter().all(|v| *v >= 0.0));
        }
    }
}
