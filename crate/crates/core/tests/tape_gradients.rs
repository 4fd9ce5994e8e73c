//! Analytic gradients of every differentiable tape op against central finite
//! differences on randomized small tensors.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqchat_core::tensor::{Graph, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Scalarises `build`'s output with a fixed random weighting so that every
/// output element contributes a distinct coefficient.
fn objective(build: &Build, inputs: &[Tensor<f64>], weights_seed: u64) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars);
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = Tensor::uniform(g.shape(y), 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(y, w).unwrap();
    let s = g.sum(prod);
    (g, vars, s)
}

fn eval(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> f64 {
    let (g, _, s) = objective(build, inputs, seed);
    g.value(s).item()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn check(build: &Build, inputs: Vec<Tensor<f64>>) {
    let seed = 17;
    let (mut g, vars, s) = objective(build, &inputs, seed);
    g.backward(s).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("leaf gradient");
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * STEP);
            let a = analytic.data()[j];
            assert!(
                rel_err(a, numeric) < REL_TOL || (a - numeric).abs() < 1e-9,
                "input {k} coord {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Values bounded away from zero so relu's kink stays outside the stencil.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform(shape, 1.0, &mut rng);
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad(m in 1usize..=6, k in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        check(&|g, v| g.matmul(v[0], v[1]).unwrap(),
              vec![rand_tensor(&[m, k], seed), rand_tensor(&[k, n], seed ^ 1)]);
    }

    #[test]
    fn bmm_grad(b in 1usize..=3, m in 1usize..=5, k in 1usize..=5, n in 1usize..=5,
                trans in any::<bool>(), seed in any::<u64>()) {
        let rhs = if trans { [b, n, k] } else { [b, k, n] };
        check(&move |g, v| g.bmm(v[0], v[1], trans).unwrap(),
              vec![rand_tensor(&[b, m, k], seed), rand_tensor(&rhs, seed ^ 2)]);
    }

    #[test]
    fn broadcast_elementwise_grad(rows in 1usize..=6, cols in 1usize..=6, seed in any::<u64>()) {
        let inputs = vec![rand_tensor(&[rows, cols], seed), rand_tensor(&[cols], seed ^ 3)];
        check(&|g, v| g.add(v[0], v[1]).unwrap(), inputs.clone());
        check(&|g, v| g.sub(v[0], v[1]).unwrap(), inputs.clone());
        check(&|g, v| g.mul(v[0], v[1]).unwrap(), inputs);
    }

    #[test]
    fn unary_grads(n in 1usize..=6, seed in any::<u64>()) {
        let x = away_from_zero(&[2, n], seed);
        check(&|g, v| g.relu(v[0]), vec![x.clone()]);
        check(&|g, v| g.tanh(v[0]), vec![x.clone()]);
        check(&|g, v| g.sigmoid(v[0]), vec![x.clone()]);
        check(&|g, v| g.scale(v[0], -2.5), vec![x.clone()]);
        check(&|g, v| g.one_minus(v[0]), vec![x.clone()]);
        check(&|g, v| g.mean(v[0]), vec![x]);
    }

    #[test]
    fn softmax_grad(a in 1usize..=4, b in 1usize..=4, c in 1usize..=4, axis in 0usize..3, seed in any::<u64>()) {
        check(&move |g, v| g.softmax(v[0], axis).unwrap(), vec![rand_tensor(&[a, b, c], seed).map(|x| 3.0 * x)]);
    }

    #[test]
    fn layer_norm_grad(rows in 1usize..=4, width in 2usize..=6, seed in any::<u64>()) {
        check(&|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), vec![
            rand_tensor(&[rows, width], seed),
            rand_tensor(&[width], seed ^ 4).map(|x| x + 1.5),
            rand_tensor(&[width], seed ^ 5),
        ]);
    }

    #[test]
    fn shape_op_grads(a in 1usize..=4, b in 1usize..=4, c in 1usize..=4, seed in any::<u64>()) {
        let x = rand_tensor(&[a, b, c], seed);
        check(&|g, v| g.permute(v[0], &[2, 0, 1]).unwrap(), vec![x.clone()]);
        check(&move |g, v| g.reshape(v[0], &[a * b, c]).unwrap(), vec![x.clone()]);
        check(&move |g, v| g.narrow(v[0], 1, b - 1, 1).unwrap(), vec![x.clone()]);
        check(&|g, v| g.concat(&[v[0], v[1], v[0]], 2).unwrap(),
              vec![x, rand_tensor(&[a, b, 2], seed ^ 6)]);
    }

    #[test]
    fn embedding_grad(rows in 2usize..=6, width in 1usize..=5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..rows)).collect();
        check(&move |g, v| g.embedding(v[0], &ids).unwrap(), vec![rand_tensor(&[rows, width], seed)]);
    }

    #[test]
    fn cross_entropy_grad(rows in 1usize..=5, classes in 2usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // class 0 doubles as padding; keep at least one real target
        let mut targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        targets[0] = 1;
        check(&move |g, v| g.cross_entropy(v[0], &targets, 0).unwrap(),
              vec![rand_tensor(&[rows, classes], seed).map(|x| 2.0 * x)]);
    }

    #[test]
    fn dropout_grad_matches_fixed_mask(n in 1usize..=6, seed in any::<u64>()) {
        // the mask is re-drawn from the same seed on every evaluation
        check(&move |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(v[0], 0.3, &mut rng).unwrap()
        }, vec![rand_tensor(&[3, n], seed)]);
    }
}

#[test]
fn composite_expression_matches_finite_differences() {
    // tanh(layer_norm(x·W + b)) -> softmax -> weighted sum
    check(
        &|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add(h, v[2]).unwrap();
            let gain = g.constant(Tensor::ones(&[4]));
            let bias = g.constant(Tensor::zeros(&[4]));
            let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
            let h = g.tanh(h);
            g.softmax(h, 1).unwrap()
        },
        vec![rand_tensor(&[3, 5], 1), rand_tensor(&[5, 4], 2), rand_tensor(&[4], 3)],
    );
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = Tensor::<f64>::uniform(&[4, 7], 1e4, &mut rng);
        let s = seqchat_core::tensor::softmax(&x, 1).unwrap();
        for r in 0..4 {
            let total: f64 = (0..7).map(|c| s.get(&[r, c])).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!((0..7).all(|c| s.get(&[r, c]) >= 0.0));
        }
    }
}

#[test]
fn replay_is_bit_identical_for_a_fixed_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::uniform(&[4, 6], 1.0, &mut rng));
        let w = g.leaf(Tensor::uniform(&[6, 3], 1.0, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.dropout(h, 0.2, &mut rng).unwrap();
        let h = g.softmax(h, 1).unwrap();
        let l = g.cross_entropy(h, &[1, 2, 0, 1], 99).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(w).unwrap().into_data())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
