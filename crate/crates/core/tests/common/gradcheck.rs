//! Finite-difference checks of every tape op in 64-bit arithmetic.
//!
//! Each op's output `Y` is reduced to a scalar as `uᵀ Y w` with fixed random
//! `u`, `w` (no gradient), except the cross-entropy op which is already
//! scalar. Analytic gradients with respect to every input are compared to
//! central differences from the oracle crate.

use ivon_lora::rng::StreamRng;
use ivon_lora::tensor::{Tape, Tensor, Var};
use ivon_lora_oracles::finite_difference_gradient;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;
pub const FD_EPS: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Largest violation `|a − n| − (ABS + REL·|n|)` over all coordinates of all
/// inputs; `<= 0` means the instance passes.
pub fn check_instance(inputs: &[Tensor<f64>], scalar_output: bool, build: &Build, rng: &mut StdRng) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone(), true)).collect();
    let out = build(&mut probe, &vars);
    let shape = probe.value(out).shape().to_vec();
    let (rows, cols) = if shape.len() == 2 { (shape[0], shape[1]) } else { (1, 1) };
    let u = Tensor::from_fn(&[1, rows], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[cols, 1], |_| rng.gen_range(-1.0..1.0));

    let eval = |values: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = build(&mut tape, &vars);
        let loss = if scalar_output {
            y
        } else {
            let uu = tape.leaf(u.clone(), false);
            let ww = tape.leaf(w.clone(), false);
            let left = tape.matmul(uu, y).unwrap();
            tape.matmul(left, ww).unwrap()
        };
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.get(v).into_data()).collect())
    };

    let (_, analytic) = eval(inputs);
    let mut worst = f64::NEG_INFINITY;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |theta| {
                let mut vals = inputs.to_vec();
                vals[i] = Tensor::new(input.shape().to_vec(), theta.to_vec()).unwrap();
                eval(&vals).0
            },
            input.data(),
            FD_EPS,
        );
        for (a, n) in analytic[i].iter().zip(&numeric) {
            worst = worst.max((a - n).abs() - (ABS_TOL + REL_TOL * n.abs()));
        }
    }
    worst
}

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

pub struct OpResult {
    pub op: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub worst: f64,
}

/// Runs `instances` random cases for every op.
pub fn check_all_ops(instances: usize, seed: u64) -> Vec<OpResult> {
    let mut results = Vec::new();
    let mut run = |op: &'static str, gen: &mut dyn FnMut(&mut StdRng) -> (Vec<Tensor<f64>>, bool, Box<Build>)| {
        let mut rng = StdRng::seed_from_u64(seed ^ op.len() as u64 ^ (op.as_bytes()[0] as u64) << 8);
        let mut failures = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..instances {
            let (inputs, scalar, build) = gen(&mut rng);
            let v = check_instance(&inputs, scalar, &*build, &mut rng);
            worst = worst.max(v);
            if v > 0.0 {
                failures += 1;
            }
        }
        results.push(OpResult {
            op,
            instances,
            failures,
            worst,
        });
    };

    run("matmul", &mut |r| {
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        (
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])],
            false,
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        )
    });
    run("transpose", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        (vec![rand_tensor(r, &[m, n])], false, Box::new(|t, v| t.transpose(v[0]).unwrap()))
    });
    run("add", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[m, n])],
            false,
            Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        )
    });
    run("add_bias", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n])],
            false,
            Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
        )
    });
    run("scale", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let f = r.gen_range(-3.0..3.0);
        (vec![rand_tensor(r, &[m, n])], false, Box::new(move |t, v| t.scale(v[0], f).unwrap()))
    });
    run("gelu", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        (vec![rand_tensor(r, &[m, n])], false, Box::new(|t, v| t.gelu(v[0]).unwrap()))
    });
    run("layer_norm", &mut |r| {
        let (m, n) = (r.gen_range(1..4), r.gen_range(2..6));
        (
            vec![rand_tensor(r, &[m, n]), rand_tensor(r, &[n]), rand_tensor(r, &[n])],
            false,
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
        )
    });
    run("embedding", &mut |r| {
        let (vocab, d, n) = (r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..7));
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..vocab)).collect();
        (
            vec![rand_tensor(r, &[vocab, d])],
            false,
            Box::new(move |t, v| t.embedding(v[0], &ids).unwrap()),
        )
    });
    run("mean_pool", &mut |r| {
        let (groups, size, d) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        (
            vec![rand_tensor(r, &[groups * size, d])],
            false,
            Box::new(move |t, v| t.mean_pool(v[0], size).unwrap()),
        )
    });
    run("apply_mask", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let mask: Vec<f64> = (0..m * n).map(|_| if r.gen_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
        (
            vec![rand_tensor(r, &[m, n])],
            false,
            Box::new(move |t, v| t.apply_mask(v[0], mask.clone()).unwrap()),
        )
    });
    run("dropout", &mut |r| {
        let (m, n) = (r.gen_range(1..5), r.gen_range(1..5));
        let seed: u64 = r.gen();
        (
            vec![rand_tensor(r, &[m, n])],
            false,
            Box::new(move |t, v| t.dropout(v[0], 0.25, &mut StreamRng::new(seed, "gradcheck")).unwrap()),
        )
    });
    run("attention", &mut |r| {
        let (seqs, len, heads, dh) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3), r.gen_range(1..3));
        let shape = [seqs * len, heads * dh];
        (
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape), rand_tensor(r, &shape)],
            false,
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], seqs, heads).unwrap()),
        )
    });
    run("softmax_cross_entropy", &mut |r| {
        let (m, k) = (r.gen_range(1..5), r.gen_range(2..5));
        let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..k)).collect();
        (
            vec![rand_tensor(r, &[m, k])],
            true,
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap()),
        )
    });
    results
}
