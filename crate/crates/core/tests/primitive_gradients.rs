//! Every tape primitive agrees with central finite differences in 64-bit.

use dancelab_core::numerics::{grad_check, GradCheckOptions, Result, Rng, Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-5;

/// Contracts `y` with a fixed, non-uniform weight so every output entry
/// contributes a distinct upstream gradient.
fn contract(tape: &Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y);
    let w = Tensor::from_fn(&shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 13.0)?;
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv)?;
    tape.sum(prod)
}

fn check(params: Vec<Tensor<f64>>, f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = Rng::seed_from(0);
    let report =
        grad_check(f, &params, &GradCheckOptions { step: 1e-4, tolerance: TOL, samples_per_param: None }, &mut rng);
    assert!(report.failure.is_none(), "{:?}", report.failure);
    report.max_rel_error
}

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add_mul(seed in any::<u64>()) {
        let a = tensor(&[3, 4], seed, -2.0, 2.0);
        let b = tensor(&[3, 4], seed ^ 1, -2.0, 2.0);
        let e = check(vec![a, b], |t, p| {
            let s = t.add(p[0], p[1])?;
            let m = t.mul(s, p[1])?;
            contract(t, m)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn matmul_shared_and_batched(seed in any::<u64>()) {
        let a = tensor(&[2, 3, 4], seed, -1.0, 1.0);
        let w = tensor(&[4, 5], seed ^ 2, -1.0, 1.0);
        let b = tensor(&[2, 5, 3], seed ^ 3, -1.0, 1.0);
        let e = check(vec![a, w, b], |t, p| {
            let y = t.matmul(p[0], p[1])?;
            let z = t.matmul(y, p[2])?;
            contract(t, z)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn transpose_reshape(seed in any::<u64>()) {
        let a = tensor(&[2, 3, 4], seed, -1.0, 1.0);
        let e = check(vec![a], |t, p| {
            let tr = t.transpose(p[0])?;
            let r = t.reshape(tr, &[6, 4])?;
            let sq = t.mul(r, r)?;
            contract(t, sq)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn slice_concat(seed in any::<u64>()) {
        let a = tensor(&[2, 5, 3], seed, -1.0, 1.0);
        let b = tensor(&[2, 2, 3], seed ^ 4, -1.0, 1.0);
        let e = check(vec![a, b], |t, p| {
            let s = t.slice(p[0], 1, 1, 4)?;
            let c = t.concat(&[p[1], s, p[1]], 1)?;
            let sq = t.mul(c, c)?;
            contract(t, sq)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn exp_log_sqrt_tanh(seed in any::<u64>()) {
        let a = tensor(&[7], seed, 0.2, 2.0);
        let e = check(vec![a], |t, p| {
            let ex = t.exp(p[0])?;
            let lg = t.log(p[0])?;
            let sq = t.sqrt(p[0])?;
            let th = t.tanh(p[0])?;
            let s1 = t.add(ex, lg)?;
            let s2 = t.mul(sq, th)?;
            let s = t.add(s1, s2)?;
            contract(t, s)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        let a = tensor(&[3, 6], seed, -3.0, 3.0);
        let e = check(vec![a], |t, p| {
            let s = t.softmax(p[0])?;
            contract(t, s)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        let a = tensor(&[4, 8], seed, -2.0, 2.0);
        let e = check(vec![a], |t, p| {
            let n = t.layer_norm(p[0], 1e-5)?;
            contract(t, n)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }

    #[test]
    fn reductions_and_broadcast(seed in any::<u64>()) {
        let a = tensor(&[3, 4, 2], seed, -1.0, 1.0);
        let b = tensor(&[4, 1], seed ^ 5, -1.0, 1.0);
        let e = check(vec![a, b], |t, p| {
            let bb = t.broadcast(p[1], &[3, 4, 2])?;
            let s = t.mul(p[0], bb)?;
            let sa = t.sum_axis(s, 1)?;
            let ma = t.mean_axis(s, 2)?;
            let m = t.mean(ma)?;
            let sq = t.mul(sa, sa)?;
            let total = t.sum(sq)?;
            let mm = t.mul(m, m)?;
            t.add(total, mm)
        });
        prop_assert!(e <= TOL, "rel error {e}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for seed in 0..100u64 {
        let a = tensor(&[5, 9], seed, -5.0, 5.0);
        let s = a.softmax_last_axis().unwrap();
        for row in s.data().chunks(9) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn evaluation_is_bit_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let a = tape.param(tensor(&[4, 8], 11, -1.0, 1.0).cast());
        let w = tape.param(tensor(&[8, 8], 12, -1.0, 1.0).cast());
        let y = tape.matmul(a, w).unwrap();
        let n = tape.layer_norm(y, 1e-5).unwrap();
        let s = tape.softmax(n).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(n).to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
