use proptest::prelude::*;
use tabdeco_core::autodiff::{Graph, Var};
use tabdeco_core::error::Result;
use tabdeco_core::gradcheck::{grad_check, GradCheckOptions, OP_TOLERANCE};
use tabdeco_core::Tensor;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

/// Scalar readout `Σ w ⊙ y` with fixed weights so every output entry matters.
fn readout(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = (0..n).map(|i| 0.3 + ((i * 7) % 5) as f64 * 0.35 - 0.7).collect();
    let z = g.mul_const(y, w)?;
    Ok(g.sum(z))
}

/// Small differentiable programs exercised by the random gradient checks.
fn program(kind: usize, g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let (x, y) = (v[0], v[1]);
    let out = match kind {
        0 => {
            let p = g.matmul(x, y)?;
            g.gelu(p)
        }
        1 => g.softmax(x, 1)?,
        2 => {
            let s = g.log_softmax(x, 0)?;
            g.mul(s, x)?
        }
        3 => {
            let gamma = g.narrow(y, 0, 0, 1)?;
            let gamma = g.reshape(gamma, &[3])?;
            let beta = g.narrow(y, 0, 1, 1)?;
            let beta = g.reshape(beta, &[3])?;
            g.layer_norm(x, gamma, beta, 1e-5)?
        }
        4 => {
            let t = g.transpose(y, 0, 1)?;
            g.cosine_sim(x, t, 1e-8)?
        }
        5 => {
            let n = g.l2_normalize(x, 1e-8)?;
            let e = g.exp(n);
            let c = g.concat(&[e, n], 0)?;
            g.permute(c, &[1, 0])?
        }
        _ => {
            let t = g.transpose(y, 0, 1)?;
            let s = g.sub(x, t)?;
            let sq = g.mul(s, s)?;
            let m = g.mean_axis(sq, 1)?;
            let one = g.constant(Tensor::ones([3]));
            let m1 = g.add(m, one)?;
            g.log(m1)
        }
    };
    readout(g, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one(data in values(24, -1e4, 1e4)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(tensor(&[4, 6], data));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_f32(data in values(24, -1e4, 1e4)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(tensor(&[3, 8], data).cast());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(8) {
            prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_symmetric_bounded_and_scale_invariant(
        a in values(5, -10.0, 10.0),
        b in values(5, -10.0, 10.0),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::<f64>::new();
        let av = g.constant(tensor(&[5], a.clone()));
        let bv = g.constant(tensor(&[5], b));
        let scaled = g.constant(tensor(&[5], a.iter().map(|v| v * s).collect()));
        let ab = g.cosine_sim(av, bv, 1e-12).unwrap();
        let ba = g.cosine_sim(bv, av, 1e-12).unwrap();
        let sb = g.cosine_sim(scaled, bv, 1e-12).unwrap();
        let (ab, ba, sb) = (g.scalar_value(ab), g.scalar_value(ba), g.scalar_value(sb));
        prop_assert_eq!(ab, ba);
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
        prop_assert!((ab - sb).abs() < 1e-12);
    }

    #[test]
    fn random_programs_pass_gradient_check(
        kind in 0usize..7,
        x in values(9, -2.0, 2.0),
        y in values(9, -2.0, 2.0),
    ) {
        let inputs = [tensor(&[3, 3], x), tensor(&[3, 3], y)];
        let f = move |g: &mut Graph<f64>, v: &[Var]| program(kind, g, v);
        let opts = GradCheckOptions { eps: 1e-5, ..GradCheckOptions::default() };
        let report = grad_check(&f, &inputs, &opts).unwrap();
        prop_assert!(report.max_rel_err < OP_TOLERANCE, "program {} error {}", kind, report.max_rel_err);
    }
}
