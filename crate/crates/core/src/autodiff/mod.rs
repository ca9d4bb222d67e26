//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are registered
//! with [`Tape::leaf`]; every operation on a [`Var`] appends a node holding
//! its output value, and [`Tape::backward`] sweeps the nodes in reverse to
//! produce [`Gradients`] for the differentiable leaves.

mod tape;
mod tensor;

pub use tape::{Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.matmul(b)
}

pub fn apply_elementwise<'t>(x: Var<'t>, kind: Elementwise, rhs: Option<Var<'t>>) -> Result<Var<'t>> {
    x.apply(kind, rhs)
}

pub fn reduce_sum(x: Var<'_>, axis: Option<usize>) -> Result<Var<'_>> {
    x.reduce_sum(axis)
}

pub fn backward(loss: Var<'_>) -> Result<Gradients> {
    loss.tape().backward(loss)
}


#[cfg(test)]
mod tests {
    use super::gradcheck::{max_rel_err, numeric};
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Evaluates `build` on a fresh tape and returns the loss and the
    /// reverse-mode gradients for every input.
    /// Pins a closure to the higher-ranked signature `run` expects.
    fn graph<F: for<'t> Fn(&[Var<'t>]) -> Var<'t>>(f: F) -> F {
        f
    }

    fn run(
        inputs: &[Tensor],
        build: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>,
    ) -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|x| tape.leaf(&x.clone().with_grad()))
            .collect();
        let loss = build(&vars);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(v, x)| grads.get(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]))
            .collect();
        (loss.item(), g)
    }

    fn check(inputs: &[Tensor], tol: f64, build: impl for<'t> Fn(&[Var<'t>]) -> Var<'t> + Copy) {
        let (_, analytic) = run(inputs, build);
        let numeric = numeric(inputs, 1e-5, |xs| run(xs, build).0);
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = max_rel_err(a, n);
            assert!(err < tol, "gradient mismatch {err:e}: {a:?} vs {n:?}");
        }
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let tape = Tape::new();
        let eye = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(matmul(eye, m).unwrap().to_vec(), vec![1., 2., 3., 4.]);
        let r = tape.leaf(&t(&[1, 2], &[1., 2.]));
        let c = tape.leaf(&t(&[2, 1], &[3., 4.]));
        let p = matmul(r, c).unwrap();
        assert_eq!(p.shape(), vec![1, 1]);
        assert_eq!(p.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_column_sums_of_b() {
        let a = t(&[2, 3], &[0.1, -0.4, 0.3, 0.9, 0.2, -0.7]);
        let b = t(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 0.25, 4.0]);
        let (_, g) = run(&[a.clone(), b.clone()], |v| v[0].matmul(v[1]).unwrap().sum());
        // d/dA_ij sum(AB) = sum_k B_jk
        let row_sums: Vec<f64> = b.data().chunks(2).map(|r| r[0] + r[1]).collect();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[0][i * 3 + j] - row_sums[j]).abs() < 1e-15);
            }
        }
        let num = numeric(&[a, b], 1e-5, |x| run(x, |v| v[0].matmul(v[1]).unwrap().sum()).0);
        assert!(max_rel_err(&g[0], &num[0]) < 1e-7);
        assert!(max_rel_err(&g[1], &num[1]) < 1e-7);
    }

    #[test]
    fn elementwise_fixed_points() {
        let tape = Tape::new();
        let zero = tape.leaf(&Tensor::scalar(0.0).with_grad());
        assert_eq!(zero.tanh().item(), 0.0);
        assert_eq!(tape.scalar(-1.0).relu().item(), 0.0);
        let s = zero.silu();
        assert_eq!(s.item(), 0.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(zero).unwrap(), &[0.5]);
    }

    #[test]
    fn square_value_and_gradient() {
        let (v, g) = run(&[Tensor::scalar(3.0)], |v| v[0].square());
        assert_eq!(v, 9.0);
        assert_eq!(g[0], vec![6.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let (_, g) = run(&[Tensor::scalar(1.7)], |v| v[0].add(v[0]).unwrap());
        assert_eq!(g[0], vec![2.0]);
    }

    #[test]
    fn reduce_sum_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1., 2., 3.]).with_grad());
        let s = reduce_sum(x, None).unwrap();
        assert_eq!(s.item(), 6.0);
        assert_eq!(backward(s).unwrap().get(x).unwrap(), &[1., 1., 1.]);
        assert_eq!(tape.leaf(&Tensor::zeros(&[4])).sum().item(), 0.0);

        let m = tape.leaf(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(m.reduce_sum(Some(0)).unwrap().to_vec(), vec![5., 7., 9.]);
        assert_eq!(m.reduce_sum(Some(1)).unwrap().to_vec(), vec![6., 15.]);
        assert!(matches!(
            m.reduce_sum(Some(2)),
            Err(crate::Error::Axis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn binary_shape_mismatch_is_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[3]));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        assert!(a.add(b).is_err());
        assert!(apply_elementwise(a, Elementwise::Mul, None).is_err());
        // scalar broadcast is allowed on either side
        let s = tape.scalar(2.0);
        assert_eq!(s.mul(a).unwrap().shape(), vec![3]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(crate::Error::NonScalarLoss(_))));
        let other = Tape::new();
        let y = other.leaf(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(crate::Error::ForeignVar)));
    }

    #[test]
    fn non_participating_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
        let unused = tape.leaf(&Tensor::scalar(5.0).with_grad());
        let g = tape.backward(x.square()).unwrap();
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn tanh_of_matvec_matches_finite_differences() {
        let w = t(&[3, 4], &[0.3, -0.2, 0.5, 0.1, -0.6, 0.4, 0.2, -0.3, 0.7, 0.05, -0.45, 0.25]);
        let x = t(&[4, 1], &[0.5, -1.0, 0.25, 0.8]);
        check(&[w, x], 1e-6, |v| v[0].matmul(v[1]).unwrap().tanh().sum());
    }

    #[test]
    fn row_broadcast_and_concat_gradients() {
        let a = t(&[2, 3], &[0.1, -0.4, 0.3, 0.9, 0.2, -0.7]);
        let r = t(&[3], &[0.5, -0.25, 0.75]);
        let b = t(&[2, 2], &[0.3, 0.6, -0.2, 0.1]);
        check(&[a, r, b], 1e-7, |v| {
            let x = v[0].mul_row(v[1]).unwrap().add_row(v[1]).unwrap();
            x.concat_cols(v[2]).unwrap().silu().square().sum()
        });
    }

    #[test]
    fn transpose_gradient() {
        let a = t(&[2, 3], &[0.1, -0.4, 0.3, 0.9, 0.2, -0.7]);
        let b = t(&[2, 3], &[0.3, 0.6, -0.2, 0.1, 0.5, 0.5]);
        check(&[a, b], 1e-7, |v| v[0].transpose().unwrap().matmul(v[1]).unwrap().tanh().sum());
    }

    fn unary_kinds() -> Vec<Elementwise> {
        vec![
            Elementwise::Square,
            Elementwise::Tanh,
            Elementwise::Silu,
            Elementwise::Relu,
            Elementwise::Scale(-1.3),
            Elementwise::Negate,
        ]
    }

    fn small_tensor(max_dim: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
            prop::collection::vec(-1.0f64..1.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn unary_ops_match_finite_differences(x in small_tensor(8), which in 0usize..6) {
            let kind = unary_kinds()[which];
            // relu has a kink at 0; keep samples away from it
            let x = if kind == Elementwise::Relu {
                let d = x.data().iter().map(|v| if v.abs() < 1e-3 { 0.5 } else { *v }).collect();
                Tensor::new(x.shape().to_vec(), d).unwrap()
            } else { x };
            let build = graph(move |v| {
                // weight by position so the gradient is not uniform
                let n = v[0].len();
                let w: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
                let wv = v[0].tape().constant_from(v[0].shape(), w).unwrap();
                v[0].apply(kind, None).unwrap().mul(wv).unwrap().sum()
            });
            let (_, analytic) = run(std::slice::from_ref(&x), build);
            let num = numeric(&[x], 1e-5, |xs| run(xs, build).0);
            prop_assert!(max_rel_err(&analytic[0], &num[0]) < 1e-5);
        }

        #[test]
        fn binary_ops_match_finite_differences(
            (a, b) in small_tensor(8).prop_flat_map(|a| {
                let shape = a.shape().to_vec();
                let n = a.len();
                (Just(a), prop::collection::vec(-1.0f64..1.0, n)
                    .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap()))
            }),
            which in 0usize..3,
        ) {
            let kind = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul][which];
            let build = graph(move |v| v[0].apply(kind, Some(v[1])).unwrap().tanh().sum());
            let (_, analytic) = run(&[a.clone(), b.clone()], build);
            let num = numeric(&[a, b], 1e-5, |xs| run(xs, build).0);
            prop_assert!(max_rel_err(&analytic[0], &num[0]) < 1e-5);
            prop_assert!(max_rel_err(&analytic[1], &num[1]) < 1e-5);
        }

        #[test]
        fn matmul_and_axis_sum_match_finite_differences(
            (a, b) in (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(m, k, n)| (
                prop::collection::vec(-1.0f64..1.0, m * k).prop_map(move |d| Tensor::new(vec![m, k], d).unwrap()),
                prop::collection::vec(-1.0f64..1.0, k * n).prop_map(move |d| Tensor::new(vec![k, n], d).unwrap()),
            )),
            axis in 0usize..2,
        ) {
            let build = graph(move |v| {
                v[0].matmul(v[1]).unwrap().reduce_sum(Some(axis)).unwrap().square().sum()
            });
            let (_, analytic) = run(&[a.clone(), b.clone()], build);
            let num = numeric(&[a, b], 1e-5, |xs| run(xs, build).0);
            prop_assert!(max_rel_err(&analytic[0], &num[0]) < 1e-5);
            prop_assert!(max_rel_err(&analytic[1], &num[1]) < 1e-5);
        }

        #[test]
        fn scaling_the_loss_scales_gradients_exactly(x in small_tensor(6), alpha in prop::sample::select(vec![0.5, 2.0, -4.0, 0.25])) {
            let (_, g1) = run(std::slice::from_ref(&x), |v| v[0].tanh().square().sum());
            let (_, g2) = run(std::slice::from_ref(&x), move |v| v[0].tanh().square().sum().scale(alpha));
            for (a, b) in g1[0].iter().zip(&g2[0]) {
                prop_assert_eq!(a * alpha, *b);
            }
        }

        #[test]
        fn gradients_are_deterministic(x in small_tensor(8)) {
            let build = graph(|v| {
                let t = v[0].transpose().unwrap();
                v[0].matmul(t).unwrap().silu().sum()
            });
            let (_, g1) = run(std::slice::from_ref(&x), build);
            let (_, g2) = run(std::slice::from_ref(&x), build);
            prop_assert_eq!(g1, g2);
        }
    }
}
