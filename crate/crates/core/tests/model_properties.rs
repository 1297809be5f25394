mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixjump::model::{
    build_intensity, embedded_chain, matrix_exponential, mixture_transition, n_step_matrix,
    IntensityMatrix, MixtureModel, ModelError, StochasticMatrix,
};

use common::*;

fn generator(p: usize) -> impl Strategy<Value = IntensityMatrix> {
    proptest::collection::vec(0.0..3.0f64, p * p).prop_map(move |v| {
        let mut q = Array2::from_shape_vec((p, p), v).unwrap();
        for i in 0..p {
            q[[i, i]] = 0.0;
        }
        IntensityMatrix::new(q).unwrap()
    })
}

fn any_generator() -> impl Strategy<Value = IntensityMatrix> {
    (2usize..=5).prop_flat_map(generator)
}

fn any_model() -> impl Strategy<Value = MixtureModel> {
    (2usize..=4, 1usize..=3, any::<u64>())
        .prop_map(|(p, m, seed)| random_model(&mut ChaCha8Rng::seed_from_u64(seed), p, m))
}

proptest! {
    #[test]
    fn semigroup(q in any_generator(), s in 0.0..5.0f64, t in 0.0..5.0f64) {
        let lhs = matrix_exponential(&q, s + t).unwrap();
        let rhs = matrix_exponential(&q, s).unwrap().compose(&matrix_exponential(&q, t).unwrap());
        prop_assert!(max_abs((lhs.as_array() - rhs.as_array()).iter().copied()) <= 1e-9);
    }

    #[test]
    fn mixture_rows_sum_to_one(model in any_model()) {
        for t in [0.0, 0.1, 1.0, 10.0] {
            let p = mixture_transition(&model, t).unwrap();
            for row in p.as_array().rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-10);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn switching_diagonals_sum_to_identity(model in any_model()) {
        let mut total = Array2::<f64>::zeros((model.n_states(), model.n_states()));
        for m in 0..model.n_regimes() {
            total += &model.switching_diag(m);
        }
        prop_assert!(max_abs((&total - &Array2::<f64>::eye(model.n_states())).iter().copied()) <= 1e-12);
    }

    #[test]
    fn kolmogorov_forward_and_backward(q in any_generator(), t in 1e-3..5.0f64) {
        let h = 1e-5;
        let d = (matrix_exponential(&q, t + h).unwrap().as_array() - matrix_exponential(&q, t - h).unwrap().as_array())
            / (2.0 * h);
        let p = matrix_exponential(&q, t).unwrap();
        let forward = p.as_array().dot(q.as_array());
        let backward = q.as_array().dot(p.as_array());
        prop_assert!(max_abs((&d - &forward).iter().copied()) <= 1e-6);
        prop_assert!(max_abs((&d - &backward).iter().copied()) <= 1e-6);
    }

    #[test]
    fn build_then_embed_round_trip(q in any_generator()) {
        prop_assume!((0..q.dim()).all(|i| q.exit_rate(i) > 0.1));
        let chain = embedded_chain(&q).unwrap();
        let exits = q.exit_rates();
        let rebuilt = build_intensity(&exits, &chain).unwrap();
        let again = embedded_chain(&rebuilt).unwrap();
        for i in 0..q.dim() {
            prop_assert!((rebuilt.exit_rate(i) - exits[i]).abs() <= 4.0 * f64::EPSILON * exits[i]);
            prop_assert_eq!(again.get(i, i), 0.0);
            for j in 0..q.dim() {
                prop_assert!((again.get(i, j) - chain.get(i, j)).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }
}

#[test]
fn reference_model_is_valid() {
    let model = reference();
    assert_eq!((model.n_states(), model.n_regimes()), (3, 2));
    for m in 0..2 {
        let chain = embedded_chain(model.intensity(m)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((chain.get(i, j) - TRUE_CHAIN[m][i][j]).abs() < 1e-15);
            }
            assert!((model.intensity(m).exit_rate(i) - TRUE_Q[m][i]).abs() < 1e-15);
        }
    }
}

#[test]
fn negative_initial_entry_is_rejected() {
    let q = IntensityMatrix::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
    ])
    .unwrap();
    let err = MixtureModel::markov(vec![0.5, 0.6, -0.1], q).unwrap_err();
    assert!(matches!(err, ModelError::ProbabilityRowSum { .. }));
}

#[test]
fn build_intensity_reference_first_row() {
    let q = build_intensity(&TRUE_Q[0], &chain_array(&TRUE_CHAIN[0])).unwrap();
    // diag(q)(Π − I), row 1: (−1/3, 1/3·0.6, 1/3·0.4)
    let expect = [-1.0 / 3.0, 0.2, 2.0 / 15.0];
    for j in 0..3 {
        assert!((q.rate(0, j) - expect[j]).abs() < 1e-15, "{j}");
    }
}

#[test]
fn reference_exponential_against_series() {
    let model = reference();
    for m in 0..2 {
        for t in [0.5, 3.0, 40.0] {
            let got = matrix_exponential(model.intensity(m), t).unwrap();
            let expect = expm_taylor(model.intensity(m).as_array(), t);
            assert!(max_abs((got.as_array() - &expect).iter().copied()) <= 1e-10);
        }
    }
}

#[test]
fn mixture_transition_blends_regimes() {
    let model = reference();
    let t = 1.3;
    let got = mixture_transition(&model, t).unwrap();
    let p1 = expm_taylor(model.intensity(0).as_array(), t);
    let p2 = expm_taylor(model.intensity(1).as_array(), t);
    for i in 0..3 {
        for j in 0..3 {
            let expect = TRUE_S[0][i] * p1[[i, j]] + TRUE_S[1][i] * p2[[i, j]];
            assert!((got.get(i, j) - expect).abs() < 1e-12);
        }
    }
    let identity = mixture_transition(&model, 0.0).unwrap();
    assert_eq!(identity, StochasticMatrix::identity(3));
}

#[test]
fn two_step_matrix_by_hand() {
    let model = reference();
    let got = n_step_matrix(&model, 2).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let mut expect = 0.0;
            for m in 0..2 {
                let c = &TRUE_CHAIN[m];
                expect += TRUE_S[m][i] * (0..3).map(|k| c[i][k] * c[k][j]).sum::<f64>();
            }
            assert!((got.get(i, j) - expect).abs() < 1e-15);
        }
    }
}
