mod common;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixjump::em::{
    e_step, fit_em, m_step, observed_loglik, parameter_distance, path_log_joint, EmInit, EmOptions,
    RegimePosteriors,
};
use mixjump::lrt::{chi_square_quantile, fit_markov};
use mixjump::mle::mle_unrestricted;
use mixjump::model::{matrix_exponential, mixture_transition, MixtureModel};
use mixjump::numeric::softmax;
use mixjump::simulate::{simulate_dataset, SamplePath, Sojourn};
use mixjump::stats::{sufficient_stats, DatasetStats};

use common::*;

fn reference_data(n: usize, seed: u64) -> (Vec<SamplePath>, DatasetStats) {
    let paths = simulate_dataset(&reference(), n, 100.0, seed, true).unwrap();
    let ds = DatasetStats::from_paths(&paths, 3).unwrap();
    (paths, ds)
}

/// Running product kept as `mantissa · 2^exponent`, so no partial product
/// underflows.
struct WideProduct {
    mantissa: f64,
    exponent: i64,
}

impl WideProduct {
    fn mul(&mut self, factor: f64) {
        self.mantissa *= factor;
        let e = self.mantissa.log2().floor();
        self.mantissa /= 2f64.powf(e);
        self.exponent += e as i64;
    }

    fn ln(&self) -> f64 {
        self.mantissa.ln() + self.exponent as f64 * std::f64::consts::LN_2
    }
}

/// `π_i0 s_i0^(m) Π q_ij e^{−q_i d}` walked sojourn by sojourn.
fn density_by_product(model: &MixtureModel, path: &SamplePath, m: usize) -> f64 {
    let q = model.intensity(m);
    let i0 = path.initial_state;
    let mut prod = WideProduct {
        mantissa: 1.0,
        exponent: 0,
    };
    prod.mul(model.initial()[i0] * model.switching_prob(i0, m));
    let mut sojourns = path.events.iter().peekable();
    while let Some(s) = sojourns.next() {
        let next = sojourns.peek().map_or(path.censored.state, |n| n.state);
        prod.mul(q.rate(s.state, next));
        prod.mul((-q.exit_rate(s.state) * s.duration).exp());
    }
    prod.mul((-q.exit_rate(path.censored.state) * path.censored.duration).exp());
    prod.ln()
}

#[test]
fn log_joint_of_long_path_against_product() {
    let model = reference();
    let (paths, _) = reference_data(200, 41);
    let long = paths
        .iter()
        .find(|p| p.events.len() >= 50)
        .expect("a path with 50 jumps");
    let ps = sufficient_stats(long, 3).unwrap();
    let got = path_log_joint(&model, &ps);
    for m in 0..2 {
        let expect = density_by_product(&model, long, m);
        assert!(
            ((got[m] - expect) / expect).abs() <= 1e-9,
            "regime {m}: {} vs {expect}",
            got[m]
        );
    }
}

#[test]
fn log_joint_without_jumps() {
    let model = reference();
    let path = SamplePath {
        id: 0,
        initial_state: 1,
        regime: None,
        events: vec![],
        censored: Sojourn {
            state: 1,
            duration: 7.5,
        },
        horizon: 7.5,
    };
    let got = path_log_joint(&model, &sufficient_stats(&path, 3).unwrap());
    for m in 0..2 {
        let expect = (TRUE_PI[1] * TRUE_S[m][1]).ln() - TRUE_Q[m][1] * 7.5;
        assert!((got[m] - expect).abs() < 1e-14);
    }
}

fn twin_model(s: Array2<f64>) -> MixtureModel {
    let q = reference().intensity(0).clone();
    MixtureModel::new(TRUE_PI.to_vec(), vec![q.clone(), q], s).unwrap()
}

#[test]
fn indistinguishable_regimes_keep_the_prior() {
    let (_, ds) = reference_data(500, 42);
    let model = twin_model(Array2::from_elem((3, 2), 0.5));
    for ps in ds.paths().iter().take(20) {
        let lj = path_log_joint(&model, ps);
        assert_eq!(lj[0], lj[1]);
    }
    let post = e_step(&model, &ds).unwrap();
    assert!(post.as_array().iter().all(|&w| w == 0.5));
}

#[test]
fn certain_prior_gives_certain_posterior() {
    let (_, ds) = reference_data(500, 43);
    let mut s = Array2::from_elem((3, 2), 0.5);
    s[[0, 0]] = 1.0;
    s[[0, 1]] = 0.0;
    let model = MixtureModel::new(TRUE_PI.to_vec(), reference().intensities().to_vec(), s).unwrap();
    let post = e_step(&model, &ds).unwrap();
    for (k, ps) in ds.paths().iter().enumerate() {
        if ps.initial == 0 {
            assert_eq!(post.path(k).to_vec(), vec![1.0, 0.0]);
        }
    }
}

#[test]
fn posteriors_ignore_shifts_and_the_initial_law() {
    let (_, ds) = reference_data(300, 44);
    let model = reference();
    let other = model.with_initial(vec![0.7, 0.2, 0.1]).unwrap();
    let a = e_step(&model, &ds).unwrap();
    let b = e_step(&other, &ds).unwrap();
    assert!(max_abs((a.as_array() - b.as_array()).iter().copied()) <= 1e-14);
    for ps in ds.paths().iter().take(50) {
        // on a 2^-30 grid every shift below is exact, so only the
        // normalization itself is under test
        let lj: Vec<f64> = path_log_joint(&model, ps)
            .iter()
            .map(|v| (v * 2f64.powi(30)).round() / 2f64.powi(30))
            .collect();
        let base = softmax(&lj).unwrap();
        for c in [-1e4, -3.5, 12.0, 700.0] {
            let shifted: Vec<f64> = lj.iter().map(|v| v + c).collect();
            let moved = softmax(&shifted).unwrap();
            assert!(max_abs(base.iter().zip(&moved).map(|(x, y)| x - y)) <= 1e-14);
        }
    }
}

#[test]
fn true_parameters_recover_labels() {
    let (paths, ds) = reference_data(5_000, 45);
    let post = e_step(&reference(), &ds).unwrap();
    let (mut mass, mut count, mut correct) = (0.0, 0.0, 0usize);
    for (k, path) in paths.iter().enumerate() {
        let w = post.path(k);
        let guess = if w[0] >= w[1] { 0 } else { 1 };
        correct += usize::from(Some(guess) == path.regime);
        if path.regime == Some(0) {
            mass += w[0];
            count += 1.0;
        }
    }
    assert!(mass / count > 0.5);
    assert!(correct as f64 / paths.len() as f64 > 0.5);
}

#[test]
fn uniform_posteriors_give_identical_regimes() {
    let (_, ds) = reference_data(1_000, 46);
    let post = RegimePosteriors::from_array(Array2::from_elem((ds.n_paths(), 2), 0.5));
    let est = m_step(
        &post,
        &ds,
        false,
        &reference().with_initial(ds.initial_frequencies()).unwrap(),
        None,
    )
    .unwrap();
    assert_eq!(est.model.intensity(0), est.model.intensity(1));
    assert!(est.carried.is_empty());
}

#[test]
fn hard_posteriors_match_labeled_mle() {
    let (_, ds) = reference_data(1_000, 47);
    let post = RegimePosteriors::from_labels(ds.labels().unwrap(), 2);
    let previous = reference().with_initial(ds.initial_frequencies()).unwrap();
    let est = m_step(&post, &ds, false, &previous, None).unwrap();
    assert_eq!(est.model, mle_unrestricted(&ds, 2).unwrap().model);
}

#[test]
fn one_step_from_truth_moves_little() {
    let (_, ds) = reference_data(20_000, 48);
    let step = |start: &MixtureModel| {
        let start = start.with_initial(ds.initial_frequencies()).unwrap();
        let post = e_step(&start, &ds).unwrap();
        let next = m_step(&post, &ds, false, &start, None).unwrap().model;
        parameter_distance(&start, &next, false)
    };
    let distant = random_model(&mut ChaCha8Rng::seed_from_u64(48), 3, 2);
    assert!(step(&reference()) < step(&distant));
}

#[test]
fn loglik_is_invariant_under_regime_relabelling() {
    let (_, ds) = reference_data(1_000, 49);
    let model = random_model(&mut ChaCha8Rng::seed_from_u64(49), 3, 2);
    let swapped = model.permute_regimes(&[1, 0]);
    let (a, b) = (observed_loglik(&model, &ds), observed_loglik(&swapped, &ds));
    assert!((a - b).abs() <= 1e-9 * a.abs());
    let three = random_model(&mut ChaCha8Rng::seed_from_u64(50), 3, 3);
    let rotated = three.permute_regimes(&[2, 0, 1]);
    let (a, b) = (observed_loglik(&three, &ds), observed_loglik(&rotated, &ds));
    assert!((a - b).abs() <= 1e-9 * a.abs());
}

#[test]
fn permuted_start_gives_permuted_fit() {
    let (_, ds) = reference_data(2_000, 51);
    let start = random_model(&mut ChaCha8Rng::seed_from_u64(51), 3, 2);
    let options = |m: MixtureModel| EmOptions::new(EmInit::Model(m)).tolerance(1e-9);
    let a = fit_em(&ds, &options(start.clone())).unwrap();
    let b = fit_em(&ds, &options(start.permute_regimes(&[1, 0]))).unwrap();
    let b_back = b.model.permute_regimes(&[1, 0]);
    assert!(parameter_distance(&a.model, &b_back, false) <= 1e-6);
    assert!((a.loglik - b.loglik).abs() <= 1e-6);
}

#[test]
fn em_beats_markov_on_mixture_data() {
    let (_, ds) = reference_data(2_000, 52);
    let markov = fit_markov(&ds).unwrap();
    for restricted in [false, true] {
        let fit = fit_em(
            &ds,
            &EmOptions::new(EmInit::PerturbedMarkov {
                n_regimes: 2,
                seed: 52,
            })
            .restricted(restricted),
        )
        .unwrap();
        assert!(fit.converged);
        assert!(fit.loglik >= markov.loglik);
        for w in fit.trace.windows(2) {
            assert!(w[1].loglik >= w[0].loglik - 1e-8);
        }
    }
}

#[test]
fn two_regime_fit_of_markov_data_collapses() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let truth = MixtureModel::markov(vec![1.0 / 3.0; 3], random_intensity(&mut rng, 3)).unwrap();
    let paths = simulate_dataset(&truth, 2_000, 20.0, 53, false).unwrap();
    let ds = DatasetStats::from_paths(&paths, 3).unwrap();
    let markov = fit_markov(&ds).unwrap();
    // the likelihood is nearly flat along the null, so EM crawls
    let options = EmOptions::new(EmInit::PerturbedMarkov {
        n_regimes: 2,
        seed: 53,
    })
    .max_iterations(20_000);
    let fit = fit_em(&ds, &options).unwrap();
    assert!(fit.converged);

    // the extra regime only absorbs sampling noise: 2·gap is a null LRT draw
    let gap = fit.loglik - markov.loglik;
    assert!(
        gap >= -1e-6 && 2.0 * gap <= chi_square_quantile(0.999, 9),
        "gap {gap}"
    );

    // and the mixture behaves like the Markov fit
    for t in [0.5, 2.0] {
        let a = mixture_transition(&fit.model, t).unwrap();
        let b = matrix_exponential(markov.model.intensity(0), t).unwrap();
        assert!(max_abs((a.as_array() - b.as_array()).iter().copied()) <= 0.02);
    }

    // occupation-weighted regime rates reproduce the pooled rates exactly
    // up to rounding, at every M-step
    let post = e_step(&fit.model, &ds).unwrap();
    let mut occupation = Array2::<f64>::zeros((2, 3));
    for (k, ps) in ds.paths().iter().enumerate() {
        for m in 0..2 {
            for i in 0..3 {
                occupation[[m, i]] += post.path(k)[m] * ps.occupation[i];
            }
        }
    }
    let next = m_step(&post, &ds, false, &fit.model, None).unwrap().model;
    for i in 0..3 {
        for j in (0..3).filter(|&j| j != i) {
            let blend = (0..2)
                .map(|m| occupation[[m, i]] * next.intensity(m).rate(i, j))
                .sum::<f64>()
                / occupation.column(i).sum();
            let pooled = markov.model.intensity(0).rate(i, j);
            assert!((blend - pooled).abs() <= 1e-10 * pooled);
        }
    }
}

#[test]
#[ignore = "unattainable: with free regimes the mixture fits sampling noise, so the loglik \
            sits a chi-square(9)/2 draw above the Markov fit (about 8 here), not within 1e-3"]
fn two_regime_loglik_matches_markov_on_markov_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let truth = MixtureModel::markov(vec![1.0 / 3.0; 3], random_intensity(&mut rng, 3)).unwrap();
    let paths = simulate_dataset(&truth, 2_000, 20.0, 53, false).unwrap();
    let ds = DatasetStats::from_paths(&paths, 3).unwrap();
    let markov = fit_markov(&ds).unwrap();
    let fit = fit_em(
        &ds,
        &EmOptions::new(EmInit::PerturbedMarkov {
            n_regimes: 2,
            seed: 53,
        }),
    )
    .unwrap();
    assert!(
        (fit.loglik - markov.loglik).abs() <= 1e-3,
        "gap {}",
        fit.loglik - markov.loglik
    );
}
