#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mixjump::io::parse_model;
use mixjump::model::{IntensityMatrix, MixtureModel, StochasticMatrix};

pub const REFERENCE_JSON: &str = include_str!("../../../../models/reference.json");

pub fn reference() -> MixtureModel {
    parse_model(REFERENCE_JSON).unwrap().model
}

pub const TRUE_PI: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
pub const TRUE_Q: [[f64; 3]; 2] = [[1.0 / 3.0, 0.4, 0.5], [0.5, 0.4, 1.0 / 3.0]];
/// `TRUE_S[m][i]`.
pub const TRUE_S: [[f64; 3]; 2] = [[0.5, 0.25, 0.75], [0.5, 0.75, 0.25]];
pub const TRUE_CHAIN: [[[f64; 3]; 3]; 2] = [
    [[0.0, 0.6, 0.4], [0.5, 0.0, 0.5], [0.4, 0.6, 0.0]],
    [[0.0, 0.8, 0.2], [0.5, 0.0, 0.5], [0.2, 0.8, 0.0]],
];

pub fn random_intensity(rng: &mut ChaCha8Rng, p: usize) -> IntensityMatrix {
    let mut q = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            if i != j {
                q[[i, j]] = rng.random_range(0.0..2.0);
            }
        }
    }
    IntensityMatrix::new(q).unwrap()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let head: f64 = row[..n - 1].iter().sum();
    row[n - 1] = 1.0 - head;
    row
}

pub fn random_model(rng: &mut ChaCha8Rng, p: usize, m: usize) -> MixtureModel {
    let pi = random_simplex(rng, p);
    let qs = (0..m).map(|_| random_intensity(rng, p)).collect();
    let mut s = Array2::zeros((p, m));
    for i in 0..p {
        for (k, v) in random_simplex(rng, m).into_iter().enumerate() {
            s[[i, k]] = v;
        }
    }
    MixtureModel::new(pi, qs, s).unwrap()
}

/// `e^{Qt}` by scaling and squaring a truncated Taylor series.
pub fn expm_taylor(q: &Array2<f64>, t: f64) -> Array2<f64> {
    let p = q.nrows();
    let a = q * t;
    let norm = a
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    while norm / 2f64.powi(squarings) > 0.25 {
        squarings += 1;
    }
    let a = a / 2f64.powi(squarings);
    let mut term = Array2::<f64>::eye(p);
    let mut sum = Array2::<f64>::eye(p);
    for k in 1..40 {
        term = term.dot(&a) / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

pub fn chain_array(rows: &[[f64; 3]; 3]) -> StochasticMatrix {
    StochasticMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Chi-square upper tail `∫_x^∞ f_k` by adaptive Simpson quadrature, with
/// `Γ(k/2)` from its integer and half-integer closed forms.
pub fn chi_square_sf_quadrature(x: f64, k: usize) -> f64 {
    let half = k as f64 / 2.0;
    let gamma = if k % 2 == 0 {
        (1..(k / 2)).map(|i| i as f64).product::<f64>()
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut a = 0.5;
        while a < half - 0.25 {
            g *= a;
            a += 1.0;
        }
        g
    };
    let norm = 2f64.powf(half) * gamma;
    let density = move |t: f64| {
        if t <= 0.0 {
            0.0
        } else {
            t.powf(half - 1.0) * (-t / 2.0).exp() / norm
        }
    };
    // the k = 1 density is singular at 0; substitute t = u² there
    if k == 1 {
        let g = move |u: f64| 2.0 * u * density(u * u);
        let lo = x.max(0.0).sqrt();
        return simpson(&g, lo, lo + 40.0, 1e-15);
    }
    let lo = x.max(0.0);
    simpson(&density, lo, lo + 400.0 + 40.0 * k as f64, 1e-15)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, eps, 60)
}

pub fn max_abs(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |a, v| a.max(v.abs()))
}
