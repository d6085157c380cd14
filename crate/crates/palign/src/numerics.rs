//! Deterministic numeric kernel: probability vectors, unit vectors, a seeded
//! Gaussian sampler, temperature softmax, and the central-difference gradient
//! probe used to vet every analytic backward pass in the crate.

use std::ops::Index;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking logs; each clamp is
/// counted in the caller's diagnostics rather than silently absorbed.
pub const PROB_FLOOR: f64 = 1e-300;

/// Named sub-stream tags so that world construction, data sampling, candidate
/// generation, etc. never share RNG state even though they share one run seed.
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const CANDIDATES: u64 = 3;
    pub const PROMPT_INIT: u64 = 4;
    pub const PROBE: u64 = 5;

    /// Per-epoch batch shuffling stream.
    pub fn shuffle(epoch: usize) -> u64 {
        0x100 + epoch as u64
    }

    /// Per-epoch embedding-augmentation stream (consistency views).
    pub fn augment(epoch: usize) -> u64 {
        0x1_0000_0000 + epoch as u64
    }
}

/// SplitMix64 finalizer; mixes a seed with a stream tag into a fresh seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded RNG wrapper. Identical seeds yield identical streams; `derive`
/// forks an independent stream keyed by a tag without advancing the parent.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, tag: u64) -> Self {
        RngState::new(derive_seed(self.seed, tag))
    }

    /// One standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// One uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.rng);
    }
}

/// Probability vector: entries nonnegative, summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist(Vec<f64>);

impl Dist {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Numeric("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numeric(format!("invalid probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {sum}")));
        }
        Ok(Dist(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Index<usize> for Dist {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Euclidean unit vector (norm 1 within 1e-9). Serialized as a bare array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVec(Vec<f64>);

impl UnitVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !n.is_finite() {
            return Err(Error::Numeric("non-finite vector".into()));
        }
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateVector(format!("norm {n} is not 1")));
        }
        Ok(UnitVec(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &UnitVec) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl TryFrom<Vec<f64>> for UnitVec {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        UnitVec::new(v)
    }
}

impl From<UnitVec> for Vec<f64> {
    fn from(v: UnitVec) -> Vec<f64> {
        v.0
    }
}

/// Dense row-major matrix; just enough linear algebra for the encoder and the
/// linear probe, nothing more.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Config("matrix must be non-empty".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged matrix rows".into()));
        }
        let n = rows.len();
        Ok(Mat {
            rows: n,
            cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// A·x for x of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Aᵀ·u for u of length `rows`.
    pub fn matvec_t(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &ur) in u.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(r, c) * ur;
            }
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Index of the largest entry; ties broken by lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// ln with the shared probability floor; increments `hits` when clamped.
pub fn ln_floor(p: f64, hits: &mut u64) -> f64 {
    if p < PROB_FLOOR {
        *hits += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

/// Denominator guard matching `ln_floor`'s clamp point.
pub fn floor_clamp(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

/// Temperature softmax with max-subtraction: exp(lᵢ/τ)/Σⱼexp(lⱼ/τ).
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Dist> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Numeric(format!(
            "softmax temperature {temperature} must be positive"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Numeric("softmax over empty logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - m) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Dist(exps.into_iter().map(|e| e / sum).collect()))
}

/// v / ‖v‖₂; rejects vectors with norm ≤ 1e-12.
pub fn l2_normalize(v: &[f64]) -> Result<UnitVec> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Numeric("non-finite vector norm".into()));
    }
    if n <= 1e-12 {
        return Err(Error::DegenerateVector(format!("norm {n} too small")));
    }
    Ok(UnitVec(v.iter().map(|x| x / n).collect()))
}

/// n i.i.d. draws from N(mean, std²), advancing `rng` deterministically.
pub fn gauss(rng: &mut RngState, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if !std.is_finite() || std < 0.0 {
        return Err(Error::Config(format!("gauss std {std} must be ≥ 0")));
    }
    if !mean.is_finite() {
        return Err(Error::Config("gauss mean must be finite".into()));
    }
    Ok((0..n).map(|_| mean + std * rng.normal()).collect())
}

/// Central differences (L(p+h·eᵢ) − L(p−h·eᵢ))/(2h) per coordinate.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Config(format!("step size {h} must be positive")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let p0 = probe[i];
        probe[i] = p0 + h;
        let up = loss_fn(&probe);
        probe[i] = p0 - h;
        let down = loss_fn(&probe);
        probe[i] = p0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at finite-difference probe {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let d = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(d[i], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_matches_closed_form() {
        // exp(1)/(exp(1)+1) and 1/(exp(1)+1)
        let d = softmax(&[1.0, 0.0], 1.0).unwrap();
        let e = 1f64.exp();
        assert_abs_diff_eq!(d[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(d[0], 0.7310585786, epsilon = 1e-9);
        assert_abs_diff_eq!(d[1], 0.2689414214, epsilon = 1e-9);

        let d = softmax(&[1.0, 0.0], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(d[0], e2 / (e2 + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(d[0], 0.8807970780, epsilon = 1e-9);
        assert_abs_diff_eq!(d[1], 0.1192029220, epsilon = 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[1.0, 2.0], 0.0), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[1.0, 2.0], -1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_normalize_examples() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(u.as_slice()[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(u.as_slice()[1], 0.8, epsilon = 1e-12);

        let u = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 0.0, 0.0]);

        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn gauss_zero_std_repeats_mean() {
        let mut rng = RngState::new(7);
        let v = gauss(&mut rng, 5, 2.5, 0.0).unwrap();
        assert_eq!(v, vec![2.5; 5]);
    }

    #[test]
    fn gauss_deterministic_in_seed() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        assert_eq!(
            gauss(&mut a, 100, 0.0, 1.0).unwrap(),
            gauss(&mut b, 100, 0.0, 1.0).unwrap()
        );
    }

    #[test]
    fn gauss_moments_large_sample() {
        let mut rng = RngState::new(3);
        let n = 100_000;
        let v = gauss(&mut rng, n, 0.0, 1.0).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "sample std {}", var.sqrt());
    }

    #[test]
    fn gauss_rejects_negative_std() {
        let mut rng = RngState::new(0);
        assert!(matches!(gauss(&mut rng, 3, 0.0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn finite_diff_quadratic() {
        // L = ‖p‖²/2 has gradient p.
        let g = finite_diff_grad(|p| p.iter().map(|x| x * x / 2.0).sum(), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| 3.25, &[0.5, -0.5, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_softmax_ce_matches_analytic() {
        // 3-class linear model z = w (identity features), L = −ln softmax(z)_0.
        let loss = |p: &[f64]| -> f64 {
            let d = softmax(p, 1.0).unwrap();
            -d[0].ln()
        };
        let p = [0.3, -0.7, 1.1];
        let fd = finite_diff_grad(loss, &p, 1e-5).unwrap();
        let f = softmax(&p, 1.0).unwrap();
        let analytic = [f[0] - 1.0, f[1], f[2]];
        let num: f64 = fd
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = analytic.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        assert!(num / den < 1e-4, "rel err {}", num / den);
    }

    #[test]
    fn derive_streams_are_distinct() {
        let root = RngState::new(11);
        let mut a = root.derive(stream::WORLD);
        let mut b = root.derive(stream::DATASET);
        let va = gauss(&mut a, 8, 0.0, 1.0).unwrap();
        let vb = gauss(&mut b, 8, 0.0, 1.0).unwrap();
        assert_ne!(va, vb);
    }

    #[test]
    fn mat_roundtrip_and_transpose() {
        let m = Mat::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(m.matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
        assert_eq!(m.rows(), 3);
        assert_eq!(m.cols(), 2);
    }

    #[test]
    fn dist_rejects_non_normalized() {
        assert!(Dist::new(vec![0.5, 0.4]).is_err());
        assert!(Dist::new(vec![0.5, -0.5, 1.0]).is_err());
        assert!(Dist::new(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..8),
            shift in -10.0f64..10.0,
            tau in 0.05f64..10.0,
        ) {
            let a = softmax(&logits, tau).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = softmax(&shifted, tau).unwrap();
            for i in 0..logits.len() {
                prop_assert!((a[i] - b[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_valid_dist(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..10),
            tau in 1e-3f64..1e3,
        ) {
            let d = softmax(&logits, tau).unwrap();
            let sum: f64 = d.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(d.as_slice().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn softmax_preserves_argmax(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..10),
            tau in 1e-2f64..1e2,
        ) {
            let d = softmax(&logits, tau).unwrap();
            prop_assert_eq!(d.argmax(), argmax(&logits));
        }

        #[test]
        fn normalize_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(once.as_slice()).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn rng_streams_bit_identical(seed in any::<u64>()) {
            let mut a = RngState::new(seed);
            let mut b = RngState::new(seed);
            for _ in 0..32 {
                prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
                prop_assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            }
        }
    }
}
