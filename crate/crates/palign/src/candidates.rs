//! Candidate-label generation under two ambiguity models — uniform negative
//! flipping and instance-dependent admission by zero-shot confidence — plus a
//! statistics audit over generated sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Dist, RngState};

/// Sorted, non-empty set of class indices. Always contains the example's
/// true label by construction of both generators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CandidateSet {
    members: Vec<usize>,
}

impl CandidateSet {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("candidate set must be non-empty".into()));
        }
        members.sort_unstable();
        members.dedup();
        Ok(CandidateSet { members })
    }

    pub fn singleton(label: usize) -> Self {
        CandidateSet {
            members: vec![label],
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    pub fn is_full(&self, c: usize) -> bool {
        self.members.len() == c
    }

    /// Class indices in 0..c that are not candidates, ascending.
    pub fn complement(&self, c: usize) -> Vec<usize> {
        (0..c).filter(|l| !self.contains(*l)).collect()
    }
}

impl TryFrom<Vec<usize>> for CandidateSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        CandidateSet::new(v)
    }
}

impl From<CandidateSet> for Vec<usize> {
    fn from(s: CandidateSet) -> Vec<usize> {
        s.members
    }
}

/// Audit summary of a batch of candidate sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmbiguityStats {
    /// Fraction of negative (example, label) pairs present in their sets.
    pub flip_rate: f64,
    pub avg_set_size: f64,
    /// Fraction of sets containing the true label; must be 1.0.
    pub coverage: f64,
}

/// Uniform model: each negative label enters independently with probability q.
pub fn gen_uniform(
    true_labels: &[usize],
    c: usize,
    q: f64,
    rng: &mut RngState,
) -> Result<Vec<CandidateSet>> {
    if !(0.0..=1.0).contains(&q) || !q.is_finite() {
        return Err(Error::Config(format!("q {q} outside [0,1]")));
    }
    if c < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut sets = Vec::with_capacity(true_labels.len());
    for &y in true_labels {
        if y >= c {
            return Err(Error::Config(format!("label {y} out of range for C={c}")));
        }
        let mut members = Vec::with_capacity(c);
        for label in 0..c {
            if label == y || rng.uniform() < q {
                members.push(label);
            }
        }
        sets.push(CandidateSet { members });
    }
    Ok(sets)
}

/// Instance-dependent model: pool all negative (example, label) pairs, rank
/// by zero-shot confidence descending, admit the global top ⌊q·N·(C−1)⌋ into
/// their examples' sets, then union with the true label. Ties at the cutoff
/// break by (example index, label index) ascending.
pub fn gen_instance_dependent(
    zeroshot: &[Dist],
    true_labels: &[usize],
    q: f64,
) -> Result<Vec<CandidateSet>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("q {q} outside (0,1)")));
    }
    if zeroshot.len() != true_labels.len() {
        return Err(Error::Config("zeroshot/labels length mismatch".into()));
    }
    let n = true_labels.len();
    if n == 0 {
        return Err(Error::Config("no examples".into()));
    }
    let c = zeroshot[0].len();
    if c < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut pairs = Vec::with_capacity(n * (c - 1));
    for (i, dist) in zeroshot.iter().enumerate() {
        if dist.len() != c {
            return Err(Error::Config(format!(
                "zero-shot posterior {i} has {} classes, expected {c}",
                dist.len()
            )));
        }
        let y = true_labels[i];
        if y >= c {
            return Err(Error::Config(format!("label {y} out of range for C={c}")));
        }
        for label in 0..c {
            if label != y {
                pairs.push((dist[label], i, label));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite confidences")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let admit = (q * (n * (c - 1)) as f64).floor() as usize;
    let mut sets: Vec<Vec<usize>> = true_labels.iter().map(|&y| vec![y]).collect();
    for &(_, i, label) in pairs.iter().take(admit) {
        sets[i].push(label);
    }
    sets.into_iter().map(CandidateSet::new).collect()
}

/// flip_rate = Σ(|Yᵢ|−1)/(N·(C−1)); avg_set_size = mean |Yᵢ|; coverage =
/// fraction of sets containing their true label.
pub fn ambiguity_stats(
    sets: &[CandidateSet],
    true_labels: &[usize],
    c: usize,
) -> Result<AmbiguityStats> {
    if sets.len() != true_labels.len() {
        return Err(Error::Config("sets/labels length mismatch".into()));
    }
    if sets.is_empty() {
        return Err(Error::Config("no candidate sets".into()));
    }
    let n = sets.len() as f64;
    let extra: usize = sets.iter().map(|s| s.len() - 1).sum();
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let covered = sets
        .iter()
        .zip(true_labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(AmbiguityStats {
        flip_rate: extra as f64 / (n * (c - 1) as f64),
        avg_set_size: total as f64 / n,
        coverage: covered as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels(n: usize, c: usize) -> Vec<usize> {
        (0..n).map(|i| i % c).collect()
    }

    #[test]
    fn uniform_q0_gives_singletons() {
        let mut rng = RngState::new(1);
        let ys = labels(50, 5);
        let sets = gen_uniform(&ys, 5, 0.0, &mut rng).unwrap();
        for (s, &y) in sets.iter().zip(&ys) {
            assert_eq!(s.members(), &[y]);
        }
    }

    #[test]
    fn uniform_q1_gives_full_space() {
        let mut rng = RngState::new(2);
        let ys = labels(20, 4);
        let sets = gen_uniform(&ys, 4, 1.0, &mut rng).unwrap();
        for s in &sets {
            assert!(s.is_full(4));
        }
    }

    #[test]
    fn uniform_flip_rate_concentrates() {
        let mut rng = RngState::new(3);
        let c = 10;
        let ys = labels(10_000, c);
        let sets = gen_uniform(&ys, c, 0.3, &mut rng).unwrap();
        let stats = ambiguity_stats(&sets, &ys, c).unwrap();
        assert!(
            (0.285..=0.315).contains(&stats.flip_rate),
            "flip rate {}",
            stats.flip_rate
        );
        assert_eq!(stats.coverage, 1.0);
    }

    #[test]
    fn uniform_rejects_bad_q() {
        let mut rng = RngState::new(4);
        assert!(matches!(
            gen_uniform(&[0], 3, 1.5, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            gen_uniform(&[0], 3, -0.1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn instance_dependent_tiny_q_gives_singletons() {
        let ys = vec![0, 1];
        let zs = vec![
            softmax(&[1.0, 0.5, 0.2], 1.0).unwrap(),
            softmax(&[0.1, 0.9, 0.3], 1.0).unwrap(),
        ];
        // ⌊1e-9·2·2⌋ = 0 admitted pairs
        let sets = gen_instance_dependent(&zs, &ys, 1e-9).unwrap();
        assert_eq!(sets[0].members(), &[0]);
        assert_eq!(sets[1].members(), &[1]);
    }

    #[test]
    fn instance_dependent_admits_single_top_pair() {
        // Two examples, C=3: four negative pairs; cutoff ⌊0.25·4⌋ = 1 admits
        // only the globally most confident negative pair.
        let ys = vec![0, 1];
        let zs = vec![
            Dist::new(vec![0.2, 0.7, 0.1]).unwrap(), // negatives: (0,1)=0.7, (0,2)=0.1
            Dist::new(vec![0.3, 0.4, 0.3]).unwrap(), // negatives: (1,0)=0.3, (1,2)=0.3
        ];
        let sets = gen_instance_dependent(&zs, &ys, 0.25).unwrap();
        assert_eq!(sets[0].members(), &[0, 1]);
        assert_eq!(sets[1].members(), &[1]);
    }

    #[test]
    fn instance_dependent_breaks_ties_by_example_then_label() {
        // All four negative confidences equal; one admission goes to the
        // lowest (example, label) pair, i.e. example 0, label 1.
        let ys = vec![0, 1];
        let zs = vec![
            Dist::new(vec![0.5, 0.25, 0.25]).unwrap(),
            Dist::new(vec![0.25, 0.5, 0.25]).unwrap(),
        ];
        let sets = gen_instance_dependent(&zs, &ys, 0.25).unwrap();
        assert_eq!(sets[0].members(), &[0, 1]);
        assert_eq!(sets[1].members(), &[1]);
    }

    #[test]
    fn instance_dependent_exact_admission_count() {
        let c = 10;
        let n = 500;
        let ys = labels(n, c);
        let mut rng = RngState::new(9);
        let zs: Vec<Dist> = (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                softmax(&logits, 1.0).unwrap()
            })
            .collect();
        for q in [0.1, 0.3, 0.5] {
            let sets = gen_instance_dependent(&zs, &ys, q).unwrap();
            let admitted: usize = sets.iter().map(|s| s.len() - 1).sum();
            let expect = (q * (n * (c - 1)) as f64).floor() as usize;
            assert_eq!(admitted, expect, "q={q}");
            let stats = ambiguity_stats(&sets, &ys, c).unwrap();
            assert_eq!(stats.coverage, 1.0);
        }
    }

    #[test]
    fn stats_hand_count() {
        let sets = vec![
            CandidateSet::new(vec![0, 1]).unwrap(),
            CandidateSet::new(vec![1]).unwrap(),
        ];
        let stats = ambiguity_stats(&sets, &[0, 1], 3).unwrap();
        assert_abs_diff_eq!(stats.flip_rate, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.avg_set_size, 1.5, epsilon = 1e-12);
        assert_eq!(stats.coverage, 1.0);
    }

    #[test]
    fn stats_extremes() {
        let ys = labels(30, 10);
        let singles: Vec<CandidateSet> =
            ys.iter().map(|&y| CandidateSet::singleton(y)).collect();
        let s = ambiguity_stats(&singles, &ys, 10).unwrap();
        assert_eq!((s.flip_rate, s.avg_set_size, s.coverage), (0.0, 1.0, 1.0));

        let full: Vec<CandidateSet> = ys
            .iter()
            .map(|_| CandidateSet::new((0..10).collect()).unwrap())
            .collect();
        let s = ambiguity_stats(&full, &ys, 10).unwrap();
        assert_eq!((s.flip_rate, s.avg_set_size, s.coverage), (1.0, 10.0, 1.0));
    }

    #[test]
    fn generators_deterministic() {
        let ys = labels(100, 6);
        let a = gen_uniform(&ys, 6, 0.4, &mut RngState::new(5)).unwrap();
        let b = gen_uniform(&ys, 6, 0.4, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn uniform_always_covers_truth(
            seed in any::<u64>(),
            q in 0.0f64..=1.0,
            n in 1usize..80,
            c in 2usize..12,
        ) {
            let ys = labels(n, c);
            let sets = gen_uniform(&ys, c, q, &mut RngState::new(seed)).unwrap();
            for (s, &y) in sets.iter().zip(&ys) {
                prop_assert!(s.contains(y));
                prop_assert!(s.members().iter().all(|&l| l < c));
            }
        }

        #[test]
        fn uniform_mean_size_within_3_sigma(seed in any::<u64>(), q in 0.05f64..0.95) {
            let c = 10;
            let n = 10_000usize;
            let ys = labels(n, c);
            let sets = gen_uniform(&ys, c, q, &mut RngState::new(seed)).unwrap();
            let stats = ambiguity_stats(&sets, &ys, c).unwrap();
            let expect = 1.0 + q * (c - 1) as f64;
            let sigma = ((c - 1) as f64 * q * (1.0 - q) / n as f64).sqrt();
            prop_assert!(
                (stats.avg_set_size - expect).abs() <= 3.0 * sigma,
                "avg {} expect {} sigma {}", stats.avg_set_size, expect, sigma
            );
        }

        #[test]
        fn instance_dependent_covers_and_counts(seed in any::<u64>(), q in 0.01f64..0.99) {
            let c = 6;
            let n = 60usize;
            let ys = labels(n, c);
            let mut rng = RngState::new(seed);
            let zs: Vec<Dist> = (0..n)
                .map(|_| {
                    let logits: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                    softmax(&logits, 1.0).unwrap()
                })
                .collect();
            let sets = gen_instance_dependent(&zs, &ys, q).unwrap();
            let admitted: usize = sets.iter().map(|s| s.len() - 1).sum();
            prop_assert_eq!(admitted, (q * (n * (c - 1)) as f64).floor() as usize);
            for (s, &y) in sets.iter().zip(&ys) {
                prop_assert!(s.contains(y));
            }
        }
    }
}
