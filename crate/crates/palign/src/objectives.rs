//! Candidate-label training objectives: supervised CE, naive averaging,
//! PRODEN, CC, LW, PLLCR, PiCO and CAVL.
//!
//! Every loss returns its scalar together with ∂L/∂f for the batch, where f
//! are the posterior outputs. Quantities that supervision treats as constant
//! (confidence rows, leverage weights, consistency targets, pseudo-targets,
//! restricted-argmax selections) are produced by separate "prepare" functions
//! and passed in explicitly, so gradients never flow through them and the
//! finite-difference suite can freeze them at a base point.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::numerics::{self, floor_clamp, ln_floor, Dist, UnitVec};

/// Consistency-view jitter scale (embedding space).
pub const PLLCR_SIGMA_AUG: f64 = 0.1;
/// Number of augmented views per example.
pub const PLLCR_VIEWS: usize = 2;
/// Cap of the consistency weight schedule.
pub const PLLCR_LAMBDA: f64 = 1.0;

/// Prototype EMA momentum.
pub const PICO_GAMMA: f64 = 0.9;
/// Pseudo-target blend: s ← 0.9·s + 0.1·one-hot.
pub const PICO_BLEND: f64 = 0.9;
/// InfoNCE temperature.
pub const PICO_TAU_C: f64 = 0.07;
/// Queue capacity upper bound; the effective capacity is min of this and the
/// train-set size.
pub const PICO_QUEUE_CAP: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ce,
    Naive,
    Proden,
    Cc,
    Lw,
    Pllcr,
    Pico,
    Cavl,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Ce,
        Objective::Naive,
        Objective::Proden,
        Objective::Cc,
        Objective::Lw,
        Objective::Pllcr,
        Objective::Pico,
        Objective::Cavl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Naive => "naive",
            Objective::Proden => "proden",
            Objective::Cc => "cc",
            Objective::Lw => "lw",
            Objective::Pllcr => "pllcr",
            Objective::Pico => "pico",
            Objective::Cavl => "cavl",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective '{s}'")))
    }
}

/// Batch loss: scalar plus ∂L/∂f (one row per batch example, one column per
/// class). `floor_hits` counts probability-floor clamps.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    pub grad_wrt_probs: Vec<Vec<f64>>,
    pub floor_hits: u64,
}

impl LossValue {
    fn zeros(batch: usize, c: usize) -> Self {
        LossValue {
            scalar: 0.0,
            grad_wrt_probs: vec![vec![0.0; c]; batch],
            floor_hits: 0,
        }
    }
}

/// Mean over the batch of −log f_y.
pub fn ce_loss(f: &[Dist], y: &[usize]) -> LossValue {
    let b = f.len();
    let c = f[0].len();
    let mut out = LossValue::zeros(b, c);
    let bf = b as f64;
    for (i, (dist, &label)) in f.iter().zip(y).enumerate() {
        out.scalar -= ln_floor(dist[label], &mut out.floor_hits) / bf;
        out.grad_wrt_probs[i][label] = -1.0 / (bf * floor_clamp(dist[label]));
    }
    out
}

/// Mean over the batch of (1/|Y|)·Σ_{i∈Y} −log f_i: every candidate treated
/// as ground truth.
pub fn naive_avg_loss(f: &[Dist], sets: &[CandidateSet]) -> LossValue {
    let b = f.len();
    let c = f[0].len();
    let mut out = LossValue::zeros(b, c);
    let bf = b as f64;
    for (i, (dist, set)) in f.iter().zip(sets).enumerate() {
        let k = set.len() as f64;
        for &label in set.members() {
            out.scalar -= ln_floor(dist[label], &mut out.floor_hits) / (bf * k);
            out.grad_wrt_probs[i][label] = -1.0 / (bf * k * floor_clamp(dist[label]));
        }
    }
    out
}

/// Row-stochastic per-example label weights supported on candidate sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix {
    rows: Vec<Vec<f64>>,
}

/// f restricted to Y and renormalized; uniform over Y when the candidate
/// mass underflows (counted in the returned fallback counter).
fn restricted_row(dist: &Dist, set: &CandidateSet, c: usize, fallbacks: &mut u64) -> Vec<f64> {
    let mut row = vec![0.0; c];
    let mass: f64 = set.members().iter().map(|&l| dist[l]).sum();
    if mass < numerics::PROB_FLOOR {
        *fallbacks += 1;
        let u = 1.0 / set.len() as f64;
        for &l in set.members() {
            row[l] = u;
        }
    } else {
        for &l in set.members() {
            row[l] = dist[l] / mass;
        }
    }
    row
}

impl ConfidenceMatrix {
    /// Initialize every row from the model's current outputs.
    pub fn init_from_outputs(f_all: &[Dist], sets: &[CandidateSet]) -> (Self, u64) {
        let c = f_all.first().map_or(0, Dist::len);
        let mut fallbacks = 0;
        let rows = f_all
            .iter()
            .zip(sets)
            .map(|(dist, set)| restricted_row(dist, set, c, &mut fallbacks))
            .collect();
        (ConfidenceMatrix { rows }, fallbacks)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// row_i ← f_j/Σ_{k∈Y_i} f_k on Y_i, zero elsewhere. No gradient flows
/// through this update. Returns the fallback count.
pub fn proden_update(
    conf: &mut ConfidenceMatrix,
    f: &[Dist],
    sets: &[CandidateSet],
    indices: &[usize],
) -> u64 {
    let c = f.first().map_or(0, Dist::len);
    let mut fallbacks = 0;
    for ((dist, set), &idx) in f.iter().zip(sets).zip(indices) {
        conf.rows[idx] = restricted_row(dist, set, c, &mut fallbacks);
    }
    fallbacks
}

/// Weighted CE with detached weights: mean over batch of −Σ_i w_i·log f_i.
pub fn proden_loss(conf: &ConfidenceMatrix, f: &[Dist], indices: &[usize]) -> LossValue {
    weighted_ce(f, indices.iter().map(|&i| conf.row(i)))
}

fn weighted_ce<'a>(f: &[Dist], weights: impl Iterator<Item = &'a [f64]>) -> LossValue {
    let b = f.len();
    let c = f[0].len();
    let mut out = LossValue::zeros(b, c);
    let bf = b as f64;
    for (i, (dist, row)) in f.iter().zip(weights).enumerate() {
        for (label, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            out.scalar -= w * ln_floor(dist[label], &mut out.floor_hits) / bf;
            out.grad_wrt_probs[i][label] -= w / (bf * floor_clamp(dist[label]));
        }
    }
    out
}

/// Mean over the batch of −log Σ_{i∈Y} f_i.
pub fn cc_loss(f: &[Dist], sets: &[CandidateSet]) -> LossValue {
    let b = f.len();
    let c = f[0].len();
    let mut out = LossValue::zeros(b, c);
    let bf = b as f64;
    for (i, (dist, set)) in f.iter().zip(sets).enumerate() {
        let mass: f64 = set.members().iter().map(|&l| dist[l]).sum();
        out.scalar -= ln_floor(mass, &mut out.floor_hits) / bf;
        let g = -1.0 / (bf * floor_clamp(mass));
        for &label in set.members() {
            out.grad_wrt_probs[i][label] = g;
        }
    }
    out
}

/// Detached non-candidate leverage weights w̄_j = f_j/Σ_{k∉Y} f_k (uniform
/// over the complement when the non-candidate mass underflows).
pub fn lw_noncand_weights(f: &[Dist], sets: &[CandidateSet]) -> (Vec<Vec<f64>>, u64) {
    let c = f.first().map_or(0, Dist::len);
    let mut fallbacks = 0;
    let rows = f
        .iter()
        .zip(sets)
        .map(|(dist, set)| {
            let mut row = vec![0.0; c];
            let complement = set.complement(c);
            if complement.is_empty() {
                return row;
            }
            let mass: f64 = complement.iter().map(|&l| dist[l]).sum();
            if mass < numerics::PROB_FLOOR {
                fallbacks += 1;
                let u = 1.0 / complement.len() as f64;
                for &l in &complement {
                    row[l] = u;
                }
            } else {
                for &l in &complement {
                    row[l] = dist[l] / mass;
                }
            }
            row
        })
        .collect();
    (rows, fallbacks)
}

/// Candidate term Σ_{i∈Y} w_i·(−log f_i) plus β_lw·Σ_{j∉Y} w̄_j·(−log(1−f_j)),
/// averaged over the batch. Both weight families are detached.
pub fn lw_loss(
    conf: &ConfidenceMatrix,
    f: &[Dist],
    sets: &[CandidateSet],
    indices: &[usize],
    beta_lw: f64,
    noncand_weights: &[Vec<f64>],
) -> LossValue {
    let mut out = proden_loss(conf, f, indices);
    let b = f.len();
    let bf = b as f64;
    for (i, (dist, set)) in f.iter().zip(sets).enumerate() {
        for label in set.complement(dist.len()) {
            let w = noncand_weights[i][label];
            if w == 0.0 {
                continue;
            }
            let one_minus = 1.0 - dist[label];
            out.scalar -= beta_lw * w * ln_floor(one_minus, &mut out.floor_hits) / bf;
            out.grad_wrt_probs[i][label] += beta_lw * w / (bf * floor_clamp(one_minus));
        }
    }
    out
}

/// Consistency weight γ(t) = min(t·λ/T′, λ) with T′ = half the total epochs.
pub fn pllcr_gamma(epoch: usize, total_epochs: usize) -> f64 {
    let t_prime = (total_epochs / 2).max(1) as f64;
    (epoch as f64 / t_prime * PLLCR_LAMBDA).min(PLLCR_LAMBDA)
}

/// Detached pseudo-targets d_i ∝ mean over views of f restricted to Y.
pub fn pllcr_targets(f_views: &[Vec<Dist>], sets: &[CandidateSet]) -> (Vec<Vec<f64>>, u64) {
    let k = f_views.len();
    let b = sets.len();
    let c = f_views[0][0].len();
    let mut fallbacks = 0;
    let mut targets = Vec::with_capacity(b);
    for (i, set) in sets.iter().enumerate() {
        let mut mean = vec![0.0; c];
        for view in f_views {
            for (m, &p) in mean.iter_mut().zip(view[i].as_slice()) {
                *m += p / k as f64;
            }
        }
        let mut row = vec![0.0; c];
        let mass: f64 = set.members().iter().map(|&l| mean[l]).sum();
        if mass < numerics::PROB_FLOOR {
            fallbacks += 1;
            let u = 1.0 / set.len() as f64;
            for &l in set.members() {
                row[l] = u;
            }
        } else {
            for &l in set.members() {
                row[l] = mean[l] / mass;
            }
        }
        targets.push(row);
    }
    (targets, fallbacks)
}

/// PLLCR loss split by output set: supervised non-candidate term on the
/// clean outputs, consistency term on each view's outputs.
#[derive(Debug, Clone)]
pub struct PllcrLoss {
    pub scalar: f64,
    pub grad_clean: Vec<Vec<f64>>,
    pub grad_views: Vec<Vec<Vec<f64>>>,
    pub floor_hits: u64,
}

/// L = L_sup + γ·L_cons with L_sup = mean_{j∉Y} −log(1−f_clean,j) (0 on full
/// sets) and L_cons = (1/K)·Σ_k −Σ_i d_i·log f_view[k],i, both averaged over
/// the batch. `targets` are the detached rows from `pllcr_targets`.
pub fn pllcr_loss(
    f_clean: &[Dist],
    f_views: &[Vec<Dist>],
    targets: &[Vec<f64>],
    sets: &[CandidateSet],
    gamma: f64,
) -> PllcrLoss {
    let b = f_clean.len();
    let c = f_clean[0].len();
    let k = f_views.len();
    let bf = b as f64;
    let mut out = PllcrLoss {
        scalar: 0.0,
        grad_clean: vec![vec![0.0; c]; b],
        grad_views: vec![vec![vec![0.0; c]; b]; k],
        floor_hits: 0,
    };
    for (i, (dist, set)) in f_clean.iter().zip(sets).enumerate() {
        let complement = set.complement(c);
        if complement.is_empty() {
            continue;
        }
        let nc = complement.len() as f64;
        for label in complement {
            let one_minus = 1.0 - dist[label];
            out.scalar -= ln_floor(one_minus, &mut out.floor_hits) / (bf * nc);
            out.grad_clean[i][label] += 1.0 / (bf * nc * floor_clamp(one_minus));
        }
    }
    let kf = k as f64;
    for (v, view) in f_views.iter().enumerate() {
        for (i, dist) in view.iter().enumerate() {
            for (label, &d) in targets[i].iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                out.scalar -= gamma * d * ln_floor(dist[label], &mut out.floor_hits) / (bf * kf);
                out.grad_views[v][i][label] -= gamma * d / (bf * kf * floor_clamp(dist[label]));
            }
        }
    }
    out
}

/// Prototype/pseudo-target disambiguation state.
#[derive(Debug, Clone)]
pub struct PicoState {
    prototypes: Vec<Vec<f64>>,
    pseudo: Vec<Vec<f64>>,
    queue: VecDeque<(Vec<f64>, usize)>,
    capacity: usize,
}

impl PicoState {
    /// Prototypes = l2-normalized class means of embeddings assigned by the
    /// restricted argmax of the initial outputs; pseudo-targets = restricted
    /// normalized outputs. Classes with no assigned member start at zero and
    /// snap to the first embedding that EMA-touches them.
    pub fn init(
        f_all: &[Dist],
        embeddings: &[UnitVec],
        sets: &[CandidateSet],
        c: usize,
    ) -> (Self, u64) {
        let d = embeddings.first().map_or(0, UnitVec::len);
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        let mut fallbacks = 0;
        let mut pseudo = Vec::with_capacity(f_all.len());
        for ((dist, set), z) in f_all.iter().zip(sets).zip(embeddings) {
            let assigned = restricted_argmax(dist.as_slice(), set);
            counts[assigned] += 1;
            for (s, &x) in sums[assigned].iter_mut().zip(z.as_slice()) {
                *s += x;
            }
            pseudo.push(restricted_row(dist, set, c, &mut fallbacks));
        }
        let prototypes = sums
            .into_iter()
            .zip(&counts)
            .map(|(sum, &n)| {
                if n == 0 {
                    sum
                } else {
                    match numerics::l2_normalize(&sum) {
                        Ok(u) => u.into(),
                        Err(_) => vec![0.0; d],
                    }
                }
            })
            .collect();
        (
            PicoState {
                prototypes,
                pseudo,
                queue: VecDeque::new(),
                capacity: PICO_QUEUE_CAP.min(f_all.len()),
            },
            fallbacks,
        )
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn pseudo_targets(&self) -> &[Vec<f64>] {
        &self.pseudo
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Pseudo-target blend for one batch, frozen-state variant: returns the
    /// updated rows and hard assignments without touching prototypes/queue.
    pub fn blended_rows(
        &self,
        embeddings: &[UnitVec],
        sets: &[CandidateSet],
        indices: &[usize],
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(indices.len());
        let mut hard = Vec::with_capacity(indices.len());
        for ((z, set), &idx) in embeddings.iter().zip(sets).zip(indices) {
            let scores: Vec<f64> = self
                .prototypes
                .iter()
                .map(|p| numerics::dot(z.as_slice(), p))
                .collect();
            let assigned = restricted_argmax(&scores, set);
            let mut row = self.pseudo[idx].clone();
            for (label, v) in row.iter_mut().enumerate() {
                let onehot = if label == assigned { 1.0 } else { 0.0 };
                *v = PICO_BLEND * *v + (1.0 - PICO_BLEND) * onehot;
            }
            rows.push(row);
            hard.push(assigned);
        }
        (rows, hard)
    }
}

/// Argmax over the candidate set only; ties break to the lowest class index.
pub fn restricted_argmax(scores: &[f64], set: &CandidateSet) -> usize {
    let mut best = set.members()[0];
    for &label in &set.members()[1..] {
        if scores[label] > scores[best] {
            best = label;
        }
    }
    best
}

/// Classification part of the PiCO step: weighted CE against given
/// pseudo-target rows (detached).
pub fn pico_class_loss(rows: &[Vec<f64>], f: &[Dist]) -> LossValue {
    weighted_ce(f, rows.iter().map(Vec::as_slice))
}

/// One PiCO step over a batch: update pseudo-targets (momentum blend toward
/// the prototype-nearest candidate), compute classification + InfoNCE loss,
/// EMA the prototypes, and push embeddings into the queue. The contrastive
/// term compares against the queue snapshot taken before this batch and is
/// skipped in epoch 0 or while the queue is empty; it touches only the
/// scalar, since embeddings are frozen with respect to the trainable state.
pub fn pico_step(
    state: &mut PicoState,
    f: &[Dist],
    embeddings: &[UnitVec],
    sets: &[CandidateSet],
    indices: &[usize],
    epoch: usize,
) -> LossValue {
    let (rows, hard) = state.blended_rows(embeddings, sets, indices);
    for (&idx, row) in indices.iter().zip(&rows) {
        state.pseudo[idx] = row.clone();
    }
    let mut out = pico_class_loss(&rows, f);

    if epoch > 0 && !state.queue.is_empty() {
        let snapshot: Vec<(Vec<f64>, usize)> = state.queue.iter().cloned().collect();
        let mut total = 0.0;
        let mut counted = 0usize;
        for (z, &label) in embeddings.iter().zip(&hard) {
            let sims: Vec<f64> = snapshot
                .iter()
                .map(|(k, _)| numerics::dot(z.as_slice(), k) / PICO_TAU_C)
                .collect();
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = sims.iter().map(|s| (s - m).exp()).sum();
            let log_denom = m + denom.ln();
            let positives: Vec<usize> = snapshot
                .iter()
                .enumerate()
                .filter(|(_, (_, l))| *l == label)
                .map(|(j, _)| j)
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut li = 0.0;
            for j in positives.iter() {
                li -= sims[*j] - log_denom;
            }
            total += li / positives.len() as f64;
            counted += 1;
        }
        if counted > 0 {
            out.scalar += total / counted as f64;
        }
    }

    for (z, &label) in embeddings.iter().zip(&hard) {
        let proto = &mut state.prototypes[label];
        let mixed: Vec<f64> = proto
            .iter()
            .zip(z.as_slice())
            .map(|(p, x)| PICO_GAMMA * p + (1.0 - PICO_GAMMA) * x)
            .collect();
        if let Ok(u) = numerics::l2_normalize(&mixed) {
            *proto = u.into();
        }
    }
    for (z, &label) in embeddings.iter().zip(&hard) {
        state.queue.push_back((z.as_slice().to_vec(), label));
        while state.queue.len() > state.capacity {
            state.queue.pop_front();
        }
    }
    out
}

/// Detached per-example selection: argmax of the raw logits over candidates.
pub fn cavl_select(logits: &[Vec<f64>], sets: &[CandidateSet]) -> Vec<usize> {
    logits
        .iter()
        .zip(sets)
        .map(|(row, set)| restricted_argmax(row, set))
        .collect()
}

/// CE against the maximum-activation candidate.
pub fn cavl_loss(f: &[Dist], logits: &[Vec<f64>], sets: &[CandidateSet]) -> LossValue {
    ce_loss(f, &cavl_select(logits, sets))
}
