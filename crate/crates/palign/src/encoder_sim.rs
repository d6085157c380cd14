//! Synthetic frozen dual encoder standing in for a pre-trained VLM.
//!
//! Text side: a fixed linear projection of the mean over context tokens plus
//! one class token, l2-normalized. Image side: class-conditional unit vectors
//! sampled around each class's latent direction. A "handcrafted" context of
//! controllable quality (oracle context plus scaled noise) provides the
//! zero-shot prior that the alignment regularizer leans on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::numerics::{self, gauss, l2_normalize, softmax, stream, Dist, Mat, RngState, UnitVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Number of classes.
    pub c: usize,
    /// Image/text embedding dimension.
    pub d: usize,
    /// Token dimension.
    pub e: usize,
    /// Learnable context length.
    pub m: usize,
    /// Handcrafted/oracle context length.
    pub m_h: usize,
    /// Image noise scale around the latent class direction.
    pub sigma_img: f64,
    /// Handcrafted-context degradation: H_hc = H* + rho·noise.
    pub rho: f64,
    /// Softmax temperature of the posterior.
    pub tau: f64,
    /// Train examples per class.
    pub shots: usize,
    /// Test examples per class.
    pub test_per_class: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            c: 10,
            d: 64,
            e: 32,
            m: 16,
            m_h: 8,
            sigma_img: 0.35,
            rho: 0.5,
            tau: 0.01,
            shots: 16,
            test_per_class: 100,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 2 {
            return Err(Error::Config(format!("world.c {} must be ≥ 2", self.c)));
        }
        for (name, v) in [
            ("world.d", self.d),
            ("world.e", self.e),
            ("world.m", self.m),
            ("world.m_h", self.m_h),
            ("world.shots", self.shots),
            ("world.test_per_class", self.test_per_class),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} {v} must be ≥ 1")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("world.tau {} must be > 0", self.tau)));
        }
        if !self.sigma_img.is_finite() || self.sigma_img < 0.0 {
            return Err(Error::Config(format!(
                "world.sigma_img {} must be ≥ 0",
                self.sigma_img
            )));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::Config(format!("world.rho {} must be ≥ 0", self.rho)));
        }
        Ok(())
    }
}

/// Frozen encoder: projection, class tokens, oracle context (hidden from
/// learners; used only to generate data) and the degraded handcrafted
/// context. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    c: usize,
    d: usize,
    e: usize,
    tau: f64,
    w: Mat,
    class_tokens: Vec<Vec<f64>>,
    oracle_context: Vec<Vec<f64>>,
    handcrafted_context: Vec<Vec<f64>>,
}

impl World {
    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn e(&self) -> usize {
        self.e
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn class_tokens(&self) -> &[Vec<f64>] {
        &self.class_tokens
    }

    pub fn oracle_context(&self) -> &[Vec<f64>] {
        &self.oracle_context
    }

    pub fn handcrafted_context(&self) -> &[Vec<f64>] {
        &self.handcrafted_context
    }

    /// Assemble a world from explicit parts. Exists for tests and for
    /// cross-checking against externally generated fixtures.
    pub fn from_parts(
        w: Mat,
        class_tokens: Vec<Vec<f64>>,
        oracle_context: Vec<Vec<f64>>,
        handcrafted_context: Vec<Vec<f64>>,
        tau: f64,
    ) -> Result<Self> {
        let c = class_tokens.len();
        let d = w.rows();
        let e = w.cols();
        if c < 2 {
            return Err(Error::Config("need at least 2 class tokens".into()));
        }
        if oracle_context.is_empty() || handcrafted_context.is_empty() {
            return Err(Error::Config("contexts must be non-empty".into()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("tau {tau} must be > 0")));
        }
        for tok in class_tokens
            .iter()
            .chain(&oracle_context)
            .chain(&handcrafted_context)
        {
            if tok.len() != e {
                return Err(Error::Config(format!(
                    "token dim {} does not match projection cols {e}",
                    tok.len()
                )));
            }
        }
        Ok(World {
            c,
            d,
            e,
            tau,
            w,
            class_tokens,
            oracle_context,
            handcrafted_context,
        })
    }
}

/// The only trainable state in prompt mode: M context tokens of dimension e.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    context_tokens: Vec<Vec<f64>>,
}

impl PromptParams {
    pub fn init(rng: &mut RngState, m: usize, e: usize, std: f64) -> Result<Self> {
        if m < 1 || e < 1 {
            return Err(Error::Config("prompt dims must be ≥ 1".into()));
        }
        let mut context_tokens = Vec::with_capacity(m);
        for _ in 0..m {
            context_tokens.push(gauss(rng, e, 0.0, std)?);
        }
        Ok(PromptParams { context_tokens })
    }

    pub fn from_tokens(context_tokens: Vec<Vec<f64>>) -> Result<Self> {
        if context_tokens.is_empty() || context_tokens[0].is_empty() {
            return Err(Error::Config("prompt must have ≥ 1 token".into()));
        }
        let e = context_tokens[0].len();
        if context_tokens.iter().any(|t| t.len() != e) {
            return Err(Error::Config("ragged prompt tokens".into()));
        }
        if context_tokens.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite prompt entry".into()));
        }
        Ok(PromptParams { context_tokens })
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.context_tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.context_tokens
    }

    pub fn m(&self) -> usize {
        self.context_tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub image: UnitVec,
    pub label: usize,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestExample {
    pub image: UnitVec,
    pub label: usize,
}

/// Unit-norm image embeddings with labels; train examples carry candidate
/// sets (singletons until a generator fills them in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDataset {
    pub train: Vec<TrainExample>,
    pub test: Vec<TestExample>,
}

impl PartialDataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|ex| ex.label).collect()
    }

    /// Replace candidate sets in example order.
    pub fn set_candidates(&mut self, sets: Vec<CandidateSet>) -> Result<()> {
        if sets.len() != self.train.len() {
            return Err(Error::Config("candidate count mismatch".into()));
        }
        for (ex, set) in self.train.iter_mut().zip(sets) {
            if !set.contains(ex.label) {
                return Err(Error::Config(format!(
                    "candidate set missing true label {}",
                    ex.label
                )));
            }
            ex.candidates = set;
        }
        Ok(())
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        for ex in &self.train {
            if ex.label >= c || !ex.candidates.contains(ex.label) {
                return Err(Error::Config("train example violates invariants".into()));
            }
            if ex.candidates.members().iter().any(|&l| l >= c) {
                return Err(Error::Config("candidate label out of range".into()));
            }
        }
        if self.test.iter().any(|ex| ex.label >= c) {
            return Err(Error::Config("test label out of range".into()));
        }
        Ok(())
    }

    pub fn dump_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset: {e}")))
    }
}

/// Build the frozen world: projection entries ~ N(0, 1/√e), class tokens and
/// oracle context ~ N(0,1), handcrafted context = oracle + rho·N(0,1).
/// The degradation noise is drawn even when rho = 0 so that worlds differing
/// only in rho share every other draw.
pub fn make_world(cfg: &WorldConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let mut rng = RngState::new(seed).derive(stream::WORLD);
    let w_std = 1.0 / (cfg.e as f64).sqrt();
    let mut w_rows = Vec::with_capacity(cfg.d);
    for _ in 0..cfg.d {
        w_rows.push(gauss(&mut rng, cfg.e, 0.0, w_std)?);
    }
    let mut class_tokens = Vec::with_capacity(cfg.c);
    for _ in 0..cfg.c {
        class_tokens.push(gauss(&mut rng, cfg.e, 0.0, 1.0)?);
    }
    let mut oracle_context = Vec::with_capacity(cfg.m_h);
    for _ in 0..cfg.m_h {
        oracle_context.push(gauss(&mut rng, cfg.e, 0.0, 1.0)?);
    }
    let mut handcrafted_context = Vec::with_capacity(cfg.m_h);
    for tok in &oracle_context {
        let noise = gauss(&mut rng, cfg.e, 0.0, 1.0)?;
        handcrafted_context.push(
            tok.iter()
                .zip(&noise)
                .map(|(t, n)| t + cfg.rho * n)
                .collect(),
        );
    }
    World::from_parts(
        Mat::from_rows(w_rows)?,
        class_tokens,
        oracle_context,
        handcrafted_context,
        cfg.tau,
    )
}

/// l2_normalize(W · mean(context ∪ {class token})).
pub fn text_embed(world: &World, context: &[Vec<f64>], class_idx: usize) -> Result<UnitVec> {
    if class_idx >= world.c {
        return Err(Error::Config(format!(
            "class {class_idx} out of range for C={}",
            world.c
        )));
    }
    if context.is_empty() {
        return Err(Error::Config("context must be non-empty".into()));
    }
    let k = (context.len() + 1) as f64;
    let mut mean = world.class_tokens[class_idx].clone();
    for tok in context {
        if tok.len() != world.e {
            return Err(Error::Config("context token dim mismatch".into()));
        }
        for (m, t) in mean.iter_mut().zip(tok) {
            *m += t;
        }
    }
    for m in mean.iter_mut() {
        *m /= k;
    }
    l2_normalize(&world.w.matvec(&mean))
}

/// Per-class text embeddings for a fixed context, for reuse across a batch.
#[derive(Debug, Clone)]
pub struct TextCache {
    embeds: Vec<UnitVec>,
}

impl TextCache {
    pub fn new(world: &World, context: &[Vec<f64>]) -> Result<Self> {
        let embeds = (0..world.c)
            .map(|i| text_embed(world, context, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextCache { embeds })
    }

    pub fn embeds(&self) -> &[UnitVec] {
        &self.embeds
    }

    /// Cosine similarities image·text per class.
    pub fn sims(&self, image: &UnitVec) -> Vec<f64> {
        self.embeds.iter().map(|t| t.dot(image)).collect()
    }

    /// Predicted class: argmax similarity, ties to the lowest index.
    pub fn predict(&self, image: &UnitVec) -> usize {
        numerics::argmax(&self.sims(image))
    }
}

/// softmax over classes of cos(image, text_i)/τ.
pub fn class_posterior(world: &World, context: &[Vec<f64>], image: &UnitVec) -> Result<Dist> {
    let cache = TextCache::new(world, context)?;
    softmax(&cache.sims(image), world.tau)
}

/// Class-conditional sampling: image = l2_normalize(u_i + σ_img·ε) where u_i
/// is the oracle-context text embedding of class i. Candidate sets start as
/// singletons; a generator fills them in afterwards.
pub fn sample_dataset(world: &World, cfg: &WorldConfig, seed: u64) -> Result<PartialDataset> {
    cfg.validate()?;
    if cfg.c != world.c {
        return Err(Error::Config("config/world class count mismatch".into()));
    }
    let mut rng = RngState::new(seed).derive(stream::DATASET);
    let latents = (0..world.c)
        .map(|i| text_embed(world, &world.oracle_context, i))
        .collect::<Result<Vec<_>>>()?;
    let mut draw = |u: &UnitVec, rng: &mut RngState| -> Result<UnitVec> {
        let eps = gauss(rng, world.d, 0.0, 1.0)?;
        if cfg.sigma_img == 0.0 {
            return Ok(u.clone());
        }
        let noisy: Vec<f64> = u
            .as_slice()
            .iter()
            .zip(&eps)
            .map(|(x, n)| x + cfg.sigma_img * n)
            .collect();
        l2_normalize(&noisy)
    };
    let mut train = Vec::with_capacity(world.c * cfg.shots);
    for (label, u) in latents.iter().enumerate() {
        for _ in 0..cfg.shots {
            train.push(TrainExample {
                image: draw(u, &mut rng)?,
                label,
                candidates: CandidateSet::singleton(label),
            });
        }
    }
    let mut test = Vec::with_capacity(world.c * cfg.test_per_class);
    for (label, u) in latents.iter().enumerate() {
        for _ in 0..cfg.test_per_class {
            test.push(TestExample {
                image: draw(u, &mut rng)?,
                label,
            });
        }
    }
    Ok(PartialDataset { train, test })
}

/// Zero-shot accuracy of the handcrafted context on a probe set with the
/// given noise scale. The probe noise is drawn once from the seed and only
/// re-scaled, so accuracy is a deterministic, nearly monotone function of σ.
pub fn probe_zero_shot(world: &World, cfg: &WorldConfig, sigma: f64, seed: u64) -> Result<f64> {
    let mut rng = RngState::new(seed).derive(stream::PROBE);
    let latents = (0..world.c)
        .map(|i| text_embed(world, &world.oracle_context, i))
        .collect::<Result<Vec<_>>>()?;
    let mut probes = Vec::with_capacity(world.c * cfg.test_per_class);
    for (label, u) in latents.iter().enumerate() {
        for _ in 0..cfg.test_per_class {
            probes.push((label, u.clone(), gauss(&mut rng, world.d, 0.0, 1.0)?));
        }
    }
    let cache = TextCache::new(world, &world.handcrafted_context)?;
    let mut correct = 0usize;
    for (label, u, eps) in &probes {
        let image = if sigma == 0.0 {
            u.clone()
        } else {
            let noisy: Vec<f64> = u
                .as_slice()
                .iter()
                .zip(eps)
                .map(|(x, n)| x + sigma * n)
                .collect();
            l2_normalize(&noisy)?
        };
        if cache.predict(&image) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Bisect σ_img ∈ [0, 4] (≤ 30 iterations) until handcrafted zero-shot
/// accuracy on a fresh probe set lands inside `target`.
pub fn calibrate_sigma(
    world: &World,
    cfg: &WorldConfig,
    target: (f64, f64),
    seed: u64,
) -> Result<f64> {
    let (lo, hi) = target;
    let chance = 1.0 / world.c as f64;
    if !(lo < hi) || hi > 1.0 {
        return Err(Error::Calibration(format!(
            "target [{lo}, {hi}] is not a valid accuracy interval"
        )));
    }
    if lo <= chance {
        return Err(Error::Calibration(format!(
            "target [{lo}, {hi}] reaches chance level {chance}; unattainable"
        )));
    }
    let acc_at = |sigma: f64| probe_zero_shot(world, cfg, sigma, seed);
    let a0 = acc_at(0.0)?;
    if a0 < lo {
        return Err(Error::Calibration(format!(
            "noiseless accuracy {a0} already below target [{lo}, {hi}]"
        )));
    }
    if (lo..=hi).contains(&a0) {
        return Ok(0.0);
    }
    let mut s_lo = 0.0; // accuracy above hi
    let mut s_hi = 4.0;
    let a4 = acc_at(s_hi)?;
    if a4 > hi {
        return Err(Error::Calibration(format!(
            "accuracy {a4} at max noise still above target [{lo}, {hi}]"
        )));
    }
    if (lo..=hi).contains(&a4) {
        return Ok(s_hi);
    }
    for _ in 0..30 {
        let mid = 0.5 * (s_lo + s_hi);
        let a = acc_at(mid)?;
        if (lo..=hi).contains(&a) {
            return Ok(mid);
        }
        if a > hi {
            s_lo = mid;
        } else {
            s_hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "no σ in [0, 4] reached [{lo}, {hi}] within 30 bisection steps"
    )))
}
