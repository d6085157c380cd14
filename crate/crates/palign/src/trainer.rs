//! Training loop: analytic backpropagation from any batch loss through the
//! softmax/cosine/normalization/projection chain into the learnable context
//! tokens (prompt mode) or into a linear head over frozen image embeddings
//! (probe mode), with momentum SGD under a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignConfig, MixedPosterior};
use crate::candidates::{gen_instance_dependent, gen_uniform, CandidateSet};
use crate::encoder_sim::{
    make_world, sample_dataset, PartialDataset, PromptParams, TestExample, TextCache, World,
    WorldConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{self, softmax, stream, Dist, RngState, UnitVec};
use crate::objectives::{
    self, ConfidenceMatrix, LossValue, Objective, PicoState, PLLCR_SIGMA_AUG, PLLCR_VIEWS,
};

/// Prompt tokens start from N(0, 0.02²).
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Learning-rate grid for the linear-probe baseline.
pub const DEFAULT_PROBE_GRID: [f64; 7] = [2.5, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateMode {
    Uniform,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub objective: Objective,
    pub use_alignment: bool,
    pub align: AlignConfig,
    pub q: f64,
    pub candidate_mode: CandidateMode,
    pub seed: u64,
    pub world: WorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.002,
            lr_min: 1e-5,
            epochs: 50,
            batch: 32,
            momentum: 0.9,
            objective: Objective::Proden,
            use_alignment: true,
            align: AlignConfig::default(),
            q: 0.1,
            candidate_mode: CandidateMode::Uniform,
            seed: 0,
            world: WorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || !self.lr_min.is_finite() || !(self.lr0 > self.lr_min) {
            return Err(Error::Config(format!(
                "lr0 {} must exceed lr_min {}",
                self.lr0, self.lr_min
            )));
        }
        if self.lr_min < 0.0 {
            return Err(Error::Config(format!("lr_min {} must be ≥ 0", self.lr_min)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0,1)",
                self.momentum
            )));
        }
        match self.candidate_mode {
            CandidateMode::Uniform => {
                if !(0.0..=1.0).contains(&self.q) || !self.q.is_finite() {
                    return Err(Error::Config(format!("q out of range: {}", self.q)));
                }
            }
            CandidateMode::Instance => {
                if !(self.q > 0.0 && self.q < 1.0) {
                    return Err(Error::Config(format!(
                        "q out of range: {} (instance mode needs 0 < q < 1)",
                        self.q
                    )));
                }
            }
        }
        self.align.validate()?;
        self.world.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagCounters {
    /// Probability-floor clamps hit while taking logs.
    pub prob_floor: u64,
    /// Underflow fallbacks to uniform rows in confidence-style updates.
    pub conf_fallback: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub zero_shot_acc: f64,
    pub lr: f64,
    pub diag: DiagCounters,
}

/// lr_min + ½(lr0 − lr_min)(1 + cos(π·t/(epochs−1))); a single epoch runs at
/// lr0 throughout.
pub fn cosine_lr(t: usize, cfg: &TrainConfig) -> f64 {
    cosine_lr_from(t, cfg.lr0, cfg.lr_min, cfg.epochs)
}

fn cosine_lr_from(t: usize, lr0: f64, lr_min: f64, epochs: usize) -> f64 {
    if epochs == 1 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

/// v ← momentum·v + grad; params ← params − lr·v.
pub fn sgd_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

/// Per-class text embeddings plus the pre-normalization norms needed by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct TextForward {
    pub embeds: Vec<UnitVec>,
    pub raw_norms: Vec<f64>,
}

pub fn text_forward(world: &World, tokens: &[Vec<f64>]) -> Result<TextForward> {
    if tokens.is_empty() {
        return Err(Error::Config("context must be non-empty".into()));
    }
    let pool = (tokens.len() + 1) as f64;
    let mut embeds = Vec::with_capacity(world.c());
    let mut raw_norms = Vec::with_capacity(world.c());
    for class_idx in 0..world.c() {
        let mut mean = world.class_tokens()[class_idx].clone();
        for tok in tokens {
            for (m, t) in mean.iter_mut().zip(tok) {
                *m += t;
            }
        }
        for m in mean.iter_mut() {
            *m /= pool;
        }
        let raw = world.w().matvec(&mean);
        let n = numerics::norm(&raw);
        embeds.push(numerics::l2_normalize(&raw)?);
        raw_norms.push(n);
    }
    Ok(TextForward { embeds, raw_norms })
}

/// Cosine logits and τ-softmax posteriors for a batch of images.
pub fn posteriors(
    world: &World,
    tf: &TextForward,
    images: &[&UnitVec],
) -> Result<(Vec<Vec<f64>>, Vec<Dist>)> {
    let mut logits = Vec::with_capacity(images.len());
    let mut probs = Vec::with_capacity(images.len());
    for image in images {
        let sims: Vec<f64> = tf.embeds.iter().map(|t| t.dot(image)).collect();
        probs.push(softmax(&sims, world.tau())?);
        logits.push(sims);
    }
    Ok((logits, probs))
}

/// ∂L/∂logits through the temperature softmax:
/// ds_j = (1/τ)·f_j·(g_j − Σ_l g_l·f_l).
fn softmax_backward(probs: &Dist, dl_df: &[f64], tau: f64) -> Vec<f64> {
    let inner: f64 = probs.as_slice().iter().zip(dl_df).map(|(f, g)| f * g).sum();
    probs
        .as_slice()
        .iter()
        .zip(dl_df)
        .map(|(f, g)| f * (g - inner) / tau)
        .collect()
}

/// Accumulator for ∂L/∂(text embedding) contributions; several image sets
/// (clean batch plus augmented views) can be folded in before the chain back
/// to the context tokens.
pub struct PromptGrad<'w> {
    world: &'w World,
    dt: Vec<Vec<f64>>,
}

impl<'w> PromptGrad<'w> {
    pub fn new(world: &'w World) -> Self {
        PromptGrad {
            world,
            dt: vec![vec![0.0; world.d()]; world.c()],
        }
    }

    pub fn add_batch(&mut self, probs: &[Dist], dl_df: &[Vec<f64>], images: &[&UnitVec]) {
        for ((f, g), image) in probs.iter().zip(dl_df).zip(images) {
            let ds = softmax_backward(f, g, self.world.tau());
            for (j, &dsj) in ds.iter().enumerate() {
                if dsj == 0.0 {
                    continue;
                }
                for (acc, &x) in self.dt[j].iter_mut().zip(image.as_slice()) {
                    *acc += dsj * x;
                }
            }
        }
    }

    /// Chain through normalization ((I − t·tᵀ)/‖a‖), the projection (Wᵀ) and
    /// mean pooling. Every context token receives the same gradient because
    /// pooling weighs each of the M+1 prompt positions equally.
    pub fn into_token_grads(self, tf: &TextForward, m: usize) -> Vec<Vec<f64>> {
        let mut dm_sum = vec![0.0; self.world.e()];
        for (j, dt_j) in self.dt.iter().enumerate() {
            let t = tf.embeds[j].as_slice();
            let proj = numerics::dot(dt_j, t);
            let da: Vec<f64> = dt_j
                .iter()
                .zip(t)
                .map(|(dv, tv)| (dv - proj * tv) / tf.raw_norms[j])
                .collect();
            let dm = self.world.w().matvec_t(&da);
            for (s, v) in dm_sum.iter_mut().zip(&dm) {
                *s += v;
            }
        }
        let scale = 1.0 / (m as f64 + 1.0);
        let per_token: Vec<f64> = dm_sum.into_iter().map(|v| v * scale).collect();
        vec![per_token; m]
    }
}

/// Exact analytic ∂L/∂(context tokens) for one batch.
pub fn backward_prompt(
    world: &World,
    tf: &TextForward,
    images: &[&UnitVec],
    probs: &[Dist],
    dl_df: &[Vec<f64>],
    m: usize,
) -> Vec<Vec<f64>> {
    let mut acc = PromptGrad::new(world);
    acc.add_batch(probs, dl_df, images);
    acc.into_token_grads(tf, m)
}

/// Linear-probe head: rows of [weights | bias], one per class; posterior is
/// the τ=1 softmax of W·x + b.
pub fn head_logits(rows: &[Vec<f64>], image: &UnitVec) -> Vec<f64> {
    let d = image.len();
    rows.iter()
        .map(|r| numerics::dot(&r[..d], image.as_slice()) + r[d])
        .collect()
}

fn head_posteriors(rows: &[Vec<f64>], images: &[&UnitVec]) -> Result<(Vec<Vec<f64>>, Vec<Dist>)> {
    let mut logits = Vec::with_capacity(images.len());
    let mut probs = Vec::with_capacity(images.len());
    for image in images {
        let z = head_logits(rows, image);
        probs.push(softmax(&z, 1.0)?);
        logits.push(z);
    }
    Ok((logits, probs))
}

/// Gradient accumulator for the linear head, shaped like its rows.
pub struct HeadGrad {
    dw: Vec<Vec<f64>>,
}

impl HeadGrad {
    pub fn new(c: usize, d: usize) -> Self {
        HeadGrad {
            dw: vec![vec![0.0; d + 1]; c],
        }
    }

    pub fn add_batch(&mut self, probs: &[Dist], dl_df: &[Vec<f64>], images: &[&UnitVec]) {
        let d = images.first().map_or(0, |x| x.len());
        for ((f, g), image) in probs.iter().zip(dl_df).zip(images) {
            let dz = softmax_backward(f, g, 1.0);
            for (j, &dzj) in dz.iter().enumerate() {
                if dzj == 0.0 {
                    continue;
                }
                for (k, &x) in image.as_slice().iter().enumerate() {
                    self.dw[j][k] += dzj * x;
                }
                self.dw[j][d] += dzj;
            }
        }
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.dw
    }
}

/// Fraction of test examples whose top-similarity class matches the label;
/// ties break to the lowest index.
pub fn evaluate(world: &World, context: &[Vec<f64>], test: &[TestExample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let cache = TextCache::new(world, context)?;
    let correct = test
        .iter()
        .filter(|ex| cache.predict(&ex.image) == ex.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn head_accuracy(rows: &[Vec<f64>], test: &[TestExample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let correct = test
        .iter()
        .filter(|ex| numerics::argmax(&head_logits(rows, &ex.image)) == ex.label)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// World plus dataset with candidate sets assigned: everything a run needs.
pub struct Benchmark {
    pub world: World,
    pub dataset: PartialDataset,
}

/// Build world, sample the dataset and fill in candidate sets, all derived
/// deterministically from `cfg.seed` via disjoint sub-streams.
pub fn build_benchmark(cfg: &TrainConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let world = make_world(&cfg.world, cfg.seed)?;
    let mut dataset = sample_dataset(&world, &cfg.world, cfg.seed)?;
    let labels = dataset.train_labels();
    let sets = match cfg.candidate_mode {
        CandidateMode::Uniform => {
            let mut rng = RngState::new(cfg.seed).derive(stream::CANDIDATES);
            gen_uniform(&labels, cfg.world.c, cfg.q, &mut rng)?
        }
        CandidateMode::Instance => {
            let cache = TextCache::new(&world, world.handcrafted_context())?;
            let zeroshot = dataset
                .train
                .iter()
                .map(|ex| softmax(&cache.sims(&ex.image), world.tau()))
                .collect::<Result<Vec<_>>>()?;
            gen_instance_dependent(&zeroshot, &labels, cfg.q)?
        }
    };
    dataset.set_candidates(sets)?;
    Ok(Benchmark { world, dataset })
}

enum Params {
    Prompt(PromptParams),
    Head(Vec<Vec<f64>>),
}

impl Params {
    fn rows_mut(&mut self) -> &mut [Vec<f64>] {
        match self {
            Params::Prompt(p) => p.tokens_mut(),
            Params::Head(rows) => rows,
        }
    }

    fn shape(&self) -> (usize, usize) {
        let rows = match self {
            Params::Prompt(p) => p.tokens(),
            Params::Head(rows) => rows,
        };
        (rows.len(), rows[0].len())
    }
}

/// Train the learnable context tokens under the configured objective.
pub fn train_run(cfg: &TrainConfig) -> Result<Vec<MetricsRecord>> {
    let bench = build_benchmark(cfg)?;
    let mut rng = RngState::new(cfg.seed).derive(stream::PROMPT_INIT);
    let prompt = PromptParams::init(&mut rng, cfg.world.m, cfg.world.e, PROMPT_INIT_STD)?;
    run_training(cfg, &bench, Params::Prompt(prompt), cfg.lr0)
}

/// Train a zero-initialized linear head on the frozen image embeddings for
/// every learning rate in the grid; return the run with the best final test
/// accuracy (ties go to the earlier grid entry).
pub fn linear_probe_run(cfg: &TrainConfig, lr_grid: &[f64]) -> Result<Vec<MetricsRecord>> {
    if lr_grid.is_empty() {
        return Err(Error::Config("linear probe needs a non-empty lr grid".into()));
    }
    let bench = build_benchmark(cfg)?;
    let mut best: Option<Vec<MetricsRecord>> = None;
    for &lr0 in lr_grid {
        if !(lr0 > cfg.lr_min) {
            return Err(Error::Config(format!(
                "probe lr {lr0} must exceed lr_min {}",
                cfg.lr_min
            )));
        }
        let head = Params::Head(vec![vec![0.0; bench.world.d() + 1]; bench.world.c()]);
        let records = run_training(cfg, &bench, head, lr0)?;
        let better = match &best {
            None => true,
            Some(b) => records.last().unwrap().test_acc > b.last().unwrap().test_acc,
        };
        if better {
            best = Some(records);
        }
    }
    Ok(best.unwrap())
}

fn run_training(
    cfg: &TrainConfig,
    bench: &Benchmark,
    mut params: Params,
    lr0: f64,
) -> Result<Vec<MetricsRecord>> {
    let world = &bench.world;
    let ds = &bench.dataset;
    let n = ds.train.len();
    let c = world.c();
    if n == 0 {
        return Err(Error::Config("empty train set".into()));
    }
    let all_images: Vec<&UnitVec> = ds.train.iter().map(|ex| &ex.image).collect();
    let all_sets: Vec<CandidateSet> = ds.train.iter().map(|ex| ex.candidates.clone()).collect();
    let all_labels = ds.train_labels();

    let forward = |params: &Params, images: &[&UnitVec]| -> Result<(Vec<Vec<f64>>, Vec<Dist>, Option<TextForward>)> {
        match params {
            Params::Prompt(p) => {
                let tf = text_forward(world, p.tokens())?;
                let (logits, probs) = posteriors(world, &tf, images)?;
                Ok((logits, probs, Some(tf)))
            }
            Params::Head(rows) => {
                let (logits, probs) = head_posteriors(rows, images)?;
                Ok((logits, probs, None))
            }
        }
    };

    // Objective state initialized from the model output before training.
    let (_, probs0, _) = forward(&params, &all_images)?;
    let mut init_fallbacks = 0u64;
    let mut conf = match cfg.objective {
        Objective::Proden | Objective::Lw => {
            let (conf, fb) = ConfidenceMatrix::init_from_outputs(&probs0, &all_sets);
            init_fallbacks += fb;
            Some(conf)
        }
        _ => None,
    };
    let mut pico = match cfg.objective {
        Objective::Pico => {
            let embeddings: Vec<UnitVec> =
                ds.train.iter().map(|ex| ex.image.clone()).collect();
            let (state, fb) = PicoState::init(&probs0, &embeddings, &all_sets, c);
            init_fallbacks += fb;
            Some(state)
        }
        _ => None,
    };

    // The handcrafted branch is frozen, so its restricted posterior per train
    // example is computed once and reused every epoch.
    let hc_targets: Option<Vec<MixedPosterior>> = if cfg.use_alignment {
        let cache = TextCache::new(world, world.handcrafted_context())?;
        let mut hits = 0u64;
        let targets = ds
            .train
            .iter()
            .map(|ex| {
                let g = softmax(&cache.sims(&ex.image), world.tau())?;
                Ok(alignment::restrict_posterior(&g, &ex.candidates, &mut hits))
            })
            .collect::<Result<Vec<_>>>()?;
        init_fallbacks += hits;
        Some(targets)
    } else {
        None
    };

    let zero_shot_acc = evaluate(world, world.handcrafted_context(), &ds.test)?;

    let (rows, cols) = params.shape();
    let mut velocity = vec![vec![0.0; cols]; rows];
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut carry_fallbacks = init_fallbacks;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr_from(epoch, lr0, cfg.lr_min, cfg.epochs);
        let alpha = cfg.align.alpha_at(epoch);
        let gamma = objectives::pllcr_gamma(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        RngState::new(cfg.seed)
            .derive(stream::shuffle(epoch))
            .shuffle(&mut order);
        let mut aug_rng = RngState::new(cfg.seed).derive(stream::augment(epoch));

        let mut loss_sum = 0.0;
        let mut diag = DiagCounters {
            prob_floor: 0,
            conf_fallback: carry_fallbacks,
        };
        carry_fallbacks = 0;

        for batch_idx in order.chunks(cfg.batch) {
            let images: Vec<&UnitVec> = batch_idx.iter().map(|&i| all_images[i]).collect();
            let sets: Vec<CandidateSet> =
                batch_idx.iter().map(|&i| all_sets[i].clone()).collect();
            let labels: Vec<usize> = batch_idx.iter().map(|&i| all_labels[i]).collect();
            let (logits, probs, tf) = forward(&params, &images)?;

            // Augmented views share the epoch stream and are drawn in batch
            // order regardless of objective state, keeping runs replayable.
            let mut view_data: Option<(Vec<Vec<UnitVec>>, Vec<Vec<Dist>>)> = None;
            let pll: LossValue;
            let mut pllcr_extra: Option<(Vec<Vec<Vec<f64>>>, f64)> = None;

            match cfg.objective {
                Objective::Ce => {
                    pll = objectives::ce_loss(&probs, &labels);
                }
                Objective::Naive => {
                    pll = objectives::naive_avg_loss(&probs, &sets);
                }
                Objective::Proden => {
                    let cm = conf.as_mut().unwrap();
                    pll = objectives::proden_loss(cm, &probs, batch_idx);
                    diag.conf_fallback +=
                        objectives::proden_update(cm, &probs, &sets, batch_idx);
                }
                Objective::Cc => {
                    pll = objectives::cc_loss(&probs, &sets);
                }
                Objective::Lw => {
                    let cm = conf.as_mut().unwrap();
                    let (wbar, fb) = objectives::lw_noncand_weights(&probs, &sets);
                    diag.conf_fallback += fb;
                    pll = objectives::lw_loss(cm, &probs, &sets, batch_idx, 1.0, &wbar);
                    diag.conf_fallback +=
                        objectives::proden_update(cm, &probs, &sets, batch_idx);
                }
                Objective::Pllcr => {
                    let mut views = Vec::with_capacity(PLLCR_VIEWS);
                    let mut view_probs = Vec::with_capacity(PLLCR_VIEWS);
                    for _ in 0..PLLCR_VIEWS {
                        let mut imgs = Vec::with_capacity(images.len());
                        for image in &images {
                            let eps =
                                numerics::gauss(&mut aug_rng, world.d(), 0.0, 1.0)?;
                            let jittered: Vec<f64> = image
                                .as_slice()
                                .iter()
                                .zip(&eps)
                                .map(|(x, n)| x + PLLCR_SIGMA_AUG * n)
                                .collect();
                            imgs.push(numerics::l2_normalize(&jittered)?);
                        }
                        let refs: Vec<&UnitVec> = imgs.iter().collect();
                        let (_, vp) = match (&params, &tf) {
                            (Params::Prompt(_), Some(tf)) => posteriors(world, tf, &refs)?,
                            (Params::Head(rows), _) => head_posteriors(rows, &refs)?,
                            _ => unreachable!(),
                        };
                        views.push(imgs);
                        view_probs.push(vp);
                    }
                    let (targets, fb) = objectives::pllcr_targets(&view_probs, &sets);
                    diag.conf_fallback += fb;
                    let lv =
                        objectives::pllcr_loss(&probs, &view_probs, &targets, &sets, gamma);
                    pll = LossValue {
                        scalar: lv.scalar,
                        grad_wrt_probs: lv.grad_clean,
                        floor_hits: lv.floor_hits,
                    };
                    pllcr_extra = Some((lv.grad_views, gamma));
                    view_data = Some((views, view_probs));
                }
                Objective::Pico => {
                    let st = pico.as_mut().unwrap();
                    let embeddings: Vec<UnitVec> =
                        images.iter().map(|&x| x.clone()).collect();
                    pll = objectives::pico_step(st, &probs, &embeddings, &sets, batch_idx, epoch);
                }
                Objective::Cavl => {
                    pll = objectives::cavl_loss(&probs, &logits, &sets);
                }
            }

            let total = if let Some(targets) = &hc_targets {
                let mut hits = 0u64;
                let p_tilde = batch_idx
                    .iter()
                    .zip(&probs)
                    .map(|(&i, f)| {
                        let p_s = alignment::restrict_posterior(f, &all_sets[i], &mut hits);
                        alignment::mix_posteriors(&p_s, &targets[i], alpha)
                    })
                    .collect::<Result<Vec<_>>>()?;
                diag.conf_fallback += hits;
                let al = alignment::align_loss(&p_tilde, &probs);
                alignment::total_loss(&pll, &al, cfg.align.beta)
            } else {
                pll
            };
            if !total.scalar.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            diag.prob_floor += total.floor_hits;
            loss_sum += total.scalar * batch_idx.len() as f64;

            let grads = match (&params, &tf) {
                (Params::Prompt(p), Some(tf)) => {
                    let mut acc = PromptGrad::new(world);
                    acc.add_batch(&probs, &total.grad_wrt_probs, &images);
                    if let (Some((grad_views, _)), Some((views, view_probs))) =
                        (&pllcr_extra, &view_data)
                    {
                        for (k, imgs) in views.iter().enumerate() {
                            let refs: Vec<&UnitVec> = imgs.iter().collect();
                            acc.add_batch(&view_probs[k], &grad_views[k], &refs);
                        }
                    }
                    acc.into_token_grads(tf, p.m())
                }
                (Params::Head(_), _) => {
                    let mut acc = HeadGrad::new(c, world.d());
                    acc.add_batch(&probs, &total.grad_wrt_probs, &images);
                    if let (Some((grad_views, _)), Some((views, view_probs))) =
                        (&pllcr_extra, &view_data)
                    {
                        for (k, imgs) in views.iter().enumerate() {
                            let refs: Vec<&UnitVec> = imgs.iter().collect();
                            acc.add_batch(&view_probs[k], &grad_views[k], &refs);
                        }
                    }
                    acc.into_rows()
                }
                _ => unreachable!(),
            };
            sgd_step(params.rows_mut(), &grads, &mut velocity, lr, cfg.momentum);
        }

        let test_acc = match &params {
            Params::Prompt(p) => evaluate(world, p.tokens(), &ds.test)?,
            Params::Head(rows) => head_accuracy(rows, &ds.test)?,
        };
        records.push(MetricsRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            test_acc,
            zero_shot_acc,
            lr,
            diag,
        });
    }
    Ok(records)
}
