//! Two-stage training: a full-computation teacher, then a spotter-equipped
//! student distilled from it.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::corpus::{CorpusConfig, CorpusSplits, FeatureFile, FeatureRole, SplitSizes, SyntheticSample, SyntheticWorld};
use crate::encoders::BamProviders;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::harness::evaluate;
use crate::losses::{
    boundary_loss_var, distillation_loss_var, make_qav_target, qav_loss_var, selection_loss, total_loss, BudgetConfig,
    LossComponents, LossWeights,
};
use crate::model::{InputDims, Model, ModelConfig, PreparedSample};
use crate::params::{Adam, Gradients, ParamId};
use crate::spotter::{GateConfig, GateMode};
use crate::tensor::Mat;

/// Switches for the ablation study; a disabled term is dropped from the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub qav: bool,
    pub sel: bool,
    pub ftd: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self { qav: true, sel: true, ftd: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub per_step_weight: f64,
    pub gate: GateConfig,
    /// Highlight target widening, as a fraction of the span length per side.
    pub highlight_extension: f64,
    pub losses: LossToggles,
    /// A student checkpoint is preferred only while its validation selected
    /// fraction stays within `budget_slack` of the budget. Without any such
    /// epoch the closest one wins.
    pub budget_slack: f64,
    /// Dropout rate inside the trainable cross-modal and span modules.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 5e-4,
            lr_decay: 1.0,
            patience: 10,
            seed: 0,
            weights: LossWeights::default(),
            per_step_weight: 1.0,
            gate: GateConfig::default(),
            highlight_extension: 0.25,
            losses: LossToggles::default(),
            budget_slack: 0.05,
            dropout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn budget(&self) -> BudgetConfig {
        BudgetConfig { budget: self.gate.budget, steps: self.gate.steps, per_step_weight: self.per_step_weight }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.highlight_extension >= 0.0) || !(self.per_step_weight >= 0.0) {
            return Err(Error::Config("highlight extension and per-step weight must be non-negative".into()));
        }
        self.weights.validate()?;
        self.gate.validate()
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub splits: SplitSizes,
    pub corpus_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            vocab_size: self.corpus.vocab_size,
            raw_dim: self.corpus.raw_dim,
            bam_dims: [self.corpus.background_dim, self.corpus.appearance_dim, self.corpus.motion_dim],
        }
    }
}

/// The model for an experiment: seeded parameters, with the synthetic
/// world's word vectors as the frozen embedding table.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let mut model = Model::new(&cfg.model, cfg.dims(), cfg.train.seed)?;
    let table = SyntheticWorld::new(cfg.corpus_seed, &cfg.corpus)?.word_vectors(cfg.model.embed_dim);
    let file = FeatureFile::from_mat("word-vectors", FeatureRole::Embedding, &table);
    model.query.load_embeddings(&mut model.store, &file)?;
    model.store.round_to_f32();
    Ok(model)
}

/// Frozen-encoder outputs for every split.
pub struct PreparedSplits {
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

pub fn prepare_samples(model: &Model, samples: &[SyntheticSample]) -> Result<Vec<PreparedSample>> {
    let providers = BamProviders::stored(model.dims.bam_dims);
    samples.iter().map(|s| model.prepare(s, &providers)).collect()
}

pub fn prepare_splits(model: &Model, splits: &CorpusSplits) -> Result<PreparedSplits> {
    Ok(PreparedSplits {
        train: prepare_samples(model, &splits.train)?,
        val: prepare_samples(model, &splits.val)?,
        test: prepare_samples(model, &splits.test)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub vmr: f64,
    pub sel: f64,
    pub ftd: f64,
    pub val_r1: f64,
    /// Hard selected fraction under the training gates.
    pub train_selected_fraction: f64,
    pub val_selected_fraction: f64,
    pub temperature: f64,
}

pub struct TrainOutcome {
    /// The model holding the best checkpoint's parameters.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Set when training stopped on a non-finite value; the checkpoint is then
    /// the last good one.
    pub diverged: Option<String>,
}

/// Per-batch loss values (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub total: f64,
    pub vmr: f64,
    pub sel: f64,
    pub ftd: f64,
    /// Mean hard selected fraction under the sampled gates (student only).
    pub selected: f64,
}

/// How one batch is run.
pub(crate) struct BatchPlan<'a> {
    pub cfg: &'a TrainConfig,
    /// `Some` for the student: gates in this configuration.
    pub gate: Option<GateConfig>,
    /// Distillation targets, aligned with the batch.
    pub teacher: Option<Vec<&'a Mat>>,
    /// Zero turns dropout off, as gradient checks need.
    pub dropout: f64,
}

fn effective_weights(plan: &BatchPlan) -> LossWeights {
    let w = plan.cfg.weights;
    let student = plan.gate.is_some();
    LossWeights {
        alpha: w.alpha,
        beta: if student && plan.cfg.losses.sel { w.beta } else { 0.0 },
        gamma: if student && plan.cfg.losses.ftd && plan.teacher.is_some() { w.gamma } else { 0.0 },
    }
}

/// Forward and backward over a batch. The selection loss couples samples,
/// so every graph is kept until its gradient has been computed.
pub(crate) fn batch_gradients(
    model: &Model,
    batch: &[&PreparedSample],
    plan: &BatchPlan,
    rngs: &mut [ChaCha8Rng],
) -> Result<(BatchLosses, Gradients)> {
    let k = batch.len() as f64;
    let weights = effective_weights(plan);
    let mut graphs = Vec::with_capacity(batch.len());
    let mut vmr_vars = Vec::new();
    let mut ftd_vars: Vec<Option<Var>> = Vec::new();
    let mut frac_vars: Vec<Vec<Var>> = Vec::new();
    let mut fractions: Vec<Vec<f64>> = Vec::new();
    let mut selected = 0.0;
    for (i, prep) in batch.iter().enumerate() {
        let mut g = Graph::new(&model.store);
        if plan.dropout > 0.0 {
            g.enable_dropout(plan.dropout, rngs[i].gen());
        }
        let out = match &plan.gate {
            Some(gate) => {
                let (out, state) = model.forward_spotter(&mut g, prep, gate, false, &mut rngs[i])?;
                let vars: Vec<Var> = state.trace.iter().map(|t| t.fraction).collect();
                fractions.push(vars.iter().map(|&v| g.value(v).item()).collect());
                selected += state.selected_fraction() / k;
                frac_vars.push(vars);
                out
            }
            None => model.forward_full(&mut g, prep),
        };
        let mut vmr = boundary_loss_var(&mut g, out.log_p_s, out.log_p_e, prep.gt_clips)?;
        if plan.cfg.losses.qav {
            let target = make_qav_target(prep.gt_clips, plan.cfg.highlight_extension, prep.clip_count());
            let qav = qav_loss_var(&mut g, out.highlight.logits, &target);
            vmr = g.add(vmr, qav);
        }
        let ftd = match (&plan.teacher, weights.gamma > 0.0) {
            (Some(t), true) => {
                let target = g.constant(t[i].clone());
                Some(distillation_loss_var(&mut g, out.embedding, target)?)
            }
            _ => None,
        };
        vmr_vars.push(vmr);
        ftd_vars.push(ftd);
        graphs.push(g);
    }

    let vmr = graphs.iter().zip(&vmr_vars).map(|(g, &v)| g.value(v).item()).sum::<f64>() / k;
    let ftd = graphs
        .iter()
        .zip(&ftd_vars)
        .filter_map(|(g, v)| v.map(|v| g.value(v).item()))
        .sum::<f64>()
        / k;
    let sel = if weights.beta > 0.0 { Some(selection_loss(&fractions, &plan.cfg.budget())) } else { None };
    let components = LossComponents { vmr, sel: sel.as_ref().map_or(0.0, |s| s.total()), ftd };
    let total = total_loss(components, &weights)?;

    let mut grads = Gradients::new(model.store.len());
    for (i, g) in graphs.iter().enumerate() {
        let mut seeds = vec![(vmr_vars[i], Mat::scalar(weights.alpha / k))];
        if let Some(f) = ftd_vars[i] {
            seeds.push((f, Mat::scalar(weights.gamma / k)));
        }
        if let Some(sel) = &sel {
            for (b, &v) in frac_vars[i].iter().enumerate() {
                seeds.push((v, Mat::scalar(weights.beta * sel.grad[i][b])));
            }
        }
        grads.merge(&g.backward_seeded(&seeds));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((BatchLosses { total, vmr, sel: components.sel, ftd, selected }, grads))
}

/// Independent gate noise per (seed, epoch, sample).
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Model-selection key. Students outside the budget rank below every student
/// inside it, and among themselves by how far they overshoot.
#[derive(Clone, Copy, Debug, PartialEq)]
struct SelectionKey {
    eligible: bool,
    violation: f64,
    r1: f64,
}

impl SelectionKey {
    fn new(t: &TrainConfig, constrained: bool, r1: f64, fraction: f64) -> Self {
        let violation = if constrained { ((fraction - t.gate.budget).abs() - t.budget_slack).max(0.0) } else { 0.0 };
        SelectionKey { eligible: violation == 0.0, violation, r1 }
    }

    fn beats(&self, other: &SelectionKey) -> bool {
        match (self.eligible, other.eligible) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.r1 > other.r1,
            (false, false) => self.violation < other.violation || (self.violation == other.violation && self.r1 > other.r1),
        }
    }
}

struct Loop<'a> {
    cfg: &'a ExperimentConfig,
    stage: Stage,
    train: &'a [PreparedSample],
    val: &'a [PreparedSample],
    teacher_embeddings: Option<Vec<Mat>>,
}

impl Loop<'_> {
    fn eval_gate(&self) -> Option<GateConfig> {
        (self.stage == Stage::Student).then(|| self.cfg.train.gate.with_mode(GateMode::EvalThreshold))
    }

    fn validate(&self, model: &Model) -> Result<(f64, f64)> {
        let gate = self.eval_gate();
        let (report, _) = evaluate(model, self.val, gate.as_ref(), &[1], &[0.5])?;
        Ok((report.r1_05(), report.mean_selected_fraction))
    }

    fn key(&self, r1: f64, fraction: f64) -> SelectionKey {
        let t = &self.cfg.train;
        SelectionKey::new(t, self.stage == Stage::Student && t.losses.sel, r1, fraction)
    }

    fn run(&self, mut model: Model) -> Result<TrainOutcome> {
        let t = &self.cfg.train;
        let mut adam = Adam::new(t.learning_rate);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(t.seed);
        let mut history = Vec::new();
        let mut best: Option<(SelectionKey, Checkpoint)> = None;
        let mut since_best = 0;
        let mut diverged = None;

        'epochs: for epoch in 0..t.epochs {
            adam.lr = t.learning_rate * t.lr_decay.powi(epoch as i32);
            let temperature = t.gate.temperature_at(epoch, t.epochs);
            let gate = (self.stage == Stage::Student)
                .then(|| GateConfig { temperature, mode: GateMode::TrainSample, ..t.gate.clone() });
            order.shuffle(&mut shuffle_rng);
            let mut sums = BatchLosses::default();
            let mut batches = 0.0;
            for chunk in order.chunks(t.batch_size) {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &self.train[i]).collect();
                let teacher = self.teacher_embeddings.as_ref().map(|e| chunk.iter().map(|&i| &e[i]).collect());
                let plan = BatchPlan { cfg: t, gate: gate.clone(), teacher, dropout: t.dropout };
                let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&i| sample_rng(t.seed, epoch, i)).collect();
                match batch_gradients(&model, &batch, &plan, &mut rngs) {
                    Ok((losses, grads)) => {
                        adam.step(&mut model.store, &grads);
                        sums.total += losses.total;
                        sums.vmr += losses.vmr;
                        sums.sel += losses.sel;
                        sums.ftd += losses.ftd;
                        sums.selected += losses.selected;
                        batches += 1.0;
                    }
                    Err(e) if e.is_numeric() => {
                        log::warn!("{:?} training stopped at epoch {}: {e}", self.stage, epoch + 1);
                        diverged = Some(e.to_string());
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            let (r1, fraction) = self.validate(&model)?;
            let log = EpochLog {
                epoch: epoch + 1,
                loss: sums.total / batches,
                vmr: sums.vmr / batches,
                sel: sums.sel / batches,
                ftd: sums.ftd / batches,
                val_r1: r1,
                train_selected_fraction: sums.selected / batches,
                val_selected_fraction: fraction,
                temperature,
            };
            info!(
                "{:?} epoch {:>3}: loss {:.4} (vmr {:.4} sel {:.4} ftd {:.4}) val R@1 {:.3} selected {:.3}",
                self.stage, log.epoch, log.loss, log.vmr, log.sel, log.ftd, r1, fraction
            );
            history.push(log);
            let key = self.key(r1, fraction);
            if best.as_ref().is_none_or(|(b, _)| key.beats(b)) {
                best = Some((key, Checkpoint::capture(&model, self.stage, epoch + 1, r1, self.cfg)));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= t.patience {
                    debug!("early stop after epoch {}", epoch + 1);
                    break;
                }
            }
        }

        let checkpoint = match best {
            Some((_, c)) => c,
            None => {
                // Diverged in the first epoch: keep the starting parameters.
                let fresh = self.initial_model()?;
                let (r1, _) = self.validate(&fresh)?;
                model = fresh;
                Checkpoint::capture(&model, self.stage, 0, r1, self.cfg)
            }
        };
        checkpoint.load_into(&mut model)?;
        Ok(TrainOutcome { model, checkpoint, history, diverged })
    }

    fn initial_model(&self) -> Result<Model> {
        build_model(self.cfg)
    }
}

fn check_samples(train: &[PreparedSample], val: &[PreparedSample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    Ok(())
}

/// Full-computation model trained on the retrieval loss only.
pub fn train_teacher(cfg: &ExperimentConfig, train: &[PreparedSample], val: &[PreparedSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(train, val)?;
    let mut model = build_model(cfg)?;
    let shared = model.shared_params();
    model.set_trainable(&shared);
    let run = Loop { cfg, stage: Stage::Teacher, train, val, teacher_embeddings: None };
    run.run(model)
}

/// Pre-highlight cross-modal embeddings of the teacher for every sample.
pub fn teacher_embeddings(teacher: &Model, samples: &[PreparedSample]) -> Vec<Mat> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new(&teacher.store);
            let out = teacher.forward_full(&mut g, s);
            g.value(out.embedding).clone()
        })
        .collect()
}

/// Student initialised from the teacher's shared modules and trained with
/// the spotter and all enabled loss terms. The teacher is only read.
pub fn train_student(
    cfg: &ExperimentConfig,
    teacher: &Checkpoint,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(train, val)?;
    if teacher.header.stage != Stage::Teacher {
        return Err(Error::Config("student training needs a teacher checkpoint".into()));
    }
    if teacher.header.config.model != cfg.model || teacher.header.dims != cfg.dims() {
        return Err(Error::Config("teacher architecture does not match the student configuration".into()));
    }
    let teacher_model = teacher.to_model()?;
    let mut model = build_model(cfg)?;
    model.copy_shared_from(&teacher_model)?;
    model.spotter.init_bias(&mut model.store, cfg.train.gate.budget, cfg.train.gate.steps);
    let mut trainable = model.shared_params();
    trainable.extend(model.spotter_params());
    model.set_trainable(&trainable);
    let embeddings = teacher_embeddings(&teacher_model, train);
    let run = Loop { cfg, stage: Stage::Student, train, val, teacher_embeddings: Some(embeddings) };
    run.run(model)
}

/// Which part of the model a gradient check covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckSlice {
    /// Full-computation path: cross-modal encoder, heads and retrieval plus
    /// distillation losses.
    FusionLosses,
    /// Spotter recursion plus every loss term, gates in the given mode.
    Student(GateMode),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GradientCheck {
    Checked { max_relative_error: f64, entries: usize },
    Skipped { reason: String },
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from
/// dominating through finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn toy_setup() -> Result<(ExperimentConfig, Model, Vec<PreparedSample>, Vec<Mat>)> {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig {
        embed_dim: 4,
        query_hidden: 3,
        feature_dim: 4,
        clip_hidden: 4,
        hidden_dim: 4,
        heads: 2,
        max_clips: 4,
        top_k: 1,
    };
    cfg.corpus.vocab_size = 10;
    cfg.corpus.raw_dim = 3;
    cfg.corpus.background_dim = 2;
    cfg.corpus.appearance_dim = 2;
    cfg.corpus.motion_dim = 2;
    cfg.train.gate = GateConfig { budget: 0.5, steps: 2, ..GateConfig::default() };
    let model = Model::new(&cfg.model, cfg.dims(), 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut samples = Vec::new();
    let mut teacher = Vec::new();
    for (i, gt) in [(1, 2), (0, 3)].into_iter().enumerate() {
        let raw = Mat::randn(4, 3, 1.0, &mut rng);
        samples.push(PreparedSample {
            video_id: format!("toy{i}"),
            semantic: Mat::randn(4, 6, 1.0, &mut rng),
            query: model.query.encode(&model.store, &[1, 2 + i as u32, 7]),
            encoded: model.clip.encode_all(&model.store, &raw),
            raw,
            gt_clips: gt,
            gt_time: (gt.0 as f64, gt.1 as f64 + 1.0),
            duration: 4.0,
            bam_times: Default::default(),
        });
        teacher.push(Mat::randn(4, 4, 0.5, &mut rng));
    }
    Ok((cfg, model, samples, teacher))
}

/// Central finite differences against the analytic gradient of the total
/// loss on a toy model, over every trainable entry of the slice.
pub fn gradient_check(slice: CheckSlice, eps: f64) -> Result<GradientCheck> {
    let gate = match slice {
        CheckSlice::FusionLosses => None,
        CheckSlice::Student(GateMode::EvalThreshold) => {
            return Ok(GradientCheck::Skipped {
                reason: "non-differentiable path: threshold gates have no gradient".into(),
            })
        }
        CheckSlice::Student(GateMode::TrainSample) => {
            return Ok(GradientCheck::Skipped {
                reason: "non-differentiable path: hard samples; the estimator is checked through the relaxed gates"
                    .into(),
            })
        }
        CheckSlice::Student(GateMode::Relaxed) => Some(GateMode::Relaxed),
    };
    let (cfg, mut model, samples, teacher) = toy_setup()?;
    let mut params: Vec<ParamId> = model.shared_params();
    if gate.is_some() {
        params.extend(model.spotter_params());
    }
    model.set_trainable(&params);
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let teacher_refs: Vec<&Mat> = teacher.iter().collect();
    let plan = BatchPlan {
        cfg: &cfg.train,
        gate: gate.map(|mode| GateConfig { mode, ..cfg.train.gate.clone() }),
        teacher: Some(teacher_refs),
        dropout: 0.0,
    };
    let eval = |model: &Model| -> Result<(f64, Gradients)> {
        let mut rngs: Vec<ChaCha8Rng> = (0..batch.len()).map(|i| sample_rng(9, 0, i)).collect();
        let (losses, grads) = batch_gradients(model, &batch, &plan, &mut rngs)?;
        Ok((losses.total, grads))
    };
    let (_, analytic) = eval(&model)?;
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for id in params {
        for k in 0..model.store.get(id).len() {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + eps;
            let (plus, _) = eval(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig - eps;
            let (minus, _) = eval(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |m| m.data()[k]);
            worst = worst.max(relative_error(a, numeric));
            entries += 1;
        }
    }
    Ok(GradientCheck::Checked { max_relative_error: worst, entries })
}
