//! Recursive clip selection: preview the video through the semantic index,
//! fuse with the query, and gate clips for expensive encoding.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ClipEncoder, MaskedClipFeatures};
use crate::error::{Error, Result};
use crate::fusion::CrossModalEncoder;
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Hard Gumbel sample forward, relaxed sample backward.
    TrainSample,
    /// `sigmoid(logit) > threshold`, deterministic.
    EvalThreshold,
    /// The relaxed sample itself; used to verify the estimator's gradient.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub temperature: f64,
    /// Linear anneal target reached at the last epoch; `None` keeps the temperature fixed.
    pub final_temperature: Option<f64>,
    /// Target fraction of clips sent to the expensive encoder.
    pub budget: f64,
    pub steps: usize,
    pub mode: GateMode,
    pub threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            final_temperature: None,
            budget: 0.3,
            steps: 5,
            mode: GateMode::TrainSample,
            threshold: 0.5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) || self.final_temperature.is_some_and(|t| !(t > 0.0)) {
            return bad(format!("gate temperature must be positive, got {}", self.temperature));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return bad(format!("budget must lie in (0, 1], got {}", self.budget));
        }
        if self.steps == 0 {
            return bad("at least one spotter step is required".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    /// Checks that the budget asks for at least one clip of a `clips`-clip video.
    pub fn validate_for(&self, clips: usize) -> Result<()> {
        self.validate()?;
        if self.budget * clips as f64 + 1e-9 < 1.0 {
            return Err(Error::Config(format!("budget {} selects no clip of a {clips}-clip video", self.budget)));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: GateMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Temperature for `epoch` (0-based) of `epochs`.
    pub fn temperature_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.final_temperature {
            Some(end) if epochs > 1 => {
                let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
                self.temperature + (end - self.temperature) * t
            }
            _ => self.temperature,
        }
    }
}

/// Difference of two standard Gumbel draws, i.e. a standard logistic sample.
pub fn gate_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

fn check_finite(logits: &[f64]) -> Result<()> {
    match logits.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("gate logit {i} is {}", logits[i]))),
        None => Ok(()),
    }
}

/// Binary gate values outside the autodiff graph.
pub fn gate<R: Rng + ?Sized>(logits: &[f64], cfg: &GateConfig, rng: &mut R) -> Result<Vec<bool>> {
    check_finite(logits)?;
    Ok(match cfg.mode {
        GateMode::EvalThreshold => logits.iter().map(|&l| sigmoid(l) > cfg.threshold).collect(),
        GateMode::TrainSample | GateMode::Relaxed => {
            let noise = gate_noise(rng, logits.len());
            logits.iter().zip(&noise).map(|(l, n)| l + n > 0.0).collect()
        }
    })
}

/// Two-layer feed-forward head producing one selection logit per clip.
#[derive(Clone, Debug)]
pub struct SpotterHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl SpotterHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, 1, rng),
        }
    }

    /// Starts every clip at the per-step budget `budget / steps`.
    pub fn init_bias(&self, store: &mut ParamStore, budget: f64, steps: usize) {
        let p = (budget / steps as f64).clamp(1e-4, 1.0 - 1e-4);
        *store.get_mut(self.out.bias) = Mat::scalar((p / (1.0 - p)).ln() as f32 as f64);
    }

    pub fn forward(&self, g: &mut Graph, c: Var) -> Var {
        let h = self.hidden.forward(g, c);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// Where expensive clip features come from.
#[derive(Clone, Copy)]
pub enum ClipSource<'a> {
    /// Every clip already encoded; features are masked on the graph so
    /// gradients reach the gates. Calls are counted, not made.
    Encoded(&'a Mat),
    /// Encode clips when they are first selected.
    Lazy { encoder: &'a ClipEncoder, raw: &'a Mat },
}

impl ClipSource<'_> {
    fn width(&self) -> usize {
        match self {
            ClipSource::Encoded(m) => m.cols(),
            ClipSource::Lazy { encoder, .. } => encoder.out_dim,
        }
    }
}

/// The step-independent inputs of one spotter run.
pub struct SpotterInputs<'a> {
    pub fusion: &'a CrossModalEncoder,
    pub head: &'a SpotterHead,
    /// Semantic index projected to the clip-feature width, `C x D`.
    pub semantic: Var,
    pub query: Var,
    pub clips: ClipSource<'a>,
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub logits: Vec<f64>,
    /// `sigmoid(logits)`, the selection probabilities the budget loss sees.
    pub probs: Vec<f64>,
    /// Clips newly added to the cumulative mask by this step.
    pub selected: Vec<usize>,
    /// Expensive-encoder calls made (or counted) by this step.
    pub calls: usize,
    /// Mean probability of selecting a clip not selected before, on the graph.
    pub fraction: Var,
    /// Wall-clock time spent in the expensive encoder.
    pub encode_time: Duration,
}

#[derive(Clone, Debug)]
pub struct SelectionState {
    /// Completed steps.
    pub step: usize,
    /// `C x 1` cumulative mask on the graph.
    pub cumulative: Var,
    pub mask: Vec<bool>,
    /// Masked expensive features `v'`, `C x D`.
    pub features: Var,
    lazy: Option<MaskedClipFeatures>,
    pub trace: Vec<StepTrace>,
}

impl SelectionState {
    /// Nothing selected and an all-zero feature matrix.
    pub fn initial(g: &mut Graph, clips: usize, width: usize) -> Self {
        Self {
            step: 0,
            cumulative: g.constant(Mat::zeros(clips, 1)),
            mask: vec![false; clips],
            features: g.constant(Mat::zeros(clips, width)),
            lazy: Some(MaskedClipFeatures::empty(clips, width)),
            trace: Vec::new(),
        }
    }

    pub fn clip_count(&self) -> usize {
        self.mask.len()
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected() as f64 / self.clip_count() as f64
    }

    pub fn total_calls(&self) -> usize {
        self.trace.iter().map(|t| t.calls).sum()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// One preview-and-select round. Clips selected here become visible to the
/// fusion encoder from the next round on.
pub fn spotter_step<R: Rng + ?Sized>(
    g: &mut Graph,
    inputs: &SpotterInputs,
    state: SelectionState,
    cfg: &GateConfig,
    rng: &mut R,
) -> Result<SelectionState> {
    let clips = state.clip_count();
    let x = g.concat_cols(&[state.features, inputs.semantic]);
    let c = inputs.fusion.forward(g, x, inputs.query);
    let logits = inputs.head.forward(g, c);
    let logit_values = g.value(logits).data().to_vec();
    check_finite(&logit_values)?;
    let probs = g.sigmoid(logits);
    // Only clips not yet selected count toward this step, so the per-step
    // fractions add up to the expected overall fraction.
    let fresh = state.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let fresh = g.constant(Mat::from_vec(clips, 1, fresh));
    let fresh_probs = g.mul(probs, fresh);
    let fraction = g.mean(fresh_probs);
    let prob_values = g.value(probs).data().to_vec();

    let p = match cfg.mode {
        GateMode::EvalThreshold => {
            let hard = prob_values.iter().map(|&p| if p > cfg.threshold { 1.0 } else { 0.0 }).collect();
            g.constant(Mat::from_vec(clips, 1, hard))
        }
        GateMode::TrainSample => {
            let noise = gate_noise(rng, clips);
            g.straight_through_gate(logits, &noise, cfg.temperature)
        }
        GateMode::Relaxed => {
            let noise = gate_noise(rng, clips);
            g.soft_gate(logits, &noise, cfg.temperature)
        }
    };
    // Union for binary values: cum + p - cum * p.
    let both = g.mul(state.cumulative, p);
    let sum = g.add(state.cumulative, p);
    let cumulative = g.sub(sum, both);
    let cum_values = g.value(cumulative).data().to_vec();
    let mask: Vec<bool> = cum_values.iter().map(|&v| v > 0.5).collect();
    let selected: Vec<usize> = (0..clips).filter(|&i| mask[i] && !state.mask[i]).collect();

    let start = Instant::now();
    let (features, lazy, calls) = match inputs.clips {
        ClipSource::Encoded(encoded) => {
            let e = g.constant(encoded.clone());
            (g.mul_col(e, cumulative), None, selected.len())
        }
        ClipSource::Lazy { encoder, raw } => {
            if cfg.mode == GateMode::Relaxed {
                return Err(Error::Config("relaxed gates need pre-encoded clip features".into()));
            }
            let prior = state.lazy.expect("lazy state carries encoded features");
            let next = encoder.encode_selected_clips(g.store(), raw, &mask, &prior)?;
            let calls = next.call_count;
            (g.constant(next.features.clone()), Some(next), calls)
        }
    };

    let mut trace = state.trace;
    let encode_time = start.elapsed();
    trace.push(StepTrace { logits: logit_values, probs: prob_values, selected, calls, fraction, encode_time });
    Ok(SelectionState { step: state.step + 1, cumulative, mask, features, lazy, trace })
}

/// Up to `cfg.steps` rounds, stopping early once every clip is selected.
pub fn run_spotter<R: Rng + ?Sized>(
    g: &mut Graph,
    inputs: &SpotterInputs,
    cfg: &GateConfig,
    rng: &mut R,
) -> Result<SelectionState> {
    cfg.validate()?;
    let clips = g.value(inputs.semantic).rows();
    let mut state = SelectionState::initial(g, clips, inputs.clips.width());
    while state.step < cfg.steps && !state.is_full() {
        state = spotter_step(g, inputs, state, cfg, rng)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_gate_thresholds() {
        let cfg = GateConfig { mode: GateMode::EvalThreshold, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gate(&[2.0, -2.0], &cfg, &mut rng).unwrap(), vec![true, false]);
        assert!(matches!(gate(&[f64::NAN], &cfg, &mut rng), Err(Error::NonFinite(_))));
    }

    fn frequency(logit: f64, tau: f64) -> f64 {
        let cfg = GateConfig { temperature: tau, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hits = (0..10_000).filter(|_| gate(&[logit], &cfg, &mut rng).unwrap()[0]).count();
        hits as f64 / 10_000.0
    }

    #[test]
    fn train_gate_frequencies() {
        let f = frequency(0.0, 1.0);
        assert!((0.47..=0.53).contains(&f), "frequency {f}");
        let f = frequency(3.0, 0.1);
        assert!(f >= 0.95, "frequency {f}");
    }

    #[test]
    fn temperature_anneal() {
        let cfg = GateConfig { final_temperature: Some(0.5), ..Default::default() };
        assert_eq!(cfg.temperature_at(0, 11), 1.0);
        assert!((cfg.temperature_at(5, 11) - 0.75).abs() < 1e-12);
        assert_eq!(cfg.temperature_at(10, 11), 0.5);
        assert_eq!(GateConfig::default().temperature_at(7, 11), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { budget: 0.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(GateConfig::default().validate_for(3).is_err());
        assert!(GateConfig::default().validate_for(4).is_ok());
    }

    struct Toy {
        store: ParamStore,
        fusion: CrossModalEncoder,
        head: SpotterHead,
        encoder: ClipEncoder,
        semantic: Mat,
        query: Mat,
        raw: Mat,
    }

    fn toy(clips: usize, seed: u64) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fusion = CrossModalEncoder::new(&mut store, "fusion", 12, 6, 8, 2, 32, &mut rng);
        let head = SpotterHead::new(&mut store, "spotter", 8, &mut rng);
        let encoder = ClipEncoder::new(&mut store, 5, 8, 6, &mut rng);
        Toy {
            store,
            fusion,
            head,
            encoder,
            semantic: Mat::randn(clips, 6, 1.0, &mut rng),
            query: Mat::randn(4, 6, 1.0, &mut rng),
            raw: Mat::randn(clips, 5, 1.0, &mut rng),
        }
    }

    fn run(t: &Toy, cfg: &GateConfig, lazy: bool, seed: u64) -> SelectionState {
        let mut g = Graph::new(&t.store);
        let encoded = t.encoder.encode_all(&t.store, &t.raw);
        let inputs = SpotterInputs {
            fusion: &t.fusion,
            head: &t.head,
            semantic: g.constant(t.semantic.clone()),
            query: g.constant(t.query.clone()),
            clips: if lazy {
                ClipSource::Lazy { encoder: &t.encoder, raw: &t.raw }
            } else {
                ClipSource::Encoded(&encoded)
            },
        };
        run_spotter(&mut g, &inputs, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn eval_mode_is_deterministic_and_lazy_matches_encoded() {
        let t = toy(10, 1);
        let cfg = GateConfig { mode: GateMode::EvalThreshold, budget: 0.5, ..Default::default() };
        let a = run(&t, &cfg, true, 0);
        let b = run(&t, &cfg, true, 99);
        let c = run(&t, &cfg, false, 5);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.mask, c.mask);
        assert_eq!(a.total_calls(), a.selected());
    }

    #[test]
    fn saturated_logits_halt_after_one_step() {
        let mut t = toy(6, 2);
        *t.store.get_mut(t.head.out.weight) = Mat::zeros(8, 1);
        *t.store.get_mut(t.head.out.bias) = Mat::scalar(100.0);
        for mode in [GateMode::EvalThreshold, GateMode::TrainSample] {
            let cfg = GateConfig { mode, steps: 5, ..Default::default() };
            let s = run(&t, &cfg, true, 3);
            assert_eq!(s.step, 1);
            assert!(s.is_full());
            assert_eq!(s.total_calls(), 6);
        }
    }

    #[test]
    fn one_hot_saturation_in_eval_mode() {
        let logits: Vec<f64> = (0..6).map(|i| if i == 3 { 100.0 } else { -100.0 }).collect();
        let cfg = GateConfig { mode: GateMode::EvalThreshold, ..Default::default() };
        let mask = gate(&logits, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(mask, vec![false, false, false, true, false, false]);
    }

    #[test]
    fn single_step_mask_equals_first_selection() {
        let t = toy(8, 4);
        let cfg = GateConfig { steps: 1, budget: 0.5, ..Default::default() };
        let s = run(&t, &cfg, false, 7);
        assert_eq!(s.step, 1);
        let first: Vec<usize> = (0..8).filter(|&i| s.mask[i]).collect();
        assert_eq!(first, s.trace[0].selected);
    }

    #[test]
    fn identical_logits_leave_the_union_unchanged() {
        let cfg = GateConfig { mode: GateMode::EvalThreshold, ..Default::default() };
        let l = [1.0, -1.0, 2.0, -3.0, 0.5, -0.5, 4.0, -4.0];
        let once = gate(&l, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let twice = gate(&l, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let union: Vec<bool> = once.iter().zip(&twice).map(|(a, b)| *a || *b).collect();
        assert_eq!(union, once);
    }

    #[test]
    fn masks_grow_monotonically_and_calls_match() {
        for seed in 0..200u64 {
            let t = toy(5 + (seed % 7) as usize, seed);
            let mut g = Graph::new(&t.store);
            let inputs = SpotterInputs {
                fusion: &t.fusion,
                head: &t.head,
                semantic: g.constant(t.semantic.clone()),
                query: g.constant(t.query.clone()),
                clips: ClipSource::Lazy { encoder: &t.encoder, raw: &t.raw },
            };
            let cfg = GateConfig { budget: 0.9, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = SelectionState::initial(&mut g, t.semantic.rows(), 6);
            for _ in 0..cfg.steps {
                let before = state.mask.clone();
                state = spotter_step(&mut g, &inputs, state, &cfg, &mut rng).unwrap();
                assert!(before.iter().zip(&state.mask).all(|(b, a)| !b || *a));
                let v = g.value(state.features);
                for (i, &m) in state.mask.iter().enumerate() {
                    if !m {
                        assert_eq!(v.row(i).iter().fold(0.0f64, |a, x| a.max(x.abs())), 0.0);
                    }
                }
            }
            assert_eq!(state.total_calls(), state.selected());
        }
    }

    #[test]
    fn spotter_and_post_path_share_fusion_parameters() {
        let t = toy(6, 6);
        let mut g = Graph::new(&t.store);
        let encoded = t.encoder.encode_all(&t.store, &t.raw);
        let semantic = g.constant(t.semantic.clone());
        let query = g.constant(t.query.clone());
        let inputs =
            SpotterInputs { fusion: &t.fusion, head: &t.head, semantic, query, clips: ClipSource::Encoded(&encoded) };
        let cfg = GateConfig { steps: 1, ..Default::default() };
        let state = run_spotter(&mut g, &inputs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inside = g.param_var(t.fusion.out.weight).unwrap();
        let x = g.concat_cols(&[state.features, semantic]);
        t.fusion.forward(&mut g, x, query);
        assert_eq!(g.param_var(t.fusion.out.weight), Some(inside));
        let reads = g.param_reads().iter().filter(|&&p| p == t.fusion.out.weight).count();
        assert_eq!(reads, 2);
    }

    #[test]
    fn step_fraction_counts_only_fresh_clips() {
        let t = toy(9, 21);
        let mut g = Graph::new(&t.store);
        let encoded = t.encoder.encode_all(&t.store, &t.raw);
        let inputs = SpotterInputs {
            fusion: &t.fusion,
            head: &t.head,
            semantic: g.constant(t.semantic.clone()),
            query: g.constant(t.query.clone()),
            clips: ClipSource::Encoded(&encoded),
        };
        let cfg = GateConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = SelectionState::initial(&mut g, 9, 6);
        for _ in 0..3 {
            let before = state.mask.clone();
            state = spotter_step(&mut g, &inputs, state, &cfg, &mut rng).unwrap();
            let step = state.trace.last().unwrap();
            let want = step.probs.iter().zip(&before).filter(|(_, &m)| !m).map(|(p, _)| p).sum::<f64>() / 9.0;
            assert!((g.value(step.fraction).item() - want).abs() < 1e-12);
        }
    }
}
