//! Retrieval metrics, efficiency accounting and experiment drivers.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_splits, CorpusSplits};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Model, PreparedSample, Prediction};
use crate::spotter::GateConfig;
use crate::trainer::{build_model, prepare_splits, train_student, train_teacher, EpochLog, ExperimentConfig, PreparedSplits};

pub const DEFAULT_NS: [usize; 2] = [1, 5];
pub const DEFAULT_MS: [f64; 2] = [0.5, 0.7];

/// Intersection over union of two time intervals.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Fraction of samples with some top-`n` span whose IoU with the ground
/// truth is strictly above `m`. An empty list is a miss.
pub fn recall_at(preds: &[Vec<(f64, f64)>], gts: &[(f64, f64)], n: usize, m: f64) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one ranked list per ground truth");
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(gts).filter(|(p, &gt)| p.iter().take(n).any(|&s| temporal_iou(s, gt) > m)).count();
    hits as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub n: usize,
    pub m: f64,
    pub value: f64,
}

/// Wall-clock breakdown scaled to 100 videos.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub background: f64,
    pub appearance: f64,
    pub motion: f64,
    /// The expensive clip encoder.
    pub other: f64,
    /// Network execution excluding the expensive encoder.
    pub exe: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recalls: Vec<Recall>,
    pub samples: usize,
    pub mean_selected_fraction: f64,
    pub expensive_calls: usize,
    pub total_clips: usize,
    pub calls_per_clip: f64,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn recall(&self, n: usize, m: f64) -> Option<f64> {
        self.recalls.iter().find(|r| r.n == n && (r.m - m).abs() < 1e-12).map(|r| r.value)
    }

    /// R@1 at IoU 0.5, the model-selection metric.
    pub fn r1_05(&self) -> f64 {
        self.recall(1, 0.5).unwrap_or(0.0)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8}", "metric", "value");
        for r in &self.recalls {
            let _ = writeln!(out, "{:<16} {:>8.4}", format!("R@{} IoU={}", r.n, r.m), r.value);
        }
        let _ = writeln!(out, "{:<16} {:>8}", "samples", self.samples);
        let _ = writeln!(out, "{:<16} {:>8.4}", "selected frac", self.mean_selected_fraction);
        let _ = writeln!(out, "{:<16} {:>8.4}", "calls/clip", self.calls_per_clip);
        out
    }

    pub fn from_predictions(preds: &[Prediction], samples: &[PreparedSample], ns: &[usize], ms: &[f64]) -> Self {
        let ranked: Vec<Vec<(f64, f64)>> = preds.iter().map(|p| p.times.clone()).collect();
        let gts: Vec<(f64, f64)> = samples.iter().map(|s| s.gt_time).collect();
        let recalls = ns
            .iter()
            .flat_map(|&n| ms.iter().map(move |&m| (n, m)))
            .map(|(n, m)| Recall { n, m, value: recall_at(&ranked, &gts, n, m) })
            .collect();
        let count = preds.len().max(1) as f64;
        let calls: usize = preds.iter().map(|p| p.calls).sum();
        let clips: usize = preds.iter().map(|p| p.clip_count).sum();
        let per_100 = 100.0 / count;
        let secs = |d: Duration| d.as_secs_f64() * per_100;
        let bam = |k: usize| secs(samples.iter().map(|s| s.bam_times[k]).sum());
        let other = secs(preds.iter().map(|p| p.encode_time).sum());
        let exe = secs(preds.iter().map(|p| p.exec_time.saturating_sub(p.encode_time)).sum());
        let (background, appearance, motion) = (bam(0), bam(1), bam(2));
        MetricsReport {
            recalls,
            samples: preds.len(),
            mean_selected_fraction: preds.iter().map(|p| p.selected_fraction()).sum::<f64>() / count,
            expensive_calls: calls,
            total_clips: clips,
            calls_per_clip: if clips == 0 { 0.0 } else { calls as f64 / clips as f64 },
            timing: Timing {
                background,
                appearance,
                motion,
                other,
                exe,
                total: background + appearance + motion + other + exe,
            },
        }
    }
}

/// Predicts every sample and scores the predictions.
pub fn evaluate(
    model: &Model,
    samples: &[PreparedSample],
    gate: Option<&GateConfig>,
    ns: &[usize],
    ms: &[f64],
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let preds = samples.iter().map(|s| model.predict(s, gate)).collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::from_predictions(&preds, samples, ns, ms), preds))
}

/// Same inputs through the no-selection baseline and through the spotter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub videos: usize,
    pub baseline: MetricsReport,
    pub spotter: MetricsReport,
    /// Spotter expensive-encoder calls over baseline calls.
    pub call_ratio: f64,
    pub speedup_total: f64,
}

impl EfficiencyReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "time per 100 videos (s), {} videos measured", self.videos);
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
            "pass", "T_ext:B", "T_ext:A", "T_ext:M", "Other", "T_exe", "T_total", "calls/clip", "R@1,0.5"
        );
        for (name, r) in [("baseline", &self.baseline), ("spotter", &self.spotter)] {
            let t = &r.timing;
            let _ = writeln!(
                out,
                "{:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.4}",
                name, t.background, t.appearance, t.motion, t.other, t.exe, t.total, r.calls_per_clip, r.r1_05()
            );
        }
        let _ = writeln!(out, "call ratio {:.4}, total-time speedup {:.2}x", self.call_ratio, self.speedup_total);
        out
    }
}

/// Runs both passes over the same prepared samples.
pub fn efficiency_report(model: &Model, samples: &[PreparedSample], gate: &GateConfig) -> Result<EfficiencyReport> {
    let (baseline, _) = evaluate(model, samples, None, &DEFAULT_NS, &DEFAULT_MS)?;
    let (spotter, _) = evaluate(model, samples, Some(gate), &DEFAULT_NS, &DEFAULT_MS)?;
    let call_ratio = spotter.expensive_calls as f64 / baseline.expensive_calls.max(1) as f64;
    let speedup_total = if spotter.timing.total > 0.0 { baseline.timing.total / spotter.timing.total } else { 0.0 };
    Ok(EfficiencyReport { videos: samples.len(), baseline, spotter, call_ratio, speedup_total })
}

/// A loss term removed for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Qav,
    Sel,
    Ftd,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "qav" => Ok(Ablation::Qav),
            "sel" => Ok(Ablation::Sel),
            "ftd" => Ok(Ablation::Ftd),
            other => Err(Error::Config(format!("unknown ablation `{other}`, expected qav, sel or ftd"))),
        }
    }
}

impl Ablation {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let toggles = &mut cfg.train.losses;
        match self {
            Ablation::Qav => toggles.qav = false,
            Ablation::Sel => toggles.sel = false,
            Ablation::Ftd => toggles.ftd = false,
        }
    }
}

/// Generated corpus with frozen-encoder outputs and a trained teacher.
pub struct TeacherRun {
    pub splits: CorpusSplits,
    pub data: PreparedSplits,
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub test: MetricsReport,
    pub diverged: Option<String>,
}

pub fn run_teacher(cfg: &ExperimentConfig) -> Result<TeacherRun> {
    cfg.validate()?;
    let splits = generate_splits(cfg.corpus_seed, &cfg.corpus, cfg.splits)?;
    let encoders = build_model(cfg)?;
    let data = prepare_splits(&encoders, &splits)?;
    let start = Instant::now();
    let outcome = train_teacher(cfg, &data.train, &data.val)?;
    info!("teacher trained in {:.1}s", start.elapsed().as_secs_f64());
    let (test, _) = evaluate(&outcome.model, &data.test, None, &DEFAULT_NS, &DEFAULT_MS)?;
    Ok(TeacherRun {
        splits,
        data,
        checkpoint: outcome.checkpoint,
        model: outcome.model,
        history: outcome.history,
        test,
        diverged: outcome.diverged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub label: String,
    pub steps: usize,
    pub weights: LossWeights,
    pub ablation: Option<Ablation>,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_r1: f64,
    pub test: MetricsReport,
    pub diverged: Option<String>,
    pub seconds: f64,
    #[serde(skip)]
    pub history: Vec<EpochLog>,
}

/// Trains one student against `teacher` and scores it on the test split.
pub fn run_student(cfg: &ExperimentConfig, teacher: &TeacherRun, label: &str) -> Result<(StudentResult, Model, Checkpoint)> {
    let start = Instant::now();
    let outcome = train_student(cfg, &teacher.checkpoint, &teacher.data.train, &teacher.data.val)?;
    let gate = cfg.train.gate.clone();
    let (test, _) = evaluate(&outcome.model, &teacher.data.test, Some(&gate), &DEFAULT_NS, &DEFAULT_MS)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("student `{label}` trained in {seconds:.1}s: test R@1 {:.3}, selected {:.3}", test.r1_05(), test.mean_selected_fraction);
    let result = StudentResult {
        label: label.to_string(),
        steps: cfg.train.gate.steps,
        weights: cfg.train.weights,
        ablation: None,
        seed: cfg.train.seed,
        best_epoch: outcome.checkpoint.header.epoch,
        val_r1: outcome.checkpoint.header.best_metric,
        test,
        diverged: outcome.diverged,
        seconds,
        history: outcome.history,
    };
    Ok((result, outcome.model, outcome.checkpoint))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub teacher_test: Vec<MetricsReport>,
    pub runs: Vec<StudentResult>,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:>5} {:>6} {:>15} {:>8} {:>8} {:>8} {:>9}",
            "run", "seed", "steps", "alpha/beta/gam", "R@1,0.5", "R@1,0.7", "R@5,0.5", "selected"
        );
        for r in &self.runs {
            let w = r.weights;
            let _ = writeln!(
                out,
                "{:<18} {:>5} {:>6} {:>15} {:>8.4} {:>8.4} {:>8.4} {:>9.4}",
                r.label,
                r.seed,
                r.steps,
                format!("{}/{}/{}", w.alpha, w.beta, w.gamma),
                r.test.r1_05(),
                r.test.recall(1, 0.7).unwrap_or(0.0),
                r.test.recall(5, 0.5).unwrap_or(0.0),
                r.test.mean_selected_fraction
            );
        }
        out
    }
}

/// Full model plus one run per ablation, for each train seed. The teacher is
/// trained once per seed and shared by that seed's students.
pub fn ablation_sweep(cfg: &ExperimentConfig, ablations: &[Ablation], seeds: &[u64]) -> Result<SweepReport> {
    let mut report = SweepReport { teacher_test: Vec::new(), runs: Vec::new() };
    for &seed in seeds {
        let mut base = cfg.clone();
        base.train.seed = seed;
        let teacher = run_teacher(&base)?;
        report.teacher_test.push(teacher.test.clone());
        report.runs.push(run_student(&base, &teacher, "full")?.0);
        for &ablation in ablations {
            let mut variant = base.clone();
            ablation.apply(&mut variant);
            let label = format!("w/o {}", serde_json::to_value(ablation)?.as_str().unwrap_or("?"));
            let (mut result, _, _) = run_student(&variant, &teacher, &label)?;
            result.ablation = Some(ablation);
            report.runs.push(result);
        }
    }
    Ok(report)
}

/// One student per recursion depth, sharing a teacher.
pub fn steps_sweep(cfg: &ExperimentConfig, steps: &[usize]) -> Result<SweepReport> {
    let teacher = run_teacher(cfg)?;
    let mut runs = Vec::new();
    for &b in steps {
        let mut variant = cfg.clone();
        variant.train.gate.steps = b;
        runs.push(run_student(&variant, &teacher, &format!("B={b}"))?.0);
    }
    Ok(SweepReport { teacher_test: vec![teacher.test], runs })
}

/// The two published weightings of (alpha, beta, gamma).
pub fn default_weight_grid() -> Vec<LossWeights> {
    vec![
        LossWeights { alpha: 0.4, beta: 0.8, gamma: 0.6 },
        LossWeights { alpha: 0.4, beta: 0.6, gamma: 0.8 },
    ]
}

/// One student per loss weighting, sharing a teacher.
pub fn weight_sweep(cfg: &ExperimentConfig, grid: &[LossWeights]) -> Result<SweepReport> {
    let teacher = run_teacher(cfg)?;
    let mut runs = Vec::new();
    for &w in grid {
        let mut variant = cfg.clone();
        variant.train.weights = w;
        runs.push(run_student(&variant, &teacher, &format!("weights {}/{}/{}", w.alpha, w.beta, w.gamma))?.0);
    }
    Ok(SweepReport { teacher_test: vec![teacher.test], runs })
}
