//! Training objectives, as plain functions and as graph builders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{softplus, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the retrieval loss.
    pub alpha: f64,
    /// Weight of the selection loss.
    pub beta: f64,
    /// Weight of the distillation loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.4, beta: 0.8, gamma: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative with one positive, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub budget: f64,
    pub steps: usize,
    pub per_step_weight: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { budget: 0.3, steps: 5, per_step_weight: 1.0 }
    }
}

fn check_index(what: &str, index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(Error::OutOfRange { what: what.into(), index, len });
    }
    Ok(())
}

/// `-log_p_s[start] - log_p_e[end]`.
pub fn boundary_loss(log_p_s: &[f64], log_p_e: &[f64], gt: (usize, usize)) -> Result<f64> {
    check_index("ground-truth start", gt.0, log_p_s.len())?;
    check_index("ground-truth end", gt.1, log_p_e.len())?;
    Ok(-log_p_s[gt.0] - log_p_e[gt.1])
}

/// Ones on the ground-truth span widened by `round(eta * len)` clips per side.
pub fn make_qav_target(gt: (usize, usize), eta: f64, clips: usize) -> Vec<f64> {
    let len = (gt.1 - gt.0 + 1) as f64;
    let ext = (eta * len).round() as usize;
    let lo = gt.0.saturating_sub(ext);
    let hi = (gt.1 + ext).min(clips - 1);
    (0..clips).map(|i| if (lo..=hi).contains(&i) { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy of probabilities against targets.
pub fn qav_loss(scores: &[f64], targets: &[f64]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Shape {
            what: "highlight target".into(),
            expected: (scores.len(), 1),
            actual: (targets.len(), 1),
        });
    }
    let total: f64 = scores.iter().zip(targets).map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum();
    Ok(total / scores.len() as f64)
}

/// Same as [`qav_loss`], computed from logits for numerical range.
pub fn qav_loss_from_logits(logits: &[f64], targets: &[f64]) -> f64 {
    logits.iter().zip(targets).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / logits.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLoss {
    pub budget_term: f64,
    pub per_step_term: f64,
    /// `d loss / d fractions[k][b]`, same layout as the input.
    pub grad: Vec<Vec<f64>>,
}

impl SelectionLoss {
    pub fn total(&self) -> f64 {
        self.budget_term + self.per_step_term
    }
}

/// Budget loss over a batch. `fractions[k][b]` is the mean selection
/// probability of sample `k` at step `b`; steps a sample never ran count as 0.
///
/// The budget term is `(rho - mean_k sum_b f[k][b])^2`; the per-step term is
/// `w * mean_b (rho/B - mean_k f[k][b])^2`.
pub fn selection_loss(fractions: &[Vec<f64>], cfg: &BudgetConfig) -> SelectionLoss {
    let k = fractions.len().max(1) as f64;
    let steps = cfg.steps;
    let at = |s: &Vec<f64>, b: usize| s.get(b).copied().unwrap_or(0.0);
    let mean_total = fractions.iter().map(|s| s.iter().take(steps).sum::<f64>()).sum::<f64>() / k;
    let budget_gap = cfg.budget - mean_total;
    let per_step_gap: Vec<f64> = (0..steps)
        .map(|b| cfg.budget / steps as f64 - fractions.iter().map(|s| at(s, b)).sum::<f64>() / k)
        .collect();
    let per_step_term = cfg.per_step_weight * per_step_gap.iter().map(|g| g * g).sum::<f64>() / steps as f64;
    let grad = fractions
        .iter()
        .map(|s| {
            (0..s.len().min(steps))
                .map(|b| -2.0 * budget_gap / k - 2.0 * cfg.per_step_weight * per_step_gap[b] / (steps as f64 * k))
                .collect()
        })
        .collect();
    SelectionLoss { budget_term: budget_gap * budget_gap, per_step_term, grad }
}

/// Element-mean squared difference.
pub fn distillation_loss(student: &Mat, teacher: &Mat) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape {
            what: "distillation operands".into(),
            expected: teacher.shape(),
            actual: student.shape(),
        });
    }
    Ok(student.zip_map(teacher, |a, b| (a - b) * (a - b)).sum() / student.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents {
    pub vmr: f64,
    pub sel: f64,
    pub ftd: f64,
}

/// `alpha * vmr + beta * sel + gamma * ftd`; a non-finite term is an error
/// naming that term.
pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("vmr", c.vmr), ("sel", c.sel), ("ftd", c.ftd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} is {v}")));
        }
    }
    Ok(w.alpha * c.vmr + w.beta * c.sel + w.gamma * c.ftd)
}

/// Boundary loss on the graph; the inputs are `1 x C` log-probabilities.
pub fn boundary_loss_var(g: &mut Graph, log_p_s: Var, log_p_e: Var, gt: (usize, usize)) -> Result<Var> {
    check_index("ground-truth start", gt.0, g.value(log_p_s).cols())?;
    check_index("ground-truth end", gt.1, g.value(log_p_e).cols())?;
    let s = g.pick(log_p_s, 0, gt.0);
    let e = g.pick(log_p_e, 0, gt.1);
    let both = g.add(s, e);
    Ok(g.scale(both, -1.0))
}

/// Highlight loss on the graph from `C x 1` logits.
pub fn qav_loss_var(g: &mut Graph, logits: Var, targets: &[f64]) -> Var {
    g.bce_with_logits(logits, Mat::column(targets))
}

/// Distillation loss with the teacher operand cut from the gradient.
pub fn distillation_loss_var(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    let (s, t) = (g.value(student).shape(), g.value(teacher).shape());
    if s != t {
        return Err(Error::Shape { what: "distillation operands".into(), expected: t, actual: s });
    }
    let teacher = g.detach(teacher);
    let diff = g.sub(student, teacher);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;

    #[test]
    fn boundary_examples() {
        let uniform = vec![(0.25f64).ln(); 4];
        assert!((boundary_loss(&uniform, &uniform, (1, 3)).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
        let mut one_hot = vec![f64::NEG_INFINITY; 4];
        one_hot[2] = 0.0;
        assert_eq!(boundary_loss(&one_hot, &one_hot, (2, 2)).unwrap(), 0.0);
        let s = [0.5f64.ln(), 0.5f64.ln()];
        let e = [0.75f64.ln(), 0.25f64.ln()];
        assert!((boundary_loss(&s, &e, (0, 1)).unwrap() - 2.0794415).abs() < 1e-6);
        assert!(matches!(boundary_loss(&s, &e, (0, 2)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn qav_target_examples() {
        let t = make_qav_target((4, 7), 0.0, 20);
        assert_eq!(t.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        let t = make_qav_target((4, 7), 0.25, 20);
        assert_eq!(t.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect::<Vec<_>>(), (3..=8).collect::<Vec<_>>());
        for eta in [0.0, 0.5, 3.0] {
            assert!(make_qav_target((0, 19), eta, 20).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn qav_examples() {
        assert!((qav_loss(&[0.5; 5], &[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((qav_loss(&[0.9, 0.1], &[1.0, 0.0]).unwrap() - 0.1053605).abs() < 1e-6);
        assert!(qav_loss_from_logits(&[40.0, -40.0], &[1.0, 0.0]) < 1e-15);
        let logits = [0.3, -1.2, 2.0];
        let targets = [1.0, 0.0, 0.0];
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        assert!((qav_loss_from_logits(&logits, &targets) - qav_loss(&probs, &targets).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn selection_examples() {
        let cfg = BudgetConfig { budget: 0.3, steps: 5, per_step_weight: 1.0 };
        let exact = selection_loss(&[vec![0.06; 5], vec![0.06; 5]], &cfg);
        assert!(exact.total() < 1e-20);
        let none = selection_loss(&[vec![0.0; 5]], &cfg);
        assert!((none.budget_term - 0.09).abs() < 1e-12);
        let halted = selection_loss(&[vec![]], &cfg);
        assert!((halted.budget_term - 0.09).abs() < 1e-12);

        let cfg = BudgetConfig { budget: 0.4, steps: 2, per_step_weight: 2.5 };
        let l = selection_loss(&[vec![0.4, 0.0]], &cfg);
        assert!(l.budget_term.abs() < 1e-20);
        assert!((l.per_step_term - 2.5 * 0.04).abs() < 1e-12);
    }

    #[test]
    fn selection_gradient_matches_finite_differences() {
        let cfg = BudgetConfig { budget: 0.3, steps: 3, per_step_weight: 0.7 };
        let f = vec![vec![0.1, 0.05, 0.2], vec![0.3, 0.01], vec![0.0, 0.15, 0.02]];
        let l = selection_loss(&f, &cfg);
        let eps = 1e-6;
        for k in 0..f.len() {
            for b in 0..f[k].len() {
                let mut p = f.clone();
                p[k][b] += eps;
                let mut m = f.clone();
                m[k][b] -= eps;
                let numeric = (selection_loss(&p, &cfg).total() - selection_loss(&m, &cfg).total()) / (2.0 * eps);
                assert!((numeric - l.grad[k][b]).abs() < 1e-8, "({k},{b}) {numeric} vs {}", l.grad[k][b]);
            }
        }
    }

    #[test]
    fn distillation_examples() {
        let a = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        assert_eq!(distillation_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|x| x + 1.0);
        assert_eq!(distillation_loss(&a, &b).unwrap(), 1.0);
        assert!(distillation_loss(&a, &Mat::zeros(4, 3)).is_err());
    }

    #[test]
    fn teacher_operand_gets_no_gradient() {
        let mut store = ParamStore::new();
        let s = store.add("student", Mat::from_fn(2, 3, |r, c| (r + c) as f64 * 0.3), true);
        let t = store.add("teacher", Mat::from_fn(2, 3, |r, c| (r * c) as f64 * 0.2), true);
        let mut g = Graph::new(&store);
        let sv = g.param(s);
        let tv = g.param(t);
        let loss = distillation_loss_var(&mut g, sv, tv).unwrap();
        let expected = distillation_loss(store.get(s), store.get(t)).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        let grads = g.backward(loss);
        assert!(grads.get(t).is_none_or(|m| m.max_abs() == 0.0));
        assert!(grads.get(s).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn total_examples() {
        let ones = LossComponents { vmr: 1.0, sel: 1.0, ftd: 1.0 };
        assert!((total_loss(ones, &LossWeights::default()).unwrap() - 1.8).abs() < 1e-12);
        let only_vmr = LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 };
        let c = LossComponents { vmr: 2.5, sel: 7.0, ftd: 3.0 };
        assert_eq!(total_loss(c, &only_vmr).unwrap(), 2.5);
        let err = total_loss(LossComponents { sel: f64::NAN, ..ones }, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("sel"));
        assert!(LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn graph_losses_match_plain_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let lp = Mat::from_vec(1, 3, vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]);
        let s = g.constant(lp.clone());
        let e = g.constant(lp.clone());
        let b = boundary_loss_var(&mut g, s, e, (1, 2)).unwrap();
        assert!((g.value(b).item() - boundary_loss(lp.data(), lp.data(), (1, 2)).unwrap()).abs() < 1e-12);
        let logits = g.constant(Mat::column(&[0.4, -2.0, 1.5]));
        let q = qav_loss_var(&mut g, logits, &[1.0, 0.0, 1.0]);
        assert!((g.value(q).item() - qav_loss_from_logits(&[0.4, -2.0, 1.5], &[1.0, 0.0, 1.0])).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            probs in proptest::collection::vec(0.001f64..0.999, 1..12),
            seed in 0u64..1000,
        ) {
            let targets: Vec<f64> = probs.iter().enumerate().map(|(i, _)| ((seed >> (i % 10)) & 1) as f64).collect();
            prop_assert!(qav_loss(&probs, &targets).unwrap() >= 0.0);
            let total: f64 = probs.iter().sum();
            let lp: Vec<f64> = probs.iter().map(|p| (p / total).ln()).collect();
            prop_assert!(boundary_loss(&lp, &lp, (0, probs.len() - 1)).unwrap() >= 0.0);
            let cfg = BudgetConfig::default();
            let sel = selection_loss(&[probs.clone()], &cfg);
            prop_assert!(sel.budget_term >= 0.0 && sel.per_step_term >= 0.0);
        }

        #[test]
        fn budget_term_vanishes_only_at_the_budget(f in proptest::collection::vec(0.0f64..0.2, 5)) {
            let cfg = BudgetConfig::default();
            let l = selection_loss(&[f.clone()], &cfg);
            let total: f64 = f.iter().sum();
            prop_assert_eq!(l.budget_term == 0.0, total == cfg.budget);
        }
    }
}
