use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::numerics::{Graph, NumericsError};
use crate::parm::{error_norms, ContextOrder, PanelScores};
use crate::perception::panels_to_tensor;
use crate::scalar::Scalar;
use crate::taskgen::Panel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMetrics {
    pub panels: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Prediction-error norms of the first reasoning level at the true outlier
/// versus the normal targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorAsymmetry {
    pub outlier_mean: f64,
    pub normal_mean: f64,
    /// Panels whose outlier error exceeds the mean of their normal errors.
    pub outlier_wins: usize,
    pub panels: usize,
    /// One-sided sign-test p-value for `outlier_wins` under a fair coin.
    pub sign_test_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub panels: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_rule: BTreeMap<String, RuleMetrics>,
    pub error_norms: Option<ErrorAsymmetry>,
}

/// Scores and first-level error norms for each panel.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    panels: &[Panel],
    batch_size: usize,
) -> Result<Vec<(PanelScores<T>, Option<[f64; 4]>)>, NumericsError> {
    let mut out = Vec::with_capacity(panels.len());
    let eval_order = model.config.parm.eval_permutation;
    for chunk in panels.chunks(batch_size.max(1)) {
        let refs: Vec<&Panel> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.input(panels_to_tensor(&refs));
        let fwd = model.forward(&mut g, x, &mut ContextOrder::for_eval(eval_order))?;
        let scores = PanelScores::from_batch(g.value(fwd.logits));
        let norms: Vec<Option<[f64; 4]>> = match fwd.errors.first() {
            Some(&e) => error_norms(g.value(e)).into_iter().map(Some).collect(),
            None => vec![None; chunk.len()],
        };
        out.extend(scores.into_iter().zip(norms));
    }
    Ok(out)
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // log C(n, j) built incrementally, summed with a running max for stability.
    let mut log_c = vec![0.0f64; n + 1];
    for j in 1..=n {
        log_c[j] = log_c[j - 1] + ((n - j + 1) as f64).ln() - (j as f64).ln();
    }
    let terms: Vec<f64> = (k..=n).map(|j| log_c[j] - n as f64 * std::f64::consts::LN_2).collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>()).min(1.0)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, panels: &[Panel], batch_size: usize) -> Result<Metrics, NumericsError> {
    let preds = predict(model, panels, batch_size)?;
    let mut per_rule: BTreeMap<String, RuleMetrics> = BTreeMap::new();
    let mut correct = 0;
    let (mut out_sum, mut normal_sum, mut wins, mut with_norms) = (0.0, 0.0, 0, 0);
    for (p, (scores, norms)) in panels.iter().zip(&preds) {
        let hit = scores.predicted() == p.outlier_index;
        correct += hit as usize;
        let r = per_rule.entry(p.rule.clone()).or_insert(RuleMetrics {
            panels: 0,
            correct: 0,
            accuracy: 0.0,
        });
        r.panels += 1;
        r.correct += hit as usize;
        if let Some(n) = norms {
            let o = n[p.outlier_index];
            let normal = (0..4).filter(|&s| s != p.outlier_index).map(|s| n[s]).sum::<f64>() / 3.0;
            out_sum += o;
            normal_sum += normal;
            wins += (o > normal) as usize;
            with_norms += 1;
        }
    }
    for r in per_rule.values_mut() {
        r.accuracy = r.correct as f64 / r.panels as f64;
    }
    let error_norms = (with_norms > 0).then(|| ErrorAsymmetry {
        outlier_mean: out_sum / with_norms as f64,
        normal_mean: normal_sum / with_norms as f64,
        outlier_wins: wins,
        panels: with_norms,
        sign_test_p: sign_test_p(wins, with_norms),
    });
    Ok(Metrics {
        panels: panels.len(),
        correct,
        accuracy: if panels.is_empty() { 0.0 } else { correct as f64 / panels.len() as f64 },
        per_rule,
        error_norms,
    })
}
