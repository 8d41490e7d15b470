//! Multi-label metrics, model evaluation with baseline deltas, the
//! sensitivity analysis, the dense-vs-budgeted scaling benchmark and the
//! low-data sweep.

mod bench;
mod lowdata;
mod sensitivity;

pub use bench::{scaling_benchmark, write_timing_report, BenchConfig, BenchMode, GrowthFit, TimingRecord};
pub use lowdata::{default_lowdata_sizes, lowdata_sweep, write_lowdata_report, LowdataRow};
pub use sensitivity::{sensitivity, write_sensitivity_report, SensitivityReport};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::search::{Dataset, ModelError, Pipeline, Result};

/// How average precision is computed; recorded in every report.
pub const AP_VARIANT: &str = "precision-at-positive-rank, no interpolation, ties by ascending index";

/// Average precision of one ranking: mean, over the positive items, of the
/// precision at each positive's rank. Ties order by ascending index.
/// Returns `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Evaluation result: mean average precision over categories that have at
/// least one positive, per-category values, and optional deltas against a
/// named baseline.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub map: f64,
    pub per_category_ap: Vec<Option<f64>>,
    pub ap_variant: &'static str,
    pub baseline_name: Option<String>,
    pub per_category_delta: Option<Vec<Option<f64>>>,
}

impl EvalReport {
    /// Signed per-category AP difference `self - baseline`, stored on self.
    pub fn with_baseline(mut self, name: &str, baseline: &EvalReport) -> Self {
        let deltas = self
            .per_category_ap
            .iter()
            .zip(baseline.per_category_ap.iter())
            .map(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            })
            .collect();
        self.baseline_name = Some(name.to_string());
        self.per_category_delta = Some(deltas);
        self
    }
}

/// Run the eval-mode pipeline over every example and aggregate per-category
/// average precision. Examples evaluate in parallel; aggregation order is
/// fixed by example index, so results are thread-count independent.
pub fn evaluate(pipe: &Pipeline, data: &Dataset) -> Result<EvalReport> {
    if data.n_labels != pipe.n_labels()
        || data.n_det != pipe.n_detectable()
        || data.d_img != pipe.d_img
    {
        return Err(ModelError::Data(format!(
            "dataset dims {}/{}/{} do not match model {}/{}/{}",
            data.n_det,
            data.d_img,
            data.n_labels,
            pipe.n_detectable(),
            pipe.d_img,
            pipe.n_labels()
        )));
    }
    if data.is_empty() {
        return Err(ModelError::Data("empty evaluation dataset".into()));
    }
    let all_probs: Vec<Vec<f64>> = data
        .examples
        .par_iter()
        .map(|ex| pipe.predict(ex))
        .collect::<Result<_>>()?;

    let n_labels = data.n_labels;
    let mut per_category_ap = Vec::with_capacity(n_labels);
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut scores = vec![0.0; data.len()];
    let mut labels = vec![0.0; data.len()];
    for c in 0..n_labels {
        for (i, (probs, ex)) in all_probs.iter().zip(data.examples.iter()).enumerate() {
            scores[i] = probs[c];
            labels[i] = ex.labels[c];
        }
        let ap = average_precision(&scores, &labels);
        if let Some(v) = ap {
            sum += v;
            counted += 1;
        }
        per_category_ap.push(ap);
    }
    if counted == 0 {
        return Err(ModelError::Data(
            "no category has a positive example".into(),
        ));
    }
    Ok(EvalReport {
        map: sum / counted as f64,
        per_category_ap,
        ap_variant: AP_VARIANT,
        baseline_name: None,
        per_category_delta: None,
    })
}

/// Write the tab-separated per-category table and a key=value summary.
pub fn write_eval_report(
    report: &EvalReport,
    label_names: &[String],
    table_path: &Path,
    summary_path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(table_path)?);
    match report.per_category_delta.is_some() {
        true => writeln!(w, "category\tap\tdelta_vs_baseline")?,
        false => writeln!(w, "category\tap")?,
    }
    for (i, ap) in report.per_category_ap.iter().enumerate() {
        let name = label_names.get(i).map(String::as_str).unwrap_or("?");
        let ap_str = ap.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        match report.per_category_delta.as_ref().and_then(|d| d[i]) {
            Some(delta) => writeln!(w, "{name}\t{ap_str}\t{delta:+.6}")?,
            None if report.per_category_delta.is_some() => {
                writeln!(w, "{name}\t{ap_str}\tn/a")?
            }
            None => writeln!(w, "{name}\t{ap_str}")?,
        }
    }
    w.flush()?;

    let mut s = BufWriter::new(File::create(summary_path)?);
    writeln!(s, "map={:.6}", report.map)?;
    writeln!(s, "ap_variant={}", report.ap_variant)?;
    writeln!(
        s,
        "categories_scored={}",
        report.per_category_ap.iter().flatten().count()
    )?;
    if let Some(name) = &report.baseline_name {
        writeln!(s, "baseline={name}")?;
    }
    s.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgraph::{build_graph_with_labels, ConceptDecl, ConceptKind};
    use crate::search::{Example, GsnnConfig, ModelKind};

    #[test]
    fn perfect_ranking_scores_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn worst_ranking_single_positive_among_three() {
        // positive ranked last of three: precision at its rank is 1/3
        let ap = average_precision(&[0.9, 0.8, 0.1], &[0.0, 0.0, 1.0]);
        assert!((ap.unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_positive_returns_undefined() {
        assert_eq!(average_precision(&[0.5, 0.4], &[0.0, 0.0]), None);
    }

    /// Deliberately naive reference: for every positive item, count how many
    /// items outrank it by the tie rule, then average the precisions.
    fn ap_reference(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1.0).collect();
        if positives.is_empty() {
            return None;
        }
        let outranks = |i: usize, j: usize| {
            scores[i] > scores[j] || (scores[i] == scores[j] && i < j)
        };
        let mut total = 0.0;
        for &p in &positives {
            let rank = 1 + (0..labels.len()).filter(|&j| j != p && outranks(j, p)).count();
            let hits = positives
                .iter()
                .filter(|&&q| q == p || outranks(q, p))
                .count();
            total += hits as f64 / rank as f64;
        }
        Some(total / positives.len() as f64)
    }

    fn assert_ap_eq(a: Option<f64>, b: Option<f64>) {
        // the two routes sum the same precision terms in different orders
        match (a, b) {
            (None, None) => {}
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12, "{x} vs {y}"),
            _ => panic!("definedness mismatch: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn matches_reference_on_random_rankings() {
        let mut rng = crate::rng::substream(17, "ap");
        for _ in 0..200 {
            let n = 10;
            let scores: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let labels: Vec<f64> = (0..n)
                .map(|_| f64::from(rand::Rng::random::<bool>(&mut rng)))
                .collect();
            assert_ap_eq(average_precision(&scores, &labels), ap_reference(&scores, &labels));
        }
    }

    #[test]
    fn exhaustive_rankings_up_to_six_items_match_reference() {
        // every permutation of distinct scores x every label pattern
        for n in 1..=6usize {
            let mut perm: Vec<usize> = (0..n).collect();
            permute(&mut perm, 0, &mut |p| {
                let scores: Vec<f64> = p.iter().map(|&r| 1.0 - r as f64 / 10.0).collect();
                for pattern in 0..(1u32 << n) {
                    let labels: Vec<f64> =
                        (0..n).map(|i| f64::from(pattern & (1 << i) != 0)).collect();
                    assert_ap_eq(
                        average_precision(&scores, &labels),
                        ap_reference(&scores, &labels),
                    );
                }
            });
        }
    }

    fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn map_is_invariant_under_monotone_score_transforms() {
        let mut rng = crate::rng::substream(23, "ap");
        for _ in 0..50 {
            let scores: Vec<f64> = (0..12).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let labels: Vec<f64> = (0..12)
                .map(|_| f64::from(rand::Rng::random::<bool>(&mut rng)))
                .collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            assert_eq!(
                average_precision(&scores, &labels),
                average_precision(&transformed, &labels)
            );
        }
    }

    fn fixture_pipeline() -> Pipeline {
        let decls = vec![
            ConceptDecl {
                name: "a".into(),
                kind: ConceptKind::Object,
                is_detectable: true,
            },
            ConceptDecl {
                name: "b".into(),
                kind: ConceptKind::Object,
                is_detectable: false,
            },
        ];
        let graph = build_graph_with_labels(Vec::new(), 1, &decls).unwrap().0;
        let cfg = GsnnConfig {
            hidden_dim: 2,
            out_dim: 1,
            dropout_rate: 0.0,
            ..GsnnConfig::default()
        };
        Pipeline::new(ModelKind::FeatureOnly, graph, cfg, 2, 3).unwrap()
    }

    #[test]
    fn exact_predictor_reaches_map_one() {
        let mut pipe = fixture_pipeline();
        // image feature IS the label pair; bake a saturated identity readout
        let w = pipe.ps.value_mut(pipe.cls_w);
        w.set(0, 0, 80.0);
        w.set(1, 1, 80.0);
        let b = pipe.ps.value_mut(pipe.cls_b);
        b.data_mut().fill(-40.0);
        let data = Dataset {
            n_det: 1,
            d_img: 2,
            n_labels: 2,
            examples: (0..6)
                .map(|i| {
                    let l = vec![f64::from(i % 2 == 0), f64::from(i % 3 == 0)];
                    Example {
                        detections: vec![0.5],
                        image_feature: l.clone(),
                        labels: l,
                    }
                })
                .collect(),
        };
        let report = evaluate(&pipe, &data).unwrap();
        assert!((report.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_ap_equals_prevalence_under_tie_rule() {
        // Constant scores rank by index; labels 0,1,0,1 give AP 1/2.
        let ap = average_precision(&[0.5, 0.5, 0.5, 0.5], &[0.0, 1.0, 0.0, 1.0]);
        assert!((ap.unwrap() - 0.5).abs() < 1e-12);
        let mut pipe = fixture_pipeline();
        for id in [pipe.cls_w, pipe.cls_b] {
            pipe.ps.value_mut(id).fill(0.0);
        }
        let data = Dataset {
            n_det: 1,
            d_img: 2,
            n_labels: 2,
            examples: (0..4)
                .map(|i| Example {
                    detections: vec![0.1],
                    image_feature: vec![i as f64, -(i as f64)],
                    labels: vec![f64::from(i % 2 == 1), 1.0],
                })
                .collect(),
        };
        let report = evaluate(&pipe, &data).unwrap();
        assert!((report.per_category_ap[0].unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deltas_against_self_are_zero() {
        let mut pipe = fixture_pipeline();
        pipe.ps.value_mut(pipe.cls_w).set(0, 0, 1.0);
        let data = Dataset {
            n_det: 1,
            d_img: 2,
            n_labels: 2,
            examples: (0..4)
                .map(|i| Example {
                    detections: vec![0.1],
                    image_feature: vec![i as f64 * 0.2, 0.4 - i as f64 * 0.1],
                    labels: vec![f64::from(i % 2 == 0), f64::from(i == 1)],
                })
                .collect(),
        };
        let a = evaluate(&pipe, &data).unwrap();
        let b = evaluate(&pipe, &data).unwrap();
        let with = a.with_baseline("self", &b);
        for d in with.per_category_delta.unwrap().into_iter().flatten() {
            assert_eq!(d, 0.0);
        }
    }
}
