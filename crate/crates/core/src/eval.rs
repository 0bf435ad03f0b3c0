//! Predictive metrics and the rank-based comparison test.
//!
//! Metrics return `None` when undefined (a single label class, or no
//! presence points); undefined values are left out of aggregates.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::numeric::{median, normal_cdf, sample_sd};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l).count();
    (pos, labels.len() - pos)
}

/// Midranks (1-based) of `values`, with the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Area under the ROC curve in its Mann-Whitney form: the fraction of
/// (presence, absence) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels differ in length"
    );
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return None;
    }
    let (ranks, _) = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Sensitivity + specificity - 1, predicting presence when `score >= threshold`.
pub fn tss(scores: &[f64], labels: &[bool], threshold: f64) -> Option<f64> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut tp = 0;
    let mut tn = 0;
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Some(tp as f64 / pos as f64 + tn as f64 / neg as f64 - 1.0)
}

/// Threshold maximizing TSS over the lowest score and the midpoints between
/// consecutive distinct scores; ties resolve to the smallest threshold. Returns `(threshold, tss)`.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Option<(f64, f64)> {
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sweep upward: everything strictly below the candidate is predicted absent.
    let (mut below_pos, mut below_neg) = (0usize, 0usize);
    // The lowest score predicts presence everywhere: TSS 0.
    let mut best = (scores[order[0]], 0.0);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let threshold = 0.5 * (v + scores[order[i]]);
        let sens = (pos - below_pos) as f64 / pos as f64;
        let spec = below_neg as f64 / neg as f64;
        let t = sens + spec - 1.0;
        if t > best.1 {
            best = (threshold, t);
        }
    }
    Some(best)
}

/// Share of known presence points whose suitability reaches `threshold`.
pub fn recall_presence_only(scores_at_occurrences: &[f64], threshold: f64) -> Option<f64> {
    if scores_at_occurrences.is_empty() {
        return None;
    }
    let hits = scores_at_occurrences
        .iter()
        .filter(|s| **s >= threshold)
        .count();
    Some(hits as f64 / scores_at_occurrences.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
    /// False when either sample has fewer than 8 values.
    pub reliable: bool,
}

/// Two-sided Wilcoxon rank-sum test with midranks and the tie-corrected
/// normal approximation (no continuity correction).
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> RankSumResult {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "rank-sum needs two non-empty samples"
    );
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;
    let n = na + nb;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let (z, p) = if var <= 0.0 {
        (0.0, 1.0)
    } else {
        let z = (u - na * nb / 2.0) / var.sqrt();
        (z, (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0))
    };
    RankSumResult {
        u,
        z,
        p_value: p,
        reliable: a.len() >= 8 && b.len() >= 8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMetrics {
    pub species: String,
    pub prevalence: f64,
    pub threshold: Option<f64>,
    pub tss: Option<f64>,
    pub auc: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub sd: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Summary> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        Some(Summary {
            median: median(&v),
            sd: sample_sd(&v),
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub per_species: Vec<SpeciesMetrics>,
}

impl MetricReport {
    pub fn tss_summary(&self) -> Option<Summary> {
        Summary::of(self.per_species.iter().map(|s| s.tss))
    }

    pub fn auc_summary(&self) -> Option<Summary> {
        Summary::of(self.per_species.iter().map(|s| s.auc))
    }

    pub fn recall_summary(&self) -> Option<Summary> {
        Summary::of(self.per_species.iter().map(|s| s.recall))
    }
}

/// How thresholds are obtained when scoring a model on evaluation data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSource<'a> {
    /// Pre-tuned per species (e.g. on a validation fold).
    Given(&'a [Option<f64>]),
    /// Tuned on the evaluated scores themselves.
    MaxTss,
}

/// Scores every species column. `presence_only` treats label 1 as a known
/// occurrence and 0 as "no information", reporting recall only.
pub fn evaluate_species(
    model: &str,
    species: &[String],
    scores: &nalgebra::DMatrix<f64>,
    labels: &nalgebra::DMatrix<f64>,
    thresholds: ThresholdSource<'_>,
    presence_only: bool,
) -> MetricReport {
    let mut rows = Vec::with_capacity(species.len());
    for (j, name) in species.iter().enumerate() {
        let s: Vec<f64> = scores.column(j).iter().copied().collect();
        let l: Vec<bool> = labels.column(j).iter().map(|v| *v > 0.5).collect();
        let prevalence = l.iter().filter(|x| **x).count() as f64 / l.len().max(1) as f64;
        let threshold = match thresholds {
            ThresholdSource::Given(t) => t.get(j).copied().flatten(),
            ThresholdSource::MaxTss if !presence_only => select_threshold(&s, &l).map(|(t, _)| t),
            ThresholdSource::MaxTss => None,
        };
        let occ: Vec<f64> = s
            .iter()
            .zip(&l)
            .filter(|(_, l)| **l)
            .map(|(s, _)| *s)
            .collect();
        let recall = threshold.and_then(|t| recall_presence_only(&occ, t));
        let (tss_v, auc_v) = if presence_only {
            (None, None)
        } else {
            (threshold.and_then(|t| tss(&s, &l, t)), roc_auc(&s, &l))
        };
        rows.push(SpeciesMetrics {
            species: name.clone(),
            prevalence,
            threshold,
            tss: tss_v,
            auc: auc_v,
            recall,
        });
    }
    MetricReport {
        model: model.to_string(),
        per_species: rows,
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

fn fmt_summary(s: Option<Summary>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.median, s.sd),
        None => "n/a".to_string(),
    }
}

/// Per-species table: target, prevalence, threshold, then TSS, ROC-AUC and
/// recall blocks with one column per model. Prevalence and threshold come
/// from the first report.
pub fn write_species_table<W: Write>(out: W, reports: &[MetricReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "target".to_string(),
        "prevalence".into(),
        "threshold".into(),
    ];
    for metric in ["tss", "auc", "recall"] {
        header.extend(reports.iter().map(|r| format!("{metric}_{}", r.model)));
    }
    w.write_record(&header)?;
    let Some(first) = reports.first() else {
        return w.flush().map_err(Into::into);
    };
    for (j, row) in first.per_species.iter().enumerate() {
        let mut rec = vec![
            row.species.clone(),
            format!("{:.3}", row.prevalence),
            fmt_opt(row.threshold),
        ];
        rec.extend(reports.iter().map(|r| fmt_opt(r.per_species[j].tss)));
        rec.extend(reports.iter().map(|r| fmt_opt(r.per_species[j].auc)));
        rec.extend(reports.iter().map(|r| fmt_opt(r.per_species[j].recall)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregate table: one row per model with `median ± sd` of TSS, ROC-AUC and recall.
pub fn write_summary_table<W: Write>(out: W, reports: &[MetricReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "TSS", "ROC AUC", "Recall (Evaluation)"])?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            fmt_summary(r.tss_summary()),
            fmt_summary(r.auc_summary()),
            fmt_summary(r.recall_summary()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut good = 0.0;
        let mut pairs = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if si > sj {
                        good += 1.0;
                    } else if si == sj {
                        good += 0.5;
                    }
                }
            }
        }
        good / pairs
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        assert!((roc_auc(&s, &l).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(4..60);
            // coarse grid to force ties
            let s: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 10.0)
                .collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            l[0] = true;
            l[1] = false;
            assert_eq!(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l));
        }
    }

    #[test]
    fn auc_label_swap_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let l: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        let a = roc_auc(&s, &l).unwrap();
        assert!((a + roc_auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        assert_eq!(roc_auc(&t, &l).unwrap(), a);
    }

    #[test]
    fn tss_cases() {
        let s = [0.1, 0.3, 0.7, 0.9];
        let l = [false, false, true, true];
        assert_eq!(tss(&s, &l, 0.5), Some(1.0));
        assert_eq!(tss(&[0.4; 4], &l, 0.3), Some(0.0));
        assert_eq!(tss(&[0.4; 4], &l, 0.5), Some(0.0));
    }

    #[test]
    fn threshold_midpoint_separation() {
        let (t, v) = select_threshold(&[0.2, 0.8], &[false, true]).unwrap();
        assert_eq!((t, v), (0.5, 1.0));
    }

    #[test]
    fn threshold_beats_fine_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(5..40);
            let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            let (t, best) = select_threshold(&s, &l).unwrap();
            assert!(t > 0.0 && t < 1.0);
            assert_eq!(tss(&s, &l, t).unwrap(), best);
            for g in 0..=10_000 {
                let v = tss(&s, &l, g as f64 * 1e-4).unwrap();
                assert!(v <= best + 1e-12);
            }
        }
    }

    #[test]
    fn recall_counts() {
        assert_eq!(recall_presence_only(&[0.6, 0.7], 0.5), Some(1.0));
        assert_eq!(recall_presence_only(&[0.6, 0.7, 0.9, 0.1], 0.5), Some(0.75));
        assert_eq!(recall_presence_only(&[], 0.5), None);
    }

    fn brute_u(a: &[f64], b: &[f64]) -> f64 {
        let mut u = 0.0;
        for x in a {
            for y in b {
                if x > y {
                    u += 1.0;
                } else if x == y {
                    u += 0.5;
                }
            }
        }
        u
    }

    #[test]
    fn rank_sum_u_matches_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: Vec<f64> = (0..rng.random_range(1..30))
                .map(|_| rng.random_range(0..12) as f64)
                .collect();
            let b: Vec<f64> = (0..rng.random_range(1..30))
                .map(|_| rng.random_range(0..12) as f64)
                .collect();
            assert_eq!(wilcoxon_rank_sum(&a, &b).u, brute_u(&a, &b));
        }
    }

    #[test]
    fn rank_sum_extremes() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!((wilcoxon_rank_sum(&a, &a).p_value - 1.0).abs() < 1e-12);
        let b: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let r = wilcoxon_rank_sum(&a, &b);
        assert_eq!(r.u, 0.0);
        // z = -200 / sqrt(20*20*41/12)
        let z = -200.0 / (20.0f64 * 20.0 * 41.0 / 12.0).sqrt();
        assert!((r.z - z).abs() < 1e-12);
        assert!(r.p_value < 1e-6);
        assert!(!wilcoxon_rank_sum(&[1.0, 2.0], &[3.0]).reliable);
    }

    #[test]
    fn presence_only_report_has_recall_only() {
        let scores = nalgebra::DMatrix::from_row_slice(4, 1, &[0.9, 0.2, 0.7, 0.6]);
        let labels = nalgebra::DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 0.0]);
        let t = [Some(0.5)];
        let r = evaluate_species(
            "m",
            &["sp".into()],
            &scores,
            &labels,
            ThresholdSource::Given(&t),
            true,
        );
        let s = &r.per_species[0];
        assert_eq!((s.tss, s.auc), (None, None));
        assert!((s.recall.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
