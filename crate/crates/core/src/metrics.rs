//! Per-class accuracy and mean-score statistics on the balanced val split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic_world::Group;

pub const REPORT_SCHEMA: &str = "loce.metrics.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRow {
    pub class: usize,
    pub train_count: usize,
    pub group: Group,
    /// Mean softmax probability of the true class.
    pub mean_score: f64,
    pub accuracy: f64,
    /// Fraction of instances whose largest probability is the background.
    pub background_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRow {
    pub group: Group,
    pub num_classes: usize,
    /// Mean of the member classes' accuracies.
    pub accuracy: f64,
    pub mean_score: f64,
    pub background_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema: String,
    pub provenance: Provenance,
    pub per_class: Vec<ClassRow>,
    pub per_group: Vec<GroupRow>,
    pub overall_accuracy: f64,
    pub balanced_accuracy: f64,
    /// Population standard deviation of per-class mean scores.
    pub score_dispersion: f64,
    /// Spearman rank correlation between per-class mean score and accuracy;
    /// `None` when either side is constant.
    pub spearman: Option<f64>,
}

impl MetricsReport {
    pub fn group(&self, g: Group) -> Option<&GroupRow> {
        self.per_group.iter().find(|r| r.group == g)
    }

    pub fn group_accuracy(&self, g: Group) -> f64 {
        self.group(g).map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn group_mean_score(&self, g: Group) -> f64 {
        self.group(g).map_or(f64::NAN, |r| r.mean_score)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "report json",
            reason: e.to_string(),
        })?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Format {
                what: "report json",
                reason: format!("schema `{}`, expected `{REPORT_SCHEMA}`", r.schema),
            });
        }
        Ok(r)
    }
}

/// Metrics from per-instance class probabilities (`C + 1` entries each,
/// background last). Val instances are all foreground, so background acts
/// as a rejection option rather than a label: a prediction is correct when
/// the true class has the largest probability among the `C` foreground
/// classes (ties go to the lowest index). How often background would have
/// won outright is reported separately as `background_rate`.
pub fn evaluate_predictions(
    labels: &[usize],
    probabilities: &[Vec<f64>],
    train_counts: &[usize],
    groups: &[Group],
) -> Result<MetricsReport> {
    let c = train_counts.len();
    if labels.len() != probabilities.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: probabilities.len(),
        });
    }
    if groups.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            actual: groups.len(),
        });
    }
    let mut seen = vec![0usize; c];
    let mut correct = vec![0usize; c];
    let mut score_sum = vec![0.0; c];
    let mut rejected = vec![0usize; c];
    for (&y, p) in labels.iter().zip(probabilities) {
        if y >= c {
            return Err(Error::ClassOutOfRange {
                index: y,
                num_classes: c,
            });
        }
        if p.len() != c + 1 {
            return Err(Error::DimensionMismatch {
                expected: c + 1,
                actual: p.len(),
            });
        }
        let predicted = argmax(&p[..c]);
        seen[y] += 1;
        correct[y] += usize::from(predicted == y);
        rejected[y] += usize::from(p[c] > p[predicted]);
        score_sum[y] += p[y];
    }
    let per_class: Vec<ClassRow> = (0..c)
        .map(|k| {
            let n = seen[k].max(1) as f64;
            ClassRow {
                class: k,
                train_count: train_counts[k],
                group: groups[k],
                mean_score: score_sum[k] / n,
                accuracy: correct[k] as f64 / n,
                background_rate: rejected[k] as f64 / n,
            }
        })
        .collect();
    let per_group = Group::ALL
        .iter()
        .filter_map(|&g| {
            let members: Vec<&ClassRow> = per_class.iter().filter(|r| r.group == g).collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as f64;
            Some(GroupRow {
                group: g,
                num_classes: members.len(),
                accuracy: members.iter().map(|r| r.accuracy).sum::<f64>() / n,
                mean_score: members.iter().map(|r| r.mean_score).sum::<f64>() / n,
                background_rate: members.iter().map(|r| r.background_rate).sum::<f64>() / n,
            })
        })
        .collect();
    let scores: Vec<f64> = per_class.iter().map(|r| r.mean_score).collect();
    let accs: Vec<f64> = per_class.iter().map(|r| r.accuracy).collect();
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        provenance: Provenance::default(),
        overall_accuracy: correct.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        balanced_accuracy: mean(&accs),
        score_dispersion: std_dev(&scores),
        spearman: spearman(&scores, &accs),
        per_class,
        per_group,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// 1-based ranks, ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}
