//! Evaluation statistics: balanced accuracy, NLL, correlation, clustering
//! quality (silhouette, leave-one-out kNN) and channel-set IoU.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Probability clamp used by [`nll`].
pub const NLL_CLAMP: f64 = 1e-7;

/// Balanced accuracy with a flag for single-class inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Only one ground-truth class was present; `value` is that class's recall.
    pub degenerate: bool,
}

/// Mean of per-class recall over labels `{0, 1}`. Label `1` is the positive class.
pub fn balanced_accuracy(preds: &[u8], truths: &[u8]) -> Result<BalancedAccuracy> {
    if preds.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("balanced accuracy of an empty set"));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truths) {
        match (t != 0, p != 0) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let pos = tp + fn_;
    let neg = tn + fp;
    let tpr = (pos > 0).then(|| tp as f64 / pos as f64);
    let tnr = (neg > 0).then(|| tn as f64 / neg as f64);
    Ok(match (tpr, tnr) {
        (Some(a), Some(b)) => BalancedAccuracy {
            value: 0.5 * (a + b),
            degenerate: false,
        },
        (Some(a), None) | (None, Some(a)) => BalancedAccuracy {
            value: a,
            degenerate: true,
        },
        (None, None) => unreachable!("non-empty input has at least one class"),
    })
}

/// Binary negative log-likelihood of `p_fake` against labels, with
/// probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn nll(probs: &[f64], truths: &[u8]) -> Result<f64> {
    if probs.len() != truths.len() {
        return Err(Error::shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            truths.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::invalid("NLL of an empty set"));
    }
    let mut terms: Vec<f64> = probs
        .iter()
        .zip(truths)
        .map(|(&p, &y)| {
            let p = p.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect();
    // Summing in sorted order makes the result independent of sample order.
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / probs.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least two values"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "pearson correlation undefined for a constant vector".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} vs {} values", x.len(), y.len())));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity undefined for a zero vector".into(),
        ));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Symmetric Euclidean distance matrix, row-major `n x n`.
pub fn pairwise_distances(features: &[Vec<f64>]) -> Vec<f64> {
    let n = features.len();
    let rows = par::map_indexed(n, |i| {
        features
            .iter()
            .map(|other| {
                features[i]
                    .iter()
                    .zip(other)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

fn check_labels<L>(n_features: usize, labels: &[L]) -> Result<()> {
    if n_features != labels.len() {
        return Err(Error::shape(format!(
            "{} feature vectors vs {} labels",
            n_features,
            labels.len()
        )));
    }
    Ok(())
}

/// Mean silhouette coefficient with Euclidean distances.
pub fn silhouette(features: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    check_labels(features.len(), labels)?;
    let dist = pairwise_distances(features);
    silhouette_from_distances(&dist, labels)
}

/// Silhouette from a precomputed `n x n` distance matrix. Samples in singleton
/// clusters score 0.
pub fn silhouette_from_distances(dist: &[f64], labels: &[u32]) -> Result<f64> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::shape("distance matrix does not match label count"));
    }
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Degenerate(
            "silhouette needs at least two distinct labels".into(),
        ));
    }
    let slot = |l: u32| classes.binary_search(&l).expect("label from the same set");
    let mut sizes = vec![0usize; classes.len()];
    for &l in labels {
        sizes[slot(l)] += 1;
    }

    let scores = par::map_indexed(n, |i| {
        let own = slot(labels[i]);
        if sizes[own] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; classes.len()];
        for j in 0..n {
            if j != i {
                sums[slot(labels[j])] += dist[i * n + j];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = sums
            .iter()
            .zip(&sizes)
            .enumerate()
            .filter(|(k, _)| *k != own)
            .map(|(_, (s, &m))| s / m as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom == 0.0 {
            0.0
        } else {
            (b - a) / denom
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Leave-one-out kNN accuracy with Euclidean distances.
pub fn knn_accuracy(features: &[Vec<f64>], labels: &[u32], k: usize) -> Result<f64> {
    check_labels(features.len(), labels)?;
    let dist = pairwise_distances(features);
    knn_accuracy_from_distances(&dist, labels, k)
}

/// Leave-one-out kNN accuracy. Distance ties go to the lower sample index;
/// vote ties go to the smaller label.
pub fn knn_accuracy_from_distances(dist: &[f64], labels: &[u32], k: usize) -> Result<f64> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(Error::shape("distance matrix does not match label count"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if n <= k {
        return Err(Error::invalid(format!(
            "kNN needs more samples than neighbors (n = {n}, k = {k})"
        )));
    }
    let hits = par::map_indexed(n, |i| {
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let row = &dist[i * n..(i + 1) * n];
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let mut votes: Vec<(u32, usize)> = Vec::new();
        for &j in &idx[..k] {
            match votes.iter_mut().find(|(l, _)| *l == labels[j]) {
                Some(v) => v.1 += 1,
                None => votes.push((labels[j], 1)),
            }
        }
        let winner = votes
            .iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|v| v.0)
            .expect("k >= 1");
        usize::from(winner == labels[i])
    });
    Ok(hits.iter().sum::<usize>() as f64 / n as f64)
}

/// `|A ∩ B| / |A ∪ B|`, with two empty sets scoring 1.
pub fn mask_iou(learned: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> f64 {
    let union = learned.union(truth).count();
    if union == 0 {
        return 1.0;
    }
    learned.intersection(truth).count() as f64 / union as f64
}

/// Evaluation summary. Clustering and IoU fields are filled only by the
/// disentanglement evaluation; plain evaluation leaves them `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bacc: f64,
    pub nll: f64,
    pub silhouette_auth: Option<f64>,
    pub silhouette_gen: Option<f64>,
    pub knn_auth: Option<f64>,
    pub knn_gen: Option<f64>,
    pub mask_iou_u: Option<f64>,
    pub mask_iou_s: Option<f64>,
    pub n_samples: usize,
    /// Set when only one ground-truth class was present.
    pub degenerate: bool,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "bacc,nll,silhouette_auth,silhouette_gen,knn_auth,knn_gen,mask_iou_u,mask_iou_s,n_samples,degenerate";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.bacc,
            self.nll,
            opt(self.silhouette_auth),
            opt(self.silhouette_gen),
            opt(self.knn_auth),
            opt(self.knn_gen),
            opt(self.mask_iou_u),
            opt(self.mask_iou_s),
            self.n_samples,
            self.degenerate
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bacc_examples() {
        let t = [1, 1, 0, 0];
        assert_eq!(balanced_accuracy(&t, &t).unwrap().value, 1.0);
        assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &t).unwrap().value, 0.5);

        // TP=9, FN=1, TN=4, FP=6
        let mut preds = vec![1u8; 9];
        preds.push(0);
        preds.extend([0u8; 4]);
        preds.extend([1u8; 6]);
        let mut truths = vec![1u8; 10];
        truths.extend([0u8; 10]);
        let b = balanced_accuracy(&preds, &truths).unwrap();
        assert!((b.value - 0.65).abs() < 1e-12);
        assert!(!b.degenerate);
    }

    #[test]
    fn bacc_single_class_is_flagged() {
        let b = balanced_accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap();
        assert!(b.degenerate);
        assert!((b.value - 2.0 / 3.0).abs() < 1e-12);
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn nll_examples() {
        let v = nll(&[1.0], &[1]).unwrap();
        assert_eq!(v, -(1.0 - NLL_CLAMP).ln());
        assert!((nll(&[0.5, 0.5], &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((nll(&[0.1], &[1]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(nll(&[], &[]).is_err());
    }

    #[test]
    fn pearson_and_cosine_trivial_cases() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let aff: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &aff).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[3.0; 4]), Err(Error::Degenerate(_))));

        let triple: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!((cosine_similarity(&x, &triple).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&x, &[0.0; 4]).is_err());
    }

    #[test]
    fn silhouette_equidistant_point_scores_zero() {
        // Point 1 has a = b = 2. Point 0: a = 2, b = 4. Point 2 is a singleton.
        let f = vec![vec![0.0], vec![2.0], vec![4.0]];
        let s = silhouette(&f, &[0, 0, 1]).unwrap();
        assert!((s - 0.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_single_label_is_error() {
        let f = vec![vec![0.0], vec![1.0]];
        assert!(matches!(silhouette(&f, &[3, 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn knn_rules() {
        let f = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let l = [0, 0, 1, 1];
        assert_eq!(knn_accuracy(&f, &l, 1).unwrap(), 1.0);
        assert!(knn_accuracy(&f, &l, 4).is_err());
        // Vote tie (k=2: one of each) resolves to the smaller label.
        let f = vec![vec![0.0], vec![1.0], vec![-1.0]];
        let l = [5, 5, 2];
        let d = pairwise_distances(&f);
        // Sample 0: neighbors 1 (label 5) and 2 (label 2), tie -> 2, miss.
        // Sample 1: neighbors 0 (5), then 2 (2) -> tie -> 2, miss.
        // Sample 2: neighbors 0 (5), 1 (5) -> 5, miss.
        assert_eq!(knn_accuracy_from_distances(&d, &l, 2).unwrap(), 0.0);
    }

    #[test]
    fn iou_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(mask_iou(&s(&[1, 2]), &s(&[1, 2])), 1.0);
        assert_eq!(mask_iou(&s(&[1]), &s(&[2])), 0.0);
        assert_eq!(mask_iou(&s(&[]), &s(&[])), 1.0);
        assert!((mask_iou(&s(&[0, 1, 2, 3]), &s(&[2, 3, 4, 5])) - 1.0 / 3.0).abs() < 1e-12);
    }
}
