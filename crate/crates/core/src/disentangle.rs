//! Cluster quality of each decomposition component, and mask recovery
//! against known subspaces.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{MaskMode, ModelParams};
use crate::rng::{stream, substream};
use crate::synthgen::{Dataset, GroundTruthSubspaces};
use crate::trainer::{check_compatible, Batch};

/// Row labels, in report order.
pub const COMPONENTS: [&str; 4] = ["Entangled", "Universal", "Specific", "Residual"];

/// Neighbors for the kNN columns.
pub const DEFAULT_K: usize = 5;

/// Default cap on the number of samples entering the O(N²) metrics.
pub const DEFAULT_MAX_SAMPLES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleRow {
    pub component: String,
    pub silhouette_auth: Option<f64>,
    pub knn_auth: Option<f64>,
    /// Generator metrics use fake samples only.
    pub silhouette_gen: Option<f64>,
    pub knn_gen: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub rows: Vec<DisentangleRow>,
    pub mask_iou_u: Option<f64>,
    pub mask_iou_s: Option<f64>,
    pub n_samples: usize,
    pub k: usize,
}

impl DisentangleReport {
    pub const CSV_HEADER: &'static str = "component,silhouette_auth,knn_auth,silhouette_gen,knn_gen";

    pub fn row(&self, component: &str) -> Option<&DisentangleRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.component,
                f(r.silhouette_auth),
                f(r.knn_auth),
                f(r.silhouette_gen),
                f(r.knn_gen)
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisentangleOptions {
    pub mode: MaskMode,
    pub k: usize,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for DisentangleOptions {
    fn default() -> Self {
        Self {
            mode: MaskMode::Hard,
            k: DEFAULT_K,
            max_samples: DEFAULT_MAX_SAMPLES,
            seed: 0,
        }
    }
}

fn scores(features: &[Vec<f64>], labels: &[u32], k: usize) -> (Option<f64>, Option<f64>) {
    if features.len() <= k {
        return (None, None);
    }
    let dist = metrics::pairwise_distances(features);
    (
        metrics::silhouette_from_distances(&dist, labels).ok(),
        metrics::knn_accuracy_from_distances(&dist, labels, k).ok(),
    )
}

/// Channels switched on for a strict majority of rows.
fn majority(masks: &[Vec<f64>], dim: usize) -> BTreeSet<usize> {
    let mut counts = vec![0usize; dim];
    for m in masks {
        for (c, &v) in counts.iter_mut().zip(m) {
            if v > 0.5 {
                *c += 1;
            }
        }
    }
    (0..dim).filter(|&j| 2 * counts[j] > masks.len()).collect()
}

/// Silhouette and kNN of `z`, `z_u`, `z_s`, `z_n` under authenticity and
/// generator labels, plus majority-vote mask IoU when `truth` is given.
pub fn disentangle(
    params: &ModelParams,
    ds: &Dataset,
    truth: Option<&GroundTruthSubspaces>,
    opts: &DisentangleOptions,
) -> Result<DisentangleReport> {
    check_compatible(params, ds)?;
    if ds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if let Some(t) = truth {
        t.validate(ds.dim)?;
    }
    let idx: Vec<usize> = if ds.len() > opts.max_samples {
        let mut rng = substream(opts.seed, stream::SUBSAMPLE, 0);
        let mut v = sample(&mut rng, ds.len(), opts.max_samples).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..ds.len()).collect()
    };
    let batch = Batch::from_indices(ds, &idx);
    let decs = params.decompose_batch(&batch.z, opts.mode);

    let comps: [Vec<Vec<f64>>; 4] = [
        (0..idx.len()).map(|r| batch.z.row_slice(r).to_vec()).collect(),
        decs.iter().map(|d| d.z_u.clone()).collect(),
        decs.iter().map(|d| d.z_s.clone()).collect(),
        decs.iter().map(|d| d.z_n.clone()).collect(),
    ];
    let auth_labels: Vec<u32> = batch.y.iter().map(|&y| u32::from(y)).collect();
    let fakes: Vec<usize> = (0..idx.len()).filter(|&r| batch.y[r] == 1).collect();
    let gen_labels: Vec<u32> = fakes.iter().map(|&r| u32::from(batch.g[r])).collect();

    let rows = COMPONENTS
        .iter()
        .zip(&comps)
        .map(|(name, feats)| {
            let (sa, ka) = scores(feats, &auth_labels, opts.k);
            let fake_feats: Vec<Vec<f64>> = fakes.iter().map(|&r| feats[r].clone()).collect();
            let (sg, kg) = scores(&fake_feats, &gen_labels, opts.k);
            DisentangleRow {
                component: (*name).to_string(),
                silhouette_auth: sa,
                knn_auth: ka,
                silhouette_gen: sg,
                knn_gen: kg,
            }
        })
        .collect();

    let (mask_iou_u, mask_iou_s) = match truth {
        Some(t) => {
            let mu: Vec<Vec<f64>> = decs.iter().map(|d| d.m_u.clone()).collect();
            let ms: Vec<Vec<f64>> = decs
                .iter()
                .map(|d| d.m_u.iter().zip(&d.m_s).map(|(u, s)| (1.0 - u) * s).collect())
                .collect();
            let tu: BTreeSet<usize> = t.u.iter().copied().collect();
            let ts: BTreeSet<usize> = t.s.iter().copied().collect();
            (
                Some(metrics::mask_iou(&majority(&mu, ds.dim), &tu)),
                Some(metrics::mask_iou(&majority(&ms, ds.dim), &ts)),
            )
        }
        None => (None, None),
    };
    Ok(DisentangleReport {
        rows,
        mask_iou_u,
        mask_iou_s,
        n_samples: idx.len(),
        k: opts.k,
    })
}
