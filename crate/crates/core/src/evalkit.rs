//! Verification, identification and centre-geometry evaluation:
//! k-fold best-threshold verification accuracy, ROC with TAR-at-FAR
//! lookups, CMC rank curves against a distractor set, nearest-centre
//! histograms, and the margin/beta sweep harness.
//!
//! Scores are squared Euclidean distances on raw embeddings unless noted;
//! lower means more similar.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{make_pairs, Dataset, IdentProtocol, Split};
use crate::error::{MmlError, Result};
use crate::numeric::{sq_dist, Matrix};
use crate::trainer::{train, TrainConfig};

/// Threshold sweep over verification distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// (far, tar) points, ordered by increasing threshold.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// rank_rates[r-1] = fraction of probes whose mate ranks within top r.
    pub rank_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// bins+1 edges, fixed width; the last bin also collects overflow.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// TAR at a requested FAR level, conservative step interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrAtFar {
    pub tar: f64,
    /// False when the FAR level lies below the curve's resolution.
    pub achieved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification_accuracy: Option<f64>,
    pub verification_threshold: Option<f64>,
    pub roc: Option<RocCurve>,
    pub vr_at_far: BTreeMap<String, VrAtFar>,
    pub cmc: Option<CmcCurve>,
    pub histogram: Option<Histogram>,
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn empty() -> Self {
        EvalReport {
            verification_accuracy: None,
            verification_threshold: None,
            roc: None,
            vr_at_far: BTreeMap::new(),
            cmc: None,
            histogram: None,
            config_echo: serde_json::Value::Null,
        }
    }
}

/// k-fold cross-validated verification accuracy. Per fold, the squared
/// distance threshold that maximizes accuracy on the other folds is applied
/// to the held-out fold. Returns (mean accuracy, mean threshold).
pub fn verification_accuracy(
    features_a: &Matrix,
    features_b: &Matrix,
    flags: &[bool],
    folds: usize,
) -> Result<(f64, f64)> {
    let n = flags.len();
    if features_a.rows() != n || features_b.rows() != n {
        return Err(MmlError::InvalidArgument(format!(
            "verification_accuracy: {} / {} features vs {} flags",
            features_a.rows(),
            features_b.rows(),
            n
        )));
    }
    if folds < 2 || folds > n {
        return Err(MmlError::InvalidArgument(format!(
            "folds must be in [2, {n}], got {folds}"
        )));
    }
    let distances: Vec<f64> = (0..n)
        .map(|i| sq_dist(features_a.row(i), features_b.row(i)))
        .collect();

    // Fold f gets pairs with index ≡ f (mod folds); every fold nonempty.
    let fold_of: Vec<usize> = (0..n).map(|i| i % folds).collect();

    let accuracy_at = |threshold: f64, include: &dyn Fn(usize) -> bool| -> (usize, usize) {
        let mut correct = 0;
        let mut total = 0;
        for i in 0..n {
            if include(i) {
                total += 1;
                let same = distances[i] <= threshold;
                if same == flags[i] {
                    correct += 1;
                }
            }
        }
        (correct, total)
    };

    let mut acc_sum = 0.0;
    let mut thr_sum = 0.0;
    for fold in 0..folds {
        // Candidate thresholds: "accept nothing" plus every training distance.
        let mut candidates: Vec<f64> = vec![-1.0];
        candidates.extend(
            (0..n)
                .filter(|&i| fold_of[i] != fold)
                .map(|i| distances[i]),
        );
        let mut best_thr = candidates[0];
        let mut best_correct = 0;
        for &t in &candidates {
            let (correct, _) = accuracy_at(t, &|i| fold_of[i] != fold);
            if correct > best_correct {
                best_correct = correct;
                best_thr = t;
            }
        }
        let (correct, total) = accuracy_at(best_thr, &|i| fold_of[i] == fold);
        acc_sum += correct as f64 / total as f64;
        thr_sum += best_thr;
    }
    Ok((acc_sum / folds as f64, thr_sum / folds as f64))
}

/// ROC from positive and negative pair distances (lower = more similar).
pub fn roc(pos_scores: &[f64], neg_scores: &[f64]) -> Result<RocCurve> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(MmlError::InvalidArgument(
            "roc needs nonempty positive and negative score sets".into(),
        ));
    }
    let mut thresholds: Vec<f64> = pos_scores.iter().chain(neg_scores.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tar = pos_scores.iter().filter(|&&s| s <= t).count() as f64 / pos_scores.len() as f64;
        let far = neg_scores.iter().filter(|&&s| s <= t).count() as f64 / neg_scores.len() as f64;
        points.push((far, tar));
    }

    let mut auc = 0.0;
    for w in points.windows(2) {
        let (far0, tar0) = w[0];
        let (far1, tar1) = w[1];
        auc += (far1 - far0) * (tar0 + tar1) / 2.0;
    }
    Ok(RocCurve {
        points,
        auc,
        num_pos: pos_scores.len(),
        num_neg: neg_scores.len(),
    })
}

/// TAR at the largest achieved FAR ≤ far_level.
pub fn vr_at_far(curve: &RocCurve, far_level: f64) -> Result<VrAtFar> {
    if !(far_level > 0.0 && far_level <= 1.0) {
        return Err(MmlError::InvalidArgument(format!(
            "far_level must be in (0, 1], got {far_level}"
        )));
    }
    if far_level < 1.0 / curve.num_neg as f64 {
        return Ok(VrAtFar {
            tar: 0.0,
            achieved: false,
        });
    }
    let tar = curve
        .points
        .iter()
        .filter(|(far, _)| *far <= far_level)
        .map(|(_, tar)| *tar)
        .fold(0.0, f64::max);
    Ok(VrAtFar {
        tar,
        achieved: true,
    })
}

/// Rank each probe's true gallery mate among gallery ∪ distractors by
/// squared distance; ties break toward the lower sample index.
pub fn cmc(protocol: &IdentProtocol, embeddings: &Matrix) -> Result<CmcCurve> {
    let check = |idx: usize| -> Result<()> {
        if idx >= embeddings.rows() {
            return Err(MmlError::InvalidArgument(format!(
                "missing embedding for sample index {idx}"
            )));
        }
        Ok(())
    };
    for &i in protocol
        .probes
        .iter()
        .chain(protocol.gallery.iter())
        .chain(protocol.distractors.iter())
    {
        check(i)?;
    }
    if protocol.probes.is_empty() || protocol.probes.len() != protocol.gallery.len() {
        return Err(MmlError::InvalidArgument(
            "protocol needs matching nonempty probe and gallery lists".into(),
        ));
    }

    let max_rank = protocol.gallery.len() + protocol.distractors.len();
    let mut rank_hits = vec![0usize; max_rank];
    for (p, &probe) in protocol.probes.iter().enumerate() {
        let mate = protocol.gallery[p];
        let mate_dist = sq_dist(embeddings.row(probe), embeddings.row(mate));
        let mut rank = 1usize;
        for &cand in protocol.gallery.iter().chain(protocol.distractors.iter()) {
            if cand == mate {
                continue;
            }
            let d = sq_dist(embeddings.row(probe), embeddings.row(cand));
            if d < mate_dist || (d == mate_dist && cand < mate) {
                rank += 1;
            }
        }
        rank_hits[rank - 1] += 1;
    }

    let num_probes = protocol.probes.len() as f64;
    let mut rank_rates = Vec::with_capacity(max_rank);
    let mut cumulative = 0usize;
    for hits in rank_hits {
        cumulative += hits;
        rank_rates.push(cumulative as f64 / num_probes);
    }
    Ok(CmcCurve { rank_rates })
}

/// Histogram of each class's nearest-centre squared distance, where centres
/// are the empirical per-class feature means. Values beyond the range fall
/// into the last bin; values below it into the first.
pub fn nearest_centre_histogram(
    features: &Matrix,
    labels: &[usize],
    bins: usize,
    range: (f64, f64),
) -> Result<Histogram> {
    if bins == 0 || !(range.1 > range.0) {
        return Err(MmlError::InvalidArgument(
            "histogram needs bins >= 1 and a nonempty range".into(),
        ));
    }
    let distances = nearest_centre_dists_from_features(features, labels)?;

    let width = (range.1 - range.0) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &d in &distances {
        let bin = if d < range.0 {
            0
        } else {
            (((d - range.0) / width).floor() as usize).min(bins - 1)
        };
        counts[bin] += 1;
    }
    let bin_edges = (0..=bins).map(|b| range.0 + b as f64 * width).collect();
    Ok(Histogram { bin_edges, counts })
}

/// Empirical class centres (feature means) and each centre's nearest-centre
/// squared distance, ordered by class index.
pub fn nearest_centre_dists_from_features(
    features: &Matrix,
    labels: &[usize],
) -> Result<Vec<f64>> {
    if features.rows() != labels.len() {
        return Err(MmlError::InvalidArgument(format!(
            "{} features vs {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(MmlError::InvalidArgument(
            "need >= 2 classes for nearest-centre distances".into(),
        ));
    }
    let dim = features.cols();
    let mut means = Matrix::zeros(classes.len(), dim);
    for (ci, &c) in classes.iter().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for &r in &rows {
            for d in 0..dim {
                *means.row_mut(ci).get_mut(d).unwrap() += features.get(r, d);
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in means.row_mut(ci) {
            *v *= inv;
        }
    }
    let mut out = Vec::with_capacity(classes.len());
    for a in 0..classes.len() {
        let mut best = f64::INFINITY;
        for b in 0..classes.len() {
            if a != b {
                best = best.min(sq_dist(means.row(a), means.row(b)));
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Per-bin count deltas, new minus base. Bin edges must match exactly.
pub fn compare_histograms(base: &Histogram, new: &Histogram) -> Result<Vec<i64>> {
    if base.bin_edges != new.bin_edges {
        return Err(MmlError::InvalidArgument(
            "histogram bin edges differ".into(),
        ));
    }
    Ok(base
        .counts
        .iter()
        .zip(new.counts.iter())
        .map(|(b, n)| *n as i64 - *b as i64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Margin,
    Beta,
}

/// How a sweep cell evaluates its trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEvalOptions {
    pub folds: usize,
    pub num_pos: usize,
    pub num_neg: usize,
    pub pair_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: SweepParameter,
    pub cells: Vec<SweepCell>,
    /// (value, mean accuracy over seeds that completed).
    pub value_means: Vec<(f64, f64)>,
}

/// Embed the heldout split and report verification accuracy for one
/// trained configuration.
pub fn heldout_verification_accuracy(
    config: &TrainConfig,
    dataset: &Dataset,
    eval: &SweepEvalOptions,
) -> Result<f64> {
    let (checkpoint, _) = train(config.clone(), dataset)?;
    let params = checkpoint.embedder_params()?;
    let pairs = make_pairs(dataset, Split::Heldout, eval.num_pos, eval.num_neg, eval.pair_seed)?;
    let embeddings = params.forward(&dataset.inputs)?;
    let n = pairs.pairs.len();
    let mut a = Matrix::zeros(n, embeddings.cols());
    let mut b = Matrix::zeros(n, embeddings.cols());
    let mut flags = Vec::with_capacity(n);
    for (i, &(x, y, same)) in pairs.pairs.iter().enumerate() {
        a.row_mut(i).copy_from_slice(embeddings.row(x));
        b.row_mut(i).copy_from_slice(embeddings.row(y));
        flags.push(same);
    }
    let (acc, _) = verification_accuracy(&a, &b, &flags, eval.folds)?;
    Ok(acc)
}

/// Train and evaluate one cell per (value, seed); failures are recorded in
/// the cell and the sweep continues.
pub fn sweep(
    base_config: &TrainConfig,
    parameter: SweepParameter,
    values: &[f64],
    seeds: &[u64],
    dataset: &Dataset,
    eval: &SweepEvalOptions,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(MmlError::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut cells = Vec::with_capacity(values.len() * seeds.len());
    let mut value_means = Vec::with_capacity(values.len());
    for &value in values {
        let mut sum = 0.0;
        let mut completed = 0usize;
        for &seed in seeds {
            let mut config = base_config.clone();
            config.seed = seed;
            match parameter {
                SweepParameter::Margin => config.margin = value,
                SweepParameter::Beta => config.beta = value,
            }
            match heldout_verification_accuracy(&config, dataset, eval) {
                Ok(accuracy) => {
                    sum += accuracy;
                    completed += 1;
                    cells.push(SweepCell {
                        value,
                        seed,
                        accuracy: Some(accuracy),
                        error: None,
                    });
                }
                Err(e) => cells.push(SweepCell {
                    value,
                    seed,
                    accuracy: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        if completed > 0 {
            value_means.push((value, sum / completed as f64));
        }
    }
    Ok(SweepTable {
        parameter,
        cells,
        value_means,
    })
}
