//! Forward values and hand-derived gradients for the five supervision
//! losses and their weighted combination.
//!
//! All losses operate on a batch of features (n×d) with integer labels.
//! Distances are squared Euclidean throughout; hinges take the inactive
//! branch at exact boundary points, and selections break ties by first
//! index.

use crate::error::{MmlError, Result};
use crate::numeric::{l2_normalize_rows, sq_dist, stable_softmax, Matrix};

/// Final fully connected layer: one weight column and one bias per class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierHead {
    /// d×K, column j scores class j.
    pub weights: Matrix,
    /// length K.
    pub biases: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        ClassifierHead {
            weights: Matrix::zeros(dim, num_classes),
            biases: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Scalar loss value plus whichever gradients the loss defines.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_weights: Option<Matrix>,
    pub grad_biases: Option<Vec<f64>>,
    pub grad_centres: Option<Matrix>,
    /// Human-readable notes, e.g. classes skipped by the Range intra term.
    pub diagnostics: Vec<String>,
}

impl LossBundle {
    fn new(value: f64, grad_features: Matrix) -> Self {
        LossBundle {
            value,
            grad_features,
            grad_weights: None,
            grad_biases: None,
            grad_centres: None,
            diagnostics: Vec::new(),
        }
    }
}

/// How the minimum-margin term behaves.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MmlConfig {
    /// Threshold on squared inter-centre distance. Squared-distance units.
    pub margin: f64,
    pub coupling_mode: CouplingMode,
    pub pair_scope: PairScope,
}

/// Whether the margin term contributes a feature gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Margin term only moves centres; feature gradient is zero.
    Detached,
    /// Centre gradient is routed to each sample through the batch-mean
    /// Jacobian: grad_f[i] = grad_c[y_i] / n_{y_i}.
    Coupled,
}

/// Which centre pairs the margin term ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairScope {
    /// Distinct classes present in the current batch.
    BatchClasses,
    /// Every class in the bank.
    AllClasses,
}

impl Default for MmlConfig {
    fn default() -> Self {
        MmlConfig {
            margin: 0.0,
            coupling_mode: CouplingMode::Coupled,
            pair_scope: PairScope::BatchClasses,
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (index, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(MmlError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Softmax cross-entropy over logits W_jᵀf_i + b_j, averaged over the batch.
pub fn softmax_ce(features: &Matrix, labels: &[usize], head: &ClassifierHead) -> Result<LossBundle> {
    let n = features.rows();
    if n == 0 || labels.len() != n {
        return Err(MmlError::InvalidArgument(format!(
            "softmax_ce: {} features vs {} labels",
            n,
            labels.len()
        )));
    }
    if features.cols() != head.dim() {
        return Err(MmlError::DimensionMismatch(format!(
            "softmax_ce: feature dim {} vs head dim {}",
            features.cols(),
            head.dim()
        )));
    }
    let k = head.num_classes();
    check_labels(labels, k)?;

    let logits = features.matmul(&head.weights)?; // n×K
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    // g[i][j] = (p_ij - 1{j = y_i}) / N
    let mut g = Matrix::zeros(n, k);
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|j| logits.get(i, j) + head.biases[j]).collect();
        let p = stable_softmax(&row)?;
        value -= inv_n * p[labels[i]].ln();
        for j in 0..k {
            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
            g.set(i, j, (p[j] - indicator) * inv_n);
        }
    }

    let grad_features = g.matmul(&head.weights.transpose())?; // n×d
    let grad_weights = features.transpose().matmul(&g)?; // d×K
    let mut grad_biases = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            grad_biases[j] += g.get(i, j);
        }
    }

    let mut out = LossBundle::new(value, grad_features);
    out.grad_weights = Some(grad_weights);
    out.grad_biases = Some(grad_biases);
    Ok(out)
}

/// Centre loss: ½ Σ_i ||f_i − c_{y_i}||². Not batch-normalized.
pub fn centre_loss(features: &Matrix, labels: &[usize], centres: &Matrix) -> Result<LossBundle> {
    let n = features.rows();
    if labels.len() != n {
        return Err(MmlError::InvalidArgument(format!(
            "centre_loss: {} features vs {} labels",
            n,
            labels.len()
        )));
    }
    if features.cols() != centres.cols() {
        return Err(MmlError::DimensionMismatch(format!(
            "centre_loss: feature dim {} vs centre dim {}",
            features.cols(),
            centres.cols()
        )));
    }
    check_labels(labels, centres.rows())?;

    let mut value = 0.0;
    let mut grad_features = Matrix::zeros(n, features.cols());
    let mut grad_centres = Matrix::zeros(centres.rows(), centres.cols());
    for i in 0..n {
        let c = centres.row(labels[i]);
        let f = features.row(i);
        value += 0.5 * sq_dist(f, c);
        for (d, (fv, cv)) in f.iter().zip(c.iter()).enumerate() {
            let diff = fv - cv;
            grad_features.set(i, d, diff);
            *grad_centres
                .row_mut(labels[i])
                .get_mut(d)
                .expect("dim checked") -= diff;
        }
    }
    let mut out = LossBundle::new(value, grad_features);
    out.grad_centres = Some(grad_centres);
    Ok(out)
}

/// Minimum-margin term: Σ over in-scope unordered centre pairs of
/// max(M − ||c_a − c_b||², 0).
pub fn mml(
    features: &Matrix,
    labels: &[usize],
    centres: &Matrix,
    cfg: &MmlConfig,
) -> Result<LossBundle> {
    if cfg.margin < 0.0 {
        return Err(MmlError::InvalidArgument("mml margin must be >= 0".into()));
    }
    check_labels(labels, centres.rows())?;

    let scope: Vec<usize> = match cfg.pair_scope {
        PairScope::AllClasses => (0..centres.rows()).collect(),
        PairScope::BatchClasses => {
            let mut present: Vec<usize> = labels.to_vec();
            present.sort_unstable();
            present.dedup();
            present
        }
    };

    let mut value = 0.0;
    let mut grad_centres = Matrix::zeros(centres.rows(), centres.cols());
    if scope.len() >= 2 {
        for (ai, &a) in scope.iter().enumerate() {
            for &b in &scope[ai + 1..] {
                let d2 = sq_dist(centres.row(a), centres.row(b));
                let slack = cfg.margin - d2;
                if slack > 0.0 {
                    value += slack;
                    for d in 0..centres.cols() {
                        let diff = centres.get(a, d) - centres.get(b, d);
                        *grad_centres.row_mut(a).get_mut(d).unwrap() -= 2.0 * diff;
                        *grad_centres.row_mut(b).get_mut(d).unwrap() += 2.0 * diff;
                    }
                }
            }
        }
    }

    let mut grad_features = Matrix::zeros(features.rows(), features.cols());
    if cfg.coupling_mode == CouplingMode::Coupled {
        let mut counts = vec![0usize; centres.rows()];
        for &y in labels {
            counts[y] += 1;
        }
        for (i, &y) in labels.iter().enumerate() {
            let scale = 1.0 / counts[y] as f64;
            for d in 0..centres.cols() {
                grad_features.set(i, d, scale * grad_centres.get(y, d));
            }
        }
    }

    let mut out = LossBundle::new(value, grad_features);
    out.grad_centres = Some(grad_centres);
    Ok(out)
}

/// Marginal loss over all ordered sample pairs of a batch, on
/// length-normalized features.
pub fn marginal_loss(
    features: &Matrix,
    labels: &[usize],
    theta: f64,
    xi: f64,
) -> Result<LossBundle> {
    let n = features.rows();
    if n < 2 || labels.len() != n {
        return Err(MmlError::InvalidArgument(format!(
            "marginal_loss needs >= 2 samples with labels, got {} / {}",
            n,
            labels.len()
        )));
    }
    let dim = features.cols();
    let normalized = l2_normalize_rows(features)?;

    let denom = (n * n - n) as f64;
    let mut value = 0.0;
    // Gradient with respect to the normalized features first.
    let mut grad_norm = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let y = if labels[i] == labels[j] { 1.0 } else { -1.0 };
            let d2 = sq_dist(normalized.row(i), normalized.row(j));
            let term = xi - y * (theta - d2);
            if term > 0.0 {
                value += term;
                let coeff = 2.0 * y / denom;
                for d in 0..dim {
                    let diff = normalized.get(i, d) - normalized.get(j, d);
                    *grad_norm.row_mut(i).get_mut(d).unwrap() += coeff * diff;
                    *grad_norm.row_mut(j).get_mut(d).unwrap() -= coeff * diff;
                }
            }
        }
    }
    value /= denom;

    // Chain through f̂ = f/||f||: J = (I − f̂ f̂ᵀ) / ||f||.
    let mut grad_features = Matrix::zeros(n, dim);
    for i in 0..n {
        let norm = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let fh = normalized.row(i);
        let g = grad_norm.row(i);
        let dot: f64 = g.iter().zip(fh.iter()).map(|(a, b)| a * b).sum();
        for d in 0..dim {
            grad_features.set(i, d, (g[d] - dot * fh[d]) / norm);
        }
    }

    Ok(LossBundle::new(value, grad_features))
}

/// Range loss: harmonic penalty over each class's top-n largest intra-class
/// pair distances, plus a hinge on the closest batch-mean centre pair.
pub fn range_loss(
    features: &Matrix,
    labels: &[usize],
    margin: f64,
    alpha_r: f64,
    beta_r: f64,
    top_n: usize,
) -> Result<LossBundle> {
    let n = features.rows();
    if labels.len() != n || n == 0 {
        return Err(MmlError::InvalidArgument(format!(
            "range_loss: {} features vs {} labels",
            n,
            labels.len()
        )));
    }
    if top_n == 0 {
        return Err(MmlError::InvalidArgument("range_loss top_n must be >= 1".into()));
    }
    let dim = features.cols();

    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == c)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut value = 0.0;
    let mut grad_features = Matrix::zeros(n, dim);
    let mut diagnostics = Vec::new();

    // Intra term per class.
    for (&class, idx) in classes.iter().zip(members.iter()) {
        if idx.len() < 2 {
            diagnostics.push(format!("class {class} skipped in intra term (<2 samples)"));
            continue;
        }
        let mut pair_dists: Vec<(f64, usize, usize)> = Vec::new();
        for (pi, &a) in idx.iter().enumerate() {
            for &b in &idx[pi + 1..] {
                pair_dists.push((sq_dist(features.row(a), features.row(b)), a, b));
            }
        }
        // Largest first; stable sort keeps first-index order on ties.
        pair_dists.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let used = top_n.min(pair_dists.len());
        let selected = &pair_dists[..used];
        let harm: f64 = selected.iter().map(|(d, _, _)| 1.0 / d).sum();
        let intra = used as f64 / harm;
        value += alpha_r * intra;
        for &(d2, a, b) in selected {
            // d(intra)/dD_p = used / harm² · 1/D_p².
            let coeff = alpha_r * used as f64 / (harm * harm) / (d2 * d2);
            for d in 0..dim {
                let diff = features.get(a, d) - features.get(b, d);
                *grad_features.row_mut(a).get_mut(d).unwrap() += coeff * 2.0 * diff;
                *grad_features.row_mut(b).get_mut(d).unwrap() -= coeff * 2.0 * diff;
            }
        }
    }

    // Inter term: hinge on the closest pair of batch-mean centres.
    if classes.len() < 2 {
        diagnostics.push("inter term skipped (<2 classes in batch)".into());
    } else {
        let mut means = Matrix::zeros(classes.len(), dim);
        for (ci, idx) in members.iter().enumerate() {
            for &i in idx {
                for d in 0..dim {
                    *means.row_mut(ci).get_mut(d).unwrap() += features.get(i, d);
                }
            }
            let inv = 1.0 / idx.len() as f64;
            for d in 0..dim {
                *means.row_mut(ci).get_mut(d).unwrap() *= inv;
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..classes.len() {
            for b in a + 1..classes.len() {
                let d2 = sq_dist(means.row(a), means.row(b));
                if best.map_or(true, |(bd, _, _)| d2 < bd) {
                    best = Some((d2, a, b));
                }
            }
        }
        let (d_centre, q, r) = best.unwrap();
        let slack = margin - d_centre;
        if slack > 0.0 {
            value += beta_r * slack;
            let nq = members[q].len() as f64;
            let nr = members[r].len() as f64;
            for d in 0..dim {
                let diff = means.get(q, d) - means.get(r, d);
                for &i in &members[q] {
                    *grad_features.row_mut(i).get_mut(d).unwrap() -= beta_r * 2.0 * diff / nq;
                }
                for &i in &members[r] {
                    *grad_features.row_mut(i).get_mut(d).unwrap() += beta_r * 2.0 * diff / nr;
                }
            }
        }
    }

    let mut out = LossBundle::new(value, grad_features);
    out.diagnostics = diagnostics;
    Ok(out)
}

/// Joint objective L_S + α·L_C + β·L_M. Weight and bias gradients come from
/// the softmax term only. Terms with an exactly-zero coefficient are not
/// evaluated, so the α=β=0 case is bit-identical to `softmax_ce`.
pub fn total_loss(
    features: &Matrix,
    labels: &[usize],
    head: &ClassifierHead,
    centres: &Matrix,
    alpha: f64,
    beta: f64,
    cfg: &MmlConfig,
) -> Result<LossBundle> {
    let mut out = softmax_ce(features, labels, head)?;

    let mut grad_centres: Option<Matrix> = None;
    if alpha != 0.0 {
        let cl = centre_loss(features, labels, centres)?;
        out.value += alpha * cl.value;
        out.grad_features.axpy(alpha, &cl.grad_features)?;
        let mut gc = cl.grad_centres.expect("centre_loss sets grad_centres");
        gc.scale(alpha);
        grad_centres = Some(gc);
    }
    if beta != 0.0 {
        let ml = mml(features, labels, centres, cfg)?;
        out.value += beta * ml.value;
        out.grad_features.axpy(beta, &ml.grad_features)?;
        let mg = ml.grad_centres.expect("mml sets grad_centres");
        match &mut grad_centres {
            Some(gc) => gc.axpy(beta, &mg)?,
            None => {
                let mut gc = mg;
                gc.scale(beta);
                grad_centres = Some(gc);
            }
        }
    }
    out.grad_centres = grad_centres;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Rng, StreamId};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal(1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Central finite difference of a scalar function over one matrix.
    fn fd_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix, eps: f64) -> Matrix {
        let mut grad = Matrix::zeros(at.rows(), at.cols());
        let mut probe = at.clone();
        for i in 0..at.rows() {
            for j in 0..at.cols() {
                let orig = at.get(i, j);
                probe.set(i, j, orig + eps);
                let hi = f(&probe);
                probe.set(i, j, orig - eps);
                let lo = f(&probe);
                probe.set(i, j, orig);
                grad.set(i, j, (hi - lo) / (2.0 * eps));
            }
        }
        grad
    }

    fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
        analytic
            .data()
            .iter()
            .zip(numeric.data().iter())
            .map(|(a, b)| {
                let denom = a.abs().max(b.abs()).max(1e-3);
                (a - b).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_ce_uniform_logits_give_ln_k() {
        let features = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let head = ClassifierHead::zeros(2, 2);
        let out = softmax_ce(&features, &[0, 1], &head).unwrap();
        assert!((out.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_saturated_correct_class() {
        let features = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut head = ClassifierHead::zeros(1, 2);
        head.weights.set(0, 0, 500.0);
        head.weights.set(0, 1, -500.0);
        let out = softmax_ce(&features, &[0], &head).unwrap();
        assert!(out.value.abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_bad_label() {
        let features = Matrix::zeros(1, 2);
        let head = ClassifierHead::zeros(2, 3);
        assert!(matches!(
            softmax_ce(&features, &[3], &head),
            Err(MmlError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_ce_gradients_match_finite_differences() {
        let mut rng = Rng::new(11, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 4, 3);
        let mut head = ClassifierHead {
            weights: random_matrix(&mut rng, 3, 3),
            biases: (0..3).map(|_| rng.normal(0.5)).collect(),
        };
        let labels = [0usize, 1, 2, 1];
        let out = softmax_ce(&features, &labels, &head).unwrap();
        let eps = 1e-5;

        let fd_f = fd_grad(
            |f| softmax_ce(f, &labels, &head).unwrap().value,
            &features,
            eps,
        );
        assert!(max_rel_err(&out.grad_features, &fd_f) < 1e-5);

        let base_w = head.weights.clone();
        let fd_w = fd_grad(
            |w| {
                let h = ClassifierHead {
                    weights: w.clone(),
                    biases: head.biases.clone(),
                };
                softmax_ce(&features, &labels, &h).unwrap().value
            },
            &base_w,
            eps,
        );
        assert!(max_rel_err(out.grad_weights.as_ref().unwrap(), &fd_w) < 1e-5);

        let base_b = head.biases.clone();
        for j in 0..3 {
            head.biases = base_b.clone();
            head.biases[j] += eps;
            let hi = softmax_ce(&features, &labels, &head).unwrap().value;
            head.biases[j] = base_b[j] - eps;
            let lo = softmax_ce(&features, &labels, &head).unwrap().value;
            head.biases = base_b.clone();
            let fd = (hi - lo) / (2.0 * eps);
            let a = out.grad_biases.as_ref().unwrap()[j];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn centre_loss_identity_and_simple_case() {
        let centres = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let features = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let out = centre_loss(&features, &[0, 1], &centres).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_features.data().iter().all(|&v| v == 0.0));

        let centres = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let features = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let out = centre_loss(&features, &[0], &centres).unwrap();
        assert_eq!(out.value, 0.5);
        assert_eq!(out.grad_features.row(0), &[1.0, 0.0]);
        assert_eq!(out.grad_centres.unwrap().row(0), &[-1.0, 0.0]);
    }

    #[test]
    fn centre_loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(5, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 5, 4);
        let centres = random_matrix(&mut rng, 3, 4);
        let labels = [0usize, 1, 2, 0, 1];
        let out = centre_loss(&features, &labels, &centres).unwrap();
        let fd = fd_grad(
            |f| centre_loss(f, &labels, &centres).unwrap().value,
            &features,
            1e-5,
        );
        assert!(max_rel_err(&out.grad_features, &fd) < 1e-6);
    }

    #[test]
    fn mml_hinge_boundary_and_direct_value() {
        let cfg = MmlConfig {
            margin: 25.0,
            ..Default::default()
        };
        let centres = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let features = Matrix::zeros(2, 2);
        let out = mml(&features, &[0, 1], &centres, &cfg).unwrap();
        assert_eq!(out.value, 0.0);

        let cfg = MmlConfig {
            margin: 280.0,
            ..Default::default()
        };
        let centres = Matrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let out = mml(&features, &[0, 1], &centres, &cfg).unwrap();
        assert_eq!(out.value, 180.0);
    }

    #[test]
    fn mml_single_class_scope_is_zero() {
        let cfg = MmlConfig {
            margin: 10.0,
            ..Default::default()
        };
        let centres = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let features = Matrix::zeros(3, 1);
        let out = mml(&features, &[1, 1, 1], &centres, &cfg).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mml_matches_brute_force_pair_enumeration() {
        let mut rng = Rng::new(3, StreamId::GradCheck);
        let centres = random_matrix(&mut rng, 4, 3);
        // Pick M so that some but not all of the 6 pairs violate.
        let mut dists: Vec<f64> = Vec::new();
        for a in 0..4 {
            for b in a + 1..4 {
                dists.push(sq_dist(centres.row(a), centres.row(b)));
            }
        }
        dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let margin = (dists[1] + dists[2]) / 2.0; // exactly 2 violating pairs
        let cfg = MmlConfig {
            margin,
            pair_scope: PairScope::AllClasses,
            coupling_mode: CouplingMode::Detached,
            ..Default::default()
        };
        let features = Matrix::zeros(2, 3);
        let out = mml(&features, &[0, 1], &centres, &cfg).unwrap();

        // Brute force: loop all 6 pairs independently.
        let mut want = 0.0;
        let mut want_grad = Matrix::zeros(4, 3);
        for a in 0..4 {
            for b in a + 1..4 {
                let d2 = sq_dist(centres.row(a), centres.row(b));
                if margin - d2 > 0.0 {
                    want += margin - d2;
                    for d in 0..3 {
                        let diff = centres.get(a, d) - centres.get(b, d);
                        *want_grad.row_mut(a).get_mut(d).unwrap() -= 2.0 * diff;
                        *want_grad.row_mut(b).get_mut(d).unwrap() += 2.0 * diff;
                    }
                }
            }
        }
        assert_eq!(out.value, want);
        assert_eq!(out.grad_centres.unwrap(), want_grad);
    }

    #[test]
    fn mml_coupled_matches_batch_mean_surrogate_fd() {
        // Centres taken as batch means; perturbing a feature moves its
        // class mean by 1/n_j, which is exactly the coupled Jacobian.
        let mut rng = Rng::new(17, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 6, 3);
        let labels = [0usize, 0, 1, 1, 1, 2];
        let k = 3;

        let batch_means = |f: &Matrix| {
            let mut m = Matrix::zeros(k, 3);
            let mut counts = vec![0.0; k];
            for (i, &y) in labels.iter().enumerate() {
                counts[y] += 1.0;
                for d in 0..3 {
                    *m.row_mut(y).get_mut(d).unwrap() += f.get(i, d);
                }
            }
            for j in 0..k {
                for d in 0..3 {
                    *m.row_mut(j).get_mut(d).unwrap() /= counts[j];
                }
            }
            m
        };

        let cfg = MmlConfig {
            margin: 8.0,
            coupling_mode: CouplingMode::Coupled,
            pair_scope: PairScope::BatchClasses,
        };
        let centres = batch_means(&features);
        let out = mml(&features, &labels, &centres, &cfg).unwrap();
        let fd = fd_grad(
            |f| mml(f, &labels, &batch_means(f), &cfg).unwrap().value,
            &features,
            1e-5,
        );
        assert!(max_rel_err(&out.grad_features, &fd) < 1e-5);
    }

    #[test]
    fn marginal_loss_hand_cases() {
        // Two identical same-class unit features.
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let out = marginal_loss(&f, &[0, 0], 0.5, 0.1).unwrap();
        assert_eq!(out.value, 0.0);

        // Antipodal unit features in different classes: d² = 4.
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let out = marginal_loss(&f, &[0, 1], 0.5, 0.1).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn marginal_loss_rejects_zero_norm() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            marginal_loss(&f, &[0, 1], 0.5, 0.1),
            Err(MmlError::ZeroNormRow { row: 0 })
        ));
    }

    #[test]
    fn marginal_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(23, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 6, 3);
        let labels = [0usize, 0, 1, 1, 2, 2];
        let (theta, xi) = (0.9, 0.25);
        let out = marginal_loss(&features, &labels, theta, xi).unwrap();
        let fd = fd_grad(
            |f| marginal_loss(f, &labels, theta, xi).unwrap().value,
            &features,
            1e-5,
        );
        assert!(max_rel_err(&out.grad_features, &fd) < 1e-5);
    }

    #[test]
    fn marginal_loss_scale_invariant() {
        let mut rng = Rng::new(29, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 5, 3);
        let labels = [0usize, 1, 0, 1, 1];
        let base = marginal_loss(&features, &labels, 0.7, 0.2).unwrap();
        let mut scaled = features.clone();
        for i in 0..5 {
            let s = 0.5 + rng.uniform() * 3.0;
            for v in scaled.row_mut(i) {
                *v *= s;
            }
        }
        let out = marginal_loss(&scaled, &labels, 0.7, 0.2).unwrap();
        assert!((base.value - out.value).abs() < 1e-12);
    }

    #[test]
    fn range_loss_single_pair_intra() {
        // One class, two samples at squared distance 2: intra = 1/(1/2) = 2.
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let out = range_loss(&f, &[0, 0], 1.0, 1.0, 0.0, 2).unwrap();
        assert_eq!(out.value, 2.0);
        assert!(!out.diagnostics.is_empty()); // inter skipped, <2 classes
    }

    #[test]
    fn range_loss_inter_hinge_inactive() {
        let f = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![10.0, 0.0],
        ])
        .unwrap();
        // Centre distance 100 >= margin 4: inter term zero; intra terms zero
        // distance pairs are degenerate, so use alpha_r = 0 here.
        let out = range_loss(&f, &[0, 0, 1, 1], 4.0, 0.0, 1.0, 2).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn range_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 7, 3);
        let labels = [0usize, 0, 0, 1, 1, 2, 2];
        let (margin, ar, br, top_n) = (30.0, 0.7, 1.3, 2);
        let out = range_loss(&features, &labels, margin, ar, br, top_n).unwrap();
        let fd = fd_grad(
            |f| range_loss(f, &labels, margin, ar, br, top_n).unwrap().value,
            &features,
            1e-5,
        );
        assert!(max_rel_err(&out.grad_features, &fd) < 1e-4);
    }

    #[test]
    fn total_loss_reductions() {
        let mut rng = Rng::new(37, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 4, 3);
        let head = ClassifierHead {
            weights: random_matrix(&mut rng, 3, 3),
            biases: vec![0.1, -0.2, 0.05],
        };
        let centres = random_matrix(&mut rng, 3, 3);
        let labels = [0usize, 1, 2, 0];
        let cfg = MmlConfig {
            margin: 5.0,
            ..Default::default()
        };

        let plain = softmax_ce(&features, &labels, &head).unwrap();
        let zero = total_loss(&features, &labels, &head, &centres, 0.0, 0.0, &cfg).unwrap();
        assert_eq!(zero.value.to_bits(), plain.value.to_bits());
        assert_eq!(zero.grad_features, plain.grad_features);
        assert!(zero.grad_centres.is_none());

        let cl = centre_loss(&features, &labels, &centres).unwrap();
        let alpha = 0.3;
        let combo = total_loss(&features, &labels, &head, &centres, alpha, 0.0, &cfg).unwrap();
        assert_eq!(combo.value, plain.value + alpha * cl.value);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences_at_paper_weights() {
        let mut rng = Rng::new(41, StreamId::GradCheck);
        let features = random_matrix(&mut rng, 4, 3);
        let head = ClassifierHead {
            weights: random_matrix(&mut rng, 3, 3),
            biases: vec![0.0; 3],
        };
        let centres = random_matrix(&mut rng, 3, 3);
        let labels = [0usize, 1, 2, 1];
        let cfg = MmlConfig {
            margin: 6.0,
            coupling_mode: CouplingMode::Detached,
            pair_scope: PairScope::BatchClasses,
        };
        let (alpha, beta) = (5e-5, 5e-8);
        let out = total_loss(&features, &labels, &head, &centres, alpha, beta, &cfg).unwrap();
        let fd = fd_grad(
            |f| {
                total_loss(f, &labels, &head, &centres, alpha, beta, &cfg)
                    .unwrap()
                    .value
            },
            &features,
            1e-5,
        );
        assert!(max_rel_err(&out.grad_features, &fd) < 1e-4);
    }

    #[test]
    fn mml_scale_property() {
        // Scaling all centres by s > 1 never increases the value.
        let mut rng = Rng::new(43, StreamId::GradCheck);
        for _ in 0..50 {
            let centres = random_matrix(&mut rng, 5, 3);
            let cfg = MmlConfig {
                margin: 2.0 + rng.uniform() * 10.0,
                pair_scope: PairScope::AllClasses,
                coupling_mode: CouplingMode::Detached,
            };
            let features = Matrix::zeros(1, 3);
            let base = mml(&features, &[0], &centres, &cfg).unwrap().value;
            let mut scaled = centres.clone();
            scaled.scale(1.0 + rng.uniform() * 2.0);
            let after = mml(&features, &[0], &scaled, &cfg).unwrap().value;
            assert!(after <= base + 1e-12);
        }
    }

    #[test]
    fn mml_monotone_in_violating_pair_distance() {
        let cfg = MmlConfig {
            margin: 10.0,
            pair_scope: PairScope::AllClasses,
            coupling_mode: CouplingMode::Detached,
        };
        let features = Matrix::zeros(1, 2);
        let base_centres = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let base = mml(&features, &[0], &base_centres, &cfg).unwrap().value;
        // Move centre 1 closer to centre 0.
        let closer = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let after = mml(&features, &[0], &closer, &cfg).unwrap().value;
        assert!(after >= base);
    }
}
