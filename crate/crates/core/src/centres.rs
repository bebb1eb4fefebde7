//! Class-centre bank: ownership of the K×d centre matrix, the per-batch
//! centre update rule, and centre-geometry queries (nearest neighbours,
//! margin violations).
//!
//! Centres move by the update rule c ← c − γ·Δc, not by gradient descent;
//! Δc_j averages the batch pull of class j with a +1 damping term in the
//! denominator. All distances are squared Euclidean, so margins here share
//! units with the minimum-margin loss.

use serde::{Deserialize, Serialize};

use crate::error::{MmlError, Result};
use crate::numeric::{sq_dist, Matrix, Rng, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentreBank {
    centres: Matrix,
    gamma: f64,
    update_count: u64,
}

/// How initial centre positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CentreInit {
    Zeros,
    SeededGaussian { sigma: f64, seed: u64 },
}

impl CentreBank {
    pub fn init(num_classes: usize, dim: usize, mode: CentreInit, gamma: f64) -> Result<Self> {
        if num_classes < 2 || dim < 1 {
            return Err(MmlError::InvalidArgument(format!(
                "centre bank needs K >= 2 and d >= 1, got K={num_classes}, d={dim}"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(MmlError::InvalidArgument(format!(
                "centre learning rate must be in (0, 1], got {gamma}"
            )));
        }
        let centres = match mode {
            CentreInit::Zeros => Matrix::zeros(num_classes, dim),
            CentreInit::SeededGaussian { sigma, seed } => {
                let mut rng = Rng::new(seed, StreamId::Init);
                let data = (0..num_classes * dim).map(|_| rng.normal(sigma)).collect();
                Matrix::from_vec(num_classes, dim, data)?
            }
        };
        Ok(CentreBank {
            centres,
            gamma,
            update_count: 0,
        })
    }

    pub fn from_parts(centres: Matrix, gamma: f64, update_count: u64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(MmlError::InvalidArgument(format!(
                "centre learning rate must be in (0, 1], got {gamma}"
            )));
        }
        Ok(CentreBank {
            centres,
            gamma,
            update_count,
        })
    }

    pub fn centres(&self) -> &Matrix {
        &self.centres
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn num_classes(&self) -> usize {
        self.centres.rows()
    }

    pub fn dim(&self) -> usize {
        self.centres.cols()
    }

    /// Δc_j = Σ_{i: y_i=j} (c_j − f_i) / (1 + n_j); zero for absent classes.
    pub fn centre_delta(&self, features: &Matrix, labels: &[usize]) -> Result<Matrix> {
        if features.rows() != labels.len() {
            return Err(MmlError::InvalidArgument(format!(
                "centre_delta: {} features vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != self.dim() {
            return Err(MmlError::DimensionMismatch(format!(
                "centre_delta: feature dim {} vs centre dim {}",
                features.cols(),
                self.dim()
            )));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= self.num_classes() {
                return Err(MmlError::LabelOutOfRange {
                    index,
                    label,
                    num_classes: self.num_classes(),
                });
            }
        }

        let mut delta = Matrix::zeros(self.num_classes(), self.dim());
        let mut counts = vec![0usize; self.num_classes()];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for d in 0..self.dim() {
                *delta.row_mut(y).get_mut(d).unwrap() += self.centres.get(y, d) - features.get(i, d);
            }
        }
        for j in 0..self.num_classes() {
            let denom = (1 + counts[j]) as f64;
            for d in 0..self.dim() {
                *delta.row_mut(j).get_mut(d).unwrap() /= denom;
            }
        }
        Ok(delta)
    }

    /// centres ← centres − γ·delta.
    pub fn apply_update(&mut self, delta: &Matrix) -> Result<()> {
        if delta.rows() != self.num_classes() || delta.cols() != self.dim() {
            return Err(MmlError::DimensionMismatch(format!(
                "apply_update: delta {}x{} vs bank {}x{}",
                delta.rows(),
                delta.cols(),
                self.num_classes(),
                self.dim()
            )));
        }
        self.centres.axpy(-self.gamma, delta)?;
        self.update_count += 1;
        Ok(())
    }

    /// Squared distance from each centre to its nearest other centre.
    pub fn nearest_centre_distances(&self) -> Result<Vec<f64>> {
        let k = self.num_classes();
        if k < 2 {
            return Err(MmlError::InvalidArgument(
                "nearest_centre_distances needs K >= 2".into(),
            ));
        }
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mut best = f64::INFINITY;
            for other in 0..k {
                if other == j {
                    continue;
                }
                let d2 = sq_dist(self.centres.row(j), self.centres.row(other));
                if d2 < best {
                    best = d2;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Unordered centre pairs with squared distance strictly below `margin`,
    /// ascending by distance, ties by (a, b).
    pub fn violating_pairs(&self, margin: f64) -> Vec<(usize, usize, f64)> {
        let k = self.num_classes();
        let mut out = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                let d2 = sq_dist(self.centres.row(a), self.centres.row(b));
                if d2 < margin {
                    out.push((a, b, d2));
                }
            }
        }
        out.sort_by(|x, y| {
            x.2.partial_cmp(&y.2)
                .unwrap()
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{mml, CouplingMode, MmlConfig, PairScope};
    use crate::numeric::{Rng, StreamId};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal(1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_zeros_and_determinism() {
        let bank = CentreBank::init(3, 2, CentreInit::Zeros, 0.5).unwrap();
        assert_eq!(bank.centres(), &Matrix::zeros(3, 2));

        let a = CentreBank::init(4, 3, CentreInit::SeededGaussian { sigma: 1.0, seed: 9 }, 0.5)
            .unwrap();
        let b = CentreBank::init(4, 3, CentreInit::SeededGaussian { sigma: 1.0, seed: 9 }, 0.5)
            .unwrap();
        assert_eq!(a.centres(), b.centres());
    }

    #[test]
    fn init_gaussian_sample_mean_near_zero() {
        let bank = CentreBank::init(
            1000,
            8,
            CentreInit::SeededGaussian { sigma: 1.0, seed: 1 },
            0.5,
        )
        .unwrap();
        let mean: f64 =
            bank.centres().data().iter().sum::<f64>() / bank.centres().data().len() as f64;
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn init_rejects_bad_shape() {
        assert!(CentreBank::init(1, 2, CentreInit::Zeros, 0.5).is_err());
        assert!(CentreBank::init(3, 0, CentreInit::Zeros, 0.5).is_err());
        assert!(CentreBank::init(3, 2, CentreInit::Zeros, 0.0).is_err());
    }

    #[test]
    fn centre_delta_hand_cases() {
        let bank = CentreBank::init(2, 2, CentreInit::Zeros, 1.0).unwrap();

        // Absent class: zero delta.
        let f = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let delta = bank.centre_delta(&f, &[0]).unwrap();
        assert_eq!(delta.row(1), &[0.0, 0.0]);
        // One sample at (2, 0): (0 - 2) / (1 + 1) = -1.
        assert_eq!(delta.row(0), &[-1.0, 0.0]);

        // Three identical samples at (4, 0): 3·(0 - 4) / (1 + 3) = -3.
        let f = Matrix::from_rows(&[vec![4.0, 0.0], vec![4.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let delta = bank.centre_delta(&f, &[0, 0, 0]).unwrap();
        assert_eq!(delta.row(0), &[-3.0, 0.0]);
    }

    #[test]
    fn apply_update_hand_case_and_fixed_point() {
        let mut bank = CentreBank::init(2, 2, CentreInit::Zeros, 0.5).unwrap();
        bank.apply_update(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(bank.centres(), &Matrix::zeros(2, 2));
        assert_eq!(bank.update_count(), 1);

        let delta = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        bank.apply_update(&delta).unwrap();
        assert_eq!(bank.centres().row(0), &[0.5, 0.0]);
    }

    #[test]
    fn repeated_updates_converge_to_constant_batch() {
        let mut bank = CentreBank::init(2, 2, CentreInit::Zeros, 1.0).unwrap();
        let f = Matrix::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap();
        let labels = [0usize, 0];
        let mut prev = sq_dist(bank.centres().row(0), f.row(0));
        for _ in 0..40 {
            let delta = bank.centre_delta(&f, &labels).unwrap();
            bank.apply_update(&delta).unwrap();
            let cur = sq_dist(bank.centres().row(0), f.row(0));
            assert!(cur <= prev);
            prev = cur;
        }
        // Contraction 1/(1+n) per step with γ = 1.
        assert!(prev < 1e-12);
    }

    #[test]
    fn centre_delta_equivariant_under_relabeling() {
        let mut rng = Rng::new(13, StreamId::Data);
        let centres = random_matrix(&mut rng, 3, 2);
        let f = random_matrix(&mut rng, 5, 2);
        let labels = [0usize, 1, 2, 0, 1];
        // Swap classes 0 and 2 everywhere.
        let perm = [2usize, 1, 0];
        let permuted_labels: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let mut permuted_centres = Matrix::zeros(3, 2);
        for j in 0..3 {
            for d in 0..2 {
                permuted_centres.set(perm[j], d, centres.get(j, d));
            }
        }
        let bank = CentreBank::from_parts(centres, 0.5, 0).unwrap();
        let bank_p = CentreBank::from_parts(permuted_centres, 0.5, 0).unwrap();
        let delta = bank.centre_delta(&f, &labels).unwrap();
        let delta_p = bank_p.centre_delta(&f, &permuted_labels).unwrap();
        for j in 0..3 {
            assert_eq!(delta.row(j), delta_p.row(perm[j]));
        }
    }

    #[test]
    fn nearest_centre_distances_cases() {
        let centres = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let bank = CentreBank::from_parts(centres, 0.5, 0).unwrap();
        assert_eq!(bank.nearest_centre_distances().unwrap(), vec![1.0, 1.0, 4.0]);

        let bank = CentreBank::from_parts(Matrix::zeros(3, 2), 0.5, 0).unwrap();
        assert_eq!(bank.nearest_centre_distances().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn nearest_centre_distances_match_brute_force() {
        let mut rng = Rng::new(19, StreamId::Data);
        let centres = random_matrix(&mut rng, 50, 4);
        let bank = CentreBank::from_parts(centres.clone(), 0.5, 0).unwrap();
        let got = bank.nearest_centre_distances().unwrap();
        for j in 0..50 {
            let mut best = f64::INFINITY;
            for o in 0..50 {
                if o != j {
                    best = best.min(sq_dist(centres.row(j), centres.row(o)));
                }
            }
            assert_eq!(got[j], best);
        }
    }

    #[test]
    fn violating_pairs_cases() {
        let centres = Matrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let bank = CentreBank::from_parts(centres, 0.5, 0).unwrap();
        assert!(bank.violating_pairs(0.0).is_empty());
        let pairs = bank.violating_pairs(280.0);
        assert_eq!(pairs, vec![(0, 1, 100.0)]);
    }

    #[test]
    fn violating_pairs_match_brute_force_and_mml_zero_iff_empty() {
        let mut rng = Rng::new(21, StreamId::Data);
        let centres = random_matrix(&mut rng, 20, 3);
        let bank = CentreBank::from_parts(centres.clone(), 0.5, 0).unwrap();
        for &margin in &[0.0, 1.0, 4.0, 50.0] {
            let got = bank.violating_pairs(margin);
            let mut want = Vec::new();
            for a in 0..20 {
                for b in a + 1..20 {
                    let d2 = sq_dist(centres.row(a), centres.row(b));
                    if d2 < margin {
                        want.push((a, b, d2));
                    }
                }
            }
            want.sort_by(|x, y| x.2.partial_cmp(&y.2).unwrap());
            assert_eq!(got, want);

            let cfg = MmlConfig {
                margin,
                coupling_mode: CouplingMode::Detached,
                pair_scope: PairScope::AllClasses,
            };
            let value = mml(&Matrix::zeros(1, 3), &[0], &centres, &cfg).unwrap().value;
            assert_eq!(got.is_empty(), value == 0.0);
        }
    }
}
