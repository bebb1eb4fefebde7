//! Seeded synthetic long-tailed datasets and evaluation-protocol builders
//! (verification pair lists, probe/gallery/distractor splits), plus the
//! JSON-Lines dataset file format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MmlError, Result};
use crate::numeric::{Matrix, Rng, StreamId};

/// Generator parameters. Class k receives a sample share proportional to
/// (k+1)^(-tail_exponent), floored at `min_per_class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Radius of the sphere the ground-truth class means are drawn on.
    pub class_centre_scale: f64,
    pub noise_sigma: f64,
    pub tail_exponent: f64,
    pub min_per_class: usize,
    pub total_samples: usize,
    #[serde(default = "default_heldout_fraction")]
    pub heldout_fraction: f64,
    pub seed: u64,
}

fn default_heldout_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MmlError::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.input_dim < 1 {
            return Err(MmlError::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.min_per_class < 2 {
            return Err(MmlError::InvalidArgument("min_per_class must be >= 2".into()));
        }
        if self.tail_exponent < 0.0 {
            return Err(MmlError::InvalidArgument("tail_exponent must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(MmlError::InvalidArgument(
                "heldout_fraction must be in [0, 1)".into(),
            ));
        }
        if self.num_classes * self.min_per_class > self.total_samples {
            return Err(MmlError::InvalidArgument(format!(
                "infeasible spec: {} classes x {} min samples > {} total",
                self.num_classes, self.min_per_class, self.total_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// In-memory dataset: inputs, dense labels in [0, K), and a split tag per
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Verification pair list: indices into a dataset plus the same-identity flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<(usize, usize, bool)>,
}

/// Identification protocol: one probe and one gallery sample per selected
/// identity, plus distractors from disjoint identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentProtocol {
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
    pub distractors: Vec<usize>,
}

/// Per-class sample counts: proportional to (k+1)^(-s), floored at
/// `min_per_class`, summing exactly to `total`. Largest-remainder rounding.
pub fn longtail_counts(spec: &SyntheticSpec) -> Vec<usize> {
    let k = spec.num_classes;
    let weights: Vec<f64> = (0..k)
        .map(|i| ((i + 1) as f64).powf(-spec.tail_exponent))
        .collect();
    let wsum: f64 = weights.iter().sum();

    let floor_total = k * spec.min_per_class;
    let free = spec.total_samples - floor_total;
    let quotas: Vec<f64> = weights.iter().map(|w| free as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(f64, usize)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (q - q.floor(), i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(free - assigned) {
        counts[i] += 1;
    }
    for c in &mut counts {
        *c += spec.min_per_class;
    }
    counts
}

/// Generate the synthetic long-tailed dataset. Deterministic in the seed.
pub fn gen_longtail(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, StreamId::Data);

    // Ground-truth means uniform on the sphere of the configured radius.
    let mut means = Matrix::zeros(spec.num_classes, spec.input_dim);
    for j in 0..spec.num_classes {
        loop {
            let v: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal(1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (d, x) in v.iter().enumerate() {
                    means.set(j, d, spec.class_centre_scale * x / norm);
                }
                break;
            }
        }
    }

    let counts = longtail_counts(spec);
    let total: usize = counts.iter().sum();
    let mut inputs = Matrix::zeros(total, spec.input_dim);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        let heldout = (spec.heldout_fraction * count as f64).round() as usize;
        for s in 0..count {
            for d in 0..spec.input_dim {
                inputs.set(row, d, means.get(class, d) + rng.normal(spec.noise_sigma));
            }
            labels.push(class);
            // Last `heldout` samples of each class are tagged heldout.
            splits.push(if s >= count - heldout {
                Split::Heldout
            } else {
                Split::Train
            });
            row += 1;
        }
    }

    Ok(Dataset {
        inputs,
        labels,
        splits,
    })
}

/// Sample a balanced verification pair list from one split.
pub fn make_pairs(
    dataset: &Dataset,
    split: Split,
    num_pos: usize,
    num_neg: usize,
    seed: u64,
) -> Result<PairList> {
    let indices = dataset.indices_of(split);

    let mut pos: Vec<(usize, usize)> = Vec::new();
    let mut neg: Vec<(usize, usize)> = Vec::new();
    for (pi, &a) in indices.iter().enumerate() {
        for &b in &indices[pi + 1..] {
            if dataset.labels[a] == dataset.labels[b] {
                pos.push((a, b));
            } else {
                neg.push((a, b));
            }
        }
    }
    if pos.len() < num_pos || neg.len() < num_neg {
        return Err(MmlError::Data(format!(
            "insufficient distinct pairs: have {} positive / {} negative, need {num_pos} / {num_neg}",
            pos.len(),
            neg.len()
        )));
    }

    let mut rng = Rng::new(seed, StreamId::Sampling);
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut pairs = Vec::with_capacity(num_pos + num_neg);
    pairs.extend(pos.into_iter().take(num_pos).map(|(a, b)| (a, b, true)));
    pairs.extend(neg.into_iter().take(num_neg).map(|(a, b)| (a, b, false)));
    Ok(PairList { pairs })
}

/// Build a probe/gallery/distractor identification protocol from the
/// heldout split.
pub fn make_ident_protocol(
    dataset: &Dataset,
    num_probe_ids: usize,
    num_distractors: usize,
    seed: u64,
) -> Result<IdentProtocol> {
    let heldout = dataset.indices_of(Split::Heldout);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &heldout {
        by_class.entry(dataset.labels[i]).or_default().push(i);
    }
    let mut eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < num_probe_ids {
        return Err(MmlError::Data(format!(
            "insufficient identities with >= 2 heldout samples: have {}, need {num_probe_ids}",
            eligible.len()
        )));
    }

    let mut rng = Rng::new(seed, StreamId::Sampling);
    rng.shuffle(&mut eligible);
    let probe_ids: Vec<usize> = eligible[..num_probe_ids].to_vec();

    let mut probes = Vec::with_capacity(num_probe_ids);
    let mut gallery = Vec::with_capacity(num_probe_ids);
    for &c in &probe_ids {
        let samples = &by_class[&c];
        let a = rng.gen_range(samples.len());
        let mut b = rng.gen_range(samples.len() - 1);
        if b >= a {
            b += 1;
        }
        probes.push(samples[a]);
        gallery.push(samples[b]);
    }

    let mut distractor_pool: Vec<usize> = heldout
        .iter()
        .copied()
        .filter(|&i| !probe_ids.contains(&dataset.labels[i]))
        .collect();
    if distractor_pool.len() < num_distractors {
        return Err(MmlError::Data(format!(
            "insufficient distractor candidates: have {}, need {num_distractors}",
            distractor_pool.len()
        )));
    }
    rng.shuffle(&mut distractor_pool);
    let distractors = distractor_pool[..num_distractors].to_vec();

    Ok(IdentProtocol {
        probes,
        gallery,
        distractors,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    label: usize,
    x: Vec<f64>,
    split: Split,
}

/// Write the dataset as JSON-Lines, one record per sample.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for i in 0..dataset.len() {
        let record = SampleRecord {
            label: dataset.labels[i],
            x: dataset.inputs.row(i).to_vec(),
            split: dataset.splits[i],
        };
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| MmlError::Data(format!("serialize sample {i}: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| MmlError::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        match dim {
            None => dim = Some(record.x.len()),
            Some(d) if d != record.x.len() => {
                return Err(MmlError::MalformedRecord {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected {} feature values, got {}", d, record.x.len()),
                });
            }
            _ => {}
        }
        labels.push(record.label);
        splits.push(record.split);
        rows.push(record.x);
    }
    if rows.is_empty() {
        return Err(MmlError::Data(format!(
            "dataset file {} contains no samples",
            path.display()
        )));
    }
    let inputs = Matrix::from_rows(&rows)?;
    Ok(Dataset {
        inputs,
        labels,
        splits,
    })
}
