//! End-to-end embedding training: a small MLP backbone, mini-batch SGD
//! under the three supervision schemes, checkpointing with bit-exact
//! round trips, warm start, a step-decay learning-rate schedule, and a
//! finite-difference gradient checker.
//!
//! One step runs, in order: forward, loss + feature-gradient composition,
//! head update (softmax gradients only), centre-bank update (schemes II
//! and III), embedder update. The sampling PRNG is the only source of
//! randomness in the loop, so (config, seed, dataset) determine the final
//! checkpoint bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::centres::{CentreBank, CentreInit};
use crate::datagen::{Dataset, Split};
use crate::error::{MmlError, Result};
use crate::losses::{
    centre_loss, mml, softmax_ce, ClassifierHead, CouplingMode, MmlConfig, PairScope,
};
use crate::numeric::{Matrix, Rng, RngState, StreamId};

pub const CHECKPOINT_FORMAT: &str = "mml-checkpoint-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// in×out.
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// The embedding network: affine + activation stack, final layer linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl EmbedderParams {
    /// Seeded Gaussian init, scaled by 1/sqrt(fan_in).
    pub fn init(model: &ModelConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![model.input_dim];
        dims.extend_from_slice(&model.hidden);
        dims.push(model.embed_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.normal(scale)).collect();
            layers.push(Layer {
                weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                biases: vec![0.0; fan_out],
                activation: Activation::Linear, // fixed up below
            });
        }
        let count = layers.len();
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.activation = if i + 1 == count {
                Activation::Linear
            } else {
                model.activation
            };
        }
        EmbedderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.rows())
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.cols())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weights.cols()));
        dims
    }

    /// Forward pass returning only the embedding.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.pop().expect("nonempty"))
    }

    /// Forward pass keeping every layer output; index 0 is the input.
    pub fn forward_cached(&self, inputs: &Matrix) -> Result<Vec<Matrix>> {
        if inputs.cols() != self.input_dim() {
            return Err(MmlError::DimensionMismatch(format!(
                "forward: input dim {} vs network input {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for layer in &self.layers {
            let mut z = activations.last().unwrap().matmul(&layer.weights)?;
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = layer.activation.apply(*v + layer.biases[j]);
                }
            }
            activations.push(z);
        }
        Ok(activations)
    }

    /// Reverse-mode gradients of the stack given dL/d(embedding).
    pub fn backward(&self, inputs: &Matrix, grad_features: &Matrix) -> Result<ParamGrads> {
        let activations = self.forward_cached(inputs)?;
        if grad_features.rows() != inputs.rows()
            || grad_features.cols() != self.embed_dim()
        {
            return Err(MmlError::DimensionMismatch(format!(
                "backward: grad is {}x{}, expected {}x{}",
                grad_features.rows(),
                grad_features.cols(),
                inputs.rows(),
                self.embed_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_features.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &activations[l + 1];
            // Through the activation.
            for i in 0..delta.rows() {
                for j in 0..delta.cols() {
                    let d = delta.get(i, j) * layer.activation.derivative_from_output(out.get(i, j));
                    delta.set(i, j, d);
                }
            }
            let grad_w = activations[l].transpose().matmul(&delta)?;
            let mut grad_b = vec![0.0; layer.biases.len()];
            for i in 0..delta.rows() {
                for (j, g) in grad_b.iter_mut().enumerate() {
                    *g += delta.get(i, j);
                }
            }
            grads.push(LayerGrads {
                weights: grad_w,
                biases: grad_b,
            });
            if l > 0 {
                delta = delta.matmul(&layer.weights.transpose())?;
            }
        }
        grads.reverse();
        Ok(ParamGrads { layers: grads })
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

/// Supervision scheme: softmax; softmax + centre; softmax + centre + margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    I,
    II,
    III,
}

impl Scheme {
    pub fn uses_centres(self) -> bool {
        !matches!(self, Scheme::I)
    }

    pub fn uses_mml(self) -> bool {
        matches!(self, Scheme::III)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// Centre-loss weight.
    pub alpha: f64,
    /// Margin-term weight.
    pub beta: f64,
    /// Centre learning rate, in (0, 1].
    pub gamma: f64,
    /// Minimum margin, squared-distance units.
    pub margin: f64,
    #[serde(default = "default_coupling")]
    pub coupling_mode: CouplingMode,
    #[serde(default = "default_pair_scope")]
    pub pair_scope: PairScope,
    pub batch_size: usize,
    pub iterations: u64,
    pub base_lr: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every: u64,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
    #[serde(default = "default_trace_every")]
    pub trace_every: u64,
    #[serde(default = "default_centre_init")]
    pub centre_init: CentreInit,
    pub model: ModelConfig,
}

fn default_coupling() -> CouplingMode {
    CouplingMode::Coupled
}

fn default_pair_scope() -> PairScope {
    PairScope::BatchClasses
}

fn default_decay_every() -> u64 {
    100_000
}

fn default_decay_factor() -> f64 {
    0.1
}

fn default_trace_every() -> u64 {
    1
}

fn default_centre_init() -> CentreInit {
    CentreInit::Zeros
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(MmlError::Config("batch_size must be >= 2".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(MmlError::Config("base_lr must be > 0".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(MmlError::Config("lr_decay_every must be >= 1".into()));
        }
        if self.margin < 0.0 {
            return Err(MmlError::Config("margin must be >= 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MmlError::Config("gamma must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn mml_config(&self) -> MmlConfig {
        MmlConfig {
            margin: self.margin,
            coupling_mode: self.coupling_mode,
            pair_scope: self.pair_scope,
        }
    }

    /// μ_t = base_lr · factor^⌊t / decay_every⌋.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.base_lr
            * self
                .lr_decay_factor
                .powi((iteration / self.lr_decay_every) as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::II,
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.5,
            margin: 0.0,
            coupling_mode: default_coupling(),
            pair_scope: default_pair_scope(),
            batch_size: 32,
            iterations: 1000,
            base_lr: 0.05,
            lr_decay_every: default_decay_every(),
            lr_decay_factor: default_decay_factor(),
            weight_decay: 0.0,
            seed: 1,
            warm_start: None,
            trace_every: default_trace_every(),
            centre_init: default_centre_init(),
            model: ModelConfig {
                input_dim: 16,
                hidden: vec![32],
                embed_dim: 8,
                activation: Activation::Relu,
            },
        }
    }
}

/// One row of the metrics trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_softmax: f64,
    pub loss_centre: f64,
    pub loss_mml: f64,
    pub lr: f64,
    pub min_centre_sqdist: f64,
    pub violating_pairs: usize,
}

pub const TRACE_HEADER: &str =
    "iter,loss_total,loss_softmax,loss_centre,loss_mml,lr,min_centre_sqdist,violating_pairs";

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter,
            r.loss_total,
            r.loss_softmax,
            r.loss_centre,
            r.loss_mml,
            r.lr,
            r.min_centre_sqdist,
            r.violating_pairs
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_softmax: f64,
    pub loss_centre: f64,
    pub loss_mml: f64,
    pub lr: f64,
}

/// Mutable training state plus the deterministic batch sampler.
pub struct Trainer {
    pub params: EmbedderParams,
    pub head: ClassifierHead,
    pub bank: CentreBank,
    pub iteration: u64,
    config: TrainConfig,
    rng: Rng,
    inputs: Matrix,
    labels: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(MmlError::Data("dataset is empty".into()));
        }
        if dataset.input_dim() != config.model.input_dim {
            return Err(MmlError::Config(format!(
                "model input_dim {} does not match dataset dim {}",
                config.model.input_dim,
                dataset.input_dim()
            )));
        }
        let num_classes = dataset.num_classes();
        if num_classes < 2 {
            return Err(MmlError::Data("dataset needs at least 2 classes".into()));
        }
        let train_rows = dataset.indices_of(Split::Train);
        if train_rows.is_empty() {
            return Err(MmlError::Data("train split is empty".into()));
        }

        let (params, head, bank) = match &config.warm_start {
            Some(path) => {
                let checkpoint = Checkpoint::load(path)?;
                let (params, head, bank, _, _) = checkpoint.to_state()?;
                if params.input_dim() != config.model.input_dim
                    || params.embed_dim() != config.model.embed_dim
                {
                    return Err(MmlError::IncompatibleCheckpoint(format!(
                        "warm start network is {}→{}, config wants {}→{}",
                        params.input_dim(),
                        params.embed_dim(),
                        config.model.input_dim,
                        config.model.embed_dim
                    )));
                }
                if head.num_classes() != num_classes {
                    return Err(MmlError::IncompatibleCheckpoint(format!(
                        "warm start head has {} classes, dataset has {num_classes}",
                        head.num_classes()
                    )));
                }
                if bank.num_classes() != num_classes || bank.dim() != config.model.embed_dim {
                    return Err(MmlError::IncompatibleCheckpoint(format!(
                        "warm start centre bank is {}x{}, expected {}x{}",
                        bank.num_classes(),
                        bank.dim(),
                        num_classes,
                        config.model.embed_dim
                    )));
                }
                let bank = CentreBank::from_parts(
                    bank.centres().clone(),
                    config.gamma,
                    bank.update_count(),
                )?;
                (params, head, bank)
            }
            None => {
                let mut init_rng = Rng::new(config.seed, StreamId::Init);
                let params = EmbedderParams::init(&config.model, &mut init_rng);
                let scale = 1.0 / (config.model.embed_dim as f64).sqrt();
                let head_data = (0..config.model.embed_dim * num_classes)
                    .map(|_| init_rng.normal(scale))
                    .collect();
                let head = ClassifierHead {
                    weights: Matrix::from_vec(config.model.embed_dim, num_classes, head_data)?,
                    biases: vec![0.0; num_classes],
                };
                let bank = CentreBank::init(
                    num_classes,
                    config.model.embed_dim,
                    config.centre_init,
                    config.gamma,
                )?;
                (params, head, bank)
            }
        };

        // Train-split views.
        let mut inputs = Matrix::zeros(train_rows.len(), dataset.input_dim());
        let mut labels = Vec::with_capacity(train_rows.len());
        for (i, &row) in train_rows.iter().enumerate() {
            inputs.row_mut(i).copy_from_slice(dataset.inputs.row(row));
            labels.push(dataset.labels[row]);
        }

        Ok(Trainer {
            params,
            head,
            bank,
            iteration: 0,
            rng: Rng::new(config.seed, StreamId::Sampling),
            order: (0..train_rows.len()).collect(),
            cursor: usize::MAX, // forces a shuffle before the first batch
            config,
            inputs,
            labels,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Next mini-batch under the per-epoch uniform shuffle. The final
    /// partial batch of an epoch is kept.
    pub fn next_batch(&mut self) -> (Matrix, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let rows = &self.order[self.cursor..end];
        let mut batch = Matrix::zeros(rows.len(), self.inputs.cols());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, &r) in rows.iter().enumerate() {
            batch.row_mut(i).copy_from_slice(self.inputs.row(r));
            labels.push(self.labels[r]);
        }
        self.cursor = end;
        (batch, labels)
    }

    /// One optimization step over the given batch.
    pub fn step(&mut self, batch: &Matrix, labels: &[usize]) -> Result<StepStats> {
        let lr = self.config.lr_at(self.iteration);
        let activations = self.params.forward_cached(batch)?;
        let features = activations.last().unwrap();

        let ls = softmax_ce(features, labels, &self.head)?;
        let mut grad_features = ls.grad_features.clone();
        let mut loss_total = ls.value;
        let mut loss_centre = 0.0;
        let mut loss_mml = 0.0;

        let mut delta = None;
        if self.config.scheme.uses_centres() {
            let lc = centre_loss(features, labels, self.bank.centres())?;
            loss_centre = lc.value;
            // Exact-zero coefficients contribute nothing, keeping reduced
            // schemes bit-identical.
            if self.config.alpha != 0.0 {
                loss_total += self.config.alpha * lc.value;
                grad_features.axpy(self.config.alpha, &lc.grad_features)?;
            }
            delta = Some(self.bank.centre_delta(features, labels)?);
        }
        if self.config.scheme.uses_mml() {
            let lm = mml(features, labels, self.bank.centres(), &self.config.mml_config())?;
            loss_mml = lm.value;
            if self.config.beta != 0.0 {
                loss_total += self.config.beta * lm.value;
                grad_features.axpy(self.config.beta, &lm.grad_features)?;
            }
        }

        if !loss_total.is_finite() {
            return Err(MmlError::Divergence {
                iteration: self.iteration,
                detail: format!(
                    "loss_total={loss_total}, loss_softmax={}, loss_centre={loss_centre}, loss_mml={loss_mml}",
                    ls.value
                ),
            });
        }

        // Head update: softmax gradients only.
        let grad_w = ls.grad_weights.expect("softmax_ce sets grad_weights");
        let grad_b = ls.grad_biases.expect("softmax_ce sets grad_biases");
        if self.config.weight_decay != 0.0 {
            let decayed = self.head.weights.clone();
            self.head.weights.axpy(-lr * self.config.weight_decay, &decayed)?;
        }
        self.head.weights.axpy(-lr, &grad_w)?;
        for (b, g) in self.head.biases.iter_mut().zip(grad_b.iter()) {
            *b -= lr * g;
        }

        // Centre-bank rule update.
        if let Some(delta) = delta {
            self.bank.apply_update(&delta)?;
        }

        // Embedder update.
        let grads = self.params.backward(batch, &grad_features)?;
        for (layer, g) in self.params.layers.iter_mut().zip(grads.layers.iter()) {
            if self.config.weight_decay != 0.0 {
                let decayed = layer.weights.clone();
                layer.weights.axpy(-lr * self.config.weight_decay, &decayed)?;
            }
            layer.weights.axpy(-lr, &g.weights)?;
            for (b, gb) in layer.biases.iter_mut().zip(g.biases.iter()) {
                *b -= lr * gb;
            }
        }

        self.iteration += 1;
        Ok(StepStats {
            loss_total,
            loss_softmax: ls.value,
            loss_centre,
            loss_mml,
            lr,
        })
    }

    fn trace_row(&self, stats: &StepStats) -> TraceRow {
        let min_centre_sqdist = self
            .bank
            .nearest_centre_distances()
            .map(|v| v.into_iter().fold(f64::INFINITY, f64::min))
            .unwrap_or(f64::NAN);
        TraceRow {
            iter: self.iteration,
            loss_total: stats.loss_total,
            loss_softmax: stats.loss_softmax,
            loss_centre: stats.loss_centre,
            loss_mml: stats.loss_mml,
            lr: stats.lr,
            min_centre_sqdist,
            violating_pairs: self.bank.violating_pairs(self.config.margin).len(),
        }
    }

    /// Run the configured number of iterations, appending trace rows.
    pub fn run(&mut self, trace: &mut Vec<TraceRow>) -> Result<()> {
        for _ in 0..self.config.iterations {
            let (batch, labels) = self.next_batch();
            let stats = self.step(&batch, &labels)?;
            if self.iteration % self.config.trace_every == 0 {
                trace.push(self.trace_row(&stats));
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(
            &self.config,
            &self.params,
            &self.head,
            &self.bank,
            self.iteration,
            &self.rng.state(),
        )
    }

    /// Fraction of the given samples whose argmax logit is the true class.
    pub fn training_accuracy(&self) -> Result<f64> {
        let features = self.params.forward(&self.inputs)?;
        Ok(classification_accuracy(&features, &self.labels, &self.head)?)
    }
}

pub fn classification_accuracy(
    features: &Matrix,
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<f64> {
    let logits = features.matmul(&head.weights)?;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..head.num_classes() {
            let v = logits.get(i, j) + head.biases[j];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Train per the config and return the final checkpoint plus metrics trace.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<TraceRow>)> {
    let mut trainer = Trainer::new(config, dataset)?;
    let mut trace = Vec::new();
    trainer.run(&mut trace)?;
    Ok((trainer.checkpoint(), trace))
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

fn floats_to_strings(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| format!("{v}")).collect()
}

fn strings_to_floats(values: &[String]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| MmlError::Data(format!("bad float literal {s:?} in checkpoint")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<String>,
}

impl MatrixData {
    fn from_matrix(m: &Matrix) -> Self {
        MatrixData {
            rows: m.rows(),
            cols: m.cols(),
            values: floats_to_strings(m.data()),
        }
    }

    fn to_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(self.rows, self.cols, strings_to_floats(&self.values)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerData {
    pub weights: MatrixData,
    pub biases: Vec<String>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankData {
    pub centres: MatrixData,
    pub gamma: String,
    pub update_count: u64,
}

/// Self-describing checkpoint. All floats are decimal strings whose
/// shortest round-trip representation preserves every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub embedder: Vec<LayerData>,
    pub head_weights: MatrixData,
    pub head_biases: Vec<String>,
    pub centre_bank: BankData,
}

impl Checkpoint {
    pub fn from_state(
        config: &TrainConfig,
        params: &EmbedderParams,
        head: &ClassifierHead,
        bank: &CentreBank,
        iteration: u64,
        rng: &RngState,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            iteration,
            rng: rng.clone(),
            embedder: params
                .layers
                .iter()
                .map(|l| LayerData {
                    weights: MatrixData::from_matrix(&l.weights),
                    biases: floats_to_strings(&l.biases),
                    activation: l.activation,
                })
                .collect(),
            head_weights: MatrixData::from_matrix(&head.weights),
            head_biases: floats_to_strings(&head.biases),
            centre_bank: BankData {
                centres: MatrixData::from_matrix(bank.centres()),
                gamma: format!("{}", bank.gamma()),
                update_count: bank.update_count(),
            },
        }
    }

    #[allow(clippy::type_complexity)]
    pub fn to_state(
        &self,
    ) -> Result<(EmbedderParams, ClassifierHead, CentreBank, u64, RngState)> {
        let layers = self
            .embedder
            .iter()
            .map(|l| {
                Ok(Layer {
                    weights: l.weights.to_matrix()?,
                    biases: strings_to_floats(&l.biases)?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = ClassifierHead {
            weights: self.head_weights.to_matrix()?,
            biases: strings_to_floats(&self.head_biases)?,
        };
        let gamma = self
            .centre_bank
            .gamma
            .parse::<f64>()
            .map_err(|_| MmlError::Data("bad gamma in checkpoint".into()))?;
        let bank = CentreBank::from_parts(
            self.centre_bank.centres.to_matrix()?,
            gamma,
            self.centre_bank.update_count,
        )?;
        Ok((
            EmbedderParams { layers },
            head,
            bank,
            self.iteration,
            self.rng.clone(),
        ))
    }

    pub fn embedder_params(&self) -> Result<EmbedderParams> {
        Ok(self.to_state()?.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| MmlError::Data(format!("bad checkpoint {}: {e}", path.display())))?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(MmlError::IncompatibleCheckpoint(format!(
                "unknown checkpoint format {:?}",
                checkpoint.format
            )));
        }
        Ok(checkpoint)
    }
}

// ---------------------------------------------------------------------------
// Gradient checker
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Test hook: perturb the analytic gradient so the check must fail.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            epsilon: 1e-5,
            tolerance: 1e-4,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub samples: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn batch_class_means(features: &Matrix, labels: &[usize], num_classes: usize) -> Matrix {
    let mut means = Matrix::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for d in 0..features.cols() {
            *means.row_mut(y).get_mut(d).unwrap() += features.get(i, d);
        }
    }
    for j in 0..num_classes {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for v in means.row_mut(j) {
                *v *= inv;
            }
        }
    }
    means
}

struct FlatParams<'a> {
    params: &'a mut EmbedderParams,
    head: &'a mut ClassifierHead,
}

impl FlatParams<'_> {
    fn len(&self) -> usize {
        let embedder: usize = self
            .params
            .layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.len())
            .sum();
        embedder + self.head.weights.data().len() + self.head.biases.len()
    }

    fn get(&self, mut idx: usize) -> f64 {
        for l in &self.params.layers {
            let w = l.weights.data().len();
            if idx < w {
                return l.weights.data()[idx];
            }
            idx -= w;
            if idx < l.biases.len() {
                return l.biases[idx];
            }
            idx -= l.biases.len();
        }
        let w = self.head.weights.data().len();
        if idx < w {
            return self.head.weights.data()[idx];
        }
        self.head.biases[idx - w]
    }

    fn set(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.params.layers {
            let w = l.weights.data().len();
            if idx < w {
                l.weights.data_mut()[idx] = value;
                return;
            }
            idx -= w;
            if idx < l.biases.len() {
                l.biases[idx] = value;
                return;
            }
            idx -= l.biases.len();
        }
        let w = self.head.weights.data().len();
        if idx < w {
            self.head.weights.data_mut()[idx] = value;
        } else {
            self.head.biases[idx - w] = value;
        }
    }
}

/// Max relative error between analytic and central-difference gradients of
/// the scheme's objective, probed at random parameter coordinates across a
/// few training states.
///
/// In coupled mode the margin term is evaluated against its batch-mean
/// surrogate, the composition the coupled feature gradient is defined for.
pub fn gradcheck(
    config: &TrainConfig,
    dataset: &Dataset,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.epsilon <= 0.0 {
        return Err(MmlError::InvalidArgument("epsilon must be > 0".into()));
    }
    let mut trainer = Trainer::new(config.clone(), dataset)?;
    let num_classes = trainer.head.num_classes();
    let mut check_rng = Rng::new(config.seed, StreamId::GradCheck);

    let states = 3usize;
    let per_state = opts.samples.div_ceil(states);
    let mut max_rel_err: f64 = 0.0;
    let mut failures = Vec::new();
    let mut probed = 0usize;

    for state in 0..states {
        if state > 0 {
            for _ in 0..5 {
                let (batch, labels) = trainer.next_batch();
                trainer.step(&batch, &labels)?;
            }
        }
        let (batch, labels) = trainer.next_batch();
        let bank_centres = trainer.bank.centres().clone();
        let cfg = config.mml_config();

        let objective = |params: &EmbedderParams, head: &ClassifierHead| -> Result<f64> {
            let features = params.forward(&batch)?;
            let mut total = softmax_ce(&features, &labels, head)?.value;
            if config.scheme.uses_centres() && config.alpha != 0.0 {
                total += config.alpha * centre_loss(&features, &labels, &bank_centres)?.value;
            }
            if config.scheme.uses_mml() && config.beta != 0.0 {
                let centres = match config.coupling_mode {
                    CouplingMode::Coupled => batch_class_means(&features, &labels, num_classes),
                    CouplingMode::Detached => bank_centres.clone(),
                };
                total += config.beta * mml(&features, &labels, &centres, &cfg)?.value;
            }
            Ok(total)
        };

        // Analytic gradient at the current state.
        let features = trainer.params.forward(&batch)?;
        let ls = softmax_ce(&features, &labels, &trainer.head)?;
        let mut grad_features = ls.grad_features.clone();
        if config.scheme.uses_centres() && config.alpha != 0.0 {
            let lc = centre_loss(&features, &labels, &bank_centres)?;
            grad_features.axpy(config.alpha, &lc.grad_features)?;
        }
        if config.scheme.uses_mml() && config.beta != 0.0 {
            let centres = match config.coupling_mode {
                CouplingMode::Coupled => batch_class_means(&features, &labels, num_classes),
                CouplingMode::Detached => bank_centres.clone(),
            };
            let lm = mml(&features, &labels, &centres, &cfg)?;
            grad_features.axpy(config.beta, &lm.grad_features)?;
        }
        let param_grads = trainer.params.backward(&batch, &grad_features)?;

        let analytic_at = |idx: usize| -> f64 {
            let mut i = idx;
            for g in &param_grads.layers {
                let w = g.weights.data().len();
                if i < w {
                    return g.weights.data()[i];
                }
                i -= w;
                if i < g.biases.len() {
                    return g.biases[i];
                }
                i -= g.biases.len();
            }
            let gw = ls.grad_weights.as_ref().expect("softmax grads");
            if i < gw.data().len() {
                return gw.data()[i];
            }
            ls.grad_biases.as_ref().expect("softmax grads")[i - gw.data().len()]
        };

        let mut params = trainer.params.clone();
        let mut head = trainer.head.clone();
        let mut flat = FlatParams {
            params: &mut params,
            head: &mut head,
        };
        let total_coords = flat.len();

        for _ in 0..per_state {
            if probed >= opts.samples {
                break;
            }
            probed += 1;
            let idx = check_rng.gen_range(total_coords);
            let orig = flat.get(idx);
            flat.set(idx, orig + opts.epsilon);
            let hi = objective(flat.params, flat.head)?;
            flat.set(idx, orig - opts.epsilon);
            let lo = objective(flat.params, flat.head)?;
            flat.set(idx, orig);
            let numeric = (hi - lo) / (2.0 * opts.epsilon);
            let mut analytic = analytic_at(idx);
            if opts.corrupt_analytic {
                analytic += 1.0;
            }
            // Floor the denominator so finite-difference noise on near-zero
            // coordinates does not dominate.
            let rel_err = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1e-3);
            max_rel_err = max_rel_err.max(rel_err);
            if rel_err > opts.tolerance {
                failures.push(GradCheckFailure {
                    coordinate: idx,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }

    Ok(GradCheckReport {
        samples: probed,
        epsilon: opts.epsilon,
        tolerance: opts.tolerance,
        max_rel_err,
        failures,
    })
}
