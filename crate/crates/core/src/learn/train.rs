use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{agreement, backward_with_logits};
use crate::error::{bail, Result};
use crate::fgnn::{FeatureSet, FgnnLayerParams, FgnnStack, HalfParams, Residual, StackLayer};
use crate::maxprod::first_argmax;
use crate::numkit::{Activation, DenseLayer, DenseNet, Matrix};
use crate::pgm::{Assignment, FactorGraph};
use crate::synth::{DatasetInstance, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            decay: 0.98,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bail!(Argument, "learning rate must be a finite non-negative number");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            bail!(Argument, "decay must lie in (0, 1], got {}", self.decay);
        }
        if self.batch_size == 0 {
            bail!(Argument, "batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            bail!(Argument, "Adam needs betas in [0, 1) and a positive epsilon");
        }
        Ok(())
    }

    /// Step size used during `epoch` (counting from 0).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

/// One line of the training log. `train_agreement` and `loss` are averaged
/// over the epoch, each instance scored just before its own update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_agreement: f64,
    pub val_agreement: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub stack: FgnnStack,
    pub log: Vec<EpochLog>,
}

/// Mean and population standard deviation of per-instance agreement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl AgreementStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

/// Per-variable argmax of the stack's node outputs, restricted to the
/// variable's own states.
pub fn predict(stack: &FgnnStack, g: &FactorGraph, feats: &FeatureSet) -> Result<Assignment> {
    let out = stack.node_outputs(g, feats)?;
    let mut states = Vec::with_capacity(out.len());
    for (i, z) in out.iter().enumerate() {
        let k = g.cardinality(i);
        if z.len() < k {
            bail!(Shape, "variable {i} has {k} states but the stack emits {} outputs", z.len());
        }
        states.push(first_argmax(&z[..k]));
    }
    Ok(Assignment(states))
}

pub fn evaluate(stack: &FgnnStack, instances: &[DatasetInstance]) -> Result<AgreementStats> {
    let values: Vec<f64> = instances
        .par_iter()
        .map(|inst| agreement(&predict(stack, &inst.graph, &inst.features)?, &inst.label))
        .collect::<Result<_>>()?;
    Ok(AgreementStats::from_values(&values))
}

/// Adam over shuffled mini-batches with a per-epoch geometric step decay.
/// The batch gradient is the mean of per-instance gradients, summed in
/// instance order, so results do not depend on the thread count.
pub fn train(
    train_set: &[DatasetInstance],
    val_set: &[DatasetInstance],
    cfg: &TrainConfig,
    init: &FgnnStack,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        bail!(Argument, "training set is empty");
    }
    let mut stack = init.clone();
    let mut params = stack.params_flat();
    let mut adam = Adam::new(params.len(), cfg);
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for j in (1..order.len()).rev() {
            order.swap(j, rng.int_in(0, j as u64) as usize);
        }
        let mut loss_sum = 0.0;
        let mut agree_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>, f64)> = batch
                .par_iter()
                .map(|&k| {
                    let inst = &train_set[k];
                    let (loss, g, logits) = backward_with_logits(&stack, &inst.graph, &inst.features, &inst.label)?;
                    let pred = Assignment(
                        logits
                            .iter()
                            .enumerate()
                            .map(|(i, z)| first_argmax(&z[..inst.graph.cardinality(i).min(z.len())]))
                            .collect(),
                    );
                    Ok((loss, g.params_flat(), agreement(&pred, &inst.label)?))
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; params.len()];
            for (loss, g, agree) in &results {
                loss_sum += loss;
                agree_sum += agree;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut params, &grad, lr);
            stack.set_params_flat(&params)?;
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_agreement: agree_sum / train_set.len() as f64,
            val_agreement: if val_set.is_empty() {
                None
            } else {
                Some(evaluate(&stack, val_set)?.mean)
            },
            loss: loss_sum / train_set.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainResult { stack, log })
}

fn glorot_matrix(m: &mut Matrix, rng: &mut Rng) {
    let a = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
    for w in m.data_mut() {
        *w = a * (2.0 * rng.uniform() - 1.0);
    }
}

fn glorot_net(net: &mut DenseNet, rng: &mut Rng) {
    for layer in net.layers_mut() {
        glorot_matrix(&mut layer.weight, rng);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

fn glorot_layers(layers: &mut [StackLayer], rng: &mut Rng) {
    for layer in layers {
        match layer {
            StackLayer::Fgnn(p) => {
                for net in [&mut p.vf.m, &mut p.vf.q, &mut p.fv.m, &mut p.fv.q] {
                    glorot_net(net, rng);
                }
            }
            StackLayer::Dense { node, factor } => {
                glorot_net(node, rng);
                glorot_net(factor, rng);
            }
            StackLayer::Residual(r) => {
                glorot_layers(&mut r.inner, rng);
                for m in [&mut r.node_proj, &mut r.factor_proj].into_iter().flatten() {
                    glorot_matrix(m, rng);
                }
            }
        }
    }
}

/// Re-draws every weight uniformly from `[-a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))` and zeroes every bias, visiting
/// parameters in storage order.
pub fn glorot_init(stack: &mut FgnnStack, seed: u64) {
    let mut rng = Rng::new(seed);
    glorot_layers(stack.layers_mut_internal(), &mut rng);
    if let Some(mut r) = stack.readout().cloned() {
        glorot_net(&mut r, &mut rng);
        stack.readout_mut_internal(r);
    }
}

fn linear(input: usize, output: usize, activation: Activation) -> DenseNet {
    let layer = DenseLayer::new(Matrix::zeros(output, input), vec![0.0; output], activation)
        .expect("bias length matches");
    DenseNet::new(input, vec![layer]).expect("single layer chains")
}

fn fgnn_layer(node_dim: usize, factor_dim: usize, edge_dim: usize, width: usize) -> FgnnLayerParams {
    let half = |m_in: usize| {
        HalfParams::new(
            linear(m_in, width, Activation::Relu),
            linear(edge_dim, width * width, Activation::Identity),
            width,
        )
        .expect("Q emits width x width")
    };
    FgnnLayerParams {
        vf: half(factor_dim + node_dim),
        fv: half(width + node_dim),
    }
}

/// `FGNN(w) → Res[FGNN(w)] → FGNN(w) → Linear(w → classes)`, where each
/// half uses `M = Linear + ReLU` and `Q = Linear(edge → w·w)`, with Glorot
/// initialisation from `seed`.
pub fn desk_architecture(
    node_dim: usize,
    factor_dim: usize,
    edge_dim: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> FgnnStack {
    let layers = vec![
        StackLayer::Fgnn(fgnn_layer(node_dim, factor_dim, edge_dim, width)),
        StackLayer::Residual(Residual {
            inner: vec![StackLayer::Fgnn(fgnn_layer(width, width, edge_dim, width))],
            node_proj: None,
            factor_proj: None,
        }),
        StackLayer::Fgnn(fgnn_layer(width, width, edge_dim, width)),
    ];
    let readout = linear(width, classes, Activation::Identity);
    let mut stack =
        FgnnStack::new(node_dim, factor_dim, edge_dim, layers, Some(readout)).expect("desk layers chain");
    glorot_init(&mut stack, seed);
    stack
}
