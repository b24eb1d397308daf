//! Reverse-mode gradients through FGNN stacks and a small training loop.
//!
//! The network is piecewise linear apart from the final softmax, so the
//! tape only needs layer-level intermediates: pre-activations of every dense
//! layer, the `Q` matrices, and which edge won each max. Gradients of a max
//! flow to the winning edge; ties go to the lowest edge index.

mod train;

pub use train::{
    desk_architecture, evaluate, glorot_init, predict, train, Adam, AgreementStats, EpochLog, TrainConfig,
    TrainResult,
};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{bail, Result};
use crate::fgnn::stack::{backward_layers, forward_layers, LayerTrace};
use crate::fgnn::{EdgeKeys, FeatureSet, FgnnStack, HalfTrace};
use crate::numkit::DenseTrace;
use crate::pgm::{Assignment, FactorGraph};

/// Record of one traced forward pass.
#[derive(Debug)]
pub struct GradientTape {
    keys: EdgeKeys,
    layers: Vec<LayerTrace>,
    readout: Vec<DenseTrace>,
    consumed: bool,
}

/// Forward pass through `stack` and its readout, recording a tape.
pub fn forward_traced(stack: &FgnnStack, g: &FactorGraph, feats: &FeatureSet) -> Result<(Vec<Vec<f64>>, GradientTape)> {
    let (nd, fd, ed) = stack.input_dims();
    feats.check(g, nd, fd, ed)?;
    let keys = EdgeKeys::new(&feats.edge);
    let mut layers = Vec::new();
    let (node, _) = forward_layers(
        stack.layers(),
        g,
        &keys,
        feats.node.clone(),
        feats.factor.clone(),
        Some(&mut layers),
    )?;
    let mut readout = Vec::new();
    let out = match stack.readout() {
        Some(r) => node
            .into_iter()
            .map(|x| {
                let (y, t) = r.forward_traced_from(0, x);
                readout.push(t);
                y
            })
            .collect(),
        None => node,
    };
    Ok((
        out,
        GradientTape {
            keys,
            layers,
            readout,
            consumed: false,
        },
    ))
}

impl GradientTape {
    /// Gradients of `Σ_i ⟨d_out_i, out_i⟩` with respect to every parameter
    /// of `stack`, returned in a stack of the same shape.
    pub fn backward(&mut self, stack: &FgnnStack, g: &FactorGraph, d_out: Vec<Vec<f64>>) -> Result<FgnnStack> {
        if self.consumed {
            bail!(State, "gradient tape has already been consumed");
        }
        if self.layers.len() != stack.layers().len() || d_out.len() != g.num_variables() {
            bail!(Shape, "tape does not match this stack and graph");
        }
        self.consumed = true;
        let mut grads = stack.zeros_like();
        let d_node = match stack.readout() {
            Some(r) => {
                let mut gr = r.zeros_like();
                let d = d_out
                    .into_iter()
                    .zip(&self.readout)
                    .map(|(d, t)| r.backward_from(0, t, d, &mut gr))
                    .collect();
                grads.readout_mut_internal(gr);
                d
            }
            None => d_out,
        };
        let (_, fd) = stack.output_dims();
        let d_factor = vec![vec![0.0; fd]; g.num_factors()];
        let layers = std::mem::take(&mut self.layers);
        backward_layers(stack.layers(), &layers, g, &self.keys, d_node, d_factor, grads.layers_mut_internal());
        Ok(grads)
    }

    /// Hash of every ReLU sign and every max winner. Two inputs with the same
    /// pattern lie in the same linear piece of the network.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        fn dense(t: &DenseTrace, h: &mut DefaultHasher) {
            for pre in t.pre() {
                for v in pre {
                    (*v > 0.0).hash(h);
                }
            }
        }
        fn half(t: &HalfTrace, h: &mut DefaultHasher) {
            t.argmax.hash(h);
            for pre in &t.pre1 {
                for v in pre {
                    (*v > 0.0).hash(h);
                }
            }
            for r in t.rest.iter().chain(&t.q_traces) {
                dense(r, h);
            }
        }
        fn layer(t: &LayerTrace, h: &mut DefaultHasher) {
            match t {
                LayerTrace::Fgnn { vf, fv, .. } => {
                    half(vf, h);
                    half(fv, h);
                }
                LayerTrace::Dense { node, factor } => {
                    for d in node.iter().chain(factor) {
                        dense(d, h);
                    }
                }
                LayerTrace::Residual { inner, .. } => inner.iter().for_each(|t| layer(t, h)),
            }
        }
        self.layers.iter().for_each(|t| layer(t, &mut h));
        self.readout.iter().for_each(|t| dense(t, &mut h));
        h.finish()
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn check_label(logits: &[Vec<f64>], label: &Assignment) -> Result<()> {
    if logits.len() != label.len() {
        bail!(Argument, "{} logit vectors for {} labels", logits.len(), label.len());
    }
    for (i, (z, &y)) in logits.iter().zip(label.states()).enumerate() {
        if y >= z.len() {
            bail!(Index, "label {y} of variable {i} is outside its {} logits", z.len());
        }
    }
    Ok(())
}

/// Mean over variables of softmax cross-entropy against `label`.
pub fn loss_map_xent(logits: &[Vec<f64>], label: &Assignment) -> Result<f64> {
    check_label(logits, label)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits.iter().zip(label.states()).map(|(z, &y)| -log_softmax(z)[y]).sum();
    Ok(total / logits.len() as f64)
}

/// Loss and its gradient with respect to the logits.
pub fn loss_map_xent_grad(logits: &[Vec<f64>], label: &Assignment) -> Result<(f64, Vec<Vec<f64>>)> {
    let loss = loss_map_xent(logits, label)?;
    let n = logits.len().max(1) as f64;
    let grad = logits
        .iter()
        .zip(label.states())
        .map(|(z, &y)| {
            log_softmax(z)
                .iter()
                .enumerate()
                .map(|(k, lp)| (lp.exp() - if k == y { 1.0 } else { 0.0 }) / n)
                .collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Loss on one instance and the gradient of every parameter.
pub fn backward(stack: &FgnnStack, g: &FactorGraph, feats: &FeatureSet, label: &Assignment) -> Result<(f64, FgnnStack)> {
    backward_with_logits(stack, g, feats, label).map(|(loss, grads, _)| (loss, grads))
}

pub(crate) fn backward_with_logits(
    stack: &FgnnStack,
    g: &FactorGraph,
    feats: &FeatureSet,
    label: &Assignment,
) -> Result<(f64, FgnnStack, Vec<Vec<f64>>)> {
    let (logits, mut tape) = forward_traced(stack, g, feats)?;
    let (loss, d) = loss_map_xent_grad(&logits, label)?;
    let grads = tape.backward(stack, g, d)?;
    Ok((loss, grads, logits))
}

/// Fraction of variables on which `pred` and `label` agree.
pub fn agreement(pred: &Assignment, label: &Assignment) -> Result<f64> {
    if pred.len() != label.len() {
        bail!(Argument, "assignments have lengths {} and {}", pred.len(), label.len());
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let same = pred.states().iter().zip(label.states()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let l = loss_map_xent(&[vec![0.0, 0.0]], &Assignment(vec![0])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = loss_map_xent(&[vec![20.0, -20.0]], &Assignment(vec![0])).unwrap();
        assert!(l < 1e-15);
        assert!(matches!(
            loss_map_xent(&[vec![0.0, 0.0]], &Assignment(vec![2])),
            Err(crate::Error::Index(_))
        ));
    }

    #[test]
    fn agreement_examples() {
        let a = |v: &[usize]| Assignment(v.to_vec());
        assert_eq!(agreement(&a(&[0, 1, 1]), &a(&[0, 1, 1])).unwrap(), 1.0);
        assert_eq!(agreement(&a(&[0, 1, 1]), &a(&[1, 0, 0])).unwrap(), 0.0);
        assert_eq!(agreement(&a(&[0, 1, 1, 0]), &a(&[0, 1, 0, 0])).unwrap(), 0.75);
        assert!(matches!(agreement(&a(&[0]), &a(&[0, 1])), Err(crate::Error::Argument(_))));
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let z = vec![vec![0.3, -1.2, 0.5], vec![2.0, 1.0, -0.5]];
        let y = Assignment(vec![2, 0]);
        let (_, g) = loss_map_xent_grad(&z, &y).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..3 {
                let mut zp = z.clone();
                zp[i][k] += h;
                let mut zm = z.clone();
                zm[i][k] -= h;
                let fd = (loss_map_xent(&zp, &y).unwrap() - loss_map_xent(&zm, &y).unwrap()) / (2.0 * h);
                assert!((fd - g[i][k]).abs() < 1e-8);
            }
        }
    }
}
