#![allow(dead_code)]

use fgnn_core::fgnn::{FeatureSet, FgnnLayerParams, HalfParams};
use fgnn_core::numkit::{Activation, DenseLayer, DenseNet, Matrix, Tensor};
use fgnn_core::pgm::{Assignment, FactorGraph, FactorNode, VariableNode};
use fgnn_core::synth::Rng;

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

pub fn int(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.int_in(lo as u64, hi as u64) as usize
}

pub fn table(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| uniform(rng, lo, hi)).collect()).unwrap()
}

/// Graph with `2..=max_vars` variables of cardinality `2..=max_card` and
/// factors of arity `1..=3` over distinct variables. Every variable is in
/// at least one factor.
pub fn random_graph(rng: &mut Rng, max_vars: usize, max_card: usize, lo: f64, hi: f64) -> FactorGraph {
    let n = int(rng, 2, max_vars);
    let cards: Vec<usize> = (0..n).map(|_| int(rng, 2, max_card)).collect();
    let vars = (0..n)
        .map(|i| VariableNode::new(i, (0..cards[i]).map(|_| uniform(rng, 0.0, 1.0)).collect()))
        .collect();
    let mut scopes: Vec<Vec<usize>> = (0..n).map(|i| vec![i, (i + 1) % n]).collect();
    scopes.pop();
    for _ in 0..int(rng, 0, 2) {
        let arity = int(rng, 1, 3.min(n));
        let mut pool: Vec<usize> = (0..n).collect();
        let scope = (0..arity).map(|_| pool.swap_remove(int(rng, 0, pool.len() - 1))).collect();
        scopes.push(scope);
    }
    let factors = scopes
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let shape = s.iter().map(|&i| cards[i]).collect();
            FactorNode::new(c, s, table(rng, shape, lo, hi))
        })
        .collect();
    FactorGraph::new(vars, factors).unwrap()
}

pub fn all_assignments(g: &FactorGraph) -> Vec<Assignment> {
    let n = g.num_variables();
    let mut states = vec![0usize; n];
    let mut out = Vec::new();
    loop {
        out.push(Assignment(states.clone()));
        let mut i = 0;
        while i < n {
            states[i] += 1;
            if states[i] < g.cardinality(i) {
                break;
            }
            states[i] = 0;
            i += 1;
        }
        if i == n {
            return out;
        }
    }
}

pub fn dense(rng: &mut Rng, input: usize, output: usize, act: Activation) -> DenseNet {
    let a = (6.0 / (input + output) as f64).sqrt();
    let w = (0..input * output).map(|_| uniform(rng, -a, a)).collect();
    let b = (0..output).map(|_| uniform(rng, -0.1, 0.1)).collect();
    DenseNet::new(input, vec![DenseLayer::new(Matrix::from_vec(output, input, w).unwrap(), b, act).unwrap()]).unwrap()
}

/// FGNN layer whose halves use `M = Linear + ReLU` and a linear `Q`.
pub fn random_layer(rng: &mut Rng, nd: usize, fd: usize, ed: usize, width: usize) -> FgnnLayerParams {
    let mut half = |m_in: usize| {
        let m = dense(rng, m_in, width, Activation::Relu);
        let q = dense(rng, ed, width * width, Activation::Identity);
        HalfParams::new(m, q, width).unwrap()
    };
    let vf = half(fd + nd);
    let fv = half(width + nd);
    FgnnLayerParams { vf, fv }
}

pub fn random_features(rng: &mut Rng, g: &FactorGraph, nd: usize, fd: usize, ed: usize) -> FeatureSet {
    let mut rows = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| uniform(rng, -1.0, 1.0)).collect()).collect()
    };
    let node = rows(g.num_variables(), nd);
    let factor = rows(g.num_factors(), fd);
    let edge = rows(g.edges().len(), ed);
    FeatureSet::new(node, factor, edge).unwrap()
}

/// Reorders factor and edge features to follow `g.permute_factors(perm)`.
pub fn permute_features(g: &FactorGraph, perm: &[usize], f: &FeatureSet) -> FeatureSet {
    let h = g.permute_factors(perm).unwrap();
    let factor = perm.iter().map(|&c| f.factor[c].clone()).collect();
    let edge = h
        .edges()
        .iter()
        .map(|e| {
            let old = g
                .edges()
                .iter()
                .position(|o| o.factor == perm[e.factor] && o.variable == e.variable)
                .unwrap();
            f.edge[old].clone()
        })
        .collect();
    FeatureSet::new(f.node.clone(), factor, edge).unwrap()
}

pub fn shuffled(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, int(rng, 0, i));
    }
    p
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
