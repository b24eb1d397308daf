//! Shared forward and backward pass of one FGNN half.
//!
//! Both halves evaluate `Q(t_e) · M([g_c, f_i])` on every edge `e = (c, i)`
//! and differ only in how edges are grouped for the max. The first layer of
//! `M` is split as `W_g·g_c + W_f·f_i + b` so the two products can be
//! computed once per factor and once per node; this split is the definition
//! used everywhere, so traced and untraced passes agree bit for bit.

use std::collections::HashMap;

use super::HalfParams;
use crate::error::{bail, Result};
use crate::numkit::{DenseTrace, Matrix};
use crate::pgm::FactorGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    VarToFactor,
    FactorToVar,
}

/// Edge features deduplicated so `Q` runs once per distinct vector.
#[derive(Clone, Debug)]
pub(crate) struct EdgeKeys {
    pub(crate) of_edge: Vec<usize>,
    pub(crate) distinct: Vec<Vec<f64>>,
}

impl EdgeKeys {
    pub(crate) fn new(edge_feats: &[Vec<f64>]) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut distinct = Vec::new();
        let of_edge = edge_feats
            .iter()
            .map(|t| {
                let bits: Vec<u64> = t.iter().map(|v| v.to_bits()).collect();
                *index.entry(bits).or_insert_with(|| {
                    distinct.push(t.clone());
                    distinct.len() - 1
                })
            })
            .collect();
        Self { of_edge, distinct }
    }
}

/// Intermediates of one traced half.
#[derive(Clone, Debug, Default)]
pub(crate) struct HalfTrace {
    pub(crate) q_mats: Vec<Matrix>,
    pub(crate) q_traces: Vec<DenseTrace>,
    /// First-layer pre-activation of `M`, per edge.
    pub(crate) pre1: Vec<Vec<f64>>,
    /// Trace of the remaining `M` layers, per edge.
    pub(crate) rest: Vec<DenseTrace>,
    pub(crate) m_out: Vec<Vec<f64>>,
    /// Winning edge for every (target, row).
    pub(crate) argmax: Vec<Vec<usize>>,
}

/// Edge lists grouped by aggregation target, ascending edge index.
pub(crate) fn edge_groups(g: &FactorGraph, dir: Direction) -> Result<Vec<Vec<usize>>> {
    let groups: Vec<Vec<usize>> = match dir {
        Direction::VarToFactor => (0..g.num_factors()).map(|c| g.factor_edges(c).collect()).collect(),
        Direction::FactorToVar => (0..g.num_variables()).map(|i| g.variable_edges(i).to_vec()).collect(),
    };
    if let Some(t) = groups.iter().position(Vec::is_empty) {
        match dir {
            Direction::VarToFactor => bail!(Structure, "factor {t} has no incident variable"),
            Direction::FactorToVar => bail!(Structure, "variable {t} has no incident factor"),
        }
    }
    Ok(groups)
}

pub(crate) fn half_forward(
    p: &HalfParams,
    g: &FactorGraph,
    dir: Direction,
    factor_feats: &[Vec<f64>],
    node_feats: &[Vec<f64>],
    keys: &EdgeKeys,
    mut trace: Option<&mut HalfTrace>,
) -> Result<Vec<Vec<f64>>> {
    let groups = edge_groups(g, dir)?;
    let node_dim = node_feats.first().map_or(0, Vec::len);
    let dg = p.m.input_dim() - node_dim;

    let mut q_mats = Vec::with_capacity(keys.distinct.len());
    for t in &keys.distinct {
        let flat = match trace.as_deref_mut() {
            Some(tr) => {
                let (y, qt) = p.q.forward_traced_from(0, t.clone());
                tr.q_traces.push(qt);
                y
            }
            None => p.q.forward_from(0, t.clone()),
        };
        q_mats.push(Matrix::from_vec(p.rows, p.cols, flat)?);
    }

    let first = p.m.layers().first();
    let (pg, pf): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match first {
        Some(l) => (
            factor_feats.iter().map(|x| l.weight.matvec_block(0, x)).collect(),
            node_feats.iter().map(|x| l.weight.matvec_block(dg, x)).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };

    let mut ys = Vec::with_capacity(g.edges().len());
    for (e, edge) in g.edges().iter().enumerate() {
        let m = match first {
            None => {
                let mut m = factor_feats[edge.factor].clone();
                m.extend_from_slice(&node_feats[edge.variable]);
                m
            }
            Some(l) => {
                let pre: Vec<f64> = pg[edge.factor]
                    .iter()
                    .zip(&pf[edge.variable])
                    .zip(&l.bias)
                    .map(|((a, b), c)| (a + b) + c)
                    .collect();
                let mut h = pre.clone();
                l.activate(&mut h);
                match trace.as_deref_mut() {
                    Some(tr) => {
                        tr.pre1.push(pre);
                        let (out, rt) = p.m.forward_traced_from(1, h);
                        tr.rest.push(rt);
                        out
                    }
                    None => p.m.forward_from(1, h),
                }
            }
        };
        ys.push(q_mats[keys.of_edge[e]].matvec(&m));
        if let Some(tr) = trace.as_deref_mut() {
            tr.m_out.push(m);
        }
    }

    let mut out = Vec::with_capacity(groups.len());
    let mut winners = Vec::new();
    for edges in &groups {
        let mut best = ys[edges[0]].clone();
        let mut arg = vec![edges[0]; p.rows];
        for &e in &edges[1..] {
            for (r, &v) in ys[e].iter().enumerate() {
                if v > best[r] {
                    best[r] = v;
                    arg[r] = e;
                }
            }
        }
        out.push(best);
        winners.push(arg);
    }
    if let Some(tr) = trace {
        tr.q_mats = q_mats;
        tr.argmax = winners;
    }
    Ok(out)
}

/// Backpropagates `d_out` (one gradient per target) through a traced half.
/// Parameter gradients accumulate into `grads`; input gradients into
/// `d_factor` and `d_node`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn half_backward(
    p: &HalfParams,
    g: &FactorGraph,
    factor_feats: &[Vec<f64>],
    node_feats: &[Vec<f64>],
    keys: &EdgeKeys,
    trace: &HalfTrace,
    d_out: &[Vec<f64>],
    grads: &mut HalfParams,
    d_factor: &mut [Vec<f64>],
    d_node: &mut [Vec<f64>],
) {
    let num_edges = g.edges().len();
    let node_dim = node_feats.first().map_or(0, Vec::len);
    let dg = p.m.input_dim() - node_dim;

    let mut dy: Vec<Option<Vec<f64>>> = vec![None; num_edges];
    for (arg, d) in trace.argmax.iter().zip(d_out) {
        for (r, (&e, &v)) in arg.iter().zip(d).enumerate() {
            if v != 0.0 {
                dy[e].get_or_insert_with(|| vec![0.0; p.rows])[r] += v;
            }
        }
    }

    let mut dq: Vec<Option<Matrix>> = vec![None; keys.distinct.len()];
    let first = p.m.layers().first();
    let width1 = first.map_or(0, |l| l.output_dim());
    let mut dpre_factor: Vec<Option<Vec<f64>>> = vec![None; factor_feats.len()];
    let mut dpre_node: Vec<Option<Vec<f64>>> = vec![None; node_feats.len()];

    for (e, d) in dy.iter().enumerate() {
        let Some(d) = d else { continue };
        let edge = g.edges()[e];
        let k = keys.of_edge[e];
        dq[k]
            .get_or_insert_with(|| Matrix::zeros(p.rows, p.cols))
            .add_outer(d, &trace.m_out[e]);
        let mut dm = vec![0.0; p.cols];
        trace.q_mats[k].matvec_t_acc(d, &mut dm);
        match first {
            None => {
                for (a, b) in d_factor[edge.factor].iter_mut().zip(&dm[..dg]) {
                    *a += b;
                }
                for (a, b) in d_node[edge.variable].iter_mut().zip(&dm[dg..]) {
                    *a += b;
                }
            }
            Some(l) => {
                let mut dpre = p.m.backward_from(1, &trace.rest[e], dm, &mut grads.m);
                for (v, &pre) in dpre.iter_mut().zip(&trace.pre1[e]) {
                    *v *= l.activation.derivative(pre);
                }
                for acc in [&mut dpre_factor[edge.factor], &mut dpre_node[edge.variable]] {
                    let acc = acc.get_or_insert_with(|| vec![0.0; width1]);
                    for (a, b) in acc.iter_mut().zip(&dpre) {
                        *a += b;
                    }
                }
                for (b, v) in grads.m.layers_mut()[0].bias.iter_mut().zip(&dpre) {
                    *b += v;
                }
            }
        }
    }

    if let Some(l) = first {
        let gw = &mut grads.m.layers_mut()[0].weight;
        for (c, dp) in dpre_factor.iter().enumerate() {
            if let Some(dp) = dp {
                gw.add_outer_block(0, dp, &factor_feats[c]);
                l.weight.matvec_t_block_acc(0, dp, &mut d_factor[c]);
            }
        }
        for (i, dp) in dpre_node.iter().enumerate() {
            if let Some(dp) = dp {
                gw.add_outer_block(dg, dp, &node_feats[i]);
                l.weight.matvec_t_block_acc(dg, dp, &mut d_node[i]);
            }
        }
    }

    for (k, d) in dq.into_iter().enumerate() {
        if let Some(d) = d {
            p.q.backward_from(0, &trace.q_traces[k], d.data().to_vec(), &mut grads.q);
        }
    }
}
