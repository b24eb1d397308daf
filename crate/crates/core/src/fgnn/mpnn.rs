//! Rewriting an FGNN layer as pairwise message passing.
//!
//! When every variable `i` can be paired with a distinct factor `h(i)` that
//! contains it, each pair becomes one super-node carrying `[g_{h(i)}, f_i]`.
//! Super-node `j` is a neighbour of `i` when `j ∈ s(h(i))` or
//! `i ∈ s(h(j))`. The message from `j` to `i` stacks two blocks, each gated
//! by a 0/1 tag:
//!
//! * factor block: `Q_VF(t_{h(i),j}) · M_VF([g_{h(i)}, f_j])` if `j ∈ s(h(i))`,
//! * node block: `Q_FV(t_{h(j),i}) · M_FV([g_{h(j)}, f_i])` if `i ∈ s(h(j))`.
//!
//! Gating by multiplication only works for positive values, so each block
//! is shifted by a constant `δ` before gating and the max, and shifted back
//! afterwards.

use std::collections::HashMap;

use super::{FeatureSet, FgnnLayerParams};
use crate::error::{bail, Result};
use crate::numkit::Matrix;
use crate::pgm::FactorGraph;

/// A bijection between variables and factors with `i ∈ s(h(i))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    var_to_factor: Vec<usize>,
    factor_to_var: Vec<usize>,
}

impl Matching {
    pub fn new(g: &FactorGraph, var_to_factor: Vec<usize>) -> Result<Self> {
        let n = g.num_variables();
        if var_to_factor.len() != n || g.num_factors() != n {
            bail!(
                Structure,
                "a matching needs one factor per variable: {} entries, {n} variables, {} factors",
                var_to_factor.len(),
                g.num_factors()
            );
        }
        let mut factor_to_var = vec![usize::MAX; n];
        for (i, &c) in var_to_factor.iter().enumerate() {
            if c >= n || factor_to_var[c] != usize::MAX {
                bail!(Structure, "factor {c} is not a valid or unused match for variable {i}");
            }
            if !g.factors()[c].scope.contains(&i) {
                bail!(Structure, "variable {i} is not in the scope of its matched factor {c}");
            }
            factor_to_var[c] = i;
        }
        Ok(Self {
            var_to_factor,
            factor_to_var,
        })
    }

    pub fn factor_of(&self, i: usize) -> usize {
        self.var_to_factor[i]
    }

    pub fn variable_of(&self, c: usize) -> usize {
        self.factor_to_var[c]
    }
}

/// Maximum bipartite matching by augmenting paths; `Some` only when every
/// variable and every factor is matched.
pub fn find_perfect_matching(g: &FactorGraph) -> Option<Matching> {
    let n = g.num_variables();
    if g.num_factors() != n {
        return None;
    }
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| g.variable_edges(i).iter().map(|&e| g.edges()[e].factor).collect())
        .collect();
    let mut owner = vec![usize::MAX; n];

    fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [usize], seen: &mut [bool]) -> bool {
        for &c in &adj[i] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if owner[c] == usize::MAX || augment(owner[c], adj, owner, seen) {
                owner[c] = i;
                return true;
            }
        }
        false
    }

    for i in 0..n {
        let mut seen = vec![false; n];
        if !augment(i, &adj, &mut owner, &mut seen) {
            return None;
        }
    }
    let mut h = vec![0; n];
    for (c, &i) in owner.iter().enumerate() {
        h[i] = c;
    }
    Matching::new(g, h).ok()
}

/// An FGNN layer expressed over super-nodes.
#[derive(Clone, Debug)]
pub struct MpnnLayer {
    graph: FactorGraph,
    matching: Matching,
    params: FgnnLayerParams,
    neighbors: Vec<Vec<usize>>,
    edge_index: HashMap<(usize, usize), usize>,
}

pub fn mpnn_transform(g: &FactorGraph, h: &Matching, p: &FgnnLayerParams) -> Result<MpnnLayer> {
    // revalidate: the matching may come from another graph
    let matching = Matching::new(g, h.var_to_factor.clone())?;
    let n = g.num_variables();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        let mut nb: Vec<usize> = g.factors()[matching.factor_of(i)].scope.clone();
        for &e in g.variable_edges(i) {
            nb.push(matching.variable_of(g.edges()[e].factor));
        }
        nb.sort_unstable();
        nb.dedup();
        neighbors[i] = nb;
    }
    let edge_index = g
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| ((e.factor, e.variable), k))
        .collect();
    Ok(MpnnLayer {
        graph: g.clone(),
        matching,
        params: p.clone(),
        neighbors,
        edge_index,
    })
}

impl MpnnLayer {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Block message `Q(t_ci) · M([g_c, f_i])` for an existing edge.
    fn block(&self, vf: bool, c: usize, i: usize, g: &[f64], f: &[f64], feats: &FeatureSet) -> Result<Vec<f64>> {
        let half = if vf { &self.params.vf } else { &self.params.fv };
        let e = self.edge_index[&(c, i)];
        let mut input = g.to_vec();
        input.extend_from_slice(f);
        let m = half.m.forward(&input)?;
        let q = Matrix::from_vec(half.rows, half.cols, half.q.forward(&feats.edge[e])?)?;
        Ok(q.matvec(&m))
    }

    /// Returns `(factor features, node features)`, equal to
    /// `(vf_layer(feats), fv_layer(feats))`.
    pub fn forward(&self, feats: &FeatureSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let g = &self.graph;
        feats.check(g, feats.node_dim(), feats.factor_dim(), feats.edge_dim())?;
        let n = g.num_variables();
        let (rf, rn) = (self.params.vf.rows, self.params.fv.rows);
        let member = |c: usize, i: usize| g.factors()[c].scope.contains(&i);

        // messages[i][k] for neighbour neighbors[i][k]: (tag_f, block_f, tag_n, block_n)
        let mut messages = Vec::with_capacity(n);
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let hi = self.matching.factor_of(i);
            let mut row = Vec::with_capacity(self.neighbors[i].len());
            for &j in &self.neighbors[i] {
                let hj = self.matching.factor_of(j);
                let fb = if member(hi, j) {
                    Some(self.block(true, hi, j, &feats.factor[hi], &feats.node[j], feats)?)
                } else {
                    None
                };
                let nb = if member(hj, i) {
                    Some(self.block(false, hj, i, &feats.factor[hj], &feats.node[i], feats)?)
                } else {
                    None
                };
                for v in fb.iter().chain(nb.iter()).flatten() {
                    delta = delta.max(v.abs());
                }
                row.push((fb, nb));
            }
            messages.push(row);
        }
        let delta = delta + 1.0;

        let mut factor_out = vec![Vec::new(); g.num_factors()];
        let mut node_out = vec![Vec::new(); n];
        for i in 0..n {
            let mut agg_f = vec![0.0; rf];
            let mut agg_n = vec![0.0; rn];
            for (fb, nb) in &messages[i] {
                for (agg, block, width) in [(&mut agg_f, fb, rf), (&mut agg_n, nb, rn)] {
                    let tag = if block.is_some() { 1.0 } else { 0.0 };
                    for r in 0..width {
                        let v = block.as_ref().map_or(0.0, |b| b[r]);
                        let gated = tag * (v + delta);
                        if gated > agg[r] {
                            agg[r] = gated;
                        }
                    }
                }
            }
            if agg_n.contains(&0.0) && rn > 0 {
                bail!(Structure, "variable {i} receives no factor-to-variable message");
            }
            factor_out[self.matching.factor_of(i)] = agg_f.iter().map(|v| v - delta).collect();
            node_out[i] = agg_n.iter().map(|v| v - delta).collect();
        }
        Ok((factor_out, node_out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;
    use crate::pgm::{FactorNode, VariableNode};

    fn graph(scopes: &[&[usize]], n: usize) -> FactorGraph {
        FactorGraph::new(
            (0..n).map(|i| VariableNode::new(i, vec![0.0, 0.0])).collect(),
            scopes
                .iter()
                .enumerate()
                .map(|(c, s)| FactorNode::new(c, s.to_vec(), Tensor::zeros(vec![2; s.len()]).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn matchings() {
        let g = graph(&[&[0], &[1], &[2]], 3);
        let h = find_perfect_matching(&g).unwrap();
        assert_eq!((0..3).map(|i| h.factor_of(i)).collect::<Vec<_>>(), vec![0, 1, 2]);

        assert!(find_perfect_matching(&graph(&[&[0, 1]], 2)).is_none());

        // window chain: c_i covers i..i+2, truncated at the end
        let g = graph(&[&[0, 1, 2], &[1, 2, 3], &[2, 3], &[3]], 4);
        let h = find_perfect_matching(&g).unwrap();
        for i in 0..4 {
            assert!(g.factors()[h.factor_of(i)].scope.contains(&i));
        }

        // needs augmentation: greedy would give both variables factor 0
        let g = graph(&[&[0, 1], &[0]], 2);
        let h = find_perfect_matching(&g).unwrap();
        assert_eq!((h.factor_of(0), h.factor_of(1)), (1, 0));
    }

    #[test]
    fn invalid_matching_is_a_structure_error() {
        let g = graph(&[&[0, 1], &[1, 2], &[2]], 3);
        assert!(Matching::new(&g, vec![0, 1]).is_err());
        assert!(Matching::new(&g, vec![0, 0, 2]).is_err());
        assert!(Matching::new(&g, vec![1, 0, 2]).is_err());
        assert!(Matching::new(&g, vec![0, 1, 2]).is_ok());
    }
}
