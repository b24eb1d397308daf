//! Factor graphs over discrete variables and their MAP objective.
//!
//! The score of an assignment is the sum of all unary and factor
//! log-potentials it selects. Hard constraints are encoded with the finite
//! [`PENALTY`] rather than `-inf`, so every score stays finite.

mod format;
mod oracles;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numkit::Tensor;

pub use format::{GraphFile, PGM_FORMAT};
pub use oracles::{brute_force_map, viterbi_chain_map, window_dp_map, BRUTE_FORCE_LIMIT};

/// Log-potential assigned to configurations that violate a hard constraint.
pub const PENALTY: f64 = -1.0e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableNode {
    pub id: usize,
    pub cardinality: usize,
    pub log_potential: Vec<f64>,
}

impl VariableNode {
    pub fn new(id: usize, log_potential: Vec<f64>) -> Self {
        Self {
            id,
            cardinality: log_potential.len(),
            log_potential,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorNode {
    pub id: usize,
    pub scope: Vec<usize>,
    pub log_potential: Tensor,
}

impl FactorNode {
    pub fn new(id: usize, scope: Vec<usize>, log_potential: Tensor) -> Self {
        Self {
            id,
            scope,
            log_potential,
        }
    }

    pub fn arity(&self) -> usize {
        self.scope.len()
    }

    /// Number of joint configurations of the scope.
    pub fn table_len(&self) -> usize {
        self.log_potential.len()
    }
}

/// One variable-factor incidence. Edges are enumerated factor by factor, in
/// scope order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub factor: usize,
    pub position: usize,
    pub variable: usize,
}

/// A validated factor graph. Variable and factor ids equal their positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    variables: Vec<VariableNode>,
    factors: Vec<FactorNode>,
    edges: Vec<Edge>,
    factor_edge_start: Vec<usize>,
    variable_edges: Vec<Vec<usize>>,
}

/// A state index per variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for Assignment {
    fn from(v: Vec<usize>) -> Self {
        Assignment(v)
    }
}

impl FactorGraph {
    pub fn new(variables: Vec<VariableNode>, factors: Vec<FactorNode>) -> Result<Self> {
        for (i, v) in variables.iter().enumerate() {
            if v.id != i {
                bail!(Structure, "variable at position {i} has id {}", v.id);
            }
            if v.cardinality < 2 {
                bail!(Structure, "variable {i} has cardinality {} < 2", v.cardinality);
            }
            if v.log_potential.len() != v.cardinality {
                bail!(
                    Shape,
                    "variable {i}: {} log-potentials for cardinality {}",
                    v.log_potential.len(),
                    v.cardinality
                );
            }
            if v.log_potential.iter().any(|x| !x.is_finite()) {
                bail!(Domain, "variable {i} has a non-finite log-potential");
            }
        }
        for (c, f) in factors.iter().enumerate() {
            if f.id != c {
                bail!(Structure, "factor at position {c} has id {}", f.id);
            }
            if f.scope.is_empty() {
                bail!(Structure, "factor {c} has an empty scope");
            }
            for (p, &i) in f.scope.iter().enumerate() {
                if i >= variables.len() {
                    bail!(Structure, "factor {c} refers to missing variable {i}");
                }
                if f.scope[..p].contains(&i) {
                    bail!(Structure, "factor {c} lists variable {i} twice");
                }
            }
            let expected: Vec<usize> = f.scope.iter().map(|&i| variables[i].cardinality).collect();
            if f.log_potential.shape() != expected.as_slice() {
                bail!(
                    Shape,
                    "factor {c} table has shape {:?}, scope needs {expected:?}",
                    f.log_potential.shape()
                );
            }
            if f.log_potential.values().iter().any(|x| !x.is_finite()) {
                bail!(Domain, "factor {c} has a non-finite log-potential");
            }
        }

        let mut edges = Vec::new();
        let mut factor_edge_start = Vec::with_capacity(factors.len() + 1);
        let mut variable_edges = vec![Vec::new(); variables.len()];
        for (c, f) in factors.iter().enumerate() {
            factor_edge_start.push(edges.len());
            for (position, &variable) in f.scope.iter().enumerate() {
                variable_edges[variable].push(edges.len());
                edges.push(Edge {
                    factor: c,
                    position,
                    variable,
                });
            }
        }
        factor_edge_start.push(edges.len());

        Ok(Self {
            variables,
            factors,
            edges,
            factor_edge_start,
            variable_edges,
        })
    }

    pub fn variables(&self) -> &[VariableNode] {
        &self.variables
    }

    pub fn factors(&self) -> &[FactorNode] {
        &self.factors
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.variables[i].cardinality
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Edge ids of factor `c`, in scope order.
    pub fn factor_edges(&self, c: usize) -> Range<usize> {
        self.factor_edge_start[c]..self.factor_edge_start[c + 1]
    }

    /// Edge ids incident to variable `i`, ascending.
    pub fn variable_edges(&self, i: usize) -> &[usize] {
        &self.variable_edges[i]
    }

    pub fn max_degree(&self) -> usize {
        self.variable_edges.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Total number of joint assignments, or `None` on overflow.
    pub fn joint_states(&self) -> Option<u128> {
        self.variables
            .iter()
            .try_fold(1u128, |acc, v| acc.checked_mul(v.cardinality as u128))
    }

    pub fn check_assignment(&self, a: &Assignment) -> Result<()> {
        if a.len() != self.variables.len() {
            bail!(
                Index,
                "assignment has {} states for {} variables",
                a.len(),
                self.variables.len()
            );
        }
        for (i, (&s, v)) in a.0.iter().zip(&self.variables).enumerate() {
            if s >= v.cardinality {
                bail!(Index, "state {s} of variable {i} exceeds cardinality {}", v.cardinality);
            }
        }
        Ok(())
    }

    /// Row-major offset of the configuration `a` restricted to factor `c`.
    pub(crate) fn factor_offset(&self, c: usize, states: &[usize]) -> usize {
        let f = &self.factors[c];
        let shape = f.log_potential.shape();
        let mut off = 0;
        for (&i, &k) in f.scope.iter().zip(shape) {
            off = off * k + states[i];
        }
        off
    }

    /// Returns a copy with every factor re-ordered by `perm` (new position
    /// `j` holds old factor `perm[j]`).
    pub fn permute_factors(&self, perm: &[usize]) -> Result<Self> {
        let factors = perm
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let f = &self.factors[c];
                FactorNode::new(j, f.scope.clone(), f.log_potential.clone())
            })
            .collect();
        Self::new(self.variables.clone(), factors)
    }

    pub(crate) fn with_potentials(&self, unary: Vec<Vec<f64>>, tables: Vec<Tensor>) -> Result<Self> {
        let variables = unary
            .into_iter()
            .enumerate()
            .map(|(i, lp)| VariableNode::new(i, lp))
            .collect();
        let factors = tables
            .into_iter()
            .zip(&self.factors)
            .map(|(t, f)| FactorNode::new(f.id, f.scope.clone(), t))
            .collect();
        Self::new(variables, factors)
    }
}

/// MAP objective: sum of every selected unary and factor log-potential.
pub fn score(g: &FactorGraph, a: &Assignment) -> Result<f64> {
    g.check_assignment(a)?;
    Ok(score_unchecked(g, a.states()))
}

pub(crate) fn score_unchecked(g: &FactorGraph, states: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..g.num_factors() {
        total += g.factors[c].log_potential.values()[g.factor_offset(c, states)];
    }
    for (v, &s) in g.variables.iter().zip(states) {
        total += v.log_potential[s];
    }
    total
}

/// Subtracts the minimum from every unary and factor table, making all
/// log-potentials non-negative. The argmax of [`score`] is unchanged.
pub fn nonneg_shift(g: &FactorGraph) -> FactorGraph {
    let unary = g
        .variables
        .iter()
        .map(|v| {
            let m = v.log_potential.iter().copied().fold(f64::INFINITY, f64::min);
            v.log_potential.iter().map(|x| x - m).collect()
        })
        .collect();
    let tables = g
        .factors
        .iter()
        .map(|f| {
            let m = f.log_potential.min();
            f.log_potential.map(|x| x - m)
        })
        .collect();
    g.with_potentials(unary, tables)
        .expect("shifting keeps a valid graph valid")
}

/// Constant by which [`nonneg_shift`] lowers every score.
pub fn shift_constant(g: &FactorGraph) -> f64 {
    let unary: f64 = g
        .variables
        .iter()
        .map(|v| v.log_potential.iter().copied().fold(f64::INFINITY, f64::min))
        .sum();
    let factors: f64 = g.factors.iter().map(|f| f.log_potential.min()).sum();
    unary + factors
}

#[cfg(test)]
pub(crate) use tests::two_var_graph;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_var_graph() -> FactorGraph {
        FactorGraph::new(
            vec![
                VariableNode::new(0, vec![0.0, 1.0]),
                VariableNode::new(1, vec![0.0, 1.0]),
            ],
            vec![FactorNode::new(
                0,
                vec![0, 1],
                Tensor::new(vec![2, 2], vec![0.0, 0.1, 0.2, 1.0]).unwrap(),
            )],
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let g = two_var_graph();
        assert_eq!(score(&g, &vec![1, 1].into()).unwrap(), 3.0);
        assert_eq!(score(&g, &vec![1, 0].into()).unwrap(), 1.2);

        let g = FactorGraph::new(vec![VariableNode::new(0, vec![0.4, 0.6])], vec![]).unwrap();
        assert_eq!(score(&g, &vec![0].into()).unwrap(), 0.4);

        let g = FactorGraph::new(
            vec![VariableNode::new(0, vec![0.0; 3]), VariableNode::new(1, vec![0.0; 2])],
            vec![FactorNode::new(0, vec![1, 0], Tensor::zeros(vec![2, 3]).unwrap())],
        )
        .unwrap();
        assert_eq!(score(&g, &vec![2, 1].into()).unwrap(), 0.0);
    }

    #[test]
    fn score_rejects_bad_state() {
        let g = two_var_graph();
        assert!(matches!(score(&g, &vec![2, 0].into()), Err(crate::Error::Index(_))));
        assert!(matches!(score(&g, &vec![0].into()), Err(crate::Error::Index(_))));
    }

    #[test]
    fn graph_validation() {
        let dup = FactorGraph::new(
            vec![VariableNode::new(0, vec![0.0, 0.0])],
            vec![FactorNode::new(0, vec![0, 0], Tensor::zeros(vec![2, 2]).unwrap())],
        );
        assert!(matches!(dup, Err(crate::Error::Structure(_))));

        let missing = FactorGraph::new(
            vec![VariableNode::new(0, vec![0.0, 0.0])],
            vec![FactorNode::new(0, vec![1], Tensor::zeros(vec![2]).unwrap())],
        );
        assert!(matches!(missing, Err(crate::Error::Structure(_))));

        let shape = FactorGraph::new(
            vec![VariableNode::new(0, vec![0.0, 0.0])],
            vec![FactorNode::new(0, vec![0], Tensor::zeros(vec![3]).unwrap())],
        );
        assert!(matches!(shape, Err(crate::Error::Shape(_))));

        let inf = FactorGraph::new(vec![VariableNode::new(0, vec![0.0, f64::NEG_INFINITY])], vec![]);
        assert!(matches!(inf, Err(crate::Error::Domain(_))));
    }

    #[test]
    fn edges_are_derived_in_scope_order() {
        let g = FactorGraph::new(
            (0..3).map(|i| VariableNode::new(i, vec![0.0, 0.0])).collect(),
            vec![
                FactorNode::new(0, vec![2, 0], Tensor::zeros(vec![2, 2]).unwrap()),
                FactorNode::new(1, vec![1, 2], Tensor::zeros(vec![2, 2]).unwrap()),
            ],
        )
        .unwrap();
        assert_eq!(g.edges().len(), 4);
        assert_eq!(g.factor_edges(1), 2..4);
        assert_eq!(g.variable_edges(2), &[0, 3]);
        assert_eq!(g.edges()[3], Edge { factor: 1, position: 1, variable: 2 });
        assert_eq!(g.max_degree(), 2);
    }

    #[test]
    fn shift_examples() {
        let g = FactorGraph::new(vec![VariableNode::new(0, vec![-1.0, 2.0])], vec![]).unwrap();
        assert_eq!(nonneg_shift(&g).variables()[0].log_potential, vec![0.0, 3.0]);

        let g = two_var_graph();
        let shifted = nonneg_shift(&g);
        assert_eq!(shifted, g);
        assert_eq!(nonneg_shift(&shifted), shifted);
    }
}

