//! Max-decomposition of factor tables into rank-1 terms.
//!
//! A factor `θ_c(x_c)` is written as `max_z Σ_{i∈s(c)} φ_ic(x_i, z)` where
//! `z` ranges over every joint configuration of the scope (row-major). For a
//! configuration `z`, each scope variable contributes `θ_c(x^z) / |s(c)|`
//! when it agrees with `x^z` and a penalty `-P` otherwise. With
//! `P = |s(c)|·max|θ_c| + 1` the matching configuration always wins the max.
//!
//! The construction requires every table entry to be at least 1; use
//! [`prepare_for_decomposition`] to get there from an arbitrary graph.

use crate::error::{bail, Result};
use crate::numkit::{unravel_into, Matrix, Tensor};
use crate::pgm::{nonneg_shift, shift_constant, FactorGraph, FactorNode};

/// Per-variable tables `φ_ic(x_i, z)` of one factor, each `K_i × |Z_c|`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedFactor {
    pub factor_id: usize,
    pub z_cardinality: usize,
    pub tables: Vec<Matrix>,
    /// Value `P` used for mismatching entries (stored as `-P`).
    pub penalty: f64,
}

impl DecomposedFactor {
    pub fn arity(&self) -> usize {
        self.tables.len()
    }
}

/// Graph whose factor tables are all ≥ 1 and unary tables ≥ 0, plus the
/// constant that maps its scores back to the source graph.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub graph: FactorGraph,
    /// `score(source, x) = score(graph, x) + score_offset` for every `x`.
    pub score_offset: f64,
}

/// Applies the non-negativity shift, then adds 1 to every factor entry.
pub fn prepare_for_decomposition(g: &FactorGraph) -> PreparedGraph {
    let shifted = nonneg_shift(g);
    let unary = shifted.variables().iter().map(|v| v.log_potential.clone()).collect();
    let tables = shifted
        .factors()
        .iter()
        .map(|f| f.log_potential.map(|x| x + 1.0))
        .collect();
    let graph = shifted
        .with_potentials(unary, tables)
        .expect("offsetting keeps a valid graph valid");
    PreparedGraph {
        score_offset: shift_constant(g) - g.num_factors() as f64,
        graph,
    }
}

pub fn decompose_factor(f: &FactorNode) -> Result<DecomposedFactor> {
    let table = &f.log_potential;
    if let Some(bad) = table.values().iter().find(|&&v| v < 1.0) {
        bail!(
            Domain,
            "factor {} has entry {bad} < 1; shift the graph before decomposing",
            f.id
        );
    }
    let shape = table.shape();
    let arity = shape.len();
    let z_card = table.len();
    let scale = 1.0 / arity as f64;
    let penalty = arity as f64 * table.max_abs() + 1.0;

    let mut tables: Vec<Matrix> = shape.iter().map(|&k| Matrix::zeros(k, z_card)).collect();
    let mut config = vec![0; arity];
    for z in 0..z_card {
        unravel_into(shape, z, &mut config);
        let share = table.values()[z] * scale;
        for (p, m) in tables.iter_mut().enumerate() {
            for x in 0..shape[p] {
                m.set(x, z, if x == config[p] { share } else { -penalty });
            }
        }
    }
    Ok(DecomposedFactor {
        factor_id: f.id,
        z_cardinality: z_card,
        tables,
        penalty,
    })
}

pub fn decompose_graph(g: &FactorGraph) -> Result<Vec<DecomposedFactor>> {
    g.factors().iter().map(decompose_factor).collect()
}

/// `θ(x_c) = max_z Σ_i φ_ic(x_i, z)`, summed in scope order.
pub fn reconstruct(d: &DecomposedFactor) -> Tensor {
    let shape: Vec<usize> = d.tables.iter().map(Matrix::rows).collect();
    Tensor::from_fn(shape, |x| {
        (0..d.z_cardinality)
            .map(|z| {
                d.tables
                    .iter()
                    .zip(x)
                    .fold(0.0, |acc, (m, &xi)| acc + m.get(xi, z))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    })
    .expect("tables have positive row counts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pgm::{score, Assignment, VariableNode};

    fn factor(shape: Vec<usize>, values: Vec<f64>) -> FactorNode {
        let scope = (0..shape.len()).collect();
        FactorNode::new(0, scope, Tensor::new(shape, values).unwrap())
    }

    #[test]
    fn unary_factor_is_diagonal() {
        let d = decompose_factor(&factor(vec![3], vec![1.0, 2.0, 4.0])).unwrap();
        assert_eq!(d.z_cardinality, 3);
        let t = &d.tables[0];
        for x in 0..3 {
            for z in 0..3 {
                if x == z {
                    assert_eq!(t.get(x, z), [1.0, 2.0, 4.0][x]);
                } else {
                    assert_eq!(t.get(x, z), -d.penalty);
                }
            }
        }
        assert_eq!(reconstruct(&d).values(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn constant_factor() {
        let d = decompose_factor(&factor(vec![2, 3, 2], vec![2.0; 12])).unwrap();
        for v in reconstruct(&d).values() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maximizing_z_is_the_matching_configuration() {
        let values: Vec<f64> = (0..12).map(|k| 1.0 + (k as f64 * 0.37) % 3.0).collect();
        let d = decompose_factor(&factor(vec![2, 3, 2], values)).unwrap();
        let mut x = vec![0; 3];
        for off in 0..12 {
            unravel_into(&[2, 3, 2], off, &mut x);
            let sums: Vec<f64> = (0..12)
                .map(|z| (0..3).map(|p| d.tables[p].get(x[p], z)).sum())
                .collect();
            let best = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sums.iter().position(|&s| s == best), Some(off));
        }
    }

    #[test]
    fn zero_tables_and_single_column() {
        let d = DecomposedFactor {
            factor_id: 0,
            z_cardinality: 1,
            tables: vec![Matrix::zeros(2, 1), Matrix::zeros(3, 1)],
            penalty: 1.0,
        };
        assert!(reconstruct(&d).values().iter().all(|&v| v == 0.0));

        let d = DecomposedFactor {
            factor_id: 0,
            z_cardinality: 1,
            tables: vec![
                Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
                Matrix::from_vec(2, 1, vec![10.0, 20.0]).unwrap(),
            ],
            penalty: 1.0,
        };
        assert_eq!(reconstruct(&d).values(), &[11.0, 21.0, 12.0, 22.0]);
    }

    #[test]
    fn precondition_enforced() {
        let err = decompose_factor(&factor(vec![2], vec![0.5, 3.0]));
        assert!(matches!(err, Err(crate::Error::Domain(_))));
    }

    #[test]
    fn prepared_scores_differ_by_offset() {
        let g = FactorGraph::new(
            vec![VariableNode::new(0, vec![-1.0, 0.5]), VariableNode::new(1, vec![2.0, -3.0])],
            vec![FactorNode::new(
                0,
                vec![0, 1],
                Tensor::new(vec![2, 2], vec![-0.5, 0.25, 3.0, -2.0]).unwrap(),
            )],
        )
        .unwrap();
        let p = prepare_for_decomposition(&g);
        assert!(p.graph.factors()[0].log_potential.min() >= 1.0);
        for a in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            let a = Assignment(a.to_vec());
            let lhs = score(&g, &a).unwrap();
            let rhs = score(&p.graph, &a).unwrap() + p.score_offset;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
