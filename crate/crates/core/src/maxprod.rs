//! Synchronous max-product belief propagation.
//!
//! The direct update feeds *full* beliefs of the other scope variables into
//! each factor-to-variable message:
//!
//! ```text
//! m_{c→i}(x_i) = max_{x_c : x_c[i] = x_i} θ_c(x_c) + Σ_{i'≠i} b_{i'}(x_{i'})
//! b_i(x_i)     = θ_i(x_i) + Σ_c m_{c→i}(x_i)
//! ```
//!
//! The decomposed update runs the same recursion through the per-variable
//! tables of [`decomp`](crate::decomp), with messages indexed by `z_c`.
//! [`Mode::Cavity`] is the textbook variant that removes the receiving
//! factor's own message from each incoming belief.
//!
//! Messages start at zero, every iteration reads only the previous state,
//! and there is no damping or normalisation.

use serde::{Deserialize, Serialize};

use crate::decomp::{decompose_graph, DecomposedFactor};
use crate::error::{bail, Result};
use crate::numkit::unravel_into;
use crate::pgm::{Assignment, FactorGraph};

/// Beliefs `b_i` and one message per factor-variable edge, stored in the
/// graph's edge order. Direct messages have length `K_i`; decomposed ones
/// have length `|Z_c|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub node_beliefs: Vec<Vec<f64>>,
    pub factor_messages: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Direct,
    Decomposed,
    Cavity,
}

/// `b_i = θ_i`, zero messages of length `K_i`.
pub fn bp_init(g: &FactorGraph) -> BeliefState {
    BeliefState {
        node_beliefs: g.variables().iter().map(|v| v.log_potential.clone()).collect(),
        factor_messages: g.edges().iter().map(|e| vec![0.0; g.cardinality(e.variable)]).collect(),
    }
}

/// `b_i = θ_i`, zero messages of length `|Z_c|`.
pub fn bp_init_decomposed(g: &FactorGraph) -> BeliefState {
    BeliefState {
        node_beliefs: g.variables().iter().map(|v| v.log_potential.clone()).collect(),
        factor_messages: g.edges().iter().map(|e| vec![0.0; g.factors()[e.factor].table_len()]).collect(),
    }
}

fn check_beliefs(g: &FactorGraph, s: &BeliefState) -> Result<()> {
    if s.node_beliefs.len() != g.num_variables() {
        bail!(Shape, "{} belief vectors for {} variables", s.node_beliefs.len(), g.num_variables());
    }
    for (i, b) in s.node_beliefs.iter().enumerate() {
        if b.len() != g.cardinality(i) {
            bail!(Shape, "belief {i} has length {}, expected {}", b.len(), g.cardinality(i));
        }
    }
    if s.factor_messages.len() != g.edges().len() {
        bail!(Shape, "{} messages for {} edges", s.factor_messages.len(), g.edges().len());
    }
    Ok(())
}

fn collect_beliefs(g: &FactorGraph, edge_term: impl Fn(usize, usize) -> f64) -> Vec<Vec<f64>> {
    g.variables()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            (0..v.cardinality)
                .map(|x| {
                    g.variable_edges(i)
                        .iter()
                        .fold(v.log_potential[x], |acc, &e| acc + edge_term(e, x))
                })
                .collect()
        })
        .collect()
}

/// One synchronous update of the printed (full-belief) recursion.
pub fn bp_iterate(g: &FactorGraph, s: &BeliefState) -> Result<BeliefState> {
    iterate_direct(g, s, false)
}

/// One synchronous update of standard max-product, where the belief of each
/// other scope variable enters without the message it received from `c`.
pub fn bp_iterate_cavity(g: &FactorGraph, s: &BeliefState) -> Result<BeliefState> {
    iterate_direct(g, s, true)
}

fn iterate_direct(g: &FactorGraph, s: &BeliefState, cavity: bool) -> Result<BeliefState> {
    check_beliefs(g, s)?;
    for (e, m) in g.edges().iter().zip(&s.factor_messages) {
        if m.len() != g.cardinality(e.variable) {
            bail!(Shape, "direct message on edge into variable {} has wrong length", e.variable);
        }
    }
    let mut messages: Vec<Vec<f64>> = g
        .edges()
        .iter()
        .map(|e| vec![f64::NEG_INFINITY; g.cardinality(e.variable)])
        .collect();
    let mut config = Vec::new();
    for (c, f) in g.factors().iter().enumerate() {
        let edges = g.factor_edges(c);
        let shape = f.log_potential.shape();
        // incoming[p] = belief of scope position p as seen by this factor
        let incoming: Vec<Vec<f64>> = edges
            .clone()
            .map(|e| {
                let b = &s.node_beliefs[g.edges()[e].variable];
                if cavity {
                    b.iter().zip(&s.factor_messages[e]).map(|(b, m)| b - m).collect()
                } else {
                    b.clone()
                }
            })
            .collect();
        config.resize(f.arity(), 0);
        for (off, &theta) in f.log_potential.values().iter().enumerate() {
            unravel_into(shape, off, &mut config);
            for (p, e) in edges.clone().enumerate() {
                let mut v = theta;
                for (q, b) in incoming.iter().enumerate() {
                    if q != p {
                        v += b[config[q]];
                    }
                }
                let slot = &mut messages[e][config[p]];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let node_beliefs = collect_beliefs(g, |e, x| messages[e][x]);
    Ok(BeliefState {
        node_beliefs,
        factor_messages: messages,
    })
}

fn check_decomposition(g: &FactorGraph, d: &[DecomposedFactor]) -> Result<()> {
    if d.len() != g.num_factors() {
        bail!(Structure, "{} decomposed factors for {} factors", d.len(), g.num_factors());
    }
    for (f, dc) in g.factors().iter().zip(d) {
        if dc.arity() != f.arity() || dc.z_cardinality != f.table_len() {
            bail!(Structure, "decomposition of factor {} does not match its scope", f.id);
        }
        for (p, t) in dc.tables.iter().enumerate() {
            if t.rows() != g.cardinality(f.scope[p]) || t.cols() != dc.z_cardinality {
                bail!(Structure, "table {p} of factor {} has shape {}x{}", f.id, t.rows(), t.cols());
            }
        }
    }
    Ok(())
}

/// One synchronous update in decomposed form.
pub fn bp_iterate_decomposed(g: &FactorGraph, d: &[DecomposedFactor], s: &BeliefState) -> Result<BeliefState> {
    check_beliefs(g, s)?;
    check_decomposition(g, d)?;
    let mut messages: Vec<Vec<f64>> = Vec::with_capacity(g.edges().len());
    for (c, dc) in d.iter().enumerate() {
        let edges = g.factor_edges(c);
        // r[p][z] = max_x φ_p(x, z) + b_p(x)
        let r: Vec<Vec<f64>> = edges
            .clone()
            .zip(&dc.tables)
            .map(|(e, t)| {
                let b = &s.node_beliefs[g.edges()[e].variable];
                (0..dc.z_cardinality)
                    .map(|z| {
                        (0..t.rows())
                            .map(|x| t.get(x, z) + b[x])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();
        for p in 0..dc.arity() {
            messages.push(
                (0..dc.z_cardinality)
                    .map(|z| {
                        r.iter()
                            .enumerate()
                            .filter(|&(q, _)| q != p)
                            .fold(0.0, |acc, (_, rq)| acc + rq[z])
                    })
                    .collect(),
            );
        }
    }
    let tables: Vec<&_> = g
        .edges()
        .iter()
        .map(|e| &d[e.factor].tables[e.position])
        .collect();
    let node_beliefs = collect_beliefs(g, |e, x| {
        let t = tables[e];
        messages[e]
            .iter()
            .enumerate()
            .map(|(z, m)| t.get(x, z) + m)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(BeliefState {
        node_beliefs,
        factor_messages: messages,
    })
}

/// Per-variable argmax of the beliefs, ties to the smallest state.
pub fn decode(s: &BeliefState) -> Assignment {
    Assignment(s.node_beliefs.iter().map(|b| first_argmax(b)).collect())
}

pub(crate) fn first_argmax(v: &[f64]) -> usize {
    let mut arg = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[arg] {
            arg = k;
        }
    }
    arg
}

/// Runs `k` synchronous iterations from [`bp_init`] and decodes.
///
/// Decomposed mode decomposes `g` itself, so every factor entry must
/// already be at least 1 (see
/// [`prepare_for_decomposition`](crate::decomp::prepare_for_decomposition)).
pub fn run_max_product(g: &FactorGraph, k: usize, mode: Mode) -> Result<(BeliefState, Assignment)> {
    let mut s = match mode {
        Mode::Decomposed => bp_init_decomposed(g),
        Mode::Direct | Mode::Cavity => bp_init(g),
    };
    let d = match mode {
        Mode::Decomposed => decompose_graph(g)?,
        _ => Vec::new(),
    };
    for _ in 0..k {
        s = match mode {
            Mode::Direct => bp_iterate(g, &s)?,
            Mode::Cavity => bp_iterate_cavity(g, &s)?,
            Mode::Decomposed => bp_iterate_decomposed(g, &d, &s)?,
        };
    }
    let a = decode(&s);
    Ok((s, a))
}
