//! Exact MAP solvers used as labelling oracles.
//!
//! All three solvers return the lexicographically smallest maximizer with
//! respect to their own arithmetic, and report the score through
//! [`score`](super::score) so that equal assignments give bit-equal scores.

use super::{score_unchecked, Assignment, FactorGraph};
use crate::error::{bail, Result};

/// Largest joint state space [`brute_force_map`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1 << 24;

const CONTEXT_LIMIT: usize = 1 << 24;

/// Exhaustive MAP. Enumerates assignments in lexicographic order and keeps
/// the first strict improvement.
pub fn brute_force_map(g: &FactorGraph) -> Result<(Assignment, f64)> {
    let states = g.joint_states().unwrap_or(u128::MAX);
    if states > BRUTE_FORCE_LIMIT {
        bail!(
            Capacity,
            "{states} joint states exceed the brute-force limit of {BRUTE_FORCE_LIMIT}"
        );
    }
    let n = g.num_variables();
    let mut current = vec![0usize; n];
    let mut best = current.clone();
    let mut best_score = score_unchecked(g, &current);
    loop {
        // odometer, last variable fastest
        let mut i = n;
        loop {
            if i == 0 {
                return Ok((Assignment(best), best_score));
            }
            i -= 1;
            current[i] += 1;
            if current[i] < g.cardinality(i) {
                break;
            }
            current[i] = 0;
        }
        let s = score_unchecked(g, &current);
        if s > best_score {
            best_score = s;
            best.copy_from_slice(&current);
        }
    }
}

/// Factor ids grouped by the largest variable index in their scope, after
/// checking that every scope is a consecutive index range of width ≤ `window`.
fn factors_by_last_variable(g: &FactorGraph, window: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_last = vec![Vec::new(); g.num_variables()];
    for (c, f) in g.factors().iter().enumerate() {
        let lo = *f.scope.iter().min().expect("scopes are non-empty");
        let hi = *f.scope.iter().max().expect("scopes are non-empty");
        if hi - lo + 1 != f.scope.len() {
            bail!(Structure, "factor {c} scope {:?} is not a consecutive range", f.scope);
        }
        if f.scope.len() > window {
            bail!(
                Structure,
                "factor {c} spans {} variables, wider than the window {window}",
                f.scope.len()
            );
        }
        by_last[hi].push(c);
    }
    Ok(by_last)
}

/// Exact MAP for chains whose factors each cover a consecutive run of at most
/// `window` variables. The dynamic program keeps the previous `window - 1`
/// states as context.
pub fn window_dp_map(g: &FactorGraph, window: usize) -> Result<(Assignment, f64)> {
    if window == 0 {
        bail!(Argument, "window must be positive");
    }
    let by_last = factors_by_last_variable(g, window)?;
    let n = g.num_variables();
    let card: Vec<usize> = (0..n).map(|i| g.cardinality(i)).collect();
    let lo = |t: usize| t.saturating_sub(window - 1);

    // contexts[t] = number of joint states of variables lo(t)..t
    let mut contexts = Vec::with_capacity(n + 1);
    for t in 0..=n {
        let count = (lo(t)..t).try_fold(1usize, |acc, j| acc.checked_mul(card[j]));
        match count {
            Some(c) if c <= CONTEXT_LIMIT => contexts.push(c),
            _ => bail!(Capacity, "DP context at step {t} exceeds {CONTEXT_LIMIT} states"),
        }
    }

    let mut local = vec![0usize; window];
    let mut states = vec![0usize; n];
    // Gain of placing x_t given the context, plus the successor context.
    let mut step = |t: usize, ctx: usize, x: usize, states: &mut [usize]| -> (f64, usize) {
        let start = lo(t);
        let width = t - start;
        let mut rest = ctx;
        for k in (0..width).rev() {
            local[k] = rest % card[start + k];
            rest /= card[start + k];
        }
        states[start..start + width].copy_from_slice(&local[..width]);
        states[t] = x;
        let mut gain = g.variables()[t].log_potential[x];
        for &c in &by_last[t] {
            gain += g.factors()[c].log_potential.values()[g.factor_offset(c, states)];
        }
        let next = if window == 1 {
            0
        } else if lo(t + 1) > start {
            // drop the oldest variable from the context
            let keep = contexts[t] / card[start];
            (ctx % keep) * card[t] + x
        } else {
            ctx * card[t] + x
        };
        (gain, next)
    };

    let mut value: Vec<Vec<f64>> = contexts.iter().map(|&c| vec![0.0; c]).collect();
    for t in (0..n).rev() {
        for ctx in 0..contexts[t] {
            let mut best = f64::NEG_INFINITY;
            for x in 0..card[t] {
                let (gain, next) = step(t, ctx, x, &mut states);
                let v = gain + value[t + 1][next];
                if v > best {
                    best = v;
                }
            }
            value[t][ctx] = best;
        }
    }

    let mut assignment = vec![0usize; n];
    let mut ctx = 0;
    for t in 0..n {
        let mut best = f64::NEG_INFINITY;
        let mut choice = (0, 0);
        for x in 0..card[t] {
            let (gain, next) = step(t, ctx, x, &mut states);
            let v = gain + value[t + 1][next];
            if v > best {
                best = v;
                choice = (x, next);
            }
        }
        assignment[t] = choice.0;
        ctx = choice.1;
    }
    let s = score_unchecked(g, &assignment);
    Ok((Assignment(assignment), s))
}

/// Exact MAP for pairwise chains: every factor covers `{i}` or `{i, i+1}`.
pub fn viterbi_chain_map(g: &FactorGraph) -> Result<(Assignment, f64)> {
    let n = g.num_variables();
    let card: Vec<usize> = (0..n).map(|i| g.cardinality(i)).collect();
    let mut unary: Vec<Vec<f64>> = g.variables().iter().map(|v| v.log_potential.clone()).collect();
    // pair[t][x * K_{t+1} + y] couples x_t = x and x_{t+1} = y
    let mut pair: Vec<Vec<f64>> = (0..n.saturating_sub(1))
        .map(|t| vec![0.0; card[t] * card[t + 1]])
        .collect();
    for (c, f) in g.factors().iter().enumerate() {
        let t = f.log_potential.values();
        match *f.scope.as_slice() {
            [i] => {
                for (u, v) in unary[i].iter_mut().zip(t) {
                    *u += v;
                }
            }
            [a, b] if b == a + 1 => pair[a].iter_mut().zip(t).for_each(|(p, v)| *p += v),
            [a, b] if a == b + 1 => {
                // table indexed (x_a, x_b) with a = b + 1; transpose
                for x in 0..card[b] {
                    for y in 0..card[a] {
                        pair[b][x * card[a] + y] += t[y * card[b] + x];
                    }
                }
            }
            _ => bail!(Structure, "factor {c} scope {:?} is not a chain edge", f.scope),
        }
    }
    if n == 0 {
        return Ok((Assignment(Vec::new()), 0.0));
    }

    let mut value: Vec<Vec<f64>> = vec![Vec::new(); n];
    value[n - 1] = unary[n - 1].clone();
    for t in (0..n - 1).rev() {
        value[t] = (0..card[t])
            .map(|x| {
                let best = (0..card[t + 1])
                    .map(|y| pair[t][x * card[t + 1] + y] + value[t + 1][y])
                    .fold(f64::NEG_INFINITY, f64::max);
                unary[t][x] + best
            })
            .collect();
    }

    let first_argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (k, v) in vals.enumerate() {
            if v > best {
                best = v;
                arg = k;
            }
        }
        arg
    };
    let mut assignment = vec![0usize; n];
    assignment[0] = first_argmax(&mut value[0].iter().copied());
    for t in 0..n - 1 {
        let x = assignment[t];
        assignment[t + 1] = first_argmax(
            &mut (0..card[t + 1]).map(|y| pair[t][x * card[t + 1] + y] + value[t + 1][y]),
        );
    }
    let s = score_unchecked(g, &assignment);
    Ok((Assignment(assignment), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;
    use crate::pgm::{two_var_graph, FactorNode, VariableNode};

    #[test]
    fn brute_force_examples() {
        let g = FactorGraph::new(vec![VariableNode::new(0, vec![0.2, 0.7])], vec![]).unwrap();
        let (a, s) = brute_force_map(&g).unwrap();
        assert_eq!(a.states(), &[1]);
        assert_eq!(s, 0.7);

        let (a, s) = brute_force_map(&two_var_graph()).unwrap();
        assert_eq!(a.states(), &[1, 1]);
        assert_eq!(s, 3.0);
    }

    #[test]
    fn brute_force_capacity() {
        let g = FactorGraph::new((0..25).map(|i| VariableNode::new(i, vec![0.0, 0.0])).collect(), vec![])
            .unwrap();
        assert!(matches!(brute_force_map(&g), Err(crate::Error::Capacity(_))));
    }

    #[test]
    fn ties_resolve_to_all_zeros() {
        let g = FactorGraph::new(
            (0..4).map(|i| VariableNode::new(i, vec![0.5, 0.5])).collect(),
            (0..3)
                .map(|c| FactorNode::new(c, vec![c, c + 1], Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()))
                .collect(),
        )
        .unwrap();
        assert_eq!(brute_force_map(&g).unwrap().0.states(), &[0, 0, 0, 0]);
        assert_eq!(viterbi_chain_map(&g).unwrap().0.states(), &[0, 0, 0, 0]);
        assert_eq!(window_dp_map(&g, 2).unwrap().0.states(), &[0, 0, 0, 0]);
    }

    #[test]
    fn two_var_chain() {
        let (a, s) = viterbi_chain_map(&two_var_graph()).unwrap();
        assert_eq!(a.states(), &[1, 1]);
        assert_eq!(s, 3.0);
    }

    #[test]
    fn reversed_pair_scope() {
        let g = FactorGraph::new(
            vec![VariableNode::new(0, vec![0.0, 0.0, 0.1]), VariableNode::new(1, vec![0.0, 0.0])],
            vec![FactorNode::new(
                0,
                vec![1, 0],
                Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap(),
            )],
        )
        .unwrap();
        let bf = brute_force_map(&g).unwrap();
        assert_eq!(bf.0.states(), &[0, 1]);
        assert_eq!(viterbi_chain_map(&g).unwrap(), bf);
        assert_eq!(window_dp_map(&g, 2).unwrap(), bf);
    }

    #[test]
    fn structure_errors() {
        let g = FactorGraph::new(
            (0..3).map(|i| VariableNode::new(i, vec![0.0, 0.0])).collect(),
            vec![FactorNode::new(0, vec![0, 2], Tensor::zeros(vec![2, 2]).unwrap())],
        )
        .unwrap();
        assert!(matches!(window_dp_map(&g, 3), Err(crate::Error::Structure(_))));
        assert!(matches!(viterbi_chain_map(&g), Err(crate::Error::Structure(_))));

        let g = FactorGraph::new(
            (0..3).map(|i| VariableNode::new(i, vec![0.0, 0.0])).collect(),
            vec![FactorNode::new(0, vec![0, 1, 2], Tensor::zeros(vec![2, 2, 2]).unwrap())],
        )
        .unwrap();
        assert!(matches!(window_dp_map(&g, 2), Err(crate::Error::Structure(_))));
        assert!(window_dp_map(&g, 3).is_ok());
    }

    #[test]
    fn empty_graph() {
        let g = FactorGraph::new(vec![], vec![]).unwrap();
        assert_eq!(brute_force_map(&g).unwrap(), (Assignment(vec![]), 0.0));
        assert_eq!(window_dp_map(&g, 3).unwrap(), (Assignment(vec![]), 0.0));
        assert_eq!(viterbi_chain_map(&g).unwrap(), (Assignment(vec![]), 0.0));
    }
}
