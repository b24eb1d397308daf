mod common;

use common::*;
use fgnn_core::fgnn::{find_perfect_matching, fv_layer, mpnn_transform, stack_forward, vf_layer, FgnnStack, StackLayer};
use fgnn_core::numkit::Activation;
use fgnn_core::pgm::{FactorGraph, FactorNode, VariableNode};
use fgnn_core::synth::Rng;
use proptest::prelude::*;

/// Window chain `c_i = {i, .., i + w − 1}` truncated at the end.
fn window_chain(rng: &mut Rng, n: usize, w: usize) -> FactorGraph {
    let vars = (0..n).map(|i| VariableNode::new(i, vec![rng.uniform(), rng.uniform()])).collect();
    let factors = (0..n)
        .map(|i| {
            let scope: Vec<usize> = (i..(i + w).min(n)).collect();
            let shape = vec![2; scope.len()];
            FactorNode::new(i, scope, table(rng, shape, 0.0, 1.0))
        })
        .collect();
    FactorGraph::new(vars, factors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn halves_ignore_factor_and_edge_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = random_graph(&mut rng, 6, 3, 0.0, 1.0);
        let (nd, fd, ed, w) = (3, 4, 2, 4);
        let p = random_layer(&mut rng, nd, fd, ed, w);
        let feats = random_features(&mut rng, &g, nd, w, ed);
        let perm = shuffled(&mut rng, g.num_factors());
        let h = g.permute_factors(&perm).unwrap();
        let pf = permute_features(&g, &perm, &feats);

        let a = fv_layer(&g, &feats, &p).unwrap();
        let b = fv_layer(&h, &pf, &p).unwrap();
        prop_assert_eq!(a, b);

        let vf_feats = random_features(&mut rng, &g, nd, fd, ed);
        let a = vf_layer(&g, &vf_feats, &p).unwrap();
        let b = vf_layer(&h, &permute_features(&g, &perm, &vf_feats), &p).unwrap();
        let a: Vec<_> = perm.iter().map(|&c| a[c].clone()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mpnn_rewrite_matches_the_layer(seed in any::<u64>(), n in 2usize..=8, w in 1usize..=4) {
        let mut rng = Rng::new(seed);
        let g = window_chain(&mut rng, n, w);
        let h = find_perfect_matching(&g).unwrap();
        let (nd, ed, width) = (2, 3, 4);
        let p = random_layer(&mut rng, nd, width, ed, width);
        let feats = random_features(&mut rng, &g, nd, width, ed);
        let (f_out, n_out) = mpnn_transform(&g, &h, &p).unwrap().forward(&feats).unwrap();
        prop_assert!(max_abs_diff(&f_out, &vf_layer(&g, &feats, &p).unwrap()) <= 1e-9);
        prop_assert!(max_abs_diff(&n_out, &fv_layer(&g, &feats, &p).unwrap()) <= 1e-9);
    }

    #[test]
    fn stack_forward_is_bit_identical_across_runs(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = random_graph(&mut rng, 6, 3, 0.0, 1.0);
        let (nd, fd, ed, w) = (2, 3, 2, 5);
        let layers = vec![
            StackLayer::Fgnn(random_layer(&mut rng, nd, fd, ed, w)),
            StackLayer::Dense { node: dense(&mut rng, w, w, Activation::Relu), factor: dense(&mut rng, w, w, Activation::Relu) },
        ];
        let s = FgnnStack::new(nd, fd, ed, layers, Some(dense(&mut rng, w, 3, Activation::Identity))).unwrap();
        let feats = random_features(&mut rng, &g, nd, fd, ed);
        let a = stack_forward(&s, &g, &feats).unwrap();
        let b = stack_forward(&s, &g, &feats).unwrap();
        prop_assert_eq!(a, b);
        let back = FgnnStack::from_json(&s.to_json().unwrap()).unwrap();
        prop_assert_eq!(s.node_outputs(&g, &feats).unwrap(), back.node_outputs(&g, &feats).unwrap());
    }
}
