mod common;

use common::*;
use fgnn_core::decomp::{decompose_factor, decompose_graph, reconstruct};
use fgnn_core::numkit::row_major_offset;
use fgnn_core::pgm::FactorNode;
use fgnn_core::synth::Rng;
use proptest::prelude::*;

fn random_factor(rng: &mut Rng) -> FactorNode {
    let arity = int(rng, 1, 3);
    let shape: Vec<usize> = (0..arity).map(|_| int(rng, 2, 3)).collect();
    FactorNode::new(0, (0..arity).collect(), table(rng, shape, 1.0, 10.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reconstruction_is_exact(seed in any::<u64>()) {
        let f = random_factor(&mut Rng::new(seed));
        let d = decompose_factor(&f).unwrap();
        prop_assert_eq!(d.arity(), f.arity());
        prop_assert_eq!(d.z_cardinality, f.table_len());
        let back = reconstruct(&d);
        prop_assert_eq!(back.shape(), f.log_potential.shape());
        for (a, b) in back.values().iter().zip(f.log_potential.values()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn matching_configuration_attains_the_max(seed in any::<u64>()) {
        let f = random_factor(&mut Rng::new(seed));
        let d = decompose_factor(&f).unwrap();
        let shape = f.log_potential.shape().to_vec();
        for x in all_configs(&shape) {
            let zstar = row_major_offset(&shape, &x).unwrap();
            let sum = |z: usize| -> f64 { d.tables.iter().zip(&x).map(|(t, &xi)| t.get(xi, z)).sum() };
            let best = (0..d.z_cardinality).map(sum).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(sum(zstar), best);
            for z in (0..d.z_cardinality).filter(|&z| z != zstar) {
                prop_assert!(sum(z) < best);
            }
        }
    }

    #[test]
    fn graph_decomposition_covers_every_factor(seed in any::<u64>()) {
        let g = random_graph(&mut Rng::new(seed), 5, 3, 1.0, 4.0);
        let ds = decompose_graph(&g).unwrap();
        prop_assert_eq!(ds.len(), g.num_factors());
        for (d, f) in ds.iter().zip(g.factors()) {
            prop_assert_eq!(d.factor_id, f.id);
        }
    }
}

fn all_configs(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &k in shape {
        out = out
            .into_iter()
            .flat_map(|p| (0..k).map(move |x| [p.clone(), vec![x]].concat()))
            .collect();
    }
    out
}
