mod common;

use common::*;
use fgnn_core::exactparam::{build_max_net, build_sum_via_max, emulate_max_product, Recipe};
use fgnn_core::maxprod::{run_max_product, Mode};
use fgnn_core::synth::Rng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_max_is_exact(a in -(1i64 << 51)..(1i64 << 51), b in -(1i64 << 51)..(1i64 << 51), shift in 0u32..20) {
        let net = build_max_net(2);
        let (a, b) = (a as f64 / (1u64 << shift) as f64, b as f64 / (1u64 << shift) as f64);
        prop_assert_eq!(net.forward(&[a, b]).unwrap(), vec![a.max(b)]);
    }

    #[test]
    fn max_net_size_bounds(n in 1usize..=100) {
        let net = build_max_net(n);
        let levels = n.next_power_of_two().trailing_zeros() as usize;
        prop_assert_eq!(net.depth(), 2 * levels);
        prop_assert!(net.hidden_width() <= 2 * n);
    }

    #[test]
    fn sum_via_max_on_small_integers(m in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = build_sum_via_max(m, n);
        let x: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| int(&mut rng, 0, 50) as f64).collect()).collect();
        let want: Vec<f64> = (0..n).map(|j| x.iter().map(|r| r[j]).sum()).collect();
        prop_assert_eq!(g.apply(&x).unwrap(), want);
    }

    #[test]
    fn emulator_tracks_max_product(seed in any::<u64>(), k in 0usize..=4) {
        let g = random_graph(&mut Rng::new(seed), 5, 3, 1.0, 3.0);
        let bp = run_max_product(&g, k, Mode::Direct).unwrap().0;
        let emu = emulate_max_product(&g, k).unwrap();
        prop_assert!(max_abs_diff(&bp.node_beliefs, &emu) <= 1e-6);
    }

    #[test]
    fn emulator_ignores_factor_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = random_graph(&mut rng, 5, 3, 1.0, 3.0);
        let h = g.permute_factors(&shuffled(&mut rng, g.num_factors())).unwrap();
        let a = emulate_max_product(&g, 3).unwrap();
        let b = emulate_max_product(&h, 3).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
    }
}

#[test]
fn recipe_features_fit_the_emulator() {
    let g = random_graph(&mut Rng::new(11), 5, 3, 1.0, 3.0);
    let r = Recipe::new(&g, 2).unwrap();
    let f = r.features(&g).unwrap();
    assert_eq!(f.edge_dim(), g.edges().len());
    for (e, t) in f.edge.iter().enumerate() {
        assert_eq!(t.iter().sum::<f64>(), 1.0);
        assert_eq!(t[e], 1.0);
    }
    let back = Recipe::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back.features(&g).unwrap(), f);
}
