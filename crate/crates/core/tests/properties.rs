use hiddensym::experiment::trial_seed;
use hiddensym::geometry::region_affine_map;
use hiddensym::net::Neuron;
use hiddensym::rank::{numerical_rank, RankAccumulator};
use hiddensym::symmetry::{apply_permutation, apply_scaling};
use hiddensym::{estimate_fdim, fdim_upper_bound, he_init, Architecture, FdimOptions, Network, Sign, TernaryLabel};
use proptest::prelude::*;

fn arch_strategy(max_in: usize) -> impl Strategy<Value = Architecture> {
    (1..=max_in, prop::collection::vec(1usize..=4, 1..=3), 1usize..=2).prop_map(|(n0, hidden, out)| {
        let mut w = vec![n0];
        w.extend(hidden);
        w.push(out);
        Architecture::new(w).unwrap()
    })
}

fn input(n0: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n0)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(p, q)| (p - q).abs() <= tol * (1.0 + p.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_round_trip(a in arch_strategy(3), seed in any::<u64>()) {
        let net = he_init(&a, seed);
        let flat = net.to_flat();
        prop_assert_eq!(flat.len(), a.param_count());
        prop_assert_eq!(Network::from_flat(&a, &flat).unwrap().to_flat(), flat);
    }

    #[test]
    fn json_round_trip(a in arch_strategy(3), seed in any::<u64>(), bias in any::<bool>()) {
        let net = he_init(&a.clone().with_output_bias(bias), seed);
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn label_round_trip(layers in prop::collection::vec(prop::collection::vec(0u8..3, 1..5), 1..4)) {
        let signs = layers.iter().map(|l| l.iter().map(|&s| [Sign::Neg, Sign::Zero, Sign::Pos][s as usize]).collect()).collect();
        let label = TernaryLabel::new(signs);
        prop_assert_eq!(label.to_string().parse::<TernaryLabel>().unwrap(), label);
    }

    #[test]
    fn permutation_and_scaling_preserve_the_function(
        a in arch_strategy(3),
        seed in any::<u64>(),
        c in 0.05f64..20.0,
        shuffle in any::<u64>(),
        x in input(3),
    ) {
        let net = he_init(&a, seed);
        let d = a.depth();
        let layer = 1 + (shuffle as usize) % (d - 1);
        let n = a.width(layer);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left((shuffle >> 8) as usize % n);
        let moved = apply_scaling(&apply_permutation(&net, layer, &perm).unwrap(), Neuron::new(layer, 0), c).unwrap();
        let x = &x[..a.input_dim()];
        prop_assert!(close(&net.forward(x).unwrap(), &moved.forward(x).unwrap(), 1e-10));

        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let back = apply_permutation(&apply_permutation(&net, layer, &perm).unwrap(), layer, &inverse).unwrap();
        prop_assert_eq!(back.to_flat(), net.to_flat());
    }

    #[test]
    fn rank_is_monotone_in_rows(
        rows in prop::collection::vec(prop::collection::vec(-3i32..=3, 5), 1..12),
    ) {
        let data: Vec<f64> = rows.iter().flatten().map(|&v| v as f64).collect();
        let mut prev = 0;
        let mut acc = RankAccumulator::new(5, 1e-9);
        for r in 1..=rows.len() {
            let k = numerical_rank(&data[..r * 5], r, 5, 1e-9);
            prop_assert!(k >= prev && k <= r.min(5));
            acc.push_rows(&data[(r - 1) * 5..r * 5], 1);
            prop_assert_eq!(acc.rank(), k);
            prev = k;
        }
    }

    #[test]
    fn region_maps_match_forward(seed in any::<u64>(), x in input(2)) {
        let net = he_init(&"2,3,3,2".parse().unwrap(), seed);
        let label = net.ternary_label(&x, 0.0).unwrap();
        prop_assume!(!label.truncated(2).has_zero());
        let m = region_affine_map(&net, &label.truncated(2)).unwrap();
        prop_assert!(close(&m.apply(&x), &net.forward(&x).unwrap(), 1e-10));
    }

    #[test]
    fn trial_seeds_are_stable_and_distinct(base in any::<u64>(), i in 0usize..10_000) {
        let a: Architecture = "5,5,5,1".parse().unwrap();
        prop_assert_eq!(trial_seed(base, &a, i), trial_seed(base, &a, i));
        prop_assert_ne!(trial_seed(base, &a, i), trial_seed(base, &a, i + 1));
        prop_assert_ne!(trial_seed(base, &a, i), trial_seed(base, &"5,5,1".parse().unwrap(), i));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fdim_never_exceeds_the_bound(a in arch_strategy(3), seed in any::<u64>(), fseed in any::<u64>()) {
        let net = he_init(&a, seed);
        let e = estimate_fdim(&net, &FdimOptions { m_multiplier: 5.0, early_exit: false, ..FdimOptions::default() }.with_seed(fseed)).unwrap();
        prop_assert!(e.fdim <= fdim_upper_bound(&a));
        prop_assert_eq!(e.upper_bound, fdim_upper_bound(&a));
    }

    #[test]
    fn fdim_is_invariant_under_scaling(seed in any::<u64>(), c in 0.25f64..4.0, i in 0usize..4) {
        let net = he_init(&"3,4,4,1".parse().unwrap(), seed);
        let s = apply_scaling(&net, Neuron::new(2, i), c).unwrap();
        let opts = FdimOptions { m_multiplier: 20.0, early_exit: false, ..FdimOptions::default() };
        prop_assert_eq!(estimate_fdim(&net, &opts).unwrap().fdim, estimate_fdim(&s, &opts).unwrap().fdim);
    }
}
