use nalgebra::{DMatrix, DVector, SymmetricEigen};
use phylogp::gp::gp_posterior;
use phylogp::hyperfit::{log_marginal_likelihood, ratio_mle, TipLikelihood};
use phylogp::ou::{build_cov_matrix, ou_cov, validate_psd, OuParams};
use phylogp::tree::{
    canonical_form, parse_newick, patristic_distances, random_tree, serialize_newick, PhyloTree,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree_from(seed: u64, tips: usize, mu: f64, shape: f64) -> PhyloTree {
    random_tree(tips, mu, shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn params_strategy() -> impl Strategy<Value = OuParams> {
    (0.01f64..10.0, 0.01f64..50.0, 0.0f64..2.0)
        .prop_map(|(f, l, n)| OuParams::new(f, l, n).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn distances_are_a_metric(seed in any::<u64>(), tips in 2usize..=32, mu in 0.05f64..3.0, shape in 0.05f64..3.0) {
        let tree = tree_from(seed, tips, mu, shape);
        prop_assert_eq!(tree.len(), 2 * tips - 1);
        let d = patristic_distances(&tree, None).unwrap();
        let n = d.len();
        for i in 0..n {
            prop_assert_eq!(d.get(i, i), 0.0);
            for j in 0..n {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                prop_assert!(d.get(i, j) >= 0.0);
                for k in 0..n {
                    prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn four_point_condition(seed in any::<u64>(), tips in 2usize..=6, mu in 0.05f64..3.0) {
        let tree = tree_from(seed, tips, mu, 0.5);
        let d = patristic_distances(&tree, None).unwrap();
        let n = d.len();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut s = [
                            d.get(i, j) + d.get(k, l),
                            d.get(i, k) + d.get(j, l),
                            d.get(i, l) + d.get(j, k),
                        ];
                        s.sort_by(f64::total_cmp);
                        prop_assert!((s[2] - s[1]).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn newick_round_trip(seed in any::<u64>(), tips in 2usize..=40, mu in 0.05f64..3.0, shape in 0.05f64..3.0) {
        let tree = tree_from(seed, tips, mu, shape);
        let text = serialize_newick(&tree);
        let back = parse_newick(&text).unwrap();
        prop_assert_eq!(canonical_form(&back), canonical_form(&tree));
        prop_assert_eq!(serialize_newick(&back), text);
        let (a, b) = (patristic_distances(&tree, None).unwrap(), patristic_distances(&back, None).unwrap());
        for id in tree.ids() {
            let other = back.find_by_name(&tree.name(id)).unwrap();
            for jd in tree.ids() {
                let oj = back.find_by_name(&tree.name(jd)).unwrap();
                let (x, y) = (a.get(id.0, jd.0), b.get(other.0, oj.0));
                prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn covariance_over_tips_is_psd(seed in any::<u64>(), tips in 2usize..=40, params in params_strategy(), self_delta in any::<bool>()) {
        let tree = tree_from(seed, tips, 0.5, 0.5);
        let d = patristic_distances(&tree, Some(&tree.tips())).unwrap();
        let k = build_cov_matrix(&params, &d, self_delta).unwrap();
        let eig = SymmetricEigen::new(k.entries.clone()).eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * eig.max());
        prop_assert!(validate_psd(&k.entries, 1e-10).unwrap().is_psd);
    }

    #[test]
    fn covariance_scales_with_sigma_f_squared(seed in any::<u64>(), tips in 2usize..=20, params in params_strategy(), c in 0.1f64..10.0) {
        let tree = tree_from(seed, tips, 0.5, 0.5);
        let d = patristic_distances(&tree, Some(&tree.tips())).unwrap();
        let base = build_cov_matrix(&params, &d, false).unwrap().entries;
        let scaled = OuParams { sigma_f: c * params.sigma_f, ..params };
        let k = build_cov_matrix(&scaled, &d, false).unwrap().entries;
        prop_assert!((k - base * (c * c)).amax() <= 1e-12 * (c * params.sigma_f).powi(2).max(1.0));
    }

    #[test]
    fn kernel_decreases_with_distance(params in params_strategy(), a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ou_cov(&params, near, false).unwrap() >= ou_cov(&params, far, false).unwrap());
        let jump = ou_cov(&params, 0.0, true).unwrap() - ou_cov(&params, 0.0, false).unwrap();
        prop_assert!((jump - params.sigma_n * params.sigma_n).abs() <= 1e-12 * params.prior_variance());
    }

    #[test]
    fn posterior_variance_is_bounded(seed in any::<u64>(), tips in 2usize..=16, params in params_strategy(), ys in prop::collection::vec(-5.0f64..5.0, 16)) {
        let tree = tree_from(seed, tips, 0.5, 0.5);
        let t = tree.tips();
        let y = DVector::from_column_slice(&ys[..t.len()]);
        let queries: Vec<_> = tree.ids().collect();
        for post in gp_posterior(&tree, &t, &y, &params, &queries).unwrap() {
            prop_assert!(post.total_variance <= params.prior_variance() * (1.0 + 1e-12));
            prop_assert_eq!(post.specific_variance, params.sigma_n * params.sigma_n);
            prop_assert!(post.inherited_variance >= 0.0);
        }
    }

    #[test]
    fn relabelling_tips_leaves_posteriors_and_likelihood_unchanged(seed in any::<u64>(), tips in 2usize..=12, params in params_strategy(), ys in prop::collection::vec(-5.0f64..5.0, 12), rot in 0usize..12) {
        let tree = tree_from(seed, tips, 0.5, 0.5);
        let t = tree.tips();
        let n = t.len();
        let y = DVector::from_column_slice(&ys[..n]);
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let pt: Vec<_> = order.iter().map(|&i| t[i]).collect();
        let py = DVector::from_iterator(n, order.iter().map(|&i| y[i]));
        let queries: Vec<_> = tree.ids().collect();
        let a = gp_posterior(&tree, &t, &y, &params, &queries).unwrap();
        let b = gp_posterior(&tree, &pt, &py, &params, &queries).unwrap();
        let scale = params.prior_variance().max(1.0);
        for (pa, pb) in a.iter().zip(&b) {
            prop_assert!((pa.mean - pb.mean).abs() <= 1e-8 * scale);
            prop_assert!((pa.total_variance - pb.total_variance).abs() <= 1e-8 * scale);
        }
        let la = log_marginal_likelihood(&tree, &t, &y, &params).unwrap();
        let lb = log_marginal_likelihood(&tree, &pt, &py, &params).unwrap();
        prop_assert!((la - lb).abs() <= 1e-8 * la.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ratio_fit_matches_closed_form(seed in any::<u64>(), tips in 3usize..=30, ratio in 0.05f64..2.0, lambda in 0.1f64..20.0, ys in prop::collection::vec(-5.0f64..5.0, 30)) {
        let tree = tree_from(seed, tips, 0.5, 0.5);
        let t = tree.tips();
        let y = DVector::from_column_slice(&ys[..t.len()]);
        let data = TipLikelihood::new(&tree, &t, &y).unwrap();
        // independent closed form via an explicit inverse of the unit-scale matrix
        let d = patristic_distances(&tree, Some(&t)).unwrap();
        let m = build_cov_matrix(&OuParams::new(1.0, lambda, ratio).unwrap(), &d, true).unwrap().entries;
        let minv: DMatrix<f64> = m.try_inverse().unwrap();
        let closed = ((y.transpose() * minv * &y)[0] / t.len() as f64).sqrt();
        prop_assume!(closed > 2e-4 && closed < 50.0);
        let fit = ratio_mle(&data, lambda, ratio, None).unwrap();
        let est = fit.estimate.unwrap();
        prop_assert!(((est - closed) / closed).abs() < 1e-6, "{} vs {}", est, closed);
    }
}
