use nalgebra::{DMatrix, DVector};
use phylogp::hyperfit::{profile_mle, FreeParam, TipLikelihood};
use phylogp::ou::{build_cov_matrix, OuParams};
use phylogp::separation::{run_ica, run_pca, DimMethod, IcaOrientation};
use phylogp::sim::{reference_scenario, reference_params, WeightSampler};
use phylogp::tree::{parse_newick, patristic_distances};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn joint_samples_match_kernel_within_four_standard_errors() {
    let tree = parse_newick("((A:0.4,B:1.1)x:0.6,C:2.0)r;").unwrap();
    let p = OuParams::new(1.5, 0.8, 0.5).unwrap();
    let sampler = WeightSampler::new(&tree, &[p]).unwrap();
    let expected = build_cov_matrix(&p, &patristic_distances(&tree, None).unwrap(), true)
        .unwrap()
        .entries;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws: Vec<DVector<f64>> = (0..n).map(|_| sampler.draw_component(0, &mut rng)).collect();
    let nodes = tree.len();
    for a in 0..nodes {
        for b in a..nodes {
            let prod: Vec<f64> = draws.iter().map(|w| w[a] * w[b]).collect();
            let mean = prod.iter().sum::<f64>() / n as f64;
            let var = prod.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - expected[(a, b)]).abs() < 4.0 * se,
                "entry ({a},{b}): {mean} vs {}",
                expected[(a, b)]
            );
        }
    }
}

#[test]
fn independent_components_are_uncorrelated() {
    let tree = parse_newick("((A:0.4,B:1.1)x:0.6,C:2.0)r;").unwrap();
    let params = reference_params();
    let sampler = WeightSampler::new(&tree, &params).unwrap();
    let n = 20_000u64;
    let draws: Vec<DMatrix<f64>> = (0..n).map(|s| sampler.draw(s).values).collect();
    for node in 0..tree.len() {
        let cross = draws.iter().map(|w| w[(node, 0)] * w[(node, 2)]).sum::<f64>() / n as f64;
        let se = params[0].prior_variance().sqrt() * params[2].prior_variance().sqrt()
            / (n as f64).sqrt();
        assert!(cross.abs() < 4.0 * se, "node {node}: {cross}");
    }
}

#[test]
fn simulated_curves_have_rank_at_most_k() {
    let s = reference_scenario(11);
    let sv = s.dataset.curves.clone().svd(false, false).singular_values;
    let rank = sv.iter().filter(|&&v| v > 1e-9 * sv.max()).count();
    assert!(rank <= 3, "rank {rank}");
}

#[test]
fn weight_orientation_gives_decorrelated_weights() {
    let s = reference_scenario(5);
    let (_, tips) = s.dataset.train();
    let pca = run_pca(&tips, DimMethod::Laplace).unwrap();
    let ica = run_ica(&pca, &tips, IcaOrientation::Weights).unwrap();
    let w = &ica.tip_weights;
    for a in 0..w.ncols() {
        for b in (a + 1)..w.ncols() {
            let (x, y) = (w.column(a), w.column(b));
            let (mx, my) = (x.mean(), y.mean());
            let cov = x.iter().zip(y.iter()).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>();
            let r = cov / (x.variance().sqrt() * y.variance().sqrt() * x.len() as f64);
            assert!(r.abs() < 1e-8, "{r}");
        }
    }
}

#[test]
fn ica_preserves_principal_span_on_reference_data() {
    let s = reference_scenario(2);
    let (_, tips) = s.dataset.train();
    let pca = run_pca(&tips, DimMethod::Laplace).unwrap();
    for orientation in [IcaOrientation::Curves, IcaOrientation::Weights] {
        let ica = run_ica(&pca, &tips, orientation).unwrap();
        let axes = pca.components.rows(0, ica.k());
        let proj = &ica.estimated_basis * axes.transpose() * axes;
        assert!((proj - &ica.estimated_basis).amax() < 1e-8);
        assert!(ica.diagnostics.reconstruction_rel_error < 1e-6);
    }
}

#[test]
fn likelihood_prefers_true_scale_over_tenfold_errors() {
    let truth = reference_params()[0];
    let mut wins = 0;
    for seed in 0..50u64 {
        let s = reference_scenario(seed);
        let tips = s.tree.tips();
        let y = s.weights.component_at(0, &tips);
        let data = TipLikelihood::new(&s.tree, &tips, &y).unwrap();
        let at = |f: f64| {
            data.log_likelihood(&OuParams { sigma_f: truth.sigma_f * f, ..truth })
                .unwrap()
        };
        let l0 = at(1.0);
        if l0 > at(10.0) && l0 > at(0.1) {
            wins += 1;
        }
    }
    assert!(wins >= 45, "{wins}/50");
}

#[test]
fn scale_estimate_tolerates_misspecified_fixed_parameters() {
    let truth = reference_params()[0];
    for (noise_factor, scale_factor) in [(0.5, 1.0), (1.5, 1.0), (1.0, 0.5), (1.0, 1.5), (0.5, 0.5), (1.5, 1.5)] {
        let fixed = OuParams {
            sigma_f: truth.sigma_f,
            lambda: Some(truth.lambda.unwrap() * scale_factor),
            sigma_n: truth.sigma_n * noise_factor,
        };
        let mut estimates: Vec<f64> = (0..50u64)
            .map(|seed| {
                let s = reference_scenario(seed);
                let tips = s.tree.tips();
                let y = s.weights.component_at(0, &tips);
                let data = TipLikelihood::new(&s.tree, &tips, &y).unwrap();
                profile_mle(&data, FreeParam::SigmaF, &fixed, None)
                    .unwrap()
                    .estimate
                    .unwrap()
            })
            .collect();
        estimates.sort_by(f64::total_cmp);
        let median = 0.5 * (estimates[24] + estimates[25]);
        assert!(
            (median - truth.sigma_f).abs() <= 0.3 * truth.sigma_f,
            "sigma_n x{noise_factor}, lambda x{scale_factor}: median {median}"
        );
    }
}

#[test]
fn principal_axes_miss_the_basis_that_ica_recovers() {
    use phylogp::separation::align_components;
    let s = reference_scenario(0);
    let (_, tips) = s.dataset.train();
    let pca = run_pca(&tips, DimMethod::Laplace).unwrap();
    let axes = pca.components.rows(0, 3).into_owned();
    let min_abs = |m: &DMatrix<f64>| {
        align_components(m, &s.basis.curves)
            .unwrap()
            .correlations
            .iter()
            .map(|c| c.abs())
            .fold(f64::INFINITY, f64::min)
    };
    let ica = run_ica(&pca, &tips, IcaOrientation::Curves).unwrap();
    assert!(min_abs(&axes) < 0.9);
    assert!(min_abs(&ica.estimated_basis) >= 0.9);
}
