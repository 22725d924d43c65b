mod common;

use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remix_core::data::idx::{parse, serialize, IdxArray};
use remix_core::distributions::{DiagGaussian, MixturePosterior};
use remix_core::evaluation::{iwae, stratified_counts};
use remix_core::models::{checkpoint, Likelihood, ModelSpec, RecursiveMixtureModel};
use remix_core::tensor::{logsumexp, Tape, Tensor};

use common::{check_graph, random_inputs, RandomGraph};

fn tiny_spec(d_x: usize, d_z: usize) -> ModelSpec {
    ModelSpec {
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        eps_hidden: 3,
        ..ModelSpec::new(d_x, d_z, Likelihood::Gaussian)
    }
}

fn log_normal(z: f64, mu: f64, logvar: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + logvar + (z - mu).powi(2) / logvar.exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graphs_match_finite_differences(seed in 1u64..1_000_000, depth in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let inputs = random_inputs(&mut rng);
        if let Some(r) = check_graph(&RandomGraph { seed, depth }, &inputs) {
            prop_assert_eq!(r.failures, 0, "worst abs {} rel {} ops {:?}", r.max_abs_err, r.max_rel_err, r.used);
        }
    }

    #[test]
    fn mixing_weights_normalize(seed in any::<u64>(), m in 0usize..5, rows in 1usize..20, scale in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RecursiveMixtureModel::new(tiny_spec(3, 2), m, &mut rng).unwrap();
        let x = Tensor::new(vec![rows, 3], (0..rows * 3).map(|i| scale * ((i as f64) * 0.37).sin()).collect()).unwrap();
        let tape = Tape::new();
        let w = model.mixing_log_weights(&tape, tape.constant(x), m).unwrap().value();
        for i in 0..rows {
            let total: f64 = w.row(i).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "row {} sums to {}", i, total);
            prop_assert!(w.row(i).iter().all(|v| *v <= 0.0));
        }
    }

    #[test]
    fn stratified_counts_keep_total_and_floor(
        raw in prop::collection::vec(0.0f64..1.0, 1..6),
        extra in 0usize..200,
    ) {
        let sum: f64 = raw.iter().sum::<f64>() + 1e-12;
        let weights: Vec<f64> = raw.iter().map(|w| (w + 1e-12 / raw.len() as f64) / sum).collect();
        let total = weights.len() + extra;
        let counts = stratified_counts(&weights, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        prop_assert!(counts.iter().all(|&c| c >= 1));
        // never more than one sample away from the proportional share of the free budget
        for (c, w) in counts.iter().zip(&weights) {
            prop_assert!((*c as f64 - 1.0 - w * extra as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn logsumexp_is_shift_invariant(values in prop::collection::vec(-50.0f64..50.0, 1..10), shift in -500.0f64..500.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let direct = values.iter().map(|v| v.exp()).sum::<f64>().ln();
        prop_assert!((logsumexp(&values) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        prop_assert!((logsumexp(&shifted) - logsumexp(&values) - shift).abs() <= 1e-9);
    }

    #[test]
    fn mixture_density_matches_scalar_formula(
        mus in prop::collection::vec(-3.0f64..3.0, 3),
        logvars in prop::collection::vec(-2.0f64..2.0, 3),
        raw in prop::collection::vec(0.05f64..1.0, 3),
        z in -5.0f64..5.0,
    ) {
        let total: f64 = raw.iter().sum();
        let tape = Tape::new();
        let comps = (0..3)
            .map(|k| DiagGaussian::new(
                tape.constant(Tensor::new(vec![1, 1], vec![mus[k]]).unwrap()),
                tape.constant(Tensor::new(vec![1, 1], vec![logvars[k]]).unwrap()),
            ).unwrap())
            .collect();
        let la: Vec<f64> = raw.iter().map(|w| (w / total).ln()).collect();
        let norm = logsumexp(&la);
        let la: Vec<f64> = la.iter().map(|v| v - norm).collect();
        let q = MixturePosterior::new(comps, tape.constant(Tensor::new(vec![1, 3], la.clone()).unwrap())).unwrap();
        let got = q.log_prob(tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap())).unwrap().value().item();
        let want = (0..3).map(|k| la[k].exp() * log_normal(z, mus[k], logvars[k]).exp()).sum::<f64>().ln();
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn idx_round_trips(
        dims in prop_oneof![prop::collection::vec(1usize..9, 1), prop::collection::vec(1usize..5, 3)],
        fill in any::<u8>(),
    ) {
        let n: usize = dims.iter().product();
        let array = IdxArray { dims, data: (0..n).map(|i| fill.wrapping_add(i as u8)).collect() };
        let bytes = serialize(&array);
        prop_assert_eq!(parse(&bytes, Path::new("mem")).unwrap(), array);
        prop_assert!(parse(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), m in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = RecursiveMixtureModel::new(tiny_spec(4, 3), m, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        checkpoint::save(&model, &path).unwrap();
        let back = checkpoint::load(&path).unwrap();
        let bits = |m: &RecursiveMixtureModel| m.flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&model));
        prop_assert_eq!(back.order(), m);
        prop_assert_eq!(&back.spec, &model.spec);
    }

    /// The exact posterior as proposal makes every importance weight equal
    /// `p(x)`, so IWAE is exact for any `K`.
    #[test]
    fn iwae_is_exact_under_the_true_posterior(seed in any::<u64>(), k in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lg = remix_core::data::LinearGaussian::new(1, 1, vec![1.3], vec![0.2], 0.4).unwrap();
        let data = lg.generate(4, seed);
        // one latent dimension: the posterior is Gaussian and diagonal
        let var = lg.posterior_cov()[0];
        let tape = Tape::new();
        let mu: Vec<f64> = (0..4).map(|i| lg.posterior_mean(data.x.row(i))[0]).collect();
        let q = DiagGaussian::new(
            tape.constant(Tensor::new(vec![4, 1], mu).unwrap()),
            tape.constant(Tensor::full(vec![4, 1], var.ln())),
        ).unwrap();
        let est = iwae(&MixturePosterior::single(q), &lg, &data.x, k, &mut rng).unwrap();
        for i in 0..4 {
            let exact = lg.log_marginal(data.x.row(i));
            prop_assert!((est.data()[i] - exact).abs() < 1e-9, "{} vs {}", est.data()[i], exact);
        }
    }
}
