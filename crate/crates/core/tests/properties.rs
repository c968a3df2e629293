use proptest::prelude::*;

use odp_core::autodiff::{grad_check, Tape, Tensor};
use odp_core::formats::{
    decode_dataset, decode_model, decode_spectrum, encode_dataset, encode_model, encode_spectrum,
};
use odp_core::grid_spectra::{artifact_map, average_spectrum, log_magnitude_spectrum, mirror_bin, ImageGrid};
use odp_core::losses::{alignment_groups, alignment_loss, purification_loss, sparsity_loss, sufficiency_loss};
use odp_core::metrics::{balanced_accuracy, knn_accuracy, nll, pearson, NLL_CLAMP};
use odp_core::model::{decompose, Head, HeadKind, ModelConfig, ModelParams};
use odp_core::synthgen::{gen_feature_split, FeatureDatasetConfig, Split};
use odp_core::trainer::{train, TrainConfig};

fn image(w: usize, h: usize) -> impl Strategy<Value = ImageGrid> {
    prop::collection::vec(0.0f64..1.0, w * h).prop_map(move |v| ImageGrid::new(w, h, v).unwrap())
}

fn sized_image() -> impl Strategy<Value = ImageGrid> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| image(w, h))
}

fn probs(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.5), 0.0f64..=1.0], d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_is_point_symmetric_about_dc(img in sized_image()) {
        let s = log_magnitude_spectrum(&img);
        let (h, w) = (s.height(), s.width());
        for r in 0..h {
            for c in 0..w {
                let (mr, mc) = mirror_bin(r, c, h, w);
                prop_assert!((s.get(r, c) - s.get(mr, mc)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn artifact_map_against_itself_has_unit_pcc(a in image(8, 8), real in image(8, 8)) {
        let sa = log_magnitude_spectrum(&a);
        let sr = log_magnitude_spectrum(&real);
        let d = artifact_map(&sa, &sr).unwrap();
        if let Ok(p) = pearson(d.values(), d.values()) {
            prop_assert!((p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decomposition_reconstructs_and_partitions(
        (z, pu, ps) in (1usize..40).prop_flat_map(|d| (prop::collection::vec(-1e3f64..1e3, d), probs(d), probs(d)))
    ) {
        let dec = decompose(&z, &pu, &ps).unwrap();
        for (j, zj) in z.iter().enumerate() {
            prop_assert_eq!((dec.z_u[j] + dec.z_s[j] + dec.z_n[j]).to_bits(), zj.to_bits());
            let (mu, ms) = (dec.m_u[j], dec.m_s[j]);
            prop_assert!(mu == 0.0 || mu == 1.0);
            prop_assert!(ms == 0.0 || ms == 1.0);
            prop_assert_eq!(mu * (1.0 - mu) * ms, 0.0);
            // Exactly one of the three effective channel sets claims j.
            let claims = [mu, (1.0 - mu) * ms, (1.0 - mu) * (1.0 - ms)];
            prop_assert_eq!(claims.iter().sum::<f64>(), 1.0);
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        prop_assert_eq!(dot(&dec.z_u, &dec.z_s), 0.0);
        prop_assert_eq!(dot(&dec.z_u, &dec.z_n), 0.0);
        prop_assert_eq!(dot(&dec.z_s, &dec.z_n), 0.0);
    }

    #[test]
    fn ste_forward_is_binary(p in prop::collection::vec(0.0f64..=1.0, 1..30)) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row(p));
        let m = tape.ste_threshold(v);
        prop_assert!(tape.value(m).data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn universal_prediction_ignores_unselected_channels(
        seed in 0u64..1000,
        z in prop::collection::vec(-2.0f64..2.0, 12),
        junk in prop::collection::vec(-50.0f64..50.0, 12),
    ) {
        let cfg = ModelConfig { gate_bias_init: 0.0, ..Default::default() };
        let p = ModelParams::init(12, 3, &cfg, seed).unwrap();
        let (pu, ps) = p.gate_probs(&z);
        let dec = decompose(&z, &pu, &ps).unwrap();
        let swapped: Vec<f64> = (0..12).map(|j| if dec.m_u[j] == 1.0 { z[j] } else { junk[j] }).collect();
        let zu2: Vec<f64> = swapped.iter().zip(&dec.m_u).map(|(a, m)| a * m).collect();
        prop_assert_eq!(p.auth.logits(&dec.z_u), p.auth.logits(&zu2));
    }

    #[test]
    fn component_losses_are_non_negative(
        seed in 0u64..1000,
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 2..8),
        teacher in prop::collection::vec(-3.0f64..3.0, 21),
    ) {
        let n = rows.len();
        let p = ModelParams::init(6, 2, &ModelConfig::default(), seed).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let z = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let (pu, ps) = vars.gate(&mut tape, z).unwrap();
        let sp = sparsity_loss(&mut tape, pu, ps).unwrap();
        let logits = vars.gen.forward(&mut tape, z).unwrap();
        let t = tape.constant(Tensor::new(n, 3, teacher[..3 * n].to_vec()).unwrap());
        let kl = sufficiency_loss(&mut tape, logits, t).unwrap();
        let shifted = tape.scale(z, 0.5);
        let pl = purification_loss(&mut tape, &vars.auth, z, shifted).unwrap();
        let g: Vec<u16> = (0..n).map(|i| (i % 3) as u16).collect();
        let y: Vec<u8> = g.iter().map(|&g| u8::from(g != 0)).collect();
        let al = alignment_loss(&mut tape, z, &alignment_groups(&g, &y, true), None).unwrap();
        for v in [sp, kl, pl, al] {
            prop_assert!(tape.value(v).item() >= 0.0);
        }
    }

    #[test]
    fn linear_purification_equals_projected_perturbation(
        seed in 0u64..1000,
        zu in prop::collection::vec(-2.0f64..2.0, 8),
        delta in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let p = ModelParams::init(8, 2, &ModelConfig::default(), seed).unwrap();
        let Head::Linear(lin) = &p.auth else { unreachable!() };
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let a = tape.constant(Tensor::row(zu.clone()));
        let b = tape.constant(Tensor::row(zu.iter().zip(&delta).map(|(x, d)| x + d).collect()));
        let loss = purification_loss(&mut tape, &vars.auth, a, b).unwrap();
        let expected: f64 = (0..lin.w.cols())
            .map(|k| (0..8).map(|i| delta[i] * lin.w.get(i, k)).sum::<f64>().powi(2))
            .sum();
        let got = tape.value(loss).item();
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn bacc_is_permutation_and_encoding_invariant(
        pairs in prop::collection::vec((0u8..2, 0u8..2), 1..60),
        shift in 0usize..60,
    ) {
        let preds: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let truths: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let base = balanced_accuracy(&preds, &truths).unwrap();
        let k = shift % pairs.len();
        let mut rp = preds.clone();
        let mut rt = truths.clone();
        rp.rotate_left(k);
        rt.rotate_left(k);
        prop_assert_eq!(balanced_accuracy(&rp, &rt).unwrap().value, base.value);
        let flip = |v: &[u8]| v.iter().map(|x| 1 - x).collect::<Vec<u8>>();
        let swapped = balanced_accuracy(&flip(&preds), &flip(&truths)).unwrap();
        prop_assert!((swapped.value - base.value).abs() < 1e-12);
    }

    #[test]
    fn nll_is_positive_even_for_perfect_predictions(truths in prop::collection::vec(0u8..2, 1..40)) {
        let exact: Vec<f64> = truths.iter().map(|&t| f64::from(t)).collect();
        let v = nll(&exact, &truths).unwrap();
        prop_assert!(v > 0.0);
        prop_assert!((v + (1.0 - NLL_CLAMP).ln()).abs() < 1e-12);
    }

    #[test]
    fn knn_never_counts_the_sample_itself(
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..30),
        k in 1usize..5,
    ) {
        let n = points.len();
        prop_assume!(n > k);
        // Unique labels: any hit would have to come from the sample itself.
        let labels: Vec<u32> = (0..n as u32).collect();
        prop_assert_eq!(knn_accuracy(&points, &labels, k).unwrap(), 0.0);
    }

    #[test]
    fn generated_datasets_keep_subspaces_disjoint_and_classes_balanced(
        seed in 0u64..1000,
        n in 1usize..200,
        nu in 1usize..6,
        ns in 1usize..6,
    ) {
        let cfg = FeatureDatasetConfig {
            dim: 16,
            n_universal: nu,
            n_specific: ns,
            n_generators: 3,
            n_semantic: 3,
            n_samples: n,
            seed,
            ..Default::default()
        };
        let (ds, t) = gen_feature_split(&cfg, Split::Train).unwrap();
        let u: std::collections::BTreeSet<_> = t.u.iter().collect();
        prop_assert!(t.s.iter().all(|c| !u.contains(c)));
        prop_assert!(t.n.iter().all(|c| !u.contains(c) && !t.s.contains(c)));
        let reals = ds.samples.iter().filter(|s| s.y == 0).count();
        prop_assert_eq!(reals, n / 2);
        prop_assert_eq!(ds.len() - reals, n.div_ceil(2));
    }

    #[test]
    fn encodings_round_trip_byte_identically(seed in 0u64..1000, n in 1usize..20, mlp in any::<bool>()) {
        let cfg = FeatureDatasetConfig {
            dim: 10,
            n_universal: 2,
            n_specific: 3,
            n_generators: 2,
            n_semantic: 2,
            n_samples: n,
            seed,
            ..Default::default()
        };
        let (ds, _) = gen_feature_split(&cfg, Split::Test).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        prop_assert_eq!(encode_dataset(&decode_dataset(&bytes).unwrap()).unwrap(), bytes);

        let head = if mlp { HeadKind::Mlp { hidden: 4 } } else { HeadKind::Linear };
        let mc = ModelConfig { auth_head: head, gen_head: head, hidden: Some(5), ..Default::default() };
        let p = ModelParams::init(10, 2, &mc, seed).unwrap();
        let mb = encode_model(&p);
        prop_assert_eq!(encode_model(&decode_model(&mb).unwrap()), mb);

        let img: Vec<f64> = ds.samples.iter().flat_map(|s| s.z.iter().map(|v| v.abs().min(1.0))).collect();
        let g = ImageGrid::new(10, n, img).unwrap();
        let sb = encode_spectrum(&average_spectrum(&[g]).unwrap());
        prop_assert_eq!(encode_spectrum(&decode_spectrum(&sb).unwrap()), sb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_backward_matches_finite_differences(
        a in prop::collection::vec(-1.5f64..1.5, 12),
        b in prop::collection::vec(-1.5f64..1.5, 8),
    ) {
        // Central differences are meaningless across the ReLU kink.
        let near_kink = (0..3).any(|i| (0..2).any(|j| (0..4).map(|k| a[i * 4 + k] * b[k * 2 + j]).sum::<f64>().abs() < 1e-2));
        prop_assume!(!near_kink);
        let x = Tensor::new(3, 4, a).unwrap();
        let w = Tensor::new(4, 2, b).unwrap();
        let err = grad_check(&[x, w], 1e-4, |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let s = tape.sigmoid(h);
            let r = tape.relu(h);
            let m = tape.mul(s, r)?;
            let sm = tape.softmax(m);
            let l = tape.log(sm)?;
            let q = tape.l2_norm_sq(h);
            let lm = tape.mean(l);
            tape.sub(q, lm)
        })
        .unwrap();
        prop_assert!(err < 1e-4, "rel err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn optimizer_steps_follow_epochs_times_batches(
        (n, b) in (2usize..20).prop_flat_map(|b| (b..60, Just(b))),
        epochs in 1usize..3,
    ) {
        let cfg = FeatureDatasetConfig {
            dim: 8,
            n_universal: 2,
            n_specific: 2,
            n_generators: 2,
            n_semantic: 2,
            n_samples: n,
            ..Default::default()
        };
        let (ds, _) = gen_feature_split(&cfg, Split::Train).unwrap();
        let tc = TrainConfig { epochs, batch_size: b, ..Default::default() };
        let out = train(&tc, &ds).unwrap();
        prop_assert_eq!(out.total_steps, epochs * n.div_ceil(b));
        prop_assert_eq!(out.history.steps.len(), out.total_steps);
        prop_assert_eq!(out.history.epochs.len(), epochs);
    }
}
