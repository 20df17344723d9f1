mod common;

use proptest::prelude::*;

use rsmg_core::align::{contrastive_loss, vv_cosine_loss};
use rsmg_core::augment::{crop_reflect, Pca};
use rsmg_core::autodiff::Tape;
use rsmg_core::disentangle::histogram_equalize;
use rsmg_core::pipeline::{Confusion, ExactMetrics, Metrics, RunConfig, ShiftSpec};
use rsmg_core::tensor::reflect_index;
use rsmg_core::text::BpeVocab;
use rsmg_core::wavelet::{dwt2, idwt2};
use rsmg_core::Tensor;

use common::{brute_force_metrics, rand_tensor};

fn labels(k: usize, n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wavelet_round_trip_and_energy(n in 1usize..3, c in 1usize..4, h2 in 1usize..6, w2 in 1usize..6, seed: u64) {
        let x = rand_tensor(&[n, c, 2 * h2, 2 * w2], seed);
        let bands = dwt2(&x).unwrap();
        let y = idwt2(&bands).unwrap();
        prop_assert!(x.max_abs_diff(&y) <= 1e-5);
        let energy = |t: &Tensor| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let e_out: f64 = bands.as_array().into_iter().map(energy).sum();
        prop_assert!((energy(&x) - e_out).abs() <= 1e-4 * energy(&x).max(1e-12));
    }

    #[test]
    fn histogram_equalization_is_monotone(values in prop::collection::vec(-1e3f32..1e3, 1..80), flat in any::<bool>()) {
        let values = if flat { vec![values[0]; values.len()] } else { values };
        let out = histogram_equalize(&values);
        prop_assert_eq!(out.len(), values.len());
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi - lo < 1e-12 {
            prop_assert_eq!(&out, &values);
            return Ok(());
        }
        for i in 0..values.len() {
            prop_assert!((0.0..=1.0).contains(&out[i]));
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn contrastive_loss_ignores_row_order(n in 2usize..7, seed: u64, rot in 1usize..6) {
        let v = rand_tensor(&[n, 5], seed);
        let t = rand_tensor(&[n, 5], seed ^ 1);
        let classes: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let eval = |order: &[usize]| {
            let mut tape = Tape::new();
            let vv = tape.constant(v.clone());
            let tv = tape.constant(t.clone());
            let vv = tape.gather_rows(vv, order).unwrap();
            let tv = tape.gather_rows(tv, order).unwrap();
            let vv = tape.l2_normalize(vv).unwrap();
            let tv = tape.l2_normalize(tv).unwrap();
            let cls: Vec<usize> = order.iter().map(|&i| classes[i]).collect();
            let scale = tape.constant(Tensor::scalar(5.0));
            let l = contrastive_loss(&mut tape, vv, tv, &cls, scale).unwrap();
            tape.value(l).item()
        };
        let base: Vec<usize> = (0..n).collect();
        prop_assert!((eval(&base) - eval(&perm)).abs() <= 1e-5);
    }

    #[test]
    fn cosine_loss_is_symmetric_and_bounded(n in 1usize..6, seed: u64) {
        let mut tape = Tape::new();
        let a = tape.constant(rand_tensor(&[n, 4], seed));
        let b = tape.constant(rand_tensor(&[n, 4], seed ^ 2));
        let a = tape.l2_normalize(a).unwrap();
        let b = tape.l2_normalize(b).unwrap();
        let ab = vv_cosine_loss(&mut tape, a, b).unwrap();
        let ba = vv_cosine_loss(&mut tape, b, a).unwrap();
        let aa = vv_cosine_loss(&mut tape, a, a).unwrap();
        let (ab, ba, aa) = (tape.value(ab).item(), tape.value(ba).item(), tape.value(aa).item());
        prop_assert_eq!(ab, ba);
        prop_assert!((-1e-6..=2.0 + 1e-6).contains(&ab));
        prop_assert!(aa.abs() <= 1e-6);
    }

    #[test]
    fn metrics_match_brute_force((truth, pred) in labels(4, 40)) {
        let m = ExactMetrics::from_confusion(&Confusion::from_predictions(4, &truth, &pred).unwrap()).unwrap();
        let (oa, aa, kappa) = brute_force_metrics(4, &truth, &pred);
        for (r, f) in [(m.oa, oa), (m.aa, aa), (m.kappa, kappa)] {
            prop_assert_eq!(*r.numer() * f.1, *r.denom() * f.0);
        }
        let fm = Metrics::from_predictions(4, &truth, &pred).unwrap();
        prop_assert!(fm.kappa <= fm.oa + 1e-12);
        let c = &fm.confusion;
        for k in 0..4 {
            prop_assert_eq!(c.row_sum(k), truth.iter().filter(|&&t| t == k).count() as u64);
        }
        prop_assert!((fm.oa - c.trace() as f64 / c.total() as f64).abs() < 1e-12);
    }

    #[test]
    fn reflect_index_stays_in_range(i in -200isize..200, n in 1usize..20) {
        let r = reflect_index(i, n);
        prop_assert!(r < n);
        if (0..n as isize).contains(&i) {
            prop_assert_eq!(r, i as usize);
        }
    }

    #[test]
    fn interior_crops_copy_the_window(seed: u64, row in 2usize..6, col in 2usize..6) {
        let x = rand_tensor(&[2, 8, 8], seed);
        let p = crop_reflect(&x, row, col, 5).unwrap();
        for c in 0..2 {
            for dy in 0..5 {
                for dx in 0..5 {
                    prop_assert_eq!(p.get(&[c, dy, dx]), x.get(&[c, row + dy - 2, col + dx - 2]));
                }
            }
        }
    }

    #[test]
    fn full_rank_pca_round_trips(seed: u64, c in 2usize..6) {
        let x = rand_tensor(&[c, 6, 5], seed);
        let pca = Pca::fit(&x, c).unwrap();
        let back = pca.inverse_transform(&pca.transform(&x).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-5);
        let ev = &pca.eigenvalues;
        prop_assert!(ev.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn bpe_decodes_what_it_encodes(text in "[a-z ,.]{1,60}") {
        let vocab = BpeVocab::default();
        let ids = vocab.encode(&text);
        prop_assert_eq!(ids[0], vocab.bos());
        prop_assert_eq!(*ids.last().unwrap(), vocab.eos());
        prop_assert_eq!(vocab.decode(&ids), rsmg_core::text::normalize(&text));
    }

    #[test]
    fn shift_spec_text_round_trips(gain in 0.0f32..1.0, offset in 0.0f32..0.5, morph in 0.5f32..3.0, noise in 0.0f32..0.2, seed: u64) {
        let s = ShiftSpec { spectral_gain: gain, spectral_offset: offset, morphology: morph, noise_sigma: noise, seed };
        prop_assert_eq!(s.to_string().parse::<ShiftSpec>().unwrap(), s);
    }

    #[test]
    fn run_config_text_round_trips(lr in 1e-5f32..1e-1, epochs in 1usize..50, seed: u64) {
        let mut cfg = RunConfig::desk();
        cfg.lr = lr;
        cfg.epochs = epochs;
        cfg.seed = seed;
        prop_assert_eq!(RunConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
    }
}
