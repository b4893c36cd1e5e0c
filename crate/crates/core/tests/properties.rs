mod common;

use capsnet::capsule::{
    capsule_dropout, capsule_lengths, dropout_mask, dynamic_routing, margin_loss, squash, squash_tensor, CapsuleSet,
    DropoutMode, MarginLossParams,
};
use capsnet::cfc::{cfc_param_count, CfcConfig};
use capsnet::data::{batch_iter, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};
use capsnet::decoder::DecoderKind;
use capsnet::model::{CapsuleMode, Model, ModelConfig};
use capsnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn u_hat() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| {
        (Just(a), Just(b), Just(c), prop::collection::vec(-3.0f64..3.0, a * b * c))
    })
}

proptest! {
    #[test]
    fn squash_is_shorter_than_one_and_keeps_direction(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let d = v.len();
        let out = squash_tensor(&Tensor::new(vec![1, d], v.clone()).unwrap());
        let n: f64 = out.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n < 1.0);
        let dot: f64 = out.data().iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
        let oracle = common::squash(&v);
        for (a, b) in out.data().iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn squash_length_grows_with_input_length(v in prop::collection::vec(-5.0f64..5.0, 1..8), a in 0.0f64..4.0, b in 0.0f64..4.0) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let len = |s: f64| {
            let caps = CapsuleSet::new(Tensor::new(vec![1, v.len()], v.iter().map(|x| x * s).collect()).unwrap()).unwrap();
            capsule_lengths(&squash(&caps))[0]
        };
        prop_assert!(len(lo) < len(hi));
    }

    #[test]
    fn routing_coefficients_sum_to_one((n_in, n_out, d, u) in u_hat(), r in 1usize..5) {
        let st = dynamic_routing(&Tensor::new(vec![n_in, n_out, d], u).unwrap(), r).unwrap();
        prop_assert_eq!(st.coefficients.len(), r);
        for c in &st.coefficients {
            for row in c.data().chunks(n_out) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|x| *x > 0.0));
            }
        }
        for j in 0..n_out {
            let l: f64 = st.output.capsule(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(l < 1.0);
        }
    }

    #[test]
    fn routing_ignores_input_order((n_in, n_out, d, u) in u_hat(), shift in 0usize..6) {
        let block = n_out * d;
        let mut rotated = u.clone();
        rotated.rotate_left((shift % n_in) * block);
        let a = dynamic_routing(&Tensor::new(vec![n_in, n_out, d], u).unwrap(), 3).unwrap();
        let b = dynamic_routing(&Tensor::new(vec![n_in, n_out, d], rotated).unwrap(), 3).unwrap();
        prop_assert!(a.output.vectors().max_abs_diff(b.output.vectors()) < 1e-12);
    }

    #[test]
    fn routing_permutes_with_output_order((n_in, n_out, d, u) in u_hat()) {
        // reverse output capsules within every input row
        let mut rev = Vec::with_capacity(u.len());
        for row in u.chunks(n_out * d) {
            for j in (0..n_out).rev() {
                rev.extend_from_slice(&row[j * d..(j + 1) * d]);
            }
        }
        let a = dynamic_routing(&Tensor::new(vec![n_in, n_out, d], u).unwrap(), 3).unwrap();
        let b = dynamic_routing(&Tensor::new(vec![n_in, n_out, d], rev).unwrap(), 3).unwrap();
        for j in 0..n_out {
            for k in 0..d {
                prop_assert!((a.output.capsule(j)[k] - b.output.capsule(n_out - 1 - j)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn margin_loss_vanishes_exactly_on_confident_correct_lengths(
        lengths in prop::collection::vec(0.0f64..1.0, 2..11),
        t in 0usize..10,
    ) {
        let t = t % lengths.len();
        let p = MarginLossParams::NORMAL;
        let loss = margin_loss(&Tensor::new(vec![lengths.len()], lengths.clone()).unwrap(), t, &p).unwrap();
        prop_assert!(loss >= 0.0);
        let ok = lengths[t] >= p.m_plus
            && lengths.iter().enumerate().all(|(j, &l)| j == t || l <= p.m_minus);
        prop_assert_eq!(loss == 0.0, ok);
    }

    #[test]
    fn eval_dropout_is_bitwise_identity(v in prop::collection::vec(-2.0f64..2.0, 1..40), p in 0.0f64..0.95, seed in any::<u64>()) {
        let caps = CapsuleSet::new(Tensor::new(vec![v.len(), 1], v).unwrap()).unwrap();
        let out = capsule_dropout(&caps, p, DropoutMode::Eval, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out.vectors().data().iter().zip(caps.vectors().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn cfc_capsule_count_is_window_count(w in 1usize..12, k in 1usize..6, d in 1usize..33, n in 1usize..5) {
        prop_assume!(k <= w);
        let cfg = CfcConfig::new(k, d, n, w).unwrap();
        prop_assert_eq!(cfg.capsule_count(), (w - k + 1) * (w - k + 1));
        prop_assert_eq!(cfc_param_count(&cfg, true), cfg.capsule_count() * d * (k * k * n + 1));
    }

    #[test]
    fn batches_cover_every_index_once(len in 0usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..4) {
        let mut seen = vec![0u8; len];
        let mut batches = 0;
        for b in batch_iter(len, bs, true, seed, epoch) {
            prop_assert!(!b.is_empty() && b.len() <= bs);
            for i in b {
                seen[i] += 1;
            }
            batches += 1;
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(batches, len.div_ceil(bs));
    }

    #[test]
    fn idx_round_trip(rows in 1usize..6, cols in 1usize..6, n in 0usize..5, seed in any::<u64>()) {
        let px: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_add(i as u64) % 251) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (n2, r2, c2, back) = parse_idx_images(&write_idx_images(rows, cols, &px), "mem").unwrap();
        prop_assert_eq!((n2, r2, c2), (n, rows, cols));
        prop_assert_eq!(back, px);
        prop_assert_eq!(parse_idx_labels(&write_idx_labels(&labels), "mem").unwrap(), labels);
    }
}

#[test]
fn dropout_keep_rate_and_scale() {
    let p = 0.4;
    let mask: Tensor<f64> = dropout_mask(200, 500, p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let kept = mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / mask.numel() as f64;
    assert!((kept - 0.6).abs() < 0.005, "keep rate {kept}");
    let mean = mask.data().iter().sum::<f64>() / mask.numel() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(mask.data().iter().all(|&m| m == 0.0 || (m - 1.0 / 0.6).abs() < 1e-15));
}

#[test]
fn eval_forward_ignores_dropout_rate() {
    let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    let mut cfg = ModelConfig::tiny(CapsuleMode::Cfc, DecoderKind::Fc);
    let plain = Model::<f64>::new(cfg.clone(), 4).unwrap().lengths(&x).unwrap();
    cfg.dropout = 0.5;
    let dropped = Model::<f64>::new(cfg, 4).unwrap().lengths(&x).unwrap();
    assert!(plain.data().iter().zip(dropped.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn squash_of_zero_is_zero() {
    let out = squash_tensor(&Tensor::<f64>::zeros(vec![3, 4]));
    assert!(out.data().iter().all(|v| *v == 0.0));
}
