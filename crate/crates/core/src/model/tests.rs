use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::resize::resize_plane_f64;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
}

fn random_signed(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

#[test]
fn plain_teacher_emits_batch_by_two_logits() {
    let mut m = build_model(&BackboneConfig::teacher(), ModuleFlags::NONE, 1).unwrap();
    let out = m
        .forward(&random_tensor(&[3, 1, 128, 128], 2), false)
        .unwrap();
    assert_eq!(out.logits.shape, vec![3, 2]);
    assert_eq!(out.stage_features.len(), 4);
    assert!(out.logits.all_finite());
}

#[test]
fn student_fusion_scales_are_four_two_one() {
    let mut m = build_model(
        &BackboneConfig::student(),
        ModuleFlags {
            dfpn: true,
            ..ModuleFlags::NONE
        },
        1,
    )
    .unwrap();
    let out = m
        .forward(&random_tensor(&[1, 1, 128, 128], 3), false)
        .unwrap();
    let sizes: Vec<usize> = out.stage_features.iter().map(|t| t.shape[2]).collect();
    assert_eq!(sizes, vec![64, 32, 16]);
    assert_eq!(sizes[0] / sizes[2], 4);
    assert_eq!(sizes[1] / sizes[2], 2);
}

#[test]
fn teacher_has_more_parameters_than_student() {
    let t = build_model(&BackboneConfig::teacher(), ModuleFlags::NONE, 0).unwrap();
    let s = build_model(&BackboneConfig::student(), ModuleFlags::NONE, 0).unwrap();
    // conv: 9·in·out + out, norm: 2·out, head: 2·last + 2.
    let formula = |w: &[usize]| {
        let mut n = 0;
        let mut c_in = 1;
        for &c in w {
            n += 9 * c_in * c + c + 2 * c;
            c_in = c;
        }
        n + 2 * c_in + 2
    };
    assert_eq!(t.parameter_count(), formula(&[32, 64, 128, 256]));
    assert_eq!(s.parameter_count(), formula(&[16, 32, 64]));
    assert!(t.parameter_count() > s.parameter_count());
}

#[test]
fn invalid_flag_role_combinations_are_rejected() {
    assert!(build_model(
        &BackboneConfig::teacher(),
        ModuleFlags {
            dfpn: true,
            ..ModuleFlags::NONE
        },
        0
    )
    .is_err());
    assert!(build_model(
        &BackboneConfig::student(),
        ModuleFlags {
            dpe: true,
            ..ModuleFlags::NONE
        },
        0
    )
    .is_err());
    assert!(build_model(
        &BackboneConfig::student(),
        ModuleFlags {
            mhra: true,
            ..ModuleFlags::NONE
        },
        0
    )
    .is_err());
}

#[test]
fn disabled_blocks_reproduce_the_plain_architecture() {
    let x = random_tensor(&[2, 1, 128, 128], 9);
    let mut plain = build_model(&BackboneConfig::teacher(), ModuleFlags::NONE, 5).unwrap();
    let mut with = build_model(
        &BackboneConfig::teacher(),
        ModuleFlags::ALL.teacher_side(),
        5,
    )
    .unwrap();
    let a = plain.forward(&x, false).unwrap();
    with.dpe = None;
    with.mhra = None;
    let b = with.forward(&x, false).unwrap();
    assert_eq!(a.logits, b.logits);
    let mut rebuilt = build_model(&BackboneConfig::teacher(), ModuleFlags::NONE, 5).unwrap();
    assert_eq!(rebuilt.forward(&x, false).unwrap().logits, a.logits);
}

#[test]
fn dpe_unit_mask_is_identity_and_zero_mask_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dpe = Dpe::new(8, &mut rng);
    let x = random_signed(&[2, 8, 5, 5], 1);
    dpe.proj.weight.value.fill(0.0);
    dpe.proj.bias.as_mut().unwrap().value[0] = 1e4;
    assert_eq!(dpe.forward(&x, false), x);
    dpe.proj.bias.as_mut().unwrap().value[0] = -1e4;
    assert!(dpe.forward(&x, false).data.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn dpe_ratio_is_constant_across_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dpe = Dpe::new(6, &mut rng);
    let x = random_tensor(&[1, 6, 4, 4], 2);
    let y = dpe.forward(&x, false);
    for s in 0..16 {
        let r0 = y.data[s] / x.data[s];
        for c in 1..6 {
            let r = y.data[c * 16 + s] / x.data[c * 16 + s];
            assert!((r - r0).abs() < 1e-5, "site {s} channel {c}");
        }
    }
}

#[test]
fn mhra_closed_gate_is_identity_and_keeps_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Mhra::new(64, 4, &mut rng);
    let x = random_signed(&[1, 64, 8, 8], 3);
    let y = m.forward(&x, false);
    assert_eq!(y.shape, vec![1, 64, 8, 8]);
    m.gate.value.fill(-1e4);
    assert_eq!(m.forward(&x, false), x);
}

#[test]
fn mhra_uniform_attention_with_open_gate_averages_tokens() {
    let c = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = Mhra::new(c, 4, &mut rng);
    m.query.weight.value.fill(0.0);
    m.key.weight.value.fill(0.0);
    for lin in [&mut m.value, &mut m.output] {
        lin.weight.value.fill(0.0);
        for i in 0..c {
            lin.weight.value[i * c + i] = 1.0;
        }
    }
    m.gate.value.fill(1e4);
    let x = random_signed(&[1, c, 3, 3], 5);
    let y = m.forward(&x, false);
    for ch in 0..c {
        let mean: f32 = x.data[ch * 9..(ch + 1) * 9].iter().sum::<f32>() / 9.0;
        for s in 0..9 {
            assert!((y.data[ch * 9 + s] - mean).abs() < 1e-5);
        }
    }
}

#[test]
fn dfpn_zero_in_zero_out_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = Dfpn::new(12, 10, 6, 7, &mut rng);
    let out = f
        .forward(
            &Tensor::zeros(&[1, 12, 4, 4]),
            &Tensor::zeros(&[1, 10, 8, 8]),
            &Tensor::zeros(&[1, 6, 16, 16]),
            false,
        )
        .unwrap();
    assert_eq!(out.shape, vec![1, 7, 16, 16]);
    assert!(out.data.iter().all(|&v| v == 0.0));
    let bad = f.forward(
        &Tensor::zeros(&[1, 12, 4, 4]),
        &Tensor::zeros(&[1, 10, 6, 6]),
        &Tensor::zeros(&[1, 6, 16, 16]),
        false,
    );
    assert!(bad.is_err());
}

#[test]
fn dfpn_coarse_signal_is_upsampled_twice() {
    let c = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f = Dfpn::new(c, c, c, c, &mut rng);
    for conv in [&mut f.proj_coarse, &mut f.proj_mid, &mut f.proj_fine] {
        conv.weight.value.fill(0.0);
        for i in 0..c {
            conv.weight.value[i * c + i] = 1.0;
        }
    }
    f.smooth.weight.value.fill(0.0);
    for i in 0..c {
        f.smooth.weight.value[(i * c + i) * 9 + 4] = 1.0;
    }
    // 2×2 pattern per channel.
    let coarse = Tensor::from_vec(&[1, c, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, -1.0, 2.0, 0.0]);
    let out = f
        .forward(
            &coarse,
            &Tensor::zeros(&[1, c, 4, 4]),
            &Tensor::zeros(&[1, c, 8, 8]),
            false,
        )
        .unwrap();
    for ch in 0..c {
        let plane: Vec<f64> = coarse.data[ch * 4..(ch + 1) * 4]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let want = resize_plane_f64(&resize_plane_f64(&plane, 2, 2, 4, 4), 4, 4, 8, 8);
        for (s, w) in want.iter().enumerate() {
            assert!((out.data[ch * 64 + s] as f64 - w).abs() < 1e-6);
        }
    }
    // Hand check of the first row for channel 0: up(2→4) gives
    // [1, .75, .25, 0]; up(4→8) of that row gives [1, .9375, .8125, .625, .375, .1875, .0625, 0]
    // scaled by the row weights; at row 0 the vertical taps clamp to row 0.
    let row0: Vec<f32> = out.data[0..8].to_vec();
    let want = [1.0, 0.9375, 0.8125, 0.625, 0.375, 0.1875, 0.0625, 0.0];
    for (a, b) in row0.iter().zip(want) {
        assert!((a - b).abs() < 1e-6, "{row0:?}");
    }
}

#[test]
fn late_fusion_zero_head_returns_bias_and_shape() {
    let mut m = LateFusion::new(32, 0).unwrap();
    m.head.weight.value.fill(0.0);
    m.head.bias.value = vec![0.25, -0.5];
    let x = random_tensor(&[4, 1, 32, 32], 1);
    let c = random_tensor(&[4, 1, 32, 32], 2);
    let out = m.forward(Some(&x), Some(&c), false).unwrap();
    assert_eq!(out.shape, vec![4, 2]);
    for row in out.data.chunks(2) {
        assert_eq!(row, &[0.25, -0.5]);
    }
    assert!(m.forward(Some(&x), None, false).is_err());
    assert!(m.forward(None, Some(&c), false).is_err());
}

#[test]
fn late_fusion_ignores_ct_when_its_embedding_weights_are_zero() {
    let mut m = LateFusion::new(32, 3).unwrap();
    let cc = m.ct_embedding_dim();
    let dim = m.head.in_features;
    for o in 0..2 {
        for j in 0..cc {
            m.head.weight.value[o * dim + j] = 0.0;
        }
    }
    let x = random_tensor(&[2, 1, 32, 32], 1);
    let base = m
        .forward(Some(&x), Some(&random_tensor(&[2, 1, 32, 32], 10)), false)
        .unwrap();
    for seed in 11..16 {
        let other = m
            .forward(Some(&x), Some(&random_tensor(&[2, 1, 32, 32], seed)), false)
            .unwrap();
        assert_eq!(base, other);
    }
}

#[test]
fn forward_is_finite_on_random_inputs() {
    for flags in [ModuleFlags::NONE, ModuleFlags::ALL.teacher_side()] {
        let mut t = build_model(&BackboneConfig::teacher(), flags, 2).unwrap();
        assert!(t
            .forward(&random_tensor(&[2, 1, 128, 128], 7), false)
            .unwrap()
            .logits
            .all_finite());
    }
    let mut s = build_model(
        &BackboneConfig::student(),
        ModuleFlags::ALL.student_side(),
        2,
    )
    .unwrap();
    assert!(s
        .forward(&random_tensor(&[2, 1, 128, 128], 8), false)
        .unwrap()
        .logits
        .all_finite());
}

/// Directional finite-difference check: for a random direction `d` over all
/// parameters, (L(θ+εd) − L(θ−εd)) / 2ε must match ∇L·d.
fn directional_check<M: Parameterized>(
    model: &mut M,
    mut loss_and_backward: impl FnMut(&mut M, bool) -> f64,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.zero_grad();
    loss_and_backward(model, true);
    let mut dirs = Vec::new();
    let mut analytic = 0.0f64;
    model.visit("", &mut |_, p| {
        let d: Vec<f32> = (0..p.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        analytic += d
            .iter()
            .zip(&p.grad)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum::<f64>();
        dirs.push(d);
    });
    let eps = 1e-4f32;
    let shift = |m: &mut M, s: f32| {
        let mut k = 0;
        m.visit_mut("", &mut |_, p| {
            for (v, d) in p.value.iter_mut().zip(&dirs[k]) {
                *v += s * d;
            }
            k += 1;
        });
    };
    shift(model, eps);
    let up = loss_and_backward(model, false);
    shift(model, -2.0 * eps);
    let down = loss_and_backward(model, false);
    shift(model, eps);
    let numeric = (up - down) / (2.0 * eps as f64);
    let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
    assert!(
        rel < 2e-2,
        "numeric {numeric} vs analytic {analytic} (rel {rel})"
    );
}

#[test]
fn teacher_with_blocks_backward_matches_finite_differences() {
    let cfg = BackboneConfig::teacher().with_input_size(32);
    let mut m = build_model(&cfg, ModuleFlags::ALL.teacher_side(), 11).unwrap();
    m.mhra.as_mut().unwrap().gate.value.fill(0.3);
    let x = random_tensor(&[2, 1, 32, 32], 12);
    let r = random_signed(&[2, 2], 13);
    let tap_r = random_signed(&[2, 128, 4, 4], 14);
    directional_check(
        &mut m,
        |m, grad| {
            let out = m.forward(&x, grad).unwrap();
            let loss = dot(&out.logits, &r) + dot(out.tap_feature(), &tap_r);
            if grad {
                m.backward(&r, Some((out.tap, tap_r.clone())));
            }
            loss
        },
        15,
    );
}

#[test]
fn student_with_fusion_backward_matches_finite_differences() {
    let cfg = BackboneConfig::student().with_input_size(32);
    let mut m = build_model(&cfg, ModuleFlags::ALL.student_side(), 21).unwrap();
    let x = random_tensor(&[2, 1, 32, 32], 22);
    let r = random_signed(&[2, 2], 23);
    directional_check(
        &mut m,
        |m, grad| {
            let out = m.forward(&x, grad).unwrap();
            let loss = dot(&out.logits, &r);
            if grad {
                m.backward(&r, None);
            }
            loss
        },
        24,
    );
}

#[test]
fn late_fusion_backward_matches_finite_differences() {
    let mut m = LateFusion::new(32, 31).unwrap();
    let x = random_tensor(&[2, 1, 32, 32], 32);
    let c = random_tensor(&[2, 1, 32, 32], 33);
    let r = random_signed(&[2, 2], 34);
    directional_check(
        &mut m,
        |m, grad| {
            let out = m.forward(Some(&x), Some(&c), grad).unwrap();
            let loss = dot(&out, &r);
            if grad {
                m.backward(&r);
            }
            loss
        },
        35,
    );
}

#[test]
fn weights_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cbor");
    let m = build_model(&BackboneConfig::student(), ModuleFlags::NONE, 3).unwrap();
    save_weights(&path, serde_json::json!({"role": "student"}), &[("", &m)]).unwrap();
    let (arch, entries) = read_weights_file(&path).unwrap();
    assert_eq!(arch["role"], "student");
    let mut other = build_model(&BackboneConfig::student(), ModuleFlags::NONE, 4).unwrap();
    assert_ne!(other.digest(), m.digest());
    load_weights(&mut other, "", &entries).unwrap();
    assert_eq!(other.digest(), m.digest());
}
