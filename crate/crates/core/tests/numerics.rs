//! Primitive-level contracts: forward values, backward rules against finite
//! differences, and the accumulation semantics of `backward`.

use mvclam_core::numerics::tensor::cosine_sim;
use mvclam_core::numerics::{grad_check, grad_check_params, SeedRng, Tensor};

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let t = Tensor::<f64>::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
    let s = t.row_softmax();
    let v = s.to_vec();
    assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_masked_positions_vanish() {
    let mut rng = SeedRng::new(5);
    let t = Tensor::<f64>::from_vec(rng.normal_vec(12, 2.0), &[3, 4]).unwrap();
    let keep = vec![
        true, true, false, true, //
        true, false, false, true, //
        true, true, true, true,
    ];
    let s = t.masked_fill_neg(&keep).unwrap().row_softmax();
    let v = s.to_vec();
    for r in 0..3 {
        let row = &v[r * 4..(r + 1) * 4];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
        for (j, &p) in row.iter().enumerate() {
            if !keep[r * 4 + j] {
                assert!(p < 1e-6, "masked position ({r},{j}) has probability {p}");
            }
        }
    }
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let v = Tensor::<f64>::from_vec(vec![0.3, -2.0, 5.0], &[3]).unwrap();
    let c = cosine_sim(&v, &v).unwrap().item();
    assert!((c - 1.0).abs() < 1e-12, "got {c}");
}

#[test]
fn cross_entropy_saturated_softmax_is_tiny() {
    let logits = Tensor::<f64>::from_vec(vec![0.0, 20.0], &[1, 2]).unwrap();
    let loss = logits.cross_entropy_sum(&[1], &[1.0]).unwrap().item();
    assert!(loss <= 1e-8, "got {loss}");
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum_all();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn two_backward_calls_double_gradients() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    let loss = x.mul(&x).unwrap().sum_all();
    loss.backward().unwrap();
    let single = x.grad().unwrap();
    loss.backward().unwrap();
    let double = x.grad().unwrap();
    for (s, d) in single.iter().zip(&double) {
        assert_eq!(*d, 2.0 * s);
    }
}

#[test]
fn non_scalar_loss_rejected() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.scale(2.0);
    assert!(y.backward().is_err());
}

#[test]
fn matmul_softmax_cross_entropy_chain_matches_finite_differences() {
    let mut rng = SeedRng::new(42);
    let x = Tensor::<f64>::param(rng.normal_vec(8, 1.0), &[2, 4]).unwrap();
    let w1 = Tensor::<f64>::param(rng.normal_vec(12, 0.5), &[4, 3]).unwrap();
    let w2 = Tensor::<f64>::param(rng.normal_vec(9, 0.5), &[3, 3]).unwrap();
    let f = || {
        let h = x.matmul(&w1)?.gelu();
        let logits = h.matmul(&w2)?;
        logits.cross_entropy_sum(&[1, 2], &[0.5, 0.5])
    };
    let err = grad_check_params(&[x.clone(), w1.clone(), w2.clone()], f, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn layer_norm_and_softmax_backward_match_fd() {
    let mut rng = SeedRng::new(9);
    let x = Tensor::<f64>::param(rng.normal_vec(8, 1.0), &[2, 4]).unwrap();
    let gamma = Tensor::<f64>::param(vec![1.1, 0.9, 1.0, 1.2], &[4]).unwrap();
    let beta = Tensor::<f64>::param(vec![0.1, -0.1, 0.0, 0.2], &[4]).unwrap();
    let f = || {
        let y = x.layer_norm(&gamma, &beta, 1e-5)?;
        let s = y.row_softmax();
        s.mul(&s)?.sum_all().reshape(&[1])
    };
    let err = grad_check_params(&[x.clone(), gamma.clone(), beta.clone()], f, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn concat_slice_max_mean_backward_match_fd() {
    let mut rng = SeedRng::new(17);
    let a = Tensor::<f64>::param(rng.normal_vec(6, 1.0), &[2, 3]).unwrap();
    let b = Tensor::<f64>::param(rng.normal_vec(6, 1.0), &[2, 3]).unwrap();
    let f = || {
        let c = Tensor::concat(&[a.clone(), b.clone()], 1)?;
        let s = c.slice(1, 1, 4)?;
        let m = s.max_axis(1)?;
        m.mul(&m)?.mean_axis(0)?.sum_all().reshape(&[1])
    };
    let err = grad_check_params(&[a.clone(), b.clone()], f, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn embedding_and_l2norm_backward_match_fd() {
    let mut rng = SeedRng::new(23);
    let table = Tensor::<f64>::param(rng.normal_vec(12, 1.0), &[4, 3]).unwrap();
    let f = || {
        let rows = table.embedding(&[0, 2, 2, 3])?;
        let normed = rows.row_l2norm();
        normed.sum_all().reshape(&[1])
    };
    let err = grad_check(|_| f(), &table, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn gaussian_basis_backward_matches_fd() {
    let widths = Tensor::<f64>::param(vec![0.8, 1.3], &[2]).unwrap();
    let dists = vec![0.5, 2.0, 4.5];
    let centers = vec![0.0, 3.0];
    let f = |w: &Tensor<f64>| {
        let g = w.gaussian_basis(&dists, &centers)?;
        Ok(g.mul(&g)?.sum_all())
    };
    let err = grad_check(f, &widths, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn bce_with_logits_backward_matches_fd() {
    let z = Tensor::<f64>::param(vec![0.3, -1.2, 2.0], &[3]).unwrap();
    let f = |t: &Tensor<f64>| t.bce_with_logits_sum(&[1.0, 0.0, 0.0]);
    let err = grad_check(f, &z, 1e-6).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn shape_mismatch_errors_name_the_primitive() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");

    let err = a.add(&b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
    let c = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
    assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(c.slice(0, 0, 1).unwrap().to_vec(), a.to_vec());
    assert_eq!(c.slice(0, 1, 1).unwrap().to_vec(), b.to_vec());
}

#[test]
fn dropout_is_scaled_and_seeded() {
    let mut rng = SeedRng::new(3);
    let x = Tensor::<f32>::full(&[1000], 1.0);
    let y = x.dropout(0.25, &mut rng).unwrap();
    let v = y.to_vec();
    let kept = v.iter().filter(|&&a| a != 0.0).count();
    assert!((kept as f64 / 1000.0 - 0.75).abs() < 0.05);
    for &a in &v {
        assert!(a == 0.0 || (a - 1.0 / 0.75).abs() < 1e-6);
    }
    // Same seed, same mask.
    let mut rng2 = SeedRng::new(3);
    let y2 = x.dropout(0.25, &mut rng2).unwrap();
    assert_eq!(y.to_vec(), y2.to_vec());
}

#[test]
fn frozen_leaf_receives_no_gradient() {
    let frozen = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    frozen.set_requires_grad(false);
    let live = Tensor::<f64>::param(vec![3.0, 4.0], &[2]).unwrap();
    let loss = frozen.mul(&live).unwrap().sum_all();
    loss.backward().unwrap();
    assert!(frozen.grad().is_none());
    assert_eq!(live.grad().unwrap(), vec![1.0, 2.0]);
}
