mod common;

use approx::assert_abs_diff_eq;
use common::{rand64, t64};
use vidseg_tensor::{Conv2dSpec, Tape, Tensor, TensorError};

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t64(&[2, 1], &[3.0, 4.0]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0]);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let any = tape.constant(rand64(&[3, 2], 1));
    let p = tape.matmul(z, any).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    for (input, want) in [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([1f64.ln(), 3f64.ln()], [0.25, 0.75]),
    ] {
        let x = tape.constant(t64(&[2], &input));
        let y = tape.softmax(x, 0).unwrap();
        let got = tape.value(y).data();
        assert_abs_diff_eq!(got[0], want[0], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], want[1], epsilon = 1e-12);
    }
    let x = tape.constant(t64(&[2], &[0.0, 0.0]));
    assert!(matches!(tape.softmax(x, 1), Err(TensorError::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::ones(&[4]));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[4], 3.5));
    let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t64(&[2], &[-1.0, 1.0]));
    let y = tape.layer_norm(x, g2, b2, 1e-14).unwrap();
    assert_abs_diff_eq!(tape.value(y).data()[0], -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(y).data()[1], 1.0, epsilon = 1e-12);

    let x = tape.constant(rand64(&[3, 4], 2));
    let gamma = tape.constant(Tensor::zeros(&[4]));
    let beta = tape.constant(Tensor::full(&[4], -0.25));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == -0.25));

    assert!(matches!(
        tape.layer_norm(x, gamma, beta, 0.0),
        Err(TensorError::Parameter(_))
    ));
}

#[test]
fn resize_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(rand64(&[2, 5, 7], 3));
    let same = tape.bilinear_resize(x, 5, 7).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(tape.value(same)), bits(tape.value(x)));

    let c = tape.constant(Tensor::full(&[1, 4, 6], 0.7));
    for (h, w) in [(1, 1), (3, 9), (8, 12), (2, 3)] {
        let y = tape.bilinear_resize(c, h, w).unwrap();
        for &v in tape.value(y).data() {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-15);
        }
    }

    let x = tape.constant(t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let y = tape.bilinear_resize(x, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5]);

    assert!(matches!(tape.bilinear_resize(x, 0, 2), Err(TensorError::Parameter(_))));
}

#[test]
fn sample_examples() {
    let mut tape = Tape::new();
    let img = rand64(&[2, 3, 4], 4);
    let x = tape.constant(img.clone());
    let grid: Vec<f64> = (0..3)
        .flat_map(|r| (0..4).flat_map(move |c| [r as f64, c as f64]))
        .collect();
    let pts = tape.constant(t64(&[12, 2], &grid));
    let y = tape.bilinear_sample(x, pts).unwrap();
    assert_eq!(tape.value(y).data(), img.data());

    let x = tape.constant(t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let pts = tape.constant(t64(&[2, 2], &[0.5, 0.5, -10.0, -10.0]));
    let y = tape.bilinear_sample(x, pts).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 0.0]);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let img = rand64(&[1, 5, 5], 5);
    let x = tape.constant(img.clone());
    let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let spec = Conv2dSpec { stride: 1, dilation: 1, padding: 0 };
    let y = tape.conv2d(x, w, Some(b), spec).unwrap();
    assert_eq!(tape.value(y).data(), img.data());

    let c = tape.constant(Tensor::full(&[1, 6, 6], 0.5));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(c, w, None, Conv2dSpec::same(3, 1)).unwrap();
    let out = tape.value(y);
    for r in 1..5 {
        for col in 1..5 {
            assert_eq!(out.at(&[0, r, col]), 4.5);
        }
    }
    assert_eq!(out.at(&[0, 0, 0]), 2.0);

    let tiny = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let spec = Conv2dSpec { stride: 1, dilation: 1, padding: 0 };
    assert!(matches!(tape.conv2d(tiny, big, None, spec), Err(TensorError::Dimension(_))));
    let even = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tape.conv2d(tiny, even, None, spec).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let gt = Tensor::from_vec(&[2, 2], vec![0u32, 1, 2, 3]).unwrap();
    let mut sharp = vec![-50.0f64; 16];
    for (p, &l) in gt.data().iter().enumerate() {
        sharp[l as usize * 4 + p] = 50.0;
    }
    let logits = tape.constant(t64(&[4, 2, 2], &sharp));
    let loss = tape.cross_entropy(logits, &gt, 255).unwrap();
    assert!(tape.value(loss).item() < 1e-12);

    let uniform = tape.constant(Tensor::full(&[4, 2, 2], 0.3));
    let loss = tape.cross_entropy(uniform, &gt, 255).unwrap();
    assert_abs_diff_eq!(tape.value(loss).item(), 4f64.ln(), epsilon = 1e-12);

    let one = tape.constant(t64(&[2, 1, 1], &[0.0, 3f64.ln()]));
    let gt0 = Tensor::from_vec(&[1, 1], vec![0u32]).unwrap();
    let loss = tape.cross_entropy(one, &gt0, 255).unwrap();
    assert_abs_diff_eq!(tape.value(loss).item(), 4f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(loss).item(), 1.3863, epsilon = 1e-4);
}

#[test]
fn cross_entropy_mean_skips_ignored_pixels() {
    let mut tape = Tape::new();
    let logits = tape.constant(t64(&[2, 1, 2], &[0.0, 5.0, 3f64.ln(), -1.0]));
    let gt = Tensor::from_vec(&[1, 2], vec![0u32, 255]).unwrap();
    let loss = tape.cross_entropy(logits, &gt, 255).unwrap();
    assert_abs_diff_eq!(tape.value(loss).item(), 4f64.ln(), epsilon = 1e-12);

    let all_ignored = Tensor::from_vec(&[1, 2], vec![255u32, 255]).unwrap();
    assert!(matches!(
        tape.cross_entropy(logits, &all_ignored, 255),
        Err(TensorError::Parameter(_))
    ));
    let out_of_range = Tensor::from_vec(&[1, 2], vec![0u32, 2]).unwrap();
    assert!(tape.cross_entropy(logits, &out_of_range, 255).is_err());
}

#[test]
fn backward_examples() {
    let x0 = rand64(&[3, 4], 6);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.get(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }

    let not_scalar = tape.mul(x, x).unwrap();
    assert!(matches!(tape.backward(not_scalar), Err(TensorError::Parameter(_))));
}

#[test]
fn backward_skips_constants_and_unreached_nodes() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand64(&[2], 7));
    let c = tape.constant(rand64(&[2], 8));
    let unused = tape.leaf(rand64(&[2], 9));
    let m = tape.mul(x, c).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(unused).is_none());
    assert_eq!(g.get(x).unwrap().shape(), &[2]);
}

#[test]
fn weighted_pool_and_normalize() {
    let mut tape = Tape::new();
    // feats: C=2, P=3
    let f = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let w = tape.constant(t64(&[3, 3], &[0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
    let r = tape.weighted_pool(w, f).unwrap();
    // one-hot at pixel 1, uniform, degenerate (falls back to the mean)
    assert_eq!(tape.value(r).data(), &[2.0, 5.0, 2.0, 5.0, 2.0, 5.0]);

    let n = tape.l2_normalize_rows(r, 1e-12).unwrap();
    let norm = (4.0f64 + 25.0).sqrt();
    assert_abs_diff_eq!(tape.value(n).data()[0], 2.0 / norm, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(n).data()[1], 5.0 / norm, epsilon = 1e-15);
}

#[test]
fn shape_plumbing() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let p = tape.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(tape.shape(p), &[4, 2, 3]);
    assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
    assert!(tape.permute(x, &[0, 0, 1]).is_err());

    let a = tape.slice(x, 1, 1, 2).unwrap();
    let b = tape.slice(x, 1, 0, 1).unwrap();
    let joined = tape.concat(&[b, a], 1).unwrap();
    assert_eq!(tape.value(joined), tape.value(x));
    assert!(tape.slice(x, 1, 2, 2).is_err());
}
