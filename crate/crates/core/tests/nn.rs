mod common;

use common::gradcheck::{gradient_checks, model_gradient_check, MAX_REL_ERR};
use ecgdx::nn::ops::{conv1d_forward, dual_global_pool};
use ecgdx::nn::{load_checkpoint, save_checkpoint, Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn finite_difference_gradients() {
    for seed in 0..5 {
        for (op, err) in gradient_checks(seed) {
            assert!(err < MAX_REL_ERR, "seed {seed} {op}: relative error {err:e}");
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (b, cin, t) = x.dims3().unwrap();
    let (cout, _, k) = w.dims3().unwrap();
    let t_out = (t + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * t_out];
    for bi in 0..b {
        for co in 0..cout {
            for to in 0..t_out {
                for ci in 0..cin {
                    for kk in 0..k {
                        let i = (to * stride + kk) as isize - pad as isize;
                        if i >= 0 && (i as usize) < t {
                            out[(bi * cout + co) * t_out + to] +=
                                w.data()[(co * cin + ci) * k + kk] * x.data()[(bi * cin + ci) * t + i as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn conv_matches_naive_loops(
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4, t in 1usize..30,
        k in 1usize..8, stride in 1usize..4, pad in 0usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(t + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[b, cin, t], (0..b * cin * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::from_vec(&[cout, cin, k], (0..cout * cin * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = conv1d_forward(&x, &w, stride, pad).unwrap();
        let slow = naive_conv(&x, &w, stride, pad);
        for (a, e) in fast.data().iter().zip(&slow) {
            prop_assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_ignores_time_order(v in prop::collection::vec(-10.0f64..10.0, 2..40), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
        let a = dual_global_pool(&Tensor::from_vec(&[1, 1, v.len()], v.clone()).unwrap()).unwrap();
        let b = dual_global_pool(&Tensor::from_vec(&[1, 1, v.len()], shuffled).unwrap()).unwrap();
        prop_assert!((a.data()[0] - b.data()[0]).abs() < 1e-12);
        prop_assert_eq!(a.data()[1], b.data()[1]);
    }
}

fn trained_reduced(seed: u64) -> (Model<f32>, Tensor<f32>, Tensor<f32>) {
    let mut m = Model::<f32>::new(ModelConfig::reduced(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x =
        Tensor::from_vec(&[4, 12, 2048], (0..4 * 12 * 2048).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let f = Tensor::from_vec(&[4, 20], (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    m.head.weight.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.02..0.02));
    m.forward_train(&x, Some(&f)).unwrap();
    (m, x, f)
}

#[test]
fn outputs_in_unit_interval_and_finite() {
    let (m, x, f) = trained_reduced(1);
    let p = m.predict_proba(&x, Some(&f)).unwrap();
    assert_eq!(p.shape(), [4, 9]);
    assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(p.data().iter().any(|&v| v != 0.5));
}

#[test]
fn eval_is_batch_independent() {
    let (m, x, f) = trained_reduced(2);
    let whole = m.predict_proba(&x, Some(&f)).unwrap();
    let parts: Vec<Tensor<f32>> =
        (0..4).step_by(2).map(|i| m.predict_proba(&x.slice0(i, 2), Some(&f.slice0(i, 2))).unwrap()).collect();
    let joined = Tensor::concat0(&[&parts[0], &parts[1]]).unwrap();
    for (a, b) in whole.data().iter().zip(joined.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    // Changing one sample's feature leaves the others alone.
    let mut f2 = f.clone();
    f2.data_mut()[20 + 3] *= 2.0;
    let p2 = m.predict_proba(&x, Some(&f2)).unwrap();
    assert_eq!(&p2.data()[..9], &whole.data()[..9]);
    assert_eq!(&p2.data()[18..], &whole.data()[18..]);
}

#[test]
fn checkpoint_reproduces_outputs() {
    let (m, x, f) = trained_reduced(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.eckp");
    save_checkpoint(&m, None, &path).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.predict_proba(&x, Some(&f)).unwrap(), m.predict_proba(&x, Some(&f)).unwrap());
    std::fs::write(&path, b"XCKP").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn whole_network_gradient() {
    for seed in 0..5 {
        let err = model_gradient_check(seed);
        assert!(err < MAX_REL_ERR, "seed {seed}: relative error {err:e}");
    }
}
