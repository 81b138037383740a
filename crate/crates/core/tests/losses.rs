use fsvos::backbone::FeatureMap;
use fsvos::relearn::{loss_feature, loss_prediction, loss_temporal, total_loss, LossWeights};
use fsvos::segmenter::SegPrediction;
use fsvos::Tensor;
use proptest::prelude::*;

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len(), 1, 1], v.to_vec()).unwrap()
}

fn fmap(t: Tensor) -> FeatureMap {
    FeatureMap { data: t, stride: 1 }
}

/// Two-class prediction from a foreground map given as `[b, h, w]` values.
fn prediction(b: usize, h: usize, w: usize, fg: &[f64]) -> SegPrediction {
    let mut d = Vec::with_capacity(2 * fg.len());
    for i in 0..b {
        let item = &fg[i * h * w..(i + 1) * h * w];
        d.extend(item.iter().map(|p| 1.0 - p));
        d.extend_from_slice(item);
    }
    SegPrediction {
        probs: Tensor::new(vec![b, 2, h, w], d).unwrap(),
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[test]
fn temporal_examples() {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let f = vector(&[0.3, -1.2, 2.0]);
    assert_eq!(loss_temporal(&[f.clone(), f.clone()]).unwrap(), 0.0);
    let neg = f.map(|v| -v);
    assert!((loss_temporal(&[f, neg]).unwrap() - 2.0).abs() < 1e-12);
    let three = [vector(&[1.0, 0.0]), vector(&[r, r]), vector(&[0.0, 1.0])];
    assert!((loss_temporal(&three).unwrap() - (1.0 - r)).abs() < 1e-9);
    assert!((loss_temporal(&three).unwrap() - 0.2929).abs() < 1e-4);
    assert!(loss_temporal(&three[..1]).is_err());
}

#[test]
fn temporal_zero_norm_frame_counts_as_orthogonal() {
    let z = vector(&[0.0, 0.0]);
    let l = loss_temporal(&[vector(&[1.0, 2.0]), z]).unwrap();
    assert_eq!(l, 1.0);
}

#[test]
fn feature_examples() {
    let z = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.37).sin());
    assert_eq!(
        loss_feature(&fmap(z.clone()), &fmap(z.clone())).unwrap(),
        0.0
    );
    let c = 0.25;
    let shifted = z.map(|v| v + c);
    assert!((loss_feature(&fmap(shifted), &fmap(z.clone())).unwrap() - c * c).abs() < 1e-12);

    // 2x2x2 pair checked against a brute-force mean of squared differences
    let a = Tensor::new(
        vec![1, 2, 2, 2],
        vec![0.1, -0.4, 0.9, 0.0, 1.5, -2.0, 0.3, 0.7],
    )
    .unwrap();
    let b = Tensor::new(
        vec![1, 2, 2, 2],
        vec![0.5, 0.2, -0.1, 0.0, 1.0, -1.0, 0.3, 0.2],
    )
    .unwrap();
    let mut brute = 0.0;
    for i in 0..8 {
        brute += (a.data()[i] - b.data()[i]).powi(2);
    }
    brute /= 8.0;
    assert!((loss_feature(&fmap(a), &fmap(b)).unwrap() - brute).abs() < 1e-9);

    let other = Tensor::zeros(&[2, 2, 2, 1]);
    assert!(loss_feature(&fmap(z), &fmap(other)).is_err());
}

#[test]
fn prediction_examples() {
    let ones = prediction(1, 2, 2, &[1.0; 4]);
    let zeros = prediction(1, 2, 2, &[0.0; 4]);
    assert_eq!(loss_prediction(&ones, &ones).unwrap(), 0.0);
    assert!((loss_prediction(&ones, &zeros).unwrap() - 1.0).abs() < 1e-12);
    let checker = prediction(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let half = prediction(1, 2, 2, &[0.5; 4]);
    assert!((loss_prediction(&checker, &half).unwrap() - 0.25).abs() < 1e-12);
    let wide = prediction(1, 2, 3, &[0.5; 6]);
    assert!(loss_prediction(&half, &wide).is_err());
}

#[test]
fn weighted_sum_examples() {
    let ones = LossWeights::default();
    assert!((total_loss(0.2, 0.1, 0.3, &ones) - 0.6).abs() < 1e-12);
    let off = LossWeights::new(0.0, 0.0, 0.0).unwrap();
    assert_eq!(total_loss(0.2, 0.1, 0.3, &off), 0.0);
    let only_t = LossWeights::new(2.0, 0.0, 0.0).unwrap();
    assert_eq!(total_loss(0.5, 7.0, 9.0, &only_t), 1.0);
    assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
}

fn frames(t: usize, d: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, d).prop_map(|v| vector(&v)),
        t,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn temporal_matches_oracle_within_bounds(fs in (2usize..6).prop_flat_map(|t| frames(t, 5))) {
        let l = loss_temporal(&fs).unwrap();
        let n = fs.len() - 1;
        let mean: f64 = fs.windows(2).map(|p| cos(p[0].data(), p[1].data())).sum::<f64>() / n as f64;
        prop_assert!((l - (1.0 - mean)).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn temporal_is_scale_invariant(fs in frames(4, 6), alpha in 1e-3f64..1e3) {
        let scaled: Vec<Tensor> = fs.iter().map(|f| f.map(|v| v * alpha)).collect();
        prop_assert!((loss_temporal(&fs).unwrap() - loss_temporal(&scaled).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn feature_and_prediction_vanish_only_on_equal_inputs(
        a in prop::collection::vec(0.0f64..1.0, 8),
        b in prop::collection::vec(0.0f64..1.0, 8),
    ) {
        let ta = Tensor::new(vec![1, 2, 2, 2], a.clone()).unwrap();
        let tb = Tensor::new(vec![1, 2, 2, 2], b.clone()).unwrap();
        let lf = loss_feature(&fmap(ta.clone()), &fmap(tb)).unwrap();
        let lp = loss_prediction(&prediction(2, 2, 2, &a), &prediction(2, 2, 2, &b)).unwrap();
        prop_assert!(lf >= 0.0 && (0.0..=1.0).contains(&lp));
        prop_assert_eq!(lf == 0.0, a == b);
        prop_assert_eq!(lp == 0.0, a == b);
        prop_assert_eq!(loss_feature(&fmap(ta.clone()), &fmap(ta)).unwrap(), 0.0);
    }
}
