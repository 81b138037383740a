use fsvos::backbone::FeatureMap;
use fsvos::segmenter::{mask_to_grid, pseudo_mask};
use fsvos::Tensor;
use proptest::prelude::*;

/// Straightforward re-derivation: max cosine against support foreground
/// cells, min-max per query, neutral 0.5 when constant or when the shot has
/// no foreground, mean over shots.
fn oracle(q: &Tensor, s: &Tensor, masks: &[Tensor], stride: usize) -> Vec<f64> {
    let (k, c, h, w) = q.dims4();
    let (n, _, sh, sw) = s.dims4();
    let at = |t: &Tensor, b: usize, ch: usize, y: usize, x: usize, hh: usize, ww: usize| {
        t.data()[((b * c + ch) * hh + y) * ww + x]
    };
    let mut out = vec![0.0; k * h * w];
    for qi in 0..k {
        for (si, mask) in masks.iter().enumerate().take(n) {
            let mut fg = Vec::new();
            for y in 0..sh {
                for x in 0..sw {
                    let covered = (0..stride).any(|dy| {
                        (0..stride).any(|dx| {
                            mask.data()[(y * stride + dy) * sw * stride + x * stride + dx] > 0.0
                        })
                    });
                    if covered {
                        fg.push((y, x));
                    }
                }
            }
            let mut raw = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    for &(fy, fx) in &fg {
                        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            let a = at(q, qi, ch, y, x, h, w);
                            let b = at(s, si, ch, fy, fx, sh, sw);
                            dot += a * b;
                            na += a * a;
                            nb += b * b;
                        }
                        let cs = if na.sqrt() * nb.sqrt() < 1e-12 {
                            0.0
                        } else {
                            dot / (na.sqrt() * nb.sqrt())
                        };
                        best = best.max(cs);
                    }
                    raw[y * w + x] = best;
                }
            }
            let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (j, r) in raw.iter().enumerate() {
                let v = if fg.is_empty() || hi - lo <= 0.0 {
                    0.5
                } else {
                    (r - lo) / (hi - lo)
                };
                out[qi * h * w + j] += v / n as f64;
            }
        }
    }
    out
}

fn fmap(data: Tensor, stride: usize) -> FeatureMap {
    FeatureMap { data, stride }
}

#[test]
fn two_by_two_example() {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    // channel-major [1, 2, 2, 2]: locations (1,0), (0,1), (r,r), (-1,0)
    let q = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 0.0, r, -1.0, 0.0, 1.0, r, 0.0]).unwrap();
    let s = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
    let mask = Tensor::full(&[1, 1], 1.0);
    let p = pseudo_mask(&fmap(q, 1), &fmap(s, 1), &[mask]).unwrap();
    let expected = [1.0, 0.5, 0.5 + 0.5 * r, 0.0];
    for (a, b) in p.data.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn constant_map_and_empty_support_are_neutral() {
    let q = Tensor::full(&[1, 3, 2, 2], 1.0);
    let s = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 2.0, 1.0, 3.0, 0.5]).unwrap();
    let fg = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let p = pseudo_mask(&fmap(q.clone(), 1), &fmap(s.clone(), 1), &[fg]).unwrap();
    assert!(p.data.data().iter().all(|&v| v == 0.5));
    let empty = Tensor::zeros(&[1, 2]);
    let q = Tensor::new(vec![1, 3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
    let p = pseudo_mask(&fmap(q, 1), &fmap(s, 1), &[empty]).unwrap();
    assert!(p.data.data().iter().all(|&v| v == 0.5));
}

#[test]
fn mask_grid_marks_any_covered_pixel() {
    let mut m = Tensor::zeros(&[4, 4]);
    m.data_mut()[5] = 1.0; // (1, 1)
    m.data_mut()[15] = 1.0; // (3, 3)
    assert_eq!(mask_to_grid(&m, 2).unwrap(), vec![true, false, false, true]);
    assert!(mask_to_grid(&m, 3).is_err());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let q = Tensor::zeros(&[1, 3, 2, 2]);
    let s = Tensor::zeros(&[1, 4, 2, 2]);
    let m = Tensor::full(&[2, 2], 1.0);
    assert!(pseudo_mask(&fmap(q.clone(), 1), &fmap(s, 1), std::slice::from_ref(&m)).is_err());
    let s = Tensor::zeros(&[1, 3, 2, 2]);
    assert!(pseudo_mask(&fmap(q, 1), &fmap(s, 1), &[m.clone(), m]).is_err());
}

fn features(k: usize, c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, k * c * h * w)
        .prop_map(move |d| Tensor::new(vec![k, c, h, w], d).unwrap())
}

fn masks(n: usize, h: usize, w: usize) -> impl Strategy<Value = Vec<Tensor>> {
    prop::collection::vec(
        prop::collection::vec(prop::bool::weighted(0.4), h * w).prop_map(move |b| {
            Tensor::new(vec![h, w], b.into_iter().map(f64::from).collect()).unwrap()
        }),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_oracle_and_stays_in_unit_range(
        q in features(2, 3, 3, 4),
        s in features(2, 3, 3, 4),
        m in masks(2, 6, 8),
    ) {
        let p = pseudo_mask(&fmap(q.clone(), 2), &fmap(s.clone(), 2), &m).unwrap();
        prop_assert_eq!(p.data.shape(), &[2, 1, 3, 4]);
        let expect = oracle(&q, &s, &m, 2);
        for (a, b) in p.data.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn single_shot_spans_unit_interval(
        q in features(1, 4, 3, 3),
        s in features(1, 4, 3, 3),
        m in masks(1, 3, 3),
    ) {
        let p = pseudo_mask(&fmap(q, 1), &fmap(s, 1), &m).unwrap();
        let d = p.data.data();
        let neutral = d.iter().all(|&v| v == 0.5);
        if !neutral {
            prop_assert_eq!(p.data.min(), 0.0);
            prop_assert_eq!(p.data.max(), 1.0);
        }
    }

    #[test]
    fn positive_rescaling_is_invisible(
        q in features(1, 4, 3, 3),
        s in features(1, 4, 3, 3),
        m in masks(1, 3, 3),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let p = pseudo_mask(&fmap(q.clone(), 1), &fmap(s.clone(), 1), &m).unwrap();
        let p2 = pseudo_mask(&fmap(q.map(|v| v * a), 1), &fmap(s.map(|v| v * b), 1), &m).unwrap();
        prop_assert!(p.data.max_abs_diff(&p2.data) < 1e-6);
    }
}
