//! Analytic gradients against central finite differences.

use fsvos::backbone::BackboneConfig;
use fsvos::data::{Episode, LabeledImage};
use fsvos::graph::{Graph, Var};
use fsvos::relearn::{evaluate_objective, FeatureTap, LossWeights, TeacherStudentPair};
use fsvos::segmenter::{batch_loss, NeckKind, SupportPooling};
use fsvos::tensor::ConvSpec;
use fsvos::{ArchConfig, ModelState, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Worst norm-wise relative error over all inputs of `build`.
fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += H;
            let plus = eval(&ins);
            ins[i].data_mut()[j] -= 2.0 * H;
            let minus = eval(&ins);
            *slot = (plus - minus) / (2.0 * H);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Reduce a tensor node to a scalar through a fixed random quadratic.
fn reduce(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let target = g.constant(rand_tensor(&mut rng, &shape));
    g.mse(y, target)
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn conv2d_dense_strided_and_grouped() {
    let mut r = rng();
    for spec in [
        ConvSpec::new(3, 1, 1),
        ConvSpec::new(3, 2, 1),
        ConvSpec::new(1, 1, 0),
        ConvSpec {
            groups: 2,
            ..ConvSpec::new(3, 1, 1)
        },
    ] {
        let c_in_per_group = 4 / spec.groups;
        let ins = [
            rand_tensor(&mut r, &[2, 4, 5, 4]),
            rand_tensor(&mut r, &[4, c_in_per_group, spec.kernel, spec.kernel]),
            rand_tensor(&mut r, &[4]),
        ];
        let err = check(&ins, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec);
            reduce(g, y, 1)
        });
        assert!(err < TOL, "{spec:?}: {err}");
    }
}

#[test]
fn pointwise_ops() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[2, 3, 3, 2]),
        rand_tensor(&mut r, &[2, 3, 3, 2]),
    ];
    let err = check(&ins, |g, v| {
        let a = g.relu(v[0]);
        let b = g.sigmoid(v[1]);
        let c = g.mul(a, b);
        let d = g.affine(c, 1.7, -0.3);
        let e = g.add(d, v[0]);
        reduce(g, e, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn broadcast_pool_and_time_ops() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[4, 3, 2, 3]),
        rand_tensor(&mut r, &[3, 3, 3]),
        rand_tensor(&mut r, &[3]),
    ];
    let err = check(&ins, |g, v| {
        let p = g.global_avg_pool(v[0]);
        let z = g.time_conv(p, v[1], v[2]);
        let s = g.sigmoid(z);
        let y = g.mul_broadcast(v[0], s);
        reduce(g, y, 3)
    });
    assert!(err < TOL, "{err}");
    let one_frame = [
        rand_tensor(&mut r, &[1, 3, 1, 1]),
        ins[1].clone(),
        ins[2].clone(),
    ];
    let err = check(&one_frame, |g, v| {
        let z = g.time_conv(v[0], v[1], v[2]);
        reduce(g, z, 4)
    });
    assert!(err < TOL, "T=1: {err}");
}

#[test]
fn batch_and_layout_ops() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[3, 2, 4, 4]),
        rand_tensor(&mut r, &[3, 1, 2, 2]),
    ];
    let err = check(&ins, |g, v| {
        let m = g.mean_batch(v[0]);
        let rep = g.repeat_batch(m, 2);
        let nar = g.narrow_batch(v[0], 1, 2);
        let up = g.upsample(v[1], 4, 4);
        let up = g.narrow_batch(up, 0, 2);
        let cat = g.concat_channels(&[rep, nar, up]);
        let sm = g.softmax_channels(cat);
        let sel = g.select_channel(sm, 2);
        reduce(g, sel, 5)
    });
    assert!(err < TOL, "{err}");
    let masks = vec![
        (0..16).map(|i| f64::from(i % 3 == 0)).collect(),
        (0..16).map(|i| f64::from(i < 7)).collect(),
        vec![1.0; 16],
    ];
    let err = check(&ins[..1], |g, v| {
        let p = g.masked_avg_pool(v[0], masks.clone());
        let e = g.expand_spatial(p, 3, 2);
        reduce(g, e, 6)
    });
    assert!(err < TOL, "masked pooling: {err}");
}

#[test]
fn pseudo_mask_gradient() {
    let mut r = rng();
    let fg = vec![
        vec![true, false, true, true, false, false],
        vec![false, true, true, false, true, false],
    ];
    for trial in 0..5 {
        let ins = [
            rand_tensor(&mut r, &[2, 4, 3, 2]),
            rand_tensor(&mut r, &[2, 4, 3, 2]),
        ];
        let err = check(&ins, |g, v| {
            let p = g.pseudo_mask(v[0], v[1], &fg);
            reduce(g, p, 7)
        });
        assert!(err < TOL, "trial {trial}: {err}");
    }
}

#[test]
fn segmentation_losses() {
    let mut r = rng();
    let target = Tensor::from_fn(&[2, 3, 3], |i| f64::from((i * 7) % 3 == 0));
    let ins = [rand_tensor(&mut r, &[2, 2, 3, 3])];
    let err = check(&ins, |g, v| g.cross_entropy(v[0], target.clone()));
    assert!(err < TOL, "cross entropy: {err}");
    let err = check(&ins, |g, v| {
        let sm = g.softmax_channels(v[0]);
        let fg = g.select_channel(sm, 1);
        g.soft_dice(fg, target.clone())
    });
    assert!(err < TOL, "soft dice: {err}");
}

#[test]
fn consistency_losses_and_weighted_sum() {
    let mut r = rng();
    let ins = [
        rand_tensor(&mut r, &[3, 4, 2, 2]),
        rand_tensor(&mut r, &[3, 4, 2, 2]),
        rand_tensor(&mut r, &[3, 1, 2, 2]),
        rand_tensor(&mut r, &[3, 1, 2, 2]),
    ];
    let err = check(&ins, |g, v| g.temporal_consistency(v[0]));
    assert!(err < TOL, "L_t: {err}");
    let err = check(&ins, |g, v| g.mse(v[0], v[1]));
    assert!(err < TOL, "L_f: {err}");
    let err = check(&ins, |g, v| {
        let a = g.sigmoid(v[2]);
        let b = g.sigmoid(v[3]);
        g.mse(a, b)
    });
    assert!(err < TOL, "L_p: {err}");
    let err = check(&ins, |g, v| {
        let lt = g.temporal_consistency(v[0]);
        let lf = g.mse(v[0], v[1]);
        let a = g.sigmoid(v[2]);
        let b = g.sigmoid(v[3]);
        let lp = g.mse(a, b);
        g.weighted_sum(&[(lt, 0.7), (lf, 1.3), (lp, 2.0)])
    });
    assert!(err < TOL, "total: {err}");
}

fn tiny_arch(neck: NeckKind, pooling: SupportPooling) -> ArchConfig {
    ArchConfig {
        backbone: BackboneConfig {
            widths: vec![3, 4, 4, 4],
            ..BackboneConfig::default()
        },
        neck,
        support_pooling: pooling,
        temporal_unit: false,
    }
}

fn blob_image(rng: &mut ChaCha8Rng, size: usize, cx: f64, cy: f64) -> LabeledImage {
    let mask = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        f64::from((x - cx).powi(2) + (y - cy).powi(2) < 16.0)
    });
    let image = Tensor::from_fn(&[3, size, size], |i| {
        0.3 + 0.5 * mask.data()[i % (size * size)] + rng.random_range(-0.1..0.1)
    });
    LabeledImage::new(image, mask, 0).unwrap()
}

/// Small random offsets on every parameter. At initialisation biases are
/// zero and masked-out support pixels are zero, which puts ReLUs exactly on
/// their kink where one-sided and central differences disagree.
fn jitter(model: &mut ModelState, rng: &mut ChaCha8Rng, skip_prefix: &str) {
    for (name, p) in model.params.iter_mut() {
        if skip_prefix.is_empty() || !name.starts_with(skip_prefix) {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
}

/// Finite differences on a few coordinates of every parameter tensor.
fn param_check(
    analytic: &indexmap::IndexMap<String, Tensor>,
    model: &ModelState,
    eval: impl Fn(&ModelState) -> f64,
) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (name, p) in model.params.iter() {
        if p.frozen {
            assert!(
                !analytic.contains_key(name),
                "frozen `{name}` got a gradient"
            );
            continue;
        }
        let Some(grad) = analytic.get(name) else {
            continue;
        };
        for _ in 0..4 {
            let j = r.random_range(0..p.value.numel());
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().value.data_mut()[j] += H;
            let plus = eval(&m);
            m.params.get_mut(name).unwrap().value.data_mut()[j] -= 2.0 * H;
            let minus = eval(&m);
            a_all.push(grad.data()[j]);
            n_all.push((plus - minus) / (2.0 * H));
        }
    }
    assert!(!a_all.is_empty());
    rel_err(&a_all, &n_all)
}

#[test]
fn phase1_cross_entropy_parameter_gradients() {
    let mut r = rng();
    for (neck, pooling) in [
        (NeckKind::Light, SupportPooling::Spatial),
        (NeckKind::Identity, SupportPooling::MaskedAverage),
    ] {
        let mut model = ModelState::init(&tiny_arch(neck, pooling), 3).unwrap();
        jitter(&mut model, &mut r, "");
        let ep = Episode::new(
            vec![blob_image(&mut r, 16, 6.0, 7.0)],
            vec![
                blob_image(&mut r, 16, 9.0, 8.0),
                blob_image(&mut r, 16, 5.0, 10.0),
            ],
        )
        .unwrap();
        let eps = [ep];
        let (_, grads) = batch_loss(&model, &eps, 0.5).unwrap();
        let err = param_check(&grads, &model, |m| batch_loss(m, &eps, 0.5).unwrap().0);
        assert!(err < TOL, "{neck:?}/{pooling:?}: {err}");
    }
}

#[test]
fn relearn_objective_parameter_gradients() {
    let mut r = rng();
    let phase1 = ModelState::init(&tiny_arch(NeckKind::Light, SupportPooling::Spatial), 5).unwrap();
    let mut pair = TeacherStudentPair::new(&phase1, 5).unwrap();
    // move the student off the teacher so every loss term is active
    jitter(&mut pair.student, &mut r, "head.");
    let support = vec![blob_image(&mut r, 16, 7.0, 7.0)];
    let frames: Vec<Tensor> = (0..3)
        .map(|t| blob_image(&mut r, 16, 7.0 + t as f64, 8.0).image().clone())
        .collect();
    let frames = Tensor::stack(&frames).unwrap();
    for tap in [FeatureTap::PostNeck, FeatureTap::PreNeck] {
        let w = LossWeights::new(0.8, 1.5, 2.0).unwrap();
        let eval = evaluate_objective(&pair, &support, &frames, &w, tap).unwrap();
        assert_eq!(eval.teacher_grad_max, 0.0);
        assert!(eval.grads.keys().all(|k| !k.starts_with("head.")));
        let err = param_check(&eval.grads, &pair.student, |m| {
            let p = TeacherStudentPair {
                teacher: pair.teacher.clone(),
                student: m.clone(),
            };
            evaluate_objective(&p, &support, &frames, &w, tap)
                .unwrap()
                .losses
                .total
        });
        assert!(err < TOL, "{tap:?}: {err}");
    }
}
