//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node that requires them. Nodes created with
//! `requires_grad = false` (and everything computed only from such nodes)
//! never receive a gradient.

use log::warn;

use crate::tensor::{self, ConvSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

struct PseudoPart {
    query: usize,
    shot: usize,
    /// Support location achieving the max cosine, per query location.
    best: Vec<usize>,
    raw: Vec<f64>,
    argmin: usize,
    argmax: usize,
    /// `max - min` of `raw`; zero when the neutral rule fired.
    range: f64,
    out: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulBroadcast {
        x: Var,
        g: Var,
    },
    Concat(Vec<Var>),
    Upsample(Var),
    GlobalAvgPool(Var),
    TimeConv {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanBatch(Var),
    RepeatBatch(Var),
    NarrowBatch {
        x: Var,
        start: usize,
    },
    MaskedAvgPool {
        x: Var,
        masks: Vec<Vec<f64>>,
    },
    ExpandSpatial(Var),
    SoftmaxChannels(Var),
    SelectChannel {
        x: Var,
        channel: usize,
    },
    PseudoMask {
        query: Var,
        support: Var,
        parts: Vec<PseudoPart>,
    },
    CrossEntropy {
        logits: Var,
        target: Tensor,
    },
    SoftDice {
        probs: Var,
        target: Tensor,
    },
    TemporalConsistency(Var),
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const COS_EPS: f64 = 1e-12;

fn cosine(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb < COS_EPS {
        None
    } else {
        Some((dot / (na * nb), na, nb))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that is cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = tensor::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, &inputs, Op::Conv2d { x, w, b, spec })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, &[x], Op::Sigmoid(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], Op::Affine { x, scale })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, &[a, b], Op::Mul(a, b))
    }

    /// `x[n,c,h,w] * g[n,c,0,0]`.
    pub fn mul_broadcast(&mut self, x: Var, g: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(g).shape(), &[n, c, 1, 1]);
        let hw = h * w;
        let gv = self.value(g).data();
        let mut out = self.value(x).clone();
        for (p, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = gv[p];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, &[x, g], Op::MulBroadcast { x, g })
    }

    /// Channel-wise concatenation of equally sized `[n, c_i, h, w]` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let hw = h * w;
        let channels: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pn, pc, ph, pw) = self.value(p).dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat spatial/batch mismatch");
                pc
            })
            .collect();
        let c_total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let t = Tensor::from_parts(vec![n, c_total, h, w], out);
        self.push(t, parts, Op::Concat(parts.to_vec()))
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let out = tensor::bilinear_forward(self.value(x), out_h, out_w);
        self.push(out, &[x], Op::Upsample(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(
            Tensor::from_parts(vec![n, c, 1, 1], data),
            &[x],
            Op::GlobalAvgPool(x),
        )
    }

    /// 1-D convolution along the leading (time) axis of `[t, c, 1, 1]` with a
    /// `[c_out, c, 3]` kernel and replicate padding at both ends.
    pub fn time_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (t, c, _, _) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[1], c);
        assert_eq!(ws[2], 3);
        let c_out = ws[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; t * c_out];
        for ti in 0..t {
            for co in 0..c_out {
                let mut acc = bv[co];
                for k in 0..3 {
                    let src = (ti as isize + k as isize - 1).clamp(0, t as isize - 1) as usize;
                    for ci in 0..c {
                        acc += wv[(co * c + ci) * 3 + k] * xv[src * c + ci];
                    }
                }
                out[ti * c_out + co] = acc;
            }
        }
        self.push(
            Tensor::from_parts(vec![t, c_out, 1, 1], out),
            &[x, w, b],
            Op::TimeConv { x, w, b },
        )
    }

    /// Mean over the leading axis, keeping it with length 1.
    pub fn mean_batch(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let step = v.numel() / n;
        let mut out = vec![0.0; step];
        for chunk in v.data().chunks(step) {
            for (o, &a) in out.iter_mut().zip(chunk) {
                *o += a;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        self.push(Tensor::from_parts(shape, out), &[x], Op::MeanBatch(x))
    }

    /// Tile a leading axis of length 1 to length `n`.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape()[0], 1);
        let data = v.data().repeat(n);
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        self.push(Tensor::from_parts(shape, data), &[x], Op::RepeatBatch(x))
    }

    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        assert!(start + len <= n);
        let step = v.numel() / n;
        let data = v.data()[start * step..(start + len) * step].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        self.push(
            Tensor::from_parts(shape, data),
            &[x],
            Op::NarrowBatch { x, start },
        )
    }

    /// Average of per-shot masked average pooling. `masks[i]` is the
    /// `[h, w]` weight map of shot `i`; returns `[1, c, 1, 1]`.
    pub fn masked_avg_pool(&mut self, x: Var, masks: Vec<Vec<f64>>) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(masks.len(), n);
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; c];
        for (b, m) in masks.iter().enumerate() {
            assert_eq!(m.len(), hw);
            let area: f64 = m.iter().sum::<f64>().max(1e-8);
            for (ci, o) in out.iter_mut().enumerate() {
                let plane = &xv[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                let s: f64 = plane.iter().zip(m).map(|(a, mm)| a * mm).sum();
                *o += s / area / n as f64;
            }
        }
        self.push(
            Tensor::from_parts(vec![1, c, 1, 1], out),
            &[x],
            Op::MaskedAvgPool { x, masks },
        )
    }

    /// Broadcast `[n, c, 1, 1]` to `[n, c, h, w]`.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, _, _) = self.value(x).dims4();
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        self.push(
            Tensor::from_parts(vec![n, c, h, w], data),
            &[x],
            Op::ExpandSpatial(x),
        )
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = softmax_channels(self.value(x));
        self.push(out, &[x], Op::SoftmaxChannels(x))
    }

    /// `[n, c, h, w] -> [n, 1, h, w]` at `channel`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(channel < c);
        let hw = h * w;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * hw);
        for b in 0..n {
            data.extend_from_slice(&xv[(b * c + channel) * hw..(b * c + channel + 1) * hw]);
        }
        self.push(
            Tensor::from_parts(vec![n, 1, h, w], data),
            &[x],
            Op::SelectChannel { x, channel },
        )
    }

    /// Cosine-similarity prior between query and support feature maps.
    ///
    /// For every query `k` and shot `i`: at each query location take the
    /// maximum cosine similarity against the shot's foreground locations
    /// (`support_fg[i]`), then min-max normalise over the query's spatial
    /// positions. A constant map, or a shot with no foreground, yields 0.5
    /// everywhere. Shots are averaged. Output is `[k, 1, h, w]`.
    pub fn pseudo_mask(&mut self, query: Var, support: Var, support_fg: &[Vec<bool>]) -> Var {
        let (k, c, h, w) = self.value(query).dims4();
        let (n, cs, hs, ws) = self.value(support).dims4();
        assert_eq!(c, cs, "pseudo mask channel mismatch");
        assert_eq!(support_fg.len(), n);
        let hw = h * w;
        let shw = hs * ws;
        let qv = self.value(query).data();
        let sv = self.value(support).data();

        let gather = |data: &[f64], b: usize, loc: usize, plane: usize| -> Vec<f64> {
            (0..c).map(|ci| data[(b * c + ci) * plane + loc]).collect()
        };
        let support_vecs: Vec<Vec<(usize, Vec<f64>)>> = (0..n)
            .map(|i| {
                assert_eq!(support_fg[i].len(), shw);
                (0..shw)
                    .filter(|&j| support_fg[i][j])
                    .map(|j| (j, gather(sv, i, j, shw)))
                    .collect()
            })
            .collect();

        let mut out = vec![0.0; k * hw];
        let mut parts = Vec::with_capacity(k * n);
        for q in 0..k {
            let qvecs: Vec<Vec<f64>> = (0..hw).map(|j| gather(qv, q, j, hw)).collect();
            for (i, svecs) in support_vecs.iter().enumerate() {
                let mut part = PseudoPart {
                    query: q,
                    shot: i,
                    best: vec![usize::MAX; hw],
                    raw: vec![0.0; hw],
                    argmin: 0,
                    argmax: 0,
                    range: 0.0,
                    out: vec![0.5; hw],
                };
                if svecs.is_empty() {
                    warn!("support shot {i} has no foreground at feature resolution; using neutral prior");
                } else {
                    for (j, qvec) in qvecs.iter().enumerate() {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_loc = usize::MAX;
                        for (loc, svec) in svecs {
                            let cs = cosine(qvec, svec).map_or(0.0, |(cs, _, _)| cs);
                            if cs > best {
                                best = cs;
                                best_loc = *loc;
                            }
                        }
                        part.raw[j] = best;
                        part.best[j] = best_loc;
                    }
                    let (mut lo, mut hi) = (0, 0);
                    for j in 1..hw {
                        if part.raw[j] < part.raw[lo] {
                            lo = j;
                        }
                        if part.raw[j] > part.raw[hi] {
                            hi = j;
                        }
                    }
                    let range = part.raw[hi] - part.raw[lo];
                    if range > 0.0 {
                        part.argmin = lo;
                        part.argmax = hi;
                        part.range = range;
                        for j in 0..hw {
                            part.out[j] = (part.raw[j] - part.raw[lo]) / range;
                        }
                    }
                }
                for j in 0..hw {
                    out[q * hw + j] += part.out[j] / n as f64;
                }
                parts.push(part);
            }
        }
        self.push(
            Tensor::from_parts(vec![k, 1, h, w], out),
            &[query, support],
            Op::PseudoMask {
                query,
                support,
                parts,
            },
        )
    }

    /// Mean pixel-wise cross-entropy of `[n, c, h, w]` logits against integer
    /// class targets `[n, h, w]`.
    pub fn cross_entropy(&mut self, logits: Var, target: Tensor) -> Var {
        let (n, c, h, w) = self.value(logits).dims4();
        assert_eq!(target.shape(), &[n, h, w]);
        let hw = h * w;
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for b in 0..n {
            for j in 0..hw {
                let at = |ci: usize| lv[(b * c + ci) * hw + j];
                let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|ci| (at(ci) - m).exp()).sum::<f64>().ln();
                let t = target.data()[b * hw + j] as usize;
                total += lse - at(t);
            }
        }
        let loss = total / (n * hw) as f64;
        self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy { logits, target },
        )
    }

    /// `1 - (2 Σ p y + 1) / (Σ p + Σ y + 1)` over foreground probabilities.
    pub fn soft_dice(&mut self, probs: Var, target: Tensor) -> Var {
        let p = self.value(probs);
        assert_eq!(p.numel(), target.numel());
        let (inter, sum) = soft_dice_terms(p.data(), target.data());
        let loss = 1.0 - (2.0 * inter + 1.0) / (sum + 1.0);
        self.push(
            Tensor::scalar(loss),
            &[probs],
            Op::SoftDice { probs, target },
        )
    }

    /// `1 - mean_t cos(f_t, f_{t+1})` over the leading (time) axis, each frame
    /// flattened to a vector. Pairs with a zero-norm frame count as cosine 0.
    pub fn temporal_consistency(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = v.shape()[0];
        assert!(t >= 2, "temporal consistency needs at least two frames");
        let d = v.numel() / t;
        let mut acc = 0.0;
        for i in 0..t - 1 {
            let a = &v.data()[i * d..(i + 1) * d];
            let b = &v.data()[(i + 1) * d..(i + 2) * d];
            match cosine(a, b) {
                Some((cs, _, _)) => acc += cs,
                None => warn!(
                    "zero-norm frame feature in pair ({i}, {}); cosine taken as 0",
                    i + 1
                ),
            }
        }
        let loss = 1.0 - acc / (t - 1) as f64;
        self.push(Tensor::scalar(loss), &[x], Op::TemporalConsistency(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = av.numel() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), &[a, b], Op::Mse(a, b))
    }

    /// `Σ weight_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, wt) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum expects scalars");
            s += wt * self.value(v).data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s), &inputs, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = tensor::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    spec,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gg| if v > 0.0 { gg } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(g, |y, gg| gg * y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|gg| gg * s));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gg, y| gg * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gg, y| gg * y));
                }
            }
            Op::MulBroadcast { x, g: gate } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let gv = self.value(*gate).data();
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (p, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= gv[p]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    let xv = self.value(*x).data();
                    let dg: Vec<f64> = g
                        .data()
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    let shape = self.value(*gate).shape().to_vec();
                    self.accumulate(grads, *gate, Tensor::from_parts(shape, dg));
                }
            }
            Op::Concat(parts) => {
                let (n, c_total, h, w) = node.value.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let (_, c, _, _) = self.value(p).dims4();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * c_total + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![n, c, h, w], d));
                    }
                    offset += c;
                }
            }
            Op::Upsample(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, tensor::bilinear_backward(g, h, w));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = Vec::with_capacity(n * c * hw);
                for &gg in g.data() {
                    d.extend(std::iter::repeat_n(gg / hw as f64, hw));
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::TimeConv { x, w, b } => {
                let (t, c, _, _) = self.value(*x).dims4();
                let c_out = self.value(*w).shape()[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gv = g.data();
                let mut dx = vec![0.0; t * c];
                let mut dw = vec![0.0; c_out * c * 3];
                let mut db = vec![0.0; c_out];
                for ti in 0..t {
                    for co in 0..c_out {
                        let go = gv[ti * c_out + co];
                        db[co] += go;
                        for k in 0..3 {
                            let src =
                                (ti as isize + k as isize - 1).clamp(0, t as isize - 1) as usize;
                            for ci in 0..c {
                                dw[(co * c + ci) * 3 + k] += go * xv[src * c + ci];
                                dx[src * c + ci] += go * wv[(co * c + ci) * 3 + k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![t, c, 1, 1], dx));
                self.accumulate(grads, *w, Tensor::from_parts(vec![c_out, c, 3], dw));
                self.accumulate(grads, *b, Tensor::from_parts(vec![c_out], db));
            }
            Op::MeanBatch(x) => {
                let n = self.value(*x).shape()[0];
                let scaled = g.map(|v| v / n as f64);
                let d = scaled.data().repeat(n);
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::RepeatBatch(x) => {
                let shape = self.value(*x).shape().to_vec();
                let step = self.value(*x).numel();
                let mut d = vec![0.0; step];
                for chunk in g.data().chunks(step) {
                    for (o, &a) in d.iter_mut().zip(chunk) {
                        *o += a;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::NarrowBatch { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let step = self.value(*x).numel() / shape[0];
                let mut d = vec![0.0; self.value(*x).numel()];
                d[start * step..start * step + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::MaskedAvgPool { x, masks } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for (b, m) in masks.iter().enumerate() {
                    let area: f64 = m.iter().sum::<f64>().max(1e-8);
                    for ci in 0..c {
                        let s = g.data()[ci] / area / n as f64;
                        let plane = &mut d[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                        for (o, mm) in plane.iter_mut().zip(m) {
                            *o = s * mm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::ExpandSpatial(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (_, _, h, w) = node.value.dims4();
                let d: Vec<f64> = g.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, *x, Tensor::from_parts(shape, d));
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for b in 0..n {
                    for j in 0..hw {
                        let idx = |ci: usize| (b * c + ci) * hw + j;
                        let dot: f64 = (0..c).map(|ci| y[idx(ci)] * g.data()[idx(ci)]).sum();
                        for ci in 0..c {
                            d[idx(ci)] = y[idx(ci)] * (g.data()[idx(ci)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::SelectChannel { x, channel } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut d = vec![0.0; n * c * hw];
                for b in 0..n {
                    d[(b * c + channel) * hw..(b * c + channel + 1) * hw]
                        .copy_from_slice(&g.data()[b * hw..(b + 1) * hw]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::PseudoMask {
                query,
                support,
                parts,
            } => self.pseudo_mask_backward(*query, *support, parts, g, grads),
            Op::CrossEntropy { logits, target } => {
                let (n, c, h, w) = self.value(*logits).dims4();
                let hw = h * w;
                let scale = g.data()[0] / (n * hw) as f64;
                let mut d = softmax_channels(self.value(*logits));
                for b in 0..n {
                    for j in 0..hw {
                        let t = target.data()[b * hw + j] as usize;
                        d.data_mut()[(b * c + t) * hw + j] -= 1.0;
                    }
                }
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, d);
            }
            Op::SoftDice { probs, target } => {
                let p = self.value(*probs);
                let (inter, sum) = soft_dice_terms(p.data(), target.data());
                let num = 2.0 * inter + 1.0;
                let den = sum + 1.0;
                let gg = g.data()[0];
                // d/dp_i [1 - num/den] = -(2 y_i den - num) / den²
                let d = target.map(|y| -gg * (2.0 * y * den - num) / (den * den));
                let d = Tensor::from_parts(p.shape().to_vec(), d.into_data());
                self.accumulate(grads, *probs, d);
            }
            Op::TemporalConsistency(x) => {
                let v = self.value(*x);
                let t = v.shape()[0];
                let d = v.numel() / t;
                let scale = -g.data()[0] / (t - 1) as f64;
                let mut dx = vec![0.0; v.numel()];
                for i in 0..t - 1 {
                    let a = &v.data()[i * d..(i + 1) * d];
                    let b = &v.data()[(i + 1) * d..(i + 2) * d];
                    if let Some((cs, na, nb)) = cosine(a, b) {
                        for j in 0..d {
                            dx[i * d + j] += scale * (b[j] / (na * nb) - cs * a[j] / (na * na));
                            dx[(i + 1) * d + j] +=
                                scale * (a[j] / (na * nb) - cs * b[j] / (nb * nb));
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(v.shape().to_vec(), dx));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * g.data()[0] / av.numel() as f64;
                if self.wants(*a) {
                    self.accumulate(grads, *a, av.zip_map(bv, |x, y| s * (x - y)));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, av.zip_map(bv, |x, y| s * (y - x)));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::from_parts(shape, vec![wt * g.data()[0]]));
                }
            }
        }
    }

    fn pseudo_mask_backward(
        &self,
        query: Var,
        support: Var,
        parts: &[PseudoPart],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (k, c, h, w) = self.value(query).dims4();
        let (n, _, hs, ws) = self.value(support).dims4();
        let hw = h * w;
        let shw = hs * ws;
        let qv = self.value(query).data();
        let sv = self.value(support).data();
        let mut dq = vec![0.0; k * c * hw];
        let mut ds = vec![0.0; n * c * shw];
        let gv = g.data();
        for part in parts {
            if part.range <= 0.0 {
                continue;
            }
            let q = part.query;
            let i = part.shot;
            // dL/draw, through the min-max normalisation and the shot mean.
            let go: Vec<f64> = (0..hw).map(|j| gv[q * hw + j] / n as f64).collect();
            let mut draw: Vec<f64> = go.iter().map(|v| v / part.range).collect();
            let mut to_min = 0.0;
            let mut to_max = 0.0;
            for (g, o) in go.iter().zip(&part.out) {
                to_min += g * (o - 1.0) / part.range;
                to_max -= g * o / part.range;
            }
            draw[part.argmin] += to_min;
            draw[part.argmax] += to_max;

            for (j, &dr) in draw.iter().enumerate() {
                let s_loc = part.best[j];
                if dr == 0.0 || s_loc == usize::MAX {
                    continue;
                }
                let a: Vec<f64> = (0..c).map(|ci| qv[(q * c + ci) * hw + j]).collect();
                let b: Vec<f64> = (0..c).map(|ci| sv[(i * c + ci) * shw + s_loc]).collect();
                let Some((cs, na, nb)) = cosine(&a, &b) else {
                    continue;
                };
                for ci in 0..c {
                    dq[(q * c + ci) * hw + j] += dr * (b[ci] / (na * nb) - cs * a[ci] / (na * na));
                    ds[(i * c + ci) * shw + s_loc] +=
                        dr * (a[ci] / (na * nb) - cs * b[ci] / (nb * nb));
                }
            }
        }
        self.accumulate(grads, query, Tensor::from_parts(vec![k, c, h, w], dq));
        self.accumulate(grads, support, Tensor::from_parts(vec![n, c, hs, ws], ds));
    }
}

fn soft_dice_terms(p: &[f64], y: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let sum: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    (inter, sum)
}

/// Softmax over the channel axis of a `[n, c, h, w]` tensor.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let xv = x.data();
    let mut out = vec![0.0; xv.len()];
    for b in 0..n {
        for j in 0..hw {
            let idx = |ci: usize| (b * c + ci) * hw + j;
            let m = (0..c)
                .map(|ci| xv[idx(ci)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ci in 0..c {
                let e = (xv[idx(ci)] - m).exp();
                out[idx(ci)] = e;
                z += e;
            }
            for ci in 0..c {
                out[idx(ci)] /= z;
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out)
}
