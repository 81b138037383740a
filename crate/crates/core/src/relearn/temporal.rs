//! Temporal attention unit.
//!
//! `out = x + x ⊙ s ⊙ m` where `s = σ(pw(dw(x)))` is a per-frame spatial gate
//! and `m = 2σ(z) − 1` comes from a kernel-3 convolution over time of the
//! pooled frame descriptors. The time convolution starts at zero, so `m = 0`
//! and the unit is an exact identity until it is trained.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelState;
use crate::params::Bound;
use crate::tensor::ConvSpec;

pub(crate) fn attention_node(g: &mut Graph, p: &Bound, x: Var) -> Var {
    let (_, c, _, _) = g.value(x).dims4();
    let dw = g.conv2d(
        x,
        p.get("temporal.dw.weight"),
        Some(p.get("temporal.dw.bias")),
        ConvSpec {
            groups: c,
            ..ConvSpec::new(3, 1, 1)
        },
    );
    let pw = g.conv2d(
        dw,
        p.get("temporal.pw.weight"),
        Some(p.get("temporal.pw.bias")),
        ConvSpec::new(1, 1, 0),
    );
    let spatial = g.sigmoid(pw);

    let pooled = g.global_avg_pool(x);
    let z = g.time_conv(
        pooled,
        p.get("temporal.mix.weight"),
        p.get("temporal.mix.bias"),
    );
    let zs = g.sigmoid(z);
    let mix = g.affine(zs, 2.0, -1.0);

    let gate = g.mul_broadcast(spatial, mix);
    let delta = g.mul(x, gate);
    g.add(x, delta)
}

/// Apply the model's temporal unit to `[t, c, h, w]` features, `t ≥ 1`.
pub fn temporal_attention(model: &ModelState, features: &FeatureMap) -> Result<FeatureMap> {
    if !model.arch.temporal_unit {
        return Err(Error::config("model has no temporal unit"));
    }
    let shape = features.data.shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1] != model.arch.fused_channels() {
        return Err(Error::shape(format!(
            "expected [t>=1, {}, h, w] features, got {shape:?}",
            model.arch.fused_channels()
        )));
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(features.data.clone());
    let y = attention_node(&mut g, &p, x);
    Ok(FeatureMap {
        data: g.value(y).clone(),
        stride: features.stride,
    })
}
