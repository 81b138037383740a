//! Architecture description plus named parameters: everything needed to run
//! or resume a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::segmenter::{NeckKind, SupportPooling};
use crate::tensor::Tensor;

pub const HEAD_PREFIX: &str = "head.";
pub const TEMPORAL_PREFIX: &str = "temporal.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckKind,
    pub support_pooling: SupportPooling,
    /// Whether a temporal attention unit sits between the neck and the head.
    pub temporal_unit: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            neck: NeckKind::Light,
            support_pooling: SupportPooling::Spatial,
            temporal_unit: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()
    }

    /// Channel count of the fused features (and of the neck and head input).
    pub fn fused_channels(&self) -> usize {
        self.backbone.mid_channels()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.backbone.check_input(h, w)?;
        if self.neck == NeckKind::Light {
            let s = 2 * self.backbone.mid_stride();
            if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
                return Err(Error::shape(format!(
                    "input {h}x{w} is not divisible by the neck stride {s}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub params: ParamStore,
    /// Content hash of the checkpoint this state was derived from.
    pub source_hash: Option<String>,
    pub meta: BTreeMap<String, String>,
}

impl ModelState {
    /// Freshly initialised weights drawn from the `init` substream of `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "init", 0);
        let mut params = ParamStore::new();
        arch.backbone.init_params(&mut params, &mut rng);
        let c_mid = arch.fused_channels();
        params.insert_conv("fuse", c_mid, 1 + 2 * c_mid, 1, &mut rng);
        if arch.neck == NeckKind::Light {
            for name in ["neck.down", "neck.lat_hi", "neck.lat_lo", "neck.cross_down"] {
                params.insert_conv(name, c_mid, c_mid, 3, &mut rng);
            }
        }
        params.insert_conv("head.conv3", c_mid, c_mid, 3, &mut rng);
        params.insert_conv("head.conv1", 2, c_mid, 1, &mut rng);
        let mut state = Self {
            arch: ArchConfig {
                temporal_unit: false,
                ..arch.clone()
            },
            params,
            source_hash: None,
            meta: BTreeMap::new(),
        };
        if arch.temporal_unit {
            state = state.with_temporal_unit(seed);
        }
        Ok(state)
    }

    /// Copy with a temporal attention unit inserted. The cross-frame mixing
    /// branch starts at zero, so predictions are unchanged until it learns.
    pub fn with_temporal_unit(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if self.arch.temporal_unit {
            return out;
        }
        let c = self.arch.fused_channels();
        let mut rng = substream(seed, "temporal", 0);
        out.params.insert_conv("temporal.dw", c, 1, 3, &mut rng);
        out.params.insert_conv("temporal.pw", c, c, 1, &mut rng);
        out.params
            .insert("temporal.mix.weight", Tensor::zeros(&[c, c, 3]));
        out.params.insert("temporal.mix.bias", Tensor::zeros(&[c]));
        out.arch.temporal_unit = true;
        out
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
