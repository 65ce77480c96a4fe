//! The learnable scene: scaffold, decoder heads and the per-period global feature.

use rand::Rng;

use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::scaffold::AnchorScaffold;
use crate::temporal::{fuse_features, FeatureDims, FeatureMask, FusedFeature, GlobalFeature, TimeEncoding};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub scaffold: AnchorScaffold,
    pub decoder: DecoderWeights,
    pub global: GlobalFeature,
    /// Components left out of fusion; their parameters then receive no gradient.
    pub mask: FeatureMask,
}

impl Model {
    /// Random decoder, zero global feature.
    pub fn new<R: Rng>(scaffold: AnchorScaffold, global_dim: usize, hidden: usize, mask: FeatureMask, rng: &mut R) -> Self {
        let d = scaffold.dims;
        let fused = d.base + d.var + global_dim;
        Model {
            decoder: DecoderWeights::random(fused, hidden, d.k, rng),
            global: GlobalFeature::zeros(d.periods, global_dim),
            scaffold,
            mask,
        }
    }

    pub fn periods(&self) -> usize {
        self.scaffold.dims.periods
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            base: self.scaffold.dims.base,
            var: self.scaffold.dims.var,
            global: self.global.dim,
        }
    }

    pub fn fuse(&self, anchor: usize, e: &TimeEncoding) -> Result<FusedFeature> {
        let a = self.scaffold.anchor(anchor);
        fuse_features(a.f_base, a.f_var, &self.global, e, self.mask)
    }

    pub fn check(&self) -> Result<()> {
        self.scaffold.check_invariants()?;
        let d = self.scaffold.dims;
        if self.global.periods != d.periods || self.global.g.len() != d.periods * self.global.dim {
            return Err(Error::Invariant("global feature does not match period count".into()));
        }
        let inputs = self.feature_dims().fused() + 3;
        for m in [&self.decoder.opacity, &self.decoder.color, &self.decoder.covariance] {
            if m.inputs != inputs {
                return Err(Error::Invariant(format!("decoder expects {} inputs, fused width is {}", m.inputs, inputs)));
            }
        }
        if self.decoder.k() != d.k {
            return Err(Error::Invariant("decoder slot count differs from scaffold".into()));
        }
        Ok(())
    }
}

/// Gradients on every learnable tensor of a [`Model`], same layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub f_base: Vec<f64>,
    pub f_var: Vec<f64>,
    pub offsets: Vec<f64>,
    pub log_offset_scale: Vec<f64>,
    pub log_shape_scale: Vec<f64>,
    pub global: Vec<f64>,
    pub decoder: DecoderWeights,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        let s = &model.scaffold;
        ModelGrads {
            f_base: vec![0.0; s.f_base.len()],
            f_var: vec![0.0; s.f_var.len()],
            offsets: vec![0.0; s.offsets.len()],
            log_offset_scale: vec![0.0; s.log_offset_scale.len()],
            log_shape_scale: vec![0.0; s.log_shape_scale.len()],
            global: vec![0.0; model.global.g.len()],
            decoder: model.decoder.zeros_like(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.tensors_mut() {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// All tensors in a fixed order, for flattening and finite-difference checks.
    pub fn tensors(&self) -> [&Vec<f64>; 9] {
        [
            &self.f_base,
            &self.f_var,
            &self.offsets,
            &self.log_offset_scale,
            &self.log_shape_scale,
            &self.global,
            &self.decoder.opacity.params,
            &self.decoder.color.params,
            &self.decoder.covariance.params,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.f_base,
            &mut self.f_var,
            &mut self.offsets,
            &mut self.log_offset_scale,
            &mut self.log_shape_scale,
            &mut self.global,
            &mut self.decoder.opacity.params,
            &mut self.decoder.color.params,
            &mut self.decoder.covariance.params,
        ]
    }
}

/// Model tensors in the same order as [`ModelGrads::tensors`].
pub fn model_tensors_mut(model: &mut Model) -> [&mut Vec<f64>; 9] {
    let s = &mut model.scaffold;
    [
        &mut s.f_base,
        &mut s.f_var,
        &mut s.offsets,
        &mut s.log_offset_scale,
        &mut s.log_shape_scale,
        &mut model.global.g,
        &mut model.decoder.opacity.params,
        &mut model.decoder.color.params,
        &mut model.decoder.covariance.params,
    ]
}

/// Names matching [`ModelGrads::tensors`].
pub const TENSOR_NAMES: [&str; 9] = [
    "f_base",
    "f_var",
    "offsets",
    "log_offset_scale",
    "log_shape_scale",
    "global",
    "mlp_opacity",
    "mlp_color",
    "mlp_covariance",
];
