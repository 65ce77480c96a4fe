//! Three two-layer MLP heads decoding an anchor's fused feature (plus view
//! direction) into its cluster of K Gaussians, with hand-written adjoints.

use rand::Rng;

use crate::geom::{Gaussian3D, Quat, Vec3};
use crate::scaffold::Anchor;
use crate::temporal::FusedFeature;

/// Quaternion outputs below this norm decode to the identity rotation.
pub const QUAT_EPS: f64 = 1e-8;
/// Covariance-head outputs per Gaussian: 4 quaternion values and 3 scale logits.
pub const COV_OUTPUTS: usize = 7;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Two-layer perceptron with a ReLU hidden layer and no output activation.
///
/// Parameters live in one flat buffer laid out as `[W1 | b1 | W2 | b2]`,
/// with both weight matrices row-major (`out × in`).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(inputs: usize, hidden: usize, outputs: usize) -> usize {
        hidden * inputs + hidden + outputs * hidden + outputs
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            inputs,
            hidden,
            outputs,
            params: vec![0.0; Self::param_count(inputs, hidden, outputs)],
        }
    }

    /// Uniform `±1/√fan_in` initialisation for both layers.
    pub fn random<R: Rng>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(inputs, hidden, outputs);
        let b1 = 1.0 / (inputs as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let split = hidden * inputs + hidden;
        for (i, p) in m.params.iter_mut().enumerate() {
            let bound = if i < split { b1 } else { b2 };
            *p = rng.random_range(-bound..bound);
        }
        m
    }

    /// Start indices of `b1`, `W2` and `b2` in `params`.
    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.outputs * self.hidden;
        (b1, w2, b2)
    }

    /// Writes layer-1 pre-activations into `pre` and outputs into `out`.
    pub fn forward(&self, x: &[f64], pre: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        let (o_b1, o_w2, o_b2) = self.offsets();
        let p = &self.params;
        for j in 0..self.hidden {
            let row = &p[j * self.inputs..(j + 1) * self.inputs];
            pre[j] = p[o_b1 + j] + dot(row, x);
        }
        for o in 0..self.outputs {
            let row = &p[o_w2 + o * self.hidden..][..self.hidden];
            let mut acc = p[o_b2 + o];
            for (w, &a) in row.iter().zip(pre.iter()) {
                if a > 0.0 {
                    acc += w * a;
                }
            }
            out[o] = acc;
        }
    }

    /// Accumulates parameter gradients into `grad` and input gradients into `dx`.
    pub fn backward(&self, x: &[f64], pre: &[f64], dout: &[f64], grad: &mut [f64], dx: &mut [f64]) {
        let (o_b1, o_w2, o_b2) = self.offsets();
        let p = &self.params;
        let mut dpre = vec![0.0; self.hidden];
        for o in 0..self.outputs {
            let g = dout[o];
            if g == 0.0 {
                continue;
            }
            grad[o_b2 + o] += g;
            let row = o_w2 + o * self.hidden;
            for j in 0..self.hidden {
                let a = pre[j];
                if a > 0.0 {
                    grad[row + j] += g * a;
                    dpre[j] += g * p[row + j];
                }
            }
        }
        for j in 0..self.hidden {
            let g = dpre[j];
            if g == 0.0 {
                continue;
            }
            grad[o_b1 + j] += g;
            let row = j * self.inputs;
            for i in 0..self.inputs {
                grad[row + i] += g * x[i];
                dx[i] += g * p[row + i];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Opacity, color and covariance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    pub opacity: Mlp,
    pub color: Mlp,
    pub covariance: Mlp,
}

impl DecoderWeights {
    /// `fused` is the fused feature width; the view direction adds 3 inputs.
    pub fn zeros(fused: usize, hidden: usize, k: usize) -> Self {
        let inputs = fused + 3;
        DecoderWeights {
            opacity: Mlp::zeros(inputs, hidden, k),
            color: Mlp::zeros(inputs, hidden, 3 * k),
            covariance: Mlp::zeros(inputs, hidden, COV_OUTPUTS * k),
        }
    }

    pub fn random<R: Rng>(fused: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        let inputs = fused + 3;
        DecoderWeights {
            opacity: Mlp::random(inputs, hidden, k, rng),
            color: Mlp::random(inputs, hidden, 3 * k, rng),
            covariance: Mlp::random(inputs, hidden, COV_OUTPUTS * k, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.opacity.outputs
    }

    /// Same shapes, all zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        DecoderWeights {
            opacity: Mlp::zeros(self.opacity.inputs, self.opacity.hidden, self.opacity.outputs),
            color: Mlp::zeros(self.color.inputs, self.color.hidden, self.color.outputs),
            covariance: Mlp::zeros(self.covariance.inputs, self.covariance.hidden, self.covariance.outputs),
        }
    }

    pub fn add_assign(&mut self, other: &DecoderWeights) {
        for (a, b) in [
            (&mut self.opacity, &other.opacity),
            (&mut self.color, &other.color),
            (&mut self.covariance, &other.covariance),
        ] {
            a.params.iter_mut().zip(&b.params).for_each(|(x, y)| *x += y);
        }
    }
}

/// The K Gaussians decoded for one anchor at one time and view.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedCluster {
    pub gaussians: Vec<Gaussian3D>,
    /// tanh output in (−1, 1); only strictly positive values are rendered.
    pub raw_opacity: Vec<f64>,
    pub active: Vec<bool>,
}

impl DecodedCluster {
    pub fn from_gaussians(gaussians: Vec<Gaussian3D>, raw_opacity: Vec<f64>) -> Self {
        let active = raw_opacity.iter().map(|&o| o > 0.0).collect();
        DecodedCluster {
            gaussians,
            raw_opacity,
            active,
        }
    }

    pub fn max_opacity(&self) -> f64 {
        self.raw_opacity.iter().copied().fold(0.0, f64::max)
    }
}

/// Forward intermediates of [`decode_anchor`] kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    pub input: Vec<f64>,
    pub pre_opacity: Vec<f64>,
    pub pre_color: Vec<f64>,
    pub pre_cov: Vec<f64>,
    /// Raw covariance-head outputs (`7K`).
    pub cov_out: Vec<f64>,
    /// Per-slot unitless offsets.
    pub offsets: Vec<f64>,
    pub offset_scale: Vec3,
    pub shape_scale: Vec3,
}

/// Unit view direction from the camera center to the anchor.
pub fn view_direction(anchor_position: &Vec3, camera_center: &Vec3) -> Vec3 {
    let d = anchor_position - camera_center;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vec3::zeros()
    }
}

pub fn decode_anchor(
    anchor: &Anchor<'_>,
    h: &FusedFeature,
    camera_center: &Vec3,
    weights: &DecoderWeights,
) -> (DecodedCluster, DecodeCache) {
    let k = weights.k();
    let dir = view_direction(anchor.position, camera_center);
    let mut input = Vec::with_capacity(h.0.len() + 3);
    input.extend_from_slice(&h.0);
    input.extend_from_slice(dir.as_slice());

    let hidden = weights.opacity.hidden;
    let mut pre_opacity = vec![0.0; hidden];
    let mut pre_color = vec![0.0; weights.color.hidden];
    let mut pre_cov = vec![0.0; weights.covariance.hidden];
    let mut op_out = vec![0.0; k];
    let mut col_out = vec![0.0; 3 * k];
    let mut cov_out = vec![0.0; COV_OUTPUTS * k];
    weights.opacity.forward(&input, &mut pre_opacity, &mut op_out);
    weights.color.forward(&input, &mut pre_color, &mut col_out);
    weights.covariance.forward(&input, &mut pre_cov, &mut cov_out);

    let mut gaussians = Vec::with_capacity(k);
    let mut raw_opacity = Vec::with_capacity(k);
    for slot in 0..k {
        let o = op_out[slot].tanh();
        let c = &col_out[3 * slot..3 * slot + 3];
        let v = &cov_out[COV_OUTPUTS * slot..COV_OUTPUTS * (slot + 1)];
        let q = Quat::new(v[0], v[1], v[2], v[3]);
        let qn = q.norm();
        let rotation = if qn < QUAT_EPS { Quat::identity() } else { q / qn };
        let scale = anchor
            .shape_scale
            .component_mul(&Vec3::new(softplus(v[4]), softplus(v[5]), softplus(v[6])));
        let off = &anchor.offsets[3 * slot..3 * slot + 3];
        let mean = anchor.position + anchor.offset_scale.component_mul(&Vec3::new(off[0], off[1], off[2]));
        gaussians.push(Gaussian3D {
            mean,
            rotation,
            scale,
            opacity: o.max(0.0),
            color: Vec3::new(sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])),
        });
        raw_opacity.push(o);
    }
    let cache = DecodeCache {
        input,
        pre_opacity,
        pre_color,
        pre_cov,
        cov_out,
        offsets: anchor.offsets.to_vec(),
        offset_scale: anchor.offset_scale,
        shape_scale: anchor.shape_scale,
    };
    (DecodedCluster::from_gaussians(gaussians, raw_opacity), cache)
}

/// Gradient of a scalar loss on one decoded Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    /// On the unit quaternion components `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Per-anchor gradients from [`decode_backward`]; weight gradients are
/// accumulated into the caller's buffer instead.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeGrad {
    pub h: Vec<f64>,
    pub direction: Vec3,
    pub offsets: Vec<f64>,
    pub log_offset_scale: Vec3,
    pub log_shape_scale: Vec3,
}

/// Adjoint of [`decode_anchor`]. `slot_grads[k]` must be `None` for inactive slots.
pub fn decode_backward(
    cache: &DecodeCache,
    cluster: &DecodedCluster,
    slot_grads: &[Option<GaussianGrad>],
    weights: &DecoderWeights,
    weight_grads: &mut DecoderWeights,
) -> DecodeGrad {
    let k = weights.k();
    let mut d_op = vec![0.0; k];
    let mut d_col = vec![0.0; 3 * k];
    let mut d_cov = vec![0.0; COV_OUTPUTS * k];
    let mut g_offsets = vec![0.0; 3 * k];
    let mut g_los = Vec3::zeros();
    let mut g_lss = Vec3::zeros();

    for (slot, g) in slot_grads.iter().enumerate() {
        let Some(g) = g else { continue };
        debug_assert!(cluster.active[slot], "gradient on inactive slot {slot}");
        let o = cluster.raw_opacity[slot];
        d_op[slot] = g.opacity * (1.0 - o * o);

        let col = &cluster.gaussians[slot].color;
        for c in 0..3 {
            d_col[3 * slot + c] = g.color[c] * col[c] * (1.0 - col[c]);
        }

        let v = &cache.cov_out[COV_OUTPUTS * slot..COV_OUTPUTS * (slot + 1)];
        let q = [v[0], v[1], v[2], v[3]];
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn >= QUAT_EPS {
            let u: Vec<f64> = q.iter().map(|x| x / qn).collect();
            let proj: f64 = u.iter().zip(&g.rotation).map(|(a, b)| a * b).sum();
            for c in 0..4 {
                d_cov[COV_OUTPUTS * slot + c] = (g.rotation[c] - u[c] * proj) / qn;
            }
        }
        for c in 0..3 {
            let logit = v[4 + c];
            d_cov[COV_OUTPUTS * slot + 4 + c] = g.scale[c] * cache.shape_scale[c] * sigmoid(logit);
            g_lss[c] += g.scale[c] * cache.shape_scale[c] * softplus(logit);
        }

        let off = &cache.offsets[3 * slot..3 * slot + 3];
        for c in 0..3 {
            g_offsets[3 * slot + c] = cache.offset_scale[c] * g.mean[c];
            g_los[c] += cache.offset_scale[c] * off[c] * g.mean[c];
        }
    }

    let mut dx = vec![0.0; cache.input.len()];
    weights
        .opacity
        .backward(&cache.input, &cache.pre_opacity, &d_op, &mut weight_grads.opacity.params, &mut dx);
    weights
        .color
        .backward(&cache.input, &cache.pre_color, &d_col, &mut weight_grads.color.params, &mut dx);
    weights
        .covariance
        .backward(&cache.input, &cache.pre_cov, &d_cov, &mut weight_grads.covariance.params, &mut dx);

    let n = dx.len() - 3;
    DecodeGrad {
        direction: Vec3::new(dx[n], dx[n + 1], dx[n + 2]),
        h: dx[..n].to_vec(),
        offsets: g_offsets,
        log_offset_scale: g_los,
        log_shape_scale: g_lss,
    }
}
