//! Period encodings and the fusion of base, local and global features into
//! the decoder input.

use crate::error::{Error, Result};

/// Weight vector over periods for a (possibly fractional) timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoding {
    pub weights: Vec<f64>,
    pub t: f64,
}

impl TimeEncoding {
    pub fn periods(&self) -> usize {
        self.weights.len()
    }

    /// Nonzero `(period, weight)` pairs, at most two and always adjacent.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, w)| w != 0.0)
    }
}

/// Linear interpolation between the one-hot codes of `⌊t⌋` and `⌈t⌉`.
pub fn encode_time(t: f64, periods: usize) -> Result<TimeEncoding> {
    let max = periods as f64 - 1.0;
    if periods == 0 || !(0.0..=max).contains(&t) {
        return Err(Error::OutOfRange {
            value: t,
            min: 0.0,
            max,
        });
    }
    let lo = t.floor();
    let w = t - lo;
    let lo = lo as usize;
    let hi = (t.ceil() as usize).min(periods - 1);
    let mut weights = vec![0.0; periods];
    weights[lo] = 1.0 - w;
    weights[hi] += w;
    Ok(TimeEncoding { weights, t })
}

/// `Σ_τ e[τ] · M[τ, :]` for a row-major `T × width` matrix.
pub fn reduce_periods(rows: &[f64], width: usize, e: &TimeEncoding) -> Result<Vec<f64>> {
    let mut out = vec![0.0; width];
    reduce_into(rows, width, e, &mut out)?;
    Ok(out)
}

pub(crate) fn reduce_into(rows: &[f64], width: usize, e: &TimeEncoding, out: &mut [f64]) -> Result<()> {
    if rows.len() != e.periods() * width || out.len() != width {
        return Err(Error::shape(
            format!("{}x{width}", e.periods()),
            format!("{} values", rows.len()),
        ));
    }
    out.iter_mut().for_each(|x| *x = 0.0);
    for (tau, w) in e.support() {
        if w == 1.0 {
            out.copy_from_slice(&rows[tau * width..(tau + 1) * width]);
        } else {
            for (o, r) in out.iter_mut().zip(&rows[tau * width..(tau + 1) * width]) {
                *o += w * r;
            }
        }
    }
    Ok(())
}

/// Scene-wide per-period feature `g`, `T × dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub periods: usize,
    pub dim: usize,
    pub g: Vec<f64>,
}

impl GlobalFeature {
    pub fn zeros(periods: usize, dim: usize) -> Self {
        GlobalFeature {
            periods,
            dim,
            g: vec![0.0; periods * dim],
        }
    }
}

/// Widths of the three fused components.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureDims {
    pub base: usize,
    pub var: usize,
    pub global: usize,
}

impl FeatureDims {
    pub fn fused(&self) -> usize {
        self.base + self.var + self.global
    }
}

/// Which fused components are live. A disabled component is fed as zeros
/// and receives no gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMask {
    pub base: bool,
    pub var: bool,
    pub global: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            base: true,
            var: true,
            global: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature(pub Vec<f64>);

/// `concat(base, reduce(local, e), reduce(g, e))`.
pub fn fuse_features(
    base: &[f64],
    local: &[f64],
    global: &GlobalFeature,
    e: &TimeEncoding,
    mask: FeatureMask,
) -> Result<FusedFeature> {
    let dims = FeatureDims {
        base: base.len(),
        var: local.len() / e.periods().max(1),
        global: global.dim,
    };
    if global.periods != e.periods() {
        return Err(Error::shape(
            format!("{} periods", e.periods()),
            format!("{} periods in global feature", global.periods),
        ));
    }
    let mut h = vec![0.0; dims.fused()];
    if mask.base {
        h[..dims.base].copy_from_slice(base);
    }
    if mask.var {
        reduce_into(local, dims.var, e, &mut h[dims.base..dims.base + dims.var])?;
    } else if local.len() != e.periods() * dims.var {
        return Err(Error::shape(format!("{}x{}", e.periods(), dims.var), local.len()));
    }
    if mask.global {
        reduce_into(&global.g, dims.global, e, &mut h[dims.base + dims.var..])?;
    }
    Ok(FusedFeature(h))
}

/// Gradients of the three fused components.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseGrad {
    pub base: Vec<f64>,
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

/// Adjoint of [`fuse_features`].
pub fn fuse_backward(grad_h: &[f64], e: &TimeEncoding, dims: FeatureDims, mask: FeatureMask) -> Result<FuseGrad> {
    if grad_h.len() != dims.fused() {
        return Err(Error::shape(dims.fused(), grad_h.len()));
    }
    let t = e.periods();
    let mut out = FuseGrad {
        base: vec![0.0; dims.base],
        local: vec![0.0; t * dims.var],
        global: vec![0.0; t * dims.global],
    };
    if mask.base {
        out.base.copy_from_slice(&grad_h[..dims.base]);
    }
    let g_var = &grad_h[dims.base..dims.base + dims.var];
    let g_glob = &grad_h[dims.base + dims.var..];
    for (tau, w) in e.support() {
        if mask.var {
            for (o, g) in out.local[tau * dims.var..(tau + 1) * dims.var].iter_mut().zip(g_var) {
                *o = w * g;
            }
        }
        if mask.global {
            for (o, g) in out.global[tau * dims.global..(tau + 1) * dims.global].iter_mut().zip(g_glob) {
                *o = w * g;
            }
        }
    }
    Ok(out)
}
