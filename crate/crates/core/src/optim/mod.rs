//! Losses, metrics, Adam and learning-rate schedules.

mod metrics;

pub use metrics::{gaussian_taps, hybrid_loss, l1_loss, psnr, ssim, ImageShape, LossReport, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Log-linear from `initial` at step 0 to `last` at step `total`.
    Exponential { initial: f64, last: f64, total: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant(lr) => Ok(lr),
            LrSchedule::Exponential { initial, last, total } => {
                if step > total {
                    return Err(Error::OutOfRange {
                        value: step as f64,
                        min: 0.0,
                        max: total as f64,
                    });
                }
                if total == 0 {
                    return Ok(initial);
                }
                let r = step as f64 / total as f64;
                Ok((initial.ln() * (1.0 - r) + last.ln() * r).exp())
            }
        }
    }
}

/// Adam state for one flat tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub schedule: LrSchedule,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, schedule: LrSchedule, len: usize) -> Self {
        ParamGroup {
            name: name.into(),
            schedule,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), params.len()));
        }
        if grads.len() != params.len() {
            return Err(Error::shape(params.len(), grads.len()));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
        Ok(())
    }

    /// Keeps the moments of rows whose `keep` flag is set.
    pub fn retain_rows(&mut self, row: usize, keep: &[bool]) {
        crate::scaffold::retain_rows(&mut self.m, row, keep);
        crate::scaffold::retain_rows(&mut self.v, row, keep);
    }

    /// Extends the moments with zeros to `len` values.
    pub fn grow_to(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }
}

/// Initial learning rates and decay targets per tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub offsets: (f64, f64),
    pub mlp_opacity: (f64, f64),
    pub mlp_covariance: f64,
    pub mlp_color: (f64, f64),
    pub f_base: f64,
    pub scaling: f64,
    pub f_var: f64,
    pub global: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            offsets: (0.01, 0.0001),
            mlp_opacity: (0.002, 0.00002),
            mlp_covariance: 0.004,
            mlp_color: (0.008, 0.00005),
            f_base: 0.0075,
            scaling: 0.007,
            f_var: 0.002,
            global: 0.0075,
        }
    }
}

impl LearningRates {
    /// Schedules in the tensor order of [`crate::model::TENSOR_NAMES`].
    pub fn schedules(&self, spatial_lr_scale: f64, total: u64) -> [LrSchedule; 9] {
        let exp = |(a, b): (f64, f64)| LrSchedule::Exponential { initial: a, last: b, total };
        [
            LrSchedule::Constant(self.f_base),
            LrSchedule::Constant(self.f_var),
            exp((self.offsets.0 * spatial_lr_scale, self.offsets.1 * spatial_lr_scale)),
            LrSchedule::Constant(self.scaling),
            LrSchedule::Constant(self.scaling),
            LrSchedule::Constant(self.global),
            exp(self.mlp_opacity),
            exp(self.mlp_color),
            LrSchedule::Constant(self.mlp_covariance),
        ]
    }
}

/// `1.1 ×` the largest distance of a camera center from their mean.
pub fn spatial_lr_scale(centers: &[crate::geom::Vec3]) -> f64 {
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<crate::geom::Vec3>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    1.1 * if r > 0.0 { r } else { 1.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut g = ParamGroup::new("x", LrSchedule::Constant(0.1), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        g.adam_step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(g.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut g = ParamGroup::new("x", LrSchedule::Constant(0.1), 3);
        let mut p = vec![0.0; 3];
        g.adam_step(&mut p, &[2.0, -0.5, 1e-3], 0.1).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.1 * s).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_free_in_gradient() {
        let mut a = ParamGroup::new("a", LrSchedule::Constant(0.1), 2);
        let mut b = a.clone();
        let (mut pa, mut pb) = (vec![0.0; 2], vec![0.0; 2]);
        a.adam_step(&mut pa, &[0.3, -0.7], 0.05).unwrap();
        b.adam_step(&mut pb, &[30.0, -70.0], 0.05).unwrap();
        assert!((pa[0] - pb[0]).abs() < 1e-12 && (pa[1] - pb[1]).abs() < 1e-12);
    }

    /// Textbook Adam written out once more over a 100-step trace.
    #[test]
    fn trace_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 5;
        let mut g = ParamGroup::new("x", LrSchedule::Constant(0.01), n);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q = p.clone();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        for t in 1..=100 {
            let grads: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            g.adam_step(&mut p, &grads, 0.01).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * grads[i];
                v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                q[i] -= 0.01 * mh / (vh.sqrt() + 1e-15);
            }
        }
        for i in 0..n {
            assert!((p[i] - q[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut g = ParamGroup::new("x", LrSchedule::Constant(0.1), 3);
        let mut p = vec![0.0; 2];
        assert!(matches!(g.adam_step(&mut p, &[0.0; 2], 0.1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn schedule_examples() {
        let scale = 2.5;
        let s = LearningRates::default().schedules(scale, 1000);
        let off = s[2];
        assert!((off.lr_at(0).unwrap() - 0.01 * scale).abs() < 1e-15);
        assert!((off.lr_at(1000).unwrap() - 0.0001 * scale).abs() < 1e-15);
        assert!((off.lr_at(500).unwrap() - (0.01f64 * 0.0001).sqrt() * scale).abs() < 1e-15);
        assert!(matches!(off.lr_at(1001), Err(Error::OutOfRange { .. })));
        assert_eq!(s[8].lr_at(777).unwrap(), 0.004);
        let mut prev = f64::INFINITY;
        for step in (0..=1000).step_by(10) {
            let lr = s[7].lr_at(step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn spatial_scale_of_ring() {
        let c: Vec<_> = (0..8)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / 8.0;
                crate::geom::Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 1.0)
            })
            .collect();
        assert!((spatial_lr_scale(&c) - 2.2).abs() < 1e-12);
    }
}
