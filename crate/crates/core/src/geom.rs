//! Pinhole cameras, rigid transforms and first-order (EWA) projection of
//! 3D Gaussians, together with the adjoints the rasterizer chains through.
//!
//! Conventions: quaternions are (w, x, y, z); camera rotation/translation map
//! world to camera (`p_cam = R p_world + t`) with +z forward, +x right, +y down.
//! Pixel `(i, j)` is sampled at its center `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = Quaternion<f64>;

/// Points at or in front of this view-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in px².
pub const COV_DILATION: f64 = 0.3;
/// View-space x/z and y/z are clamped to this multiple of the frustum tangent
/// before the perspective Jacobian is evaluated.
pub const JACOBIAN_CLAMP: f64 = 1.3;
/// Default frustum margin as a fraction of the image diagonal.
pub const FRUSTUM_MARGIN_FRACTION: f64 = 0.15;

/// Rotation matrix of a unit quaternion (no normalisation is applied).
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the matrix produced by [`quat_to_matrix`] back to the
/// quaternion components, returned as `[w, x, y, z]`.
pub fn quat_to_matrix_backward(q: &Quat, g: &Mat3) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Unit quaternion of a rotation matrix.
pub fn matrix_to_quat(m: &Mat3) -> Quat {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        Quat::new(
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        Quat::new(
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = if q.w < 0.0 { -q } else { q };
    q / q.norm()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Quat,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub period: usize,
    pub image_name: String,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, width: u32, height: u32, fov_x_deg: f64) -> Camera {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            right = forward.cross(&Vec3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = matrix_to_quat(&rot);
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Camera {
            id: 0,
            width,
            height,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: q,
            translation: -(quat_to_matrix(&q) * eye),
            period: 0,
            image_name: String::new(),
        }
    }

    pub fn validate(&self, periods: Option<usize>) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!("camera {} has zero size", self.id)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!("camera {} focal length must be positive", self.id)));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "camera {} rotation is not unit (|q| = {})",
                self.id,
                self.rotation.norm()
            )));
        }
        if let Some(t) = periods {
            if self.period >= t {
                return Err(Error::InvalidCamera(format!(
                    "camera {} period {} outside [0, {t})",
                    self.id, self.period
                )));
            }
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(&self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Precomputed form used by the hot rendering loops.
    pub fn view(&self) -> CameraView {
        CameraView {
            rotation: self.rotation_matrix(),
            translation: self.translation,
            center: self.center(),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            lim_x: JACOBIAN_CLAMP * 0.5 * self.width as f64 / self.fx,
            lim_y: JACOBIAN_CLAMP * 0.5 * self.height as f64 / self.fy,
            width: self.width,
            height: self.height,
        }
    }
}

/// A camera with its rotation matrix and Jacobian clamp limits precomputed.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub center: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub lim_x: f64,
    pub lim_y: f64,
    pub width: u32,
    pub height: u32,
}

/// One renderable Gaussian primitive in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vec3,
    /// Unit quaternion.
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// Symmetric 2×2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cov2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Cov2 {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a > 0.0 && self.det() > 0.0
    }

    pub fn inverse(&self) -> Cov2 {
        let inv_det = 1.0 / self.det();
        Cov2 {
            a: self.c * inv_det,
            b: -self.b * inv_det,
            c: self.a * inv_det,
        }
    }

    pub fn to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, self.b, self.b, self.c)
    }

    /// Gradient triplet `(dL/da, dL/db, dL/dc)` as the equivalent symmetric matrix gradient.
    fn grad_to_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a, 0.5 * self.b, 0.5 * self.b, self.c)
    }
}

pub fn world_to_view(camera: &Camera, point: &Vec3) -> Vec3 {
    camera.rotation_matrix() * point + camera.translation
}

pub fn project_mean(camera: &Camera, view_point: &Vec3) -> Result<(Vec2, f64)> {
    camera.view().project_mean(view_point)
}

pub fn project_covariance(camera: &Camera, view_mean: &Vec3, rotation: &Quat, scale: &Vec3) -> Result<Cov2> {
    let view = camera.view();
    if view_mean.z <= NEAR_PLANE {
        return Err(Error::BehindCamera { z: view_mean.z });
    }
    Ok(view.project_covariance(view_mean, &quat_to_matrix(rotation), scale))
}

pub fn default_frustum_margin(camera: &Camera) -> f64 {
    FRUSTUM_MARGIN_FRACTION * camera.diagonal()
}

/// True iff `point` (world) is in front of the near plane and projects inside
/// the image expanded by `margin` pixels on every side.
pub fn frustum_test(camera: &Camera, point: &Vec3, margin: f64) -> bool {
    camera.view().in_frustum(point, margin)
}

/// `R diag(s²) Rᵀ`.
pub fn covariance_3d(rotation: &Mat3, scale: &Vec3) -> Mat3 {
    let m = rotation * Mat3::from_diagonal(scale);
    m * m.transpose()
}

impl CameraView {
    pub fn world_to_view(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn project_mean(&self, v: &Vec3) -> Result<(Vec2, f64)> {
        if v.z <= NEAR_PLANE {
            return Err(Error::BehindCamera { z: v.z });
        }
        Ok((self.project_unchecked(v), v.z))
    }

    pub fn project_unchecked(&self, v: &Vec3) -> Vec2 {
        Vec2::new(self.fx * v.x / v.z + self.cx, self.fy * v.y / v.z + self.cy)
    }

    pub fn in_frustum(&self, p: &Vec3, margin: f64) -> bool {
        let v = self.world_to_view(p);
        if v.z <= NEAR_PLANE {
            return false;
        }
        let px = self.project_unchecked(&v);
        px.x >= -margin
            && px.x <= self.width as f64 + margin
            && px.y >= -margin
            && px.y <= self.height as f64 + margin
    }

    /// Clamped tangent-plane coordinates used by the Jacobian, with flags for
    /// which axes hit the clamp.
    fn clamped_xy(&self, v: &Vec3) -> (f64, f64, bool, bool) {
        let tx = v.x / v.z;
        let ty = v.y / v.z;
        let cx = tx.clamp(-self.lim_x, self.lim_x);
        let cy = ty.clamp(-self.lim_y, self.lim_y);
        (cx * v.z, cy * v.z, cx != tx, cy != ty)
    }

    /// First-order perspective Jacobian at view-space point `v`.
    pub fn jacobian(&self, v: &Vec3) -> Matrix2x3<f64> {
        let (x, y, _, _) = self.clamped_xy(v);
        let z = v.z;
        let z2 = z * z;
        Matrix2x3::new(
            self.fx / z,
            0.0,
            -self.fx * x / z2,
            0.0,
            self.fy / z,
            -self.fy * y / z2,
        )
    }

    /// EWA covariance of a Gaussian with rotation matrix `rot` and `scale`,
    /// centered at view-space `v`, dilation included.
    pub fn project_covariance(&self, v: &Vec3, rot: &Mat3, scale: &Vec3) -> Cov2 {
        let t = self.jacobian(v) * self.rotation;
        let m = t * rot * Mat3::from_diagonal(scale);
        let cov = m * m.transpose();
        Cov2 {
            a: cov[(0, 0)] + COV_DILATION,
            b: cov[(0, 1)],
            c: cov[(1, 1)] + COV_DILATION,
        }
    }

    /// Adjoint of [`Self::project_unchecked`]: pixel-space gradient to view-space gradient.
    pub fn project_mean_backward(&self, v: &Vec3, grad_px: &Vec2) -> Vec3 {
        let iz = 1.0 / v.z;
        Vec3::new(
            grad_px.x * self.fx * iz,
            grad_px.y * self.fy * iz,
            -(grad_px.x * self.fx * v.x + grad_px.y * self.fy * v.y) * iz * iz,
        )
    }

    /// Adjoint of [`Self::project_covariance`] composed with [`quat_to_matrix`].
    ///
    /// Returns gradients on the view-space mean, the (unit) quaternion
    /// components `[w, x, y, z]` and the scale.
    pub fn project_covariance_backward(
        &self,
        v: &Vec3,
        q: &Quat,
        scale: &Vec3,
        grad: &Cov2,
    ) -> (Vec3, [f64; 4], Vec3) {
        let rot = quat_to_matrix(q);
        let jac = self.jacobian(v);
        let t = jac * self.rotation;
        let m = rot * Mat3::from_diagonal(scale);
        let sigma = m * m.transpose();
        let g2 = grad.grad_to_matrix();

        let g_sigma = t.transpose() * g2 * t;
        let g_t = 2.0 * g2 * t * sigma;
        let g_j = g_t * self.rotation.transpose();

        let g_m = 2.0 * g_sigma * m;
        let mut g_rot = Mat3::zeros();
        let mut g_scale = Vec3::zeros();
        for j in 0..3 {
            for i in 0..3 {
                g_rot[(i, j)] = g_m[(i, j)] * scale[j];
                g_scale[j] += g_m[(i, j)] * rot[(i, j)];
            }
        }
        let g_q = quat_to_matrix_backward(q, &g_rot);

        // J = [[fx/z, 0, -fx x'/z²], [0, fy/z, -fy y'/z²]] with x', y' clamped.
        let (xc, yc, clamped_x, clamped_y) = self.clamped_xy(v);
        let z = v.z;
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut g_v = Vec3::zeros();
        g_v.z += -self.fx * iz2 * g_j[(0, 0)] - self.fy * iz2 * g_j[(1, 1)];
        if clamped_x {
            // x' = ±lim·z, so J02 = ∓fx·lim/z.
            g_v.z += self.fx * xc * iz3 * g_j[(0, 2)];
        } else {
            g_v.x += -self.fx * iz2 * g_j[(0, 2)];
            g_v.z += 2.0 * self.fx * xc * iz3 * g_j[(0, 2)];
        }
        if clamped_y {
            g_v.z += self.fy * yc * iz3 * g_j[(1, 2)];
        } else {
            g_v.y += -self.fy * iz2 * g_j[(1, 2)];
            g_v.z += 2.0 * self.fy * yc * iz3 * g_j[(1, 2)];
        }
        (g_v, g_q, g_scale)
    }
}
