//! Full forward render of a [`Model`] and the adjoint back to its tensors.

use crate::decoder::{decode_anchor, decode_backward, DecodeCache, DecodedCluster, GaussianGrad};
use crate::error::{Error, Result};
use crate::geom::{Camera, CameraView, Vec2};
use crate::model::{Model, ModelGrads};
use crate::par;
use crate::scaffold::AnchorViewStats;
use crate::temporal::{encode_time, fuse_backward, TimeEncoding};

use super::{cull_and_activate, depth_sort, rasterize, rasterize_backward, Raster, RasterSettings, Splat2D};

/// Anchors decoded together when accumulating decoder gradients; fixed so the
/// summation order does not depend on the thread count.
const DECODE_CHUNK: usize = 32;

/// One frustum-visible anchor as decoded for this render.
#[derive(Clone, Debug)]
pub struct VisibleAnchor {
    pub anchor: usize,
    pub cluster: DecodedCluster,
    pub cache: DecodeCache,
}

/// Everything a render produced, including the state its adjoint needs.
#[derive(Clone, Debug)]
pub struct RenderGraph {
    pub view: CameraView,
    pub encoding: TimeEncoding,
    pub settings: RasterSettings,
    pub visible: Vec<VisibleAnchor>,
    /// Depth-sorted; `source.0` indexes `visible`.
    pub splats: Vec<Splat2D>,
    pub raster: Raster,
}

impl RenderGraph {
    /// Row-major `H × W × 3` in `[0, 1]`.
    pub fn image(&self) -> &[f64] {
        &self.raster.image
    }

    pub fn width(&self) -> u32 {
        self.raster.width
    }

    pub fn height(&self) -> u32 {
        self.raster.height
    }

    /// Frees the per-pixel state; [`render_backward`] then fails.
    pub fn discard_backward_state(&mut self) {
        self.raster.records = None;
    }
}

/// Renders `model` from `camera` at time `t ∈ [0, T−1]`.
///
/// With `retain` false the per-pixel compositing state is not kept.
pub fn render(model: &Model, camera: &Camera, t: f64, settings: &RasterSettings, retain: bool) -> Result<RenderGraph> {
    let encoding = encode_time(t, model.periods())?;
    let view = camera.view();
    let ids = model.scaffold.visible_anchors(camera);
    let decoded = par::map_slice(&ids, |&i| -> Result<VisibleAnchor> {
        let h = model.fuse(i, &encoding)?;
        let (cluster, cache) = decode_anchor(&model.scaffold.anchor(i), &h, &view.center, &model.decoder);
        Ok(VisibleAnchor { anchor: i, cluster, cache })
    });
    let visible = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    let clusters: Vec<DecodedCluster> = visible.iter().map(|v| v.cluster.clone()).collect();
    let mut splats = cull_and_activate(&clusters, &view, settings);
    depth_sort(&mut splats);
    let raster = rasterize(&splats, camera.width, camera.height, settings, retain);
    Ok(RenderGraph {
        view,
        encoding,
        settings: *settings,
        visible,
        splats,
        raster,
    })
}

/// Gradients of one backward pass together with the densification statistics of the view.
#[derive(Clone, Debug)]
pub struct RenderGrads {
    pub model: ModelGrads,
    pub view_stats: Vec<AnchorViewStats>,
}

/// Chains an image-space gradient (`H × W × 3`) back to every model tensor.
pub fn render_backward(graph: &RenderGraph, model: &Model, grad_image: &[f64]) -> Result<RenderGrads> {
    let n_px = (graph.width() * graph.height()) as usize;
    if grad_image.len() != 3 * n_px {
        return Err(Error::shape(3 * n_px, grad_image.len()));
    }
    let splat_grads = rasterize_backward(&graph.splats, &graph.raster, grad_image, &graph.settings)
        .ok_or(Error::MissingForwardState)?;

    let k = model.scaffold.dims.k;
    let view = &graph.view;
    let mut slot_grads: Vec<Vec<Option<GaussianGrad>>> = vec![vec![None; k]; graph.visible.len()];
    let mut mean2d_grads: Vec<Vec<Option<Vec2>>> = vec![vec![None; k]; graph.visible.len()];
    for (s, sg) in graph.splats.iter().zip(&splat_grads) {
        let (ci, slot) = s.source;
        let g = &graph.visible[ci].cluster.gaussians[slot];
        let v = view.world_to_view(&g.mean);
        let (gv_cov, g_rot, g_scale) = view.project_covariance_backward(&v, &g.rotation, &g.scale, &sg.cov);
        let gv = view.project_mean_backward(&v, &sg.mean2d) + gv_cov;
        slot_grads[ci][slot] = Some(GaussianGrad {
            mean: view.rotation.transpose() * gv,
            rotation: g_rot,
            scale: g_scale,
            opacity: sg.opacity,
            color: sg.color,
        });
        mean2d_grads[ci][slot] = Some(sg.mean2d);
    }

    let dims = model.feature_dims();
    let chunks: Vec<usize> = (0..graph.visible.len().div_ceil(DECODE_CHUNK)).collect();
    let partial = par::map_slice(&chunks, |&c| {
        let mut wg = model.decoder.zeros_like();
        let lo = c * DECODE_CHUNK;
        let hi = (lo + DECODE_CHUNK).min(graph.visible.len());
        let per_anchor = (lo..hi)
            .map(|i| {
                let va = &graph.visible[i];
                let dg = decode_backward(&va.cache, &va.cluster, &slot_grads[i], &model.decoder, &mut wg);
                let fg = fuse_backward(&dg.h, &graph.encoding, dims, model.mask);
                (dg, fg)
            })
            .collect::<Vec<_>>();
        (wg, per_anchor)
    });

    let mut grads = ModelGrads::zeros(model);
    let d = model.scaffold.dims;
    let mut view_stats = Vec::with_capacity(graph.visible.len());
    let mut i = 0;
    for (wg, per_anchor) in partial {
        grads.decoder.add_assign(&wg);
        for (dg, fg) in per_anchor {
            let fg = fg?;
            let va = &graph.visible[i];
            let a = va.anchor;
            add(&mut grads.f_base[a * d.base..(a + 1) * d.base], &fg.base);
            add(&mut grads.f_var[a * d.periods * d.var..(a + 1) * d.periods * d.var], &fg.local);
            add(&mut grads.global, &fg.global);
            add(&mut grads.offsets[a * k * 3..(a + 1) * k * 3], &dg.offsets);
            add(&mut grads.log_offset_scale[3 * a..3 * a + 3], dg.log_offset_scale.as_slice());
            add(&mut grads.log_shape_scale[3 * a..3 * a + 3], dg.log_shape_scale.as_slice());
            view_stats.push(AnchorViewStats {
                anchor: a,
                slot_grad_norm: mean2d_grads[i].iter().map(|g| g.map(|g| g.norm())).collect(),
                max_opacity: va.cluster.max_opacity(),
                base_grad_norm: fg.base.iter().map(|x| x * x).sum::<f64>().sqrt(),
            });
            i += 1;
        }
    }
    Ok(RenderGrads { model: grads, view_stats })
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// `Σ w ⊙ image`, whose image gradient is `w`.
pub fn linear_probe_loss(image: &[f64], weights: &[f64]) -> f64 {
    image.iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Camera, Gaussian3D, Quat, Vec3};
    use crate::model::{model_tensors_mut, Model};
    use crate::scaffold::{AnchorDims, AnchorScaffold};
    use crate::temporal::FeatureMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: u32, h: u32) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), w, h, 50.0)
    }

    /// Three anchors near the origin, random features and small offsets.
    fn micro_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = AnchorDims { k: 4, base: 3, var: 2, periods: 2 };
        let pts = vec![Vec3::new(-0.3, 0.1, 0.0), Vec3::new(0.25, -0.2, 0.1), Vec3::new(0.05, 0.3, -0.1)];
        let mut s = AnchorScaffold::init(&[pts], 0.2, dims).unwrap();
        for x in s.f_base.iter_mut().chain(s.f_var.iter_mut()) {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in s.offsets.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        for x in s.log_shape_scale.iter_mut() {
            *x = (0.15f64).ln() + rng.random_range(-0.2..0.2);
        }
        let mut m = Model::new(s, 2, 8, FeatureMask::default(), &mut rng);
        for x in m.global.g.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        // Bias opacity up so most slots are active.
        let ob = m.decoder.opacity.params.len() - 4;
        for x in &mut m.decoder.opacity.params[ob..] {
            *x += 0.5;
        }
        m
    }

    #[test]
    fn zero_features_render_background() {
        let dims = AnchorDims { k: 4, base: 3, var: 2, periods: 2 };
        let s = AnchorScaffold::init(&[vec![Vec3::zeros()]], 0.2, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::new(s, 2, 8, FeatureMask::default(), &mut rng);
        m.decoder = m.decoder.zeros_like();
        let bg = Vec3::new(0.2, 0.3, 0.4);
        let st = RasterSettings { background: bg, ..Default::default() };
        let g = render(&m, &camera(8, 8), 0.5, &st, false).unwrap();
        assert!(g.splats.is_empty());
        for p in g.image().chunks(3) {
            assert_eq!(p, bg.as_slice());
        }
    }

    #[test]
    fn integer_time_equals_manual_one_hot() {
        let m = micro_model(1);
        let cam = camera(8, 8);
        let st = RasterSettings::default();
        let a = render(&m, &cam, 1.0, &st, false).unwrap();
        // Copy period 1 into period 0 everywhere: t = 0 must then reproduce t = 1.
        let mut m2 = m.clone();
        let d = m.scaffold.dims;
        for i in 0..m.scaffold.len() {
            let row = i * d.periods * d.var;
            for c in 0..d.var {
                m2.scaffold.f_var[row + c] = m.scaffold.f_var[row + d.var + c];
            }
        }
        let gd = m.global.dim;
        for c in 0..gd {
            m2.global.g[c] = m.global.g[gd + c];
        }
        let b = render(&m2, &cam, 0.0, &st, false).unwrap();
        assert_eq!(a.image(), b.image());
    }

    #[test]
    fn backward_without_state_fails() {
        let m = micro_model(2);
        let g = render(&m, &camera(8, 8), 0.0, &Default::default(), false).unwrap();
        let err = render_backward(&g, &m, &vec![0.0; 192]).unwrap_err();
        assert!(matches!(err, Error::MissingForwardState));
    }

    #[test]
    fn single_opaque_gaussian_fills_image() {
        let view = camera(6, 6).view();
        let g = Gaussian3D {
            mean: Vec3::zeros(),
            rotation: Quat::identity(),
            scale: Vec3::repeat(50.0),
            opacity: 1.0,
            color: Vec3::new(0.6, 0.2, 0.9),
        };
        let bg = Vec3::new(1.0, 1.0, 1.0);
        let cl = DecodedCluster::from_gaussians(vec![g.clone()], vec![1.0]);
        let st = RasterSettings { background: bg, ..Default::default() };
        let mut splats = cull_and_activate(&[cl], &view, &st);
        depth_sort(&mut splats);
        let r = rasterize(&splats, 6, 6, &st, false);
        for p in r.image.chunks(3) {
            let expect = g.color * 0.99 + bg * 0.01;
            assert!((Vec3::from_column_slice(p) - expect).amax() < 1e-9);
        }
    }

    /// Central differences on every model scalar against a random linear image loss.
    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let mut m = micro_model(3);
        let cam = camera(8, 8);
        let st = RasterSettings { background: Vec3::new(0.1, 0.2, 0.3), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 0.3;
        let g = render(&m, &cam, t, &st, true).unwrap();
        assert!(g.splats.len() >= 4, "only {} splats", g.splats.len());
        let grads = render_backward(&g, &m, &probe).unwrap();
        let flat_grads: Vec<Vec<f64>> = grads.model.tensors().iter().map(|v| v.to_vec()).collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for ti in 0..9 {
            let n = model_tensors_mut(&mut m)[ti].len();
            for j in 0..n {
                let base = model_tensors_mut(&mut m)[ti][j];
                model_tensors_mut(&mut m)[ti][j] = base + h;
                let lp = linear_probe_loss(render(&m, &cam, t, &st, false).unwrap().image(), &probe);
                model_tensors_mut(&mut m)[ti][j] = base - h;
                let lm = linear_probe_loss(render(&m, &cam, t, &st, false).unwrap().image(), &probe);
                model_tensors_mut(&mut m)[ti][j] = base;
                let fd = (lp - lm) / (2.0 * h);
                let a = flat_grads[ti][j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(err);
                assert!(err < 1e-4, "tensor {ti} index {j}: analytic {a} fd {fd}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn inactive_slot_is_identical_to_deleting_it() {
        let view = camera(12, 12).view();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gs: Vec<Gaussian3D> = (0..4)
            .map(|_| Gaussian3D {
                mean: Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.2..0.2)),
                rotation: Quat::identity(),
                scale: Vec3::repeat(0.2),
                opacity: 0.6,
                color: Vec3::new(rng.random(), rng.random(), rng.random()),
            })
            .collect();
        let mut raw = vec![0.6; 4];
        raw[2] = -0.2;
        gs[2].opacity = 0.0;
        let full = DecodedCluster::from_gaussians(gs.clone(), raw.clone());
        let mut gs_del = gs.clone();
        gs_del.remove(2);
        let mut raw_del = raw.clone();
        raw_del.remove(2);
        let del = DecodedCluster::from_gaussians(gs_del, raw_del);
        let st = RasterSettings::default();
        let mut a = cull_and_activate(&[full], &view, &st);
        let mut b = cull_and_activate(&[del], &view, &st);
        depth_sort(&mut a);
        depth_sort(&mut b);
        let ra = rasterize(&a, 12, 12, &st, true);
        let rb = rasterize(&b, 12, 12, &st, true);
        assert_eq!(ra.image, rb.image);
        assert_eq!(a.len(), b.len());
    }
}
