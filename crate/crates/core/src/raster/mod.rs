//! Splat projection, tile-binned front-to-back compositing and its adjoint.
//!
//! A splat touches pixel `u` with `α̂ = min(α_max, α·exp(−½ dᵀΣ⁻¹d))`,
//! `d = u + ½ − mean2d`. Terms with `α̂ < α_min` are skipped and a pixel
//! stops after the first term that takes its transmittance below `t_min`.
//! Each splat's pixel box is the bounding box of the ellipse on which
//! `α̂ = α_min`, so restricting work to the box never changes the image.

mod pipeline;

pub use pipeline::{linear_probe_loss, render, render_backward, RenderGraph, RenderGrads, VisibleAnchor};

use crate::decoder::DecodedCluster;
use crate::geom::{quat_to_matrix, CameraView, Cov2, Vec2, Vec3, NEAR_PLANE};
use crate::par;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;
/// Slack added to the squared cull radius so boundary pixels are never lost to rounding.
const CULL_SLACK: f64 = 1e-6;

/// Compositing thresholds, background and binning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSettings {
    pub background: Vec3,
    pub alpha_max: f64,
    /// Zero disables skipping (and pixel-box culling).
    pub alpha_min: f64,
    /// Zero disables early termination.
    pub t_min: f64,
    /// Square tile edge in pixels; `None` composites every pixel against the
    /// whole depth-sorted list.
    pub tile_size: Option<u32>,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            background: Vec3::zeros(),
            alpha_max: ALPHA_MAX,
            alpha_min: ALPHA_MIN,
            t_min: T_MIN,
            tile_size: Some(16),
        }
    }
}

impl RasterSettings {
    /// Cap kept, skipping and early termination off.
    pub fn exact() -> Self {
        RasterSettings {
            alpha_min: 0.0,
            t_min: 0.0,
            ..Self::default()
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vec2,
    /// Dilated image-space covariance.
    pub cov: Cov2,
    /// Inverse of `cov`.
    pub conic: Cov2,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    pub bbox: PixelBox,
    /// `(cluster index, slot)` of the Gaussian this splat came from.
    pub source: (usize, usize),
}

/// Pixel box of a splat, or `None` if it cannot reach `alpha_min` inside the image.
pub fn splat_box(mean: &Vec2, cov: &Cov2, opacity: f64, width: u32, height: u32, alpha_min: f64) -> Option<PixelBox> {
    let (hx, hy) = if alpha_min > 0.0 {
        if opacity <= alpha_min {
            return None;
        }
        let r2 = 2.0 * (opacity / alpha_min).ln() + CULL_SLACK;
        ((r2 * cov.a).sqrt(), (r2 * cov.c).sqrt())
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let lo_x = (mean.x - hx - 0.5).ceil().max(0.0);
    let hi_x = (mean.x + hx - 0.5).floor().min(width as f64 - 1.0);
    let lo_y = (mean.y - hy - 0.5).ceil().max(0.0);
    let hi_y = (mean.y + hy - 0.5).floor().min(height as f64 - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return None;
    }
    Some(PixelBox {
        x0: lo_x as u32,
        y0: lo_y as u32,
        x1: hi_x as u32,
        y1: hi_y as u32,
    })
}

/// Drops inactive slots, projects the rest and drops splats that cannot
/// touch the image. Output follows cluster then slot order.
pub fn cull_and_activate(clusters: &[DecodedCluster], view: &CameraView, settings: &RasterSettings) -> Vec<Splat2D> {
    let mut out = Vec::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        for (slot, g) in cluster.gaussians.iter().enumerate() {
            if !cluster.active[slot] {
                continue;
            }
            let v = view.world_to_view(&g.mean);
            if v.z <= NEAR_PLANE {
                continue;
            }
            let mean2d = view.project_unchecked(&v);
            let cov = view.project_covariance(&v, &quat_to_matrix(&g.rotation), &g.scale);
            let Some(bbox) = splat_box(&mean2d, &cov, g.opacity, view.width, view.height, settings.alpha_min) else {
                continue;
            };
            out.push(Splat2D {
                mean2d,
                conic: cov.inverse(),
                cov,
                depth: v.z,
                opacity: g.opacity,
                color: g.color,
                bbox,
                source: (ci, slot),
            });
        }
    }
    out
}

/// Sorts front to back; equal depths keep source order.
pub fn depth_sort(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
}

/// Unclamped `α·exp(−½ dᵀΣ⁻¹d)` at pixel `(x, y)`, with the exponent.
#[inline]
fn falloff(s: &Splat2D, x: u32, y: u32) -> (f64, f64, f64, f64) {
    let dx = x as f64 + 0.5 - s.mean2d.x;
    let dy = y as f64 + 0.5 - s.mean2d.y;
    let power = -0.5 * (s.conic.a * dx * dx + 2.0 * s.conic.b * dx * dy + s.conic.c * dy * dy);
    (s.opacity * power.exp(), power, dx, dy)
}

/// One composited term of a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub splat: u32,
    pub capped: bool,
    pub alpha: f64,
    /// Transmittance in front of this term.
    pub t_before: f64,
}

/// Composites the depth-sorted `splats` at one pixel.
///
/// Returns the color and the final transmittance. If `records` is given,
/// every composited term is appended to it.
pub fn composite_pixel(
    splats: &[Splat2D],
    order: impl IntoIterator<Item = u32>,
    x: u32,
    y: u32,
    settings: &RasterSettings,
    mut records: Option<&mut Vec<Contribution>>,
) -> (Vec3, f64) {
    let mut color = Vec3::zeros();
    let mut t = 1.0;
    for idx in order {
        let s = &splats[idx as usize];
        if !s.bbox.contains(x, y) {
            continue;
        }
        let (raw, _, _, _) = falloff(s, x, y);
        let capped = raw > settings.alpha_max;
        let alpha = if capped { settings.alpha_max } else { raw };
        if alpha < settings.alpha_min {
            continue;
        }
        if let Some(r) = records.as_deref_mut() {
            r.push(Contribution {
                splat: idx,
                capped,
                alpha,
                t_before: t,
            });
        }
        color += s.color * (alpha * t);
        t *= 1.0 - alpha;
        if t < settings.t_min {
            break;
        }
    }
    (color + settings.background * t, t)
}

/// Rendered image plus, optionally, the per-pixel state its adjoint needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Row-major `H × W × 3`.
    pub image: Vec<f64>,
    pub final_t: Vec<f64>,
    /// Composited terms of pixel `p` are `records[offsets[p]..offsets[p + 1]]`.
    pub records: Option<(Vec<u32>, Vec<Contribution>)>,
}

struct Tiling {
    size: u32,
    cols: u32,
    rows: u32,
}

impl Tiling {
    fn new(width: u32, height: u32, tile: Option<u32>) -> Self {
        let size = tile.unwrap_or(width.max(height)).max(1);
        Tiling {
            size,
            cols: width.div_ceil(size),
            rows: height.div_ceil(size),
        }
    }

    fn count(&self) -> usize {
        (self.cols * self.rows) as usize
    }

    /// Per-tile index lists, each in depth order.
    fn bin(&self, splats: &[Splat2D]) -> Vec<Vec<u32>> {
        let mut bins = vec![Vec::new(); self.count()];
        for (i, s) in splats.iter().enumerate() {
            for ty in s.bbox.y0 / self.size..=s.bbox.y1 / self.size {
                for tx in s.bbox.x0 / self.size..=s.bbox.x1 / self.size {
                    bins[(ty * self.cols + tx) as usize].push(i as u32);
                }
            }
        }
        bins
    }

    fn pixels(&self, tile: usize, width: u32, height: u32) -> impl Iterator<Item = (u32, u32)> {
        let tx = tile as u32 % self.cols;
        let ty = tile as u32 / self.cols;
        let (x0, y0) = (tx * self.size, ty * self.size);
        let (x1, y1) = ((x0 + self.size).min(width), (y0 + self.size).min(height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Composites depth-sorted `splats` into a `width × height` image.
pub fn rasterize(splats: &[Splat2D], width: u32, height: u32, settings: &RasterSettings, retain: bool) -> Raster {
    let tiling = Tiling::new(width, height, settings.tile_size);
    let bins = tiling.bin(splats);
    struct TileOut {
        pixels: Vec<(u32, u32, Vec3, f64, u32)>,
        records: Vec<Contribution>,
    }
    let tiles = par::map_range(tiling.count(), |tile| {
        let mut out = TileOut {
            pixels: Vec::new(),
            records: Vec::new(),
        };
        for (x, y) in tiling.pixels(tile, width, height) {
            let before = out.records.len();
            let rec = if retain { Some(&mut out.records) } else { None };
            let (c, t) = composite_pixel(splats, bins[tile].iter().copied(), x, y, settings, rec);
            out.pixels.push((x, y, c, t, (out.records.len() - before) as u32));
        }
        out
    });

    let n = (width * height) as usize;
    let mut image = vec![0.0; 3 * n];
    let mut final_t = vec![0.0; n];
    let mut counts = vec![0u32; n];
    for tile in &tiles {
        for &(x, y, c, t, cnt) in &tile.pixels {
            let p = (y * width + x) as usize;
            image[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
            final_t[p] = t;
            counts[p] = cnt;
        }
    }
    let records = retain.then(|| {
        let mut offsets = vec![0u32; n + 1];
        for p in 0..n {
            offsets[p + 1] = offsets[p] + counts[p];
        }
        let mut all = vec![
            Contribution {
                splat: 0,
                capped: false,
                alpha: 0.0,
                t_before: 0.0
            };
            offsets[n] as usize
        ];
        for tile in &tiles {
            let mut cursor = 0usize;
            for &(x, y, _, _, cnt) in &tile.pixels {
                let p = (y * width + x) as usize;
                let start = offsets[p] as usize;
                all[start..start + cnt as usize].copy_from_slice(&tile.records[cursor..cursor + cnt as usize]);
                cursor += cnt as usize;
            }
        }
        (offsets, all)
    });
    Raster {
        width,
        height,
        image,
        final_t,
        records,
    }
}

/// Gradient of a scalar loss on one splat's image-space attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: Vec2,
    /// On the dilated covariance entries `(a, b, c)` of `[[a, b], [b, c]]`.
    pub cov: Cov2,
    pub opacity: f64,
    pub color: Vec3,
}

/// Adjoint of [`rasterize`]. `grad_image` is `H × W × 3`, row-major.
///
/// Per-tile partial sums are merged in tile order, so the result does not
/// depend on the number of threads.
pub fn rasterize_backward(
    splats: &[Splat2D],
    raster: &Raster,
    grad_image: &[f64],
    settings: &RasterSettings,
) -> Option<Vec<SplatGrad>> {
    let (offsets, records) = raster.records.as_ref()?;
    let (width, height) = (raster.width, raster.height);
    let tiling = Tiling::new(width, height, settings.tile_size);
    let bg = settings.background;

    // Conic-space gradients: (mean x, mean y, dA, dB, dC, opacity, r, g, b).
    type Acc = [f64; 9];
    let partials = par::map_range(tiling.count(), |tile| {
        let mut local: Vec<(u32, Acc)> = Vec::new();
        let mut slot_of: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
        for (x, y) in tiling.pixels(tile, width, height) {
            let p = (y * width + x) as usize;
            let g = Vec3::new(grad_image[3 * p], grad_image[3 * p + 1], grad_image[3 * p + 2]);
            if g == Vec3::zeros() {
                continue;
            }
            let recs = &records[offsets[p] as usize..offsets[p + 1] as usize];
            let mut accum = bg * raster.final_t[p];
            for r in recs.iter().rev() {
                let s = &splats[r.splat as usize];
                let w = r.alpha * r.t_before;
                let d_alpha = g.dot(&(s.color * r.t_before - accum / (1.0 - r.alpha)));
                accum += s.color * w;
                let k = *slot_of.entry(r.splat).or_insert_with(|| {
                    local.push((r.splat, [0.0; 9]));
                    local.len() - 1
                });
                let acc = &mut local[k].1;
                acc[6] += g.x * w;
                acc[7] += g.y * w;
                acc[8] += g.z * w;
                if r.capped {
                    continue;
                }
                let (raw, power, dx, dy) = falloff(s, x, y);
                acc[5] += d_alpha * power.exp();
                let d_power = d_alpha * raw;
                acc[0] += d_power * (s.conic.a * dx + s.conic.b * dy);
                acc[1] += d_power * (s.conic.b * dx + s.conic.c * dy);
                acc[2] += -0.5 * d_power * dx * dx;
                acc[3] += -d_power * dx * dy;
                acc[4] += -0.5 * d_power * dy * dy;
            }
        }
        local
    });

    let mut acc = vec![[0.0; 9]; splats.len()];
    for tile in partials {
        for (i, a) in tile {
            let dst = &mut acc[i as usize];
            for k in 0..9 {
                dst[k] += a[k];
            }
        }
    }
    Some(
        splats
            .iter()
            .zip(&acc)
            .map(|(s, a)| {
                // dL/dΣ = −Σ⁻¹ G Σ⁻¹ with G the symmetric gradient on the conic.
                let inv = s.conic.to_matrix();
                let gc = nalgebra::Matrix2::new(a[2], 0.5 * a[3], 0.5 * a[3], a[4]);
                let m = -(inv * gc * inv);
                SplatGrad {
                    mean2d: Vec2::new(a[0], a[1]),
                    cov: Cov2 {
                        a: m[(0, 0)],
                        b: 2.0 * m[(0, 1)],
                        c: m[(1, 1)],
                    },
                    opacity: a[5],
                    color: Vec3::new(a[6], a[7], a[8]),
                }
            })
            .collect(),
    )
}
