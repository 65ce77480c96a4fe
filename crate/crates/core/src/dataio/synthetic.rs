//! Synthetic multi-period scenes rendered by the engine's own rasteriser,
//! so the optimum is exactly representable by the model family.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{encode_ppm, load_dataset, quantize, write_colmap, write_periods, write_split, write_text, ColmapPoint, ColmapScene, Image, MultiPeriodDataset};
use crate::decoder::DecodedCluster;
use crate::error::{Error, Result};
use crate::geom::{Camera, Gaussian3D, Quat, Vec3};
use crate::par;
use crate::raster::{cull_and_activate, depth_sort, rasterize, RasterSettings};

fn default_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

fn default_points() -> usize {
    40
}

fn default_test_every() -> usize {
    2
}

/// One ground-truth Gaussian and the periods in which it exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    /// `[w, x, y, z]`.
    #[serde(default = "default_rotation")]
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Periods in which the primitive is present; all periods when absent.
    #[serde(default)]
    pub lifespan: Option<Vec<usize>>,
    /// Per-period color replacing `color`.
    #[serde(default)]
    pub period_colors: BTreeMap<usize, [f64; 3]>,
}

impl Primitive {
    pub fn alive(&self, t: usize) -> bool {
        self.lifespan.as_ref().is_none_or(|l| l.contains(&t))
    }
}

/// Cameras on a circle around `target`, elevations spread over `elevation_deg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub radius: f64,
    pub elevation_deg: [f64; 2],
    pub cameras_per_period: usize,
    pub fov_deg: f64,
    /// Every `test_every`-th camera of a period (1-based) is held out.
    #[serde(default = "default_test_every")]
    pub test_every: usize,
    #[serde(default)]
    pub target: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub periods: usize,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
    /// RGB multiplier per period.
    pub tints: Vec<[f64; 3]>,
    pub rig: RigSpec,
    /// Sparse points sampled around each live primitive per period.
    #[serde(default = "default_points")]
    pub points_per_primitive: usize,
    pub primitives: Vec<Primitive>,
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SyntheticSceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.periods == 0 {
            return bad("at least one period is required".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if self.tints.len() != self.periods {
            return bad(format!("{} tints for {} periods", self.tints.len(), self.periods));
        }
        if self.tints.iter().flatten().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return bad("tints must lie in (0, 1]".into());
        }
        if self.background.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return bad("background must lie in [0, 1]".into());
        }
        let r = &self.rig;
        if r.cameras_per_period == 0 || !(r.radius > 0.0) || !(r.fov_deg > 0.0 && r.fov_deg < 180.0) {
            return bad("rig needs cameras, a positive radius and a field of view in (0, 180)".into());
        }
        if r.test_every < 2 {
            return bad("rig.test_every must be at least 2".into());
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.opacity > 0.0 && p.opacity <= 1.0) || p.scale.iter().any(|&s| !(s > 0.0)) {
                return bad(format!("primitive {i} needs opacity in (0, 1] and positive scales"));
            }
            if p.color.iter().chain(p.period_colors.values().flatten()).any(|&c| !(0.0..=1.0).contains(&c)) {
                return bad(format!("primitive {i} has a color outside [0, 1]"));
            }
            let q = p.rotation;
            if q.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
                return bad(format!("primitive {i} has a zero rotation"));
            }
            if let Some(t) = p.lifespan.iter().flatten().chain(p.period_colors.keys()).find(|&&t| t >= self.periods) {
                return bad(format!("primitive {i} references period {t}"));
            }
        }
        if let Some(t) = (0..self.periods).find(|&t| !self.primitives.iter().any(|p| p.alive(t))) {
            return bad(format!("period {t} has no live primitive"));
        }
        Ok(())
    }
}

/// Live primitives of period `t`, colors replaced and tinted.
pub fn ground_truth_gaussians(spec: &SyntheticSceneSpec, t: usize) -> Vec<Gaussian3D> {
    let tint = v3(&spec.tints[t]);
    spec.primitives
        .iter()
        .filter(|p| p.alive(t))
        .map(|p| {
            let q = Quat::new(p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]);
            let color = v3(p.period_colors.get(&t).unwrap_or(&p.color));
            Gaussian3D {
                mean: v3(&p.mean),
                rotation: q / q.norm(),
                scale: v3(&p.scale),
                opacity: p.opacity,
                color: color.component_mul(&tint),
            }
        })
        .collect()
}

/// Cameras of every period with their hold-out flags; ids start at 1.
///
/// Period `t` is rotated by `t / T` of the azimuth step so periods see
/// interleaved viewpoints. Elevations follow a golden-ratio sequence.
pub fn orbit_cameras(spec: &SyntheticSceneSpec) -> (Vec<Camera>, Vec<bool>) {
    let r = &spec.rig;
    let n = r.cameras_per_period;
    let target = v3(&r.target);
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    let mut cams = Vec::with_capacity(n * spec.periods);
    let mut test = Vec::with_capacity(n * spec.periods);
    for t in 0..spec.periods {
        for i in 0..n {
            let az = std::f64::consts::TAU * (i as f64 + t as f64 / spec.periods as f64) / n as f64;
            let f = ((i + 1) as f64 * golden).fract();
            let el = (r.elevation_deg[0] + (r.elevation_deg[1] - r.elevation_deg[0]) * f).to_radians();
            let eye = target + r.radius * Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
            let mut c = Camera::look_at(eye, target, Vec3::y(), spec.width, spec.height, r.fov_deg);
            c.id = (t * n + i + 1) as u32;
            c.period = t;
            c.image_name = format!("p{t}_{i:03}.ppm");
            cams.push(c);
            test.push(i % r.test_every == r.test_every - 1);
        }
    }
    (cams, test)
}

/// Renders a Gaussian set with the training rasteriser.
pub fn render_gaussians(gaussians: &[Gaussian3D], camera: &Camera, settings: &RasterSettings) -> Vec<f64> {
    let cluster = DecodedCluster::from_gaussians(gaussians.to_vec(), gaussians.iter().map(|g| g.opacity).collect());
    let mut splats = cull_and_activate(&[cluster], &camera.view(), settings);
    depth_sort(&mut splats);
    rasterize(&splats, camera.width, camera.height, settings, false).image
}

/// Writes the scene's dataset to `out_dir` and loads it back.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<MultiPeriodDataset> {
    spec.validate()?;
    let (cameras, is_test) = orbit_cameras(spec);
    let settings = RasterSettings {
        background: v3(&spec.background),
        ..Default::default()
    };
    let gts: Vec<Vec<Gaussian3D>> = (0..spec.periods).map(|t| ground_truth_gaussians(spec, t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::new();
    let mut observations: BTreeMap<u32, Vec<(f64, f64, u64)>> = BTreeMap::new();
    for t in 0..spec.periods {
        let anchor_img = cameras
            .iter()
            .zip(&is_test)
            .find(|(c, test)| c.period == t && !**test)
            .map(|(c, _)| c)
            .unwrap_or_else(|| cameras.iter().find(|c| c.period == t).expect("period has cameras"));
        let view = anchor_img.view();
        for g in &gts[t] {
            let sigma = g.scale.mean();
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::SpecInvalid(e.to_string()))?;
            for _ in 0..spec.points_per_primitive {
                let p = g.mean + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
                let id = points.len() as u64 + 1;
                let px = view.project_unchecked(&view.world_to_view(&p));
                observations.entry(anchor_img.id).or_default().push((px.x, px.y, id));
                points.push(ColmapPoint {
                    id,
                    position: p,
                    rgb: [quantize(g.color.x), quantize(g.color.y), quantize(g.color.z)],
                    error: 0.0,
                    track: vec![anchor_img.id],
                });
            }
        }
    }

    let encoded = par::map_slice(&cameras, |c| {
        let data = render_gaussians(&gts[c.period], c, &settings);
        encode_ppm(&Image {
            width: c.width,
            height: c.height,
            data,
        })
    });

    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    write_colmap(out_dir, &ColmapScene { cameras: cameras.clone(), points }, &observations)?;
    write_periods(&out_dir.join("periods.txt"), &cameras)?;
    write_split(&out_dir.join("split.txt"), &cameras, &is_test)?;
    write_text(&out_dir.join("scene.json"), &spec.to_json())?;
    for (c, bytes) in cameras.iter().zip(encoded) {
        let p = img_dir.join(&c.image_name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    load_dataset(out_dir)
}
