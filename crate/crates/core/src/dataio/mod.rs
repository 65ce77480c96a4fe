//! Dataset ingestion: COLMAP text models, the period manifest, the split
//! file, PPM images and the synthetic scene generator.
//!
//! Directory layout:
//!
//! ```text
//! cameras.txt images.txt points3D.txt   COLMAP text model
//! periods.txt                           "<image name> <period>" per line
//! split.txt                             "<image name> train|test" (optional)
//! images/<image name>                   P6 PPM
//! ```
//!
//! Without `split.txt`, images at even positions (in image-id order) train and odd ones test.

mod colmap;
mod ppm;
mod synthetic;

pub use colmap::{parse_colmap, write_colmap, ColmapPoint, ColmapScene};
pub use ppm::{decode_ppm, encode_ppm, quantize, read_ppm, write_ppm, Image};
pub use synthetic::{
    generate_synthetic, ground_truth_gaussians, orbit_cameras, render_gaussians, Primitive, RigSpec, SyntheticSceneSpec,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Camera, Vec3};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Image name to period id, with `T` the number of periods.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodManifest {
    pub periods: usize,
    pub by_name: BTreeMap<String, usize>,
}

pub fn parse_periods(text: &str, path: &Path) -> Result<PeriodManifest> {
    let mut by_name = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(p), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(path, i + 1, "expected `<image name> <period>`"));
        };
        let p: usize = p
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("invalid period `{p}`")))?;
        if by_name.insert(name.to_string(), p).is_some() {
            return Err(Error::parse(path, i + 1, format!("image `{name}` listed twice")));
        }
    }
    let ids: BTreeSet<usize> = by_name.values().copied().collect();
    let periods = ids.iter().next_back().map_or(0, |m| m + 1);
    if let Some(missing) = (0..periods).find(|p| !ids.contains(p)) {
        return Err(Error::NonContiguousPeriods { missing });
    }
    Ok(PeriodManifest { periods, by_name })
}

pub fn load_periods(path: &Path) -> Result<PeriodManifest> {
    parse_periods(&read_text(path)?, path)
}

pub fn write_periods(path: &Path, cameras: &[Camera]) -> Result<()> {
    let mut s = String::from("# image_name period\n");
    for c in cameras {
        s.push_str(&format!("{} {}\n", c.image_name, c.period));
    }
    write_text(path, &s)
}

/// Assigns each camera its period; every manifest name must be a known image and vice versa.
pub fn join_periods(cameras: &mut [Camera], manifest: &PeriodManifest, path: &Path) -> Result<()> {
    let names: HashMap<&str, usize> = cameras.iter().enumerate().map(|(i, c)| (c.image_name.as_str(), i)).collect();
    if let Some(unknown) = manifest.by_name.keys().find(|n| !names.contains_key(n.as_str())) {
        return Err(Error::UnknownImage(unknown.clone()));
    }
    for c in cameras.iter_mut() {
        c.period = *manifest
            .by_name
            .get(&c.image_name)
            .ok_or_else(|| Error::parse(path, 0, format!("no period for image `{}`", c.image_name)))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiPeriodDataset {
    pub periods: usize,
    /// Sorted by image id.
    pub cameras: Vec<Camera>,
    /// Aligned with `cameras`.
    pub images: Vec<Image>,
    pub per_period_points: Vec<Vec<Vec3>>,
    /// Aligned with `cameras`.
    pub is_test: Vec<bool>,
}

impl MultiPeriodDataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| self.is_test[i]).collect()
    }

    pub fn test_indices_of(&self, period: usize) -> Vec<usize> {
        self.test_indices().into_iter().filter(|&i| self.cameras[i].period == period).collect()
    }

    pub fn camera_by_id(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::EmptyDataset("no images".into()));
        }
        for c in &self.cameras {
            c.validate(Some(self.periods))?;
        }
        for t in 0..self.periods {
            if !self.cameras.iter().any(|c| c.period == t) {
                return Err(Error::EmptyDataset(format!("period {t} has no images")));
            }
        }
        if self.per_period_points.iter().all(Vec::is_empty) {
            return Err(Error::EmptyPointCloud);
        }
        Ok(())
    }
}

/// Per-period point lists from COLMAP tracks. A point belongs to the period
/// of every image observing it, or to all periods if its track is empty.
/// Periods left without points receive the union.
pub fn points_by_period(points: &[ColmapPoint], cameras: &[Camera], periods: usize) -> Vec<Vec<Vec3>> {
    let period_of: HashMap<u32, usize> = cameras.iter().map(|c| (c.id, c.period)).collect();
    let mut out = vec![Vec::new(); periods];
    for p in points {
        let ps: BTreeSet<usize> = p.track.iter().filter_map(|id| period_of.get(id).copied()).collect();
        if ps.is_empty() {
            out.iter_mut().for_each(|v| v.push(p.position));
        } else {
            ps.into_iter().for_each(|t| out[t].push(p.position));
        }
    }
    let union: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    for v in out.iter_mut() {
        if v.is_empty() {
            v.clone_from(&union);
        }
    }
    out
}

pub fn write_split(path: &Path, cameras: &[Camera], is_test: &[bool]) -> Result<()> {
    let mut s = String::from("# image_name train|test\n");
    for (c, t) in cameras.iter().zip(is_test) {
        s.push_str(&format!("{} {}\n", c.image_name, if *t { "test" } else { "train" }));
    }
    write_text(path, &s)
}

fn load_split(path: &Path, cameras: &[Camera]) -> Result<Vec<bool>> {
    if !path.exists() {
        return Ok((0..cameras.len()).map(|i| i % 2 == 1).collect());
    }
    let text = read_text(path)?;
    let mut by_name = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(name), Some(kind)) = (it.next(), it.next()) else {
            return Err(Error::parse(path, i + 1, "expected `<image name> train|test`"));
        };
        let test = match kind {
            "train" => false,
            "test" => true,
            other => return Err(Error::parse(path, i + 1, format!("unknown split `{other}`"))),
        };
        by_name.insert(name.to_string(), test);
    }
    cameras
        .iter()
        .map(|c| {
            by_name
                .get(&c.image_name)
                .copied()
                .ok_or_else(|| Error::UnknownImage(c.image_name.clone()))
        })
        .collect()
}

/// Parses a single-camera pose file: one non-comment line holding
/// `WIDTH HEIGHT FX FY CX CY QW QX QY QZ TX TY TZ` (world-to-camera, COLMAP convention).
pub fn parse_pose(text: &str, path: &Path) -> Result<Camera> {
    let (n, line) = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::parse(path, 1, "pose file is empty"))?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 13 {
        return Err(Error::parse(path, n, format!("expected 13 fields, found {}", f.len())));
    }
    let int = |s: &str| s.parse::<u32>().map_err(|_| Error::parse(path, n, format!("invalid integer `{s}`")));
    let v: Vec<f64> = f[2..]
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| Error::parse(path, n, format!("invalid number `{s}`"))))
        .collect::<Result<_>>()?;
    let cam = Camera {
        id: 0,
        width: int(f[0])?,
        height: int(f[1])?,
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        rotation: crate::geom::Quat::new(v[4], v[5], v[6], v[7]),
        translation: Vec3::new(v[8], v[9], v[10]),
        period: 0,
        image_name: String::new(),
    };
    cam.validate(None)?;
    Ok(cam)
}

pub fn format_pose(c: &Camera) -> String {
    let q = &c.rotation;
    let t = &c.translation;
    format!(
        "{} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
        c.width, c.height, c.fx, c.fy, c.cx, c.cy, q.w, q.i, q.j, q.k, t.x, t.y, t.z
    )
}

/// Loads a dataset directory laid out as described in the module docs.
pub fn load_dataset(dir: &Path) -> Result<MultiPeriodDataset> {
    let scene = parse_colmap(dir)?;
    let mut cameras = scene.cameras;
    let periods_path = dir.join("periods.txt");
    let manifest = load_periods(&periods_path)?;
    join_periods(&mut cameras, &manifest, &periods_path)?;
    let per_period_points = points_by_period(&scene.points, &cameras, manifest.periods);
    let is_test = load_split(&dir.join("split.txt"), &cameras)?;
    let images = cameras
        .iter()
        .map(|c| {
            let img = read_ppm(&dir.join("images").join(&c.image_name))?;
            if img.width != c.width || img.height != c.height {
                return Err(Error::shape(
                    format!("{}x{}", c.width, c.height),
                    format!("{}x{} in {}", img.width, img.height, c.image_name),
                ));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = MultiPeriodDataset {
        periods: manifest.periods,
        cameras,
        images,
        per_period_points,
        is_test,
    };
    ds.validate()?;
    Ok(ds)
}
