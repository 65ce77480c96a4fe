//! COLMAP text-format sparse models (`cameras.txt`, `images.txt`, `points3D.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Camera, Quat, Vec3};

use super::{read_text, write_text};

/// One `points3D.txt` row; the track keeps only the observing image ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub position: Vec3,
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<u32>,
}

/// Registered images (as cameras, each with its own intrinsics) and sparse points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapScene {
    pub cameras: Vec<Camera>,
    pub points: Vec<ColmapPoint>,
}

struct Intrinsics {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

/// Meaningful lines with their 1-based numbers; blank and `#` lines are skipped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(tokens: &[&str], i: usize, file: &Path, line: usize, what: &str) -> Result<T> {
    let tok = tokens
        .get(i)
        .ok_or_else(|| Error::parse(file, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid {what} `{tok}`")))
}

fn parse_cameras(path: &Path) -> Result<BTreeMap<u32, Intrinsics>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (ln, line) in data_lines(&text) {
        let t: Vec<&str> = line.split_whitespace().collect();
        let id: u32 = field(&t, 0, path, ln, "camera id")?;
        let model = *t.get(1).ok_or_else(|| Error::parse(path, ln, "missing camera model"))?;
        let width = field(&t, 2, path, ln, "width")?;
        let height = field(&t, 3, path, ln, "height")?;
        let p = |i: usize, what: &str| field::<f64>(&t, 4 + i, path, ln, what);
        let intr = match model {
            "SIMPLE_PINHOLE" => {
                let f = p(0, "focal length")?;
                Intrinsics { width, height, fx: f, fy: f, cx: p(1, "cx")?, cy: p(2, "cy")? }
            }
            "PINHOLE" => Intrinsics {
                width,
                height,
                fx: p(0, "fx")?,
                fy: p(1, "fy")?,
                cx: p(2, "cx")?,
                cy: p(3, "cy")?,
            },
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        out.insert(id, intr);
    }
    Ok(out)
}

fn parse_images(path: &Path, intrinsics: &BTreeMap<u32, Intrinsics>) -> Result<Vec<Camera>> {
    let text = read_text(path)?;
    let mut cameras = Vec::new();
    // Image rows alternate with 2-D observation rows, which are not needed.
    let mut expect_points = false;
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.starts_with('#') {
            continue;
        }
        if expect_points {
            expect_points = false;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let id: u32 = field(&t, 0, path, ln, "image id")?;
        let q: Vec<f64> = (1..5).map(|i| field(&t, i, path, ln, "quaternion")).collect::<Result<_>>()?;
        let tr: Vec<f64> = (5..8).map(|i| field(&t, i, path, ln, "translation")).collect::<Result<_>>()?;
        let cam_id: u32 = field(&t, 8, path, ln, "camera id")?;
        let name = t.get(9).ok_or_else(|| Error::parse(path, ln, "missing image name"))?;
        let k = intrinsics
            .get(&cam_id)
            .ok_or_else(|| Error::parse(path, ln, format!("unknown camera id {cam_id}")))?;
        let rotation = Quat::new(q[0], q[1], q[2], q[3]);
        let n = rotation.norm();
        if !(n > 0.0) {
            return Err(Error::parse(path, ln, "zero quaternion"));
        }
        cameras.push(Camera {
            id,
            width: k.width,
            height: k.height,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            rotation: rotation / n,
            translation: Vec3::new(tr[0], tr[1], tr[2]),
            period: 0,
            image_name: name.to_string(),
        });
        expect_points = true;
    }
    cameras.sort_by_key(|c| c.id);
    Ok(cameras)
}

fn parse_points(path: &Path) -> Result<Vec<ColmapPoint>> {
    let text = read_text(path)?;
    let mut points = Vec::new();
    for (ln, line) in data_lines(&text) {
        let t: Vec<&str> = line.split_whitespace().collect();
        let id = field(&t, 0, path, ln, "point id")?;
        let xyz: Vec<f64> = (1..4).map(|i| field(&t, i, path, ln, "coordinate")).collect::<Result<_>>()?;
        let rgb: Vec<u8> = (4..7).map(|i| field(&t, i, path, ln, "color")).collect::<Result<_>>()?;
        let error = field(&t, 7, path, ln, "reprojection error")?;
        let mut track = Vec::new();
        let mut i = 8;
        while i + 1 < t.len() {
            track.push(field(&t, i, path, ln, "track image id")?);
            i += 2;
        }
        points.push(ColmapPoint {
            id,
            position: Vec3::new(xyz[0], xyz[1], xyz[2]),
            rgb: [rgb[0], rgb[1], rgb[2]],
            error,
            track,
        });
    }
    Ok(points)
}

/// Reads the three text files under `dir`.
pub fn parse_colmap(dir: &Path) -> Result<ColmapScene> {
    let intr = parse_cameras(&dir.join("cameras.txt"))?;
    let cameras = parse_images(&dir.join("images.txt"), &intr)?;
    let points = parse_points(&dir.join("points3D.txt"))?;
    Ok(ColmapScene { cameras, points })
}

/// Writes `scene` as PINHOLE cameras, one intrinsics row per image.
///
/// `observations[image id]` optionally lists `(x, y, point id)` rows for the
/// second line of each image entry.
pub fn write_colmap(dir: &Path, scene: &ColmapScene, observations: &BTreeMap<u32, Vec<(f64, f64, u64)>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    let mut imgs = String::from("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for c in &scene.cameras {
        writeln!(cams, "{} PINHOLE {} {} {:?} {:?} {:?} {:?}", c.id, c.width, c.height, c.fx, c.fy, c.cx, c.cy).unwrap();
        let q = &c.rotation;
        let t = &c.translation;
        writeln!(
            imgs,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}",
            c.id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, c.id, c.image_name
        )
        .unwrap();
        let obs = observations.get(&c.id).map(Vec::as_slice).unwrap_or(&[]);
        let row: Vec<String> = obs.iter().map(|(x, y, p)| format!("{x:?} {y:?} {p}")).collect();
        writeln!(imgs, "{}", row.join(" ")).unwrap();
    }
    let mut pts = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let mut obs_index: BTreeMap<(u32, u64), usize> = BTreeMap::new();
    for (img, rows) in observations {
        for (k, (_, _, p)) in rows.iter().enumerate() {
            obs_index.insert((*img, *p), k);
        }
    }
    for p in &scene.points {
        write!(
            pts,
            "{} {:?} {:?} {:?} {} {} {} {:?}",
            p.id, p.position.x, p.position.y, p.position.z, p.rgb[0], p.rgb[1], p.rgb[2], p.error
        )
        .unwrap();
        for img in &p.track {
            let k = obs_index.get(&(*img, p.id)).copied().unwrap_or(0);
            write!(pts, " {img} {k}").unwrap();
        }
        pts.push('\n');
    }
    write_text(&dir.join("cameras.txt"), &cams)?;
    write_text(&dir.join("images.txt"), &imgs)?;
    write_text(&dir.join("points3D.txt"), &pts)
}
