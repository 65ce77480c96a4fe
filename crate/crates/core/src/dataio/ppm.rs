//! Binary PPM (P6, maxval 255) images as row-major RGB in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major `H × W × 3`.
    pub data: Vec<f64>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, 1, "truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if header[0] != "P6" {
        return Err(Error::parse(path, 1, format!("expected P6, found `{}`", header[0])));
    }
    let num = |s: &str, what: &str| -> Result<u32> {
        s.parse().map_err(|_| Error::parse(path, 1, format!("invalid {what} `{s}`")))
    };
    let (width, height, maxval) = (num(&header[1], "width")?, num(&header[2], "height")?, num(&header[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::parse(path, 1, format!("maxval {maxval} is not supported")));
    }
    let n = 3 * width as usize * height as usize;
    let raster = bytes.get(pos..pos + n).ok_or_else(|| Error::parse(path, 1, "truncated pixel data"))?;
    Ok(Image {
        width,
        height,
        data: raster.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn white_pixel_bytes() {
        let img = Image { width: 1, height: 1, data: vec![1.0; 3] };
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a.ppm");
        let mut bytes = b"P6\n3 2\n255\n".to_vec();
        bytes.extend((0..18u8).map(|i| i * 13));
        std::fs::write(&p, &bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        write_ppm(&p, &img).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn quantization_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let img = Image { width: 9, height: 7, data: (0..189).map(|_| rng.random()).collect() };
        let back = decode_ppm(&encode_ppm(&img), Path::new("mem")).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let p = Path::new("mem");
        assert!(decode_ppm(b"P3\n1 1\n255\n   ", p).is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00", p).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00", p).is_err());
        assert!(decode_ppm(b"P6\n# comment\n1 1\n255\n\x01\x02\x03", p).is_ok());
    }
}
