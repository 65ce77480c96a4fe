//! Photometric losses and image metrics on row-major `H × W × 3` images.

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Image dimensions, needed by the windowed metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
}

impl ImageShape {
    pub fn new(width: u32, height: u32) -> Self {
        ImageShape {
            width: width as usize,
            height: height as usize,
        }
    }

    pub fn len(&self) -> usize {
        3 * self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check(shape: ImageShape, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != shape.len() {
        return Err(Error::shape(shape.len(), a.len()));
    }
    if b.len() != a.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-region separable filtering of a single-channel `h × w` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-region map back onto the `h × w` plane.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += taps[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += taps[k] * v;
            }
        }
    }
    out
}

fn channel(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

/// Structural similarity (per-channel mean over the valid region, then
/// averaged over channels) and its gradient with respect to `pred`.
pub fn ssim(pred: &[f64], gt: &[f64], shape: ImageShape) -> Result<(f64, Vec<f64>)> {
    check(shape, pred, gt)?;
    let (w, h) = (shape.width, shape.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let n_valid = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for c in 0..3 {
        let x = channel(pred, c);
        let y = channel(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let exx = filter_valid(&xx, w, h, &taps);
        let eyy = filter_valid(&yy, w, h, &taps);
        let exy = filter_valid(&xy, w, h, &taps);
        let m = mx.len();
        let (mut da, mut db, mut dg) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        let mut sum = 0.0;
        for p in 0..m {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            da[p] = 2.0 * uy * (a2 - a1) / (b1 * b2) - 2.0 * ux * s / b1 + 2.0 * ux * s / b2;
            db[p] = -s / b2;
            dg[p] = 2.0 * a1 / (b1 * b2);
        }
        total += sum / n_valid;
        let ga = filter_valid_adjoint(&da, w, h, &taps);
        let gb = filter_valid_adjoint(&db, w, h, &taps);
        let gg = filter_valid_adjoint(&dg, w, h, &taps);
        let k = 1.0 / (3.0 * n_valid);
        for q in 0..w * h {
            grad[3 * q + c] = k * (ga[q] + 2.0 * x[q] * gb[q] + y[q] * gg[q]);
        }
    }
    Ok((total / 3.0, grad))
}

/// Components of the hybrid photometric objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub lambda: f64,
}

/// `λ·L1 + (1 − λ)·(1 − SSIM)` and its gradient with respect to `pred`.
pub fn hybrid_loss(pred: &[f64], gt: &[f64], shape: ImageShape, lambda: f64) -> Result<(LossReport, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            value: lambda,
            min: 0.0,
            max: 1.0,
        });
    }
    check(shape, pred, gt)?;
    let (l1, g1) = l1_loss(pred, gt)?;
    let (s, gs) = ssim(pred, gt, shape)?;
    let grad = g1.iter().zip(&gs).map(|(a, b)| lambda * a - (1.0 - lambda) * b).collect();
    Ok((
        LossReport {
            total: lambda * l1 + (1.0 - lambda) * (1.0 - s),
            l1,
            ssim: s,
            lambda,
        },
        grad,
    ))
}

/// Peak signal-to-noise ratio for unit dynamic range; `+∞` when the images are equal.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random()).collect()
    }

    /// Direct 2-D window evaluation, no separability.
    pub(crate) fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
        let g = gaussian_taps();
        let mut total = 0.0;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..SSIM_WINDOW {
                        for i in 0..SSIM_WINDOW {
                            let wt = g[i] * g[j];
                            let p = 3 * ((y0 + j) * w + x0 + i) + c;
                            mx += wt * a[p];
                            my += wt * b[p];
                        }
                    }
                    for j in 0..SSIM_WINDOW {
                        for i in 0..SSIM_WINDOW {
                            let wt = g[i] * g[j];
                            let p = 3 * ((y0 + j) * w + x0 + i) + c;
                            sxx += wt * (a[p] - mx) * (a[p] - mx);
                            syy += wt * (b[p] - my) * (b[p] - my);
                            sxy += wt * (a[p] - mx) * (b[p] - my);
                        }
                    }
                    sum += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
                    cnt += 1.0;
                }
            }
            total += sum / cnt;
        }
        total / 3.0
    }

    #[test]
    fn l1_examples() {
        let a = vec![0.2; 12];
        assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((l1_loss(&b, &a).unwrap().0 - 0.1).abs() < 1e-15);
        assert!(matches!(l1_loss(&a, &a[..3]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn l1_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (7, 5);
        let a = random_image(&mut rng, 3 * w * h);
        let b = random_image(&mut rng, 3 * w * h);
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let p = 3 * (y * w + x) + c;
                    s += (a[p] - b[p]).abs();
                }
            }
        }
        assert!((l1_loss(&a, &b).unwrap().0 - s / (3 * w * h) as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = ImageShape { width: 13, height: 12 };
        let a = random_image(&mut rng, shape.len());
        assert_eq!(ssim(&a, &a, shape).unwrap().0, 1.0);
        let gray = vec![0.5; shape.len()];
        let inv: Vec<f64> = gray.iter().map(|x| 1.0 - x).collect();
        assert_eq!(ssim(&inv, &gray, shape).unwrap().0, 1.0);
        let small = ImageShape { width: 10, height: 12 };
        let s = vec![0.0; small.len()];
        assert!(matches!(ssim(&s, &s, small), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_naive_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = ImageShape { width: 14, height: 12 };
        for _ in 0..5 {
            let a = random_image(&mut rng, shape.len());
            let b = random_image(&mut rng, shape.len());
            let s = ssim(&a, &b, shape).unwrap().0;
            assert!((s - naive_ssim(&a, &b, 14, 12)).abs() < 1e-10);
            assert!((s - ssim(&b, &a, shape).unwrap().0).abs() < 1e-12);
            assert!(s < 1.0);
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = ImageShape { width: 16, height: 16 };
        let a = random_image(&mut rng, shape.len());
        let b = random_image(&mut rng, shape.len());
        let (_, g) = ssim(&a, &b, shape).unwrap();
        let h = 1e-6;
        for p in (0..shape.len()).step_by(7) {
            let mut ap = a.clone();
            ap[p] += h;
            let mut am = a.clone();
            am[p] -= h;
            let fd = (ssim(&ap, &b, shape).unwrap().0 - ssim(&am, &b, shape).unwrap().0) / (2.0 * h);
            assert!((fd - g[p]).abs() < 1e-8, "pixel {p}: {fd} vs {}", g[p]);
        }
    }

    #[test]
    fn hybrid_examples_and_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = ImageShape { width: 12, height: 11 };
        let a = random_image(&mut rng, shape.len());
        let b = random_image(&mut rng, shape.len());
        assert_eq!(hybrid_loss(&a, &a, shape, 0.3).unwrap().0.total, 0.0);
        let (r1, _) = hybrid_loss(&a, &b, shape, 1.0).unwrap();
        assert_eq!(r1.total, l1_loss(&a, &b).unwrap().0);
        let (r, g) = hybrid_loss(&a, &b, shape, 0.8).unwrap();
        let expect = 0.8 * l1_loss(&a, &b).unwrap().0 + 0.2 * (1.0 - naive_ssim(&a, &b, 12, 11));
        assert!((r.total - expect).abs() < 1e-10);
        let v = random_image(&mut rng, shape.len());
        let eps = 1e-6;
        let shifted = |s: f64| -> Vec<f64> { a.iter().zip(&v).map(|(x, d)| x + s * d).collect() };
        let fd = (hybrid_loss(&shifted(eps), &b, shape, 0.8).unwrap().0.total
            - hybrid_loss(&shifted(-eps), &b, shape, 0.8).unwrap().0.total)
            / (2.0 * eps);
        let dot: f64 = g.iter().zip(&v).map(|(x, y)| x * y).sum();
        assert!((fd - dot).abs() < 1e-5);
        assert!(hybrid_loss(&a, &b, shape, 1.5).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 30];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|x| x + 0.1).collect();
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
    }
}
