//! Benchmark metrics for shape editing: SSIM and PSNR on luma, and the
//! scale-corrected per-vertex error between T-posed shapes.

use image::DynamicImage;

use crate::body::{BodyModel, BodyModelError, ShapeParams};
use crate::Exec;

mod report;

pub use report::{evaluate, evaluate_pairs, read_lpips, EvalReport, EvalRow, PairFit, PairInput};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: u32, height: u32, window: usize },
    #[error("vertex counts differ: {0} vs {1}")]
    VertexCount(usize, usize),
    #[error("prediction collapses to a point after centring")]
    DegeneratePrediction,
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error("missing {0}")]
    Missing(String),
    #[error("{path}: {message}")]
    Read { path: std::path::PathBuf, message: String },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// A single-channel f64 image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl LumaPlane {
    /// Gray images are taken as-is; colour images are reduced with the
    /// BT.601 weights 0.299 R + 0.587 G + 0.114 B. Alpha is ignored.
    pub fn from_image(img: &DynamicImage) -> Self {
        let (width, height) = (img.width(), img.height());
        let data = match img {
            DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p[0] as f64).collect(),
            DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p[0] as f64).collect(),
            other => other.to_rgb8().pixels().map(|p| bt601(p[0], p[1], p[2])).collect(),
        };
        LumaPlane { width, height, data }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        LumaPlane { width, height, data }
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    fn same_size(&self, other: &LumaPlane) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(MetricError::SizeMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }
}

pub fn bt601(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// `10·log10(255² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &LumaPlane, b: &LumaPlane) -> Result<f64> {
    a.same_size(b)?;
    let sse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data.len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn ssim(a: &LumaPlane, b: &LumaPlane) -> Result<f64> {
    ssim_with(a, b, Exec::default())
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows (σ = 1.5),
/// with K1 = 0.01, K2 = 0.03 and L = 255. The window sums are separable:
/// rows are filtered horizontally, then each output row vertically. Rows
/// run under `exec` and are summed in order afterwards.
pub fn ssim_with(a: &LumaPlane, b: &LumaPlane, exec: Exec) -> Result<f64> {
    a.same_size(b)?;
    let n = SSIM_WINDOW;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < n || h < n {
        return Err(MetricError::TooSmall { width: a.width, height: a.height, window: n });
    }
    let taps = gaussian_taps(n, SSIM_SIGMA);
    let (ow, oh) = (w - n + 1, h - n + 1);

    // Horizontal pass: for every input row, the five windowed moments at each
    // output column.
    let horizontal: Vec<[Vec<f64>; 5]> = exec.map_indices(h, |y| {
        let row_a = &a.data[y * w..(y + 1) * w];
        let row_b = &b.data[y * w..(y + 1) * w];
        let mut m: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; ow]);
        for x in 0..ow {
            let mut s = [0.0; 5];
            for (k, &t) in taps.iter().enumerate() {
                let (p, q) = (row_a[x + k], row_b[x + k]);
                s[0] += t * p;
                s[1] += t * q;
                s[2] += t * p * p;
                s[3] += t * q * q;
                s[4] += t * p * q;
            }
            for c in 0..5 {
                m[c][x] = s[c];
            }
        }
        m
    });

    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let row_sums: Vec<f64> = exec.map_indices(oh, |y| {
        let mut total = 0.0;
        for x in 0..ow {
            let mut s = [0.0; 5];
            for (k, &t) in taps.iter().enumerate() {
                let hrow = &horizontal[y + k];
                for c in 0..5 {
                    s[c] += t * hrow[c][x];
                }
            }
            total += ssim_from_moments(s, c1, c2);
        }
        total
    });
    Ok(row_sums.iter().sum::<f64>() / (ow * oh) as f64)
}

/// SSIM of one window from its weighted moments
/// (E[x], E[y], E[x²], E[y²], E[xy]).
pub fn ssim_from_moments(s: [f64; 5], c1: f64, c2: f64) -> f64 {
    let (mx, my) = (s[0], s[1]);
    let vx = s[2] - mx * mx;
    let vy = s[3] - my * my;
    let cov = s[4] - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// How the prediction's scale is corrected before measuring the error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleCorrection {
    /// Closed-form least-squares uniform scale after centring.
    #[default]
    LeastSquares,
    /// Ratio of vertical extents (ground truth over prediction).
    Height,
}

fn centred(v: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = v.len() as f64;
    let mut c = [0.0; 3];
    for p in v {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.iter_mut().for_each(|x| *x /= n);
    v.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

/// Mean per-vertex distance in millimetres after centring both sets and
/// rescaling the prediction by `s* = ⟨P, G⟩ / ⟨P, P⟩`.
pub fn pve_t_vertices(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    pve_t_vertices_with(pred, gt, ScaleCorrection::LeastSquares)
}

pub fn pve_t_vertices_with(pred: &[[f64; 3]], gt: &[[f64; 3]], correction: ScaleCorrection) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricError::VertexCount(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::DegeneratePrediction);
    }
    let (p, g) = (centred(pred), centred(gt));
    let dot = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
        a.iter().zip(b).map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).sum()
    };
    let s = match correction {
        ScaleCorrection::LeastSquares => {
            let pp = dot(&p, &p);
            if pp <= f64::MIN_POSITIVE {
                return Err(MetricError::DegeneratePrediction);
            }
            dot(&p, &g) / pp
        }
        ScaleCorrection::Height => {
            let extent = |v: &[[f64; 3]]| {
                let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), q| (lo.min(q[1]), hi.max(q[1])));
                hi - lo
            };
            let hp = extent(&p);
            if hp <= 0.0 {
                return Err(MetricError::DegeneratePrediction);
            }
            extent(&g) / hp
        }
    };
    let total: f64 = p
        .iter()
        .zip(&g)
        .map(|(a, b)| ((s * a[0] - b[0]).powi(2) + (s * a[1] - b[1]).powi(2) + (s * a[2] - b[2]).powi(2)).sqrt())
        .sum();
    Ok(1000.0 * total / p.len() as f64)
}

/// [`pve_t_vertices`] between the zero-pose shapes of two coefficient vectors.
pub fn pve_t_sc(beta_pred: &ShapeParams, beta_gt: &ShapeParams, model: &BodyModel) -> Result<f64> {
    let p = model.shaped_template(beta_pred)?;
    let g = model.shaped_template(beta_gt)?;
    pve_t_vertices(&p.vertices, &g.vertices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::make_test_model;
    use image::{GrayImage, Luma, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, w: u32, h: u32) -> LumaPlane {
        LumaPlane::from_fn(w, h, |_, _| rng.gen_range(0..=255u8) as f64)
    }

    /// Direct evaluation of every window with the 2-D weights.
    fn brute_ssim(a: &LumaPlane, b: &LumaPlane) -> f64 {
        let taps = gaussian_taps(11, 1.5);
        let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
        let (ow, oh) = (a.width - 10, a.height - 10);
        let mut total = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = taps[i] * taps[j];
                        mx += wt * a.at(x + j as u32, y + i as u32);
                        my += wt * b.at(x + j as u32, y + i as u32);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = taps[i] * taps[j];
                        let (p, q) = (a.at(x + j as u32, y + i as u32) - mx, b.at(x + j as u32, y + i as u32) - my);
                        vx += wt * p * p;
                        vy += wt * q * q;
                        cov += wt * p * q;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total / (ow * oh) as f64
    }

    #[test]
    fn psnr_values() {
        let a = LumaPlane::from_image(&DynamicImage::ImageLuma8(GrayImage::from_pixel(8, 8, Luma([10]))));
        let b = LumaPlane::from_image(&DynamicImage::ImageLuma8(GrayImage::from_pixel(8, 8, Luma([138]))));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let want = 10.0 * (65025.0f64 / 16384.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 5.987).abs() < 1e-3);
        let c = LumaPlane::from_fn(9, 8, |_, _| 0.0);
        assert!(matches!(psnr(&a, &c), Err(MetricError::SizeMismatch(..))));
    }

    #[test]
    fn psnr_is_position_blind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_plane(&mut rng, 16, 16), random_plane(&mut rng, 16, 16));
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..256).collect();
            p.reverse();
            p.swap(3, 77);
            p
        };
        let shuffle = |x: &LumaPlane| LumaPlane { data: perm.iter().map(|&i| x.data[i]).collect(), ..x.clone() };
        let (p0, p1) = (psnr(&a, &b).unwrap(), psnr(&shuffle(&a), &shuffle(&b)).unwrap());
        assert!((p0 - p1).abs() < 1e-12);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_plane(&mut rng, 32, 32);
        let noise: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [1.0, 4.0, 16.0, 32.0, 64.0] {
            let noisy =
                LumaPlane { data: base.data.iter().zip(&noise).map(|(x, n)| x + amp * n).collect(), ..base.clone() };
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn color_uses_bt601() {
        let img = RgbImage::from_pixel(2, 2, image::Rgb([100, 50, 200]));
        let p = LumaPlane::from_image(&DynamicImage::ImageRgb8(img));
        assert!((p.data[0] - (29.9 + 29.35 + 22.8)).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random_plane(&mut rng, 32, 32);
            let b = LumaPlane {
                data: a.data.iter().map(|x| (x + rng.gen_range(-40.0..40.0)).clamp(0.0, 255.0)).collect(),
                ..a.clone()
            };
            let got = ssim_with(&a, &b, Exec::Sequential).unwrap();
            assert!((got - brute_ssim(&a, &b)).abs() < 1e-9);
            assert_eq!(got, ssim_with(&a, &b, Exec::Parallel).unwrap());
        }
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_plane(&mut rng, 40, 24);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = LumaPlane { data: a.data.iter().map(|x| 255.0 - x).collect(), ..a.clone() };
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - brute_ssim(&a, &inv)).abs() < 1e-9);
        let small = LumaPlane::from_fn(10, 40, |_, _| 0.0);
        assert!(matches!(ssim(&small, &small), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn pve_basics() {
        let m = make_test_model(0);
        let v = m.template().to_vec();
        assert_eq!(pve_t_vertices(&v, &v).unwrap(), 0.0);
        let doubled: Vec<_> = v.iter().map(|p| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]]).collect();
        assert!(pve_t_vertices(&doubled, &v).unwrap() < 1e-9);
        assert!(pve_t_vertices_with(&doubled, &v, ScaleCorrection::Height).unwrap() < 1e-9);
        assert!(matches!(pve_t_vertices(&v[1..], &v), Err(MetricError::VertexCount(..))));
        let point = vec![[1.0, 2.0, 3.0]; v.len()];
        assert!(matches!(pve_t_vertices(&point, &v), Err(MetricError::DegeneratePrediction)));
    }

    #[test]
    fn pve_scale_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt: Vec<[f64; 3]> =
            (0..50).map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(0.0..1.7), rng.gen_range(-0.2..0.2)]).collect();
        let pred: Vec<[f64; 3]> =
            gt.iter().map(|p| [p[0] * 1.2 + rng.gen_range(-0.02..0.02), p[1] * 1.2 + 0.3, p[2] * 1.2]).collect();
        let got = pve_t_vertices(&pred, &gt).unwrap();
        let (p, g) = (centred(&pred), centred(&gt));
        let err = |s: f64| -> f64 {
            1000.0
                * p.iter()
                    .zip(&g)
                    .map(|(a, b)| {
                        ((s * a[0] - b[0]).powi(2) + (s * a[1] - b[1]).powi(2) + (s * a[2] - b[2]).powi(2)).sqrt()
                    })
                    .sum::<f64>()
                / p.len() as f64
        };
        // Sweep s on a grid, choosing the value with the smallest summed
        // squared distance, and report the mean distance there.
        let sse = |s: f64| -> f64 {
            p.iter()
                .zip(&g)
                .map(|(a, b)| (s * a[0] - b[0]).powi(2) + (s * a[1] - b[1]).powi(2) + (s * a[2] - b[2]).powi(2))
                .sum()
        };
        let grid: Vec<f64> = (0..20001).map(|i| 0.5 + i as f64 * 5e-5).collect();
        let s_grid = grid.iter().copied().min_by(|a, b| sse(*a).total_cmp(&sse(*b))).unwrap();
        assert!((got - err(s_grid)).abs() < 0.01, "{got} vs {}", err(s_grid));
        // Minimising the mean distance itself lands within the same tolerance.
        let best = grid.iter().map(|&s| err(s)).fold(f64::MAX, f64::min);
        assert!(got >= best - 1e-9 && got - best < 0.01, "{got} vs {best}");
        for s in [0.01, 0.5, 3.0, 1000.0] {
            let scaled: Vec<_> = pred.iter().map(|q| [s * q[0], s * q[1], s * q[2]]).collect();
            assert!((pve_t_vertices(&scaled, &gt).unwrap() - got).abs() < 1e-9);
        }
    }

    #[test]
    fn pve_on_shapes() {
        let m = make_test_model(0);
        let zero = ShapeParams::zeros(m.num_betas());
        assert_eq!(pve_t_sc(&zero, &zero, &m).unwrap(), 0.0);
        let mut e0 = zero.clone();
        e0.0[0] = 0.1;
        let got = pve_t_sc(&e0, &zero, &m).unwrap();
        let b = m.num_betas();
        let pred: Vec<[f64; 3]> = m
            .template()
            .iter()
            .enumerate()
            .map(|(v, t)| std::array::from_fn(|c| t[c] + 0.1 * m.parts().shape_dirs[(v * 3 + c) * b]))
            .collect();
        assert!((got - pve_t_vertices(&pred, m.template()).unwrap()).abs() < 1e-12);
        assert!(got > 0.0);
        let swapped = pve_t_sc(&zero, &e0, &m).unwrap();
        assert!((got - swapped).abs() > 1e-6, "{got} vs {swapped}");
    }
}
