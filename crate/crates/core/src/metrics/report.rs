//! Batch evaluation over directories of predicted and ground-truth images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use super::{psnr, pve_t_sc, ssim_with, LumaPlane, MetricError, Result};
use crate::body::{BodyModel, ShapeParams};
use crate::Exec;

/// Shape coefficients fitted to both images of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub pred_beta: ShapeParams,
    pub gt_beta: ShapeParams,
}

/// One pair to score.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub name: String,
    pub pred: DynamicImage,
    pub gt: DynamicImage,
    pub fit: PairFit,
}

/// Serializes infinite values as `null` and reads `null` back as +∞.
mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub ssim: f64,
    /// `null` in JSON when the images are identical.
    #[serde(with = "infinite_as_null")]
    pub psnr_db: f64,
    pub pve_t_sc_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

/// What a `null` PSNR means in a serialized report.
pub const PSNR_NULL_MEANING: &str = "infinite: images are identical";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_ssim: f64,
    /// Infinite (serialized `null`) as soon as any row is infinite.
    #[serde(with = "infinite_as_null")]
    pub mean_psnr_db: f64,
    pub mean_pve_t_sc_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lpips: Option<f64>,
    pub psnr_null_means: String,
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len();
        let mean_lpips = if n > 0 && rows.iter().all(|r| r.lpips.is_some()) {
            Some(mean(rows.iter().filter_map(|r| r.lpips), n))
        } else {
            None
        };
        EvalReport {
            count: n,
            mean_ssim: mean(rows.iter().map(|r| r.ssim), n),
            mean_psnr_db: mean(rows.iter().map(|r| r.psnr_db), n),
            mean_pve_t_sc_mm: mean(rows.iter().map(|r| r.pve_t_sc_mm), n),
            mean_lpips,
            psnr_null_means: PSNR_NULL_MEANING.to_string(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned columns: one row per pair, then the means.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).chain([4]).max().unwrap_or(4);
        let num = |v: f64, prec: usize| if v.is_infinite() { "inf".to_string() } else { format!("{v:.prec$}") };
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ =
            writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}  {:>10}", "pair", "SSIM↑", "PSNR↑", "LPIPS↓", "PVE-T-SC↓");
        let mut line = |name: &str, s: f64, p: f64, l: Option<f64>, v: f64| {
            let _ =
                writeln!(out, "{name:<width$}  {:>8}  {:>8}  {:>8}  {:>10}", num(s, 4), num(p, 2), opt(l), num(v, 2));
        };
        for r in &self.rows {
            line(&r.name, r.ssim, r.psnr_db, r.lpips, r.pve_t_sc_mm);
        }
        line("mean", self.mean_ssim, self.mean_psnr_db, self.mean_lpips, self.mean_pve_t_sc_mm);
        out
    }
}

/// Scores every pair; pairs run under `exec` and rows keep input order.
pub fn evaluate_pairs(
    inputs: &[PairInput],
    model: &BodyModel,
    lpips: Option<&BTreeMap<String, f64>>,
    exec: Exec,
) -> Result<EvalReport> {
    let rows: Result<Vec<EvalRow>> = exec
        .map_indices(inputs.len(), |i| {
            let p = &inputs[i];
            let (a, b) = (LumaPlane::from_image(&p.pred), LumaPlane::from_image(&p.gt));
            let lp = match lpips {
                None => None,
                Some(m) => {
                    Some(*m.get(&p.name).ok_or_else(|| MetricError::Missing(format!("LPIPS score for {}", p.name)))?)
                }
            };
            Ok(EvalRow {
                name: p.name.clone(),
                ssim: ssim_with(&a, &b, Exec::Sequential)?,
                psnr_db: psnr(&a, &b)?,
                pve_t_sc_mm: pve_t_sc(&p.fit.pred_beta, &p.fit.gt_beta, model)?,
                lpips: lp,
            })
        })
        .into_iter()
        .collect();
    Ok(EvalReport::from_rows(rows?))
}

fn read_err(path: &Path, e: impl ToString) -> MetricError {
    MetricError::Read { path: path.to_path_buf(), message: e.to_string() }
}

fn image_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| read_err(dir, e))? {
        let entry = entry.map_err(|e| read_err(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if entry.path().is_file() && (lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// LPIPS scores as a JSON object mapping image filename to score.
pub fn read_lpips(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| read_err(path, e))
}

/// Scores `pred_dir/<name>` against `gt_dir/<name>` for every image in
/// `gt_dir`, taking shape coefficients from `fits_dir/<stem>.json`. Both
/// directories must hold the same filenames. Rows are ordered by filename.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    fits_dir: &Path,
    model: &BodyModel,
    lpips: Option<&Path>,
    exec: Exec,
) -> Result<EvalReport> {
    let gt_names = image_names(gt_dir)?;
    let pred_names = image_names(pred_dir)?;
    for n in &gt_names {
        if pred_names.binary_search(n).is_err() {
            return Err(MetricError::Missing(format!("prediction {}", pred_dir.join(n).display())));
        }
    }
    for n in &pred_names {
        if gt_names.binary_search(n).is_err() {
            return Err(MetricError::Missing(format!("ground truth {}", gt_dir.join(n).display())));
        }
    }
    let mut inputs = Vec::with_capacity(gt_names.len());
    for name in gt_names {
        let open = |p: &Path| image::open(p).map_err(|e| read_err(p, e));
        let stem = Path::new(&name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let fit_path = fits_dir.join(format!("{stem}.json"));
        if !fit_path.exists() {
            return Err(MetricError::Missing(format!("fit {}", fit_path.display())));
        }
        let fit_text = fs::read_to_string(&fit_path).map_err(|e| read_err(&fit_path, e))?;
        let fit: PairFit = serde_json::from_str(&fit_text).map_err(|e| read_err(&fit_path, e))?;
        inputs.push(PairInput { pred: open(&pred_dir.join(&name))?, gt: open(&gt_dir.join(&name))?, fit, name });
    }
    let scores = lpips.map(read_lpips).transpose()?;
    evaluate_pairs(&inputs, model, scores.as_ref(), exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::make_test_model;
    use image::{GrayImage, Luma};

    fn gray(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> DynamicImage {
        DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])))
    }

    fn write_fixture(dir: &Path, names: &[&str], shift: u8) {
        for sub in ["pred", "gt", "fits"] {
            fs::create_dir_all(dir.join(sub)).unwrap();
        }
        for (i, n) in names.iter().enumerate() {
            let i8 = i as u8;
            gray(24, 20, |x, y| ((x * 9 + y * 5) as u8).wrapping_add(i8)).save(dir.join("gt").join(n)).unwrap();
            gray(24, 20, |x, y| ((x * 9 + y * 5) as u8).wrapping_add(i8).wrapping_add(shift * ((x + y) % 3) as u8))
                .save(dir.join("pred").join(n))
                .unwrap();
            let stem = n.trim_end_matches(".png");
            let fit = PairFit {
                pred_beta: ShapeParams(vec![0.1 * i as f64, 0.0, 0.05, 0.0]),
                gt_beta: ShapeParams(vec![0.0, 0.02, 0.0, 0.0]),
            };
            fs::write(dir.join("fits").join(format!("{stem}.json")), serde_json::to_string(&fit).unwrap()).unwrap();
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &["b.png", "a.png"], 0);
        let model = make_test_model(0);
        let fits = dir.path().join("fits");
        for n in ["a", "b"] {
            let f = PairFit {
                pred_beta: ShapeParams(vec![0.3, 0.0, 0.0, 0.1]),
                gt_beta: ShapeParams(vec![0.3, 0.0, 0.0, 0.1]),
            };
            fs::write(fits.join(format!("{n}.json")), serde_json::to_string(&f).unwrap()).unwrap();
        }
        let gt = dir.path().join("gt");
        let r = evaluate(&gt, &gt, &fits, &model, None, Exec::default()).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["a.png", "b.png"]);
        for row in &r.rows {
            assert_eq!((row.ssim, row.psnr_db, row.pve_t_sc_mm), (1.0, f64::INFINITY, 0.0));
        }
        let json = r.to_json();
        assert!(json.contains("\"psnr_db\": null") && json.contains("\"mean_psnr_db\": null"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("inf"));
    }

    #[test]
    fn means_are_row_averages() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &["p1.png", "p2.png", "p3.png"], 7);
        let lp = dir.path().join("lpips.json");
        fs::write(&lp, r#"{"p1.png": 0.1, "p2.png": 0.25, "p3.png": 0.4}"#).unwrap();
        let model = make_test_model(0);
        let d = dir.path();
        let r = evaluate(&d.join("pred"), &d.join("gt"), &d.join("fits"), &model, Some(&lp), Exec::Sequential).unwrap();
        assert_eq!(r.count, 3);
        let avg = |f: fn(&EvalRow) -> f64| r.rows.iter().map(f).sum::<f64>() / 3.0;
        assert!((r.mean_ssim - avg(|x| x.ssim)).abs() < 1e-15);
        assert!((r.mean_psnr_db - avg(|x| x.psnr_db)).abs() < 1e-12);
        assert!((r.mean_pve_t_sc_mm - avg(|x| x.pve_t_sc_mm)).abs() < 1e-12);
        assert!((r.mean_lpips.unwrap() - 0.25).abs() < 1e-15);
        assert!(r.rows.iter().all(|x| x.psnr_db.is_finite() && x.ssim < 1.0));
        let par = evaluate(&d.join("pred"), &d.join("gt"), &d.join("fits"), &model, Some(&lp), Exec::Parallel).unwrap();
        assert_eq!(par, r);
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &["x.png", "y.png"], 3);
        let d = dir.path();
        fs::remove_file(d.join("pred/y.png")).unwrap();
        let model = make_test_model(0);
        let err =
            evaluate(&d.join("pred"), &d.join("gt"), &d.join("fits"), &model, None, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("y.png"), "{err}");
        fs::copy(d.join("gt/y.png"), d.join("pred/y.png")).unwrap();
        fs::remove_file(d.join("fits/x.json")).unwrap();
        let err =
            evaluate(&d.join("pred"), &d.join("gt"), &d.join("fits"), &model, None, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("x.json"), "{err}");
    }
}
