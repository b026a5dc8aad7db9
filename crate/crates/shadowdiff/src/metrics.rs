//! Image quality metrics: PSNR and windowed SSIM, whole-image and
//! decomposed into shadow / non-shadow regions by a binarized soft mask.

use crate::error::{Error, Result};
use crate::imageio::{load_png, load_png_gray};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::path::Path;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.mean_sq_diff(b))
}

/// `10·log10(peak²/MSE)`; identical inputs report the +∞ sentinel.
pub fn psnr_peak(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    psnr_peak(a, b, 1.0)
}

/// Channel-mean grayscale `[H,W]` as f64.
pub fn to_gray(img: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.dims3()?;
    let hw = h * w;
    let mut g = vec![0.0; hw];
    for ch in 0..c {
        for i in 0..hw {
            g[i] += img[ch * hw + i] as f64;
        }
    }
    for v in &mut g {
        *v /= c as f64;
    }
    Ok((g, h, w))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut win = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut sum = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            win.push(v);
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }
    win
}

/// Per-window SSIM values at every valid (fully interior) window center.
/// Returns the map plus the center coordinates of each entry.
pub fn ssim_map(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    check_shapes(a, b)?;
    let (ga, h, w) = to_gray(a)?;
    let (gb, _, _) = to_gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut vals = Vec::new();
    let mut centers = Vec::new();
    for cy in r..h - r {
        for cx in r..w - r {
            let (mut mu_a, mut mu_b) = (0.0, 0.0);
            let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
            let mut k = 0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let y = cy + dy - r;
                    let x = cx + dx - r;
                    let (va, vb) = (ga[y * w + x], gb[y * w + x]);
                    let wv = win[k];
                    k += 1;
                    mu_a += wv * va;
                    mu_b += wv * vb;
                    aa += wv * va * va;
                    bb += wv * vb * vb;
                    ab += wv * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            vals.push(v);
            centers.push((cy, cx));
        }
    }
    Ok((vals, centers))
}

/// Mean SSIM over valid window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (vals, _) = ssim_map(a, b)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionMetric {
    Psnr,
    Ssim,
}

fn binarize(mask: &Tensor<f32>) -> Result<(Vec<bool>, usize, usize)> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::InvalidArgument("mask must be single-channel".into()));
    }
    Ok(((0..h * w).map(|i| mask[i] >= 0.5).collect(), h, w))
}

/// MSE over the pixels (all channels) selected by `sel`; `None` if empty.
pub fn masked_mse(a: &Tensor<f32>, b: &Tensor<f32>, sel: &[bool], want: bool) -> Result<Option<f64>> {
    let (c, h, w) = a.dims3()?;
    let hw = h * w;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..hw {
        if sel[i] == want {
            for ch in 0..c {
                let d = a[ch * hw + i] as f64 - b[ch * hw + i] as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(sum / n as f64))
}

/// Metric restricted to shadow (binarized mask = 1) and non-shadow regions.
/// PSNR uses the pixel subsets directly; SSIM averages the full-image window
/// map over window centers falling in each region. An empty region yields
/// `None`.
pub fn region_metric(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    mask: &Tensor<f32>,
    metric: RegionMetric,
) -> Result<(Option<f64>, Option<f64>)> {
    check_shapes(a, b)?;
    let (sel, h, w) = binarize(mask)?;
    let (_, ih, iw) = a.dims3()?;
    if (ih, iw) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {h}x{w} vs image {ih}x{iw}"
        )));
    }
    match metric {
        RegionMetric::Psnr => {
            let to_psnr = |m: Option<f64>| {
                m.map(|m| {
                    if m == 0.0 {
                        f64::INFINITY
                    } else {
                        10.0 * (1.0 / m).log10()
                    }
                })
            };
            Ok((
                to_psnr(masked_mse(a, b, &sel, true)?),
                to_psnr(masked_mse(a, b, &sel, false)?),
            ))
        }
        RegionMetric::Ssim => {
            let (vals, centers) = ssim_map(a, b)?;
            let mut acc = [(0.0, 0usize); 2];
            for (v, (cy, cx)) in vals.iter().zip(centers.iter()) {
                let idx = if sel[cy * w + cx] { 0 } else { 1 };
                acc[idx].0 += v;
                acc[idx].1 += 1;
            }
            let fin = |(s, n): (f64, usize)| if n == 0 { None } else { Some(s / n as f64) };
            Ok((fin(acc[0]), fin(acc[1])))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageRow {
    pub file: String,
    pub psnr: f64,
    pub psnr_s: Option<f64>,
    pub psnr_ns: Option<f64>,
    pub ssim: f64,
    pub ssim_s: Option<f64>,
    pub ssim_ns: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub psnr: f64,
    pub psnr_s: Option<f64>,
    pub psnr_ns: Option<f64>,
    pub ssim: f64,
    pub ssim_s: Option<f64>,
    pub ssim_ns: Option<f64>,
    pub n_images: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn json_num(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        serde_json::Value::String("inf".into())
    } else {
        serde_json::json!(v)
    }
}

fn json_opt(v: Option<f64>) -> serde_json::Value {
    match v {
        None => serde_json::Value::Null,
        Some(x) => json_num(x),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "psnr": json_num(self.psnr),
            "psnr_s": json_opt(self.psnr_s),
            "psnr_ns": json_opt(self.psnr_ns),
            "ssim": json_num(self.ssim),
            "ssim_s": json_opt(self.ssim_s),
            "ssim_ns": json_opt(self.ssim_ns),
            "n_images": self.n_images,
        })
    }
}

pub fn rows_to_csv(rows: &[ImageRow]) -> String {
    let mut s = String::from("file,psnr,psnr_s,psnr_ns,ssim,ssim_s,ssim_ns\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.file,
            fmt_opt(Some(r.psnr)),
            fmt_opt(r.psnr_s),
            fmt_opt(r.psnr_ns),
            fmt_opt(Some(r.ssim)),
            fmt_opt(r.ssim_s),
            fmt_opt(r.ssim_ns),
        ));
    }
    s
}

pub fn evaluate_one(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    mask: &Tensor<f32>,
    file: &str,
) -> Result<ImageRow> {
    let (ps, pns) = region_metric(pred, gt, mask, RegionMetric::Psnr)?;
    let (ss, sns) = region_metric(pred, gt, mask, RegionMetric::Ssim)?;
    Ok(ImageRow {
        file: file.to_string(),
        psnr: psnr(pred, gt)?,
        psnr_s: ps,
        psnr_ns: pns,
        ssim: ssim(pred, gt)?,
        ssim_s: ss,
        ssim_ns: sns,
    })
}

/// Arithmetic means over images; region aggregates cover only the images
/// where the region exists.
pub fn aggregate(rows: &[ImageRow]) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Data("no rows to aggregate".into()));
    }
    let mean = |f: &dyn Fn(&ImageRow) -> f64| {
        rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
    };
    let mean_opt = |f: &dyn Fn(&ImageRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Ok(EvalReport {
        psnr: mean(&|r| r.psnr),
        psnr_s: mean_opt(&|r| r.psnr_s),
        psnr_ns: mean_opt(&|r| r.psnr_ns),
        ssim: mean(&|r| r.ssim),
        ssim_s: mean_opt(&|r| r.ssim_s),
        ssim_ns: mean_opt(&|r| r.ssim_ns),
        n_images: rows.len(),
    })
}

/// Evaluate every PNG in `pred_dir` against same-named files in `gt_dir`
/// and `mask_dir`; rows come back in sorted filename order.
pub fn evaluate_dir(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: &Path,
) -> Result<(Vec<ImageRow>, EvalReport)> {
    let mut files: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no PNG files in {}",
            pred_dir.display()
        )));
    }
    let rows: Vec<ImageRow> = files
        .par_iter()
        .map(|name| {
            let pred = load_png(&pred_dir.join(name))?;
            let gt = load_png(&gt_dir.join(name))?;
            // dataset triplets name the mask `<stem>_mask.png` next to the
            // `<stem>_sf.png` ground truth; fall back to the same name
            let mask_name = name
                .strip_suffix("_sf.png")
                .map(|stem| format!("{stem}_mask.png"))
                .filter(|m| mask_dir.join(m).is_file())
                .unwrap_or_else(|| name.clone());
            let mask = load_png_gray(&mask_dir.join(mask_name))?;
            evaluate_one(&pred, &gt, &mask, name)
        })
        .collect::<Result<_>>()?;
    let report = aggregate(&rows)?;
    Ok((rows, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_sentinel_and_closed_forms() {
        let a = Tensor::<f32>::full(&[3, 4, 4], 0.5);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        // constant difference 16/255 against peak 1
        let b = a.map(|v| v + 16.0 / 255.0);
        let expected = 20.0 * (255.0f64 / 16.0).log10(); // = 24.0483...
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-4);
        assert!((expected - 24.03).abs() < 0.05);
        // doubling the error costs 20*log10(2) dB
        let c = a.map(|v| v + 32.0 / 255.0);
        let shift = psnr(&a, &b).unwrap() - psnr(&a, &c).unwrap();
        assert!((shift - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn(&mut rng, &[3, 16, 16]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
        let b = Tensor::<f32>::randn(&mut rng, &[3, 16, 16]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_is_one_and_constants_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::randn(&mut rng, &[1, 16, 16]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (c1v, c2v) = (0.3f64, 0.7f64);
        let x = Tensor::<f32>::full(&[1, 12, 12], c1v as f32);
        let y = Tensor::<f32>::full(&[1, 12, 12], c2v as f32);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn ssim_checkerboard_inversion_is_negative() {
        let n = 16;
        let mut data = vec![0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                data[y * n + x] = ((x + y) % 2) as f32;
            }
        }
        let a = Tensor::new(&[1, n, n], data).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    /// Independent re-derivation: loop over windows with explicit statistics.
    fn ssim_bruteforce(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let (_, h, w) = a.dims3().unwrap();
        let hw = h * w;
        let gray = |img: &Tensor<f32>, y: usize, x: usize| {
            (img[y * w + x] as f64 + img[hw + y * w + x] as f64 + img[2 * hw + y * w + x] as f64)
                / 3.0
        };
        let r = SSIM_WINDOW / 2;
        let sigma = SSIM_SIGMA;
        let mut total = 0.0;
        let mut count = 0;
        for cy in r..h - r {
            for cx in r..w - r {
                let mut wsum = 0.0;
                let mut stats = [0.0f64; 5];
                for dy in -(r as isize)..=(r as isize) {
                    for dx in -(r as isize)..=(r as isize) {
                        let g = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                        let y = (cy as isize + dy) as usize;
                        let x = (cx as isize + dx) as usize;
                        let (va, vb) = (gray(a, y, x), gray(b, y, x));
                        wsum += g;
                        stats[0] += g * va;
                        stats[1] += g * vb;
                        stats[2] += g * va * va;
                        stats[3] += g * vb * vb;
                        stats[4] += g * va * vb;
                    }
                }
                for s in &mut stats {
                    *s /= wsum;
                }
                let (mu_a, mu_b) = (stats[0], stats[1]);
                let va = stats[2] - mu_a * mu_a;
                let vb = stats[3] - mu_b * mu_b;
                let cov = stats[4] - mu_a * mu_b;
                let c1 = SSIM_K1 * SSIM_K1;
                let c2 = SSIM_K2 * SSIM_K2;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = Tensor::<f32>::randn(&mut rng, &[3, 16, 16])
                .map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
            let b = Tensor::<f32>::randn(&mut rng, &[3, 16, 16])
                .map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_bruteforce(&a, &b);
            assert!((fast - slow).abs() <= 1e-10, "{fast} vs {slow}");
        }
    }

    #[test]
    fn whole_mse_is_area_weighted_region_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f32>::randn(&mut rng, &[3, 8, 8]);
        let b = Tensor::<f32>::randn(&mut rng, &[3, 8, 8]);
        let mask = Tensor::new(
            &[1, 8, 8],
            (0..64).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let (sel, _, _) = binarize(&mask).unwrap();
        let ms = masked_mse(&a, &b, &sel, true).unwrap().unwrap();
        let mns = masked_mse(&a, &b, &sel, false).unwrap().unwrap();
        let n_s = 20.0 * 3.0;
        let n_ns = 44.0 * 3.0;
        let combined = (n_s * ms + n_ns * mns) / (n_s + n_ns);
        let whole = mse(&a, &b).unwrap();
        assert!((combined - whole).abs() < 1e-12);
    }

    #[test]
    fn empty_region_is_absent() {
        let a = Tensor::<f32>::full(&[3, 16, 16], 0.4);
        let b = Tensor::<f32>::full(&[3, 16, 16], 0.6);
        let ones = Tensor::<f32>::full(&[1, 16, 16], 1.0);
        let (s, ns) = region_metric(&a, &b, &ones, RegionMetric::Psnr).unwrap();
        assert!(s.is_some() && ns.is_none());
        let (s, ns) = region_metric(&a, &b, &ones, RegionMetric::Ssim).unwrap();
        assert!(s.is_some() && ns.is_none());
    }

    #[test]
    fn untouched_region_reports_sentinel() {
        // restoration identical outside the mask: PSNR-NS is the sentinel
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = Tensor::<f32>::randn(&mut rng, &[3, 16, 16]).map(|v| (v * 0.2 + 0.5).clamp(0.0, 1.0));
        let mask = Tensor::new(
            &[1, 16, 16],
            (0..256).map(|i| if i < 60 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let hw = 256;
        let mut pred = gt.clone();
        for ch in 0..3 {
            for i in 0..hw {
                if mask[i] >= 0.5 {
                    pred[ch * hw + i] *= 0.5;
                }
            }
        }
        let (s, ns) = region_metric(&pred, &gt, &mask, RegionMetric::Psnr).unwrap();
        assert!(s.unwrap().is_finite());
        assert!(ns.unwrap().is_infinite());
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let rows = vec![ImageRow {
            file: "x.png".into(),
            psnr: f64::INFINITY,
            psnr_s: None,
            psnr_ns: Some(30.0),
            ssim: 1.0,
            ssim_s: Some(1.0),
            ssim_ns: None,
        }];
        let csv = rows_to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "file,psnr,psnr_s,psnr_ns,ssim,ssim_s,ssim_ns"
        );
        assert_eq!(lines.next().unwrap(), "x.png,inf,,30.000000,1.000000,1.000000,");
    }
}
