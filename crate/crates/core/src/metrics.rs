//! PSNR, multiscale SSIM, error maps, the held-out-slice evaluation protocol
//! and paired t-tests.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume::{degrade, upsampled_depth, Volume3D};

fn same_dims(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn all_slices(d: usize) -> Vec<usize> {
    (0..d).collect()
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Volume3D, b: &Volume3D, max_val: f64) -> Result<f64> {
    same_dims(a, b)?;
    Ok(psnr_over(a, b, &all_slices(a.depth()), max_val))
}

fn psnr_over(a: &Volume3D, b: &Volume3D, zs: &[usize], max_val: f64) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for &z in zs {
        let (sa, sb) = (a.data().slice(s![z, .., ..]), b.data().slice(s![z, .., ..]));
        Zip::from(&sa)
            .and(&sb)
            .for_each(|x, y| se += (x - y) * (x - y));
        n += sa.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Voxelwise `|a - b|`.
pub fn error_map(a: &Volume3D, b: &Volume3D) -> Result<Volume3D> {
    same_dims(a, b)?;
    let mut data = a.data() - b.data();
    data.mapv_inplace(f64::abs);
    a.derived(data, a.spacing())
        .map(|v| v.with_meta("method", "error_map"))
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub max_val: f64,
    pub weights: Vec<f64>,
    /// Number of scales; `None` uses as many as the image allows.
    pub levels: Option<usize>,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            max_val: 1.0,
            weights: MS_SSIM_WEIGHTS.to_vec(),
            levels: None,
        }
    }
}

impl MsSsimConfig {
    fn max_levels(&self, h: usize, w: usize) -> usize {
        let mut m = 0;
        while m < self.weights.len() && (h >> m) >= self.window && (w >> m) >= self.window {
            m += 1;
        }
        m
    }

    /// Scale weights actually used for an `h x w` image. When fewer scales
    /// fit than configured weights, the leading weights are renormalized.
    pub fn weights_for(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        if self.window == 0 || self.sigma <= 0.0 || self.weights.is_empty() {
            return Err(Error::InvalidArgument(
                "ms-ssim window, sigma and weights must be positive".into(),
            ));
        }
        let fit = self.max_levels(h, w);
        let m = match self.levels {
            Some(m) if m == 0 || m > self.weights.len() => {
                return Err(Error::InvalidArgument(format!(
                    "ms-ssim levels {m} outside 1..={}",
                    self.weights.len()
                )))
            }
            Some(m) if m > fit => {
                return Err(Error::Shape(format!(
                    "{h}x{w} image too small for {m} ms-ssim scales"
                )))
            }
            Some(m) => m,
            None if fit == 0 => {
                return Err(Error::Shape(format!(
                    "{h}x{w} image smaller than the {} px window",
                    self.window
                )))
            }
            None => fit,
        };
        if m == self.weights.len() {
            return Ok(self.weights.clone());
        }
        let total: f64 = self.weights[..m].iter().sum();
        Ok(self.weights[..m].iter().map(|w| w / total).collect())
    }

    fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        g.into_iter().map(|v| v / total).collect()
    }
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|i| g[i] * img[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| g[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        0.25 * (img[[2 * y, 2 * x]]
            + img[[2 * y + 1, 2 * x]]
            + img[[2 * y, 2 * x + 1]]
            + img[[2 * y + 1, 2 * x + 1]])
    })
}

/// Mean SSIM map and mean contrast-structure map at one scale.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, g: &[f64], cfg: &MsSsimConfig) -> (f64, f64) {
    let c1 = (cfg.k1 * cfg.max_val).powi(2);
    let c2 = (cfg.k2 * cfg.max_val).powi(2);
    let mu_a = filter_valid(a, g);
    let mu_b = filter_valid(b, g);
    let aa = filter_valid(&(a * a), g);
    let bb = filter_valid(&(b * b), g);
    let ab = filter_valid(&(a * b), g);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim += l * c;
        cs += c;
    }
    let n = mu_a.len() as f64;
    (ssim / n, cs / n)
}

/// Multiscale SSIM of two 2D images.
pub fn ms_ssim_2d(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &MsSsimConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    let weights = cfg.weights_for(h, w)?;
    let g = cfg.kernel();
    let (mut a, mut b) = (a.to_owned(), b.to_owned());
    let mut value = 1.0;
    for (j, wj) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&a, &b, &g, cfg);
        let term = if j + 1 == weights.len() { ssim } else { cs };
        value *= term.max(0.0).powf(*wj);
        if j + 1 < weights.len() {
            a = downsample2(&a);
            b = downsample2(&b);
        }
    }
    Ok(value)
}

/// Multiscale SSIM averaged over all z slices.
pub fn ms_ssim(a: &Volume3D, b: &Volume3D, cfg: &MsSsimConfig) -> Result<f64> {
    same_dims(a, b)?;
    ms_ssim_over(a, b, &all_slices(a.depth()), cfg)
}

fn ms_ssim_over(a: &Volume3D, b: &Volume3D, zs: &[usize], cfg: &MsSsimConfig) -> Result<f64> {
    let mut total = 0.0;
    for &z in zs {
        total += ms_ssim_2d(
            a.data().slice(s![z, .., ..]),
            b.data().slice(s![z, .., ..]),
            cfg,
        )?;
    }
    Ok(total / zs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegion {
    /// Only slices that were dropped by the degradation.
    #[default]
    Unobserved,
    Whole,
}

/// Slice indices of an HR volume that get scored.
pub fn scored_slices(depth: usize, k: usize, region: EvalRegion) -> Vec<usize> {
    match region {
        EvalRegion::Whole => all_slices(depth),
        EvalRegion::Unobserved => (0..depth).filter(|z| z % k != 0).collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub region: EvalRegion,
    pub ssim: MsSsimConfig,
}

mod inf_as_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!(
                "expected number or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub id: String,
    #[serde(with = "inf_as_str")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Mean over finite per-volume PSNRs; `inf` when every entry is infinite.
    #[serde(with = "inf_as_str")]
    pub psnr_mean: f64,
    pub psnr_sd: f64,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    /// Per-volume PSNRs left out of the mean because they were infinite.
    pub psnr_excluded: usize,
    pub per_volume: Vec<VolumeScore>,
}

/// Arithmetic mean and sample standard deviation (0 for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_scores(method: impl Into<String>, per_volume: Vec<VolumeScore>) -> Result<Self> {
        let method = method.into();
        if per_volume.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no volumes scored for {method}"
            )));
        }
        let finite: Vec<f64> = per_volume
            .iter()
            .map(|s| s.psnr)
            .filter(|p| p.is_finite())
            .collect();
        let psnr_excluded = per_volume.len() - finite.len();
        if psnr_excluded > 0 {
            log::warn!(
                "{method}: {psnr_excluded} volume(s) with infinite PSNR excluded from the mean"
            );
        }
        let (psnr_mean, psnr_sd) = if finite.is_empty() {
            (f64::INFINITY, 0.0)
        } else {
            mean_sd(&finite)
        };
        let ssims: Vec<f64> = per_volume.iter().map(|s| s.ssim).collect();
        let (ssim_mean, ssim_sd) = mean_sd(&ssims);
        Ok(EvalReport {
            method,
            psnr_mean,
            psnr_sd,
            ssim_mean,
            ssim_sd,
            psnr_excluded,
            per_volume,
        })
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Aligned text table, one row per report, in the given order.
pub fn format_table(reports: &[(String, &EvalReport)]) -> String {
    let label_w = reports
        .iter()
        .map(|(l, _)| l.len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$}  {:>9}  {:>7}  {:>9}  {:>7}",
        "Method", "PSNR Mean", "PSNR SD", "SSIM Mean", "SSIM SD"
    );
    for (label, r) in reports {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>9}  {:>7}  {:>9}  {:>7}",
            label,
            fmt_num(r.psnr_mean),
            fmt_num(r.psnr_sd),
            fmt_num(r.ssim_mean),
            fmt_num(r.ssim_sd)
        );
    }
    out
}

/// Scores one prediction against its ground truth.
pub fn score_volume(
    id: &str,
    gt: &Volume3D,
    pred: &Volume3D,
    k: usize,
    opts: &EvalOptions,
) -> Result<VolumeScore> {
    same_dims(gt, pred)?;
    let zs = scored_slices(gt.depth(), k, opts.region);
    if zs.is_empty() {
        return Err(Error::InvalidArgument(format!("{id}: no slices to score")));
    }
    Ok(VolumeScore {
        id: id.to_string(),
        psnr: psnr_over(gt, pred, &zs, 1.0),
        ssim: ms_ssim_over(gt, pred, &zs, &opts.ssim)?,
    })
}

/// Degrades every ground-truth volume by `k`, runs `method` on the result
/// and scores the output against the ground truth.
pub fn evaluate_protocol<F>(
    method_name: &str,
    hr_gt: &[(String, Volume3D)],
    method: F,
    k: usize,
    opts: &EvalOptions,
) -> Result<EvalReport>
where
    F: Fn(&str, &Volume3D) -> Result<Volume3D> + Sync,
{
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let scores = hr_gt
        .par_iter()
        .map(|(id, gt)| {
            if (gt.depth() - 1) % k != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{id}: depth {} - 1 not divisible by K={k}",
                    gt.depth()
                )));
            }
            let lr = degrade(gt, k, 0)?;
            let pred = method(id, &lr)?;
            if pred.depth() != upsampled_depth(lr.depth(), k) {
                return Err(Error::Shape(format!(
                    "{id}: {method_name} returned depth {}",
                    pred.depth()
                )));
            }
            score_volume(id, gt, &pred, k, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(method_name, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on `xs - ys`.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTest> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "paired samples of length {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_sd(&diffs);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let n = diffs.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        mean_diff: mean,
    })
}
