//! Image-quality metrics and the method-comparison harness.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calib::{estimate_csm_acs, AcsWindowSpec};
use crate::complex::{normalize_unit_range, RealImage};
use crate::error::{shape_err, Error, Result};
use crate::learn::{pipeline_forward, NetParams, ReconModel};
use crate::recon::{sense_reconstruct, zero_filled_recon};
use crate::sim::AcquisitionRecord;

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 300.0;
pub const SSIM_WINDOW: usize = 7;

fn check_pair(a: &RealImage, b: &RealImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("images {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(range^2 / MSE)`, or [`PSNR_SENTINEL`] when the images agree.
pub fn psnr(x_hat: &RealImage, x: &RealImage, data_range: f64) -> Result<f64> {
    check_pair(x_hat, x)?;
    if !(data_range > 0.0) {
        return Err(Error::BadDims(format!("data range {data_range}")));
    }
    let n = x.data().len() as f64;
    let mse = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean SSIM over every fully contained 7x7 uniform window, with population
/// window statistics.
pub fn ssim(x_hat: &RealImage, x: &RealImage, data_range: f64) -> Result<f64> {
    check_pair(x_hat, x)?;
    let (h, w) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let (a, b) = (x_hat.data(), x.data());
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WINDOW {
        for c0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb) = (0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    sa += a[r * w + c];
                    sb += b[r * w + c];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let (da, db) = (a[r * w + c] - ma, b[r * w + c] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zf,
    Sense,
    Learned,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zf => "zf",
            Method::Sense => "sense",
            Method::Learned => "learned",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Test masks share the training masks' ACS size.
    MatchedMask,
    /// Test masks use a different ACS size.
    ShiftedMask,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::MatchedMask => "matched_mask",
            InputKind::ShiftedMask => "shifted_mask",
        }
    }
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub slice_id: String,
    pub method: Method,
    pub input_kind: InputKind,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_ms: f64,
}

/// Mean and population standard deviation per (method, input kind).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub input_kind: InputKind,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Tikhonov weight for the SENSE baseline.
    pub sense_reg: f64,
    /// Record wall-clock runtimes; when false `runtime_ms` is 0 so reports
    /// stay byte-reproducible.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sense_reg: 1e-4,
            timing: false,
        }
    }
}

/// Magnitude divided into `[0, 1]`; a constant image maps to all zeros.
fn unit_magnitude(img: &RealImage) -> Result<RealImage> {
    match normalize_unit_range(img) {
        Ok((n, _)) => Ok(n),
        Err(Error::ConstantImage(_)) => RealImage::new(img.height(), img.width(), vec![0.0; img.data().len()]),
        Err(e) => Err(e),
    }
}

/// PSNR and SSIM of normalized magnitudes on a unit range.
pub fn score(recon: &RealImage, truth: &RealImage) -> Result<(f64, f64)> {
    let (a, b) = (unit_magnitude(recon)?, unit_magnitude(truth)?);
    Ok((psnr(&a, &b, 1.0)?, ssim(&a, &b, 1.0)?))
}

/// Magnitude reconstruction of one slice by `method`. The SENSE baseline
/// calibrates its maps from the slice's own ACS block.
pub fn reconstruct_magnitude(
    method: Method,
    rec: &AcquisitionRecord,
    model: Option<(&ReconModel, &NetParams)>,
    opts: &EvalOptions,
) -> Result<RealImage> {
    match method {
        Method::Zf => zero_filled_recon(&rec.kspace, None),
        Method::Sense => {
            let maps = estimate_csm_acs(&rec.kspace, &rec.mask, &AcsWindowSpec::from_mask(&rec.mask))?;
            let (img, _) = sense_reconstruct(&rec.kspace, &maps, &rec.mask, opts.sense_reg)?;
            Ok(img.magnitude())
        }
        Method::Learned => {
            let (model, params) = model.ok_or(Error::MissingParams)?;
            let (img, _) = pipeline_forward(model, params, &rec.kspace, &rec.mask)?;
            Ok(img.magnitude())
        }
    }
}

fn evaluate_one(
    method: Method,
    kind: InputKind,
    rec: &AcquisitionRecord,
    model: Option<(&ReconModel, &NetParams)>,
    opts: &EvalOptions,
) -> Result<ReconReport> {
    let started = Instant::now();
    let img = reconstruct_magnitude(method, rec, model, opts)?;
    let runtime_ms = if opts.timing {
        started.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    let (psnr_db, ssim) = score(&img, &rec.truth.magnitude())?;
    Ok(ReconReport {
        slice_id: rec.slice_id.clone(),
        method,
        input_kind: kind,
        psnr_db,
        ssim,
        runtime_ms,
    })
}

/// Per-slice reports for every method on the matched test set and, when
/// given, on the same slices re-acquired with shifted masks.
pub fn evaluate_suite(
    matched: &[AcquisitionRecord],
    shifted: Option<&[AcquisitionRecord]>,
    methods: &[Method],
    model: Option<(&ReconModel, &NetParams)>,
    opts: &EvalOptions,
) -> Result<Vec<ReconReport>> {
    if methods.contains(&Method::Learned) && model.is_none() {
        return Err(Error::MissingParams);
    }
    let mut sets = vec![(InputKind::MatchedMask, matched)];
    if let Some(s) = shifted {
        sets.push((InputKind::ShiftedMask, s));
    }
    let mut out = Vec::new();
    for (kind, recs) in sets {
        for &method in methods {
            for rec in recs {
                out.push(evaluate_one(method, kind, rec, model, opts)?);
            }
        }
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups reports by (method, input kind) in order of first appearance.
pub fn summarize(reports: &[ReconReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, InputKind)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.method, r.input_kind)) {
            keys.push((r.method, r.input_kind));
        }
    }
    keys.into_iter()
        .map(|(method, input_kind)| {
            let rows: Vec<&ReconReport> = reports
                .iter()
                .filter(|r| r.method == method && r.input_kind == input_kind)
                .collect();
            let (psnr_mean, psnr_std) = mean_std(&rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>());
            let (ssim_mean, ssim_std) = mean_std(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
            SummaryRow {
                method,
                input_kind,
                count: rows.len(),
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
            }
        })
        .collect()
}

pub fn write_report_csv(reports: &[ReconReport], mut w: impl Write) -> Result<()> {
    writeln!(w, "slice_id,method,input_kind,psnr_db,ssim,runtime_ms")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.slice_id, r.method, r.input_kind, r.psnr_db, r.ssim, r.runtime_ms
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(rows: &[SummaryRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "method,input_kind,psnr_mean,psnr_std,ssim_mean,ssim_std")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method, r.input_kind, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        )?;
    }
    Ok(())
}

/// Table with `mean ± std` cells.
pub fn write_summary_table(rows: &[SummaryRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "| Method | Input Type | PSNR (dB) | SSIM |")?;
    writeln!(w, "|---|---|---|---|")?;
    for r in rows {
        writeln!(
            w,
            "| {} | {} | {:.2} ± {:.2} | {:.3} ± {:.3} |",
            r.method, r.input_kind, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        )?;
    }
    Ok(())
}

/// Matched and shifted scores of one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftPair {
    pub slice_id: String,
    pub psnr_matched: f64,
    pub psnr_shifted: f64,
    pub ssim_matched: f64,
    pub ssim_shifted: f64,
}

impl ShiftPair {
    pub fn psnr_delta(&self) -> f64 {
        self.psnr_matched - self.psnr_shifted
    }

    pub fn ssim_delta(&self) -> f64 {
        self.ssim_matched - self.ssim_shifted
    }
}

/// Scores the learned model on each slice under both mask variants.
/// `matched[i]` and `shifted[i]` must be the same slice.
pub fn acs_shift_experiment(
    matched: &[AcquisitionRecord],
    shifted: &[AcquisitionRecord],
    model: &ReconModel,
    params: &NetParams,
    opts: &EvalOptions,
) -> Result<Vec<ShiftPair>> {
    if matched.len() != shifted.len() {
        return Err(shape_err(format!(
            "{} matched vs {} shifted slices",
            matched.len(),
            shifted.len()
        )));
    }
    matched
        .iter()
        .zip(shifted)
        .map(|(a, b)| {
            if a.slice_id != b.slice_id {
                return Err(shape_err(format!("slice {} paired with {}", a.slice_id, b.slice_id)));
            }
            let m = evaluate_one(Method::Learned, InputKind::MatchedMask, a, Some((model, params)), opts)?;
            let s = evaluate_one(Method::Learned, InputKind::ShiftedMask, b, Some((model, params)), opts)?;
            Ok(ShiftPair {
                slice_id: a.slice_id.clone(),
                psnr_matched: m.psnr_db,
                psnr_shifted: s.psnr_db,
                ssim_matched: m.ssim,
                ssim_shifted: s.ssim,
            })
        })
        .collect()
}

pub fn write_shift_csv(pairs: &[ShiftPair], mut w: impl Write) -> Result<()> {
    writeln!(w, "slice_id,input_kind,psnr_db,ssim,psnr_delta,ssim_delta")?;
    for p in pairs {
        writeln!(w, "{},matched_mask,{},{},0,0", p.slice_id, p.psnr_matched, p.ssim_matched)?;
        writeln!(
            w,
            "{},shifted_mask,{},{},{},{}",
            p.slice_id,
            p.psnr_shifted,
            p.ssim_shifted,
            p.psnr_delta(),
            p.ssim_delta()
        )?;
    }
    Ok(())
}
