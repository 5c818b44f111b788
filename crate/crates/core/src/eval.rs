//! Rate-distortion sweeps over the continuous rate knob `q` and the
//! statistics used to compare curves.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gain::RateSelector;
use crate::image::Image;
use crate::metrics::{ms_ssim, ms_ssim_scales, psnr};
use crate::model::Model;
use crate::quant::Quantizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RdPoint {
    pub q: f64,
    pub s: usize,
    pub l: f64,
    /// Payload bits over pixel count, averaged over the images.
    pub bpp: f64,
    /// Mean PSNR; infinite only if every image was reconstructed exactly.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr_db: f64,
    /// Mean MS-SSIM; `None` when an image is below the one-scale minimum.
    pub ms_ssim: Option<f64>,
    /// Mean squared error on the 8-bit scale.
    pub mse: f64,
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn fmt_real(v: f64) -> String {
    match v {
        f64::INFINITY => "inf".into(),
        f64::NEG_INFINITY => "-inf".into(),
        _ => format!("{v}"),
    }
}

pub fn to_csv(points: &[RdPoint]) -> String {
    let mut out = String::from("q,s,l,bpp,psnr_db,ms_ssim\n");
    for p in points {
        let ms = p.ms_ssim.map(fmt_real).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{ms}", p.q, p.s, p.l, p.bpp, fmt_real(p.psnr_db));
    }
    out
}

pub fn to_json(points: &[RdPoint]) -> String {
    serde_json::to_string_pretty(points).expect("points serialize")
}

/// `0, step, 2·step, …, n−1`, each value rounded to 1e-9 so that grid
/// points land exactly on the integers.
pub fn q_grid(vectors: usize, step: f64) -> Result<Vec<f64>> {
    if vectors == 0 || !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad q grid: n={vectors}, step={step}")));
    }
    let max = (vectors - 1) as f64;
    let count = (max / step + 1e-9).floor() as usize;
    let mut q: Vec<f64> = (0..=count).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).collect();
    if *q.last().unwrap() < max {
        q.push(max);
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub quantizer: Quantizer,
    /// Worker threads; 1 runs inline.
    pub jobs: usize,
    /// Permit `q` outside `[0, n−1]`.
    pub extrapolate: bool,
}

struct Sample {
    bpp: f64,
    psnr: f64,
    mse: f64,
    ms_ssim: Option<f64>,
}

fn code_one(model: &Model, image: &Image, sel: RateSelector, quantizer: Quantizer) -> Result<Sample> {
    let enc = model.encode_image(image, sel, quantizer)?;
    let dec = model.decode(&enc.bitstream)?;
    let ms = (ms_ssim_scales(image.width(), image.height()) > 0)
        .then(|| ms_ssim(image, &dec.image))
        .transpose()?;
    Ok(Sample {
        bpp: enc.bpp,
        psnr: psnr(image, &dec.image)?,
        mse: crate::metrics::mse(image, &dec.image)?,
        ms_ssim: ms,
    })
}

/// Encodes and decodes every image at every `q`, averages the metrics per
/// `q`, and returns the points sorted by bpp.
pub fn rd_sweep(model: &Model, images: &[Image], qs: &[f64], opts: SweepOptions) -> Result<Vec<RdPoint>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no evaluation images".into()));
    }
    let n = model.vectors();
    let selectors: Vec<RateSelector> = qs
        .iter()
        .map(|&q| RateSelector::from_q(q, n, opts.extrapolate))
        .collect::<Result<_>>()?;
    let tasks: Vec<(usize, usize)> = (0..qs.len())
        .flat_map(|qi| (0..images.len()).map(move |ii| (qi, ii)))
        .collect();
    let run = |&(qi, ii): &(usize, usize)| code_one(model, &images[ii], selectors[qi], opts.quantizer);
    let results: Vec<Result<Sample>> = if opts.jobs <= 1 {
        tasks.iter().map(run).collect()
    } else {
        let chunk = tasks.len().div_ceil(opts.jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk.max(1))
                .map(|c| scope.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };
    let mut results = results.into_iter();
    let mut points = Vec::with_capacity(qs.len());
    for (qi, &q) in qs.iter().enumerate() {
        let samples: Vec<Sample> = results.by_ref().take(images.len()).collect::<Result<_>>()?;
        let k = samples.len() as f64;
        let ms = samples
            .iter()
            .map(|s| s.ms_ssim)
            .sum::<Option<f64>>()
            .map(|v| v / k);
        points.push(RdPoint {
            q,
            s: selectors[qi].s,
            l: selectors[qi].snapped().l,
            bpp: samples.iter().map(|s| s.bpp).sum::<f64>() / k,
            psnr_db: samples.iter().map(|s| s.psnr).sum::<f64>() / k,
            ms_ssim: ms,
            mse: samples.iter().map(|s| s.mse).sum::<f64>() / k,
        });
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(a.q.total_cmp(&b.q)));
    Ok(points)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (a, b) = (rx[i] - mx, ry[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("spearman of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// For each pair of adjacent grid points, `|Δbpp|` divided by the bpp gap
/// between the integer points that bracket the pair. `points` must include
/// every integer `q` in range.
pub fn continuity_ratios(points: &[RdPoint]) -> Result<Vec<f64>> {
    let mut by_q = points.to_vec();
    by_q.sort_by(|a, b| a.q.total_cmp(&b.q));
    let at_int = |k: f64| {
        by_q.iter()
            .find(|p| p.q == k)
            .map(|p| p.bpp)
            .ok_or_else(|| Error::InvalidArgument(format!("grid lacks integer point q={k}")))
    };
    let mut out = Vec::with_capacity(by_q.len().saturating_sub(1));
    for w in by_q.windows(2) {
        let lo = w[0].q.floor();
        let hi = (lo + 1.0).min(w[1].q.ceil());
        let gap = (at_int(lo)? - at_int(hi.max(lo))?).abs();
        out.push(if gap > 0.0 {
            (w[1].bpp - w[0].bpp).abs() / gap
        } else {
            f64::INFINITY
        });
    }
    Ok(out)
}

/// Linear interpolation of `y` at `x` on a curve of `(x, y)` pairs; `None`
/// outside the curve's span.
pub fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let mut c = curve.to_vec();
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    if c.is_empty() || x < c[0].0 || x > c[c.len() - 1].0 {
        return None;
    }
    for w in c.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            return Some(if x1 == x0 { y0 } else { y0 + (y1 - y0) * (x - x0) / (x1 - x0) });
        }
    }
    Some(c[0].1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(q: f64, bpp: f64) -> RdPoint {
        RdPoint {
            q,
            s: q as usize,
            l: 0.0,
            bpp,
            psnr_db: 30.0,
            ms_ssim: Some(0.9),
            mse: 1.0,
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(q_grid(6, 1.0).unwrap(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = q_grid(6, 0.1).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[30], 3.0);
        assert_eq!(q_grid(1, 0.1).unwrap(), vec![0.0]);
        assert!(q_grid(6, 0.0).is_err());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_against_closed_form() {
        // Without ties, ρ = 1 − 6·Σd²/(n(n²−1)).
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let d2: f64 = 6.0 * 1.0;
        let oracle = 1.0 - 6.0 * d2 / (6.0 * 35.0);
        assert!((spearman(&x, &y).unwrap() - oracle).abs() < 1e-12);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert!((spearman(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&x, &[1.0; 6]).is_err());
    }

    #[test]
    fn continuity_uses_local_gap() {
        let pts = [point(0.0, 2.0), point(0.5, 1.5), point(1.0, 1.0), point(1.5, 0.9), point(2.0, 0.8)];
        let r = continuity_ratios(&pts).unwrap();
        assert_eq!(r.len(), 4);
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        assert!((r[2] - 0.5).abs() < 1e-9 && (r[3] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn interpolation() {
        let c = [(1.0, 10.0), (0.0, 0.0), (2.0, 30.0)];
        assert_eq!(interpolate(&c, 0.5), Some(5.0));
        assert_eq!(interpolate(&c, 1.5), Some(20.0));
        assert_eq!(interpolate(&c, 2.5), None);
    }

    #[test]
    fn csv_and_json_write_inf() {
        let mut p = point(0.0, 1.0);
        p.psnr_db = f64::INFINITY;
        assert!(to_csv(&[p]).lines().nth(1).unwrap().ends_with(",inf,0.9"));
        assert!(to_json(&[p]).contains("\"inf\""));
    }
}
