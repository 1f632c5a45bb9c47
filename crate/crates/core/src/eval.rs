//! Dataset-level IoU metrics, prior-versus-mask correlation analysis and the
//! artifacts written for it.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{invert_to_original, Mask, Region, TransformRecord};
use crate::maskdec::logits_to_canvas;
use crate::model::{Model, Prepared};
use crate::params::ParamStore;
use crate::rewards::format_score;
use crate::tensor::{sigmoid, Tensor};

/// Intersection and union pixel counts of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub inter: usize,
    pub union: usize,
}

impl IouCounts {
    /// IoU with the both-empty convention of 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn iou_counts(pred: &Mask, gt: &Mask) -> Result<IouCounts> {
    if pred.size() != gt.size() {
        return Err(Error::InvalidInput(format!("prediction {:?} vs gt {:?}", pred.size(), gt.size())));
    }
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    Ok(IouCounts { inter, union })
}

pub fn per_image_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(iou_counts(pred, gt)?.iou())
}

/// Cumulative intersection over cumulative union.
pub fn ciou(counts: &[IouCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::InsufficientData("cIoU of an empty prediction set".into()));
    }
    let inter: usize = counts.iter().map(|c| c.inter).sum();
    let union: usize = counts.iter().map(|c| c.union).sum();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean per-image IoU.
pub fn giou(counts: &[IouCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::InsufficientData("gIoU of an empty prediction set".into()));
    }
    Ok(counts.iter().map(IouCounts::iou).sum::<f64>() / counts.len() as f64)
}

/// IoU of `sigmoid(prior) > threshold` against `gt` (same resolution).
pub fn prior_iou(prior_logits: &Tensor, gt: &Mask, threshold: f64) -> Result<f64> {
    let (h, w) = match *prior_logits.shape() {
        [h, w] | [1, h, w] => (h, w),
        ref s => return Err(Error::InvalidInput(format!("prior must be a single map, got {s:?}"))),
    };
    let d = prior_logits.data();
    let pred = Mask::from_fn(h, w, |y, x| sigmoid(d[y * w + x]) > threshold);
    per_image_iou(&pred, gt)
}

fn crop_map(t: &Tensor, r: &Region) -> Tensor {
    let w = *t.shape().last().expect("2-D map");
    Tensor::from_fn(&[r.height, r.width], |i| t.data()[(r.top + i / r.width) * w + r.left + i % r.width])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub sample_id: usize,
    pub x: f64,
    pub y: f64,
}

/// Ordinary least squares `y = alpha + beta x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub alpha: f64,
    pub beta: f64,
    /// Pearson correlation.
    pub r: f64,
    /// Residual standard error, `sqrt(SSE / (n - 2))`; 0 when `n = 2`.
    pub sigma: f64,
    pub n: usize,
    pub xbar: f64,
    pub sxx: f64,
}

pub fn ols_fit(points: &[(f64, f64)]) -> Result<OlsFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - ybar).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    if sxx <= f64::EPSILON * nf * xbar.abs().max(1.0).powi(2) {
        return Err(Error::DegenerateFit("x is constant".into()));
    }
    let beta = sxy / sxx;
    let alpha = ybar - beta * xbar;
    let r = if syy == 0.0 { 0.0 } else { (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0) };
    let sse: f64 = points.iter().map(|p| (p.1 - alpha - beta * p.0).powi(2)).sum();
    let sigma = if n > 2 { (sse / (nf - 2.0)).sqrt() } else { 0.0 };
    Ok(OlsFit { alpha, beta, r, sigma, n, xbar, sxx })
}

impl OlsFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.alpha + self.beta * x
    }

    /// Standard error of the fitted mean at `x`.
    pub fn mean_se(&self, x: f64) -> f64 {
        self.sigma * (1.0 / self.n as f64 + (x - self.xbar).powi(2) / self.sxx).sqrt()
    }
}

/// `ŷ(x) ± η·se(ŷ(x))`.
pub fn confidence_band(fit: &OlsFit, x: f64, eta: f64) -> (f64, f64) {
    let y = fit.predict(x);
    let h = eta * fit.mean_se(x);
    (y - h, y + h)
}

pub const BAND_ETA: f64 = 10.0;

/// Contents of `fit.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub alpha: f64,
    pub beta: f64,
    pub r: f64,
    pub sigma: f64,
    pub n: usize,
    pub xbar: f64,
    pub sxx: f64,
    pub eta: f64,
    /// Fraction of points with `y >= x`.
    pub frac_above_diagonal: f64,
    pub x_label: String,
    pub y_label: String,
}

pub fn frac_above_diagonal(points: &[CorrelationPoint]) -> f64 {
    points.iter().filter(|p| p.y >= p.x).count() as f64 / points.len().max(1) as f64
}

/// Writes `points.csv`, `fit.json` and `scatter.png` into `dir`.
pub fn emit_analysis(
    points: &[CorrelationPoint],
    fit: &OlsFit,
    dir: &Path,
    labels: (&str, &str),
) -> Result<AnalysisSummary> {
    if points.is_empty() {
        return Err(Error::InsufficientData("no points to analyse".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = format!("sample_id,{},{}\n", labels.0, labels.1);
    for p in points {
        // `{:?}` prints the shortest representation that parses back exactly
        csv.push_str(&format!("{},{:?},{:?}\n", p.sample_id, p.x, p.y));
    }
    let path = dir.join("points.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let summary = AnalysisSummary {
        alpha: fit.alpha,
        beta: fit.beta,
        r: fit.r,
        sigma: fit.sigma,
        n: fit.n,
        xbar: fit.xbar,
        sxx: fit.sxx,
        eta: BAND_ETA,
        frac_above_diagonal: frac_above_diagonal(points),
        x_label: labels.0.to_string(),
        y_label: labels.1.to_string(),
    };
    let path = dir.join("fit.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("scatter.png");
    render_scatter(points, fit).save(&path).map_err(|e| Error::image(&path, e))?;
    Ok(summary)
}

/// Reads a table written by [`emit_analysis`].
pub fn read_points(path: &Path) -> Result<Vec<CorrelationPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("{}:{}: expected sample_id,x,y", path.display(), i + 1));
        let [id, x, y] = f.as_slice() else { return Err(bad()) };
        out.push(CorrelationPoint {
            sample_id: id.parse().map_err(|_| bad())?,
            x: x.parse().map_err(|_| bad())?,
            y: y.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

const PLOT: u32 = 400;
const MARGIN: u32 = 30;

/// Scatter on the unit square (extended to cover the data) with the OLS line,
/// its confidence band and the diagonal.
pub fn render_scatter(points: &[CorrelationPoint], fit: &OlsFit) -> RgbImage {
    let lo = points.iter().flat_map(|p| [p.x, p.y]).fold(0.0f64, f64::min);
    let hi = points.iter().flat_map(|p| [p.x, p.y]).fold(1.0f64, f64::max);
    let span = (hi - lo).max(1e-12);
    let inner = (PLOT - 2 * MARGIN) as f64;
    let to_px = |v: f64| (v - lo) / span * inner;
    let col = |x: f64| MARGIN as f64 + to_px(x);
    let row = |y: f64| (PLOT - MARGIN) as f64 - to_px(y);
    let mut img = RgbImage::from_pixel(PLOT, PLOT, Rgb([255, 255, 255]));
    let put = |img: &mut RgbImage, x: f64, y: f64, c: [u8; 3]| {
        if x >= 0.0 && y >= 0.0 && x < PLOT as f64 && y < PLOT as f64 {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    // band
    for px in MARGIN..PLOT - MARGIN {
        let x = lo + (px - MARGIN) as f64 / inner * span;
        let (b0, b1) = confidence_band(fit, x, BAND_ETA);
        let (r0, r1) = (row(b1).max(MARGIN as f64), row(b0).min((PLOT - MARGIN) as f64));
        let mut r = r0;
        while r <= r1 {
            put(&mut img, px as f64, r, [205, 220, 245]);
            r += 1.0;
        }
    }
    // axes box
    for t in MARGIN..=PLOT - MARGIN {
        for (x, y) in [(t, MARGIN), (t, PLOT - MARGIN), (MARGIN, t), (PLOT - MARGIN, t)] {
            put(&mut img, x as f64, y as f64, [0, 0, 0]);
        }
    }
    // diagonal and regression line
    for px in MARGIN..PLOT - MARGIN {
        let x = lo + (px - MARGIN) as f64 / inner * span;
        let d = row(x);
        if d >= MARGIN as f64 && d <= (PLOT - MARGIN) as f64 {
            put(&mut img, px as f64, d, [150, 150, 150]);
        }
        let y = row(fit.predict(x));
        if y >= MARGIN as f64 && y <= (PLOT - MARGIN) as f64 {
            for dy in [-1.0, 0.0, 1.0] {
                put(&mut img, px as f64, y + dy, [200, 30, 30]);
            }
        }
    }
    for p in points {
        let (cx, cy) = (col(p.x), row(p.y));
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                if dx * dx + dy * dy <= 5 {
                    put(&mut img, cx + dx as f64, cy + dy as f64, [30, 70, 200]);
                }
            }
        }
    }
    img
}

/// Everything needed to score and render one evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub sample_id: usize,
    pub instruction: Vec<usize>,
    pub text: String,
    pub tokens: Vec<usize>,
    pub format_score: f64,
    pub has_concentration: bool,
    pub record: TransformRecord,
    pub prior_res: usize,
    /// Raw `R × R` prior logits, row-major.
    pub prior_logits: Vec<f64>,
    /// Predicted mask at the original size, row-major 0/1.
    pub mask: Vec<u8>,
    pub counts: IouCounts,
    pub mask_iou: f64,
    pub prior_iou: f64,
    /// Source image, when known.
    pub image_path: Option<String>,
}

impl PredictionDump {
    pub fn mask(&self) -> Result<Mask> {
        let (h, w) = self.record.original_size;
        Mask::new(h, w, self.mask.clone())
    }

    /// Sigmoid of the prior mapped back to the original image size.
    pub fn prior_probability_map(&self) -> Result<Tensor> {
        let r = self.prior_res;
        let t = Tensor::new(&[1, r, r], self.prior_logits.clone());
        let canvas = logits_to_canvas(&t, self.record.canvas_size)?;
        Ok(invert_to_original(&canvas, &self.record)?.map(sigmoid))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub ciou: f64,
    pub giou: f64,
    pub mean_prior_iou: f64,
    /// Greedy responses with a perfect format score.
    pub format_full_frac: f64,
    pub concentration_frac: f64,
}

/// Greedy inference over `samples`, returning the report and one dump each.
pub fn evaluate(model: &Model, store: &ParamStore, samples: &[Prepared]) -> Result<(EvalReport, Vec<PredictionDump>)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("nothing to evaluate".into()));
    }
    let mut dumps = Vec::with_capacity(samples.len());
    for p in samples {
        let pred = model.predict(store, p)?;
        let counts = iou_counts(&pred.mask, &p.gt)?;
        let region = p.target.region;
        let prior_crop = crop_map(&pred.prior_logits, &region);
        let x = prior_iou(&prior_crop, &p.target.gt.crop(&region), 0.5)?;
        dumps.push(PredictionDump {
            sample_id: p.sample_id,
            instruction: p.instruction.clone(),
            text: pred.rollout.text.clone(),
            tokens: pred.rollout.tokens.clone(),
            format_score: format_score(&pred.rollout.text),
            has_concentration: pred.rollout.concentration.is_some(),
            record: p.record.clone(),
            prior_res: model.cfg.prior.prior_res,
            prior_logits: pred.prior_logits.data().to_vec(),
            mask: pred.mask.data().to_vec(),
            counts,
            mask_iou: counts.iou(),
            prior_iou: x,
            image_path: None,
        });
    }
    let counts: Vec<IouCounts> = dumps.iter().map(|d| d.counts).collect();
    let n = dumps.len() as f64;
    let report = EvalReport {
        n: dumps.len(),
        ciou: ciou(&counts)?,
        giou: giou(&counts)?,
        mean_prior_iou: dumps.iter().map(|d| d.prior_iou).sum::<f64>() / n,
        format_full_frac: dumps.iter().filter(|d| d.format_score == 1.0).count() as f64 / n,
        concentration_frac: dumps.iter().filter(|d| d.has_concentration).count() as f64 / n,
    };
    Ok((report, dumps))
}

/// Fraction of sampled responses (`per_prompt` per sample, training
/// sampling settings) whose format score is exactly 1.
pub fn sampled_format_rate(model: &Model, store: &ParamStore, samples: &[Prepared], per_prompt: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut full, mut total) = (0usize, 0usize);
    for p in samples {
        let emb = model.policy.image_embedding_plain(store, &p.policy_image);
        for _ in 0..per_prompt {
            let r = model.policy.generate(store, &model.vocab, &emb, &p.instruction, &model.cfg.sampling, &mut rng)?;
            full += (format_score(&r.text) == 1.0) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no rollouts sampled".into()));
    }
    Ok(full as f64 / total as f64)
}

/// Correlation points `(prior_iou, mask_iou)` from prediction dumps.
pub fn correlation_points(dumps: &[PredictionDump]) -> Vec<CorrelationPoint> {
    dumps.iter().map(|d| CorrelationPoint { sample_id: d.sample_id, x: d.prior_iou, y: d.mask_iou }).collect()
}

/// Input, heatmap overlay and mask overlay side by side. The heatmap is
/// min-max normalized for display only.
pub fn render_panels(image: &RgbImage, dump: &PredictionDump) -> Result<RgbImage> {
    let (h, w) = dump.record.original_size;
    if (image.height() as usize, image.width() as usize) != (h, w) {
        return Err(Error::InvalidInput("image size does not match the dump".into()));
    }
    let heat = dump.prior_probability_map()?;
    let (lo, hi) = heat.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let mask = dump.mask()?;
    let mut out = RgbImage::new(3 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let src = *image.get_pixel(x as u32, y as u32);
            out.put_pixel(x as u32, y as u32, src);
            let t = if span > 0.0 { (heat.data()[y * w + x] - lo) / span } else { 0.0 };
            let blend = |c: u8, target: f64, a: f64| ((1.0 - a) * c as f64 + a * target).round() as u8;
            let hm = Rgb([blend(src[0], 255.0, 0.6 * t), blend(src[1], 64.0 * t, 0.6 * t), blend(src[2], 0.0, 0.6 * t)]);
            out.put_pixel((w + x) as u32, y as u32, hm);
            let mk = if mask.get(y, x) { Rgb([blend(src[0], 0.0, 0.5), blend(src[1], 255.0, 0.5), blend(src[2], 0.0, 0.5)]) } else { src };
            out.put_pixel((2 * w + x) as u32, y as u32, mk);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_samples};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        let p = rng.gen_range(0.0..1.0);
        Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
    }

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(4, 5, |y, _| y < 2);
        assert_eq!(per_image_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(per_image_iou(&a, &Mask::from_fn(4, 5, |y, _| y >= 2)).unwrap(), 0.0);
        assert_eq!(per_image_iou(&Mask::zeros(3, 3), &Mask::zeros(3, 3)).unwrap(), 1.0);
        let p = Mask::from_fn(4, 5, |y, _| y < 3);
        let g = Mask::from_fn(4, 5, |y, _| (1..3).contains(&y));
        let c = iou_counts(&p, &g).unwrap();
        assert_eq!((c.inter, c.union), (10, 15));
        let g = Mask::from_fn(4, 5, |y, _| y >= 1);
        let p = Mask::from_fn(4, 5, |y, _| y <= 1);
        let c = iou_counts(&p, &g).unwrap();
        assert_eq!((c.inter, c.union), (5, 20));
        assert!(per_image_iou(&a, &Mask::zeros(5, 4)).is_err());
    }

    #[test]
    fn dataset_level_examples() {
        let c = [IouCounts { inter: 10, union: 20 }, IouCounts { inter: 30, union: 40 }];
        assert!((ciou(&c).unwrap() - 40.0 / 60.0).abs() < 1e-15);
        assert!((giou(&c).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(ciou(&c[..1]).unwrap(), giou(&c[..1]).unwrap());
        let perfect = [IouCounts { inter: 5, union: 5 }; 3];
        assert_eq!((ciou(&perfect).unwrap(), giou(&perfect).unwrap()), (1.0, 1.0));
        assert!(ciou(&[]).is_err() && giou(&[]).is_err());
    }

    #[test]
    fn dataset_metrics_match_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let pairs: Vec<(Mask, Mask)> = (0..n).map(|_| (random_mask(&mut rng, 8, 8), random_mask(&mut rng, 8, 8))).collect();
            let (mut si, mut su, mut mean) = (0.0, 0.0, 0.0);
            for (p, g) in &pairs {
                let (mut i, mut u) = (0.0, 0.0);
                for y in 0..8 {
                    for x in 0..8 {
                        i += (p.get(y, x) && g.get(y, x)) as u8 as f64;
                        u += (p.get(y, x) || g.get(y, x)) as u8 as f64;
                    }
                }
                si += i;
                su += u;
                mean += if u == 0.0 { 1.0 } else { i / u };
            }
            let counts: Vec<IouCounts> = pairs.iter().map(|(p, g)| iou_counts(p, g).unwrap()).collect();
            let want_c = if su == 0.0 { 1.0 } else { si / su };
            assert!((ciou(&counts).unwrap() - want_c).abs() < 1e-12);
            assert!((giou(&counts).unwrap() - mean / n as f64).abs() < 1e-12);
            let mut rev = counts.clone();
            rev.reverse();
            assert_eq!(ciou(&rev).unwrap(), ciou(&counts).unwrap());
        }
    }

    #[test]
    fn prior_iou_examples() {
        let gt = Mask::from_fn(6, 6, |y, x| y < 3 && x < 4);
        let saturated = Tensor::from_fn(&[1, 6, 6], |i| 50.0 * (2.0 * gt.data()[i] as f64 - 1.0));
        assert_eq!(prior_iou(&saturated, &gt, 0.5).unwrap(), 1.0);
        // zero logits sit exactly on the threshold and predict nothing
        let zero = Tensor::zeros(&[1, 6, 6]);
        assert_eq!(prior_iou(&zero, &gt, 0.5).unwrap(), 0.0);
        // a threshold just below 0.5 predicts everything: |gt| / HW
        assert!((prior_iou(&zero, &gt, 0.4999).unwrap() - 12.0 / 36.0).abs() < 1e-15);
        assert_eq!(prior_iou(&Tensor::full(&[6, 6], -3.0), &gt, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ols_examples() {
        let f = ols_fit(&[(0.0, 0.0), (1.0, 1.0)]).unwrap();
        assert_eq!((f.alpha, f.beta, f.r, f.sigma), (0.0, 1.0, 1.0, 0.0));
        let f = ols_fit(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12 && (f.beta - 2.0).abs() < 1e-12);
        assert!((f.r - 1.0).abs() < 1e-12 && f.sigma.abs() < 1e-12);
        assert!(matches!(ols_fit(&[(1.0, 0.0), (1.0, 2.0)]), Err(Error::DegenerateFit(_))));
        assert!(ols_fit(&[(1.0, 0.0)]).is_err());
        let flat = ols_fit(&[(0.0, 2.0), (1.0, 2.0), (2.0, 2.0)]).unwrap();
        assert_eq!(flat.r, 0.0);
    }

    #[test]
    fn independent_data_has_small_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> = (0..1000).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
        assert!(ols_fit(&pts).unwrap().r.abs() < 0.1);
    }

    #[test]
    fn band_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (0..30).map(|_| {
            let x = rng.gen_range(0.0..1.0);
            (x, 0.3 + 0.5 * x + rng.gen_range(-0.1..0.1))
        }).collect();
        let f = ols_fit(&pts).unwrap();
        let (lo, hi) = confidence_band(&f, f.xbar, 10.0);
        assert!(((hi - lo) - 2.0 * 10.0 * f.sigma / (f.n as f64).sqrt()).abs() < 1e-12);
        for x in [0.0, 0.25, 0.9, 1.7] {
            let se = f.sigma * (1.0 / 30.0 + (x - f.xbar).powi(2) / f.sxx).sqrt();
            let (lo, hi) = confidence_band(&f, x, 10.0);
            let y = f.alpha + f.beta * x;
            assert!((lo - (y - 10.0 * se)).abs() < 1e-12 && (hi - (y + 10.0 * se)).abs() < 1e-12);
            assert!(hi - lo >= 2.0 * 10.0 * f.sigma / 30f64.sqrt() - 1e-12);
        }
        let exact = ols_fit(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        let (lo, hi) = confidence_band(&exact, 0.7, 10.0);
        assert!((hi - lo).abs() < 1e-9 && (lo - exact.predict(0.7)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn residuals_are_orthogonal_to_x(pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..60)) {
            prop_assume!(ols_fit(&pts).is_ok());
            let f = ols_fit(&pts).unwrap();
            let s: f64 = pts.iter().map(|p| (p.1 - f.predict(p.0)) * (p.0 - f.xbar)).sum();
            prop_assert!(s.abs() < 1e-9);
            prop_assert!(f.r.abs() <= 1.0);
        }

        #[test]
        fn giou_of_equal_ious_is_that_iou(inter in 0usize..50, extra in 1usize..50, n in 1usize..10) {
            let c = vec![IouCounts { inter, union: inter + extra }; n];
            prop_assert!((giou(&c).unwrap() - c[0].iou()).abs() < 1e-15);
        }
    }

    #[test]
    fn analysis_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<CorrelationPoint> = (0..40)
            .map(|i| {
                let x: f64 = rng.gen_range(0.0..1.0);
                CorrelationPoint { sample_id: i, x, y: (0.2 + 0.7 * x + rng.gen_range(-0.1..0.1)).min(1.0) }
            })
            .collect();
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        let fit = ols_fit(&xy).unwrap();
        let s = emit_analysis(&pts, &fit, dir.path(), ("prior_iou", "mask_iou")).unwrap();
        let back = read_points(&dir.path().join("points.csv")).unwrap();
        assert_eq!(back, pts);
        let xy: Vec<(f64, f64)> = back.iter().map(|p| (p.x, p.y)).collect();
        let refit = ols_fit(&xy).unwrap();
        assert!((refit.alpha - s.alpha).abs() < 1e-9 && (refit.beta - s.beta).abs() < 1e-9);
        assert_eq!(s.frac_above_diagonal, pts.iter().filter(|p| p.y >= p.x).count() as f64 / 40.0);
        let json: AnalysisSummary = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
        assert_eq!(json, s);
        let img = image::open(dir.path().join("scatter.png")).unwrap();
        assert_eq!((img.width(), img.height()), (PLOT, PLOT));
        let empty = tempfile::tempdir().unwrap();
        let target = empty.path().join("out");
        assert!(emit_analysis(&[], &fit, &target, ("a", "b")).is_err());
        assert!(!target.exists());
    }

    #[test]
    fn evaluation_dumps_and_panels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = Model::new(tiny_config(), &mut store, &mut rng).unwrap();
        let samples = tiny_samples(3);
        let prepared: Vec<Prepared> = samples.iter().map(|s| model.prepare(s).unwrap()).collect();
        let (report, dumps) = evaluate(&model, &store, &prepared).unwrap();
        assert_eq!((report.n, dumps.len()), (3, 3));
        let again = evaluate(&model, &store, &prepared).unwrap();
        assert_eq!(again.1, dumps);
        for (d, s) in dumps.iter().zip(&samples) {
            assert!((0.0..=1.0).contains(&d.prior_iou) && (0.0..=1.0).contains(&d.mask_iou));
            assert_eq!(d.mask().unwrap().size(), s.gt.size());
            let panel = render_panels(&s.image, d).unwrap();
            assert_eq!(panel.width(), 3 * s.image.width());
        }
        let counts: Vec<IouCounts> = dumps.iter().map(|d| d.counts).collect();
        assert_eq!(report.giou, giou(&counts).unwrap());
        assert!(evaluate(&model, &store, &[]).is_err());
        let rate = sampled_format_rate(&model, &store, &prepared, 2, 0).unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
}
