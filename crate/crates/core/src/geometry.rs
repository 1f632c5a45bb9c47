//! Resizing, padding and the inverse mapping between original image
//! coordinates and the square working canvas.
//!
//! Images are `[C,H,W]` tensors with values in `[0,1]`; masks are [`Mask`]s.
//! The valid region always sits in the top-left corner of the canvas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// Binary mask stored row-major with values in `{0,1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// `[1,H,W]` tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.data.iter().map(|&v| v as f64).collect())
    }

    /// Pixels `> 0` of a single-channel map become 1.
    pub fn from_logits(t: &Tensor) -> Self {
        let (h, w) = plane_dims(t);
        Self { height: h, width: w, data: t.data().iter().map(|&v| (v > 0.0) as u8).collect() }
    }

    /// Sub-mask restricted to `region`.
    pub fn crop(&self, region: &Region) -> Mask {
        Mask::from_fn(region.height, region.width, |y, x| self.get(region.top + y, region.left + x))
    }
}

/// Axis-aligned box in canvas pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// How an original image was placed on the canvas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub original_size: (usize, usize),
    pub scale: f64,
    pub resized_size: (usize, usize),
    pub canvas_size: usize,
    pub valid_region: Region,
}

impl TransformRecord {
    /// Valid region on a square grid of side `res` laid over the canvas.
    pub fn valid_at(&self, res: usize) -> Region {
        let s = self.canvas_size;
        let scaled = |v: usize| ((v * res * 2 + s) / (2 * s)).clamp(1, res);
        Region {
            top: self.valid_region.top * res / s,
            left: self.valid_region.left * res / s,
            height: scaled(self.valid_region.height),
            width: scaled(self.valid_region.width),
        }
    }
}

fn plane_dims(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => panic!("expected a single-channel map, got shape {s:?}"),
    }
}

/// `round(a * num / den)` with halves rounded up, in exact integer arithmetic.
fn round_ratio(a: usize, num: usize, den: usize) -> usize {
    (2 * a * num + den) / (2 * den)
}

/// Size after scaling the longer side to `target`.
pub fn longest_side_size(h: usize, w: usize, target: usize) -> (usize, usize) {
    let longer = h.max(w);
    let rh = if h == longer { target } else { round_ratio(h, target, longer).max(1) };
    let rw = if w == longer { target } else { round_ratio(w, target, longer).max(1) };
    (rh, rw)
}

/// Bilinear resize so the longer side equals `target_side`.
pub fn resize_longest_side(image: &Tensor, target_side: usize) -> Result<(Tensor, TransformRecord)> {
    let (_, h, w) = image.dims3();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("zero-sized image".into()));
    }
    if target_side == 0 {
        return Err(Error::InvalidInput("target side must be at least 1".into()));
    }
    let (rh, rw) = longest_side_size(h, w, target_side);
    let out = if (rh, rw) == (h, w) { image.clone() } else { resize_bilinear(image, rh, rw) };
    let record = TransformRecord {
        original_size: (h, w),
        scale: target_side as f64 / h.max(w) as f64,
        resized_size: (rh, rw),
        canvas_size: target_side,
        valid_region: Region { top: 0, left: 0, height: rh, width: rw },
    };
    Ok((out, record))
}

/// Zero-pads a resized image to `canvas_side × canvas_side`.
///
/// The longer side must already equal the canvas side; smaller images are
/// rejected because they indicate the resize step was skipped.
pub fn pad_to_canvas(image: &Tensor, canvas_side: usize) -> Result<(Tensor, Region)> {
    let (c, h, w) = image.dims3();
    if h > canvas_side || w > canvas_side {
        return Err(Error::InvalidInput(format!("{h}x{w} exceeds canvas {canvas_side}")));
    }
    if h.max(w) != canvas_side {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} was not resized to canvas {canvas_side} before padding"
        )));
    }
    let mut out = Tensor::zeros(&[c, canvas_side, canvas_side]);
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * h + y) * w;
            let d = (ch * canvas_side + y) * canvas_side;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok((out, Region { top: 0, left: 0, height: h, width: w }))
}

/// Resize then pad: the canvas image and its transform record.
pub fn to_canvas(image: &Tensor, canvas_side: usize) -> Result<(Tensor, TransformRecord)> {
    let (resized, record) = resize_longest_side(image, canvas_side)?;
    let (padded, _) = pad_to_canvas(&resized, canvas_side)?;
    Ok((padded, record))
}

/// Nearest-neighbor resample: output pixel `o` reads source `floor((o + 0.5) * in / out)`.
pub fn resample_nearest(mask: &Mask, h: usize, w: usize) -> Mask {
    let sy: Vec<usize> = (0..h).map(|o| nearest_src(o, mask.height, h)).collect();
    let sx: Vec<usize> = (0..w).map(|o| nearest_src(o, mask.width, w)).collect();
    Mask::from_fn(h, w, |y, x| mask.get(sy[y], sx[x]))
}

fn nearest_src(o: usize, input: usize, output: usize) -> usize {
    (((2 * o + 1) * input) / (2 * output)).min(input - 1)
}

/// Maps an original-size mask onto the canvas using the image's record.
pub fn transform_mask(mask: &Mask, record: &TransformRecord) -> Result<Mask> {
    if mask.size() != record.original_size {
        return Err(Error::InvalidInput(format!(
            "mask is {:?} but record expects {:?}",
            mask.size(),
            record.original_size
        )));
    }
    let (rh, rw) = record.resized_size;
    let resized = resample_nearest(mask, rh, rw);
    let s = record.canvas_size;
    let r = record.valid_region;
    Ok(Mask::from_fn(s, s, |y, x| r.contains(y, x) && resized.get(y - r.top, x - r.left)))
}

/// Crops the valid region from a canvas-resolution map and resizes it
/// bilinearly back to the original image size.
pub fn invert_to_original(logits: &Tensor, record: &TransformRecord) -> Result<Tensor> {
    let (h, w) = plane_dims(logits);
    if h != record.canvas_size || w != record.canvas_size {
        return Err(Error::InvalidInput(format!(
            "map is {h}x{w} but canvas is {}",
            record.canvas_size
        )));
    }
    let r = record.valid_region;
    let mut crop = Vec::with_capacity(r.area());
    for y in r.top..r.top + r.height {
        crop.extend_from_slice(&logits.data()[y * w + r.left..y * w + r.left + r.width]);
    }
    let crop = Tensor::new(&[1, r.height, r.width], crop);
    let (oh, ow) = record.original_size;
    let out = if (oh, ow) == (r.height, r.width) { crop } else { resize_bilinear(&crop, oh, ow) };
    Ok(out.reshape(&[oh, ow]))
}

/// Both sides scaled by `sqrt(max_pixels / (h*w))` and rounded, then trimmed so `h*w <= max_pixels`.
///
/// Trimming takes a pixel off whichever side overshoots its exact scaled length the most.
pub fn capped_size(h: usize, w: usize, max_pixels: usize) -> (usize, usize) {
    if h * w <= max_pixels {
        return (h, w);
    }
    let s = (max_pixels as f64 / (h * w) as f64).sqrt();
    let (eh, ew) = (h as f64 * s, w as f64 * s);
    let mut ch = (eh.round() as usize).clamp(1, h);
    let mut cw = (ew.round() as usize).clamp(1, w);
    while ch * cw > max_pixels {
        let (oh, ow) = (ch as f64 - eh, cw as f64 - ew);
        if ch > 1 && (oh >= ow || cw == 1) {
            ch -= 1;
        } else if cw > 1 {
            cw -= 1;
        } else {
            break;
        }
    }
    (ch, cw)
}

/// Downscales an image so it holds at most `max_pixels` pixels.
pub fn cap_pixels(image: &Tensor, max_pixels: usize) -> Result<(Tensor, (usize, usize))> {
    if max_pixels == 0 {
        return Err(Error::InvalidInput("pixel cap must be at least 1".into()));
    }
    let (_, h, w) = image.dims3();
    let (ch, cw) = capped_size(h, w, max_pixels);
    if (ch, cw) == (h, w) {
        return Ok((image.clone(), (h, w)));
    }
    Ok((resize_bilinear(image, ch, cw), (ch, cw)))
}

/// Area-average a canvas mask down to `res × res`, then threshold at 0.5.
pub fn downsample_mask(mask: &Mask, res: usize) -> Result<Mask> {
    let (h, w) = mask.size();
    if h != w || res == 0 || h % res != 0 {
        return Err(Error::InvalidInput(format!("cannot area-downsample {h}x{w} to {res}")));
    }
    let f = h / res;
    let half = f * f;
    Ok(Mask::from_fn(res, res, |y, x| {
        let mut n = 0;
        for dy in 0..f {
            for dx in 0..f {
                n += mask.get(y * f + dy, x * f + dx) as usize;
            }
        }
        2 * n >= half
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| (i % 7) as f64 / 7.0)
    }

    #[test]
    fn resize_examples() {
        let (_, r) = resize_longest_side(&image(2048, 1024), 1024).unwrap();
        assert_eq!(r.resized_size, (1024, 512));
        let (out, r) = resize_longest_side(&image(1024, 1024), 1024).unwrap();
        assert_eq!(r.resized_size, (1024, 1024));
        assert_eq!(out, image(1024, 1024));
        let (_, r) = resize_longest_side(&image(640, 480), 1024).unwrap();
        assert_eq!(r.resized_size, (1024, 768));
        assert!(resize_longest_side(&Tensor::zeros(&[3, 0, 5]), 64).is_err());
    }

    #[test]
    fn pad_examples() {
        let (p, r) = pad_to_canvas(&Tensor::full(&[1, 1024, 512], 1.0), 1024).unwrap();
        assert_eq!(p.shape(), &[1, 1024, 1024]);
        assert_eq!(r, Region { top: 0, left: 0, height: 1024, width: 512 });
        let d = p.data();
        for y in 0..1024 {
            for x in 0..1024 {
                assert_eq!(d[y * 1024 + x], if x < 512 { 1.0 } else { 0.0 });
            }
        }
        let (_, r) = pad_to_canvas(&Tensor::zeros(&[3, 64, 64]), 64).unwrap();
        assert_eq!(r.area(), 64 * 64);
        assert!(pad_to_canvas(&Tensor::zeros(&[1, 100, 50]), 1024).is_err());
        assert!(pad_to_canvas(&Tensor::zeros(&[1, 70, 50]), 64).is_err());
    }

    fn record_for(h: usize, w: usize, canvas: usize) -> TransformRecord {
        resize_longest_side(&Tensor::zeros(&[1, h, w]), canvas).unwrap().1
    }

    #[test]
    fn transform_mask_examples() {
        let rec = record_for(40, 80, 64);
        let ones = Mask::from_fn(40, 80, |_, _| true);
        let m = transform_mask(&ones, &rec).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(m.get(y, x), rec.valid_region.contains(y, x));
            }
        }
        assert_eq!(transform_mask(&Mask::zeros(40, 80), &rec).unwrap().count(), 0);
        assert!(transform_mask(&Mask::zeros(41, 80), &rec).is_err());
    }

    #[test]
    fn checkerboard_upsample_matches_per_pixel_oracle() {
        let board = Mask::from_fn(8, 8, |y, x| (y + x) % 2 == 0);
        let rec = record_for(8, 8, 16);
        let up = transform_mask(&board, &rec).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                // nearest source pixel by distance between pixel centers
                let sy = ((y as f64 + 0.5) / 2.0).floor() as usize;
                let sx = ((x as f64 + 0.5) / 2.0).floor() as usize;
                assert_eq!(up.get(y, x), board.get(sy, sx));
            }
        }
    }

    fn logits_of(m: &Mask) -> Tensor {
        Tensor::new(&[m.height(), m.width()], m.data().iter().map(|&v| 2.0 * v as f64 - 1.0).collect())
    }

    #[test]
    fn round_trip_exact_at_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mask::from_fn(48, 64, |_, _| rng.gen_bool(0.4));
        let rec = record_for(48, 64, 64);
        assert_eq!(rec.scale, 1.0);
        let canvas = transform_mask(&m, &rec).unwrap();
        let back = invert_to_original(&logits_of(&canvas), &rec).unwrap();
        assert_eq!(Mask::from_logits(&back), m);
    }

    fn blobs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Mask {
        let discs: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(8.0..30.0)))
            .collect();
        Mask::from_fn(h, w, |y, x| {
            discs.iter().any(|&(cy, cx, r)| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx < r * r
            })
        })
    }

    #[test]
    fn round_trip_at_half_scale_agrees_on_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = blobs(256, 192, &mut rng);
            let rec = record_for(256, 192, 128);
            assert!((rec.scale - 0.5).abs() < 1e-12);
            let canvas = transform_mask(&m, &rec).unwrap();
            let back = Mask::from_logits(&invert_to_original(&logits_of(&canvas), &rec).unwrap());
            // direct-resample oracle: downsample then nearest-neighbor back up
            let oracle = resample_nearest(&resample_nearest(&m, 128, 96), 256, 192);
            let agree = |a: &Mask, b: &Mask| {
                a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count() as f64 / a.data().len() as f64
            };
            assert!(agree(&back, &m) >= 0.99, "agreement {}", agree(&back, &m));
            assert!(agree(&oracle, &m) >= 0.99);
        }
    }

    #[test]
    fn constant_map_inverts_to_constant() {
        let rec = record_for(50, 70, 64);
        let back = invert_to_original(&Tensor::full(&[64, 64], -2.5), &rec).unwrap();
        assert_eq!(back.shape(), &[50, 70]);
        assert!(back.data().iter().all(|&v| (v + 2.5).abs() < 1e-12));
        assert!(invert_to_original(&Tensor::zeros(&[32, 32]), &rec).is_err());
    }

    #[test]
    fn cap_examples() {
        let (_, s) = cap_pixels(&image(900, 700), 705_600).unwrap();
        assert_eq!(s, (900, 700));
        let (out, s) = cap_pixels(&image(1200, 700), 705_600).unwrap();
        let scale = (705_600.0f64 / 840_000.0).sqrt();
        assert!((scale - 0.9165).abs() < 1e-4);
        assert_eq!(s, (1100, 641));
        assert!(s.0 * s.1 <= 705_600);
        assert_eq!(out.shape(), &[3, 1100, 641]);
        assert_eq!(cap_pixels(&image(1, 1), 705_600).unwrap().1, (1, 1));
    }

    #[test]
    fn valid_region_at_reduced_resolution() {
        let rec = record_for(40, 80, 64);
        assert_eq!(rec.valid_region.height, 32);
        let r = rec.valid_at(32);
        assert_eq!((r.height, r.width), (16, 32));
        let thin = record_for(1, 80, 64);
        assert_eq!(thin.valid_at(16).height, 1);
    }

    #[test]
    fn area_downsample_thresholds_half() {
        let m = Mask::from_fn(4, 4, |y, x| (y < 2 && x < 1) || (y >= 2 && x >= 2));
        let d = downsample_mask(&m, 2).unwrap();
        assert_eq!(d.data(), &[1, 0, 0, 1]);
    }

    proptest! {
        #[test]
        fn resize_preserves_aspect(h in 1usize..400, w in 1usize..400, t in 1usize..300) {
            let (rh, rw) = longest_side_size(h, w, t);
            prop_assert_eq!(rh.max(rw), t);
            // aspect preserved to within one pixel of rounding on the shorter side
            let exact_h = h as f64 * t as f64 / h.max(w) as f64;
            let exact_w = w as f64 * t as f64 / h.max(w) as f64;
            prop_assert!((rh as f64 - exact_h).abs() <= 1.0);
            prop_assert!((rw as f64 - exact_w).abs() <= 1.0);
        }

        #[test]
        fn cap_never_exceeded(h in 1usize..3000, w in 1usize..3000, cap in 1usize..1_000_000) {
            let (ch, cw) = capped_size(h, w, cap);
            if h * w <= cap {
                prop_assert_eq!((ch, cw), (h, w));
            } else {
                prop_assert!(ch * cw <= cap);
            }
            prop_assert!(ch >= 1 && cw >= 1 && ch <= h && cw <= w);
        }

        #[test]
        fn random_mask_round_trip_high_agreement(seed in 0u64..1000, h in 20usize..100, w in 20usize..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = blobs(h, w, &mut rng);
            let rec = record_for(h, w, 64);
            let canvas = transform_mask(&m, &rec).unwrap();
            let back = Mask::from_logits(&invert_to_original(&logits_of(&canvas), &rec).unwrap());
            prop_assert_eq!(back.size(), m.size());
            let agree = back.data().iter().zip(m.data()).filter(|(a, b)| a == b).count();
            prop_assert!(agree as f64 >= 0.95 * m.data().len() as f64);
        }
    }
}
