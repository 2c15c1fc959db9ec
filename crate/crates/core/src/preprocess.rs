//! Contrast normalization, resizing, disc-region cropping and the paired
//! geometric augmentation of images and masks.

use image::{imageops, RgbImage};
use palette::{FromColor, Lab, LinSrgb, Srgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Margin around the disc bounding box used when cropping for the cup model.
pub const DEFAULT_CROP_MARGIN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClaheMode {
    /// Equalize the L channel of CIE Lab, keeping chroma.
    #[default]
    Lightness,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    pub clip_limit: f64,
    /// `(rows, cols)` of contextual tiles.
    pub tile_grid: (usize, usize),
    pub mode: ClaheMode,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { clip_limit: 2.0, tile_grid: (8, 8), mode: ClaheMode::Lightness }
    }
}

/// Contrast-limited adaptive histogram equalization. A constant image is
/// returned unchanged.
pub fn clahe(image: &RgbImage, params: &ClaheParams) -> RgbImage {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let first = image.get_pixel(0, 0);
    if image.pixels().all(|p| p == first) {
        return image.clone();
    }
    match params.mode {
        ClaheMode::PerChannel => {
            let mut out = image.clone();
            for ch in 0..3 {
                let plane: Vec<u8> = image.pixels().map(|p| p.0[ch]).collect();
                let eq = clahe_plane(&plane, h, w, params.clip_limit, params.tile_grid);
                for (p, v) in out.pixels_mut().zip(eq) {
                    p.0[ch] = v;
                }
            }
            out
        }
        ClaheMode::Lightness => {
            let labs: Vec<Lab> = image
                .pixels()
                .map(|p| {
                    let srgb = Srgb::new(p.0[0], p.0[1], p.0[2]).into_format::<f32>();
                    Lab::from_color(srgb.into_linear())
                })
                .collect();
            let plane: Vec<u8> = labs.iter().map(|l| (l.l * 2.55).round().clamp(0.0, 255.0) as u8).collect();
            let eq = clahe_plane(&plane, h, w, params.clip_limit, params.tile_grid);
            let mut out = RgbImage::new(w as u32, h as u32);
            for ((p, lab), v) in out.pixels_mut().zip(labs).zip(eq) {
                let lab = Lab::new(v as f32 / 2.55, lab.a, lab.b);
                let rgb: Srgb<u8> = Srgb::from_linear(LinSrgb::from_color(lab));
                p.0 = [rgb.red, rgb.green, rgb.blue];
            }
            out
        }
    }
}

/// CLAHE on one 8-bit plane. The clip limit is relative to the mean bin height.
fn clahe_plane(plane: &[u8], h: usize, w: usize, clip_limit: f64, grid: (usize, usize)) -> Vec<u8> {
    let ty = grid.0.clamp(1, h);
    let tx = grid.1.clamp(1, w);
    let tile_of = |v: usize, n: usize, t: usize| ((v * t) / n).min(t - 1);
    let mut hists = vec![[0u32; 256]; ty * tx];
    let mut areas = vec![0u32; ty * tx];
    for y in 0..h {
        let iy = tile_of(y, h, ty);
        for x in 0..w {
            let t = iy * tx + tile_of(x, w, tx);
            hists[t][plane[y * w + x] as usize] += 1;
            areas[t] += 1;
        }
    }
    let luts: Vec<[u8; 256]> = hists
        .iter_mut()
        .zip(&areas)
        .map(|(hist, &area)| {
            if clip_limit > 0.0 {
                let limit = ((clip_limit * area as f64 / 256.0).floor() as u32).max(1);
                let mut excess = 0u32;
                for b in hist.iter_mut() {
                    if *b > limit {
                        excess += *b - limit;
                        *b = limit;
                    }
                }
                let uniform = excess / 256;
                let residual = (excess % 256) as usize;
                for b in hist.iter_mut() {
                    *b += uniform;
                }
                if let Some(step) = 256usize.checked_div(residual) {
                    for b in hist.iter_mut().step_by(step).take(residual) {
                        *b += 1;
                    }
                }
            }
            let mut lut = [0u8; 256];
            let mut cdf = 0u32;
            let scale = 255.0 / area.max(1) as f64;
            for (v, b) in hist.iter().enumerate() {
                cdf += b;
                lut[v] = (cdf as f64 * scale).round().min(255.0) as u8;
            }
            lut
        })
        .collect();

    // Bilinear blend between the four nearest tile centres.
    let neighbours = |v: usize, n: usize, t: usize| -> (usize, usize, f64) {
        let g = (v as f64 + 0.5) * t as f64 / n as f64 - 0.5;
        if g <= 0.0 {
            return (0, 0, 0.0);
        }
        let i0 = g.floor() as usize;
        if i0 + 1 >= t {
            return (t - 1, t - 1, 0.0);
        }
        (i0, i0 + 1, g - i0 as f64)
    };
    let mut out = vec![0u8; plane.len()];
    for y in 0..h {
        let (y0, y1, wy) = neighbours(y, h, ty);
        for x in 0..w {
            let (x0, x1, wx) = neighbours(x, w, tx);
            let v = plane[y * w + x] as usize;
            let l = |iy: usize, ix: usize| luts[iy * tx + ix][v] as f64;
            let top = l(y0, x0) * (1.0 - wx) + l(y0, x1) * wx;
            let bottom = l(y1, x0) * (1.0 - wx) + l(y1, x1) * wx;
            out[y * w + x] = (top * (1.0 - wy) + bottom * wy).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// A planar `C×H×W` float image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn from_rgb(image: &RgbImage) -> Self {
        let (w, h) = image.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (i, p) in image.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = p.0[c] as f32 / 255.0;
            }
        }
        Self { channels: 3, height: h, width: w, data }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let hw = self.height * self.width;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let ch = |c: usize| (self.data[c.min(self.channels - 1) * hw + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([ch(0), ch(1), ch(2)])
        })
    }

    /// `1×C×H×W` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Closed interval sampled uniformly; `min == max` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub const fn symmetric(v: f64) -> Self {
        Self { min: -v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::Config(format!("augment.{name} must be a finite range with min <= max")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub rotation_deg: Range,
    pub zoom: Range,
    /// Fraction of the image size.
    pub shift_frac: Range,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub shear_deg: Range,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_deg: Range::symmetric(25.0),
            zoom: Range::new(0.9, 1.1),
            shift_frac: Range::symmetric(0.1),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            shear_deg: Range::symmetric(10.0),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// Every range degenerate at the identity and no flips.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Range::fixed(0.0),
            zoom: Range::fixed(1.0),
            shift_frac: Range::fixed(0.0),
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            shear_deg: Range::fixed(0.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rotation_deg.validate("rotation_deg")?;
        self.zoom.validate("zoom")?;
        self.shift_frac.validate("shift_frac")?;
        self.shear_deg.validate("shear_deg")?;
        if self.zoom.min <= 0.0 {
            return Err(Error::Config("augment.zoom must be positive".into()));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Independent stream for one `(epoch, sample)` pair.
    pub fn rng_for(&self, epoch: u64, sample: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample);
        rng
    }

    pub fn sample(&self, rng: &mut impl Rng) -> GeometricTransform {
        GeometricTransform {
            rotation_deg: self.rotation_deg.sample(rng),
            zoom: self.zoom.sample(rng),
            shift_frac: (self.shift_frac.sample(rng), self.shift_frac.sample(rng)),
            shear_deg: self.shear_deg.sample(rng),
            hflip: self.hflip_prob > 0.0 && rng.random_bool(self.hflip_prob),
            vflip: self.vflip_prob > 0.0 && rng.random_bool(self.vflip_prob),
        }
    }
}

/// One concrete draw from an [`AugmentSpec`], about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub rotation_deg: f64,
    pub zoom: f64,
    /// `(dy, dx)` as fractions of height and width.
    pub shift_frac: (f64, f64),
    pub shear_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, zoom: 1.0, shift_frac: (0.0, 0.0), shear_deg: 0.0, hflip: false, vflip: false }
    }

    fn is_pure_flip(&self) -> bool {
        self.rotation_deg == 0.0 && self.zoom == 1.0 && self.shift_frac == (0.0, 0.0) && self.shear_deg == 0.0
    }

    /// Forward linear part `R(θ)·Shear(φ)·zoom` acting on `(x, y)`.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.zoom;
        [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]]
    }

    /// Source coordinate `(y, x)` for output pixel `(y, x)`.
    fn inverse_map(&self, h: usize, w: usize) -> impl Fn(f64, f64) -> (f64, f64) {
        let [[a, b], [c, d]] = self.linear();
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ty, tx) = (self.shift_frac.0 * h as f64, self.shift_frac.1 * w as f64);
        let (hflip, vflip) = (self.hflip, self.vflip);
        move |y, x| {
            let (dx, dy) = (x - cx - tx, y - cy - ty);
            let mut sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let mut sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            if hflip {
                sx = 2.0 * cx - sx;
            }
            if vflip {
                sy = 2.0 * cy - sy;
            }
            (sy, sx)
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| plane[reflect(yy, h) * w + reflect(xx, w)];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies one transform to an image and its mask with reflect padding; the
/// mask is interpolated bilinearly and re-binarized at 0.5.
pub fn apply_transform(image: &PlanarImage, mask: &BinaryMask, t: &GeometricTransform) -> Result<(PlanarImage, BinaryMask)> {
    let (h, w) = (image.height, image.width);
    if mask.dims() != (h, w) {
        return Err(Error::Shape(format!("image {h}×{w} vs mask {}×{}", mask.height(), mask.width())));
    }
    if t.is_pure_flip() {
        let src = |y: usize, x: usize| (if t.vflip { h - 1 - y } else { y }, if t.hflip { w - 1 - x } else { x });
        let mut out = image.clone();
        for c in 0..image.channels {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = src(y, x);
                    out.data[(c * h + y) * w + x] = image.data[(c * h + sy) * w + sx];
                }
            }
        }
        let m = BinaryMask::from_fn(h, w, |y, x| {
            let (sy, sx) = src(y, x);
            mask.get(sy, sx)
        });
        return Ok((out, m));
    }
    let map = t.inverse_map(h, w);
    let mask_plane: Vec<f32> = mask.values().iter().map(|&v| v as u8 as f32).collect();
    let mut out = PlanarImage { data: vec![0.0; image.data.len()], ..image.clone() };
    let mut out_mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = map(y as f64, x as f64);
            for c in 0..image.channels {
                let plane = &image.data[c * h * w..(c + 1) * h * w];
                out.data[(c * h + y) * w + x] = bilinear(plane, h, w, sy, sx);
            }
            out_mask.set(y, x, bilinear(&mask_plane, h, w, sy, sx) >= 0.5);
        }
    }
    Ok((out, out_mask))
}

/// Samples a transform from `spec` and applies it identically to both inputs.
pub fn augment(
    image: &PlanarImage,
    mask: &BinaryMask,
    spec: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<(PlanarImage, BinaryMask)> {
    let t = spec.sample(rng);
    apply_transform(image, mask, &t)
}

/// Axis-aligned region; `top/left/height/width` already include the margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub margin: usize,
}

impl CropRegion {
    pub fn full(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, height, width, margin: 0 }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }

    fn check_within(&self, h: usize, w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > h || self.left + self.width > w {
            return Err(Error::Shape(format!("crop region {self:?} outside {h}×{w} frame")));
        }
        Ok(())
    }
}

/// Tight foreground bounding box grown by `margin` on each side, clamped to the frame.
pub fn region_from_mask(mask: &BinaryMask, margin: usize) -> Result<CropRegion> {
    let (r0, r1, c0, c1) = mask.bounding_box().ok_or(Error::EmptyRegion)?;
    let top = r0.saturating_sub(margin);
    let left = c0.saturating_sub(margin);
    let bottom = (r1 + margin).min(mask.height() - 1);
    let right = (c1 + margin).min(mask.width() - 1);
    Ok(CropRegion { top, left, height: bottom - top + 1, width: right - left + 1, margin })
}

pub fn crop_by_region(image: &RgbImage, region: &CropRegion) -> Result<RgbImage> {
    region.check_within(image.height() as usize, image.width() as usize)?;
    Ok(imageops::crop_imm(image, region.left as u32, region.top as u32, region.width as u32, region.height as u32).to_image())
}

pub fn crop_mask(mask: &BinaryMask, region: &CropRegion) -> Result<BinaryMask> {
    region.check_within(mask.height(), mask.width())?;
    Ok(BinaryMask::from_fn(region.height, region.width, |r, c| mask.get(region.top + r, region.left + c)))
}

/// Places a region-sized mask back into an otherwise empty `height×width` frame.
pub fn paste_back(mask: &BinaryMask, region: &CropRegion, height: usize, width: usize) -> Result<BinaryMask> {
    region.check_within(height, width)?;
    if mask.dims() != (region.height, region.width) {
        return Err(Error::Shape(format!(
            "mask {}×{} does not match region {}×{}",
            mask.height(),
            mask.width(),
            region.height,
            region.width
        )));
    }
    Ok(BinaryMask::from_fn(height, width, |r, c| {
        region.contains(r, c) && mask.get(r - region.top, c - region.left)
    }))
}

/// Bilinear resize.
pub fn resize_image(image: &RgbImage, height: usize, width: usize) -> RgbImage {
    if image.dimensions() == (width as u32, height as u32) {
        return image.clone();
    }
    imageops::resize(image, width as u32, height as u32, imageops::FilterType::Triangle)
}

/// Nearest-neighbour resize sampling pixel centres.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let src = |d: usize, n_dst: usize, n_src: usize| (((2 * d + 1) * n_src) / (2 * n_dst)).min(n_src - 1);
    BinaryMask::from_fn(height, width, |r, c| mask.get(src(r, height, h), src(c, width, w)))
}
