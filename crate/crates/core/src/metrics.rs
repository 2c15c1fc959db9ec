//! Soft Dice, the log-Dice training loss, binary Dice/IOU and the cup-to-disc ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing used by the training loss.
pub const DEFAULT_LOSS_EPS: f64 = 1.0;
/// Pixels with probability at or above this value are foreground.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// CDR at or above this value flags the eye as a glaucoma suspect.
pub const GLAUCOMA_CDR_THRESHOLD: f64 = 0.65;

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("probability map must be non-empty, got {height}×{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { height, width, values: vec![value; height * width] }
    }

    /// Converts network output; values are clamped into `[0, 1]`.
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// A binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}×{width} mask", values.len())));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.values[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|v| *v)
    }

    /// Inclusive `(min_row, max_row, min_col, max_col)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    /// Vertical extent of the foreground in pixels (0 for an empty mask).
    pub fn vertical_extent(&self) -> usize {
        self.bounding_box().map_or(0, |(r0, r1, _, _)| r1 - r0 + 1)
    }

    pub fn to_probability(&self) -> ProbabilityMap {
        ProbabilityMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Foreground centroid `(row, col)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr / n as f64, sc / n as f64))
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{}×{} vs {}×{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("dice smoothing eps must be positive, got {eps}")));
    }
    Ok(())
}

/// `(2Σab + eps, Σa² + Σb² + eps)`.
fn dice_terms(a: &[f64], b: impl Iterator<Item = f64>, eps: f64) -> (f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (2.0 * ab + eps, aa + bb + eps)
}

/// Smoothed real-valued Dice `(2Σab + eps) / (Σa² + Σb² + eps)`.
pub fn soft_dice(a: &ProbabilityMap, b: &BinaryMask, eps: f64) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    check_eps(eps)?;
    let (num, den) = dice_terms(&a.values, b.values.iter().map(|&v| v as u8 as f64), eps);
    Ok(num / den)
}

/// [`soft_dice`] against a real-valued target such as an averaged annotation.
pub fn soft_dice_real(a: &ProbabilityMap, b: &ProbabilityMap, eps: f64) -> Result<f64> {
    check_dims(a.dims(), b.dims())?;
    check_eps(eps)?;
    let (num, den) = dice_terms(&a.values, b.values.iter().copied(), eps);
    Ok(num / den)
}

/// Training loss `-ln(soft_dice)`.
pub fn log_dice_loss(a: &ProbabilityMap, b: &BinaryMask, eps: f64) -> Result<f64> {
    Ok(-soft_dice(a, b, eps)?.ln())
}

/// Loss and its gradient with respect to every prediction value, for raw
/// slices of equal length. Targets may be real-valued.
///
/// With `S = 2Σab + eps` and `T = Σa² + Σb² + eps`, `∂l/∂a = 2a/T − 2b/S`.
pub fn log_dice_loss_with_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    check_eps(eps)?;
    let (s, t) = dice_terms(pred, target.iter().copied(), eps);
    let loss = t.ln() - s.ln();
    let grad = pred.iter().zip(target).map(|(&a, &b)| 2.0 * a / t - 2.0 * b / s).collect();
    Ok((loss, grad))
}

/// `(|A∩B|, |A|, |B|)`.
fn set_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_dims(a.dims(), b.dims())?;
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn binary_dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = set_counts(a, b)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = set_counts(a, b)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn binarize(a: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask {
        height: a.height,
        width: a.width,
        values: a.values.iter().map(|&v| v >= threshold).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdrResult {
    pub disc_height: usize,
    pub cup_height: usize,
    pub cdr: f64,
    pub glaucoma_suspect: bool,
}

/// Vertical cup-to-disc ratio from the bounding-box heights of both masks.
/// An empty cup yields a ratio of 0.
pub fn cup_to_disc_ratio(disc: &BinaryMask, cup: &BinaryMask, threshold: f64) -> Result<CdrResult> {
    check_dims(disc.dims(), cup.dims())?;
    let disc_height = disc.vertical_extent();
    if disc_height == 0 {
        return Err(Error::NoDiscRegion);
    }
    let cup_height = cup.vertical_extent();
    let cdr = cup_height as f64 / disc_height as f64;
    Ok(CdrResult { disc_height, cup_height, cdr, glaucoma_suspect: cdr >= threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '1')).collect()).unwrap()
    }

    #[test]
    fn soft_dice_identity_and_empty_cases() {
        let ones = BinaryMask::from_fn(2, 2, |_, _| true);
        let d = soft_dice(&ones.to_probability(), &ones, 1e-3).unwrap();
        assert!((d - 1.0).abs() <= 1e-3 / (8.0 + 1e-3));
        let empty = BinaryMask::zeros(2, 2);
        assert_eq!(soft_dice(&empty.to_probability(), &empty, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn soft_dice_half_map_against_diagonal() {
        let a = ProbabilityMap::filled(2, 2, 0.5);
        let b = mask(&["10", "01"]);
        // 2·(0.5 + 0.5) / (4·0.25 + 2) = 2/3
        let d = soft_dice(&a, &b, 1e-12).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-9);
        let l = log_dice_loss(&a, &b, 1e-12).unwrap();
        assert!((l - 1.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_vanishes_on_exact_match() {
        let b = mask(&["0110", "1111"]);
        assert!(log_dice_loss(&b.to_probability(), &b, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn soft_dice_rejects_bad_inputs() {
        let a = ProbabilityMap::filled(2, 2, 0.5);
        assert!(matches!(soft_dice(&a, &BinaryMask::zeros(2, 3), 1.0), Err(Error::Shape(_))));
        assert!(soft_dice(&a, &BinaryMask::zeros(2, 2), 0.0).is_err());
        assert!(ProbabilityMap::new(1, 2, vec![0.2, 1.5]).is_err());
    }

    #[test]
    fn dice_and_iou_on_half_overlap() {
        let a = mask(&["1100", "0000", "0000", "0000"]);
        let b = mask(&["0110", "0000", "0000", "0000"]);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(binary_dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn identical_disjoint_and_empty_masks() {
        let a = mask(&["1100", "0011"]);
        let b = mask(&["0011", "1100"]);
        assert_eq!(binary_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(binary_dice(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::zeros(2, 4);
        assert_eq!(binary_dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        let a = ProbabilityMap::filled(3, 3, 0.5);
        assert_eq!(binarize(&a, 0.5).count(), 9);
        assert_eq!(binarize(&a, 0.51).count(), 0);
    }

    #[test]
    fn cdr_examples() {
        let disc = BinaryMask::from_fn(120, 10, |r, _| (10..110).contains(&r));
        let cup65 = BinaryMask::from_fn(120, 10, |r, c| (20..85).contains(&r) && c > 3);
        let r = cup_to_disc_ratio(&disc, &cup65, GLAUCOMA_CDR_THRESHOLD).unwrap();
        assert_eq!((r.disc_height, r.cup_height), (100, 65));
        assert_eq!(r.cdr, 0.65);
        assert!(r.glaucoma_suspect);

        let same = cup_to_disc_ratio(&disc, &disc, GLAUCOMA_CDR_THRESHOLD).unwrap();
        assert_eq!(same.cdr, 1.0);
        assert!(same.glaucoma_suspect);

        let cup30 = BinaryMask::from_fn(120, 10, |r, _| (40..70).contains(&r));
        let r = cup_to_disc_ratio(&disc, &cup30, GLAUCOMA_CDR_THRESHOLD).unwrap();
        assert!((r.cdr - 0.30).abs() < 1e-12);
        assert!(!r.glaucoma_suspect);

        assert!(matches!(
            cup_to_disc_ratio(&BinaryMask::zeros(120, 10), &cup30, GLAUCOMA_CDR_THRESHOLD),
            Err(Error::NoDiscRegion)
        ));
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..64).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let (_, grad) = log_dice_loss_with_grad(&pred, &target, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..64 {
            let mut p = pred.clone();
            p[i] += h;
            let lp = log_dice_loss_with_grad(&p, &target, 1.0).unwrap().0;
            p[i] -= 2.0 * h;
            let lm = log_dice_loss_with_grad(&p, &target, 1.0).unwrap().0;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-8), "{i}: {num} vs {}", grad[i]);
        }
    }
}
