//! Rendered toy fundus images with elliptical discs and cups, for smoke tests
//! and desk-scale training runs.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{save_mask, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Images are assigned to persons round-robin.
    pub n_persons: usize,
    /// Annotators per organ; each sees slightly jittered boundaries.
    pub annotators: usize,
    pub with_cup: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_images: 60, height: 64, width: 64, n_persons: 20, annotators: 1, with_cup: true, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub disc: Vec<BinaryMask>,
    pub cup: Vec<BinaryMask>,
    pub person: String,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    /// Normalized radial coordinate; ≤ 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        (((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)).sqrt()
    }

    fn jitter(&self, rng: &mut impl Rng) -> Self {
        Self {
            cy: self.cy + rng.random_range(-1.0..=1.0),
            cx: self.cx + rng.random_range(-1.0..=1.0),
            ry: self.ry * rng.random_range(0.97..=1.03),
            rx: self.rx * rng.random_range(0.97..=1.03),
        }
    }

    fn mask(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| self.rho(r as f64, c as f64) <= 1.0)
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn render_sample(rng: &mut impl Rng, height: usize, width: usize, annotators: usize, with_cup: bool) -> (RgbImage, Vec<BinaryMask>, Vec<BinaryMask>) {
    let (h, w) = (height as f64, width as f64);
    let ry = h * rng.random_range(0.14..0.22);
    let disc = Ellipse {
        cy: h * rng.random_range(0.35..0.65),
        cx: w * rng.random_range(0.35..0.65),
        ry,
        rx: ry * rng.random_range(0.85..1.15) * w / h,
    };
    let ratio = rng.random_range(0.3..0.75);
    let cup = Ellipse {
        cy: disc.cy + rng.random_range(-0.1..0.1) * disc.ry * (1.0 - ratio),
        cx: disc.cx + rng.random_range(-0.1..0.1) * disc.rx * (1.0 - ratio),
        ry: disc.ry * ratio,
        rx: disc.rx * ratio * rng.random_range(0.9..1.1),
    };
    let base = [rng.random_range(140.0..200.0), rng.random_range(50.0..90.0), rng.random_range(20.0..45.0)];
    let disc_rgb = [rng.random_range(225.0..250.0), rng.random_range(170.0..210.0), rng.random_range(110.0..150.0)];
    let cup_rgb = [255.0, rng.random_range(230.0..250.0), rng.random_range(200.0..230.0)];
    let gain = rng.random_range(0.7..1.1);
    let image = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (yf, xf) = (y as f64, x as f64);
        let r2 = ((yf - h / 2.0) / h).powi(2) + ((xf - w / 2.0) / w).powi(2);
        let vignette = (1.0 - 1.6 * r2).max(0.2);
        let d = 1.0 - smoothstep(0.85, 1.1, disc.rho(yf, xf));
        let c = if with_cup { 1.0 - smoothstep(0.8, 1.15, cup.rho(yf, xf)) } else { 0.0 };
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let bg = base[ch] * vignette;
            let v = bg * (1.0 - d) + disc_rgb[ch] * d;
            let v = v * (1.0 - c) + cup_rgb[ch] * c;
            let noise = rng.random_range(-8.0..8.0);
            px[ch] = ((v * gain) + noise).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    });
    let mut discs = Vec::with_capacity(annotators);
    let mut cups = Vec::with_capacity(annotators);
    for a in 0..annotators {
        let (de, ce) = if a == 0 { (disc, cup) } else { (disc.jitter(rng), cup.jitter(rng)) };
        discs.push(de.mask(height, width));
        if with_cup {
            cups.push(ce.mask(height, width));
        }
    }
    (image, discs, cups)
}

pub fn generate(spec: &SyntheticSpec) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_images)
        .map(|i| {
            let (image, disc, cup) = render_sample(&mut rng, spec.height, spec.width, spec.annotators.max(1), spec.with_cup);
            SyntheticSample { image, disc, cup, person: format!("person{:03}", i % spec.n_persons.max(1)) }
        })
        .collect()
}

/// Renders the dataset into `dir` (images/, masks/) and writes `manifest.csv`.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec) -> Result<(PathBuf, DatasetManifest)> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(spec.n_images);
    for (i, s) in generate(spec).into_iter().enumerate() {
        let image_path = format!("images/{i:04}.png");
        let full = dir.join(&image_path);
        s.image.save(&full).map_err(|e| Error::image(full, e))?;
        let mut disc_paths = Vec::new();
        for (a, m) in s.disc.iter().enumerate() {
            let p = format!("masks/{i:04}_disc_{a}.png");
            save_mask(&dir.join(&p), m)?;
            disc_paths.push(p);
        }
        let mut cup_paths = Vec::new();
        for (a, m) in s.cup.iter().enumerate() {
            let p = format!("masks/{i:04}_cup_{a}.png");
            save_mask(&dir.join(&p), m)?;
            cup_paths.push(p);
        }
        records.push(SampleRecord {
            image_path,
            disc_mask_paths: disc_paths,
            cup_mask_paths: cup_paths,
            person_id: s.person,
            dataset_tag: "synthetic".into(),
            split: None,
        });
    }
    let manifest = DatasetManifest::new(dir, records);
    let path = dir.join("manifest.csv");
    manifest.write(&path)?;
    Ok((path, manifest))
}
