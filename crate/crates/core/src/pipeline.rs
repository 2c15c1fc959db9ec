//! Turning manifest records into network-ready samples and network outputs back
//! into full-frame masks.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::{average_annotators, load_image, load_mask, DatasetManifest, Organ, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{binarize, BinaryMask, ProbabilityMap};
use crate::model::StackUNet;
use crate::preprocess::{
    clahe, crop_by_region, crop_mask, paste_back, region_from_mask, resize_image, resize_mask, ClaheParams, CropRegion,
    PlanarImage,
};
use crate::tensor::Tensor;

/// A preprocessed image/target pair at network resolution.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub image: PlanarImage,
    pub target: BinaryMask,
    /// Annotator average, when soft targets are requested.
    pub soft_target: Option<ProbabilityMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocessing {
    pub clahe: bool,
    pub clahe_params: ClaheParams,
    pub soft_targets: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { clahe: true, clahe_params: ClaheParams::default(), soft_targets: false }
    }
}

impl Preprocessing {
    pub fn normalize(&self, image: &RgbImage) -> RgbImage {
        if self.clahe {
            clahe(image, &self.clahe_params)
        } else {
            image.clone()
        }
    }
}

/// Averaged annotation thresholded at 0.5, plus the soft average itself.
pub fn load_ground_truth(manifest: &DatasetManifest, record: &SampleRecord, organ: Organ) -> Result<Option<(BinaryMask, ProbabilityMap)>> {
    let paths = record.masks(organ);
    if paths.is_empty() {
        return Ok(None);
    }
    let masks = paths.iter().map(|p| load_mask(&manifest.resolve(p))).collect::<Result<Vec<_>>>()?;
    let avg = average_annotators(&masks)?;
    Ok(Some((binarize(&avg, 0.5), avg)))
}

fn soft_resize(masks: &[BinaryMask], h: usize, w: usize) -> Result<ProbabilityMap> {
    let resized: Vec<BinaryMask> = masks.iter().map(|m| resize_mask(m, h, w)).collect();
    average_annotators(&resized)
}

fn build_sample(
    id: String,
    image: &RgbImage,
    masks: &[BinaryMask],
    resolution: (usize, usize),
    soft: bool,
) -> Result<PreparedSample> {
    let (h, w) = resolution;
    let planar = PlanarImage::from_rgb(&resize_image(image, h, w));
    let avg = average_annotators(masks)?;
    let target = resize_mask(&binarize(&avg, 0.5), h, w);
    let soft_target = if soft { Some(soft_resize(masks, h, w)?) } else { None };
    Ok(PreparedSample { id, image: planar, target, soft_target })
}

/// Full-frame sample for `organ`; `None` when the record has no such masks.
pub fn prepare_sample(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    organ: Organ,
    resolution: (usize, usize),
    pre: &Preprocessing,
) -> Result<Option<PreparedSample>> {
    let paths = record.masks(organ);
    if paths.is_empty() {
        return Ok(None);
    }
    let image = pre.normalize(&load_image(&manifest.resolve(&record.image_path))?);
    let masks = paths.iter().map(|p| load_mask(&manifest.resolve(p))).collect::<Result<Vec<_>>>()?;
    build_sample(record.id(), &image, &masks, resolution, pre.soft_targets).map(Some)
}

/// Cup sample cropped to `region` of the (normalized) full frame.
pub fn prepare_cup_crop(
    manifest: &DatasetManifest,
    record: &SampleRecord,
    normalized: &RgbImage,
    region: &CropRegion,
    resolution: (usize, usize),
    pre: &Preprocessing,
) -> Result<Option<PreparedSample>> {
    let paths = record.masks(Organ::Cup);
    if paths.is_empty() {
        return Ok(None);
    }
    let masks = paths
        .iter()
        .map(|p| load_mask(&manifest.resolve(p)).and_then(|m| crop_mask(&m, region)))
        .collect::<Result<Vec<_>>>()?;
    let crop = crop_by_region(normalized, region)?;
    build_sample(record.id(), &crop, &masks, resolution, pre.soft_targets).map(Some)
}

/// Probabilities at network resolution for an already-normalized image.
pub fn predict_probability(model: &StackUNet, image: &RgbImage, resolution: (usize, usize)) -> Result<ProbabilityMap> {
    let (h, w) = resolution;
    let planar = PlanarImage::from_rgb(&resize_image(image, h, w));
    let out = model.forward(&planar.to_tensor())?;
    ProbabilityMap::from_f32(h, w, out.data())
}

/// Batched variant of [`predict_probability`].
pub fn predict_batch(model: &StackUNet, images: &[PlanarImage]) -> Result<Vec<ProbabilityMap>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (images[0].height, images[0].width);
    let batch = Tensor::stack(&images.iter().map(PlanarImage::to_tensor).collect::<Vec<_>>());
    let out = model.forward(&batch)?;
    (0..images.len()).map(|i| ProbabilityMap::from_f32(h, w, out.sample(i))).collect()
}

/// Thresholded prediction resized (nearest) back to the image's own size.
pub fn predict_native(model: &StackUNet, image: &RgbImage, resolution: (usize, usize), threshold: f64) -> Result<BinaryMask> {
    let prob = predict_probability(model, image, resolution)?;
    let (w, h) = image.dimensions();
    Ok(resize_mask(&binarize(&prob, threshold), h as usize, w as usize))
}

/// Cup prediction inside `region`, pasted back into the full frame.
pub fn predict_cup_in_region(
    model: &StackUNet,
    normalized: &RgbImage,
    region: &CropRegion,
    resolution: (usize, usize),
    threshold: f64,
) -> Result<BinaryMask> {
    let crop = crop_by_region(normalized, region)?;
    let local = predict_native(model, &crop, resolution, threshold)?;
    let (w, h) = normalized.dimensions();
    paste_back(&local, region, h as usize, w as usize)
}

/// Region around a disc mask, or the whole frame (flagged) when it is empty.
pub fn disc_region_or_full(disc: &BinaryMask, margin: usize) -> (CropRegion, bool) {
    match region_from_mask(disc, margin) {
        Ok(r) => (r, false),
        Err(Error::EmptyRegion) => (CropRegion::full(disc.height(), disc.width()), true),
        Err(_) => unreachable!("region_from_mask only fails on empty masks"),
    }
}
