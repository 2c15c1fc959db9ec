//! Evaluation tables, best/worst case panels and sweep plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{human_agreement, load_image, DatasetManifest, Organ, Split};
use crate::error::{Error, Result};
use crate::metrics::{binary_dice, iou, BinaryMask};
use crate::model::CascadeSpec;
use crate::pipeline::{disc_region_or_full, load_ground_truth, predict_cup_in_region, predict_native, Preprocessing};
use crate::preprocess::DEFAULT_CROP_MARGIN;
use crate::training::{mean, ImageMetric, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub dataset: String,
    pub organ: Organ,
    pub iou: f64,
    pub dice: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    /// Why expected rows are missing, e.g. no cup annotations.
    pub notes: Vec<String>,
}

impl EvalTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | dataset | organ | IOU | Dice | images |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {} | {:.4} | {:.4} | {} |", r.variant, r.dataset, r.organ, r.iou, r.dice, r.n_images);
        }
        for n in &self.notes {
            let _ = writeln!(s, "\nNote: {n}");
        }
        s
    }
}

/// A reference score reported for the original method; kept apart from
/// computed rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedRow {
    pub variant: &'static str,
    pub dataset: &'static str,
    pub organ: Organ,
    pub iou: f64,
    pub dice: f64,
}

const RES15: &str = "Stack-U-Net (15 Res-U-Net blocks)";
const UNET15: &str = "Stack-U-Net (15 U-Net blocks)";

/// Published reference scores (disc, cup and private-dataset tables).
pub fn published_results() -> Vec<PublishedRow> {
    use Organ::{Cup, Disc};
    let row = |variant, dataset, organ, iou, dice| PublishedRow { variant, dataset, organ, iou, dice };
    vec![
        row(RES15, "DRIONS-DB", Disc, 0.92, 0.96),
        row(RES15, "RIM-ONE v.3", Disc, 0.91, 0.95),
        row(RES15, "DRISHTI-GS", Disc, 0.95, 0.97),
        row(UNET15, "DRIONS-DB", Disc, 0.90, 0.95),
        row(UNET15, "RIM-ONE v.3", Disc, 0.92, 0.96),
        row(UNET15, "DRISHTI-GS", Disc, 0.94, 0.97),
        row(RES15, "DRISHTI-GS", Cup, 0.80, 0.89),
        row(RES15, "RIM-ONE v.3", Cup, 0.73, 0.84),
        row(UNET15, "DRISHTI-GS", Cup, 0.77, 0.86),
        row(UNET15, "RIM-ONE v.3", Cup, 0.72, 0.83),
        row(RES15, "UCSF-DB", Disc, 0.92, 0.96),
        row(RES15, "UCSF-DB", Cup, 0.73, 0.84),
        row(UNET15, "UCSF-DB", Disc, 0.92, 0.96),
        row(UNET15, "UCSF-DB", Cup, 0.74, 0.85),
        row("Mean Human-vs.-Human", "UCSF-DB", Disc, 0.81, 0.87),
        row("Mean Human-vs.-Human", "UCSF-DB", Cup, 0.53, 0.66),
    ]
}

pub fn write_published_csv(path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "variant", "dataset", "organ", "iou", "dice"])?;
    for r in published_results() {
        w.write_record(["published", r.variant, r.dataset, &r.organ.to_string(), &r.iou.to_string(), &r.dice.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-image metrics with dataset and organ, as saved next to an [`EvalTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub id: String,
    pub dataset: String,
    pub organ: Organ,
    pub iou: f64,
    pub dice: f64,
    /// Cup evaluated on the full frame because no disc region was found.
    pub fallback: bool,
}

pub fn write_per_image_csv(path: &Path, rows: &[PerImageRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_per_image_csv(path: &Path) -> Result<Vec<PerImageRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mean IOU/Dice per `(dataset, organ)`.
pub fn aggregate(variant: &str, rows: &[PerImageRow]) -> Vec<EvalRow> {
    let mut groups: BTreeMap<(String, Organ), Vec<&PerImageRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.dataset.clone(), r.organ)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, organ), g)| EvalRow {
            variant: variant.to_string(),
            dataset,
            organ,
            iou: mean(g.iter().map(|r| r.iou)),
            dice: mean(g.iter().map(|r| r.dice)),
            n_images: g.len(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Best,
    Worst,
}

#[derive(Debug, Clone)]
pub struct CasePanel {
    pub id: String,
    pub organ: Organ,
    pub rank: Rank,
    pub iou: f64,
    pub input: RgbImage,
    pub predicted: BinaryMask,
    pub truth: BinaryMask,
}

impl CasePanel {
    /// Input, prediction and ground truth side by side.
    pub fn render(&self) -> RgbImage {
        let (w, h) = self.input.dimensions();
        let mut out = RgbImage::new(3 * w, h);
        image::imageops::replace(&mut out, &self.input, 0, 0);
        for (k, m) in [&self.predicted, &self.truth].into_iter().enumerate() {
            image::imageops::replace(&mut out, &mask_to_rgb(m), ((k + 1) as u32 * w) as i64, 0);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render().save(path).map_err(|e| Error::image(path, e))
    }
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]))
}

fn mask_to_rgb(mask: &BinaryMask) -> RgbImage {
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        let v = if mask.get(y as usize, x as usize) { 255 } else { 0 };
        Rgb([v, v, v])
    })
}

/// Indices of the highest- and lowest-IOU entries; ties keep the first.
pub fn best_and_worst(metrics: &[ImageMetric]) -> Option<(usize, usize)> {
    if metrics.is_empty() {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, m) in metrics.iter().enumerate() {
        if m.iou > metrics[best].iou {
            best = i;
        }
        if m.iou < metrics[worst].iou {
            worst = i;
        }
    }
    Some((best, worst))
}

/// Label for a model variant in tables.
pub fn variant_name(spec: &CascadeSpec) -> String {
    let kind = match spec.block.kind {
        crate::model::BlockKind::Unet => "U-Net",
        crate::model::BlockKind::ResUnet => "Res-U-Net",
    };
    let plural = if spec.n_blocks == 1 { "block" } else { "blocks" };
    let skip = if spec.long_skip { "w/ skip" } else { "w/o skip" };
    format!("Stack-U-Net ({} {kind} {plural}) {skip}", spec.n_blocks)
}

/// A checkpoint plus the settings it was trained with.
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub resolution: (usize, usize),
    pub preprocessing: Preprocessing,
    pub crop_margin: usize,
}

impl LoadedModel {
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        let resolution = checkpoint
            .resolution()
            .ok_or_else(|| Error::Config("checkpoint does not record its training resolution".into()))?;
        let preprocessing = match checkpoint.metadata.get("preprocessing") {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("checkpoint preprocessing: {e}")))?,
            None => Preprocessing::default(),
        };
        let crop_margin = match checkpoint.metadata.get("crop_margin") {
            Some(m) => m.parse().map_err(|_| Error::Config(format!("checkpoint crop_margin {m:?}")))?,
            None => DEFAULT_CROP_MARGIN,
        };
        Ok(Self { checkpoint, resolution, preprocessing, crop_margin })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(crate::checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub table: EvalTable,
    pub per_image: Vec<PerImageRow>,
    pub panels: Vec<CasePanel>,
}

/// Split evaluated when none is requested: val, else test, else everything.
pub fn default_eval_indices(manifest: &DatasetManifest, split: Option<Split>) -> Vec<usize> {
    match split {
        Some(s) => manifest.indices(s),
        None => [Split::Val, Split::Test]
            .into_iter()
            .map(|s| manifest.indices(s))
            .find(|v| !v.is_empty())
            .unwrap_or_else(|| (0..manifest.len()).collect()),
    }
}

struct Predicted {
    idx: usize,
    disc: Option<(BinaryMask, BinaryMask)>,
    cup: Option<(BinaryMask, BinaryMask, bool)>,
}

/// Evaluates a disc and/or cup model at native resolution. Cup crops come
/// from the disc model's prediction when it is given, else from ground truth.
pub fn evaluate_models(
    disc: Option<&LoadedModel>,
    cup: Option<&LoadedModel>,
    manifest: &DatasetManifest,
    indices: &[usize],
    threshold: f64,
) -> Result<Evaluation> {
    if disc.is_none() && cup.is_none() {
        return Err(Error::Config("at least one checkpoint is required".into()));
    }
    let mut preds = Vec::new();
    for &idx in indices {
        let record = &manifest.records[idx];
        let raw = load_image(&manifest.resolve(&record.image_path))?;
        let disc_gt = load_ground_truth(manifest, record, Organ::Disc)?.map(|(m, _)| m);
        let cup_gt = load_ground_truth(manifest, record, Organ::Cup)?.map(|(m, _)| m);
        let disc_pred = match disc {
            Some(m) => Some(predict_native(&m.checkpoint.model, &m.preprocessing.normalize(&raw), m.resolution, threshold)?),
            None => None,
        };
        let cup = match (cup, &cup_gt) {
            (Some(m), Some(gt)) => {
                let locator = disc_pred.clone().or_else(|| disc_gt.clone()).unwrap_or_else(|| BinaryMask::zeros(gt.height(), gt.width()));
                let (region, fallback) = disc_region_or_full(&locator, m.crop_margin);
                let normalized = m.preprocessing.normalize(&raw);
                let p = predict_cup_in_region(&m.checkpoint.model, &normalized, &region, m.resolution, threshold)?;
                Some((p, gt.clone(), fallback))
            }
            _ => None,
        };
        let disc = match (disc_pred, disc_gt) {
            (Some(p), Some(gt)) => Some((p, gt)),
            _ => None,
        };
        preds.push(Predicted { idx, disc, cup });
    }

    let variant = disc.or(cup).map(|m| variant_name(m.checkpoint.model.spec())).unwrap_or_default();
    let mut per_image = Vec::new();
    let mut per_organ: BTreeMap<Organ, Vec<(usize, ImageMetric)>> = BTreeMap::new();
    for (k, p) in preds.iter().enumerate() {
        let record = &manifest.records[p.idx];
        let mut push = |organ, pred: &BinaryMask, gt: &BinaryMask, fallback| -> Result<()> {
            let m = ImageMetric { id: record.id(), iou: iou(pred, gt)?, dice: binary_dice(pred, gt)? };
            per_image.push(PerImageRow { id: m.id.clone(), dataset: record.dataset_tag.clone(), organ, iou: m.iou, dice: m.dice, fallback });
            per_organ.entry(organ).or_default().push((k, m));
            Ok(())
        };
        if let Some((pred, gt)) = &p.disc {
            push(Organ::Disc, pred, gt, false)?;
        }
        if let Some((pred, gt, fallback)) = &p.cup {
            push(Organ::Cup, pred, gt, *fallback)?;
        }
    }

    let mut table = EvalTable { rows: aggregate(&variant, &per_image), notes: Vec::new() };
    for (organ, wanted) in [(Organ::Disc, disc.is_some()), (Organ::Cup, cup.is_some())] {
        if wanted && !per_organ.contains_key(&organ) {
            table.notes.push(format!("no {organ} annotations in the evaluated records; {organ} row omitted"));
        }
    }
    let subset = DatasetManifest::new(manifest.root.clone(), indices.iter().map(|&i| manifest.records[i].clone()).collect());
    let agreement = human_agreement(&subset)?;
    for (organ, a) in [(Organ::Disc, agreement.disc), (Organ::Cup, agreement.cup)] {
        if let Some(a) = a {
            let tag = "all";
            table.rows.push(EvalRow { variant: "Mean Human-vs.-Human".into(), dataset: tag.into(), organ, iou: a.iou, dice: a.dice, n_images: a.records });
            table.rows.push(EvalRow {
                variant: "Mean Human-vs.-Human (soft consensus)".into(),
                dataset: tag.into(),
                organ,
                iou: a.soft_iou,
                dice: a.soft_dice,
                n_images: a.records,
            });
        }
    }

    let mut panels = Vec::new();
    for (organ, entries) in &per_organ {
        let metrics: Vec<ImageMetric> = entries.iter().map(|(_, m)| m.clone()).collect();
        let Some((b, w)) = best_and_worst(&metrics) else { continue };
        for (rank, j) in [(Rank::Best, b), (Rank::Worst, w)] {
            let p = &preds[entries[j].0];
            let record = &manifest.records[p.idx];
            let input = load_image(&manifest.resolve(&record.image_path))?;
            let (predicted, truth) = match organ {
                Organ::Disc => p.disc.clone(),
                Organ::Cup => p.cup.clone().map(|(a, b, _)| (a, b)),
            }
            .expect("metric implies prediction");
            panels.push(CasePanel { id: record.id(), organ: *organ, rank, iou: metrics[j].iou, input, predicted, truth });
        }
    }
    Ok(Evaluation { table, per_image, panels })
}

/// Scores saved prediction masks named `{id}_{organ}.png` in `dir`.
pub fn evaluate_prediction_dir(dir: &Path, manifest: &DatasetManifest, indices: &[usize], variant: &str) -> Result<Evaluation> {
    let mut per_image = Vec::new();
    let mut notes = Vec::new();
    for organ in [Organ::Disc, Organ::Cup] {
        let mut n = 0;
        for &idx in indices {
            let record = &manifest.records[idx];
            let Some((gt, _)) = load_ground_truth(manifest, record, organ)? else { continue };
            let path = dir.join(format!("{}_{organ}.png", record.id()));
            if !path.exists() {
                continue;
            }
            let pred = crate::data::load_mask(&path)?;
            if pred.dims() != gt.dims() {
                return Err(Error::Shape(format!("{}: prediction {:?} vs ground truth {:?}", path.display(), pred.dims(), gt.dims())));
            }
            per_image.push(PerImageRow {
                id: record.id(),
                dataset: record.dataset_tag.clone(),
                organ,
                iou: iou(&pred, &gt)?,
                dice: binary_dice(&pred, &gt)?,
                fallback: false,
            });
            n += 1;
        }
        if n == 0 {
            notes.push(format!("no {organ} predictions with matching annotations; {organ} row omitted"));
        }
    }
    Ok(Evaluation { table: EvalTable { rows: aggregate(variant, &per_image), notes }, per_image, panels: Vec::new() })
}

const PLOT_COLORS: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([174, 199, 232]), Rgb([214, 39, 40]), Rgb([255, 152, 150])];

/// Line plot of a block sweep: x is the block count, y spans [0, 1]. Series
/// colors: disc IOU dark blue, disc Dice light blue, cup IOU dark red, cup
/// Dice light red.
pub fn plot_sweep(rows: &[SweepRow], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 30.0;
    let (w, h) = (width as f32 - 2.0 * margin, height as f32 - 2.0 * margin);
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line_segment_mut(&mut img, (margin, margin + h), (margin + w, margin + h), axis);
    for t in 0..=10 {
        let y = margin + h * (1.0 - t as f32 / 10.0);
        draw_line_segment_mut(&mut img, (margin - 4.0, y), (margin, y), axis);
    }
    if rows.is_empty() {
        return img;
    }
    let xs: Vec<f32> = rows.iter().map(|r| r.n_blocks as f32).collect();
    let (lo, hi) = xs.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let px = |x: f32| if hi > lo { margin + w * (x - lo) / (hi - lo) } else { margin + w / 2.0 };
    let py = |v: f64| margin + h * (1.0 - v.clamp(0.0, 1.0) as f32);
    let series: [Vec<Option<f64>>; 4] = [
        rows.iter().map(|r| Some(r.disc_iou)).collect(),
        rows.iter().map(|r| Some(r.disc_dice)).collect(),
        rows.iter().map(|r| r.cup_iou).collect(),
        rows.iter().map(|r| r.cup_dice).collect(),
    ];
    for (s, color) in series.iter().zip(PLOT_COLORS) {
        let pts: Vec<(f32, f32)> = s.iter().zip(&xs).filter_map(|(v, &x)| v.filter(|v| v.is_finite()).map(|v| (px(x), py(v)))).collect();
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            draw_filled_circle_mut(&mut img, (x.round() as i32, y.round() as i32), 3, color);
        }
    }
    draw_hollow_rect_mut(&mut img, Rect::at(0, 0).of_size(width, height), Rgb([200, 200, 200]));
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(id: &str, iou: f64) -> ImageMetric {
        ImageMetric { id: id.into(), iou, dice: 2.0 * iou / (1.0 + iou) }
    }

    #[test]
    fn best_and_worst_by_iou() {
        let m = [metric("a", 0.5), metric("b", 0.9), metric("c", 0.1), metric("d", 0.9)];
        assert_eq!(best_and_worst(&m), Some((1, 2)));
        assert!(m[2].iou <= m[1].iou);
        assert_eq!(best_and_worst(&[]), None);
    }

    #[test]
    fn aggregate_matches_recomputed_means_from_csv() {
        let rows: Vec<PerImageRow> = (0..7)
            .map(|i| PerImageRow {
                id: format!("{i}"),
                dataset: if i % 2 == 0 { "x".into() } else { "y".into() },
                organ: if i < 4 { Organ::Disc } else { Organ::Cup },
                iou: i as f64 / 10.0,
                dice: i as f64 / 9.0,
                fallback: false,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("per_image.csv");
        write_per_image_csv(&p, &rows).unwrap();
        let back = read_per_image_csv(&p).unwrap();
        assert_eq!(back, rows);
        let table = aggregate("v", &back);
        assert_eq!(table.len(), 4);
        for r in &table {
            let g: Vec<&PerImageRow> = rows.iter().filter(|x| x.dataset == r.dataset && x.organ == r.organ).collect();
            let want = g.iter().map(|x| x.iou).sum::<f64>() / g.len() as f64;
            assert!((r.iou - want).abs() < 1e-12);
            assert_eq!(r.n_images, g.len());
            assert!((0.0..=1.0).contains(&r.iou) && (0.0..=1.0).contains(&r.dice));
        }
    }

    #[test]
    fn published_table_contains_reference_value() {
        let rows = published_results();
        assert!(rows.iter().any(|r| r.variant == RES15 && r.dataset == "DRIONS-DB" && r.organ == Organ::Disc && r.iou == 0.92));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("published.csv");
        write_published_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().skip(1).all(|l| l.starts_with("published,")));
    }

    #[test]
    fn panel_layout_and_plot_render() {
        let input = RgbImage::from_pixel(4, 3, Rgb([10, 20, 30]));
        let truth = BinaryMask::from_fn(3, 4, |y, _| y == 1);
        let panel = CasePanel { id: "a".into(), organ: Organ::Disc, rank: Rank::Best, iou: 1.0, input, predicted: truth.clone(), truth };
        let img = panel.render();
        assert_eq!(img.dimensions(), (12, 3));
        assert_eq!(img.get_pixel(0, 0).0, [10, 20, 30]);
        assert_eq!(img.get_pixel(4, 1).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(8, 0).0, [0, 0, 0]);

        let one = [SweepRow { n_blocks: 1, disc_iou: 0.5, disc_dice: 0.6, cup_iou: None, cup_dice: None }];
        let plot = plot_sweep(&one, 200, 150);
        assert_eq!(plot.dimensions(), (200, 150));
        assert!(plot.pixels().any(|p| *p == PLOT_COLORS[0]));
    }

    #[test]
    fn variant_names() {
        let spec = CascadeSpec::default();
        assert_eq!(variant_name(&spec), "Stack-U-Net (15 U-Net blocks) w/ skip");
    }
}
