//! Dataset manifests, mask ingestion, annotator averaging and person-grouped splits.
//!
//! A manifest is a CSV file with the header
//! `image_path,disc_masks,cup_masks,person_id,dataset_tag[,split]`. Mask columns
//! hold `;`-separated paths, one per annotator; relative paths resolve against
//! the manifest's directory. An empty `person_id` defaults to the image stem.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{binary_dice, iou, BinaryMask, ProbabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Fold(usize),
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
            Split::Test => f.write_str("test"),
            Split::Fold(i) => write!(f, "fold{i}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => other
                .strip_prefix("fold")
                .and_then(|i| i.parse().ok())
                .map(Split::Fold)
                .ok_or_else(|| Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One fundus image with its annotations. Paths are stored as written in the
/// manifest; use [`DatasetManifest::resolve`] to locate files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub disc_mask_paths: Vec<String>,
    pub cup_mask_paths: Vec<String>,
    pub person_id: String,
    pub dataset_tag: String,
    pub split: Option<Split>,
}

impl SampleRecord {
    /// File stem used as a sample identifier in reports.
    pub fn id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }

    pub fn masks(&self, organ: Organ) -> &[String] {
        match organ {
            Organ::Disc => &self.disc_mask_paths,
            Organ::Cup => &self.cup_mask_paths,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Organ {
    Disc,
    Cup,
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Organ::Disc => "disc",
            Organ::Cup => "cup",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    /// How the split assignments were made; empty when they came from the file.
    pub split_origin: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_path: String,
    disc_masks: String,
    #[serde(default)]
    cup_masks: String,
    #[serde(default)]
    person_id: String,
    #[serde(default)]
    dataset_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

fn split_paths(s: &str) -> Vec<String> {
    s.split(';').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect()
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        Self { root: root.into(), records, split_origin: String::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Parses the CSV without touching the referenced files.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut records = Vec::new();
        let mut errors = Vec::new();
        for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
            let line = i + 2;
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    errors.push(format!("row {line}: malformed: {e}"));
                    continue;
                }
            };
            if row.image_path.is_empty() {
                errors.push(format!("row {line}: empty image_path"));
                continue;
            }
            let split = match row.split.as_deref().filter(|s| !s.is_empty()).map(Split::from_str).transpose() {
                Ok(s) => s,
                Err(e) => {
                    errors.push(format!("row {line}: {e}"));
                    continue;
                }
            };
            let mut rec = SampleRecord {
                disc_mask_paths: split_paths(&row.disc_masks),
                cup_mask_paths: split_paths(&row.cup_masks),
                person_id: row.person_id,
                dataset_tag: row.dataset_tag,
                image_path: row.image_path,
                split,
            };
            if rec.person_id.is_empty() {
                rec.person_id = rec.id();
            }
            records.push(rec);
        }
        if !errors.is_empty() {
            return Err(Error::ManifestValidation { path: path.to_path_buf(), errors });
        }
        Ok(Self::new(root, records))
    }

    /// Checks that every image and mask exists, decodes, and agrees in size.
    /// All failures are reported together.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let mut errors = Vec::new();
        for (i, rec) in self.records.iter().enumerate() {
            let line = i + 2;
            let dims = match image::image_dimensions(self.resolve(&rec.image_path)) {
                Ok(d) => d,
                Err(e) => {
                    errors.push(format!("row {line} ({}): image: {e}", rec.image_path));
                    continue;
                }
            };
            if rec.disc_mask_paths.is_empty() && rec.cup_mask_paths.is_empty() {
                errors.push(format!("row {line} ({}): no masks listed", rec.image_path));
            }
            for m in rec.disc_mask_paths.iter().chain(&rec.cup_mask_paths) {
                match image::image_dimensions(self.resolve(m)) {
                    Ok(md) if md == dims => {}
                    Ok(md) => errors.push(format!(
                        "row {line} ({}): mask {m} is {}×{}, image is {}×{}",
                        rec.image_path, md.1, md.0, dims.1, dims.0
                    )),
                    Err(e) => errors.push(format!("row {line} ({}): mask {m}: {e}", rec.image_path)),
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::ManifestValidation { path: path.to_path_buf(), errors })
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let has_split = self.records.iter().any(|r| r.split.is_some());
        let mut w = csv::Writer::from_path(path)?;
        if has_split {
            w.write_record(["image_path", "disc_masks", "cup_masks", "person_id", "dataset_tag", "split"])?;
        } else {
            w.write_record(["image_path", "disc_masks", "cup_masks", "person_id", "dataset_tag"])?;
        }
        for r in &self.records {
            let mut row = vec![
                r.image_path.clone(),
                r.disc_mask_paths.join(";"),
                r.cup_mask_paths.join(";"),
                r.person_id.clone(),
                r.dataset_tag.clone(),
            ];
            if has_split {
                row.push(r.split.map(|s| s.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn persons(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.person_id.as_str()).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == Some(split)).collect()
    }

    pub fn has_splits(&self) -> bool {
        self.records.iter().any(|r| r.split.is_some())
    }

    /// `(train, val)` indices treating fold `k` as validation.
    pub fn fold(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match r.split {
                Some(Split::Fold(f)) if f == k => val.push(i),
                Some(Split::Fold(_)) => train.push(i),
                _ => {}
            }
        }
        (train, val)
    }

    /// Person ids in each assigned split.
    pub fn persons_by_split(&self) -> BTreeMap<Split, BTreeSet<&str>> {
        let mut out: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for r in &self.records {
            if let Some(s) = r.split {
                out.entry(s).or_default().insert(&r.person_id);
            }
        }
        out
    }

    /// True when no person appears in more than one split.
    pub fn is_person_disjoint(&self) -> bool {
        let by = self.persons_by_split();
        let mut seen = BTreeSet::new();
        by.values().flatten().all(|p| seen.insert(*p))
    }
}

/// Parses and validates a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::read(path)?;
    m.validate(path)?;
    Ok(m)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.write(path)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

/// Reads a mask PNG; pixels ≥ 128 (on the luma channel) are foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Writes a single-channel 0/255 PNG.
pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Pixelwise mean of annotator masks.
pub fn average_annotators(masks: &[BinaryMask]) -> Result<ProbabilityMap> {
    let first = masks.first().ok_or_else(|| Error::Shape("no annotator masks".into()))?;
    let (h, w) = first.dims();
    let mut sum = vec![0u32; h * w];
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape(format!("annotator mask {}×{} vs {h}×{w}", m.height(), m.width())));
        }
        for (s, &v) in sum.iter_mut().zip(m.values()) {
            *s += v as u32;
        }
    }
    let n = masks.len() as f64;
    ProbabilityMap::new(h, w, sum.into_iter().map(|s| s as f64 / n).collect())
}

fn shuffled_persons(manifest: &DatasetManifest, seed: u64) -> Vec<String> {
    let mut persons: Vec<String> = manifest.persons().into_iter().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    persons.shuffle(&mut rng);
    persons
}

/// Random train/val partition of persons; all images of a person share a side.
pub fn grouped_split(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Split(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let persons = shuffled_persons(manifest, seed);
    if persons.len() < 2 {
        return Err(Error::Split(format!("grouped split needs at least 2 persons, found {}", persons.len())));
    }
    let n_val = ((val_fraction * persons.len() as f64).round() as usize).clamp(1, persons.len() - 1);
    let val: BTreeSet<&str> = persons[..n_val].iter().map(String::as_str).collect();
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Some(if val.contains(r.person_id.as_str()) { Split::Val } else { Split::Train });
    }
    out.split_origin = format!("grouped by person, val_fraction {val_fraction}, seed {seed}");
    Ok(out)
}

/// Person-grouped `k`-fold assignment; fold sizes differ by at most one person.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    if k < 2 {
        return Err(Error::Split(format!("k must be at least 2, got {k}")));
    }
    let persons = shuffled_persons(manifest, seed);
    if k > persons.len() {
        return Err(Error::Split(format!("k = {k} exceeds the {} persons available", persons.len())));
    }
    let fold_of: BTreeMap<&str, usize> = persons.iter().enumerate().map(|(i, p)| (p.as_str(), i % k)).collect();
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Some(Split::Fold(fold_of[r.person_id.as_str()]));
    }
    out.split_origin = format!("{k}-fold by person, seed {seed}");
    Ok(out)
}

/// Mean inter-annotator agreement for one organ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrganAgreement {
    /// Pairwise binary IOU averaged over pairs, then records.
    pub iou: f64,
    pub dice: f64,
    /// Each annotator against the soft average of the others.
    pub soft_iou: f64,
    pub soft_dice: f64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub disc: Option<OrganAgreement>,
    pub cup: Option<OrganAgreement>,
    /// Records with fewer than two annotators for an organ, per organ.
    pub skipped_disc: usize,
    pub skipped_cup: usize,
}

/// Soft Jaccard / Dice with the empty-empty = 1 convention.
fn soft_overlap(a: &BinaryMask, b: &ProbabilityMap) -> (f64, f64) {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let x = x as u8 as f64;
        ab += x * y;
        aa += x;
        bb += y;
    }
    if aa + bb == 0.0 {
        return (1.0, 1.0);
    }
    (ab / (aa + bb - ab), 2.0 * ab / (aa + bb))
}

/// Per-record agreement; `None` if fewer than two annotators.
pub fn record_agreement(masks: &[BinaryMask]) -> Result<Option<(f64, f64, f64, f64)>> {
    let n = masks.len();
    if n < 2 {
        return Ok(None);
    }
    let (mut si, mut sd, mut pairs) = (0.0, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            si += iou(&masks[i], &masks[j])?;
            sd += binary_dice(&masks[i], &masks[j])?;
            pairs += 1;
        }
    }
    let (mut soft_i, mut soft_d) = (0.0, 0.0);
    for i in 0..n {
        let others: Vec<BinaryMask> = masks.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, m)| m.clone()).collect();
        let avg = average_annotators(&others)?;
        let (a, b) = soft_overlap(&masks[i], &avg);
        soft_i += a;
        soft_d += b;
    }
    Ok(Some((si / pairs as f64, sd / pairs as f64, soft_i / n as f64, soft_d / n as f64)))
}

fn aggregate(per_record: &[(f64, f64, f64, f64)]) -> Option<OrganAgreement> {
    if per_record.is_empty() {
        return None;
    }
    let n = per_record.len() as f64;
    let sum = per_record.iter().fold((0.0, 0.0, 0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1, a.2 + r.2, a.3 + r.3));
    Some(OrganAgreement {
        iou: sum.0 / n,
        dice: sum.1 / n,
        soft_iou: sum.2 / n,
        soft_dice: sum.3 / n,
        records: per_record.len(),
    })
}

/// Mean human-vs-human agreement over all records of a manifest.
pub fn human_agreement(manifest: &DatasetManifest) -> Result<AgreementReport> {
    let mut report = AgreementReport { disc: None, cup: None, skipped_disc: 0, skipped_cup: 0 };
    for organ in [Organ::Disc, Organ::Cup] {
        let mut per_record = Vec::new();
        let mut skipped = 0;
        for rec in &manifest.records {
            let paths = rec.masks(organ);
            if paths.is_empty() {
                continue;
            }
            let masks = paths.iter().map(|p| load_mask(&manifest.resolve(p))).collect::<Result<Vec<_>>>()?;
            match record_agreement(&masks)? {
                Some(r) => per_record.push(r),
                None => {
                    warn!("{}: fewer than two {organ} annotators, skipped", rec.image_path);
                    skipped += 1;
                }
            }
        }
        match organ {
            Organ::Disc => {
                report.disc = aggregate(&per_record);
                report.skipped_disc = skipped;
            }
            Organ::Cup => {
                report.cup = aggregate(&per_record);
                report.skipped_cup = skipped;
            }
        }
    }
    Ok(report)
}
