//! Training loop, optimizer, run persistence and the disc → cup pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, KEY_RESOLUTION};
use crate::data::{load_image, DatasetManifest, Organ, Split};
use crate::error::{Error, Result};
use crate::metrics::{binarize, binary_dice, iou, log_dice_loss_with_grad, BinaryMask, ProbabilityMap, DEFAULT_LOSS_EPS};
use crate::model::{CascadeSpec, StackUNet};
use crate::nn::{Gradients, Graph, ParamStore};
use crate::pipeline::{
    disc_region_or_full, load_ground_truth, predict_cup_in_region, predict_native, prepare_cup_crop, prepare_sample,
    PreparedSample, Preprocessing,
};
use crate::preprocess::{apply_transform, region_from_mask, AugmentSpec, PlanarImage, DEFAULT_CROP_MARGIN};
use crate::tensor::Tensor;

/// Learning rate used when a config leaves it unset.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Stop after this many epochs without improvement of the selection
    /// metric; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub eps_loss: f64,
    /// `(height, width)` the network sees.
    pub resolution: (usize, usize),
    pub augment: bool,
    pub augmentation: AugmentSpec,
    pub preprocessing: Preprocessing,
    pub organ: Organ,
    pub threshold: f64,
    /// Save `epoch_NNNN.safetensors` every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub crop_margin: usize,
    /// Shuffling seed; model init and augmentation have their own.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 300,
            max_steps: None,
            early_stop_patience: 50,
            eps_loss: DEFAULT_LOSS_EPS,
            resolution: (256, 256),
            augment: true,
            augmentation: AugmentSpec::default(),
            preprocessing: Preprocessing::default(),
            organ: Organ::Disc,
            threshold: 0.5,
            checkpoint_every: None,
            crop_margin: DEFAULT_CROP_MARGIN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.eps_loss.is_nan() || self.eps_loss <= 0.0 {
            return bad("eps_loss", "must be positive");
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return bad("resolution", "must be non-zero");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold", "must lie in [0, 1]");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every", "must be at least 1");
        }
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam with bias correction over every trainable parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|p| vec![0.0; if p.trainable { p.value.len() } else { 0 }]).collect();
        Self { learning_rate, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = (self.learning_rate / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (id, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p.value[i] -= lr * m[i] / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    /// Dice of thresholded training-mode outputs, averaged over images.
    pub train_dice: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub learning_rate: f64,
    pub config: TrainConfig,
    pub cascade: CascadeSpec,
    pub model_seed: u64,
    pub split_protocol: String,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochRecord>,
    /// `val_dice` when a validation set exists, else `train_dice`.
    pub selection_metric: String,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub stopped_early: bool,
    /// Per-image metrics of the selected weights on the validation set
    /// (training set when there is none).
    pub per_image: Vec<ImageMetric>,
    /// Settings chosen by this implementation rather than fixed by the method.
    pub artifact_choices: Vec<String>,
}

impl RunReport {
    pub fn mean_dice(&self) -> f64 {
        mean(self.per_image.iter().map(|m| m.dice))
    }

    pub fn mean_iou(&self) -> f64 {
        mean(self.per_image.iter().map(|m| m.iou))
    }
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    log: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        std::fs::create_dir_all(path.join("checkpoints")).map_err(|e| Error::io(&path, e))?;
        let log = path.join("train.log");
        std::fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
        Ok(Self { path, log })
    }

    fn log(&self, line: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.log).map_err(|e| Error::io(&self.log, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.log, e))
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }
}

fn log_line(run: Option<&RunDir>, line: &str) -> Result<()> {
    log::info!("{line}");
    match run {
        Some(r) => r.log(line),
        None => Ok(()),
    }
}

fn artifact_choices(cfg: &TrainConfig) -> Vec<String> {
    vec![
        format!("batch_size={} (implementation choice)", cfg.batch_size),
        format!("max_epochs={} (implementation choice)", cfg.max_epochs),
        format!("early_stop_patience={} (implementation choice)", cfg.early_stop_patience),
        format!("resolution={}x{} (implementation choice)", cfg.resolution.0, cfg.resolution.1),
        format!("augmentation={} (ranges are implementation choices)", if cfg.augment { "on" } else { "off" }),
        "model selection by best epoch metric (implementation choice)".to_string(),
    ]
}

/// One augmented batch as `(images, targets)` with targets flattened per image.
fn make_batch(samples: &[&PreparedSample], cfg: &TrainConfig, epoch: usize, indices: &[usize]) -> Result<(Tensor, Vec<Vec<f64>>, Vec<BinaryMask>)> {
    let mut images = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (s, &idx) in samples.iter().zip(indices) {
        let (image, mask, soft) = match cfg.augment.then_some(&cfg.augmentation) {
            None => (s.image.clone(), s.target.clone(), s.soft_target.clone()),
            Some(spec) => {
                let mut rng = spec.rng_for(epoch as u64, idx as u64);
                let t = spec.sample(&mut rng);
                match &s.soft_target {
                    None => {
                        let (i, m) = apply_transform(&s.image, &s.target, &t)?;
                        (i, m, None)
                    }
                    Some(soft) => {
                        // the soft target rides along as an extra channel
                        let mut joint = s.image.clone();
                        joint.channels += 1;
                        joint.data.extend(soft.values().iter().map(|&v| v as f32));
                        let (j, m) = apply_transform(&joint, &s.target, &t)?;
                        let (h, w) = (j.height, j.width);
                        let rgb = (j.channels - 1) * h * w;
                        let plane: Vec<f64> = j.data[rgb..].iter().map(|&v| v.clamp(0.0, 1.0) as f64).collect();
                        let img = PlanarImage { channels: j.channels - 1, height: h, width: w, data: j.data[..rgb].to_vec() };
                        (img, m, Some(ProbabilityMap::new(h, w, plane)?))
                    }
                }
            }
        };
        targets.push(match &soft {
            Some(p) => p.values().to_vec(),
            None => mask.values().iter().map(|&b| b as u8 as f64).collect(),
        });
        masks.push(mask);
        images.push(image.to_tensor());
    }
    Ok((Tensor::stack(&images), targets, masks))
}

/// Loss and metrics of the current weights in inference mode.
pub fn evaluate_prepared(model: &StackUNet, samples: &[PreparedSample], cfg: &TrainConfig) -> Result<(f64, Vec<ImageMetric>)> {
    let mut losses = Vec::with_capacity(samples.len());
    let mut metrics = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size) {
        let batch = Tensor::stack(&chunk.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>());
        let out = model.forward(&batch)?;
        for (i, s) in chunk.iter().enumerate() {
            let pred: Vec<f64> = out.sample(i).iter().map(|&v| v as f64).collect();
            let target: Vec<f64> = match &s.soft_target {
                Some(p) => p.values().to_vec(),
                None => s.target.values().iter().map(|&b| b as u8 as f64).collect(),
            };
            let (loss, _) = log_dice_loss_with_grad(&pred, &target, cfg.eps_loss)?;
            losses.push(loss);
            let bin = binarize(&ProbabilityMap::new(s.target.height(), s.target.width(), pred)?, cfg.threshold);
            metrics.push(ImageMetric { id: s.id.clone(), iou: iou(&bin, &s.target)?, dice: binary_dice(&bin, &s.target)? });
        }
    }
    Ok((mean(losses.into_iter()), metrics))
}

fn checkpoint_metadata(cfg: &TrainConfig, organ: Organ, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        (KEY_RESOLUTION.to_string(), format!("{}x{}", cfg.resolution.0, cfg.resolution.1)),
        ("organ".to_string(), organ.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("preprocessing".to_string(), toml::to_string(&cfg.preprocessing).expect("serializes")),
        ("crop_margin".to_string(), cfg.crop_margin.to_string()),
    ])
}

/// Trains `model` in place on prepared samples and leaves it holding the
/// weights of the best epoch.
pub fn train_prepared(
    model: &mut StackUNet,
    train: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &TrainConfig,
    split_protocol: &str,
    run: Option<&RunDir>,
) -> Result<RunReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSplit);
    }
    for s in train.iter().chain(val) {
        if (s.image.height, s.image.width) != cfg.resolution {
            return Err(Error::Shape(format!(
                "sample {} is {}×{}, config resolution is {}×{}",
                s.id, s.image.height, s.image.width, cfg.resolution.0, cfg.resolution.1
            )));
        }
    }
    model.check_input([1, model.spec().input_channels, cfg.resolution.0, cfg.resolution.1])?;

    if let Some(r) = run {
        r.write("config.toml", &format!("{}\n[cascade]\n{}", cfg.to_toml(), model.spec().to_toml()))?;
    }
    log_line(run, &format!("lr={} train={} val={} protocol={split_protocol}", cfg.learning_rate, train.len(), val.len()))?;

    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let metric_name = if val.is_empty() { "train_dice" } else { "val_dice" };
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut best_checkpoint = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut dice_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut hit_step_cap = false;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, targets, masks) = make_batch(&samples, cfg, epoch, chunk)?;
            let (grads, updates, batch_loss, batch_dice) = {
                let mut g = Graph::new(model.params(), true);
                let xv = g.input(x);
                let y = model.forward_graph(&mut g, xv)?;
                let out = g.value(y).clone();
                let n = chunk.len();
                let mut seed = Tensor::zeros(out.shape());
                let (mut l, mut d) = (0.0, 0.0);
                for i in 0..n {
                    let pred: Vec<f64> = out.sample(i).iter().map(|&v| v as f64).collect();
                    let (loss, grad) = log_dice_loss_with_grad(&pred, &targets[i], cfg.eps_loss)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
                    }
                    l += loss;
                    for (s, gi) in seed.sample_mut(i).iter_mut().zip(&grad) {
                        *s = (gi / n as f64) as f32;
                    }
                    let (h, w) = masks[i].dims();
                    let bin = binarize(&ProbabilityMap::new(h, w, pred)?, cfg.threshold);
                    d += binary_dice(&bin, &masks[i])?;
                }
                let grads = g.backward(y, seed);
                (grads, g.take_bn_updates(), l, d)
            };
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss: f64::NAN });
            }
            adam.step(model.params_mut(), &grads);
            model.params_mut().apply_bn_updates(updates);
            loss_sum += batch_loss;
            dice_sum += batch_dice;
            seen += chunk.len();
            if cfg.max_steps.is_some_and(|cap| adam.steps() as usize >= cap) {
                hit_step_cap = true;
                break;
            }
        }
        if !model.params().all_finite() {
            return Err(Error::NonFiniteWeights(epoch));
        }

        let train_loss = loss_sum / seen as f64;
        let train_dice = dice_sum / seen as f64;
        let (val_loss, val_dice, val_iou) = if val.is_empty() {
            (None, None, None)
        } else {
            let (l, m) = evaluate_prepared(model, val, cfg)?;
            (Some(l), Some(mean(m.iter().map(|x| x.dice))), Some(mean(m.iter().map(|x| x.iou))))
        };
        let record = EpochRecord {
            epoch,
            steps: adam.steps(),
            train_loss,
            train_dice,
            val_loss,
            val_dice,
            val_iou,
            seconds: started.elapsed().as_secs_f64(),
        };
        let mut line = format!("epoch {epoch} steps {} train_loss {train_loss:.5} train_dice {train_dice:.4}", record.steps);
        if let (Some(l), Some(d)) = (val_loss, val_dice) {
            let _ = write!(line, " val_loss {l:.5} val_dice {d:.4}");
        }
        log_line(run, &line)?;

        let metric = val_dice.unwrap_or(train_dice);
        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, model.params().clone()));
            if let Some(r) = run {
                let p = r.path.join("checkpoints/best.safetensors");
                checkpoint::save(&p, model, &checkpoint_metadata(cfg, cfg.organ, epoch))?;
                best_checkpoint = Some(p);
            }
        }
        if let (Some(r), Some(k)) = (run, cfg.checkpoint_every) {
            if epoch % k == 0 {
                let p = r.path.join(format!("checkpoints/epoch_{epoch:04}.safetensors"));
                checkpoint::save(&p, model, &checkpoint_metadata(cfg, cfg.organ, epoch))?;
            }
        }
        epochs.push(record);
        if hit_step_cap {
            break 'epochs;
        }
        if let Some((best_epoch, _, _)) = &best {
            if cfg.early_stop_patience > 0 && epoch - best_epoch >= cfg.early_stop_patience {
                stopped_early = true;
                log_line(run, &format!("early stop at epoch {epoch}, best epoch {best_epoch}"))?;
                break 'epochs;
            }
        }
    }

    let (best_epoch, best_metric, weights) = best.expect("at least one epoch ran");
    *model.params_mut() = weights;
    let eval_set = if val.is_empty() { train } else { val };
    let (_, per_image) = evaluate_prepared(model, eval_set, cfg)?;

    let report = RunReport {
        learning_rate: cfg.learning_rate,
        config: cfg.clone(),
        cascade: *model.spec(),
        model_seed: model.seed(),
        split_protocol: split_protocol.to_string(),
        n_train: train.len(),
        n_val: val.len(),
        epochs,
        selection_metric: metric_name.to_string(),
        best_epoch,
        best_metric,
        best_checkpoint,
        stopped_early,
        per_image,
        artifact_choices: artifact_choices(cfg),
    };
    if let Some(r) = run {
        persist_report(r, &report)?;
    }
    Ok(report)
}

fn persist_report(run: &RunDir, report: &RunReport) -> Result<()> {
    let mut epochs = csv::Writer::from_writer(Vec::new());
    for e in &report.epochs {
        epochs.serialize(e)?;
    }
    let mut per_image = csv::Writer::from_writer(Vec::new());
    for m in &report.per_image {
        per_image.serialize(m)?;
    }
    let bytes = |w: csv::Writer<Vec<u8>>| String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv");
    run.write("epochs.csv", &bytes(epochs))?;
    run.write("per_image.csv", &bytes(per_image))?;
    run.write("report.json", &serde_json::to_string_pretty(report)?)
}

/// Describes how a manifest's split column is turned into train/val.
pub fn split_protocol(manifest: &DatasetManifest) -> String {
    let tags: std::collections::BTreeSet<&str> = manifest.records.iter().map(|r| r.dataset_tag.as_str()).collect();
    let n_persons = manifest.persons().len();
    let origin = if manifest.split_origin.is_empty() { "manifest split column" } else { &manifest.split_origin };
    format!(
        "person-disjoint split, {origin} ({} records, {} persons, datasets: {})",
        manifest.len(),
        n_persons,
        tags.into_iter().filter(|t| !t.is_empty()).collect::<Vec<_>>().join(",")
    )
}

fn train_val_indices(manifest: &DatasetManifest) -> Result<(Vec<usize>, Vec<usize>)> {
    if !manifest.has_splits() {
        return Err(Error::Split("manifest has no split assignments".into()));
    }
    if !manifest.is_person_disjoint() {
        return Err(Error::Split("a person appears in more than one split".into()));
    }
    Ok((manifest.indices(Split::Train), manifest.indices(Split::Val)))
}

fn prepare_all(manifest: &DatasetManifest, indices: &[usize], cfg: &TrainConfig) -> Result<(Vec<PreparedSample>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for &i in indices {
        match prepare_sample(manifest, &manifest.records[i], cfg.organ, cfg.resolution, &cfg.preprocessing)? {
            Some(s) => out.push(s),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// Full-frame training on a manifest whose records carry `train`/`val` splits.
pub fn train(model: &mut StackUNet, manifest: &DatasetManifest, cfg: &TrainConfig, run: Option<&RunDir>) -> Result<RunReport> {
    cfg.validate()?;
    let (train_idx, val_idx) = train_val_indices(manifest)?;
    let (train_set, skipped_train) = prepare_all(manifest, &train_idx, cfg)?;
    let (val_set, skipped_val) = prepare_all(manifest, &val_idx, cfg)?;
    if skipped_train + skipped_val > 0 {
        log_line(run, &format!("skipped {skipped_train} train / {skipped_val} val records without {} masks", cfg.organ))?;
    }
    train_prepared(model, &train_set, &val_set, cfg, &split_protocol(manifest), run)
}

/// How the cup stage locates the disc it crops around.
#[derive(Debug, Clone, Copy)]
pub enum CropSource<'a> {
    /// Ground-truth disc masks.
    Oracle,
    /// A trained disc model and the resolution it was trained at.
    Predicted { model: &'a StackUNet, resolution: (usize, usize) },
}

impl CropSource<'_> {
    fn region_mask(&self, manifest: &DatasetManifest, idx: usize, normalized: &image::RgbImage, threshold: f64) -> Result<Option<BinaryMask>> {
        match self {
            CropSource::Oracle => Ok(load_ground_truth(manifest, &manifest.records[idx], Organ::Disc)?.map(|(m, _)| m)),
            CropSource::Predicted { model, resolution } => predict_native(model, normalized, *resolution, threshold).map(Some),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            CropSource::Oracle => "oracle",
            CropSource::Predicted { .. } => "predicted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CupPipelineReport {
    pub run: RunReport,
    pub crop_source: String,
    /// Training records dropped because no disc region was found.
    pub skipped_train: usize,
    /// Evaluation records where no disc was found and the full frame was used.
    pub fallback_eval: Vec<String>,
    /// Full-frame cup metrics after pasting crop predictions back.
    pub full_frame: Vec<ImageMetric>,
}

/// Trains the cup stage on disc-centred crops and evaluates it in the full
/// frame on the validation split.
pub fn train_cup_pipeline(
    cup_model: &mut StackUNet,
    source: CropSource<'_>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<CupPipelineReport> {
    let cfg = TrainConfig { organ: Organ::Cup, ..cfg.clone() };
    cfg.validate()?;
    let (train_idx, val_idx) = train_val_indices(manifest)?;

    let mut skipped_train = 0;
    let mut train_set = Vec::new();
    for &i in &train_idx {
        let record = &manifest.records[i];
        if record.cup_mask_paths.is_empty() {
            continue;
        }
        let normalized = cfg.preprocessing.normalize(&load_image(&manifest.resolve(&record.image_path))?);
        let region = match source.region_mask(manifest, i, &normalized, cfg.threshold)? {
            Some(m) => match region_from_mask(&m, cfg.crop_margin) {
                Ok(r) => r,
                Err(Error::EmptyRegion) => {
                    skipped_train += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            None => {
                skipped_train += 1;
                continue;
            }
        };
        if let Some(s) = prepare_cup_crop(manifest, record, &normalized, &region, cfg.resolution, &cfg.preprocessing)? {
            train_set.push(s);
        }
    }
    if skipped_train > 0 {
        log_line(run, &format!("skipped {skipped_train} cup training records without a disc region"))?;
    }

    // Validation during training uses crops too; full-frame numbers come after.
    let mut val_set = Vec::new();
    let mut val_frames = Vec::new();
    let mut fallback_eval = Vec::new();
    for &i in &val_idx {
        let record = &manifest.records[i];
        let Some((cup_gt, _)) = load_ground_truth(manifest, record, Organ::Cup)? else { continue };
        let normalized = cfg.preprocessing.normalize(&load_image(&manifest.resolve(&record.image_path))?);
        let disc = source
            .region_mask(manifest, i, &normalized, cfg.threshold)?
            .unwrap_or_else(|| BinaryMask::zeros(cup_gt.height(), cup_gt.width()));
        let (region, fallback) = disc_region_or_full(&disc, cfg.crop_margin);
        if fallback {
            fallback_eval.push(record.id());
        }
        if let Some(s) = prepare_cup_crop(manifest, record, &normalized, &region, cfg.resolution, &cfg.preprocessing)? {
            val_set.push(s);
        }
        val_frames.push((record.id(), normalized, region, cup_gt));
    }

    let protocol = format!("{}; cup crops from {} disc, margin {}", split_protocol(manifest), source.label(), cfg.crop_margin);
    let report = train_prepared(cup_model, &train_set, &val_set, &cfg, &protocol, run)?;

    let mut full_frame = Vec::with_capacity(val_frames.len());
    for (id, normalized, region, gt) in &val_frames {
        let pred = predict_cup_in_region(cup_model, normalized, region, cfg.resolution, cfg.threshold)?;
        full_frame.push(ImageMetric { id: id.clone(), iou: iou(&pred, gt)?, dice: binary_dice(&pred, gt)? });
    }
    let out = CupPipelineReport {
        run: report,
        crop_source: source.label().to_string(),
        skipped_train,
        fallback_eval,
        full_frame,
    };
    if let Some(r) = run {
        r.write("cup_pipeline.json", &serde_json::to_string_pretty(&out)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_blocks: usize,
    pub disc_iou: f64,
    pub disc_dice: f64,
    pub cup_iou: Option<f64>,
    pub cup_dice: Option<f64>,
}

/// Trains one disc model (and one oracle-crop cup model when cup masks
/// exist) per block count, each from the same seeds.
pub fn sweep_blocks(
    block_counts: &[usize],
    template: &CascadeSpec,
    model_seed: u64,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let has_cup = manifest.records.iter().any(|r| !r.cup_mask_paths.is_empty());
    let mut rows = Vec::new();
    for &n in block_counts {
        let spec = CascadeSpec { n_blocks: n, ..*template };
        let sub = |organ: &str| -> Result<Option<RunDir>> {
            out_dir.map(|d| RunDir::create(d.join(format!("blocks_{n:02}")).join(organ))).transpose()
        };
        let mut disc_model = StackUNet::new(spec, model_seed)?;
        let disc_cfg = TrainConfig { organ: Organ::Disc, ..cfg.clone() };
        let disc = train(&mut disc_model, manifest, &disc_cfg, sub("disc")?.as_ref())?;
        let (cup_iou, cup_dice) = if has_cup {
            let mut cup_model = StackUNet::new(spec, model_seed)?;
            let cup = train_cup_pipeline(&mut cup_model, CropSource::Oracle, manifest, cfg, sub("cup")?.as_ref())?;
            (Some(mean(cup.full_frame.iter().map(|m| m.iou))), Some(mean(cup.full_frame.iter().map(|m| m.dice))))
        } else {
            (None, None)
        };
        rows.push(SweepRow { n_blocks: n, disc_iou: disc.mean_iou(), disc_dice: disc.mean_dice(), cup_iou, cup_dice });
    }
    if let Some(d) = out_dir {
        let p = d.join("sweep.csv");
        let mut w = csv::Writer::from_path(&p)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockSpec;

    fn tiny_spec() -> CascadeSpec {
        CascadeSpec { n_blocks: 1, block: BlockSpec { depth: 2, base_channels: 4, ..BlockSpec::default() }, ..CascadeSpec::default() }
    }

    fn disc_sample(id: &str, h: usize, w: usize) -> PreparedSample {
        let target = BinaryMask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 - h as f64 / 2.0, x as f64 - w as f64 / 2.0);
            dy * dy + dx * dx < (h as f64 / 4.0).powi(2)
        });
        let mut data = vec![0.2f32; 3 * h * w];
        for (i, &t) in target.values().iter().enumerate() {
            if t {
                for c in 0..3 {
                    data[c * h * w + i] = 0.9;
                }
            }
        }
        PreparedSample { id: id.into(), image: PlanarImage { channels: 3, height: h, width: w, data }, target, soft_target: None }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig { learning_rate: 3e-4, augment: false, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let empty = TrainConfig::from_toml("").unwrap();
        assert_eq!(empty.learning_rate, DEFAULT_LEARNING_RATE);
        let err = TrainConfig::from_toml("batch_size = 0").unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        assert!(TrainConfig::from_toml("lerning_rate = 1.0").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w".into(), vec![2], vec![1.0, -1.0], true);
        // bias-corrected first step is lr·sign(g) up to eps
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        let grads = Gradients::from_params(vec![Some(vec![0.5, -2.0])]);
        adam.step(&mut store, &grads);
        let v = &store.get(0).value;
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn rejects_mismatched_resolution_and_empty_train() {
        let mut model = StackUNet::new(tiny_spec(), 0).unwrap();
        let cfg = TrainConfig { resolution: (16, 16), max_epochs: 1, augment: false, ..TrainConfig::default() };
        assert!(matches!(train_prepared(&mut model, &[], &[], &cfg, "", None), Err(Error::EmptyTrainSplit)));
        let s = disc_sample("a", 8, 8);
        assert!(matches!(train_prepared(&mut model, &[s], &[], &cfg, "", None), Err(Error::Shape(_))));
    }

    #[test]
    fn training_reduces_loss_and_selects_best() {
        let mut model = StackUNet::new(tiny_spec(), 1).unwrap();
        let train = vec![disc_sample("a", 16, 16)];
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            max_epochs: 40,
            resolution: (16, 16),
            augment: false,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path()).unwrap();
        let report = train_prepared(&mut model, &train, &[], &cfg, "single image", Some(&run)).unwrap();
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(report.selection_metric, "train_dice");
        for name in ["config.toml", "epochs.csv", "per_image.csv", "report.json", "train.log", "checkpoints/best.safetensors"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let ck = checkpoint::load(&dir.path().join("checkpoints/best.safetensors")).unwrap();
        assert_eq!(ck.resolution(), Some((16, 16)));
        assert_eq!(ck.model.params(), model.params());
    }

    #[test]
    fn step_cap_and_early_stop() {
        let mut model = StackUNet::new(tiny_spec(), 1).unwrap();
        let train: Vec<_> = (0..4).map(|i| disc_sample(&i.to_string(), 16, 16)).collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            max_epochs: 50,
            max_steps: Some(5),
            resolution: (16, 16),
            augment: false,
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        let report = train_prepared(&mut model, &train, &[], &cfg, "", None).unwrap();
        assert_eq!(report.epochs.last().unwrap().steps, 5);
        assert_eq!(report.epochs.len(), 3);

        let cfg = TrainConfig { max_steps: None, early_stop_patience: 2, ..cfg };
        let report = train_prepared(&mut model, &train, &[], &cfg, "", None).unwrap();
        // lr = 0 never improves after epoch 1
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 3);
    }

    #[test]
    fn soft_targets_survive_augmentation() {
        let mut s = disc_sample("a", 16, 16);
        s.soft_target = Some(s.target.to_probability());
        let cfg = TrainConfig { resolution: (16, 16), ..TrainConfig::default() };
        let (x, targets, masks) = make_batch(&[&s], &cfg, 3, &[0]).unwrap();
        assert_eq!(x.shape(), [1, 3, 16, 16]);
        let hard: Vec<f64> = masks[0].values().iter().map(|&b| b as u8 as f64).collect();
        let agree = targets[0].iter().zip(&hard).filter(|(a, b)| (*a - *b).abs() < 0.5).count();
        assert!(agree as f64 >= 0.97 * hard.len() as f64);
    }
}
