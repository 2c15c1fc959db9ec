//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stack_unet::checkpoint;
use stack_unet::data::{grouped_split, DatasetManifest, Organ, SampleRecord, Split};
use stack_unet::metrics::{binary_dice, cup_to_disc_ratio, iou, log_dice_loss_with_grad, soft_dice, BinaryMask, ProbabilityMap};
use stack_unet::model::{BlockKind, BlockSpec, CascadeSpec, StackUNet};
use stack_unet::nn::OpKind;
use stack_unet::pipeline::{prepare_sample, Preprocessing, PreparedSample};
use stack_unet::preprocess::PlanarImage;
use stack_unet::synthetic::{generate, write_dataset, SyntheticSpec};
use stack_unet::tensor::Tensor;
use stack_unet::training::{evaluate_prepared, train, train_prepared, TrainConfig, DEFAULT_LEARNING_RATE};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn c1_architecture_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_vec([1, 3, 128, 128], (0..3 * 128 * 128).map(|_| rng.random::<f32>()).collect());
    let mut slowest = Duration::ZERO;
    let mut cases = 0;
    for n_blocks in [1, 3, 15] {
        for kind in [BlockKind::Unet, BlockKind::ResUnet] {
            for long_skip in [true, false] {
                let spec = CascadeSpec { n_blocks, block: BlockSpec { kind, ..BlockSpec::default() }, long_skip, ..CascadeSpec::default() };
                let started = Instant::now();
                let model = StackUNet::new(spec, 0).map_err(|e| e.to_string())?;
                let y = model.forward(&x).map_err(|e| e.to_string())?;
                let elapsed = started.elapsed();
                let case = format!("{n_blocks} {kind} blocks, long_skip={long_skip}");
                ensure(y.shape() == [1, 1, 128, 128], || format!("{case}: output shape {:?}", y.shape()))?;
                ensure(y.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{case}: value outside [0,1]"))?;
                within(elapsed, Duration::from_secs(60), &case)?;
                slowest = slowest.max(elapsed);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} configurations, 128x128x1 in [0,1], slowest build+forward {:.1}s", slowest.as_secs_f64()))
}

fn c2_linear_parameter_growth() -> Outcome {
    let total = |k: usize| -> Result<usize, String> {
        let spec = CascadeSpec { n_blocks: k, ..CascadeSpec::default() };
        Ok(StackUNet::new(spec, 0).map_err(|e| e.to_string())?.count_parameters().total)
    };
    let counts = (2..=6).map(total).collect::<Result<Vec<_>, _>>()?;
    let diffs: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    ensure(diffs.iter().all(|&d| d == diffs[0]), || format!("differences for k=3..6: {diffs:?}"))?;
    Ok(format!("params(k)-params(k-1) = {} for k in 3..=6", diffs[0]))
}

fn c3_loss_correctness() -> Outcome {
    let a = ProbabilityMap::filled(2, 2, 0.5);
    let b = BinaryMask::new(2, 2, vec![true, false, false, true]).map_err(|e| e.to_string())?;
    let d = soft_dice(&a, &b, 1e-12).map_err(|e| e.to_string())?;
    ensure((d - 2.0 / 3.0).abs() < 1e-6, || format!("soft_dice = {d}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let target: Vec<f64> = (0..64).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let (_, grad) = log_dice_loss_with_grad(&pred, &target, 1.0).map_err(|e| e.to_string())?;
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p[i] += h;
            let up = log_dice_loss_with_grad(&p, &target, 1.0).map_err(|e| e.to_string())?.0;
            p[i] -= 2.0 * h;
            let down = log_dice_loss_with_grad(&p, &target, 1.0).map_err(|e| e.to_string())?.0;
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-4, || format!("worst relative gradient error {worst:.3e}"))?;
    Ok(format!("soft_dice = {d:.9}, worst relative gradient error {worst:.2e} over 20 8x8 inputs"))
}

fn c4_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let density = rng.random_range(0.0..1.0);
        let a = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(density));
        let b = BinaryMask::from_fn(16, 16, |_, _| rng.random_bool(density));
        let sa: BTreeSet<(usize, usize)> = (0..256).filter(|&i| a.get(i / 16, i % 16)).map(|i| (i / 16, i % 16)).collect();
        let sb: BTreeSet<(usize, usize)> = (0..256).filter(|&i| b.get(i / 16, i % 16)).map(|i| (i / 16, i % 16)).collect();
        let inter = sa.intersection(&sb).count() as f64;
        let union = sa.union(&sb).count() as f64;
        let (want_iou, want_dice) = if union == 0.0 {
            (1.0, 1.0)
        } else {
            (inter / union, 2.0 * inter / (sa.len() + sb.len()) as f64)
        };
        let got_iou = iou(&a, &b).map_err(|e| e.to_string())?;
        let got_dice = binary_dice(&a, &b).map_err(|e| e.to_string())?;
        ensure(got_iou == want_iou && got_dice == want_dice, || {
            format!("trial {trial}: iou {got_iou} vs {want_iou}, dice {got_dice} vs {want_dice}")
        })?;
        worst = worst.max((got_dice - 2.0 * got_iou / (1.0 + got_iou)).abs());
    }
    ensure(worst <= 1e-12, || format!("Dice/IOU identity off by {worst:e}"))?;
    Ok(format!("1000 pairs match set counting exactly, identity residual {worst:.1e}"))
}

/// Small fundus-like sample at network resolution, no CLAHE.
fn synthetic_prepared(seed: u64, n: usize, size: usize) -> Vec<PreparedSample> {
    let spec = SyntheticSpec { n_images: n, height: size, width: size, n_persons: n, seed, ..SyntheticSpec::default() };
    generate(&spec)
        .into_iter()
        .enumerate()
        .map(|(i, s)| PreparedSample {
            id: format!("{i:04}"),
            image: PlanarImage::from_rgb(&s.image),
            target: s.disc[0].clone(),
            soft_target: None,
        })
        .collect()
}

fn c5_memorization() -> Outcome {
    let started = Instant::now();
    let sample = synthetic_prepared(5, 1, 64);
    let spec = CascadeSpec { n_blocks: 2, block: BlockSpec { base_channels: 16, ..BlockSpec::default() }, ..CascadeSpec::default() };
    let smoke_lr = 1e-3;
    let cfg = TrainConfig {
        learning_rate: smoke_lr,
        batch_size: 1,
        max_epochs: 500,
        max_steps: Some(500),
        early_stop_patience: 0,
        resolution: (64, 64),
        augment: false,
        ..TrainConfig::default()
    };
    let run = |lr: f64| -> Result<(f64, usize), String> {
        let mut model = StackUNet::new(spec, 0).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { learning_rate: lr, ..cfg.clone() };
        let report = train_prepared(&mut model, &sample, &[], &cfg, "single image", None).map_err(|e| e.to_string())?;
        let (_, m) = evaluate_prepared(&model, &sample, &cfg).map_err(|e| e.to_string())?;
        Ok((m[0].dice, report.epochs.last().map_or(0, |e| e.steps as usize)))
    };
    let (dice, steps) = run(smoke_lr)?;
    let (reference_dice, _) = run(DEFAULT_LEARNING_RATE)?;
    let elapsed = started.elapsed();
    let detail = format!(
        "lr {smoke_lr:e}: train Dice {dice:.4} after {steps} steps; lr {DEFAULT_LEARNING_RATE:e}: train Dice {reference_dice:.4}; {:.0}s",
        elapsed.as_secs_f64()
    );
    ensure(dice >= 0.95, || detail.clone())?;
    within(elapsed, Duration::from_secs(600), "memorization")?;
    Ok(detail)
}

fn c6_toy_learning() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, manifest) = write_dataset(dir.path(), &SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let manifest = grouped_split(&manifest, 0.2, 6).map_err(|e| e.to_string())?;
    let spec = CascadeSpec { n_blocks: 3, block: BlockSpec { base_channels: 8, ..BlockSpec::default() }, ..CascadeSpec::default() };
    let mut model = StackUNet::new(spec, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 30,
        early_stop_patience: 0,
        resolution: (64, 64),
        organ: Organ::Disc,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &manifest, &cfg, None).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let last = report.epochs.last().ok_or("no epochs")?;
    let final_dice = last.val_dice.ok_or("no validation set")?;
    let detail = format!(
        "{} epochs, {} train / {} val images, final-epoch val disc Dice {final_dice:.4}, best {:.4} (epoch {}); {:.0}s",
        report.epochs.len(),
        report.n_train,
        report.n_val,
        report.best_metric,
        report.best_epoch,
        elapsed.as_secs_f64()
    );
    ensure(report.epochs.len() == 30 && final_dice >= 0.90, || detail.clone())?;
    within(elapsed, Duration::from_secs(1800), "toy training")?;
    Ok(detail)
}

fn person_manifest(n_persons: usize, per_person: usize) -> DatasetManifest {
    let records = (0..n_persons * per_person)
        .map(|i| SampleRecord {
            image_path: format!("images/{i:04}.png"),
            disc_mask_paths: vec![format!("masks/{i:04}_disc.png")],
            cup_mask_paths: vec![],
            person_id: format!("p{:02}", i % n_persons),
            dataset_tag: "synthetic".into(),
            split: None,
        })
        .collect();
    DatasetManifest::new(".", records)
}

fn c7_grouped_split() -> Outcome {
    let manifest = person_manifest(20, 3);
    for seed in 0..200 {
        let split = grouped_split(&manifest, 0.2, seed).map_err(|e| e.to_string())?;
        let persons = |s: Split| -> BTreeSet<&str> {
            split.records.iter().filter(|r| r.split == Some(s)).map(|r| r.person_id.as_str()).collect()
        };
        let (train, val) = (persons(Split::Train), persons(Split::Val));
        ensure(!train.is_empty() && !val.is_empty(), || format!("seed {seed}: empty split"))?;
        ensure(train.is_disjoint(&val), || format!("seed {seed}: shared persons {:?}", train.intersection(&val).collect::<Vec<_>>()))?;
        ensure(split.records.iter().all(|r| r.split.is_some()), || format!("seed {seed}: unassigned record"))?;
    }
    Ok("200 seeds, 20 persons x 3 images, train/val person sets always disjoint".into())
}

fn c8_cdr_rule() -> Outcome {
    let disc = BinaryMask::from_fn(200, 200, |y, x| (50..150).contains(&y) && (60..140).contains(&x));
    let cup = BinaryMask::from_fn(200, 200, |y, x| (70..135).contains(&y) && (80..120).contains(&x));
    let r = cup_to_disc_ratio(&disc, &cup, 0.65).map_err(|e| e.to_string())?;
    ensure(r.disc_height == 100 && r.cup_height == 65, || format!("heights {} / {}", r.disc_height, r.cup_height))?;
    ensure(r.cdr == 0.65 && r.glaucoma_suspect, || format!("cdr {} suspect {}", r.cdr, r.glaucoma_suspect))?;
    Ok(format!("cdr = {}, glaucoma_suspect = {}", r.cdr, r.glaucoma_suspect))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { n_images: 8, height: 32, width: 32, n_persons: 4, seed: 9, ..SyntheticSpec::default() };
    let (_, manifest) = write_dataset(dir.path(), &spec).map_err(|e| e.to_string())?;
    let manifest = grouped_split(&manifest, 0.25, 9).map_err(|e| e.to_string())?;
    let cascade = CascadeSpec { n_blocks: 2, block: BlockSpec { depth: 3, base_channels: 8, ..BlockSpec::default() }, ..CascadeSpec::default() };
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 2, max_epochs: 1, resolution: (32, 32), seed: 9, ..TrainConfig::default() };
    let run = || -> Result<(f64, StackUNet), String> {
        let mut model = StackUNet::new(cascade, 9).map_err(|e| e.to_string())?;
        let report = train(&mut model, &manifest, &cfg, None).map_err(|e| e.to_string())?;
        Ok((report.epochs[0].train_loss, model))
    };
    let (a, model) = run()?;
    let (b, _) = run()?;
    ensure(a.to_bits() == b.to_bits(), || format!("epoch-1 losses differ: {a:e} vs {b:e}"))?;

    let path = dir.path().join("model.safetensors");
    checkpoint::save(&path, &model, &Default::default()).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?.model;
    let record = &manifest.records[0];
    let x = prepare_sample(&manifest, record, Organ::Disc, (32, 32), &Preprocessing::default())
        .map_err(|e| e.to_string())?
        .ok_or("record without disc mask")?
        .image
        .to_tensor();
    let before = model.forward(&x).map_err(|e| e.to_string())?;
    let after = loaded.forward(&x).map_err(|e| e.to_string())?;
    let same = before.data().iter().zip(after.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    ensure(same, || "forward outputs differ after checkpoint round trip".into())?;
    Ok(format!("epoch-1 loss {a:.12} in both runs; reloaded forward bitwise equal over {} values", before.len()))
}

fn c10_long_skip_plumbing() -> Outcome {
    let build = |long_skip: bool| {
        let spec = CascadeSpec { n_blocks: 4, block: BlockSpec { depth: 2, base_channels: 4, ..BlockSpec::default() }, long_skip, ..CascadeSpec::default() };
        StackUNet::new(spec, 0).map_err(|e| e.to_string())
    };
    let with = build(true)?;
    let without = build(false)?;
    let first_conv_inputs = |m: &StackUNet| -> Vec<usize> {
        (0..m.blocks().len()).map(|i| m.params().by_name(&format!("block{i}.enc0.conv1.weight")).expect("conv exists").shape[1]).collect()
    };
    let concat_35 = |m: &StackUNet| -> Result<usize, String> {
        let trace = m.trace(16, 16).map_err(|e| e.to_string())?;
        Ok(trace.iter().filter(|t| t.op == OpKind::Concat && t.shape[1] == 35).count())
    };
    let (w, wo) = (first_conv_inputs(&with), first_conv_inputs(&without));
    ensure(w == [3, 35, 35, 35] && with.block_input_channels() == w, || format!("with long skip: {w:?}"))?;
    ensure(wo == [3, 32, 32, 32] && without.block_input_channels() == wo, || format!("without long skip: {wo:?}"))?;
    let (cw, cwo) = (concat_35(&with)?, concat_35(&without)?);
    ensure(cw == 3 && cwo == 0, || format!("35-channel concats in graph: {cw} with, {cwo} without"))?;
    Ok(format!("block input channels {w:?} -> {wo:?}; 35-channel concat nodes {cw} -> {cwo}"))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "architecture contract", c1_architecture_contract),
        (2, "linear parameter growth", c2_linear_parameter_growth),
        (3, "loss correctness", c3_loss_correctness),
        (4, "metric oracle", c4_metric_oracle),
        (5, "memorization smoke test", c5_memorization),
        (6, "toy-data learning", c6_toy_learning),
        (7, "person-grouped split", c7_grouped_split),
        (8, "CDR rule", c8_cdr_rule),
        (9, "determinism", c9_determinism),
        (10, "long-skip ablation plumbing", c10_long_skip_plumbing),
    ];
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
