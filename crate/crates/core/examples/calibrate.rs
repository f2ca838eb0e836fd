//! Desk calibration harness: trains the loss variants on the synthetic
//! corpora and prints seed-mask mIoU so defaults and margins can be
//! chosen. Not part of the test suite.
//!
//! Usage: cargo run --release -p recam-core --example calibrate [toy|multi|lambda]

use recam_core::activation::{extract_for_image, resolve_weights, ActivationMap, WeightVariant};
use recam_core::evalstats::{default_threshold_grid, search_threshold, threshold_maps, ConfusionAccumulator};
use recam_core::nets::{ArchConfig, ClassifierState};
use recam_core::synthgen::{Corpus, DatasetSpec, ImageSample};
use recam_core::trainer::{
    train_baseline, train_phase1, train_phase2, BaselineLoss, TrainConfig,
};
use rayon::prelude::*;
use std::time::Instant;

fn seed_maps(
    state: &ClassifierState<f32>,
    samples: &[ImageSample],
    variant: WeightVariant,
) -> Vec<Vec<ActivationMap<f32>>> {
    let rw = resolve_weights(state, variant);
    let stride = state.arch.stride();
    samples
        .par_iter()
        .map(|s| {
            let classes = s.positives();
            let maps = extract_for_image(state, &s.pixels, &classes, &rw, false).unwrap();
            maps.into_iter()
                .map(|m| {
                    let up = m.upsampled(stride);
                    ActivationMap { class_id: m.class_id, raw: up.clone(), normalized: up }
                })
                .collect()
        })
        .collect()
}

fn miou_at(
    maps: &[Vec<ActivationMap<f32>>],
    samples: &[ImageSample],
    theta: f64,
    k: usize,
) -> f64 {
    let mut acc = ConfusionAccumulator::new(k);
    for (m, s) in maps.iter().zip(samples.iter()) {
        let mask = threshold_maps(m, theta, "cal").unwrap();
        acc.add(&mask.grid, &s.gt_mask).unwrap();
    }
    acc.mean_iou()
}

fn eval_model(
    state: &ClassifierState<f32>,
    corpus: &Corpus,
    variant: WeightVariant,
    tag: &str,
) -> (f64, f64) {
    let train_maps = seed_maps(state, &corpus.train, variant);
    let gts: Vec<_> = corpus.train.iter().map(|s| s.gt_mask.clone()).collect();
    let k = corpus.spec.num_classes;
    let (theta, _) = search_threshold(&train_maps, &gts, &default_threshold_grid(), k).unwrap();
    let train_miou = miou_at(&train_maps, &corpus.train, theta, k);
    let val_maps = seed_maps(state, &corpus.val, variant);
    let val_miou = miou_at(&val_maps, &corpus.val, theta, k);
    println!("{tag}: theta*={theta:.2} train mIoU={train_miou:.4} val mIoU={val_miou:.4}");
    (train_miou, val_miou)
}

fn classification_f1(state: &ClassifierState<f32>, samples: &[ImageSample]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for s in samples {
        let f = recam_core::nets::encode(s.pixels.view(), state).unwrap();
        let z = recam_core::nets::classify_fc1(&f, state).unwrap();
        for (k, &zv) in z.iter().enumerate() {
            let pred = zv > 0.0;
            let truth = s.label[k] == 1;
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
}

fn toy(seeds: &[u64], train_n: usize, val_n: usize, epochs: usize) {
    println!("== single-label toy: BCE vs SCE ({train_n}/{val_n}, {epochs} epochs) ==");
    let mut margins = Vec::new();
    for &seed in seeds {
        let t0 = Instant::now();
        let spec = DatasetSpec::single_label_toy(seed);
        let corpus = Corpus::generate(&spec, train_n, val_n).unwrap();
        let arch = ArchConfig::small(spec.num_classes);
        let cfg = TrainConfig {
            phase1_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let bce = train_baseline::<f32>(&corpus.train, &arch, BaselineLoss::BceOnly, &cfg).unwrap();
        let t_train = t0.elapsed();
        let sce = train_baseline::<f32>(&corpus.train, &arch, BaselineLoss::SceOnly, &cfg).unwrap();
        println!(
            "seed {seed}: bce-f1(val)={:.3} sce-f1(val)={:.3} (train {t_train:?} each)",
            classification_f1(&bce.state, &corpus.val),
            classification_f1(&sce.state, &corpus.val)
        );
        let t1 = Instant::now();
        let (bt, bv) = eval_model(&bce.state, &corpus, WeightVariant::W, &format!("  bce s{seed}"));
        let (st, sv) = eval_model(&sce.state, &corpus, WeightVariant::W, &format!("  sce s{seed}"));
        println!("  eval took {:?}", t1.elapsed());
        margins.push((st - bt, sv - bv));
    }
    let mt: f64 = margins.iter().map(|m| m.0).sum::<f64>() / margins.len() as f64;
    let mv: f64 = margins.iter().map(|m| m.1).sum::<f64>() / margins.len() as f64;
    println!("mean margin: train {:.2} pts, val {:.2} pts", mt * 100.0, mv * 100.0);
}

fn multi(seeds: &[u64], train_n: usize, val_n: usize) {
    println!("== multi-label: BCE-only vs two-phase vs sce-only ({train_n}/{val_n}) ==");
    for &seed in seeds {
        let spec = DatasetSpec::default_corpus(seed);
        let corpus = Corpus::generate(&spec, train_n, val_n).unwrap();
        let arch = ArchConfig::small(spec.num_classes);
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let t0 = Instant::now();
        let phase1 = train_phase1::<f32>(&corpus.train, &arch, &cfg).unwrap();
        println!("seed {seed}: phase1 {:?} f1(val)={:.3}", t0.elapsed(), classification_f1(&phase1.state, &corpus.val));
        let t0 = Instant::now();
        let phase2 = train_phase2::<f32>(phase1.state.clone(), &corpus.train, &cfg).unwrap();
        println!("  phase2 {:?}", t0.elapsed());
        let sce_only =
            train_baseline::<f32>(&corpus.train, &arch, BaselineLoss::SceOnly, &cfg).unwrap();
        eval_model(&phase1.state, &corpus, WeightVariant::W, "  bce-cam");
        eval_model(&phase2.state, &corpus, WeightVariant::Product, "  recam-product");
        eval_model(&phase2.state, &corpus, WeightVariant::W, "  recam-w");
        eval_model(&phase2.state, &corpus, WeightVariant::WPrime, "  recam-wprime");
        eval_model(&sce_only.state, &corpus, WeightVariant::W, "  sce-only");
    }
}

fn lambda_sweep(seed: u64, train_n: usize, val_n: usize) {
    println!("== lambda sweep ==");
    let spec = DatasetSpec::default_corpus(seed);
    let corpus = Corpus::generate(&spec, train_n, val_n).unwrap();
    let arch = ArchConfig::small(spec.num_classes);
    let base = TrainConfig { seed, ..TrainConfig::default() };
    let phase1 = train_phase1::<f32>(&corpus.train, &arch, &base).unwrap();
    for lambda in [0.0, 0.1, 0.5, 1.0, 2.0] {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let out = train_phase2::<f32>(phase1.state.clone(), &corpus.train, &cfg).unwrap();
        let variant = if lambda == 0.0 { WeightVariant::W } else { WeightVariant::Product };
        eval_model(&out.state, &corpus, variant, &format!("  lambda={lambda}"));
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    match mode.as_str() {
        "toy" => toy(&[101], 800, 300, 16),
        "toy3" => toy(&[101, 102, 103], 2000, 500, 6),
        "multi" => multi(&[201], 800, 300),
        "multi-full" => multi(&[201], 2000, 500),
        "lambda" => lambda_sweep(301, 800, 300),
        other => eprintln!("unknown mode {other}"),
    }
}
