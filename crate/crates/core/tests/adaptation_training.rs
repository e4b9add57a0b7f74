use std::cell::RefCell;

use zsda_core::adaptation::{
    train_source_only, train_source_only_with_hooks, train_zodi, train_zodi_with_hooks, AugmentEvent, TrainConfig,
    TrainHooks,
};
use zsda_core::scene::{render_seed, Domain, ReadAudit, SceneSample};
use zsda_core::segmentation::{SegConfig, SegModel};
use zsda_core::transfer::{TransferConfig, TransferredPair, Variant};

fn pairs(n: u64, target: Domain) -> Vec<TransferredPair> {
    (0..n)
        .map(|s| {
            let source = render_seed(s, Domain::Day);
            TransferredPair {
                generated: render_seed(s, target).image,
                layout: source.layout.clone(),
                source,
                config: TransferConfig::for_domain(target, Variant::Zodi),
                item_seed: s,
            }
        })
        .collect()
}

fn model(seed: u64) -> SegModel {
    SegModel::new(SegConfig::default(), seed).unwrap()
}

#[test]
fn four_pairs_overfit() {
    // The default output stride of 8 cannot represent thin structures, so
    // memorising exact maps needs the finer grid and one step per pair.
    let seg = SegConfig {
        strides: vec![2, 2, 1],
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 1,
        lr: 0.02,
        ..Default::default()
    };
    let (_, hist) = train_zodi(SegModel::new(seg, 0).unwrap(), &pairs(4, Domain::Snow), &cfg).unwrap();
    let last = hist.last().unwrap();
    assert!(last.task < 0.1, "final task loss {}", last.task);
    assert_eq!(hist.len(), 300);
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let data = pairs(6, Domain::Snow);
    let (a, ha) = train_zodi(model(1), &data, &cfg).unwrap();
    let (b, hb) = train_zodi(model(1), &data, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params(), b.params());
}

#[test]
fn similarity_weight_changes_the_trajectory() {
    let data = pairs(8, Domain::Night);
    let run = |lambda| {
        let cfg = TrainConfig {
            epochs: 3,
            lambda,
            ..Default::default()
        };
        train_zodi(model(2), &data, &cfg).unwrap().1
    };
    let (h0, h1) = (run(0.0), run(0.1));
    assert!(h0.iter().all(|l| l.lambda == 0.0 && l.total == l.task));
    assert_ne!(h0[1].task, h1[1].task);
    for l in &h1 {
        assert!((l.total - (0.1 * l.sim + l.task)).abs() < 1e-10);
    }
}

#[test]
fn source_only_equals_self_paired_training_without_similarity() {
    let samples: Vec<SceneSample> = (0..6).map(|s| render_seed(s, Domain::Day)).collect();
    let self_pairs: Vec<TransferredPair> = samples
        .iter()
        .map(|s| TransferredPair {
            source: s.clone(),
            generated: s.image.clone(),
            layout: s.layout.clone(),
            config: TransferConfig::new(Domain::Night, 0.0, Variant::Zodi).unwrap(),
            item_seed: s.seed,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 4,
        lambda: 0.0,
        ..Default::default()
    };
    let (a, ha) = train_source_only(model(3), &samples, &cfg).unwrap();
    let (b, hb) = train_zodi(model(3), &self_pairs, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(ha, hb);
}

#[test]
fn spatial_augmentation_is_shared_within_a_pair() {
    let data = pairs(5, Domain::Rain);
    let events = RefCell::new(Vec::new());
    let mut record = |e: &AugmentEvent<'_>| {
        let p = &data[e.item];
        let (src, gen, lay) = if e.flipped {
            (p.source.image.flip_horizontal(), p.generated.flip_horizontal(), p.layout.flip_horizontal())
        } else {
            (p.source.image.clone(), p.generated.clone(), p.layout.clone())
        };
        events.borrow_mut().push((e.flipped, *e.source == src, *e.generated == gen, *e.layout == lay));
    };
    let cfg = TrainConfig {
        epochs: 6,
        color_jitter: 0.0,
        ..Default::default()
    };
    let mut hooks = TrainHooks {
        audit: None,
        on_augment: Some(&mut record),
    };
    train_zodi_with_hooks(model(4), &data, &cfg, &mut hooks).unwrap();
    let events = events.into_inner();
    assert_eq!(events.len(), 30);
    assert!(events.iter().all(|&(_, s, g, l)| s && g && l));
    assert!(events.iter().any(|e| e.0) && events.iter().any(|e| !e.0));
}

#[test]
fn photometric_jitter_is_independent_within_a_pair() {
    let data = pairs(3, Domain::Fog);
    let mut diffs = Vec::new();
    let mut record = |e: &AugmentEvent<'_>| {
        let p = &data[e.item];
        let (src, gen) = if e.flipped {
            (p.source.image.flip_horizontal(), p.generated.flip_horizontal())
        } else {
            (p.source.image.clone(), p.generated.clone())
        };
        diffs.push((e.source.mean() - src.mean(), e.generated.mean() - gen.mean()));
    };
    let mut hooks = TrainHooks {
        audit: None,
        on_augment: Some(&mut record),
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    train_zodi_with_hooks(model(5), &data, &cfg, &mut hooks).unwrap();
    assert!(diffs.iter().any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn adaptation_reads_only_source_images() {
    let audit = ReadAudit::new();
    let mut hooks = TrainHooks {
        audit: Some(&audit),
        on_augment: None,
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    train_zodi_with_hooks(model(6), &pairs(4, Domain::Night), &cfg, &mut hooks).unwrap();
    let samples: Vec<SceneSample> = (0..4).map(|s| render_seed(s, Domain::Day)).collect();
    train_source_only_with_hooks(model(6), &samples, &cfg, &mut hooks).unwrap();
    assert_eq!(audit.count(Domain::Day), 16);
    assert_eq!(audit.reads_outside(&[Domain::Day]), 0);
}

#[test]
fn source_only_history_decreases_when_smoothed() {
    let samples: Vec<SceneSample> = (100..164).map(|s| render_seed(s, Domain::Day)).collect();
    let cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let (_, hist) = train_source_only(model(7), &samples, &cfg).unwrap();
    let totals: Vec<f64> = hist.iter().map(|l| l.total).collect();
    let smooth: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{smooth:?}");
}

#[test]
fn bad_configs_rejected() {
    let data = pairs(2, Domain::Fog);
    let bad = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(train_zodi(model(0), &data, &bad).is_err());
    let bad = TrainConfig {
        lambda: -1.0,
        ..Default::default()
    };
    assert!(train_zodi(model(0), &data, &bad).is_err());
}
