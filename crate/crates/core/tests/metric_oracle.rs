mod common;

use common::set_oracle_miou;
use rand::Rng as _;
use zsda_core::rng::rng_from_seed;
use zsda_core::segmentation::{miou, ClassMap, ConfusionMatrix};

fn random_map(rng: &mut zsda_core::rng::Rng, classes: u8) -> ClassMap {
    ClassMap::from_vec(8, 8, (0..64).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

#[test]
fn matches_set_oracle_on_random_maps() {
    let mut rng = rng_from_seed(2024);
    for i in 0..100 {
        // Few classes on some draws so that absent classes occur.
        let classes = if i % 4 == 0 { 2 } else { 5 };
        let pred = random_map(&mut rng, classes);
        let gt = random_map(&mut rng, classes);
        assert_eq!(
            miou(&[pred.clone()], &[gt.clone()], 5).unwrap(),
            set_oracle_miou(&[pred], &[gt], 5)
        );
    }
}

#[test]
fn matches_set_oracle_on_map_lists() {
    let mut rng = rng_from_seed(7);
    let preds: Vec<_> = (0..6).map(|_| random_map(&mut rng, 5)).collect();
    let gts: Vec<_> = (0..6).map(|_| random_map(&mut rng, 5)).collect();
    assert_eq!(miou(&preds, &gts, 5).unwrap(), set_oracle_miou(&preds, &gts, 5));
}

#[test]
fn two_by_two_fixture_is_seven_twelfths() {
    let gt = ClassMap::from_rows(&[&[0, 0], &[1, 1]]).unwrap();
    let pred = ClassMap::from_rows(&[&[0, 1], &[1, 1]]).unwrap();
    // (1/2 + 2/3) / 2 rounds one ulp away from 7.0 / 12.0.
    assert!((miou(&[pred], &[gt], 2).unwrap() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn perfect_prediction_scores_one() {
    let mut rng = rng_from_seed(1);
    let m = random_map(&mut rng, 5);
    assert_eq!(miou(&[m.clone()], &[m], 5).unwrap(), 1.0);
}

#[test]
fn confusion_matrix_merge_equals_joint_accumulation() {
    let mut rng = rng_from_seed(3);
    let pairs: Vec<_> = (0..4).map(|_| (random_map(&mut rng, 5), random_map(&mut rng, 5))).collect();
    let mut joint = ConfusionMatrix::new(5);
    let mut a = ConfusionMatrix::new(5);
    let mut b = ConfusionMatrix::new(5);
    for (i, (p, g)) in pairs.iter().enumerate() {
        joint.accumulate(p, g).unwrap();
        if i % 2 == 0 { &mut a } else { &mut b }.accumulate(p, g).unwrap();
    }
    a.merge(&b);
    assert_eq!(a, joint);
}

#[test]
fn mismatched_inputs_rejected() {
    let a = ClassMap::filled(2, 2, 0);
    let b = ClassMap::filled(2, 3, 0);
    assert!(miou(&[a.clone()], &[b], 2).is_err());
    assert!(miou(&[a.clone(), a.clone()], &[a.clone()], 2).is_err());
    assert!(miou(&[], &[], 2).is_err());
    assert!(miou(&[ClassMap::filled(2, 2, 3)], &[a], 2).is_err());
}
