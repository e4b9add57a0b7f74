//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashSet;

use zsda_core::diffusion::{denoise_from, forward_noising, NoiseSchedule};
use zsda_core::denoiser::Conditioning;
use zsda_core::rng::{gaussian_tensor, rng_from_seed, standard_normal};
use zsda_core::scene::OracleDenoiser;
use zsda_core::segmentation::{ClassMap, SegConfig, SegModel};
use zsda_core::tensor::Tensor3;
use zsda_core::transfer::stochastic_inversion_traced;

pub fn cond(h: usize, w: usize) -> Conditioning {
    Conditioning::new(0, ClassMap::filled(h, w, 0), true)
}

/// Mean/variance agreement between closed-form noising to `t` and noising
/// to `s` followed by the VP transition `s → t`, as z-scores of the
/// differences. Returns `(mean_z, var_z)`.
pub fn composed_noising_zscores(sched: &NoiseSchedule, s: usize, t: usize, x0: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng_from_seed(seed);
    let z0 = Tensor3::filled(1, 1, 1, x0);
    let (a_s, s_s) = (sched.alpha(s), sched.sigma(s));
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    let a_ts = a_t / a_s;
    let s_ts = (s_t * s_t - a_ts * a_ts * s_s * s_s).max(0.0).sqrt();
    let mut direct = Vec::with_capacity(draws);
    let mut composed = Vec::with_capacity(draws);
    for _ in 0..draws {
        let eps = Tensor3::filled(1, 1, 1, standard_normal(&mut rng));
        direct.push(forward_noising(&z0, t, &eps, sched).unwrap().data()[0]);
        let e1 = Tensor3::filled(1, 1, 1, standard_normal(&mut rng));
        let zs = forward_noising(&z0, s, &e1, sched).unwrap().data()[0];
        composed.push(a_ts * zs + s_ts * standard_normal(&mut rng));
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        // Standard errors of the mean and of the sample variance.
        (m, var, (var / n).sqrt(), ((m4 - var * var * (n - 3.0) / (n - 1.0)) / n).sqrt())
    };
    let (m1, v1, se_m1, se_v1) = stats(&direct);
    let (m2, v2, se_m2, se_v2) = stats(&composed);
    (
        (m1 - m2) / (se_m1.hypot(se_m2)),
        (v1 - v2) / (se_v1.hypot(se_v2)),
    )
}

/// Noise `z0` to `k` and run the full reverse chain with the exact oracle;
/// returns the max-abs reconstruction error.
pub fn oracle_chain_error(sched: &NoiseSchedule, z0: &Tensor3, k: usize, steps: usize, seed: u64) -> f64 {
    let (c, h, w) = z0.shape();
    let eps = gaussian_tensor(&mut rng_from_seed(seed), c, h, w);
    let zk = forward_noising(z0, k, &eps, sched).unwrap();
    let oracle = OracleDenoiser::exact(sched.clone(), z0.clone());
    let out = denoise_from(&zk, k, &oracle, &cond(h, w), sched, steps).unwrap();
    out.max_abs_diff(z0)
}

/// `max |z_k' − z_k|` for stochastic inversion under the registry oracle.
pub fn inversion_gap(sched: &NoiseSchedule, z0: &Tensor3, k: usize, seed: u64) -> f64 {
    let (c, h, w) = z0.shape();
    // Replay the draw stochastic inversion will make so the oracle can
    // register the exact noise.
    let eps = gaussian_tensor(&mut rng_from_seed(seed), c, h, w);
    let mut oracle = OracleDenoiser::registry(sched.clone());
    oracle.register(z0.clone(), eps).unwrap();
    let trace = stochastic_inversion_traced(z0, k, &oracle, &cond(h, w), sched, &mut rng_from_seed(seed)).unwrap();
    trace.z_k_prime.max_abs_diff(&trace.z_k)
}

/// mIoU from pixel coordinate sets, one per class and role.
pub fn set_oracle_miou(preds: &[ClassMap], gts: &[ClassMap], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let mut p = HashSet::new();
        let mut g = HashSet::new();
        for (i, (pm, gm)) in preds.iter().zip(gts).enumerate() {
            for y in 0..pm.height() {
                for x in 0..pm.width() {
                    if pm.get(y, x) == c {
                        p.insert((i, y, x));
                    }
                    if gm.get(y, x) == c {
                        g.insert((i, y, x));
                    }
                }
            }
        }
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Ten parameters: a bias-free 1×1 encoder (3→2) and 1×1 head (2→2).
pub fn tiny_seg_config(h: usize, w: usize) -> SegConfig {
    SegConfig {
        in_channels: 3,
        height: h,
        width: w,
        widths: vec![2],
        strides: vec![1],
        kernel: 1,
        decoder_hidden: None,
        num_classes: 2,
        bias: false,
    }
}

pub fn tiny_seg_model(h: usize, w: usize, seed: u64) -> SegModel {
    SegModel::new(tiny_seg_config(h, w), seed).unwrap()
}

/// Largest relative error between `grad` and central differences of `f`.
pub fn max_fd_rel_error(params: &[f64], grad: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
