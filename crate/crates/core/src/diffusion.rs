//! Variance-preserving noise schedules, closed-form forward noising, the
//! deterministic reverse update, and the noise-prediction objective.

use serde::{Deserialize, Serialize};

use crate::denoiser::Conditioning;
use crate::error::{invalid, Error, Result};
use crate::rng::{gaussian_tensor, Rng};
use crate::tensor::Tensor3;

use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    #[default]
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(invalid!("unknown schedule kind {other:?}")),
        }
    }
}

/// Per-timestep signal and noise coefficients, index 0 being the clean signal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(invalid!("timestep {t} outside 0..={}", self.steps()));
        }
        Ok(())
    }
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(invalid!("schedule needs at least one step, got {steps}"));
    }
    let t_max = steps as f64;
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            // Classic 1e-4..2e-2 range at T = 1000, rescaled so shorter
            // chains reach a comparable terminal noise level.
            let scale = 1000.0 / t_max;
            let (lo, hi) = (1e-4 * scale, 2e-2 * scale);
            (1..=steps)
                .map(|t| {
                    let frac = if steps == 1 {
                        0.0
                    } else {
                        (t - 1) as f64 / (t_max - 1.0)
                    };
                    (lo + frac * (hi - lo)).min(MAX_BETA)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let u = (t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(0.0, MAX_BETA))
                .collect()
        }
    };
    let mut alpha_bar = 1.0;
    let mut alphas = Vec::with_capacity(steps + 1);
    let mut sigmas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    sigmas.push(0.0);
    for beta in betas {
        alpha_bar *= 1.0 - beta;
        let a = alpha_bar.sqrt();
        alphas.push(a);
        sigmas.push((1.0 - a * a).sqrt());
    }
    Ok(NoiseSchedule {
        kind,
        alphas,
        sigmas,
    })
}

/// `α_t · z0 + σ_t · ε`.
pub fn forward_noising(z0: &Tensor3, t: usize, eps: &Tensor3, sched: &NoiseSchedule) -> Result<Tensor3> {
    sched.check_t(t)?;
    z0.ensure_same_shape(eps, "forward noising noise")?;
    Tensor3::lincomb(sched.alpha(t), z0, sched.sigma(t), eps)
}

/// Deterministic update from `t` to `t_prev` given a noise estimate.
pub fn reverse_step(
    z_t: &Tensor3,
    eps_pred: &Tensor3,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor3> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(invalid!("reverse step needs t_prev < t, got {t_prev} >= {t}"));
    }
    z_t.ensure_same_shape(eps_pred, "reverse step noise estimate")?;
    let (a_t, s_t) = (sched.alpha(t), sched.sigma(t));
    let (a_p, s_p) = (sched.alpha(t_prev), sched.sigma(t_prev));
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&z, &e)| {
            let x0 = (z - s_t * e) / a_t;
            a_p * x0 + s_p * e
        })
        .collect();
    let (c, h, w) = z_t.shape();
    Tensor3::from_vec(c, h, w, data)
}

/// Descending timesteps `k = t_n > … > t_0 = 0`, `n = min(k, steps)`,
/// uniformly spaced.
pub fn timestep_sequence(k: usize, steps: usize) -> Vec<usize> {
    if k == 0 {
        return vec![0];
    }
    let n = k.min(steps.max(1));
    (0..=n).rev().map(|i| k * i / n).collect()
}

/// Anything that can estimate the noise in `z` at timestep `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<Tensor3>;

    /// `false` for models that have never been trained.
    fn is_usable(&self) -> bool {
        true
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<Tensor3> {
        (**self).predict_noise(z, t, cond)
    }

    fn is_usable(&self) -> bool {
        (**self).is_usable()
    }
}

/// A noise predictor with a flat parameter vector and a backward pass.
pub trait TrainableDenoiser: NoisePredictor {
    type Tape;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn forward_with_tape(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<(Tensor3, Self::Tape)>;

    /// Accumulate `d loss / d params` into `grads` given `d loss / d output`.
    fn backward(&self, tape: &Self::Tape, grad_out: &Tensor3, grads: &mut [f64]) -> Result<()>;
}

/// Run the reverse chain from `z_k` at timestep `k` down to 0.
pub fn denoise_from<D: NoisePredictor + ?Sized>(
    z_k: &Tensor3,
    k: usize,
    denoiser: &D,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor3> {
    sched.check_t(k)?;
    if steps < 1 {
        return Err(invalid!("denoising needs at least one step"));
    }
    if k == 0 {
        return Ok(z_k.clone());
    }
    let ts = timestep_sequence(k, steps);
    let mut z = z_k.clone();
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = denoiser.predict_noise(&z, t, cond)?;
        z = reverse_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}

struct LossDraw {
    t: usize,
    eps: Tensor3,
    z_t: Tensor3,
}

fn draw_training_point(z0: &Tensor3, sched: &NoiseSchedule, rng: &mut Rng) -> Result<LossDraw> {
    let t = rng.random_range(1..=sched.steps());
    let (c, h, w) = z0.shape();
    let eps = gaussian_tensor(rng, c, h, w);
    let z_t = forward_noising(z0, t, &eps, sched)?;
    Ok(LossDraw { t, eps, z_t })
}

fn mse(pred: &Tensor3, target: &Tensor3) -> Result<f64> {
    pred.ensure_same_shape(target, "denoiser output")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean squared noise-prediction error at one random `(t, ε)` draw.
///
/// Consumes the rng exactly like [`denoiser_loss_and_grad`], so both see the
/// same draw for the same rng state.
pub fn denoiser_loss<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    z0: &Tensor3,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = draw_training_point(z0, sched, rng)?;
    let pred = denoiser.predict_noise(&draw.z_t, draw.t, cond)?;
    mse(&pred, &draw.eps)
}

/// [`denoiser_loss`] plus its parameter gradient, accumulated into `grads`
/// with weight `weight` (use `1 / batch` for batch means).
pub fn denoiser_loss_and_grad<D: TrainableDenoiser>(
    denoiser: &D,
    z0: &Tensor3,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    weight: f64,
    grads: &mut [f64],
) -> Result<f64> {
    let draw = draw_training_point(z0, sched, rng)?;
    let (pred, tape) = denoiser.forward_with_tape(&draw.z_t, draw.t, cond)?;
    let loss = mse(&pred, &draw.eps)?;
    let n = pred.len() as f64;
    let grad_out = Tensor3::lincomb(2.0 * weight / n, &pred, -2.0 * weight / n, &draw.eps)?;
    denoiser.backward(&tape, &grad_out, grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::segmentation::ClassMap;

    fn cond() -> Conditioning {
        Conditioning::new(0, ClassMap::filled(2, 3, 0), true)
    }

    #[test]
    fn schedules_satisfy_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 2, 50, 1000] {
                let s = build_schedule(steps, kind).unwrap();
                assert_eq!(s.alphas().len(), steps + 1);
                assert_eq!(s.alpha(0), 1.0);
                assert_eq!(s.sigma(0), 0.0);
                for t in 0..=steps {
                    let a = s.alpha(t);
                    let sg = s.sigma(t);
                    assert!(a > 0.0 && a <= 1.0, "{kind:?} T={steps} t={t} alpha={a}");
                    assert!((0.0..1.0).contains(&sg));
                    assert!((a * a + sg * sg - 1.0).abs() < 1e-10);
                    if t > 0 {
                        assert!(a < s.alpha(t - 1));
                        assert!(sg > s.sigma(t - 1));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            build_schedule(0, ScheduleKind::Cosine),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cosine_terminal_sigma_near_one() {
        // f(t) = cos²(((t/T + s)/(1 + s))·π/2); with the 0.999 beta cap the
        // last step keeps 0.1% of ᾱ_{T-1}.
        let s = build_schedule(50, ScheduleKind::Cosine).unwrap();
        let f = |t: f64| (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let abar_49 = f(49.0) / f(0.0);
        let expected = (1.0 - abar_49 * 0.001).sqrt();
        assert!((s.sigma(50) - expected).abs() < 1e-12);
        assert!(s.sigma(50) > 0.99 && s.sigma(50) < 1.0);
    }

    #[test]
    fn forward_noising_examples() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let z0 = Tensor3::filled(1, 2, 3, 0.3);
        let eps = Tensor3::filled(1, 2, 3, -2.0);
        assert_eq!(forward_noising(&z0, 0, &eps, &s).unwrap(), z0);
        assert!(forward_noising(&z0, 11, &eps, &s).is_err());
        assert!(forward_noising(&z0, 1, &Tensor3::zeros(1, 3, 2), &s).is_err());
    }

    #[test]
    fn reverse_step_rejects_non_decreasing() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let z = Tensor3::zeros(1, 1, 1);
        assert!(reverse_step(&z, &z, 3, 3, &s).is_err());
        assert!(reverse_step(&z, &z, 3, 5, &s).is_err());
    }

    #[test]
    fn reverse_step_with_zero_noise_rescales() {
        let s = build_schedule(20, ScheduleKind::Linear).unwrap();
        let z = Tensor3::from_vec(1, 1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let out = reverse_step(&z, &Tensor3::zeros(1, 1, 3), 12, 4, &s).unwrap();
        for (o, zi) in out.data().iter().zip(z.data()) {
            assert!((o - s.alpha(4) * zi / s.alpha(12)).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_sequence_is_uniform_and_ends_at_zero() {
        assert_eq!(timestep_sequence(5, 5), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(timestep_sequence(10, 2), vec![10, 5, 0]);
        assert_eq!(timestep_sequence(45, 100), (0..=45).rev().collect::<Vec<_>>());
        let seq = timestep_sequence(32, 10);
        assert_eq!(seq.len(), 11);
        assert_eq!(*seq.last().unwrap(), 0);
        assert!(seq.windows(2).all(|w| w[0] > w[1]));
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, z: &Tensor3, _: usize, _: &Conditioning) -> Result<Tensor3> {
            Ok(Tensor3::zeros(z.channels(), z.height(), z.width()))
        }
    }

    #[test]
    fn denoise_from_zero_steps_is_identity() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let z = Tensor3::from_vec(1, 1, 2, vec![0.1, f64::MIN_POSITIVE]).unwrap();
        let out = denoise_from(&z, 0, &Zero, &cond(), &s, 10).unwrap();
        assert_eq!(out.data(), z.data());
    }

    #[test]
    fn zero_predictor_loss_is_noise_variance() {
        let s = build_schedule(50, ScheduleKind::Cosine).unwrap();
        let z0 = Tensor3::filled(1, 2, 3, 0.5);
        let mut rng = rng_from_seed(11);
        let mut total = 0.0;
        let n = 4000;
        for _ in 0..n {
            total += denoiser_loss(&Zero, &z0, &cond(), &s, &mut rng).unwrap();
        }
        let mean = total / n as f64;
        // Var(ε²) = 2, averaged over 6 entries and n draws.
        assert!((mean - 1.0).abs() < 4.0 * (2.0 / (6.0 * n as f64)).sqrt(), "{mean}");
    }
}
