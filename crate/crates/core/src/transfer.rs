//! Zero-shot image transfer: noise the source image for `k` steps, optionally
//! replace the injected noise with the denoiser's own estimate of it, then
//! denoise toward the target domain under the original layout.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Conditioning;
use crate::diffusion::{denoise_from, forward_noising, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, gaussian_tensor, rng_from_seed, Rng};
use crate::scene::{Domain, ReadAudit, SceneSample};
use crate::segmentation::ClassMap;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Layout conditioning plus stochastic inversion.
    Zodi,
    /// Neither layout conditioning nor inversion.
    Sdedit,
    /// Inversion without layout conditioning.
    Inst,
    /// Layout conditioning without inversion.
    NoSi,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Zodi, Variant::Sdedit, Variant::Inst, Variant::NoSi];

    pub fn uses_layout(self) -> bool {
        matches!(self, Variant::Zodi | Variant::NoSi)
    }

    pub fn uses_inversion(self) -> bool {
        matches!(self, Variant::Zodi | Variant::Inst)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Zodi => "zodi",
            Variant::Sdedit => "sdedit",
            Variant::Inst => "inst",
            Variant::NoSi => "no_si",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown transfer variant {s:?}"))
    }
}

/// Which domain embedding conditions the inversion noise estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionPrompt {
    #[default]
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub target_domain: Domain,
    /// `S` in `[0, 1]`; the step count is always derived as `⌊T·S⌋`.
    pub strength: f64,
    pub variant: Variant,
    /// Reverse-step budget; `None` runs every one of the `k` steps.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub inversion_prompt: InversionPrompt,
}

impl TransferConfig {
    pub fn new(target_domain: Domain, strength: f64, variant: Variant) -> Result<Self> {
        let cfg = Self {
            target_domain,
            strength,
            variant,
            steps: None,
            inversion_prompt: InversionPrompt::Target,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Target-domain default strength.
    pub fn for_domain(target_domain: Domain, variant: Variant) -> Self {
        Self::new(target_domain, target_domain.default_strength(), variant)
            .expect("default strengths are in range")
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = Some(steps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(invalid!("strength {} outside [0, 1]", self.strength));
        }
        if self.steps == Some(0) {
            return Err(invalid!("reverse step budget must be positive"));
        }
        Ok(())
    }

    pub fn k(&self, total_steps: usize) -> Result<usize> {
        strength_to_k(total_steps, self.strength)
    }
}

/// `⌊T·S⌋`. A tolerance of 1e-9 absorbs binary representation error in
/// decimal strengths (e.g. `0.7 · 10`).
pub fn strength_to_k(total_steps: usize, strength: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(invalid!("strength {strength} outside [0, 1]"));
    }
    Ok(((total_steps as f64 * strength) + 1e-9).floor() as usize)
}

/// Every intermediate of one stochastic inversion.
#[derive(Clone, Debug)]
pub struct InversionTrace {
    pub eps: Tensor3,
    pub z_k: Tensor3,
    pub eps_k: Tensor3,
    pub z_k_prime: Tensor3,
}

pub fn stochastic_inversion_traced<D: NoisePredictor + ?Sized>(
    z0: &Tensor3,
    k: usize,
    den: &D,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<InversionTrace> {
    if k == 0 || k > sched.steps() {
        return Err(invalid!(
            "stochastic inversion needs 1 <= k <= {}, got {k}",
            sched.steps()
        ));
    }
    let (c, h, w) = z0.shape();
    let eps = gaussian_tensor(rng, c, h, w);
    let z_k = forward_noising(z0, k, &eps, sched)?;
    let eps_k = den.predict_noise(&z_k, k, cond)?;
    let z_k_prime = forward_noising(z0, k, &eps_k, sched)?;
    Ok(InversionTrace {
        eps,
        z_k,
        eps_k,
        z_k_prime,
    })
}

/// Noise `z0` to step `k`, then re-noise it with the denoiser's estimate of
/// the injected noise instead of the noise itself.
pub fn stochastic_inversion<D: NoisePredictor + ?Sized>(
    z0: &Tensor3,
    k: usize,
    den: &D,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor3> {
    Ok(stochastic_inversion_traced(z0, k, den, cond, sched, rng)?.z_k_prime)
}

/// A source image with its transferred counterpart; `layout` is the source
/// annotation, reused unchanged for the generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferredPair {
    pub source: SceneSample,
    pub generated: Tensor3,
    pub layout: ClassMap,
    pub config: TransferConfig,
    pub item_seed: u64,
}

pub fn transfer_image<D: NoisePredictor + ?Sized>(
    sample: &SceneSample,
    cfg: &TransferConfig,
    den: &D,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TransferredPair> {
    transfer_image_seeded(sample, cfg, den, sched, rng, 0)
}

fn transfer_image_seeded<D: NoisePredictor + ?Sized>(
    sample: &SceneSample,
    cfg: &TransferConfig,
    den: &D,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    item_seed: u64,
) -> Result<TransferredPair> {
    cfg.validate()?;
    if !den.is_usable() {
        return Err(Error::UnusableModel(
            "denoiser has never been trained; pretrain it before transferring".into(),
        ));
    }
    let k = cfg.k(sched.steps())?;
    let generated = if k == 0 {
        sample.image.clone()
    } else {
        let z0 = &sample.image;
        let use_layout = cfg.variant.uses_layout();
        let gen_cond = Conditioning::new(cfg.target_domain.id(), sample.layout.clone(), use_layout);
        let z_k = if cfg.variant.uses_inversion() {
            let inv_domain = match cfg.inversion_prompt {
                InversionPrompt::Target => cfg.target_domain,
                InversionPrompt::Source => sample.domain,
            };
            let inv_cond = Conditioning::new(inv_domain.id(), sample.layout.clone(), use_layout);
            stochastic_inversion(z0, k, den, &inv_cond, sched, rng)?
        } else {
            let (c, h, w) = z0.shape();
            forward_noising(z0, k, &gaussian_tensor(rng, c, h, w), sched)?
        };
        let steps = cfg.steps.unwrap_or(k);
        denoise_from(&z_k, k, den, &gen_cond, sched, steps)?.clamp(-1.0, 1.0)
    };
    Ok(TransferredPair {
        source: sample.clone(),
        generated,
        layout: sample.layout.clone(),
        config: cfg.clone(),
        item_seed,
    })
}

/// Per-item seed: depends only on the master seed and the scene seed.
pub fn item_seed(master_seed: u64, scene_seed: u64) -> u64 {
    derive_seed(master_seed, scene_seed)
}

/// Transfer every sample, one output per input in input order. Items are
/// independent and processed in parallel; output is identical to a
/// sequential run.
pub fn transfer_dataset<D: NoisePredictor + Sync + ?Sized>(
    samples: &[SceneSample],
    cfg: &TransferConfig,
    den: &D,
    sched: &NoiseSchedule,
    master_seed: u64,
    audit: Option<&ReadAudit>,
) -> Result<Vec<TransferredPair>> {
    if let Some(first) = samples.first() {
        if let Some((i, _)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.image.shape() != first.image.shape())
        {
            return Err(Error::Item {
                index: i,
                source: Box::new(invalid!("sample shape differs from the first sample")),
            });
        }
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            if let Some(a) = audit {
                a.record(sample.domain);
            }
            let seed = item_seed(master_seed, sample.seed);
            let mut rng = rng_from_seed(seed);
            transfer_image_seeded(sample, cfg, den, sched, &mut rng, seed).map_err(|e| Error::Item {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
