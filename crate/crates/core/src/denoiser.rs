//! Small layout- and domain-conditioned noise predictor.
//!
//! Encoder-decoder with one skip connection. The layout enters as one-hot
//! channels concatenated to the noisy image; timestep and domain enter as
//! learned embedding tables whose sum drives per-channel scale/shift
//! modulation of three blocks.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{denoiser_loss, denoiser_loss_and_grad, NoisePredictor, NoiseSchedule, TrainableDenoiser};
use crate::error::{invalid, Result};
use crate::nn::{
    film, film_backward, relu, relu_backward, relu_vec, shuffled_indices, upsample_nearest2,
    upsample_nearest2_backward, Adam, Conv2d, ConvTape, Linear, ParamAllocator,
};
use crate::rng::{rng_from_seed, standard_normal};
use crate::scene::SceneSample;
use crate::segmentation::ClassMap;
use crate::tensor::Tensor3;

use rand::Rng as _;

pub const DENOISER_KIND: &str = "denoiser";

/// What the denoiser is conditioned on besides `(z, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Index into the domain vocabulary; stands in for the text prompt.
    pub domain_id: usize,
    pub layout: ClassMap,
    /// When false the layout channels are zeroed.
    pub use_layout: bool,
}

impl Conditioning {
    pub fn new(domain_id: usize, layout: ClassMap, use_layout: bool) -> Self {
        Self {
            domain_id,
            layout,
            use_layout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    /// Dimension `d` of the domain (prompt) and timestep embeddings.
    pub embed_dim: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    /// Number of diffusion steps `T` the timestep table covers.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            height: 32,
            width: 64,
            num_classes: 5,
            num_domains: crate::scene::Domain::COUNT,
            embed_dim: 16,
            base_channels: 16,
            mid_channels: 32,
            timesteps: 50,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_channels", self.image_channels),
            ("height", self.height),
            ("width", self.width),
            ("num_classes", self.num_classes),
            ("num_domains", self.num_domains),
            ("embed_dim", self.embed_dim),
            ("base_channels", self.base_channels),
            ("mid_channels", self.mid_channels),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("denoiser config: {name} must be positive"));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(invalid!(
                "denoiser config: spatial shape ({}, {}) must be even",
                self.height,
                self.width
            ));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(invalid!("denoiser config: too many classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DenoiserArch {
    time_table: std::ops::Range<usize>,
    domain_table: std::ops::Range<usize>,
    embed: Linear,
    film_in: Linear,
    film_down: Linear,
    film_up: Linear,
    conv_in: Conv2d,
    conv_down: Conv2d,
    conv_mid: Conv2d,
    conv_up: Conv2d,
    conv_out: Conv2d,
    num_params: usize,
}

impl DenoiserArch {
    fn build(cfg: &DenoiserConfig) -> Self {
        let mut a = ParamAllocator::new();
        let d = cfg.embed_dim;
        let (c1, c2) = (cfg.base_channels, cfg.mid_channels);
        let time_table = a.alloc((cfg.timesteps + 1) * d);
        let domain_table = a.alloc(cfg.num_domains * d);
        let embed = Linear::new(&mut a, d, d);
        let film_in = Linear::new(&mut a, d, 2 * c1);
        let film_down = Linear::new(&mut a, d, 2 * c2);
        let film_up = Linear::new(&mut a, d, 2 * c1);
        let conv_in = Conv2d::new(&mut a, cfg.image_channels + cfg.num_classes, c1, 3, 1, true);
        let conv_down = Conv2d::new(&mut a, c1, c2, 3, 2, true);
        let conv_mid = Conv2d::new(&mut a, c2, c1, 3, 1, true);
        let conv_up = Conv2d::new(&mut a, 2 * c1, c1, 3, 1, true);
        let conv_out = Conv2d::new(&mut a, c1, cfg.image_channels, 3, 1, true);
        Self {
            time_table,
            domain_table,
            embed,
            film_in,
            film_down,
            film_up,
            conv_in,
            conv_down,
            conv_mid,
            conv_up,
            conv_out,
            num_params: a.len(),
        }
    }
}

/// Trainable `ε_θ(z, t, domain, layout)`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<f64>,
    seed: u64,
    trained_steps: u64,
    arch: DenoiserArch,
}

/// Saved activations for one forward pass.
pub struct DenoiserTape {
    t: usize,
    domain: usize,
    e_pre: Vec<f64>,
    e: Vec<f64>,
    films: [Vec<f64>; 3],
    tin: ConvTape,
    a1: Tensor3,
    h1: Tensor3,
    tdown: ConvTape,
    a2: Tensor3,
    h2: Tensor3,
    tmid: ConvTape,
    h3: Tensor3,
    tup: ConvTape,
    a4: Tensor3,
    h4: Tensor3,
    tout: ConvTape,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = DenoiserArch::build(&config);
        let mut params = vec![0.0; arch.num_params];
        let mut rng = rng_from_seed(seed);
        for p in &mut params[arch.time_table.clone()] {
            *p = 0.5 * standard_normal(&mut rng);
        }
        for p in &mut params[arch.domain_table.clone()] {
            *p = 0.5 * standard_normal(&mut rng);
        }
        arch.embed.init(&mut params, &mut rng, 1.0);
        arch.film_in.init(&mut params, &mut rng, 0.1);
        arch.film_down.init(&mut params, &mut rng, 0.1);
        arch.film_up.init(&mut params, &mut rng, 0.1);
        arch.conv_in.init(&mut params, &mut rng, 1.0);
        arch.conv_down.init(&mut params, &mut rng, 1.0);
        arch.conv_mid.init(&mut params, &mut rng, 1.0);
        arch.conv_up.init(&mut params, &mut rng, 1.0);
        // Zero output layer: an untrained model predicts ε = 0.
        params[arch.conv_out.weight.clone()].fill(0.0);
        if let Some(b) = &arch.conv_out.bias {
            params[b.clone()].fill(0.0);
        }
        Ok(Self {
            config,
            params,
            seed,
            trained_steps: 0,
            arch,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    /// `(rows, dim)` of the domain embedding table.
    pub fn domain_embedding_shape(&self) -> (usize, usize) {
        (self.config.num_domains, self.config.embed_dim)
    }

    pub fn domain_embedding(&self, domain_id: usize) -> Option<&[f64]> {
        (domain_id < self.config.num_domains).then(|| {
            let d = self.config.embed_dim;
            let start = self.arch.domain_table.start + domain_id * d;
            &self.params[start..start + d]
        })
    }

    fn check_inputs(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<()> {
        let c = &self.config;
        if z.shape() != (c.image_channels, c.height, c.width) {
            return Err(invalid!(
                "denoiser expects input shape {:?}, got {:?}",
                (c.image_channels, c.height, c.width),
                z.shape()
            ));
        }
        if t == 0 || t > c.timesteps {
            return Err(invalid!("timestep {t} outside 1..={}", c.timesteps));
        }
        if cond.domain_id >= c.num_domains {
            return Err(invalid!(
                "unknown domain id {} (vocabulary has {})",
                cond.domain_id,
                c.num_domains
            ));
        }
        if cond.layout.shape() != (c.height, c.width) {
            return Err(invalid!(
                "layout shape {:?} does not match image ({}, {})",
                cond.layout.shape(),
                c.height,
                c.width
            ));
        }
        cond.layout.check_classes(c.num_classes)
    }

    fn forward_impl(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<(Tensor3, DenoiserTape)> {
        self.check_inputs(z, t, cond)?;
        let p = &self.params;
        let a = &self.arch;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let (c1, c2) = (cfg.base_channels, cfg.mid_channels);

        let ts = a.time_table.start + t * d;
        let ds = a.domain_table.start + cond.domain_id * d;
        let e0: Vec<f64> = (0..d).map(|i| p[ts + i] + p[ds + i]).collect();
        let e_pre = a.embed.forward(p, &e0);
        let e = relu_vec(&e_pre);
        let f_in = a.film_in.forward(p, &e);
        let f_down = a.film_down.forward(p, &e);
        let f_up = a.film_up.forward(p, &e);

        let layout = if cond.use_layout {
            cond.layout.one_hot(cfg.num_classes)
        } else {
            Tensor3::zeros(cfg.num_classes, cfg.height, cfg.width)
        };
        let x = Tensor3::concat_channels(&[z, &layout])?;

        let (a1, tin) = a.conv_in.forward(p, &x);
        let h1 = relu(&film(&a1, &f_in[..c1], &f_in[c1..]));
        let (a2, tdown) = a.conv_down.forward(p, &h1);
        let h2 = relu(&film(&a2, &f_down[..c2], &f_down[c2..]));
        let (a3, tmid) = a.conv_mid.forward(p, &h2);
        let h3 = relu(&a3);
        let cat = Tensor3::concat_channels(&[&upsample_nearest2(&h3), &h1])?;
        let (a4, tup) = a.conv_up.forward(p, &cat);
        let h4 = relu(&film(&a4, &f_up[..c1], &f_up[c1..]));
        let (out, tout) = a.conv_out.forward(p, &h4);

        Ok((
            out,
            DenoiserTape {
                t,
                domain: cond.domain_id,
                e_pre,
                e,
                films: [f_in, f_down, f_up],
                tin,
                a1,
                h1,
                tdown,
                a2,
                h2,
                tmid,
                h3,
                tup,
                a4,
                h4,
                tout,
            },
        ))
    }

    fn backward_impl(&self, tape: &DenoiserTape, grad_out: &Tensor3, grads: &mut [f64]) {
        let p = &self.params;
        let a = &self.arch;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let (c1, c2) = (cfg.base_channels, cfg.mid_channels);
        let [f_in, f_down, f_up] = &tape.films;

        let g_h4 = a.conv_out.backward(p, &tape.tout, grad_out, grads);
        let g_b4 = relu_backward(&tape.h4, &g_h4);
        let (g_a4, gs_up, gb_up) = film_backward(&tape.a4, &f_up[..c1], &g_b4);
        let g_cat = a.conv_up.backward(p, &tape.tup, &g_a4, grads);
        let mut parts = g_cat.split_channels(&[c1, c1]).into_iter();
        let g_u = parts.next().expect("two parts");
        let mut g_h1 = parts.next().expect("two parts");
        let g_h3 = upsample_nearest2_backward(&g_u);
        let g_a3 = relu_backward(&tape.h3, &g_h3);
        let g_h2 = a.conv_mid.backward(p, &tape.tmid, &g_a3, grads);
        let g_b2 = relu_backward(&tape.h2, &g_h2);
        let (g_a2, gs_down, gb_down) = film_backward(&tape.a2, &f_down[..c2], &g_b2);
        g_h1.add_assign(&a.conv_down.backward(p, &tape.tdown, &g_a2, grads));
        let g_b1 = relu_backward(&tape.h1, &g_h1);
        let (g_a1, gs_in, gb_in) = film_backward(&tape.a1, &f_in[..c1], &g_b1);
        // Input gradient (w.r.t. z and layout) is not needed.
        let _ = a.conv_in.backward(p, &tape.tin, &g_a1, grads);

        let mut g_e = vec![0.0; d];
        for (lin, gs, gb) in [
            (&a.film_in, gs_in, gb_in),
            (&a.film_down, gs_down, gb_down),
            (&a.film_up, gs_up, gb_up),
        ] {
            let g_f: Vec<f64> = gs.into_iter().chain(gb).collect();
            let ge = lin.backward(p, &tape.e, &g_f, grads);
            for (acc, v) in g_e.iter_mut().zip(ge) {
                *acc += v;
            }
        }
        let g_e_pre: Vec<f64> = g_e
            .iter()
            .zip(&tape.e_pre)
            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
            .collect();
        let e0: Vec<f64> = (0..d)
            .map(|i| {
                p[a.time_table.start + tape.t * d + i] + p[a.domain_table.start + tape.domain * d + i]
            })
            .collect();
        let g_e0 = a.embed.backward(p, &e0, &g_e_pre, grads);
        let ts = a.time_table.start + tape.t * d;
        let ds = a.domain_table.start + tape.domain * d;
        for i in 0..d {
            grads[ts + i] += g_e0[i];
            grads[ds + i] += g_e0[i];
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<DenoiserConfig> {
        Checkpoint::new(
            DENOISER_KIND,
            self.config.clone(),
            self.seed,
            self.trained_steps,
            &self.params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<DenoiserConfig>) -> Result<Self> {
        let mut den = Self::new(ckpt.config.clone(), ckpt.seed)?;
        let params = ckpt.decode_params()?;
        if params.len() != den.params.len() {
            return Err(invalid!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                den.params.len()
            ));
        }
        den.params = params;
        den.trained_steps = ckpt.trained_steps;
        Ok(den)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<Tensor3> {
        Ok(self.forward_impl(z, t, cond)?.0)
    }

    fn is_usable(&self) -> bool {
        self.trained_steps > 0
    }
}

impl TrainableDenoiser for Denoiser {
    type Tape = DenoiserTape;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward_with_tape(&self, z: &Tensor3, t: usize, cond: &Conditioning) -> Result<(Tensor3, DenoiserTape)> {
        self.forward_impl(z, t, cond)
    }

    fn backward(&self, tape: &DenoiserTape, grad_out: &Tensor3, grads: &mut [f64]) -> Result<()> {
        self.backward_impl(tape, grad_out, grads);
        Ok(())
    }
}

pub fn init_denoiser(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
    Denoiser::new(config, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last step, as a fraction of `lr` (linear decay).
    pub final_lr_fraction: f64,
    /// Probability of training a sample with the layout channels zeroed,
    /// so the same model also serves layout-free transfer variants.
    pub layout_dropout: f64,
    /// Samples used for the untrained-baseline entry of the loss history.
    pub baseline_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            lr: 3e-3,
            final_lr_fraction: 0.1,
            layout_dropout: 0.2,
            baseline_samples: 64,
            seed: 0,
        }
    }
}

/// Train on the noise-prediction objective.
///
/// The returned history has `epochs + 1` entries: entry 0 is the mean loss
/// of the incoming model over (up to) `baseline_samples` corpus items, then
/// one mean training loss per epoch.
pub fn pretrain(
    mut den: Denoiser,
    corpus: &[SceneSample],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(invalid!("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.layout_dropout) {
        return Err(invalid!("layout dropout must be a probability"));
    }
    if sched.steps() != den.config.timesteps {
        return Err(invalid!(
            "schedule has {} steps, denoiser was built for {}",
            sched.steps(),
            den.config.timesteps
        ));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs + 1);

    let n_base = cfg.baseline_samples.clamp(1, corpus.len());
    let mut base = 0.0;
    for s in &corpus[..n_base] {
        let cond = Conditioning::new(s.domain.id(), s.layout.clone(), true);
        base += denoiser_loss(&den, &s.image, &cond, sched, &mut rng)?;
    }
    history.push(base / n_base as f64);

    let batches_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut opt = Adam::new(den.params.len(), cfg.lr);
    let mut grads = vec![0.0; den.params.len()];
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = shuffled_indices(corpus.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &corpus[i];
                let use_layout = rng.random::<f64>() >= cfg.layout_dropout;
                let cond = Conditioning::new(s.domain.id(), s.layout.clone(), use_layout);
                epoch_loss += denoiser_loss_and_grad(&den, &s.image, &cond, sched, &mut rng, w, &mut grads)?;
            }
            let frac = step as f64 / total_steps as f64;
            opt.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            opt.step(&mut den.params, &grads);
            den.trained_steps += 1;
            step += 1;
        }
        history.push(epoch_loss / corpus.len() as f64);
    }
    Ok((den, history))
}

/// Mean noise-prediction loss over `samples`, one draw each.
pub fn validation_loss<D: NoisePredictor + ?Sized>(
    den: &D,
    samples: &[SceneSample],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid!("validation set is empty"));
    }
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for s in samples {
        let cond = Conditioning::new(s.domain.id(), s.layout.clone(), true);
        total += denoiser_loss(den, &s.image, &cond, sched, &mut rng)?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, ScheduleKind};
    use crate::rng::gaussian_tensor;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 2,
            height: 4,
            width: 6,
            num_classes: 3,
            num_domains: 2,
            embed_dim: 3,
            base_channels: 2,
            mid_channels: 3,
            timesteps: 5,
        }
    }

    #[test]
    fn deterministic_init_and_shapes() {
        let a = init_denoiser(DenoiserConfig::default(), 4).unwrap();
        let b = init_denoiser(DenoiserConfig::default(), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.num_params() < 500_000);
        let cfg = DenoiserConfig {
            num_domains: 5,
            embed_dim: 16,
            ..DenoiserConfig::default()
        };
        assert_eq!(init_denoiser(cfg, 0).unwrap().domain_embedding_shape(), (5, 16));
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = DenoiserConfig {
            height: 31,
            ..DenoiserConfig::default()
        };
        assert!(init_denoiser(cfg, 0).is_err());
        let cfg = DenoiserConfig {
            embed_dim: 0,
            ..DenoiserConfig::default()
        };
        assert!(init_denoiser(cfg, 0).is_err());
    }

    #[test]
    fn unknown_domain_and_bad_t_rejected() {
        let den = init_denoiser(tiny_config(), 1).unwrap();
        let z = Tensor3::zeros(2, 4, 6);
        let cond = Conditioning::new(2, ClassMap::filled(4, 6, 0), true);
        assert!(den.predict_noise(&z, 1, &cond).is_err());
        let cond = Conditioning::new(1, ClassMap::filled(4, 6, 0), true);
        assert!(den.predict_noise(&z, 0, &cond).is_err());
        assert!(den.predict_noise(&z, 6, &cond).is_err());
        assert!(den.predict_noise(&z, 5, &cond).is_ok());
    }

    fn randomize(den: &mut Denoiser, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for p in den.params_mut() {
            *p = 0.5 * standard_normal(&mut rng);
        }
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let mut den = init_denoiser(tiny_config(), 1).unwrap();
        randomize(&mut den, 77);
        let mut rng = rng_from_seed(5);
        let z = gaussian_tensor(&mut rng, 2, 4, 6);
        let layout = ClassMap::from_vec(4, 6, (0..24).map(|i| (i % 3) as u8).collect()).unwrap();
        let cond = Conditioning::new(1, layout, true);
        let r = gaussian_tensor(&mut rng, 2, 4, 6);
        let loss = |d: &Denoiser| -> f64 {
            d.predict_noise(&z, 3, &cond)
                .unwrap()
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, tape) = den.forward_with_tape(&z, 3, &cond).unwrap();
        let mut grads = vec![0.0; den.num_params()];
        den.backward(&tape, &r, &mut grads).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..den.num_params() {
            let mut dp = den.clone();
            dp.params[i] += h;
            let mut dm = den.clone();
            dm.params[i] -= h;
            let fd = (loss(&dp) - loss(&dm)) / (2.0 * h);
            let err = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn layout_switch_zeroes_channels() {
        let mut den = init_denoiser(tiny_config(), 1).unwrap();
        randomize(&mut den, 8);
        let z = gaussian_tensor(&mut rng_from_seed(1), 2, 4, 6);
        let l1 = ClassMap::filled(4, 6, 1);
        let l2 = ClassMap::filled(4, 6, 2);
        let off1 = den.predict_noise(&z, 2, &Conditioning::new(0, l1.clone(), false)).unwrap();
        let off2 = den.predict_noise(&z, 2, &Conditioning::new(0, l2.clone(), false)).unwrap();
        assert_eq!(off1, off2);
        let on1 = den.predict_noise(&z, 2, &Conditioning::new(0, l1, true)).unwrap();
        let on2 = den.predict_noise(&z, 2, &Conditioning::new(0, l2, true)).unwrap();
        assert_ne!(on1, on2);
    }

    #[test]
    fn empty_corpus_rejected() {
        let den = init_denoiser(tiny_config(), 1).unwrap();
        let sched = build_schedule(5, ScheduleKind::Cosine).unwrap();
        assert!(pretrain(den, &[], &sched, &PretrainConfig::default()).is_err());
    }
}
