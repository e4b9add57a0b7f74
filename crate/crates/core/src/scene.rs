//! Procedural driving scenes with exact class maps, rendered in six
//! photometric domains, plus the data splits and test fixtures built on them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Conditioning;
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, Rng};
use crate::segmentation::ClassMap;
use crate::tensor::Tensor3;

pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 64;
pub const NUM_CLASSES: usize = 5;

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDING: u8 = 2;
pub const CAR: u8 = 3;
pub const VEGETATION: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["sky", "road", "building", "car", "vegetation"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Day,
    Night,
    Snow,
    Rain,
    Fog,
    Game,
}

impl Domain {
    pub const COUNT: usize = 6;
    pub const ALL: [Domain; Self::COUNT] = [
        Domain::Day,
        Domain::Night,
        Domain::Snow,
        Domain::Rain,
        Domain::Fog,
        Domain::Game,
    ];
    pub const SOURCE: Domain = Domain::Day;
    pub const TARGETS: [Domain; 5] = [
        Domain::Night,
        Domain::Snow,
        Domain::Rain,
        Domain::Fog,
        Domain::Game,
    ];
    /// Weather/illumination targets; `game` is a rendering-style shift.
    pub const PHOTOMETRIC_TARGETS: [Domain; 4] =
        [Domain::Night, Domain::Snow, Domain::Rain, Domain::Fog];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Domain> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| invalid!("unknown domain id {id}"))
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Day => "day",
            Domain::Night => "night",
            Domain::Snow => "snow",
            Domain::Rain => "rain",
            Domain::Fog => "fog",
            Domain::Game => "game",
        }
    }

    /// The text prompt this domain's embedding stands for.
    pub fn prompt(self) -> &'static str {
        match self {
            Domain::Day => "driving in daytime",
            Domain::Night => "driving at night",
            Domain::Snow => "driving in snow",
            Domain::Rain => "driving under rain",
            Domain::Fog => "driving in fog",
            Domain::Game => "driving in a game",
        }
    }

    /// Default transfer strength for this target.
    pub fn default_strength(self) -> f64 {
        match self {
            Domain::Night => 0.9,
            Domain::Snow | Domain::Rain => 0.65,
            Domain::Fog | Domain::Game => 0.6,
            Domain::Day => 0.0,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Domain> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| invalid!("unknown domain {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rgb(pub f64, pub f64, pub f64);

impl Rgb {
    fn scale(self, s: f64) -> Rgb {
        Rgb(self.0 * s, self.1 * s, self.2 * s)
    }

    fn mix(self, other: Rgb, w: f64) -> Rgb {
        Rgb(
            self.0 * (1.0 - w) + other.0 * w,
            self.1 * (1.0 - w) + other.1 * w,
            self.2 * (1.0 - w) + other.2 * w,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub rect: Rect,
    pub color: Rgb,
    pub window_pitch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Car {
    pub rect: Rect,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub color: Rgb,
}

/// Geometry and palette of one scene, fully determined by its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub horizon: usize,
    pub road_top: usize,
    pub sky_color: Rgb,
    pub road_gray: f64,
    pub ground_color: Rgb,
    pub buildings: Vec<Building>,
    pub vegetation: Vec<Blob>,
    pub cars: Vec<Car>,
}

const SPEC_SALT: u64 = 0x5CE7_E000;
const RENDER_SALT: u64 = 0x4E7D_E400;

const BUILDING_PALETTE: [Rgb; 5] = [
    Rgb(0.72, 0.52, 0.42),
    Rgb(0.62, 0.62, 0.64),
    Rgb(0.82, 0.76, 0.60),
    Rgb(0.52, 0.38, 0.33),
    Rgb(0.70, 0.70, 0.55),
];

const CAR_PALETTE: [Rgb; 6] = [
    Rgb(0.85, 0.12, 0.10),
    Rgb(0.12, 0.25, 0.80),
    Rgb(0.92, 0.82, 0.15),
    Rgb(0.92, 0.92, 0.92),
    Rgb(0.10, 0.10, 0.12),
    Rgb(0.15, 0.60, 0.65),
];

fn jitter(rng: &mut Rng, c: Rgb, amount: f64) -> Rgb {
    Rgb(
        (c.0 + rng.random_range(-amount..=amount)).clamp(0.0, 1.0),
        (c.1 + rng.random_range(-amount..=amount)).clamp(0.0, 1.0),
        (c.2 + rng.random_range(-amount..=amount)).clamp(0.0, 1.0),
    )
}

pub fn generate_spec(seed: u64) -> SceneSpec {
    let mut rng = rng_from_seed(derive_seed(seed, SPEC_SALT));
    let horizon = rng.random_range(8..=13);
    let road_top = rng.random_range(19..=23);

    let mut buildings = Vec::new();
    let n_buildings = rng.random_range(2..=4);
    for _ in 0..n_buildings {
        let w = rng.random_range(8..=20);
        let x0 = rng.random_range(0..WIDTH - 4);
        let x1 = (x0 + w).min(WIDTH);
        let y0 = rng.random_range(2..=horizon + 3);
        let base = BUILDING_PALETTE[rng.random_range(0..BUILDING_PALETTE.len())];
        let color = jitter(&mut rng, base, 0.05);
        buildings.push(Building {
            rect: Rect {
                x0,
                y0,
                x1,
                y1: road_top,
            },
            color,
            window_pitch: rng.random_range(3..=4),
        });
    }

    let mut vegetation = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let base = Rgb(0.18, 0.48, 0.16);
        vegetation.push(Blob {
            cy: rng.random_range(horizon as f64 + 1.0..road_top as f64),
            cx: rng.random_range(0.0..WIDTH as f64),
            ry: rng.random_range(3.0..6.5),
            rx: rng.random_range(3.0..7.5),
            color: jitter(&mut rng, base, 0.06),
        });
    }

    let mut cars = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let w = rng.random_range(8..=13);
        let h = rng.random_range(4..=6);
        let y1 = rng.random_range(road_top + 4..=HEIGHT);
        let x0 = rng.random_range(0..WIDTH - w);
        let color = CAR_PALETTE[rng.random_range(0..CAR_PALETTE.len())];
        cars.push(Car {
            rect: Rect {
                x0,
                y0: y1.saturating_sub(h).max(road_top),
                x1: x0 + w,
                y1,
            },
            color,
        });
    }

    SceneSpec {
        seed,
        horizon,
        road_top,
        sky_color: jitter(&mut rng, Rgb(0.45, 0.65, 0.95), 0.05),
        road_gray: rng.random_range(0.30..0.42),
        ground_color: jitter(&mut rng, Rgb(0.30, 0.52, 0.22), 0.05),
        buildings,
        vegetation,
        cars,
    }
}

impl SceneSpec {
    fn class_at(&self, y: usize, x: usize) -> u8 {
        if let Some(_car) = self.cars.iter().rev().find(|c| c.rect.contains(y, x)) {
            return CAR;
        }
        if self.vegetation_at(y, x).is_some() && y < self.road_top {
            return VEGETATION;
        }
        if self.buildings.iter().any(|b| b.rect.contains(y, x)) {
            return BUILDING;
        }
        if y < self.horizon {
            SKY
        } else if y < self.road_top {
            VEGETATION
        } else {
            ROAD
        }
    }

    fn vegetation_at(&self, y: usize, x: usize) -> Option<&Blob> {
        self.vegetation.iter().rev().find(|b| {
            let dy = (y as f64 + 0.5 - b.cy) / b.ry;
            let dx = (x as f64 + 0.5 - b.cx) / b.rx;
            dy * dy + dx * dx <= 1.0
        })
    }

    /// Rasterize to a class map; every pixel gets exactly one class.
    pub fn rasterize(&self) -> ClassMap {
        let data = (0..HEIGHT * WIDTH)
            .map(|i| self.class_at(i / WIDTH, i % WIDTH))
            .collect();
        ClassMap::from_vec(HEIGHT, WIDTH, data).expect("fixed shape")
    }

    /// Daytime colours in `[0, 1]`, plus which pixels are building windows.
    fn base_colors(&self, layout: &ClassMap) -> (Vec<Rgb>, Vec<bool>) {
        let mut colors = Vec::with_capacity(HEIGHT * WIDTH);
        let mut windows = vec![false; HEIGHT * WIDTH];
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let c = match layout.get(y, x) {
                    SKY => {
                        let lift = 0.25 * y as f64 / self.horizon.max(1) as f64;
                        self.sky_color.mix(Rgb(0.9, 0.92, 0.95), lift)
                    }
                    ROAD => {
                        let g = self.road_gray;
                        let lane_row = (self.road_top + HEIGHT) / 2;
                        if y == lane_row && (x / 4) % 2 == 0 {
                            Rgb(0.85, 0.85, 0.8)
                        } else {
                            Rgb(g, g, g * 1.03)
                        }
                    }
                    BUILDING => {
                        let b = self
                            .buildings
                            .iter()
                            .rev()
                            .find(|b| b.rect.contains(y, x))
                            .expect("building pixel inside a building");
                        let p = b.window_pitch;
                        let wy = (y - b.rect.y0) % p == 1;
                        let wx = (x - b.rect.x0) % p == 1;
                        if wy && wx {
                            windows[y * WIDTH + x] = true;
                            b.color.scale(0.55)
                        } else {
                            b.color
                        }
                    }
                    CAR => {
                        let car = self
                            .cars
                            .iter()
                            .rev()
                            .find(|c| c.rect.contains(y, x))
                            .expect("car pixel inside a car");
                        if y == car.rect.y0 {
                            Rgb(0.55, 0.65, 0.75)
                        } else if y + 1 == car.rect.y1 && (x == car.rect.x0 + 1 || x + 2 == car.rect.x1) {
                            Rgb(0.05, 0.05, 0.05)
                        } else {
                            car.color
                        }
                    }
                    _ => {
                        let base = self.vegetation_at(y, x).map_or(self.ground_color, |b| b.color);
                        let tex = 0.06 * (((x * 7 + y * 13) % 5) as f64 / 4.0 - 0.5);
                        Rgb(base.0 + tex, base.1 + tex, base.2 + tex)
                    }
                };
                colors.push(c);
            }
        }
        (colors, windows)
    }
}

/// One rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `(3, 32, 64)` in `[-1, 1]`.
    pub image: Tensor3,
    pub layout: ClassMap,
    pub domain: Domain,
    pub seed: u64,
}

fn apply_domain(
    spec: &SceneSpec,
    layout: &ClassMap,
    colors: &mut [Rgb],
    windows: &[bool],
    domain: Domain,
) {
    let mut rng = rng_from_seed(derive_seed(spec.seed, RENDER_SALT + domain.id() as u64));
    match domain {
        Domain::Day => {}
        Domain::Night => {
            for (i, c) in colors.iter_mut().enumerate() {
                let lit = windows[i] && rng.random::<f64>() < 0.35;
                *c = if lit {
                    Rgb(0.75, 0.62, 0.25)
                } else {
                    let d = c.scale(0.2);
                    Rgb(d.0, d.1 + 0.015, d.2 + 0.07)
                };
                let n = 0.03 * standard_normal(&mut rng);
                *c = Rgb(c.0 + n, c.1 + n, c.2 + n);
            }
        }
        Domain::Snow => {
            for (i, c) in colors.iter_mut().enumerate() {
                let class = layout.data()[i];
                let white = Rgb(0.93, 0.94, 0.97);
                *c = match class {
                    ROAD | VEGETATION => {
                        let w = if rng.random::<f64>() < 0.8 { 0.85 } else { 0.45 };
                        c.mix(white, w)
                    }
                    SKY => Rgb(0.78, 0.80, 0.84),
                    _ => c.mix(white, 0.25),
                };
                if rng.random::<f64>() < 0.03 {
                    *c = Rgb(1.0, 1.0, 1.0);
                }
            }
        }
        Domain::Rain => {
            for c in colors.iter_mut() {
                let k = 0.5;
                *c = Rgb(
                    k * (c.0 - 0.5) + 0.36,
                    k * (c.1 - 0.5) + 0.38,
                    k * (c.2 - 0.5) + 0.42,
                );
            }
            for _ in 0..28 {
                let x0 = rng.random_range(0..WIDTH as i64 + 8);
                let y0 = rng.random_range(0..HEIGHT as i64);
                for s in 0..6 {
                    let (y, x) = (y0 + s, x0 - s / 2);
                    if (0..HEIGHT as i64).contains(&y) && (0..WIDTH as i64).contains(&x) {
                        let c = &mut colors[y as usize * WIDTH + x as usize];
                        *c = Rgb(c.0 + 0.22, c.1 + 0.22, c.2 + 0.25);
                    }
                }
            }
        }
        Domain::Fog => {
            let gray = Rgb(0.78, 0.79, 0.80);
            for y in 0..HEIGHT {
                let depth = if y < spec.horizon {
                    1.0
                } else {
                    1.0 - (y - spec.horizon) as f64 / (HEIGHT - spec.horizon) as f64
                };
                let w = 1.0 - (-3.0 * (0.2 + depth)).exp();
                for x in 0..WIDTH {
                    let c = &mut colors[y * WIDTH + x];
                    *c = c.mix(gray, w);
                }
            }
        }
        Domain::Game => {
            for (i, c) in colors.iter_mut().enumerate() {
                let lum = (c.0 + c.1 + c.2) / 3.0;
                let sat = |v: f64| (lum + 1.6 * (v - lum)).clamp(0.0, 1.0);
                let q = |v: f64| (v * 3.0).round() / 3.0;
                *c = Rgb(q(sat(c.0)), q(sat(c.1)), q(sat(c.2)));
                let (y, x) = (i / WIDTH, i % WIDTH);
                let here = layout.get(y, x);
                let edge = (x + 1 < WIDTH && layout.get(y, x + 1) != here)
                    || (y + 1 < HEIGHT && layout.get(y + 1, x) != here);
                if edge {
                    *c = Rgb(0.05, 0.05, 0.08);
                }
            }
        }
    }
}

pub fn render(spec: &SceneSpec, domain: Domain) -> SceneSample {
    let layout = spec.rasterize();
    let (mut colors, windows) = spec.base_colors(&layout);
    apply_domain(spec, &layout, &mut colors, &windows, domain);
    let plane = HEIGHT * WIDTH;
    let mut data = vec![0.0; 3 * plane];
    for (i, c) in colors.iter().enumerate() {
        data[i] = (2.0 * c.0 - 1.0).clamp(-1.0, 1.0);
        data[plane + i] = (2.0 * c.1 - 1.0).clamp(-1.0, 1.0);
        data[2 * plane + i] = (2.0 * c.2 - 1.0).clamp(-1.0, 1.0);
    }
    SceneSample {
        image: Tensor3::from_vec(3, HEIGHT, WIDTH, data).expect("fixed shape"),
        layout,
        domain,
        seed: spec.seed,
    }
}

/// Render by domain id, rejecting unknown ids.
pub fn render_id(spec: &SceneSpec, domain_id: usize) -> Result<SceneSample> {
    Ok(render(spec, Domain::from_id(domain_id)?))
}

pub fn render_seed(seed: u64, domain: Domain) -> SceneSample {
    render(&generate_spec(seed), domain)
}

/// Half-open seed interval `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub len: u64,
}

impl SeedRange {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub source: Domain,
    pub targets: Vec<Domain>,
    pub pretrain: SeedRange,
    pub adapt: SeedRange,
    /// Per-target evaluation ranges, in the order of `targets`.
    pub eval: Vec<SeedRange>,
}

impl SplitConfig {
    /// Back-to-back ranges starting at `base_seed`.
    pub fn contiguous(base_seed: u64, pretrain: u64, adapt: u64, eval_per_domain: u64) -> Self {
        let targets = Domain::TARGETS.to_vec();
        let pretrain_r = SeedRange {
            start: base_seed,
            len: pretrain,
        };
        let adapt_r = SeedRange {
            start: pretrain_r.end(),
            len: adapt,
        };
        let eval = (0..targets.len() as u64)
            .map(|i| SeedRange {
                start: adapt_r.end() + i * eval_per_domain,
                len: eval_per_domain,
            })
            .collect();
        Self {
            source: Domain::SOURCE,
            targets,
            pretrain: pretrain_r,
            adapt: adapt_r,
            eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.len() != self.targets.len() {
            return Err(invalid!(
                "{} eval ranges for {} target domains",
                self.eval.len(),
                self.targets.len()
            ));
        }
        if self.targets.contains(&self.source) {
            return Err(invalid!("source domain {} listed as a target", self.source));
        }
        let mut ranges = vec![("pretrain".to_owned(), self.pretrain), ("adapt".to_owned(), self.adapt)];
        for (d, r) in self.targets.iter().zip(&self.eval) {
            ranges.push((format!("eval/{d}"), *r));
        }
        for (name, r) in &ranges {
            if r.len == 0 {
                return Err(invalid!("split {name} is empty"));
            }
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                if ranges[i].1.overlaps(&ranges[j].1) {
                    return Err(invalid!(
                        "seed ranges {} {:?} and {} {:?} overlap",
                        ranges[i].0,
                        ranges[i].1,
                        ranges[j].0,
                        ranges[j].1
                    ));
                }
            }
        }
        Ok(())
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::contiguous(0, 512, 256, 128)
    }
}

/// The three disjoint data pools of the zero-shot protocol.
#[derive(Clone, Debug)]
pub struct Splits {
    pub config: SplitConfig,
    /// All domains, round-robin; stands in for web-scale pretraining data.
    pub pretrain_corpus: Vec<SceneSample>,
    /// Source-domain renders only.
    pub adapt_source: Vec<SceneSample>,
    pub eval_target: BTreeMap<Domain, Vec<SceneSample>>,
}

pub fn make_splits(config: &SplitConfig) -> Result<Splits> {
    config.validate()?;
    let pretrain_corpus = config
        .pretrain
        .seeds()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| render_seed(seed, Domain::ALL[i % Domain::COUNT]))
        .collect();
    let adapt_source = render_range(config.adapt, config.source);
    let eval_target = config
        .targets
        .iter()
        .zip(&config.eval)
        .map(|(&d, &r)| (d, render_range(r, d)))
        .collect();
    Ok(Splits {
        config: config.clone(),
        pretrain_corpus,
        adapt_source,
        eval_target,
    })
}

pub fn render_range(range: SeedRange, domain: Domain) -> Vec<SceneSample> {
    range
        .seeds()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|s| render_seed(s, domain))
        .collect()
}

/// Per-domain counters of source images handed to a pipeline stage.
#[derive(Debug, Default)]
pub struct ReadAudit {
    counts: [AtomicU64; Domain::COUNT],
}

impl ReadAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, domain: Domain) {
        self.counts[domain.id()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, domain: Domain) -> u64 {
        self.counts[domain.id()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        Domain::ALL.iter().map(|&d| self.count(d)).sum()
    }

    /// Reads of any domain not in `allowed`.
    pub fn reads_outside(&self, allowed: &[Domain]) -> u64 {
        Domain::ALL
            .iter()
            .filter(|d| !allowed.contains(d))
            .map(|&d| self.count(d))
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<Domain, u64> {
        Domain::ALL.iter().map(|&d| (d, self.count(d))).collect()
    }
}

/// Test fixture that knows the true noise.
#[derive(Clone, Debug)]
pub enum OracleDenoiser {
    /// Answers `(z − α_t z0) / σ_t` for one known clean sample.
    Exact { schedule: NoiseSchedule, z0: Tensor3 },
    /// Returns the injected `ε` of whichever registered `(z0, ε)` pair
    /// produced the query at `t`; anything else is a fixture error.
    Registry {
        schedule: NoiseSchedule,
        entries: Vec<(Tensor3, Tensor3)>,
        tolerance: f64,
    },
    /// Posterior mean `E[ε | z_t]` when `z0 ~ N(mean, var · I)`.
    GaussianPosterior {
        schedule: NoiseSchedule,
        mean: f64,
        var: f64,
    },
}

impl OracleDenoiser {
    pub fn exact(schedule: NoiseSchedule, z0: Tensor3) -> Self {
        Self::Exact { schedule, z0 }
    }

    pub fn registry(schedule: NoiseSchedule) -> Self {
        Self::Registry {
            schedule,
            entries: Vec::new(),
            tolerance: 1e-8,
        }
    }

    pub fn register(&mut self, z0: Tensor3, eps: Tensor3) -> Result<()> {
        match self {
            Self::Registry { entries, .. } => {
                z0.ensure_same_shape(&eps, "oracle registration")?;
                entries.push((z0, eps));
                Ok(())
            }
            _ => Err(Error::Fixture("only registry oracles accept registrations".into())),
        }
    }

    pub fn gaussian(schedule: NoiseSchedule, mean: f64, var: f64) -> Self {
        Self::GaussianPosterior {
            schedule,
            mean,
            var,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        match self {
            Self::Exact { schedule, .. }
            | Self::Registry { schedule, .. }
            | Self::GaussianPosterior { schedule, .. } => schedule,
        }
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict_noise(&self, z: &Tensor3, t: usize, _cond: &Conditioning) -> Result<Tensor3> {
        let sched = self.schedule();
        if t == 0 || t > sched.steps() {
            return Err(Error::Fixture(format!("oracle queried at t = {t}")));
        }
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        match self {
            Self::Exact { z0, .. } => {
                if z0.shape() != z.shape() {
                    return Err(Error::Fixture("query shape differs from registered z0".into()));
                }
                Tensor3::lincomb(1.0 / s, z, -a / s, z0)
            }
            Self::Registry {
                entries, tolerance, ..
            } => entries
                .iter()
                .find(|(z0, eps)| {
                    z0.shape() == z.shape()
                        && z
                            .data()
                            .iter()
                            .zip(z0.data().iter().zip(eps.data()))
                            .all(|(&q, (&x, &e))| (q - (a * x + s * e)).abs() <= *tolerance)
                })
                .map(|(_, eps)| eps.clone())
                .ok_or_else(|| Error::Fixture(format!("unregistered oracle query at t = {t}"))),
            Self::GaussianPosterior { mean, var, .. } => {
                let denom = a * a * var + s * s;
                Ok(z.map(|v| s * (v - a * mean) / denom))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, forward_noising, ScheduleKind};
    use crate::rng::gaussian_tensor;

    #[test]
    fn specs_are_deterministic() {
        assert_eq!(generate_spec(17), generate_spec(17));
        assert_ne!(generate_spec(17), generate_spec(18));
    }

    #[test]
    fn layout_is_domain_invariant() {
        let spec = generate_spec(3);
        let day = render(&spec, Domain::Day);
        for d in Domain::ALL {
            assert_eq!(render(&spec, d).layout, day.layout);
        }
    }

    #[test]
    fn renders_are_deterministic_and_in_range() {
        let spec = generate_spec(9);
        for d in Domain::ALL {
            let a = render(&spec, d);
            assert_eq!(a, render(&spec, d));
            assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn night_is_darker() {
        for seed in 0..50 {
            let spec = generate_spec(seed);
            assert!(render(&spec, Domain::Night).image.mean() < render(&spec, Domain::Day).image.mean());
        }
    }

    #[test]
    fn unknown_domain_id_rejected() {
        assert!(render_id(&generate_spec(0), 6).is_err());
        assert!("dusk".parse::<Domain>().is_err());
        assert_eq!("fog".parse::<Domain>().unwrap(), Domain::Fog);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut c = SplitConfig::contiguous(0, 10, 10, 5);
        c.adapt.start = 5;
        assert!(make_splits(&c).is_err());
        let mut c = SplitConfig::contiguous(0, 10, 10, 5);
        c.eval[2] = c.eval[1];
        assert!(make_splits(&c).is_err());
    }

    #[test]
    fn small_splits_respect_contract() {
        let s = make_splits(&SplitConfig::contiguous(100, 12, 8, 3)).unwrap();
        assert_eq!(s.pretrain_corpus.len(), 12);
        assert!(s.adapt_source.iter().all(|x| x.domain == Domain::Day));
        for (d, v) in &s.eval_target {
            assert_eq!(v.len(), 3);
            assert!(v.iter().all(|x| x.domain == *d));
        }
        let domains: std::collections::BTreeSet<_> = s.pretrain_corpus.iter().map(|x| x.domain).collect();
        assert_eq!(domains.len(), Domain::COUNT);
    }

    #[test]
    fn registry_oracle_returns_injected_noise() {
        let sched = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = rng_from_seed(1);
        let z0 = gaussian_tensor(&mut rng, 3, 4, 4).clamp(-1.0, 1.0);
        let eps = gaussian_tensor(&mut rng, 3, 4, 4);
        let mut oracle = OracleDenoiser::registry(sched.clone());
        oracle.register(z0.clone(), eps.clone()).unwrap();
        let cond = Conditioning::new(0, ClassMap::filled(4, 4, 0), true);
        let zt = forward_noising(&z0, 6, &eps, &sched).unwrap();
        assert_eq!(oracle.predict_noise(&zt, 6, &cond).unwrap(), eps);
        let other = gaussian_tensor(&mut rng, 3, 4, 4);
        assert!(matches!(
            oracle.predict_noise(&other, 6, &cond),
            Err(Error::Fixture(_))
        ));
    }

    #[test]
    fn audit_counts_reads() {
        let a = ReadAudit::new();
        a.record(Domain::Day);
        a.record(Domain::Day);
        a.record(Domain::Fog);
        assert_eq!(a.count(Domain::Day), 2);
        assert_eq!(a.reads_outside(&[Domain::Day]), 1);
        assert_eq!(a.total(), 3);
    }
}
