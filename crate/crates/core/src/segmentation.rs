//! The task model: strided convolutional feature extractor `F`, a light
//! decoder `H` with bilinear upsampling, and the mIoU metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::nn::{
    global_average_pool, global_average_pool_backward, relu, relu_backward, upsample_bilinear,
    upsample_bilinear_backward, Conv2d, ConvTape, ParamAllocator,
};
use crate::rng::rng_from_seed;
use crate::scene::SceneSample;
use crate::tensor::Tensor3;

pub const SEGMENTER_KIND: &str = "segmenter";

/// Integer class map of shape `(h, w)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid!(
                "class map has {} entries, shape ({height}, {width}) needs {}",
                data.len(),
                height * width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(invalid!("ragged class map rows"));
        }
        Self::from_vec(h, w, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c as usize >= num_classes) {
            Some(c) => Err(invalid!("class index {c} out of range for {num_classes} classes")),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> ClassMap {
        let w = self.width;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            data.extend(row.iter().rev());
        }
        ClassMap {
            height: self.height,
            width: w,
            data,
        }
    }

    /// One-hot encoding as `(num_classes, h, w)`.
    pub fn one_hot(&self, num_classes: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(num_classes, self.height, self.width);
        let n = self.height * self.width;
        for (i, &c) in self.data.iter().enumerate() {
            t.data_mut()[c as usize * n + i] = 1.0;
        }
        t
    }

    /// Per-class pixel counts.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each encoder stage; the last one is the feature
    /// dimension `D`.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Width of the optional 3×3 decoder layer before the classifier.
    pub decoder_hidden: Option<usize>,
    pub num_classes: usize,
    pub bias: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 64,
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            kernel: 3,
            decoder_hidden: Some(32),
            num_classes: 5,
            bias: true,
        }
    }
}

impl SegConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(invalid!(
                "encoder needs one stride per stage ({} widths, {} strides)",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.iter().chain(&self.strides).any(|&v| v == 0) || self.kernel == 0 {
            return Err(invalid!("zero width, stride or kernel in segmenter config"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid!("kernel must be odd, got {}", self.kernel));
        }
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize {
            return Err(invalid!("num_classes must be in 2..=255"));
        }
        let down: usize = self.strides.iter().product();
        if !self.height.is_multiple_of(down) || !self.width.is_multiple_of(down) {
            return Err(invalid!(
                "image ({}, {}) not divisible by total stride {down}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    fn grid_size(&self) -> (usize, usize) {
        let down: usize = self.strides.iter().product();
        (self.height / down, self.width / down)
    }
}

#[derive(Clone, Debug)]
struct SegArch {
    encoder: Vec<Conv2d>,
    hidden: Option<Conv2d>,
    head: Conv2d,
    num_params: usize,
}

impl SegArch {
    fn build(cfg: &SegConfig) -> Self {
        let mut alloc = ParamAllocator::new();
        let mut encoder = Vec::with_capacity(cfg.widths.len());
        let mut prev = cfg.in_channels;
        for (&w, &s) in cfg.widths.iter().zip(&cfg.strides) {
            encoder.push(Conv2d::new(&mut alloc, prev, w, cfg.kernel, s, cfg.bias));
            prev = w;
        }
        let hidden = cfg.decoder_hidden.map(|h| {
            let c = Conv2d::new(&mut alloc, prev, h, 3, 1, cfg.bias);
            prev = h;
            c
        });
        let head = Conv2d::new(&mut alloc, prev, cfg.num_classes, 1, 1, cfg.bias);
        Self {
            encoder,
            hidden,
            head,
            num_params: alloc.len(),
        }
    }
}

/// Feature extractor plus decoder over one flat parameter vector.
#[derive(Clone, Debug)]
pub struct SegModel {
    config: SegConfig,
    params: Vec<f64>,
    seed: u64,
    arch: SegArch,
}

/// Intermediate values kept for [`SegModel::backward`].
pub struct SegTape {
    encoder: Vec<(ConvTape, Tensor3)>,
    hidden: Option<(ConvTape, Tensor3)>,
    head: ConvTape,
    grid: (usize, usize),
    features: Tensor3,
}

/// Output of a training forward pass.
pub struct SegForward {
    pub logits: Tensor3,
    pub pooled: Vec<f64>,
    pub tape: SegTape,
}

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = SegArch::build(&config);
        let mut params = vec![0.0; arch.num_params];
        let mut rng = rng_from_seed(seed);
        for conv in &arch.encoder {
            conv.init(&mut params, &mut rng, 1.0);
        }
        if let Some(h) = &arch.hidden {
            h.init(&mut params, &mut rng, 1.0);
        }
        arch.head.init(&mut params, &mut rng, 0.5);
        Ok(Self {
            config,
            params,
            seed,
            arch,
        })
    }

    pub fn from_params(config: SegConfig, seed: u64, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        if params.len() != m.params.len() {
            return Err(invalid!(
                "segmenter expects {} parameters, got {}",
                m.params.len(),
                params.len()
            ));
        }
        m.params = params;
        Ok(m)
    }

    pub fn to_checkpoint(&self, trained_steps: u64) -> Checkpoint<SegConfig> {
        Checkpoint::new(SEGMENTER_KIND, self.config.clone(), self.seed, trained_steps, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<SegConfig>) -> Result<Self> {
        Self::from_params(ckpt.config.clone(), ckpt.seed, ckpt.decode_params()?)
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Parameter index range of the decoder `H`.
    pub fn decoder_param_range(&self) -> std::ops::Range<usize> {
        let start = self
            .arch
            .hidden
            .as_ref()
            .map_or(self.arch.head.weight.start, |h| h.weight.start);
        start..self.params.len()
    }

    fn check_image(&self, image: &Tensor3) -> Result<()> {
        let want = (self.config.in_channels, self.config.height, self.config.width);
        if image.shape() != want {
            return Err(invalid!(
                "segmenter expects image shape {want:?}, got {:?}",
                image.shape()
            ));
        }
        Ok(())
    }

    fn encode(&self, image: &Tensor3) -> (Tensor3, Vec<(ConvTape, Tensor3)>) {
        let mut x = image.clone();
        let mut tapes = Vec::with_capacity(self.arch.encoder.len());
        for conv in &self.arch.encoder {
            let (pre, tape) = conv.forward(&self.params, &x);
            x = relu(&pre);
            tapes.push((tape, x.clone()));
        }
        (x, tapes)
    }

    /// Spatial feature grid `F(I)` of shape `(D, h / s, w / s)`.
    pub fn feature_grid(&self, image: &Tensor3) -> Result<Tensor3> {
        self.check_image(image)?;
        Ok(self.encode(image).0)
    }

    /// Global-average-pooled encoder output, length `D`.
    pub fn extract_features(&self, image: &Tensor3) -> Result<Vec<f64>> {
        Ok(global_average_pool(&self.feature_grid(image)?))
    }

    fn decode(&self, features: &Tensor3) -> (Tensor3, Option<(ConvTape, Tensor3)>, ConvTape) {
        let (h_in, hidden) = match &self.arch.hidden {
            Some(conv) => {
                let (pre, tape) = conv.forward(&self.params, features);
                let out = relu(&pre);
                (out.clone(), Some((tape, out)))
            }
            None => (features.clone(), None),
        };
        let (coarse, head) = self.arch.head.forward(&self.params, &h_in);
        let logits = upsample_bilinear(&coarse, self.config.height, self.config.width);
        (logits, hidden, head)
    }

    /// Per-pixel class logits `H(F(I))`, shape `(num_classes, h, w)`.
    pub fn logits(&self, image: &Tensor3) -> Result<Tensor3> {
        let features = self.feature_grid(image)?;
        Ok(self.decode(&features).0)
    }

    pub fn predict_map(&self, image: &Tensor3) -> Result<ClassMap> {
        Ok(argmax_map(&self.logits(image)?))
    }

    pub fn forward_train(&self, image: &Tensor3) -> Result<SegForward> {
        self.check_image(image)?;
        let (features, encoder) = self.encode(image);
        let pooled = global_average_pool(&features);
        let (logits, hidden, head) = self.decode(&features);
        Ok(SegForward {
            logits,
            pooled,
            tape: SegTape {
                encoder,
                hidden,
                head,
                grid: self.config.grid_size(),
                features,
            },
        })
    }

    /// Backpropagate gradients w.r.t. logits and/or pooled features.
    pub fn backward(
        &self,
        tape: &SegTape,
        grad_logits: Option<&Tensor3>,
        grad_pooled: Option<&[f64]>,
        grads: &mut [f64],
    ) {
        let (gh, gw) = tape.grid;
        let d = self.feature_dim();
        let mut g_feat = Tensor3::zeros(d, gh, gw);
        if let Some(gl) = grad_logits {
            let g_coarse = upsample_bilinear_backward(gl, gh, gw);
            let mut g = self.arch.head.backward(&self.params, &tape.head, &g_coarse, grads);
            if let (Some(conv), Some((ctape, out))) = (&self.arch.hidden, &tape.hidden) {
                let g_pre = relu_backward(out, &g);
                g = conv.backward(&self.params, ctape, &g_pre, grads);
            }
            g_feat.add_assign(&g);
        }
        if let Some(gp) = grad_pooled {
            g_feat.add_assign(&global_average_pool_backward(gp, gh, gw));
        }
        debug_assert_eq!(g_feat.shape(), tape.features.shape());
        let mut g = g_feat;
        for (conv, (ctape, out)) in self.arch.encoder.iter().zip(&tape.encoder).rev() {
            let g_pre = relu_backward(out, &g);
            g = conv.backward(&self.params, ctape, &g_pre, grads);
        }
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_map(logits: &Tensor3) -> ClassMap {
    let (c, h, w) = logits.shape();
    let n = h * w;
    let d = logits.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = d[i];
            for k in 1..c {
                let v = d[k * n + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    ClassMap {
        height: h,
        width: w,
        data,
    }
}

/// Global confusion matrix, `counts[gt][pred]`. Accumulation is associative,
/// so shards can be merged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(invalid!(
                "prediction shape {:?} does not match ground truth {:?}",
                pred.shape(),
                gt.shape()
            ));
        }
        pred.check_classes(self.num_classes)?;
        gt.check_classes(self.num_classes)?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// IoU per class, `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn miou(preds: &[ClassMap], gts: &[ClassMap], num_classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(invalid!("mIoU of an empty list"));
    }
    if preds.len() != gts.len() {
        return Err(invalid!(
            "{} predictions but {} ground-truth maps",
            preds.len(),
            gts.len()
        ));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(cm.mean_iou())
}

/// Dataset mIoU of `model` on labelled samples; predictions run in parallel.
pub fn evaluate_miou(model: &SegModel, samples: &[SceneSample]) -> Result<f64> {
    let preds = samples
        .par_iter()
        .map(|s| model.predict_map(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<ClassMap> = samples.iter().map(|s| s.layout.clone()).collect();
    miou(&preds, &gts, model.num_classes())
}
