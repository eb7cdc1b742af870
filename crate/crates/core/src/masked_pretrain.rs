//! Masked pre-training: random patch masks, masked-region ℓ1 reconstruction, stage driver.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Bound, Graph, Tensor, Var};
use crate::data::Image;
use crate::error::{MesaError, Result};
use crate::networks::model::{ENCODER, MASK_TOKEN, MP_HEAD};
use crate::networks::{Checkpoint, Model, Stage};
use crate::train::{batch_indices, ensure_finite, LossCurve, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { patch_size: 8, mask_ratio: 0.6, seed: 0 }
    }
}

impl MaskSpec {
    /// Number of masked patches for an `h × w` image; at least one patch stays visible.
    pub fn masked_patches(&self, h: usize, w: usize) -> Result<usize> {
        let p = self.patch_size;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(MesaError::InvalidInput(format!("patch size {p} does not divide {h}x{w}")));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(MesaError::InvalidInput(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        let total = (h / p) * (w / p);
        let k = (self.mask_ratio * total as f64).round() as usize;
        if k == 0 || k >= total {
            return Err(MesaError::InvalidInput(format!(
                "ratio {} masks {k} of {total} patches; need at least one masked and one visible",
                self.mask_ratio
            )));
        }
        Ok(k)
    }
}

/// Boolean per-pixel mask, row-major, `true` = masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

pub fn sample_mask(h: usize, w: usize, spec: &MaskSpec) -> Result<Mask> {
    let k = spec.masked_patches(h, w)?;
    let p = spec.patch_size;
    let (ph, pw) = (h / p, w / p);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = rand::seq::index::sample(&mut rng, ph * pw, k);
    let mut patches = vec![false; ph * pw];
    for i in chosen {
        patches[i] = true;
    }
    let bits = (0..h * w).map(|i| patches[(i / w / p) * pw + (i % w) / p]).collect();
    Ok(Mask { height: h, width: w, bits })
}

/// Replaces masked pixels by `token` (one value per channel).
pub fn apply_mask(image: &Image, mask: &Mask, token: [f64; 3]) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if (mask.height, mask.width) != (h, w) {
        return Err(MesaError::Shape(format!("mask {}x{} vs image {h}x{w}", mask.height, mask.width)));
    }
    let mut out = image.clone();
    for (i, &m) in mask.bits.iter().enumerate() {
        if m {
            for (c, &t) in token.iter().enumerate() {
                out.set(c, i / w, i % w, t);
            }
        }
    }
    Ok(out)
}

/// Original, masked input, and mask for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub original: Image,
    pub masked_input: Image,
    pub mask: Mask,
}

impl MaskedBatch {
    pub fn new(original: Image, mask: Mask, token: [f64; 3]) -> Result<Self> {
        let masked_input = apply_mask(&original, &mask, token)?;
        Ok(Self { original, masked_input, mask })
    }
}

/// Masked-element indicator of an `[N, 3, H, W]` batch, and `|M|`.
fn mask_weights(masks: &[&Mask]) -> Result<(Tensor, usize)> {
    let total: usize = masks.iter().map(|m| m.count()).sum();
    if total == 0 {
        return Err(MesaError::NoMaskedPixels);
    }
    let (h, w) = (masks[0].height, masks[0].width);
    let mut data = Vec::with_capacity(masks.len() * 3 * h * w);
    for m in masks {
        for _ in 0..3 {
            data.extend(m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    Ok((Tensor::new(&[masks.len(), 3, h, w], data), total))
}

/// `(1/|M|) Σ_{p∈M} mean_c |pred − target|` on `[N, 3, H, W]` graph values.
pub fn masked_l1_var<'g>(pred: Var<'g>, target: Var<'g>, masks: &[&Mask]) -> Result<Var<'g>> {
    let (weights, count) = mask_weights(masks)?;
    if weights.shape() != pred.shape().as_slice() || pred.shape() != target.shape() {
        return Err(MesaError::Shape(format!("pred {:?}, target {:?}, masks {:?}", pred.shape(), target.shape(), weights.shape())));
    }
    let wv = pred.graph().constant(weights);
    let denom = 3.0 * count as f64;
    Ok(pred.sub(target).abs().mul(wv).sum().map(move |v| v / denom, move |_, _| 1.0 / denom))
}

pub fn masked_l1_loss(pred: &Image, target: &Image, mask: &Mask) -> Result<f64> {
    if !pred.same_size(target) {
        return Err(MesaError::Shape("pred and target differ in size".into()));
    }
    let g = Graph::new();
    let p = g.constant(pred.to_tensor().reshaped(&[1, 3, pred.height(), pred.width()]));
    let t = g.constant(target.to_tensor().reshaped(&[1, 3, pred.height(), pred.width()]));
    Ok(masked_l1_var(p, t, &[mask])?.item())
}

/// `x̂ = x ⊙ (1 − M) + token ⊙ M` with a learnable token.
pub fn masked_input_var<'g>(x: Var<'g>, token: Var<'g>, masks: &[&Mask]) -> Var<'g> {
    let shape = x.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut m = Vec::with_capacity(n * 3 * h * w);
    for mask in masks {
        for _ in 0..3 {
            m.extend(mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    let g = x.graph();
    let keep = g.constant(Tensor::new(&shape, m.iter().map(|v| 1.0 - v).collect()));
    let fill = g.constant(Tensor::new(&shape, m));
    let index: Vec<usize> = (0..n * 3 * h * w).map(|i| (i / (h * w)) % 3).collect();
    let tok = token.reshape(&[3]).gather(Rc::new(index), &shape);
    x.mul(keep).add(tok.mul(fill))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpConfig {
    pub mask: MaskSpec,
    pub schedule: Schedule,
    pub seed: u64,
    /// Evaluate the held-out loss every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for MpConfig {
    fn default() -> Self {
        Self { mask: MaskSpec::default(), schedule: Schedule { steps: 200, lr: 1e-3, batch_size: 2 }, seed: 0, eval_every: 0 }
    }
}

pub struct MpOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub curve: LossCurve,
    /// Held-out masked loss before and after training.
    pub heldout_start: f64,
    pub heldout_end: f64,
}

fn mp_trainable(name: &str) -> bool {
    name.starts_with(ENCODER) || name.starts_with(MP_HEAD) || name == MASK_TOKEN
}

fn step_mask(cfg: &MpConfig, step: usize, slot: usize, h: usize, w: usize) -> Result<Mask> {
    let seed = cfg.mask.seed ^ cfg.seed.rotate_left(17) ^ ((step as u64) << 20) ^ slot as u64;
    sample_mask(h, w, &MaskSpec { seed, ..cfg.mask })
}

/// Masked-reconstruction loss on a batch, optionally as a graph for training.
fn batch_loss<'g>(model: &Model, b: &Bound<'g>, images: &[&Image], masks: &[&Mask]) -> Result<Var<'g>> {
    let x = b.get(MASK_TOKEN).graph().constant(Model::batch_tensor(images)?);
    let xh = masked_input_var(x, b.get(MASK_TOKEN), masks);
    let feats = model.encoder_forward(b, xh, false)?;
    let pred = model.mp_head_forward(b, &feats);
    masked_l1_var(pred, x, masks)
}

/// Held-out masked loss with fixed per-image masks.
pub fn heldout_loss(model: &Model, images: &[Image], cfg: &MpConfig) -> Result<f64> {
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let mask = sample_mask(img.height(), img.width(), &MaskSpec { seed: cfg.mask.seed ^ 0xbeef ^ i as u64, ..cfg.mask })?;
        let g = Graph::new();
        let b = model.bind(&g, |_| false);
        total += batch_loss(model, &b, &[img], &[&mask])?.item();
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains encoder + linear head on masked reconstruction; returns an `mp` checkpoint.
pub fn run_mp_stage(cfg: &MpConfig, mut model: Model, train: &[Image], heldout: &[Image]) -> Result<MpOutcome> {
    cfg.schedule.validate("mp")?;
    if train.is_empty() {
        return Err(MesaError::InvalidInput("mp stage needs at least one training image".into()));
    }
    let (h, w) = (train[0].height(), train[0].width());
    cfg.mask.masked_patches(h, w)?;
    let eval_set = if heldout.is_empty() { &train[..1] } else { heldout };
    let heldout_start = heldout_loss(&model, eval_set, cfg)?;
    let mut curve = LossCurve::new(&["loss"]);
    let mut adam = Adam::new();
    for step in 0..cfg.schedule.steps {
        let idx = batch_indices(train.len(), cfg.schedule.batch_size, step, cfg.seed);
        let imgs: Vec<&Image> = idx.iter().map(|&i| &train[i]).collect();
        let masks = (0..imgs.len()).map(|s| step_mask(cfg, step, s, h, w)).collect::<Result<Vec<_>>>()?;
        let mrefs: Vec<&Mask> = masks.iter().collect();
        let g = Graph::new();
        let b = model.bind(&g, mp_trainable);
        let loss = batch_loss(&model, &b, &imgs, &mrefs)?;
        let lv = loss.item();
        ensure_finite("mp", step, &[("loss", lv)])?;
        curve.push(step, vec![lv]);
        let grads = g.backward(loss);
        adam.step(&mut model.params, &b, &grads, cfg.schedule.lr);
    }
    model.params.round_to_f32();
    let heldout_end = heldout_loss(&model, eval_set, cfg)?;
    let checkpoint = Checkpoint::from_model(&model, Stage::Mp, vec![], cfg.seed);
    log::info!("mp: held-out masked loss {heldout_start:.4} -> {heldout_end:.4}");
    Ok(MpOutcome { checkpoint, model, curve, heldout_start, heldout_end })
}
