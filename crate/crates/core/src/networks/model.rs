use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{EncoderSpec, ModelConfig, PROBE_IDS};
use crate::autodiff::ops::{global_avg_pool, layer_norm_channels, pixel_shuffle, upsample_nearest2x};
use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::data::{DepthMap, Image, Pose6D};
use crate::error::{MesaError, Result};

const NORM_EPS: f64 = 1e-5;
const ACT_SLOPE: f64 = 0.05;
const PIXEL_MEAN: f64 = 0.45;
const PIXEL_STD: f64 = 0.225;
/// Initial decoder bias; `1 / (10 σ(-3) + 0.01) ≈ 2 m`.
const DEPTH_BIAS_INIT: f64 = -3.0;

pub const ENCODER: &str = "encoder.";
pub const DEPTH_DECODER: &str = "depth_decoder.";
pub const MP_HEAD: &str = "mp_head.";
pub const POSE: &str = "pose.";
pub const MASK_TOKEN: &str = "mask_token";

/// Encoder outputs: multi-scale skips (strides 2, 4, 8) and the deepest map (stride 16).
pub struct EncoderOutput<'g> {
    pub skips: [Var<'g>; 3],
    pub deepest: Var<'g>,
    /// Captured probe-point activations, keyed by model-layer name.
    pub probes: Option<BTreeMap<String, Var<'g>>>,
}

/// Activations at the nine probe layers, keyed `layer0`..`layer8`; each `[N, C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeActivations {
    pub layers: BTreeMap<String, Tensor>,
}

/// Parameters plus architecture for the encoder, depth decoder, masked-reconstruction head and pose net.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv(&mut self, p: &mut ParamStore, name: &str, co: usize, ci: usize, k: usize, gain: f64) {
        let fan_in = (ci * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let w = (0..co * ci * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        p.insert(format!("{name}.weight"), Tensor::new(&[co, ci, k, k], w));
        p.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
    }

    fn norm(&mut self, p: &mut ParamStore, name: &str, c: usize) {
        p.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        p.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }
}

fn blocks_in_stage(spec: &EncoderSpec, stage: usize) -> usize {
    if stage == 2 {
        spec.stage2_blocks
    } else {
        1
    }
}

fn decoder_mid(c0: usize) -> usize {
    (c0 / 2).max(8)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        params.extend(Self::init_encoder(&config, seed));
        params.extend(Self::init_depth_decoder(&config, seed));
        params.extend(Self::init_mp_head(&config, seed));
        params.extend(Self::init_pose(&config, seed));
        Self { config, params }
    }

    pub fn init_encoder(config: &ModelConfig, seed: u64) -> ParamStore {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0e4c) };
        let mut p = ParamStore::new();
        let spec = &config.encoder;
        let c = spec.channels;
        init.conv(&mut p, "encoder.stem.conv", c[0], 3, 3, 1.0);
        init.norm(&mut p, "encoder.stem.norm", c[0]);
        for s in 0..4 {
            for b in 0..blocks_in_stage(spec, s) {
                let pre = format!("encoder.stages.{s}.blocks.{b}");
                init.norm(&mut p, &format!("{pre}.norm1"), c[s]);
                init.conv(&mut p, &format!("{pre}.conv1"), c[s], c[s], 3, 1.0);
                init.conv(&mut p, &format!("{pre}.conv2"), c[s], c[s], 1, 0.5);
            }
            if s < 3 {
                init.conv(&mut p, &format!("encoder.stages.{s}.downsample.conv"), c[s + 1], c[s], 3, 1.0);
                init.norm(&mut p, &format!("encoder.stages.{s}.downsample.norm"), c[s + 1]);
            }
        }
        init.norm(&mut p, "encoder.norm3", c[3]);
        p
    }

    pub fn init_depth_decoder(config: &ModelConfig, seed: u64) -> ParamStore {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed ^ 0xdec0) };
        let mut p = ParamStore::new();
        let c = config.encoder.channels;
        init.conv(&mut p, "depth_decoder.up3.conv", c[2], c[3] + c[2], 3, 1.0);
        init.conv(&mut p, "depth_decoder.up2.conv", c[1], c[2] + c[1], 3, 1.0);
        init.conv(&mut p, "depth_decoder.up1.conv", c[0], c[1] + c[0], 3, 1.0);
        init.conv(&mut p, "depth_decoder.up0.conv", decoder_mid(c[0]), c[0], 3, 1.0);
        init.conv(&mut p, "depth_decoder.out.conv", 1, decoder_mid(c[0]), 3, 0.1);
        p.insert("depth_decoder.out.conv.bias", Tensor::full(&[1], DEPTH_BIAS_INIT));
        p
    }

    pub fn init_mp_head(config: &ModelConfig, seed: u64) -> ParamStore {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x3a5c) };
        let mut p = ParamStore::new();
        let s = EncoderSpec::TOTAL_STRIDE;
        init.conv(&mut p, "mp_head", 3 * s * s, config.encoder.channels[3], 1, 0.5);
        p.insert("mp_head.bias", Tensor::full(&[3 * s * s], PIXEL_MEAN));
        p.insert(MASK_TOKEN, Tensor::full(&[3], PIXEL_MEAN));
        p
    }

    /// Pose net with a zero-initialized output layer, so it starts at the identity pose.
    pub fn init_pose(config: &ModelConfig, seed: u64) -> ParamStore {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed ^ 0x905e) };
        let mut p = ParamStore::new();
        let mut ci = 6;
        for (i, &co) in config.pose.channels.iter().enumerate() {
            init.conv(&mut p, &format!("pose.conv{i}"), co, ci, 3, 1.0);
            ci = co;
        }
        p.insert("pose.fc.weight", Tensor::zeros(&[ci, 6]));
        p.insert("pose.fc.bias", Tensor::zeros(&[1, 6]));
        p
    }

    /// Every name must not be a strict prefix of another.
    pub fn check_namespace(params: &ParamStore) -> Result<()> {
        let names: Vec<&str> = params.names().collect();
        for w in names.windows(2) {
            if w[1].starts_with(w[0]) {
                return Err(MesaError::Checkpoint(format!("parameter `{}` is a prefix of `{}`", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: impl Fn(&str) -> bool) -> Bound<'g> {
        self.params.bind(g, trainable)
    }

    /// Checks `H` and `W` are multiples of the total stride.
    pub fn check_input_size(h: usize, w: usize) -> Result<()> {
        let s = EncoderSpec::TOTAL_STRIDE;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(MesaError::Shape(format!("input {h}x{w} is not divisible by the encoder stride {s}")));
        }
        Ok(())
    }

    /// Encoder on `[N, 3, H, W]` pixel values in `[0, 1]`.
    pub fn encoder_forward<'g>(&self, b: &Bound<'g>, x: Var<'g>, probe: bool) -> Result<EncoderOutput<'g>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(MesaError::Shape(format!("encoder expects [N,3,H,W], got {shape:?}")));
        }
        Self::check_input_size(shape[2], shape[3])?;
        let spec = &self.config.encoder;
        let mut probes = probe.then(BTreeMap::new);
        let mut capture = |name: &str, v: Var<'g>| {
            if let Some(p) = probes.as_mut() {
                p.insert(name.to_string(), v);
            }
        };
        let x = x.add_scalar(-PIXEL_MEAN).scale(1.0 / PIXEL_STD);
        let mut h = conv(b, "encoder.stem.conv", x, 2, 1);
        h = norm(b, "encoder.stem.norm", h);
        capture("stem.norm", h);
        let mut skips = Vec::with_capacity(3);
        for s in 0..4 {
            for blk in 0..blocks_in_stage(spec, s) {
                let pre = format!("encoder.stages.{s}.blocks.{blk}");
                let n = norm(b, &format!("{pre}.norm1"), h);
                capture(&format!("stages.{s}.blocks.{blk}.norm1"), n);
                let r = conv(b, &format!("{pre}.conv1"), n, 1, 1).leaky_relu(ACT_SLOPE);
                let r = conv(b, &format!("{pre}.conv2"), r, 1, 0);
                h = h.add(r);
            }
            if s < 3 {
                skips.push(h);
                h = conv(b, &format!("encoder.stages.{s}.downsample.conv"), h, 2, 1);
                h = norm(b, &format!("encoder.stages.{s}.downsample.norm"), h);
                capture(&format!("stages.{s}.downsample.norm"), h);
            }
        }
        let deepest = norm(b, "encoder.norm3", h);
        capture("norm3", deepest);
        Ok(EncoderOutput { skips: [skips[0], skips[1], skips[2]], deepest, probes })
    }

    /// Raw decoder logits `[N, 1, H, W]`.
    pub fn depth_logits<'g>(&self, b: &Bound<'g>, feats: &EncoderOutput<'g>) -> Var<'g> {
        let mut d = feats.deepest;
        for (name, skip) in [("up3", feats.skips[2]), ("up2", feats.skips[1]), ("up1", feats.skips[0])] {
            d = upsample_nearest2x(d);
            d = Var::concat(&[d, skip], 1);
            d = conv(b, &format!("depth_decoder.{name}.conv"), d, 1, 1).leaky_relu(ACT_SLOPE);
        }
        d = upsample_nearest2x(d);
        d = conv(b, "depth_decoder.up0.conv", d, 1, 1).leaky_relu(ACT_SLOPE);
        conv(b, "depth_decoder.out.conv", d, 1, 1)
    }

    /// Maps decoder logits to depth through the disparity parameterization.
    pub fn logits_to_depth<'g>(&self, raw: Var<'g>) -> Var<'g> {
        let dec = &self.config.decoder;
        raw.sigmoid().scale(dec.disp_scale).add_scalar(dec.disp_offset).recip()
    }

    /// Strictly positive depth `[N, 1, H, W]`.
    pub fn depth_decoder_forward<'g>(&self, b: &Bound<'g>, feats: &EncoderOutput<'g>) -> Var<'g> {
        self.logits_to_depth(self.depth_logits(b, feats))
    }

    /// Reconstruction `[N, 3, H, W]` from the deepest features through one linear map per cell.
    pub fn mp_head_forward<'g>(&self, b: &Bound<'g>, feats: &EncoderOutput<'g>) -> Var<'g> {
        let y = feats.deepest.conv2d(b.get("mp_head.weight"), Some(b.get("mp_head.bias")), 1, 0);
        pixel_shuffle(y, EncoderSpec::TOTAL_STRIDE)
    }

    /// 6-vector poses `[N, 6]` (axis-angle, translation) for `ia → ib`.
    pub fn pose_forward<'g>(&self, b: &Bound<'g>, ia: Var<'g>, ib: Var<'g>) -> Result<Var<'g>> {
        if ia.shape() != ib.shape() {
            return Err(MesaError::Shape(format!("pose inputs differ: {:?} vs {:?}", ia.shape(), ib.shape())));
        }
        let x = Var::concat(&[ia, ib], 1).add_scalar(-PIXEL_MEAN).scale(1.0 / PIXEL_STD);
        let mut h = x;
        for i in 0..self.config.pose.channels.len() {
            h = conv(b, &format!("pose.conv{i}"), h, 2, 1).leaky_relu(ACT_SLOPE);
        }
        let pooled = global_avg_pool(h);
        let n = pooled.shape()[0];
        let out = pooled.matmul(b.get("pose.fc.weight")).add(b.get("pose.fc.bias").expand(&[n, 6]));
        Ok(out.scale(self.config.pose.output_scale))
    }

    fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| MesaError::InvalidInput("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if !img.same_size(first) {
                return Err(MesaError::Shape("batch images differ in size".into()));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Tensor::new(&[images.len(), 3, h, w], data))
    }

    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        Self::batch(images)
    }

    /// Inference: deepest features `[1, C, H/16, W/16]` and, when `probe`, the nine probe activations.
    pub fn encode(&self, image: &Image, probe: bool) -> Result<(Tensor, Option<ProbeActivations>)> {
        let g = Graph::new();
        let b = self.bind(&g, |_| false);
        let x = g.constant(Self::batch(&[image])?);
        let out = self.encoder_forward(&b, x, probe)?;
        let probes = match out.probes {
            Some(map) => Some(self.probe_activations(&map)?),
            None => None,
        };
        Ok(((*out.deepest.value()).clone(), probes))
    }

    /// Selects the nine registry layers from a capture map.
    pub fn probe_activations(&self, captured: &BTreeMap<String, Var<'_>>) -> Result<ProbeActivations> {
        let mut layers = BTreeMap::new();
        for (id, layer) in PROBE_IDS.iter().zip(&self.config.encoder.probe_layers) {
            let v = captured.get(layer).ok_or_else(|| MesaError::MissingProbe {
                name: layer.clone(),
                available: captured.keys().cloned().collect(),
            })?;
            layers.insert(id.to_string(), (*v.value()).clone());
        }
        Ok(ProbeActivations { layers })
    }

    pub fn predict_depth(&self, image: &Image) -> Result<DepthMap> {
        Ok(self.predict_depths(&[image])?.remove(0))
    }

    pub fn predict_depths(&self, images: &[&Image]) -> Result<Vec<DepthMap>> {
        let g = Graph::new();
        let b = self.bind(&g, |_| false);
        let x = g.constant(Self::batch(images)?);
        let feats = self.encoder_forward(&b, x, false)?;
        let d = self.depth_decoder_forward(&b, &feats).value();
        let (n, _, h, w) = d.dims4();
        (0..n).map(|i| DepthMap::dense(h, w, d.data()[i * h * w..(i + 1) * h * w].to_vec())).collect()
    }

    pub fn predict_pose(&self, ia: &Image, ib: &Image) -> Result<Pose6D> {
        let g = Graph::new();
        let b = self.bind(&g, |_| false);
        let a = g.constant(Self::batch(&[ia])?);
        let bb = g.constant(Self::batch(&[ib])?);
        let p = self.pose_forward(&b, a, bb)?.value();
        Pose6D::from_slice(p.data())
    }
}

fn conv<'g>(b: &Bound<'g>, name: &str, x: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
    x.conv2d(b.get(&format!("{name}.weight")), Some(b.get(&format!("{name}.bias"))), stride, pad)
}

fn norm<'g>(b: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    layer_norm_channels(x, b.get(&format!("{name}.gamma")), b.get(&format!("{name}.beta")), NORM_EPS)
}
