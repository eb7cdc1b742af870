//! Supervised pre-training from pseudo-depth: normal matching, confident depth
//! ranking, edge-aware relative normals, and the five-term joint objective.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor, Var};
use crate::data::io::load_depth_mm;
use crate::data::{DepthMap, FrameSequence, Image, Intrinsics, SE3Transform};
use crate::error::{MesaError, Result};
use crate::finetune_eval::{nyu_metrics, EvalConfig, ScalingMode};
use crate::geometric_pretrain::{
    depth_inconsistency_var, directed_terms, frame_pairs, geometry_consistency_var, gp_trainable, photometric_loss_var,
    pixel_rays, predict_pairs, warp_var, PhotometricParams,
};
use crate::networks::{Checkpoint, Model, ModelConfig, Stage};
use crate::train::{batch_indices, ensure_finite, LossCurve, Schedule};

/// Dense positive depth from an external teacher, possibly known only up to scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDepth {
    pub depth: DepthMap,
    pub up_to_scale: bool,
}

impl PseudoDepth {
    pub fn new(depth: DepthMap, up_to_scale: bool) -> Result<Self> {
        if depth.depth().iter().zip(depth.valid()).any(|(&d, &v)| v && !(d > 0.0 && d.is_finite())) {
            return Err(MesaError::Invariant("pseudo-depth must be positive and finite".into()));
        }
        Ok(Self { depth, up_to_scale })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the per-pixel log-normal factor.
    pub sigma: f64,
    /// Fixed global multiplier.
    #[serde(default = "unit")]
    pub scale: f64,
    /// Global log-scale drawn uniformly from `[-scale_jitter, scale_jitter]`.
    #[serde(default)]
    pub scale_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn unit() -> f64 {
    1.0
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.05, scale: 1.0, scale_jitter: 0.3, seed: 0 }
    }
}

/// Ground truth corrupted by multiplicative log-normal noise and a global scale.
pub fn pseudo_depth_oracle(gt: &DepthMap, noise: &NoiseSpec) -> Result<PseudoDepth> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let jitter = if noise.scale_jitter > 0.0 { rng.random_range(-noise.scale_jitter..=noise.scale_jitter).exp() } else { 1.0 };
    let global = noise.scale * jitter;
    let depth = gt
        .depth()
        .iter()
        .map(|&d| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            if noise.sigma > 0.0 {
                d * global * (noise.sigma * eps).exp()
            } else {
                d * global
            }
        })
        .collect();
    PseudoDepth::new(DepthMap::new(gt.height(), gt.width(), depth, gt.valid().to_vec())?, true)
}

/// Loads a 16-bit millimeter PGM; every pixel must be positive.
pub fn load_pseudo_depth(path: &Path, expected: Option<(usize, usize)>) -> Result<PseudoDepth> {
    let (h, w, raw) = load_depth_mm(path)?;
    if let Some((eh, ew)) = expected {
        if (h, w) != (eh, ew) {
            return Err(MesaError::Shape(format!("pseudo-depth {}x{} vs frames {eh}x{ew}", h, w)));
        }
    }
    if let Some(i) = raw.iter().position(|&v| v == 0) {
        return Err(MesaError::InvalidInput(format!("{}: pixel ({}, {}) is not positive", path.display(), i % w, i / w)));
    }
    PseudoDepth::new(DepthMap::dense(h, w, raw.iter().map(|&v| v as f64 / 1000.0).collect())?, true)
}

/// Interior pixels with their four neighbors, used for central differences.
#[derive(Clone, Debug)]
pub struct NormalLayout {
    pub height: usize,
    pub width: usize,
    /// Interior pixel indices (row-major); column `q` of a normal tensor is pixel `pixels[q]`.
    pub pixels: Vec<usize>,
    neighbors: [Rc<Vec<usize>>; 4],
}

impl NormalLayout {
    pub fn new(height: usize, width: usize) -> Self {
        let p = height * width;
        let pixels: Vec<usize> = (1..height.saturating_sub(1))
            .flat_map(|y| (1..width.saturating_sub(1)).map(move |x| y * width + x))
            .collect();
        let offsets: [isize; 4] = [1, -1, width as isize, -(width as isize)];
        let neighbors = offsets.map(|o| {
            Rc::new(
                (0..3)
                    .flat_map(|c| pixels.iter().map(move |&i| c * p + (i as isize + o) as usize))
                    .collect::<Vec<_>>(),
            )
        });
        Self { height, width, pixels, neighbors }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Column of pixel `i`, if interior.
    pub fn column(&self, i: usize) -> Option<usize> {
        let (y, x) = (i / self.width, i % self.width);
        (y >= 1 && x >= 1 && y + 1 < self.height && x + 1 < self.width).then(|| (y - 1) * (self.width - 2) + (x - 1))
    }
}

fn row<'g>(v: Var<'g>, c: usize) -> Var<'g> {
    v.narrow(0, c, 1)
}

/// Unit normals `[3, Q]` at interior pixels: `normalize(t_y × t_x)` of backprojected points.
///
/// A fronto-parallel plane gives `(0, 0, −1)` (facing the camera).
pub fn normals_var<'g>(depth: Var<'g>, layout: &NormalLayout, k: &Intrinsics) -> Var<'g> {
    let (h, w) = (layout.height, layout.width);
    let p = h * w;
    let q = layout.len();
    let g = depth.graph();
    let pts = g.constant(pixel_rays(h, w, k)).mul(depth.reshape(&[1, p]).expand(&[3, p]));
    let [r, l, d, u] = layout.neighbors.clone().map(|idx| pts.gather(idx, &[3, q]));
    let tx = r.sub(l);
    let ty = d.sub(u);
    let (a0, a1, a2) = (row(ty, 0), row(ty, 1), row(ty, 2));
    let (b0, b1, b2) = (row(tx, 0), row(tx, 1), row(tx, 2));
    let cross = Var::concat(
        &[a1.mul(b2).sub(a2.mul(b1)), a2.mul(b0).sub(a0.mul(b2)), a0.mul(b1).sub(a1.mul(b0))],
        0,
    );
    let norm = cross.square().sum_axis(0).add_scalar(1e-30).sqrt();
    cross.div(norm.expand(&[3, q]))
}

/// Unit normal per pixel; border pixels are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub height: usize,
    pub width: usize,
    pub normals: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

pub fn normals_from_depth(depth: &DepthMap, k: &Intrinsics) -> NormalMap {
    let (h, w) = (depth.height(), depth.width());
    let layout = NormalLayout::new(h, w);
    let g = Graph::new();
    let n = normals_var(g.constant(depth.to_tensor().reshaped(&[h * w])), &layout, k).value();
    let q = layout.len();
    let mut normals = vec![[0.0; 3]; h * w];
    let mut valid = vec![false; h * w];
    for (col, &i) in layout.pixels.iter().enumerate() {
        normals[i] = [n.data()[col], n.data()[q + col], n.data()[2 * q + col]];
        let (y, x) = (i / w, i % w);
        valid[i] = [i, i - 1, i + 1, i - w, i + w].iter().all(|&j| depth.is_valid(j / w, j % w)) && y > 0 && x > 0;
    }
    NormalMap { height: h, width: w, normals, valid }
}

fn interior_valid(layout: &NormalLayout, maps: &[&DepthMap]) -> Vec<bool> {
    let w = layout.width;
    layout
        .pixels
        .iter()
        .map(|&i| [i, i - 1, i + 1, i - w, i + w].iter().all(|&j| maps.iter().all(|m| m.valid()[j])))
        .collect()
}

fn mask_tensor(mask: &[bool]) -> Tensor {
    Tensor::new(&[1, mask.len()], mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
}

/// `L_N = mean(1 − ⟨n_pred, n_pseudo⟩)` over interior pixels valid in both maps.
pub fn normal_matching_var<'g>(pred: Var<'g>, pseudo: &PseudoDepth, pseudo_normals: Var<'g>, layout: &NormalLayout, k: &Intrinsics) -> Var<'g> {
    let g = pred.graph();
    let np = normals_var(pred, layout, k);
    let mask = interior_valid(layout, &[&pseudo.depth]);
    let n = mask.iter().filter(|&&v| v).count().max(1);
    let cos = np.mul(pseudo_normals).sum_axis(0);
    cos.neg().add_scalar(1.0).mul(g.constant(mask_tensor(&mask))).sum().scale(1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSpec {
    pub pairs: usize,
    pub tau: f64,
    /// Pixel offset on either side of an edge for relative-normal pairs.
    pub edge_offset: usize,
    pub edge_percentile: f64,
    pub seed: u64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { pairs: 256, tau: 1.15, edge_offset: 2, edge_percentile: 0.9, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankingPair {
    pub p0: usize,
    pub p1: usize,
    /// `+1` when pixel `p0` is farther in the pseudo-depth.
    pub label: i8,
    pub confident: bool,
}

/// Draws `spec.pairs` distinct-pixel pairs among valid pseudo-depth pixels and labels them.
pub fn sample_ranking_pairs(pseudo: &PseudoDepth, spec: &SamplerSpec) -> Vec<RankingPair> {
    let d = &pseudo.depth;
    let valid: Vec<usize> = (0..d.valid().len()).filter(|&i| d.valid()[i]).collect();
    if valid.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.pairs)
        .map(|_| {
            let p0 = valid[rng.random_range(0..valid.len())];
            let mut p1 = valid[rng.random_range(0..valid.len() - 1)];
            if p1 == p0 {
                p1 = valid[valid.len() - 1];
            }
            let (a, b) = (d.depth()[p0], d.depth()[p1]);
            let confident = a.max(b) / a.min(b) > spec.tau;
            RankingPair { p0, p1, label: if a > b { 1 } else { -1 }, confident }
        })
        .collect()
}

/// `L_CDR = mean softplus(−ℓ (d0 − d1) / s)` over confident pairs, `s` = mean predicted depth.
/// `None` when no pair is confident.
pub fn ranking_var<'g>(pred: Var<'g>, pairs: &[RankingPair]) -> Option<Var<'g>> {
    let conf: Vec<&RankingPair> = pairs.iter().filter(|p| p.confident).collect();
    if conf.is_empty() {
        return None;
    }
    let m = conf.len();
    let flat = pred.reshape(&[pred.numel()]);
    let d0 = flat.gather(Rc::new(conf.iter().map(|p| p.p0).collect()), &[m]);
    let d1 = flat.gather(Rc::new(conf.iter().map(|p| p.p1).collect()), &[m]);
    let labels = pred.graph().constant(Tensor::new(&[m], conf.iter().map(|p| -(p.label as f64)).collect()));
    let s = flat.mean().expand(&[m]);
    Some(d0.sub(d1).mul(labels).div(s).softplus().mean())
}

/// Pixel pairs straddling image edges along the intensity-gradient direction.
pub fn sample_edge_pairs(image: &Image, layout: &NormalLayout, valid: &[bool], spec: &SamplerSpec) -> Vec<(usize, usize)> {
    let (h, w) = (image.height(), image.width());
    let gray = image.gray();
    let mut grads = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (gray[y * w + x + 1] - gray[y * w + x - 1]) / 2.0;
            let gy = (gray[(y + 1) * w + x] - gray[(y - 1) * w + x]) / 2.0;
            grads.push((y * w + x, gx, gy, (gx * gx + gy * gy).sqrt()));
        }
    }
    let mut mags: Vec<f64> = grads.iter().map(|g| g.3).collect();
    if mags.is_empty() {
        return Vec::new();
    }
    mags.sort_by(f64::total_cmp);
    let thr = mags[((spec.edge_percentile * (mags.len() - 1) as f64).floor() as usize).min(mags.len() - 1)];
    let r = spec.edge_offset.max(1) as f64;
    let usable = |px: f64, py: f64| -> Option<usize> {
        let (xi, yi) = (px.round(), py.round());
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            return None;
        }
        let i = yi as usize * w + xi as usize;
        layout.column(i).filter(|&c| valid[c])
    };
    let edges: Vec<(usize, usize)> = grads
        .iter()
        .filter(|g| g.3 > 0.0 && g.3 >= thr)
        .filter_map(|&(i, gx, gy, m)| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (dx, dy) = (gx / m, gy / m);
            let a = usable(x - r * dx, y - r * dy)?;
            let b = usable(x + r * dx, y + r * dy)?;
            (a != b).then_some((a, b))
        })
        .collect();
    if edges.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xed6e);
    (0..spec.pairs).map(|_| edges[rng.random_range(0..edges.len())]).collect()
}

/// `L_ERN = mean |⟨n_pred(p0), n_pred(p1)⟩ − ⟨n_ps(p0), n_ps(p1)⟩|`; pairs index normal columns.
pub fn relative_normal_var<'g>(pred_normals: Var<'g>, pseudo_normals: &Tensor, pairs: &[(usize, usize)]) -> Option<Var<'g>> {
    if pairs.is_empty() {
        return None;
    }
    let q = pseudo_normals.shape()[1];
    let m = pairs.len();
    let idx = |first: bool| -> Rc<Vec<usize>> {
        Rc::new((0..3).flat_map(|c| pairs.iter().map(move |&(a, b)| c * q + if first { a } else { b })).collect())
    };
    let (i0, i1) = (idx(true), idx(false));
    let n0 = pred_normals.gather(i0.clone(), &[3, m]);
    let n1 = pred_normals.gather(i1.clone(), &[3, m]);
    let pred_dot = n0.mul(n1).sum_axis(0);
    let pd = pseudo_normals.data();
    let ps_dot: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (0..3).map(|c| pd[c * q + a] * pd[c * q + b]).sum())
        .collect();
    let ps = pred_normals.graph().constant(Tensor::new(&[1, m], ps_dot));
    Some(pred_dot.sub(ps).abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5, gamma: 0.1, delta: 1.0, epsilon: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta, self.epsilon];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(MesaError::Config(format!("loss weights must be nonnegative, got {w:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.alpha, self.beta, self.gamma, self.delta, self.epsilon]
    }
}

/// Unweighted values of the five terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p_m: f64,
    pub l_g: f64,
    pub l_n: f64,
    pub l_cdr: f64,
    pub l_ern: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 5] = ["L_P_M", "L_G", "L_N", "L_CDR", "L_ERN"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.l_p_m, self.l_g, self.l_n, self.l_cdr, self.l_ern]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.as_array().iter().zip(w.as_array()).map(|(t, w)| t * w).sum()
    }
}

/// Graph terms for the supervised part on one reference depth.
pub struct SupervisedTerms<'g> {
    pub l_n: Var<'g>,
    pub l_cdr: Option<Var<'g>>,
    pub l_ern: Option<Var<'g>>,
}

/// `L_N`, `L_CDR`, `L_ERN` of a predicted depth (`H·W` entries) against pseudo-depth.
pub fn supervised_terms<'g>(
    pred: Var<'g>,
    pseudo: &PseudoDepth,
    image: &Image,
    k: &Intrinsics,
    spec: &SamplerSpec,
) -> SupervisedTerms<'g> {
    let g = pred.graph();
    let (h, w) = (pseudo.depth.height(), pseudo.depth.width());
    let layout = NormalLayout::new(h, w);
    let ps_normals = normals_var(g.constant(pseudo.depth.to_tensor().reshaped(&[h * w])), &layout, k);
    let ps_tensor = (*ps_normals.value()).clone();
    let pred = pred.reshape(&[h * w]);
    let l_n = normal_matching_var(pred, pseudo, ps_normals, &layout, k);
    let pairs = sample_ranking_pairs(pseudo, spec);
    let l_cdr = ranking_var(pred, &pairs);
    if l_cdr.is_none() {
        log::warn!("no confident ranking pairs; L_CDR contributes 0");
    }
    let valid = interior_valid(&layout, &[&pseudo.depth]);
    let edge_pairs = sample_edge_pairs(image, &layout, &valid, spec);
    let l_ern = relative_normal_var(normals_var(pred, &layout, k), &ps_tensor, &edge_pairs);
    if l_ern.is_none() {
        log::warn!("no edge pairs; L_ERN contributes 0");
    }
    SupervisedTerms { l_n, l_cdr, l_ern }
}

fn item_or_zero(v: Option<Var<'_>>) -> f64 {
    v.map_or(0.0, |v| v.item())
}

/// Weighted sum of terms; zero-weight and absent terms are left out of the graph.
fn weighted_sum<'g>(g: &'g Graph, terms: [Option<Var<'g>>; 5], w: &LossWeights) -> Var<'g> {
    let mut total: Option<Var<'g>> = None;
    for (t, wt) in terms.into_iter().zip(w.as_array()) {
        if let Some(t) = t.filter(|_| wt > 0.0) {
            let s = t.scale(wt);
            total = Some(total.map_or(s, |acc| acc.add(s)));
        }
    }
    total.unwrap_or_else(|| g.scalar(0.0))
}

/// Combined GP+SP objective for one directed pair, as graph values plus the breakdown.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_var<'g>(
    img_a: Var<'g>,
    img_b: Var<'g>,
    depth_a: Var<'g>,
    depth_b: Var<'g>,
    pose_ab: Var<'g>,
    image_a: &Image,
    pseudo_a: &PseudoDepth,
    weights: &LossWeights,
    k: &Intrinsics,
    photometric: &PhotometricParams,
    sampler: &SamplerSpec,
) -> Result<(Var<'g>, LossBreakdown)> {
    let g = img_a.graph();
    let warp = warp_var(img_b, depth_b, depth_a, pose_ab, k)?;
    let ddiff = depth_inconsistency_var(&warp);
    let l_p_m = photometric_loss_var(img_a, &warp, photometric, Some(ddiff.neg().add_scalar(1.0)))?;
    let l_g = geometry_consistency_var(ddiff, &warp.valid)?;
    let sup = supervised_terms(depth_a, pseudo_a, image_a, k, sampler);
    let breakdown = LossBreakdown {
        l_p_m: l_p_m.item(),
        l_g: l_g.item(),
        l_n: sup.l_n.item(),
        l_cdr: item_or_zero(sup.l_cdr),
        l_ern: item_or_zero(sup.l_ern),
    };
    let total = weighted_sum(g, [Some(l_p_m), Some(l_g), Some(sup.l_n), sup.l_cdr, sup.l_ern], weights);
    Ok((total, breakdown))
}

/// Value-level combined GP+SP objective with per-term breakdown.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    img_a: &Image,
    img_b: &Image,
    depth_a: &DepthMap,
    depth_b: &DepthMap,
    pose_ab: &SE3Transform,
    pseudo_a: &PseudoDepth,
    weights: &LossWeights,
    k: &Intrinsics,
    photometric: &PhotometricParams,
    sampler: &SamplerSpec,
) -> Result<(f64, LossBreakdown)> {
    weights.validate()?;
    let g = Graph::new();
    let (total, parts) = combined_loss_var(
        g.constant(img_a.to_tensor()),
        g.constant(img_b.to_tensor()),
        g.constant(depth_a.to_tensor().reshaped(&[depth_a.height() * depth_a.width()])),
        g.constant(depth_b.to_tensor()),
        g.constant(Tensor::new(&[6], pose_ab.to_pose6d().to_array().to_vec())),
        img_a,
        pseudo_a,
        weights,
        k,
        photometric,
        sampler,
    )?;
    Ok((total.item(), parts))
}

pub fn normal_matching_loss(pred: &DepthMap, pseudo: &PseudoDepth, k: &Intrinsics) -> f64 {
    let (h, w) = (pred.height(), pred.width());
    let layout = NormalLayout::new(h, w);
    let g = Graph::new();
    let ps = normals_var(g.constant(pseudo.depth.to_tensor().reshaped(&[h * w])), &layout, k);
    normal_matching_var(g.constant(pred.to_tensor().reshaped(&[h * w])), pseudo, ps, &layout, k).item()
}

/// `L_CDR` value; zero (with a warning) when no pair is confident.
pub fn confident_depth_ranking_loss(pred: &DepthMap, pseudo: &PseudoDepth, spec: &SamplerSpec) -> f64 {
    let g = Graph::new();
    let pairs = sample_ranking_pairs(pseudo, spec);
    let v = ranking_var(g.constant(pred.to_tensor().reshaped(&[pred.height() * pred.width()])), &pairs);
    if v.is_none() {
        log::warn!("no confident ranking pairs; L_CDR contributes 0");
    }
    item_or_zero(v)
}

/// `L_ERN` value; zero (with a warning) when the image has no usable edges.
pub fn edge_aware_relative_normal_loss(pred: &DepthMap, pseudo: &PseudoDepth, image: &Image, k: &Intrinsics, spec: &SamplerSpec) -> f64 {
    let g = Graph::new();
    let t = supervised_terms(g.constant(pred.to_tensor().reshaped(&[pred.height() * pred.width()])), pseudo, image, k, spec);
    item_or_zero(t.l_ern)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpSpConfig {
    #[serde(default)]
    pub photometric: PhotometricParams,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub pair_stride: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for GpSpConfig {
    fn default() -> Self {
        Self {
            photometric: PhotometricParams::default(),
            weights: LossWeights::default(),
            sampler: SamplerSpec::default(),
            noise: NoiseSpec::default(),
            schedule: Schedule { steps: 300, lr: 5e-4, batch_size: 2 },
            pair_stride: 1,
            seed: 0,
        }
    }
}

pub struct GpSpOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub curve: LossCurve,
    /// Median-scaled AbsRel on the validation set before and after.
    pub val_absrel_start: f64,
    pub val_absrel_end: f64,
}

/// Pseudo-depth for every frame from the noisy oracle, seeded per frame.
pub fn oracle_pseudo_depths(seqs: &[FrameSequence], noise: &NoiseSpec) -> Result<Vec<Vec<PseudoDepth>>> {
    seqs.iter()
        .enumerate()
        .map(|(s, seq)| {
            let gts = seq.gt_depths().ok_or_else(|| MesaError::InvalidInput(format!("sequence {s} has no ground-truth depth for the pseudo-depth oracle")))?;
            gts.iter()
                .enumerate()
                .map(|(i, gt)| pseudo_depth_oracle(gt, &NoiseSpec { seed: noise.seed ^ ((s as u64) << 32) ^ i as u64, ..*noise }))
                .collect()
        })
        .collect()
}

/// Median-scaled AbsRel of the model on every frame with ground truth.
pub fn validation_absrel(model: &Model, seqs: &[FrameSequence]) -> Result<f64> {
    let cfg = EvalConfig { scaling: ScalingMode::Median, ..EvalConfig::default() };
    let mut total = 0.0;
    let mut n = 0;
    for seq in seqs {
        let Some(gts) = seq.gt_depths() else { continue };
        for (img, gt) in seq.frames().iter().zip(gts) {
            total += nyu_metrics(&model.predict_depth(img)?, gt, &cfg)?.rel;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MesaError::InvalidInput("validation set has no ground-truth depth".into()));
    }
    Ok(total / n as f64)
}

/// Joint GP + SP training with the five-term objective on both pair directions.
pub fn run_gp_sp_stage(
    cfg: &GpSpConfig,
    init: Checkpoint,
    model_cfg: &ModelConfig,
    train: &[FrameSequence],
    pseudo: &[Vec<PseudoDepth>],
    val: &[FrameSequence],
    force: bool,
) -> Result<GpSpOutcome> {
    cfg.schedule.validate("gp_sp")?;
    cfg.photometric.validate()?;
    cfg.weights.validate()?;
    if !matches!(init.meta.stage, Stage::Mp | Stage::Gp) {
        return Err(MesaError::Pipeline(format!("gp_sp stage needs an mp or gp checkpoint, got {}", init.meta.stage)));
    }
    let chain = init.meta.chain.clone();
    let mut model = init.into_model(model_cfg, Stage::GpSp, cfg.seed, force)?;
    if pseudo.len() != train.len() || pseudo.iter().zip(train).any(|(p, s)| p.len() != s.len()) {
        return Err(MesaError::Shape("pseudo-depth list does not match the training frames".into()));
    }
    let pairs = frame_pairs(train, cfg.pair_stride);
    if pairs.is_empty() {
        return Err(MesaError::InvalidInput("gp_sp stage needs at least one frame pair".into()));
    }
    let val_set = if val.is_empty() { train } else { val };
    let val_absrel_start = validation_absrel(&model, val_set)?;
    let mut curve = LossCurve::new(&LossBreakdown::COLUMNS);
    let mut adam = Adam::new();
    for step in 0..cfg.schedule.steps {
        let idx = batch_indices(pairs.len(), cfg.schedule.batch_size, step, cfg.seed);
        let chosen: Vec<(usize, usize, usize)> = idx.iter().map(|&i| pairs[i]).collect();
        let a_imgs: Vec<&Image> = chosen.iter().map(|&(s, a, _)| &train[s].frames()[a]).collect();
        let b_imgs: Vec<&Image> = chosen.iter().map(|&(s, _, b)| &train[s].frames()[b]).collect();
        let g = Graph::new();
        let bound = model.bind(&g, gp_trainable);
        let preds = predict_pairs(&model, &bound, &a_imgs, &b_imgs)?;
        let n = chosen.len();
        let mut sums = [0.0; 5];
        let mut total: Option<Var> = None;
        for (j, &(s, a, b)) in chosen.iter().enumerate() {
            let k = train[s].intrinsics();
            for fwd in [true, false] {
                let (ri, ref_frame) = if fwd { (j, a) } else { (n + j, b) };
                let dt = directed_terms(&preds, j, fwd, &k, &cfg.photometric, true)?;
                let sampler = SamplerSpec { seed: cfg.sampler.seed ^ cfg.seed ^ ((step as u64) << 16) ^ (2 * j as u64 + fwd as u64), ..cfg.sampler };
                let depth_ref = preds.depth_map(ri).reshape(&[preds.depth.shape()[2] * preds.depth.shape()[3]]);
                let sup = supervised_terms(depth_ref, &pseudo[s][ref_frame], &train[s].frames()[ref_frame], &k, &sampler);
                let parts = [dt.l_p.item(), dt.l_g.item(), sup.l_n.item(), item_or_zero(sup.l_cdr), item_or_zero(sup.l_ern)];
                for (acc, v) in sums.iter_mut().zip(parts) {
                    *acc += v;
                }
                let t = weighted_sum(&g, [Some(dt.l_p), Some(dt.l_g), Some(sup.l_n), sup.l_cdr, sup.l_ern], &cfg.weights);
                total = Some(total.map_or(t, |acc| acc.add(t)));
            }
        }
        let norm = 1.0 / (2 * n) as f64;
        let row: Vec<f64> = sums.iter().map(|v| v * norm).collect();
        let named: Vec<(&str, f64)> = LossBreakdown::COLUMNS.iter().copied().zip(row.iter().copied()).collect();
        ensure_finite("gp_sp", step, &named)?;
        curve.push(step, row);
        let loss = total.expect("non-empty batch").scale(norm);
        let grads = g.backward(loss);
        adam.step(&mut model.params, &bound, &grads, cfg.schedule.lr);
    }
    model.params.round_to_f32();
    let val_absrel_end = validation_absrel(&model, val_set)?;
    log::info!("gp_sp: validation AbsRel {val_absrel_start:.4} -> {val_absrel_end:.4}");
    let checkpoint = Checkpoint::from_model(&model, Stage::GpSp, chain, cfg.seed);
    Ok(GpSpOutcome { checkpoint, model, curve, val_absrel_start, val_absrel_end })
}
