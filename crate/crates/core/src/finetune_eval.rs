//! Supervised fine-tuning and the depth evaluation suite (NYU-style and IBims-style metrics).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, Tensor, Var};
use crate::data::{DepthMap, FrameSequence, Image, Intrinsics, Primitive, SE3Transform, SceneSpec};
use crate::error::{IoContext, MesaError, Result};
use crate::networks::{Checkpoint, Model, ModelConfig, Stage, DEPTH_DECODER, ENCODER};
use crate::train::{batch_indices, ensure_finite, poly_lr, LossCurve, Schedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    None,
    /// Per-image `median(gt) / median(pred)` applied to the prediction.
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IbimsParams {
    /// Distance-transform truncation in pixels.
    pub dbe_theta: f64,
    /// Threshold on `|∇D| / D` for depth-edge extraction.
    pub edge_threshold: f64,
}

impl Default for IbimsParams {
    fn default() -> Self {
        Self { dbe_theta: 10.0, edge_threshold: 0.1 }
    }
}

/// A pixel counts when ground truth is valid and within `(min_depth, cap]`;
/// predictions are clamped to `[min_depth, cap]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cap: f64,
    pub min_depth: f64,
    #[serde(default)]
    pub scaling: ScalingMode,
    #[serde(default)]
    pub ibims: IbimsParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { cap: 10.0, min_depth: 1e-3, scaling: ScalingMode::None, ibims: IbimsParams::default() }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0 && self.min_depth > 0.0 && self.min_depth < self.cap) {
            return Err(MesaError::Config(format!("need 0 < min_depth < cap, got {} / {}", self.min_depth, self.cap)));
        }
        Ok(())
    }

    fn counts(&self, gt: &DepthMap, i: usize) -> bool {
        let d = gt.depth()[i];
        gt.valid()[i] && d > self.min_depth && d <= self.cap
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub log10: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 6] = ["RMSE", "delta1", "delta2", "delta3", "REL", "log10"];
    pub const HIGHER_IS_BETTER: [bool; 6] = [false, true, true, true, false, false];

    pub fn as_array(&self) -> [f64; 6] {
        [self.rmse, self.delta1, self.delta2, self.delta3, self.rel, self.log10]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { rmse: v[0], delta1: v[1], delta2: v[2], delta3: v[3], rel: v[4], log10: v[5] }
    }

    /// Field-wise mean.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        Some(Self::from_array(acc.map(|a| a / items.len() as f64)))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Prediction multiplied by `median(gt) / median(pred)` over counted pixels.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<DepthMap> {
    check_sizes(pred, gt)?;
    let idx: Vec<usize> = (0..gt.depth().len()).filter(|&i| cfg.counts(gt, i) && pred.depth()[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(MesaError::NoValidPoints);
    }
    let mp = median(idx.iter().map(|&i| pred.depth()[i]).collect());
    let mg = median(idx.iter().map(|&i| gt.depth()[i]).collect());
    Ok(pred.scaled(mg / mp))
}

fn check_sizes(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(MesaError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn prepared(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<DepthMap> {
    cfg.validate()?;
    check_sizes(pred, gt)?;
    match cfg.scaling {
        ScalingMode::None => Ok(pred.clone()),
        ScalingMode::Median => median_scale(pred, gt, cfg),
    }
}

/// RMSE, δ-accuracies, REL and log10 over counted pixels.
pub fn nyu_metrics(pred: &DepthMap, gt: &DepthMap, cfg: &EvalConfig) -> Result<DepthMetrics> {
    let pred = prepared(pred, gt, cfg)?;
    let mut n = 0usize;
    let (mut se, mut d1, mut d2, mut d3, mut rel, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..gt.depth().len() {
        if !cfg.counts(gt, i) {
            continue;
        }
        let g = gt.depth()[i];
        let p = pred.depth()[i].clamp(cfg.min_depth, cfg.cap);
        n += 1;
        se += (p - g) * (p - g);
        let ratio = (p / g).max(g / p);
        d1 += (ratio < 1.25) as u8 as f64;
        d2 += (ratio < 1.25f64.powi(2)) as u8 as f64;
        d3 += (ratio < 1.25f64.powi(3)) as u8 as f64;
        rel += (p - g).abs() / g;
        l10 += (p.log10() - g.log10()).abs();
    }
    if n == 0 {
        return Err(MesaError::NoValidPoints);
    }
    let n = n as f64;
    Ok(DepthMetrics { rmse: (se / n).sqrt(), delta1: d1 / n, delta2: d2 / n, delta3: d3 / n, rel: rel / n, log10: l10 / n })
}

/// Which way a metric improves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

/// Percent improvement of `improved` over `baseline`.
pub fn relative_improvement(baseline: f64, improved: f64, better: Better) -> Result<f64> {
    if baseline == 0.0 || !baseline.is_finite() {
        return Err(MesaError::InvalidInput(format!("relative improvement needs a nonzero baseline, got {baseline}")));
    }
    let delta = match better {
        Better::Lower => baseline - improved,
        Better::Higher => improved - baseline,
    };
    Ok(100.0 * delta / baseline)
}

/// Squared 1D distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so k never underflows
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel; infinite when none.
pub fn distance_transform(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; height];
    let mut tmp = vec![0.0; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut tmp[..height]);
        for y in 0..height {
            grid[y * width + x] = tmp[y];
        }
    }
    for y in 0..height {
        let row = grid[y * width..(y + 1) * width].to_vec();
        edt_1d(&row, &mut tmp[..width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&tmp[..width]);
    }
    grid.iter().map(|d| d.sqrt()).collect()
}

/// Pixels where the relative depth gradient `|∇D| / D` exceeds `threshold`; borders excluded.
pub fn depth_edges(depth: &DepthMap, threshold: f64) -> Vec<bool> {
    let (h, w) = (depth.height(), depth.width());
    let d = depth.depth();
    let mut out = vec![false; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            if ![i, i - 1, i + 1, i - w, i + w].iter().all(|&j| depth.valid()[j] && d[j] > 0.0) {
                continue;
            }
            let gx = (d[i + 1] - d[i - 1]) / 2.0;
            let gy = (d[i + w] - d[i - w]) / 2.0;
            out[i] = (gx * gx + gy * gy).sqrt() / d[i] > threshold;
        }
    }
    out
}

/// Ground-truth plane `normal · X = offset` (camera frame) and the pixels on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRegion {
    pub normal: [f64; 3],
    pub offset: f64,
    pub pixels: Vec<usize>,
}

/// Ground-truth edges and planar regions for the boundary and planarity metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OodAnnotations {
    pub edges: Vec<usize>,
    pub planes: Vec<PlaneRegion>,
}

impl OodAnnotations {
    pub fn edge_mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in &self.edges {
            if i < len {
                m[i] = true;
            }
        }
        m
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).at(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).at(path)
    }
}

/// Relative depth jump that makes a primitive boundary an occlusion edge.
pub const OCCLUSION_JUMP: f64 = 0.25;

/// Exact annotations for one rendered view: occlusion edges between
/// primitives, and every plane seen on at least `min_plane_pixels` pixels
/// away from its boundary.
pub fn scene_annotations(spec: &SceneSpec, camera_to_world: &SE3Transform, depth: &DepthMap, min_plane_pixels: usize) -> OodAnnotations {
    let (h, w) = (spec.height, spec.width);
    let labels = spec.render_labels(camera_to_world);
    let d = depth.depth();
    let mut edges = Vec::new();
    let mut interior = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut neighbors = Vec::with_capacity(4);
            if x > 0 { neighbors.push(i - 1) }
            if x + 1 < w { neighbors.push(i + 1) }
            if y > 0 { neighbors.push(i - w) }
            if y + 1 < h { neighbors.push(i + w) }
            let same = neighbors.iter().all(|&j| labels[j] == labels[i]);
            interior[i] = same && neighbors.len() == 4;
            let occludes = neighbors
                .iter()
                .any(|&j| labels[j] != labels[i] && depth.valid()[i] && depth.valid()[j] && (d[j] - d[i]) / d[i].min(d[j]) > OCCLUSION_JUMP);
            if occludes {
                edges.push(i);
            }
        }
    }
    let mut planes = Vec::new();
    for (p, prim) in spec.primitives.iter().enumerate() {
        let Primitive::Plane { normal, offset, .. } = prim else { continue };
        let pixels: Vec<usize> = (0..h * w).filter(|&i| labels[i] == Some(p) && interior[i] && depth.valid()[i]).collect();
        if pixels.len() < min_plane_pixels.max(3) {
            continue;
        }
        // world X = R Xc + t, so n·X = o becomes (Rᵀn)·Xc = o − n·t
        let n = Vector3::from(*normal);
        let n_cam = camera_to_world.rotation.transpose() * n;
        planes.push(PlaneRegion { normal: n_cam.into(), offset: offset - n.dot(&camera_to_world.translation), pixels });
    }
    OodAnnotations { edges, planes }
}

/// Fields are `None` when their inputs are empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IbimsMetrics {
    pub dbe_acc: Option<f64>,
    pub dbe_comp: Option<f64>,
    pub pe_plan: Option<f64>,
    pub pe_orie: Option<f64>,
    pub absrel: f64,
}

impl IbimsMetrics {
    pub const COLUMNS: [&'static str; 5] = ["dbe_acc", "dbe_comp", "pe_plan", "pe_orie", "AbsRel"];

    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.dbe_acc, self.dbe_comp, self.pe_plan, self.pe_orie, Some(self.absrel)]
    }

    /// Field-wise mean over the images where each field is present.
    pub fn mean(items: &[IbimsMetrics]) -> Option<IbimsMetrics> {
        if items.is_empty() {
            return None;
        }
        let avg = |f: fn(&IbimsMetrics) -> Option<f64>| {
            let v: Vec<f64> = items.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(IbimsMetrics {
            dbe_acc: avg(|m| m.dbe_acc),
            dbe_comp: avg(|m| m.dbe_comp),
            pe_plan: avg(|m| m.pe_plan),
            pe_orie: avg(|m| m.pe_orie),
            absrel: items.iter().map(|m| m.absrel).sum::<f64>() / items.len() as f64,
        })
    }
}

/// Least-squares plane through `pts`: unit normal and RMS point-to-plane distance.
pub fn fit_plane(pts: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let n = eig.eigenvectors.column(imin).into_owned().normalize();
    let rms = (pts.iter().map(|p| n.dot(&(p - c)).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Some((n, rms))
}

/// Boundary accuracy/completeness (px) and planarity (cm, degrees) plus AbsRel.
pub fn ibims_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    gt_edges: &[bool],
    planes: &[PlaneRegion],
    k: &Intrinsics,
    cfg: &EvalConfig,
) -> Result<IbimsMetrics> {
    let absrel = nyu_metrics(pred, gt, cfg)?.rel;
    let pred = prepared(pred, gt, cfg)?;
    let (h, w) = (gt.height(), gt.width());
    if gt_edges.len() != h * w {
        return Err(MesaError::Shape(format!("edge mask has {} entries for {h}x{w}", gt_edges.len())));
    }
    let theta = cfg.ibims.dbe_theta;
    let pred_edges = depth_edges(&pred, cfg.ibims.edge_threshold);
    let mean_dist = |from: &[bool], to: &[bool]| -> Option<f64> {
        if !from.iter().any(|&v| v) || !to.iter().any(|&v| v) {
            return None;
        }
        let dt = distance_transform(to, h, w);
        let vals: Vec<f64> = (0..h * w).filter(|&i| from[i]).map(|i| dt[i].min(theta)).collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let dbe_acc = mean_dist(&pred_edges, gt_edges);
    let dbe_comp = mean_dist(gt_edges, &pred_edges);
    if dbe_acc.is_none() {
        log::warn!("boundary metrics skipped: empty predicted or ground-truth edges");
    }
    let mut plan = Vec::new();
    let mut orie = Vec::new();
    for plane in planes {
        let pts: Vec<Vector3<f64>> = plane
            .pixels
            .iter()
            .filter(|&&i| i < h * w && gt.valid()[i] && pred.depth()[i] > 0.0)
            .map(|&i| {
                let d = pred.depth()[i];
                Vector3::new(((i % w) as f64 - k.cx) / k.fx * d, ((i / w) as f64 - k.cy) / k.fy * d, d)
            })
            .collect();
        let Some((n, rms)) = fit_plane(&pts) else { continue };
        let gn = Vector3::from(plane.normal).normalize();
        plan.push(rms * 100.0);
        orie.push(n.dot(&gn).abs().min(1.0).acos().to_degrees());
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(IbimsMetrics { dbe_acc, dbe_comp, pe_plan: avg(&plan), pe_orie: avg(&orie), absrel })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FtConfig {
    pub schedule: Schedule,
    pub min_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_lambda")]
    pub silog_lambda: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    /// Start from the checkpoint's depth decoder when it comes from a geometric stage.
    #[serde(default)]
    pub keep_depth_decoder: bool,
    pub seed: u64,
}

fn default_power() -> f64 {
    0.9
}

fn default_lambda() -> f64 {
    0.85
}

fn default_cap() -> f64 {
    10.0
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule { steps: 300, lr: 1e-3, batch_size: 2 },
            min_lr: 1e-5,
            power: default_power(),
            silog_lambda: default_lambda(),
            cap: default_cap(),
            keep_depth_decoder: false,
            seed: 0,
        }
    }
}

pub fn ft_trainable(name: &str) -> bool {
    name.starts_with(ENCODER) || name.starts_with(DEPTH_DECODER)
}

/// `sqrt(mean g² − λ (mean g)²)` with `g = ln d − ln d*` over valid pixels; `pred` is `[P]`.
pub fn silog_var<'g>(pred: Var<'g>, gt: &DepthMap, lambda: f64, cap: f64) -> Result<Var<'g>> {
    let g = pred.graph();
    let p = gt.depth().len();
    let mask: Vec<f64> = (0..p)
        .map(|i| (gt.valid()[i] && gt.depth()[i] > 0.0 && gt.depth()[i] <= cap) as u8 as f64)
        .collect();
    let n = mask.iter().sum::<f64>();
    if n == 0.0 {
        return Err(MesaError::NoValidPoints);
    }
    let ln_gt: Vec<f64> = gt.depth().iter().zip(&mask).map(|(d, m)| if *m > 0.0 { d.ln() } else { 0.0 }).collect();
    let mask = g.constant(Tensor::new(&[p], mask));
    let diff = pred.reshape(&[p]).ln().sub(g.constant(Tensor::new(&[p], ln_gt))).mul(mask);
    let m1 = diff.sum().scale(1.0 / n);
    let m2 = diff.square().sum().scale(1.0 / n);
    Ok(m2.sub(m1.square().scale(lambda)).add_scalar(1e-12).sqrt())
}

pub struct FtOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub curve: LossCurve,
}

type Labeled<'a> = (&'a Image, &'a DepthMap);

fn labeled(seqs: &[FrameSequence]) -> Result<Vec<Labeled<'_>>> {
    let mut out = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let gts = seq.gt_depths().ok_or_else(|| MesaError::InvalidInput(format!("fine-tuning sequence {s} has no ground-truth depth")))?;
        out.extend(seq.frames().iter().zip(gts));
    }
    if out.is_empty() {
        return Err(MesaError::InvalidInput("fine-tuning needs at least one labeled frame".into()));
    }
    Ok(out)
}

/// Supervised depth training with the scale-invariant log loss and polynomial lr decay.
pub fn run_finetune_stage(cfg: &FtConfig, init: Option<Checkpoint>, model_cfg: &ModelConfig, train: &[FrameSequence], force: bool) -> Result<FtOutcome> {
    cfg.schedule.validate("finetune")?;
    if !(cfg.min_lr > 0.0 && cfg.min_lr <= cfg.schedule.lr) {
        return Err(MesaError::Config(format!("finetune: need 0 < min_lr <= lr, got {}", cfg.min_lr)));
    }
    let (mut model, chain) = match init {
        Some(ck) => {
            let chain = ck.meta.chain.clone();
            let decoder = (cfg.keep_depth_decoder && matches!(ck.meta.stage, Stage::Gp | Stage::GpSp))
                .then(|| ck.params.subset(DEPTH_DECODER));
            let mut model = ck.into_model(model_cfg, Stage::Finetune, cfg.seed, force)?;
            if let Some(d) = decoder {
                model.params.extend(d);
            }
            (model, chain)
        }
        None => (Model::new(model_cfg.clone(), cfg.seed), vec![]),
    };
    let data = labeled(train)?;
    let mut curve = LossCurve::new(&["silog", "lr"]);
    let mut adam = Adam::new();
    for step in 0..cfg.schedule.steps {
        let lr = poly_lr(step, cfg.schedule.steps, cfg.schedule.lr, cfg.min_lr, cfg.power);
        let idx = batch_indices(data.len(), cfg.schedule.batch_size, step, cfg.seed);
        let imgs: Vec<&Image> = idx.iter().map(|&i| data[i].0).collect();
        let g = Graph::new();
        let bound = model.bind(&g, ft_trainable);
        let x = g.constant(Model::batch_tensor(&imgs)?);
        let feats = model.encoder_forward(&bound, x, false)?;
        let depth = model.depth_decoder_forward(&bound, &feats);
        let mut total: Option<Var> = None;
        for (j, &i) in idx.iter().enumerate() {
            let l = silog_var(depth.narrow(0, j, 1), data[i].1, cfg.silog_lambda, cfg.cap)?;
            total = Some(total.map_or(l, |t| t.add(l)));
        }
        let loss = total.expect("non-empty batch").scale(1.0 / idx.len() as f64);
        let v = loss.item();
        ensure_finite("finetune", step, &[("silog", v)])?;
        curve.push(step, vec![v, lr]);
        let grads = g.backward(loss);
        adam.step(&mut model.params, &bound, &grads, lr);
    }
    model.params.round_to_f32();
    let checkpoint = Checkpoint::from_model(&model, Stage::Finetune, chain, cfg.seed);
    Ok(FtOutcome { checkpoint, model, curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport<M> {
    pub id: String,
    pub metrics: M,
}

/// Per-image and aggregate metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<M> {
    pub per_image: Vec<ImageReport<M>>,
    pub aggregate: M,
}

impl<M: Serialize> EvalReport<M> {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

impl EvalReport<DepthMetrics> {
    /// `id,RMSE,delta1,...` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", DepthMetrics::COLUMNS.join(","));
        for r in self.per_image.iter().map(|r| (&r.id[..], &r.metrics)).chain([("mean", &self.aggregate)]) {
            let _ = writeln!(out, "{},{}", r.0, r.1.as_array().map(|v| format!("{v:.6}")).join(","));
        }
        out
    }
}

impl EvalReport<IbimsMetrics> {
    pub fn to_csv(&self) -> String {
        let mut out = format!("id,{}\n", IbimsMetrics::COLUMNS.join(","));
        for r in self.per_image.iter().map(|r| (&r.id[..], &r.metrics)).chain([("mean", &self.aggregate)]) {
            let _ = writeln!(out, "{},{}", r.0, r.1.as_array().map(fmt_opt).join(","));
        }
        out
    }
}

fn frame_id(s: usize, f: usize) -> String {
    format!("s{s:03}_f{f:05}")
}

/// NYU-style metrics for every labeled frame.
pub fn evaluate_depth(model: &Model, seqs: &[FrameSequence], cfg: &EvalConfig) -> Result<EvalReport<DepthMetrics>> {
    let mut per_image = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let Some(gts) = seq.gt_depths() else { continue };
        for (f, (img, gt)) in seq.frames().iter().zip(gts).enumerate() {
            let metrics = nyu_metrics(&model.predict_depth(img)?, gt, cfg)?;
            per_image.push(ImageReport { id: frame_id(s, f), metrics });
        }
    }
    let all: Vec<DepthMetrics> = per_image.iter().map(|r| r.metrics).collect();
    let aggregate = DepthMetrics::mean(&all).ok_or_else(|| MesaError::InvalidInput("evaluation set has no labeled frames".into()))?;
    Ok(EvalReport { per_image, aggregate })
}

/// IBims-style metrics; `annotations[s][f]` belongs to frame `f` of sequence `s`.
pub fn evaluate_ood(model: &Model, seqs: &[FrameSequence], annotations: &[Vec<OodAnnotations>], cfg: &EvalConfig) -> Result<EvalReport<IbimsMetrics>> {
    let mut per_image = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let Some(gts) = seq.gt_depths() else { continue };
        let ann = annotations.get(s).ok_or_else(|| MesaError::InvalidInput(format!("sequence {s} has no OOD annotations")))?;
        for (f, (img, gt)) in seq.frames().iter().zip(gts).enumerate() {
            let a = ann.get(f).ok_or_else(|| MesaError::InvalidInput(format!("frame {f} of sequence {s} has no OOD annotations")))?;
            let pred = model.predict_depth(img)?;
            let metrics = ibims_metrics(&pred, gt, &a.edge_mask(gt.depth().len()), &a.planes, &seq.intrinsics(), cfg)?;
            per_image.push(ImageReport { id: frame_id(s, f), metrics });
        }
    }
    let all: Vec<IbimsMetrics> = per_image.iter().map(|r| r.metrics).collect();
    let aggregate = IbimsMetrics::mean(&all).ok_or_else(|| MesaError::InvalidInput("evaluation set has no labeled frames".into()))?;
    Ok(EvalReport { per_image, aggregate })
}
