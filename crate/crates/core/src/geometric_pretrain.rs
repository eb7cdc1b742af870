//! Geometric pre-training: projective geometry, differentiable inverse warping,
//! SSIM, the photometric loss and the geometry-consistency loss.

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::box3_reflect;
use crate::autodiff::{Adam, Bound, Graph, Tensor, Var};
use crate::data::geometry::{rodrigues_coefficient_derivatives, rodrigues_coefficients};
use crate::data::{DepthMap, FrameSequence, Image, Intrinsics, Pose6D, SE3Transform};
use crate::error::{MesaError, Result};
use crate::networks::model::{DEPTH_DECODER, ENCODER, POSE};
use crate::networks::{Checkpoint, Model, Stage};
use crate::train::{batch_indices, ensure_finite, LossCurve, Schedule};

/// Points closer than this are never divided by.
pub const Z_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { c1: 0.01 * 0.01, c2: 0.03 * 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricParams {
    pub lambda: f64,
    #[serde(default)]
    pub ssim: SsimParams,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self { lambda: 0.15, ssim: SsimParams::default() }
    }
}

impl PhotometricParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(MesaError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.ssim.c1 > 0.0 && self.ssim.c2 > 0.0) {
            return Err(MesaError::Config("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

/// `depth(u, v) · K⁻¹ (u, v, 1)` for every pixel, row-major.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> Vec<[f64; 3]> {
    let w = depth.width();
    depth
        .depth()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            [d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d]
        })
        .collect()
}

/// Pinhole projection; points with `z ≤ Z_MIN` come back as `None`.
pub fn project(points: &[[f64; 3]], k: &Intrinsics) -> Vec<Option<([f64; 2], f64)>> {
    points
        .iter()
        .map(|p| {
            if !(p[2] > Z_MIN) || !p.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy], p[2]))
        })
        .collect()
}

/// Unit-depth rays `K⁻¹ (u, v, 1)` as a `[3, H·W]` tensor.
pub fn pixel_rays(h: usize, w: usize, k: &Intrinsics) -> Tensor {
    let p = h * w;
    let mut data = vec![1.0; 3 * p];
    for i in 0..p {
        data[i] = ((i % w) as f64 - k.cx) / k.fx;
        data[p + i] = ((i / w) as f64 - k.cy) / k.fy;
    }
    Tensor::new(&[3, p], data)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `R(ω) X + t` for `pose = [ω, t]` (`[6]`) and `points` `[3, P]`.
pub fn rigid_transform<'g>(pose: Var<'g>, points: Var<'g>) -> Var<'g> {
    let pv = pose.value();
    let xv = points.value();
    assert_eq!(pv.len(), 6, "pose must have 6 entries");
    let p = xv.shape()[1];
    let w = Vector3::new(pv.data()[0], pv.data()[1], pv.data()[2]);
    let t = Vector3::new(pv.data()[3], pv.data()[4], pv.data()[5]);
    let theta2 = w.norm_squared();
    let (a, b) = rodrigues_coefficients(theta2);
    let kx = skew(&w);
    let r = Matrix3::identity() + kx * a + kx * kx * b;
    let x = xv.data();
    let mut out = vec![0.0; 3 * p];
    for i in 0..p {
        let q = r * Vector3::new(x[i], x[p + i], x[2 * p + i]) + t;
        out[i] = q.x;
        out[p + i] = q.y;
        out[2 * p + i] = q.z;
    }
    let (pid, xid) = (pose.id(), points.id());
    let (rp, rx) = (pose.requires_grad(), points.requires_grad());
    pose.graph().push(Rc::new(Tensor::new(&[3, p], out)), &[pose, points], move |g| {
        let gd = g.data();
        let x = xv.data();
        let mut res = Vec::new();
        if rp {
            let mut gmat = Matrix3::zeros();
            let mut gt = Vector3::zeros();
            for i in 0..p {
                let gi = Vector3::new(gd[i], gd[p + i], gd[2 * p + i]);
                let xi = Vector3::new(x[i], x[p + i], x[2 * p + i]);
                gmat += gi * xi.transpose();
                gt += gi;
            }
            let (da, db) = rodrigues_coefficient_derivatives(theta2);
            let k2 = kx * kx;
            let mut gp = [0.0; 6];
            for (j, gpj) in gp.iter_mut().enumerate().take(3) {
                let mut e = Vector3::zeros();
                e[j] = 1.0;
                let ej = skew(&e);
                let dr = (kx * da + k2 * db) * (2.0 * w[j]) + ej * a + (ej * kx + kx * ej) * b;
                *gpj = gmat.component_mul(&dr).sum();
            }
            gp[3..].copy_from_slice(gt.as_slice());
            res.push((pid, Tensor::new(&[6], gp.to_vec())));
        }
        if rx {
            let rt = r.transpose();
            let mut dx = vec![0.0; 3 * p];
            for i in 0..p {
                let q = rt * Vector3::new(gd[i], gd[p + i], gd[2 * p + i]);
                dx[i] = q.x;
                dx[p + i] = q.y;
                dx[2 * p + i] = q.z;
            }
            res.push((xid, Tensor::new(&[3, p], dx)));
        }
        res
    })
}

/// Graph-level warp of `I_b` into the reference view `a`; pixels are row-major on `a`'s grid.
pub struct WarpVars<'g> {
    /// `I_a′`, `[3, H, W]`.
    pub synthesized: Var<'g>,
    /// `𝒱`: in bounds and in front of camera `b`.
    pub valid: Rc<Vec<bool>>,
    /// `D_a→b`, `[P]`; set to 1 where the point is behind the camera.
    pub projected_depth: Var<'g>,
    /// `D_b′`, `[P]`.
    pub sampled_depth: Var<'g>,
    /// Projected pixel coordinates in `b`, `[P]` each.
    pub xs: Var<'g>,
    pub ys: Var<'g>,
}

impl WarpVars<'_> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn valid_tensor(&self) -> Tensor {
        Tensor::new(&[self.valid.len()], self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
    }
}

/// `I_a′(p) = I_b⟨π(P_ab · π⁻¹(p, D_a))⟩`.
///
/// `img_b` is `[3, H, W]`, `depth_b` is `[1, H, W]`, `depth_a` has `H·W` entries, `pose` is
/// `[6]` mapping camera `a` into camera `b`.
pub fn warp_var<'g>(img_b: Var<'g>, depth_b: Var<'g>, depth_a: Var<'g>, pose: Var<'g>, k: &Intrinsics) -> Result<WarpVars<'g>> {
    let shape = img_b.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(MesaError::Shape(format!("source image must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let p = h * w;
    if depth_a.numel() != p || depth_b.numel() != p {
        return Err(MesaError::Shape(format!("depth sizes {} / {} differ from {h}x{w}", depth_a.numel(), depth_b.numel())));
    }
    let g = img_b.graph();
    let rays = g.constant(pixel_rays(h, w, k));
    let pts_a = rays.mul(depth_a.reshape(&[1, p]).expand(&[3, p]));
    let pts_b = rigid_transform(pose, pts_a);
    let z = pts_b.narrow(0, 2, 1).reshape(&[p]);
    let zv = z.value();
    let front: Vec<bool> = zv.data().iter().map(|&v| v > Z_MIN).collect();
    let keep = g.constant(Tensor::new(&[p], front.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()));
    let fill = g.constant(Tensor::new(&[p], front.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect()));
    let z_safe = z.mul(keep).add(fill);
    let xs = pts_b.narrow(0, 0, 1).reshape(&[p]).div(z_safe).scale(k.fx).add_scalar(k.cx);
    let ys = pts_b.narrow(0, 1, 1).reshape(&[p]).div(z_safe).scale(k.fy).add_scalar(k.cy);
    let (xv, yv) = (xs.value(), ys.value());
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let valid: Vec<bool> = (0..p)
        .map(|i| {
            let (x, y) = (xv.data()[i], yv.data()[i]);
            front[i] && x.is_finite() && y.is_finite() && (0.0..=wm).contains(&x) && (0.0..=hm).contains(&y)
        })
        .collect();
    let synthesized = img_b.bilinear_sample(xs, ys).reshape(&[3, h, w]);
    let sampled_depth = depth_b.reshape(&[1, h, w]).bilinear_sample(xs, ys).reshape(&[p]);
    Ok(WarpVars { synthesized, valid: Rc::new(valid), projected_depth: z_safe, sampled_depth, xs, ys })
}

/// Per-pixel SSIM `[C, H, W]` with 3×3 mean pooling and reflection padding.
pub fn ssim_var<'g>(a: Var<'g>, b: Var<'g>, params: &SsimParams) -> Var<'g> {
    let mu_a = box3_reflect(a);
    let mu_b = box3_reflect(b);
    let saa = box3_reflect(a.square()).sub(mu_a.square());
    let sbb = box3_reflect(b.square()).sub(mu_b.square());
    let sab = box3_reflect(a.mul(b)).sub(mu_a.mul(mu_b));
    let num = mu_a.mul(mu_b).scale(2.0).add_scalar(params.c1).mul(sab.scale(2.0).add_scalar(params.c2));
    let den = mu_a.square().add(mu_b.square()).add_scalar(params.c1).mul(saa.add(sbb).add_scalar(params.c2));
    num.div(den)
}

/// Per-pixel photometric error `λ·mean_c|I_a − I_a′| + (1−λ)·mean_c clamp((1−SSIM)/2)`, `[P]`.
pub fn photometric_map_var<'g>(img_a: Var<'g>, synthesized: Var<'g>, params: &PhotometricParams) -> Var<'g> {
    let shape = img_a.shape();
    let (c, p) = (shape[0], shape[1] * shape[2]);
    let l1 = img_a.sub(synthesized).abs().reshape(&[c, p]).mean_axis(0).reshape(&[p]);
    let dssim = ssim_var(img_a, synthesized, &params.ssim).neg().add_scalar(1.0).scale(0.5).clamp(0.0, 1.0);
    let dssim = dssim.reshape(&[c, p]).mean_axis(0).reshape(&[p]);
    l1.scale(params.lambda).add(dssim.scale(1.0 - params.lambda))
}

/// `L_P` averaged over `𝒱`, each pixel optionally multiplied by `weight` (`[P]`).
pub fn photometric_loss_var<'g>(
    img_a: Var<'g>,
    warp: &WarpVars<'g>,
    params: &PhotometricParams,
    weight: Option<Var<'g>>,
) -> Result<Var<'g>> {
    let n = warp.valid_count();
    if n == 0 {
        return Err(MesaError::NoValidPoints);
    }
    let mut per_pixel = photometric_map_var(img_a, warp.synthesized, params);
    if let Some(wt) = weight {
        per_pixel = per_pixel.mul(wt);
    }
    let mask = img_a.graph().constant(warp.valid_tensor());
    Ok(per_pixel.mul(mask).sum().scale(1.0 / n as f64))
}

/// `D_diff = |D_a→b − D_b′| / (D_a→b + D_b′)`, `[P]`.
pub fn depth_inconsistency_var<'g>(warp: &WarpVars<'g>) -> Var<'g> {
    let (pd, sd) = (warp.projected_depth, warp.sampled_depth);
    // outside 𝒱 the sampled depth may be zero-padded; keep the ratio finite there
    let valid = pd.graph().constant(warp.valid_tensor());
    let sd = sd.mul(valid).add(pd.mul(valid.neg().add_scalar(1.0)));
    pd.sub(sd).abs().div(pd.add(sd))
}

/// `L_G`: mean of `D_diff` over `𝒱`.
pub fn geometry_consistency_var<'g>(ddiff: Var<'g>, valid: &[bool]) -> Result<Var<'g>> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(MesaError::NoValidPoints);
    }
    let mask = ddiff.graph().constant(Tensor::new(&[valid.len()], valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
    Ok(ddiff.mul(mask).sum().scale(1.0 / n as f64))
}

/// Value-level result of [`inverse_warp`].
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub synthesized: Image,
    pub valid: Vec<bool>,
    pub projected_depth: Vec<f64>,
    pub sampled_depth: Vec<f64>,
    /// Projected coordinates of every reference pixel in the source view.
    pub coords: Vec<[f64; 2]>,
}

impl WarpResult {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn inverse_warp(img_b: &Image, depth_b: &DepthMap, depth_a: &DepthMap, pose_ab: &SE3Transform, k: &Intrinsics) -> Result<WarpResult> {
    let (h, w) = (img_b.height(), img_b.width());
    if !depth_a.same_size(depth_b) || depth_a.height() != h || depth_a.width() != w {
        return Err(MesaError::Shape("inverse_warp inputs differ in size".into()));
    }
    pose_ab.validate()?;
    let g = Graph::new();
    let warp = warp_var(
        g.constant(img_b.to_tensor()),
        g.constant(depth_b.to_tensor()),
        g.constant(depth_a.to_tensor()),
        g.constant(Tensor::new(&[6], pose_ab.to_pose6d().to_array().to_vec())),
        k,
    )?;
    if warp.valid_count() == 0 {
        return Err(MesaError::NoValidPoints);
    }
    let (xs, ys) = (warp.xs.value(), warp.ys.value());
    Ok(WarpResult {
        synthesized: Image::from_tensor(&warp.synthesized.value())?,
        valid: (*warp.valid).clone(),
        projected_depth: warp.projected_depth.value().data().to_vec(),
        sampled_depth: warp.sampled_depth.value().data().to_vec(),
        coords: xs.data().iter().zip(ys.data()).map(|(&x, &y)| [x, y]).collect(),
    })
}

/// Channel-mean per-pixel SSIM, row-major.
pub fn ssim_map(a: &Image, b: &Image, params: &SsimParams) -> Result<Vec<f64>> {
    if !a.same_size(b) {
        return Err(MesaError::Shape("ssim inputs differ in size".into()));
    }
    let g = Graph::new();
    let s = ssim_var(g.constant(a.to_tensor()), g.constant(b.to_tensor()), params).value();
    let p = a.height() * a.width();
    Ok((0..p).map(|i| (s.data()[i] + s.data()[p + i] + s.data()[2 * p + i]) / 3.0).collect())
}

fn warp_vars_from_result<'g>(g: &'g Graph, warp: &WarpResult) -> WarpVars<'g> {
    let p = warp.valid.len();
    WarpVars {
        synthesized: g.constant(warp.synthesized.to_tensor()),
        valid: Rc::new(warp.valid.clone()),
        projected_depth: g.constant(Tensor::new(&[p], warp.projected_depth.clone())),
        sampled_depth: g.constant(Tensor::new(&[p], warp.sampled_depth.clone())),
        xs: g.constant(Tensor::new(&[p], warp.coords.iter().map(|c| c[0]).collect())),
        ys: g.constant(Tensor::new(&[p], warp.coords.iter().map(|c| c[1]).collect())),
    }
}

pub fn photometric_loss(img_a: &Image, warp: &WarpResult, params: &PhotometricParams, weight: Option<&[f64]>) -> Result<f64> {
    params.validate()?;
    if !img_a.same_size(&warp.synthesized) {
        return Err(MesaError::Shape("reference image and warp differ in size".into()));
    }
    let g = Graph::new();
    let wv = warp_vars_from_result(&g, warp);
    let weight = weight.map(|wt| g.constant(Tensor::new(&[wt.len()], wt.to_vec())));
    Ok(photometric_loss_var(g.constant(img_a.to_tensor()), &wv, params, weight)?.item())
}

/// `D_diff` per pixel; zero outside `𝒱`.
pub fn depth_inconsistency(warp: &WarpResult) -> Vec<f64> {
    let g = Graph::new();
    let wv = warp_vars_from_result(&g, warp);
    let d = depth_inconsistency_var(&wv).value();
    d.data().iter().zip(&warp.valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect()
}

pub fn geometry_consistency_loss(ddiff: &[f64], valid: &[bool]) -> Result<f64> {
    if ddiff.len() != valid.len() {
        return Err(MesaError::Shape("D_diff and 𝒱 differ in length".into()));
    }
    let g = Graph::new();
    Ok(geometry_consistency_var(g.constant(Tensor::new(&[ddiff.len()], ddiff.to_vec())), valid)?.item())
}

/// Reference pixels safe for closure checks: away from the border, from depth
/// discontinuities, and from disocclusions in the source view.
///
/// A pixel qualifies when its 3×3 depth neighborhood in `a` (and the one around its
/// projection in `b`) varies by less than `smooth` in ratio, and projected and sampled
/// depths agree to within `occlusion` in `D_diff`.
pub fn interior_mask(depth_a: &DepthMap, depth_b: &DepthMap, warp: &WarpResult, smooth: f64, occlusion: f64) -> Vec<bool> {
    let (h, w) = (depth_a.height(), depth_a.width());
    let flat = |d: &DepthMap, y: usize, x: usize| {
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if !d.is_valid(yy, xx) {
                    return false;
                }
                lo = lo.min(d.at(yy, xx));
                hi = hi.max(d.at(yy, xx));
            }
        }
        hi / lo < 1.0 + smooth
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if !warp.valid[i] || y < 1 || x < 1 || y + 1 >= h || x + 1 >= w || !flat(depth_a, y, x) {
                return false;
            }
            let [u, v] = warp.coords[i];
            let (ui, vi) = (u.round() as usize, v.round() as usize);
            if ui < 1 || vi < 1 || ui + 1 >= w || vi + 1 >= h || !flat(depth_b, vi, ui) {
                return false;
            }
            let (pd, sd) = (warp.projected_depth[i], warp.sampled_depth[i]);
            (pd - sd).abs() / (pd + sd) < occlusion
        })
        .collect()
}

/// Indices `(sequence, a, b)` of consecutive pairs `b = a + stride`.
pub fn frame_pairs(seqs: &[FrameSequence], stride: usize) -> Vec<(usize, usize, usize)> {
    let stride = stride.max(1);
    seqs.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len().saturating_sub(stride)).map(move |a| (s, a, a + stride)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpConfig {
    #[serde(default)]
    pub photometric: PhotometricParams,
    pub w_g: f64,
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub pair_stride: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            photometric: PhotometricParams::default(),
            w_g: 0.5,
            schedule: Schedule { steps: 300, lr: 5e-4, batch_size: 2 },
            pair_stride: 1,
            seed: 0,
        }
    }
}

pub fn gp_trainable(name: &str) -> bool {
    name.starts_with(ENCODER) || name.starts_with(DEPTH_DECODER) || name.starts_with(POSE)
}

/// Network predictions for a batch of pairs: depths `[2B, 1, H, W]` (a's then b's) and poses `[B, 6]` both ways.
pub struct PairPredictions<'g> {
    pub depth: Var<'g>,
    pub pose_ab: Var<'g>,
    pub pose_ba: Var<'g>,
    pub images: Var<'g>,
    pub batch: usize,
}

impl<'g> PairPredictions<'g> {
    pub fn image(&self, i: usize) -> Var<'g> {
        let s = self.images.shape();
        self.images.narrow(0, i, 1).reshape(&[s[1], s[2], s[3]])
    }

    pub fn depth_map(&self, i: usize) -> Var<'g> {
        let s = self.depth.shape();
        self.depth.narrow(0, i, 1).reshape(&[1, s[2], s[3]])
    }

    pub fn pose(&self, i: usize, forward: bool) -> Var<'g> {
        let p = if forward { self.pose_ab } else { self.pose_ba };
        p.narrow(0, i, 1).reshape(&[6])
    }
}

pub fn predict_pairs<'g>(model: &Model, b: &Bound<'g>, a_imgs: &[&Image], b_imgs: &[&Image]) -> Result<PairPredictions<'g>> {
    let g = b.get("pose.fc.bias").graph();
    let all: Vec<&Image> = a_imgs.iter().chain(b_imgs).copied().collect();
    let images = g.constant(Model::batch_tensor(&all)?);
    let feats = model.encoder_forward(b, images, false)?;
    let depth = model.depth_decoder_forward(b, &feats);
    let n = a_imgs.len();
    let ia = images.narrow(0, 0, n);
    let ib = images.narrow(0, n, n);
    let pose_ab = model.pose_forward(b, ia, ib)?;
    let pose_ba = model.pose_forward(b, ib, ia)?;
    Ok(PairPredictions { depth, pose_ab, pose_ba, images, batch: n })
}

/// One direction of one pair: warp `src` into `reference`.
pub struct DirectedTerms<'g> {
    pub warp: WarpVars<'g>,
    pub l_p: Var<'g>,
    pub l_g: Var<'g>,
    pub ddiff: Var<'g>,
}

pub fn directed_terms<'g>(
    preds: &PairPredictions<'g>,
    i: usize,
    forward: bool,
    k: &Intrinsics,
    params: &PhotometricParams,
    weighted: bool,
) -> Result<DirectedTerms<'g>> {
    let n = preds.batch;
    let (ri, si) = if forward { (i, n + i) } else { (n + i, i) };
    let warp = warp_var(preds.image(si), preds.depth_map(si), preds.depth_map(ri), preds.pose(i, forward), k)?;
    let ddiff = depth_inconsistency_var(&warp);
    let weight = weighted.then(|| ddiff.neg().add_scalar(1.0));
    let l_p = photometric_loss_var(preds.image(ri), &warp, params, weight)?;
    let l_g = geometry_consistency_var(ddiff, &warp.valid)?;
    Ok(DirectedTerms { warp, l_p, l_g, ddiff })
}

pub struct GpOutcome {
    pub checkpoint: Checkpoint,
    pub model: Model,
    pub curve: LossCurve,
    pub val_start: f64,
    pub val_end: f64,
}

type PairRef<'a> = (&'a Image, &'a Image, Intrinsics);

fn pair_refs<'a>(seqs: &'a [FrameSequence], pairs: &[(usize, usize, usize)]) -> Vec<PairRef<'a>> {
    pairs.iter().map(|&(s, a, b)| (&seqs[s].frames()[a], &seqs[s].frames()[b], seqs[s].intrinsics())).collect()
}

/// Mean unweighted photometric loss over held-out pairs (both directions).
pub fn validation_photometric(model: &Model, seqs: &[FrameSequence], stride: usize, params: &PhotometricParams) -> Result<f64> {
    let pairs = frame_pairs(seqs, stride);
    if pairs.is_empty() {
        return Err(MesaError::InvalidInput("validation set has no frame pairs".into()));
    }
    let mut total = 0.0;
    for (a, b, k) in pair_refs(seqs, &pairs) {
        let g = Graph::new();
        let bound = model.bind(&g, |_| false);
        let preds = predict_pairs(model, &bound, &[a], &[b])?;
        for fwd in [true, false] {
            total += directed_terms(&preds, 0, fwd, &k, params, false)?.l_p.item();
        }
    }
    Ok(total / (2 * pairs.len()) as f64)
}

/// Joint depth + pose training with `L_P + w_G·L_G` on both pair directions.
pub fn run_gp_stage(cfg: &GpConfig, init: Option<Checkpoint>, model_cfg: &crate::networks::ModelConfig, train: &[FrameSequence], val: &[FrameSequence], force: bool) -> Result<GpOutcome> {
    cfg.schedule.validate("gp")?;
    cfg.photometric.validate()?;
    let (mut model, chain) = match init {
        Some(ck) => {
            if !matches!(ck.meta.stage, Stage::Mp | Stage::Gp) {
                return Err(MesaError::Pipeline(format!("gp stage cannot start from a {} checkpoint", ck.meta.stage)));
            }
            let chain = ck.meta.chain.clone();
            (ck.into_model(model_cfg, Stage::Gp, cfg.seed, force)?, chain)
        }
        None => (Model::new(model_cfg.clone(), cfg.seed), vec![]),
    };
    let pairs = frame_pairs(train, cfg.pair_stride);
    if pairs.is_empty() {
        return Err(MesaError::InvalidInput("gp stage needs at least one frame pair".into()));
    }
    let refs = pair_refs(train, &pairs);
    let val_set = if val.is_empty() { train } else { val };
    let val_start = validation_photometric(&model, val_set, cfg.pair_stride, &cfg.photometric)?;
    let mut curve = LossCurve::new(&["L_P", "L_G"]);
    let mut adam = Adam::new();
    for step in 0..cfg.schedule.steps {
        let idx = batch_indices(refs.len(), cfg.schedule.batch_size, step, cfg.seed);
        let a_imgs: Vec<&Image> = idx.iter().map(|&i| refs[i].0).collect();
        let b_imgs: Vec<&Image> = idx.iter().map(|&i| refs[i].1).collect();
        let g = Graph::new();
        let bound = model.bind(&g, gp_trainable);
        let preds = predict_pairs(&model, &bound, &a_imgs, &b_imgs)?;
        let mut lp_sum: Option<Var> = None;
        let mut lg_sum: Option<Var> = None;
        for (j, &i) in idx.iter().enumerate() {
            for fwd in [true, false] {
                let t = directed_terms(&preds, j, fwd, &refs[i].2, &cfg.photometric, false)?;
                lp_sum = Some(lp_sum.map_or(t.l_p, |s| s.add(t.l_p)));
                lg_sum = Some(lg_sum.map_or(t.l_g, |s| s.add(t.l_g)));
            }
        }
        let norm = 1.0 / (2 * idx.len()) as f64;
        let lp = lp_sum.expect("non-empty batch").scale(norm);
        let lg = lg_sum.expect("non-empty batch").scale(norm);
        let (lpv, lgv) = (lp.item(), lg.item());
        ensure_finite("gp", step, &[("L_P", lpv), ("L_G", lgv)])?;
        curve.push(step, vec![lpv, lgv]);
        let loss = lp.add(lg.scale(cfg.w_g));
        let grads = g.backward(loss);
        adam.step(&mut model.params, &bound, &grads, cfg.schedule.lr);
    }
    model.params.round_to_f32();
    let val_end = validation_photometric(&model, val_set, cfg.pair_stride, &cfg.photometric)?;
    log::info!("gp: validation photometric {val_start:.4} -> {val_end:.4}");
    let checkpoint = Checkpoint::from_model(&model, Stage::Gp, chain, cfg.seed);
    Ok(GpOutcome { checkpoint, model, curve, val_start, val_end })
}

/// Convenience: relative pose `a → b` from ground truth as a [`Pose6D`].
pub fn pose6d_between(seq: &FrameSequence, a: usize, b: usize) -> Option<Pose6D> {
    seq.relative_pose(a, b).map(|t| t.to_pose6d())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_sequence, SceneSpec};

    fn k100(w: usize, h: usize) -> Intrinsics {
        Intrinsics { fx: 100.0, fy: 100.0, cx: (w as f64 - 1.0) / 2.0, cy: (h as f64 - 1.0) / 2.0 }
    }

    #[test]
    fn backproject_and_project_pinhole_cases() {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 40.0 };
        let mut d = vec![1.0; 101 * 81];
        d[40 * 101 + 50] = 2.0;
        let depth = DepthMap::dense(81, 101, d).unwrap();
        let pts = backproject(&depth, &k);
        assert_eq!(pts[40 * 101 + 50], [0.0, 0.0, 2.0]);
        let p = pts[40 * 101 + 100];
        assert!((p[0] - 0.5).abs() < 1e-15 && p[1] == 0.0 && p[2] == 1.0);
        let proj = project(&[[0.0, 0.0, 2.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]], &k);
        assert_eq!(proj[0], Some(([50.0, 40.0], 2.0)));
        assert_eq!(proj[1], Some(([150.0, 40.0], 1.0)));
        assert_eq!(proj[2], None);
        for (i, q) in project(&pts, &k).iter().enumerate() {
            let ([u, v], _) = q.unwrap();
            assert!((u - (i % 101) as f64).abs() < 1e-6 && (v - (i / 101) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_reproduces_source_bitwise() {
        let seq = generate_synthetic_sequence(&SceneSpec::random_room(3, 24, 16, 2)).unwrap();
        let (ib, db) = (&seq.frames()[1], &seq.gt_depths().unwrap()[1]);
        let da = &seq.gt_depths().unwrap()[0];
        let r = inverse_warp(ib, db, da, &SE3Transform::identity(), &seq.intrinsics()).unwrap();
        assert_eq!(r.synthesized, *ib);
        assert!(r.valid.iter().all(|&v| v));
        assert_eq!(photometric_loss(ib, &r, &PhotometricParams::default(), None).unwrap(), 0.0);
    }

    #[test]
    fn translation_shifts_plane_by_five_pixels() {
        let (w, h) = (32, 16);
        let k = k100(w, h);
        let depth = DepthMap::constant(h, w, 2.0).unwrap();
        let img = Image::filled(h, w, [0.5; 3]);
        let r = inverse_warp(&img, &depth, &depth, &SE3Transform::from_translation([-0.1, 0.0, 0.0]), &k).unwrap();
        for i in 0..h * w {
            let x = (i % w) as f64;
            assert!((r.coords[i][0] - (x - 5.0)).abs() < 1e-9);
            assert_eq!(r.valid[i], x >= 5.0);
            assert!(r.valid[i] || x < 5.0);
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let p = SsimParams::default();
        let a = Image::filled(5, 5, [0.3; 3]);
        let b = Image::filled(5, 5, [0.7; 3]);
        let want = (2.0 * 0.3 * 0.7 + p.c1) / (0.3f64 * 0.3 + 0.7 * 0.7 + p.c1);
        for s in ssim_map(&a, &b, &p).unwrap() {
            assert!((s - want).abs() < 1e-12);
        }
        let seq = generate_synthetic_sequence(&SceneSpec::random_room(1, 16, 16, 2)).unwrap();
        for s in ssim_map(&seq.frames()[0], &seq.frames()[0], &p).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_inconsistency_hand_value() {
        let warp = WarpResult {
            synthesized: Image::filled(1, 3, [0.0; 3]),
            valid: vec![true, true, false],
            projected_depth: vec![2.0, 1.5, 3.0],
            sampled_depth: vec![1.0, 1.5, 0.0],
            coords: vec![[0.0, 0.0]; 3],
        };
        let d = depth_inconsistency(&warp);
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d[1], 0.0);
        assert_eq!(geometry_consistency_loss(&[0.2, 0.4, 0.9], &[true, true, false]).unwrap(), 0.30000000000000004);
        assert!(matches!(geometry_consistency_loss(&[0.2], &[false]), Err(MesaError::NoValidPoints)));
    }

    #[test]
    fn rigid_transform_matches_se3() {
        let pose = Pose6D { rotation: [0.1, -0.2, 0.3], translation: [0.5, -0.1, 0.2] };
        let t = SE3Transform::from_pose6d(&pose).unwrap();
        let g = Graph::new();
        let pts = g.constant(Tensor::new(&[3, 2], vec![1.0, -1.0, 2.0, 0.5, 3.0, 1.5]));
        let out = rigid_transform(g.constant(Tensor::new(&[6], pose.to_array().to_vec())), pts).value();
        for i in 0..2 {
            let x = Vector3::new([1.0, -1.0][i], [2.0, 0.5][i], [3.0, 1.5][i]);
            let q = t.apply(&x);
            for c in 0..3 {
                assert!((out.data()[c * 2 + i] - q[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rigid_transform_pose_gradient_matches_fd() {
        let g = Graph::new();
        let base = vec![0.2, -0.1, 0.3, 0.05, 0.0, -0.02];
        let pts = Tensor::new(&[3, 3], vec![1.0, -0.5, 0.3, 0.2, 1.0, -0.7, 2.0, 3.0, 1.5]);
        let wts = Tensor::new(&[3, 3], vec![0.3, -1.0, 0.5, 0.7, 0.2, -0.4, 1.1, 0.6, -0.9]);
        let f = |p: &[f64]| {
            let g = Graph::new();
            let o = rigid_transform(g.constant(Tensor::new(&[6], p.to_vec())), g.constant(pts.clone()));
            o.mul(g.constant(wts.clone())).sum().item()
        };
        let pose = g.leaf(Tensor::new(&[6], base.clone()));
        let o = rigid_transform(pose, g.constant(pts.clone()));
        let grads = g.backward(o.mul(g.constant(wts.clone())).sum()).wrt(pose);
        for j in 0..6 {
            let (mut hi, mut lo) = (base.clone(), base.clone());
            hi[j] += 1e-6;
            lo[j] -= 1e-6;
            let fd = (f(&hi) - f(&lo)) / 2e-6;
            assert!((fd - grads.data()[j]).abs() < 1e-7, "{j}: {fd} vs {}", grads.data()[j]);
        }
    }
}
