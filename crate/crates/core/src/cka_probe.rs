//! Layer-wise representation analysis: probe activations, linear CKA, similarity
//! matrices, profiles, and heatmaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::Image;
use crate::error::{IoContext, MesaError, Result};
use crate::networks::{Checkpoint, Model, PROBE_IDS};

/// Layer names of the Swin-v2-L backbone probed in the original analysis.
pub const SWIN_V2_L_LAYERS: [&str; 9] = [
    "layers.0.downsample.norm",
    "layers.1.downsample.norm",
    "layers.2.blocks.3.norm1",
    "layers.2.blocks.6.norm1",
    "layers.2.blocks.9.norm1",
    "layers.2.blocks.12.norm1",
    "layers.2.blocks.15.norm1",
    "layers.2.downsample.norm",
    "norm3",
];

/// Ordered `(identifier, model-layer name)` pairs, `layer0`..`layer8`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct ProbeRegistry {
    entries: Vec<(String, String)>,
}

impl TryFrom<Vec<(String, String)>> for ProbeRegistry {
    type Error = MesaError;

    fn try_from(entries: Vec<(String, String)>) -> Result<Self> {
        if entries.len() != PROBE_IDS.len() || entries.iter().zip(PROBE_IDS).any(|((id, _), want)| id != want) {
            return Err(MesaError::Config(format!("a probe registry lists exactly {} entries named layer0..layer8", PROBE_IDS.len())));
        }
        Ok(Self { entries })
    }
}

impl From<ProbeRegistry> for Vec<(String, String)> {
    fn from(r: ProbeRegistry) -> Self {
        r.entries
    }
}

impl ProbeRegistry {
    pub fn new(layers: &[&str]) -> Result<Self> {
        Self::try_from(PROBE_IDS.iter().zip(layers).map(|(i, l)| (i.to_string(), l.to_string())).collect::<Vec<_>>())
    }

    /// The probe layers a model was configured with.
    pub fn for_model(model: &Model) -> Result<Self> {
        let layers: Vec<&str> = model.config.encoder.probe_layers.iter().map(String::as_str).collect();
        Self::new(&layers)
    }

    pub fn swin_v2_large() -> Self {
        Self::new(&SWIN_V2_L_LAYERS).expect("nine entries")
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).at(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }
}

/// Which pixels feed the activation matrices; rows follow `positions` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub image_ids: Vec<String>,
    /// `(image index, y, x)` in input-pixel coordinates.
    pub positions: Vec<(usize, usize, usize)>,
    pub seed: u64,
}

impl SampleManifest {
    /// `tokens_per_image` distinct pixels per image, drawn uniformly with `seed`.
    pub fn sample(image_ids: Vec<String>, height: usize, width: usize, tokens_per_image: usize, seed: u64) -> Result<Self> {
        if tokens_per_image == 0 || tokens_per_image > height * width {
            return Err(MesaError::InvalidInput(format!("cannot draw {tokens_per_image} positions from a {height}x{width} image")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(image_ids.len() * tokens_per_image);
        for n in 0..image_ids.len() {
            let mut picks = sample(&mut rng, height * width, tokens_per_image).into_vec();
            picks.sort_unstable();
            positions.extend(picks.into_iter().map(|p| (n, p / width, p % width)));
        }
        Ok(Self { image_ids, positions, seed })
    }
}

/// Activation matrices (rows: sampled positions, cols: channels) in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub probes: Vec<(String, DMatrix<f64>)>,
    pub manifest: SampleManifest,
    /// Content hash of the source checkpoint, if any.
    pub source: Option<String>,
}

impl ActivationSet {
    pub fn get(&self, id: &str) -> Option<&DMatrix<f64>> {
        self.probes.iter().find(|(p, _)| p == id).map(|(_, m)| m)
    }

    pub fn ids(&self) -> Vec<String> {
        self.probes.iter().map(|(p, _)| p.clone()).collect()
    }
}

pub fn checkpoint_hash(ck: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(ck.to_bytes()?)))
}

/// The checkpoint's weights as a model, heads included.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let stage = ck.meta.stage;
    ck.clone().into_model(&ck.meta.config, stage, ck.meta.seed, false)
}

/// Forward passes with probing; each row is the feature vector of the cell containing a sampled pixel.
///
/// Pass the manifest of an earlier set to compare the same inputs.
pub fn collect_activations(
    model: &Model,
    registry: &ProbeRegistry,
    images: &[(String, &Image)],
    tokens_per_image: usize,
    seed: u64,
    manifest: Option<&SampleManifest>,
) -> Result<ActivationSet> {
    let Some((_, first)) = images.first() else {
        return Err(MesaError::InvalidInput("activation collection needs at least one image".into()));
    };
    let (h, w) = (first.height(), first.width());
    let ids: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    let manifest = match manifest {
        Some(m) => {
            if m.image_ids != ids {
                return Err(MesaError::ManifestMismatch);
            }
            m.clone()
        }
        None => SampleManifest::sample(ids, h, w, tokens_per_image, seed)?,
    };
    let available = model.config.encoder.probe_points();
    for (_, layer) in registry.entries() {
        if !available.contains(layer) {
            return Err(MesaError::MissingProbe { name: layer.clone(), available });
        }
    }
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(manifest.positions.len()); registry.entries().len()];
    for (n, (_, img)) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(MesaError::Shape("activation images must share one size".into()));
        }
        let g = Graph::new();
        let b = model.bind(&g, |_| false);
        let x = g.constant(Model::batch_tensor(&[img])?);
        let out = model.encoder_forward(&b, x, true)?;
        let captured = out.probes.expect("probing requested");
        for (slot, (_, layer)) in registry.entries().iter().enumerate() {
            let t = captured[layer].value();
            let (_, c, fh, fw) = t.dims4();
            let stride = h / fh;
            for &(_, y, x) in manifest.positions.iter().filter(|p| p.0 == n) {
                let (fy, fx) = ((y / stride).min(fh - 1), (x / stride).min(fw - 1));
                rows[slot].push((0..c).map(|ch| t.data()[(ch * fh + fy) * fw + fx]).collect());
            }
        }
    }
    let mut probes = Vec::new();
    for ((id, _), r) in registry.entries().iter().zip(rows) {
        let cols = r.first().map_or(0, Vec::len);
        if r.len() < 2 * cols {
            return Err(MesaError::InvalidInput(format!("{id}: {} rows for {cols} channels; sample at least twice as many positions", r.len())));
        }
        probes.push((id.clone(), DMatrix::from_row_iterator(r.len(), cols, r.into_iter().flatten())));
    }
    Ok(ActivationSet { probes, manifest, source: None })
}

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    c
}

/// `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F ‖Yᶜᵀ Yᶜ‖_F)` with column-centered inputs.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() || x.nrows() < 2 {
        return Err(MesaError::Shape(format!("CKA needs equal row counts of at least 2, got {} and {}", x.nrows(), y.nrows())));
    }
    let (xc, yc) = (centered(x), centered(y));
    let xx = (xc.transpose() * &xc).norm();
    let yy = (yc.transpose() * &yc).norm();
    if xx == 0.0 {
        return Err(MesaError::DegenerateActivations("first argument".into()));
    }
    if yy == 0.0 {
        return Err(MesaError::DegenerateActivations("second argument".into()));
    }
    Ok((yc.transpose() * &xc).norm_squared() / (xx * yy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub row_label: String,
    pub col_label: String,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn check_range(&self) -> Result<()> {
        const TOL: f64 = 1e-6;
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(v >= -TOL && v <= 1.0 + TOL) {
                    return Err(MesaError::Invariant(format!("similarity ({i}, {j}) = {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\\{},{}\n", self.row_label, self.col_label, self.col_ids.join(","));
        for (id, row) in self.row_ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                out.push_str(&format!(",{v:.8}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Entry `(i, j)` is the CKA of probe `i` of `a` with probe `j` of `b`.
pub fn similarity_matrix(a: &ActivationSet, b: &ActivationSet, row_label: &str, col_label: &str) -> Result<SimilarityMatrix> {
    if a.manifest != b.manifest {
        return Err(MesaError::ManifestMismatch);
    }
    let values = a
        .probes
        .iter()
        .map(|(ia, xa)| {
            b.probes
                .iter()
                .map(|(ib, xb)| linear_cka(xa, xb).map_err(|e| match e {
                    MesaError::DegenerateActivations(w) => {
                        MesaError::DegenerateActivations(format!("{} ({ia} vs {ib})", w))
                    }
                    e => e,
                }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix { values, row_label: row_label.into(), col_label: col_label.into(), row_ids: a.ids(), col_ids: b.ids() })
}

pub fn first_row_profile(m: &SimilarityMatrix) -> Vec<f64> {
    m.values.first().cloned().unwrap_or_default()
}

pub fn diagonal_profile(m: &SimilarityMatrix) -> Vec<f64> {
    (0..m.size()).map(|i| m.values[i][i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UShape {
    pub min_index: usize,
    pub depth: f64,
    pub is_u_shaped: bool,
}

/// Interior minimum at least 0.05 below both ends counts as a U.
pub fn u_shape_score(profile: &[f64]) -> UShape {
    let n = profile.len();
    if n == 0 {
        return UShape { min_index: 0, depth: 0.0, is_u_shaped: false };
    }
    let min_index = profile.iter().enumerate().fold(0, |best, (i, &v)| if v < profile[best] { i } else { best });
    let depth = profile[0].min(profile[n - 1]) - profile[min_index];
    let is_u_shaped = min_index >= 1 && min_index + 2 <= n && depth > 0.05;
    UShape { min_index, depth, is_u_shaped }
}

const GLYPHS: &[(char, [&str; 5])] = &[
    ('0', ["###", "#.#", "#.#", "#.#", "###"]),
    ('1', [".#.", "##.", ".#.", ".#.", "###"]),
    ('2', ["###", "..#", "###", "#..", "###"]),
    ('3', ["###", "..#", "###", "..#", "###"]),
    ('4', ["#.#", "#.#", "###", "..#", "..#"]),
    ('5', ["###", "#..", "###", "..#", "###"]),
    ('6', ["###", "#..", "###", "#.#", "###"]),
    ('7', ["###", "..#", "..#", "..#", "..#"]),
    ('8', ["###", "#.#", "###", "#.#", "###"]),
    ('9', ["###", "#.#", "###", "..#", "###"]),
    ('.', ["...", "...", "...", "...", ".#."]),
    ('-', ["...", "...", "###", "...", "..."]),
    ('_', ["...", "...", "...", "...", "###"]),
    (':', ["...", ".#.", "...", ".#.", "..."]),
    ('/', ["..#", "..#", ".#.", "#..", "#.."]),
    ('(', [".#.", "#..", "#..", "#..", ".#."]),
    (')', [".#.", "..#", "..#", "..#", ".#."]),
    ('+', ["...", ".#.", "###", ".#.", "..."]),
    ('A', [".#.", "#.#", "###", "#.#", "#.#"]),
    ('B', ["##.", "#.#", "##.", "#.#", "##."]),
    ('C', [".##", "#..", "#..", "#..", ".##"]),
    ('D', ["##.", "#.#", "#.#", "#.#", "##."]),
    ('E', ["###", "#..", "##.", "#..", "###"]),
    ('F', ["###", "#..", "##.", "#..", "#.."]),
    ('G', [".##", "#..", "#.#", "#.#", ".##"]),
    ('H', ["#.#", "#.#", "###", "#.#", "#.#"]),
    ('I', ["###", ".#.", ".#.", ".#.", "###"]),
    ('J', ["..#", "..#", "..#", "#.#", ".#."]),
    ('K', ["#.#", "#.#", "##.", "#.#", "#.#"]),
    ('L', ["#..", "#..", "#..", "#..", "###"]),
    ('M', ["#.#", "###", "###", "#.#", "#.#"]),
    ('N', ["##.", "#.#", "#.#", "#.#", "#.#"]),
    ('O', [".#.", "#.#", "#.#", "#.#", ".#."]),
    ('P', ["##.", "#.#", "##.", "#..", "#.."]),
    ('Q', [".#.", "#.#", "#.#", "##.", ".##"]),
    ('R', ["##.", "#.#", "##.", "#.#", "#.#"]),
    ('S', [".##", "#..", ".#.", "..#", "##."]),
    ('T', ["###", ".#.", ".#.", ".#.", ".#."]),
    ('U', ["#.#", "#.#", "#.#", "#.#", "###"]),
    ('V', ["#.#", "#.#", "#.#", "#.#", ".#."]),
    ('W', ["#.#", "#.#", "###", "###", "#.#"]),
    ('X', ["#.#", "#.#", ".#.", "#.#", "#.#"]),
    ('Y', ["#.#", "#.#", ".#.", ".#.", ".#."]),
    ('Z', ["###", "..#", ".#.", "#..", "###"]),
];

const FONT_SCALE: u32 = 2;
const CELL: u32 = 40;
const MARGIN_LEFT: u32 = 36;
const MARGIN_TOP: u32 = 44;
const MARGIN: u32 = 8;

fn text_width(s: &str) -> u32 {
    (s.chars().count() as u32 * 4).saturating_sub(1) * FONT_SCALE
}

fn draw_text(img: &mut RgbImage, s: &str, x0: u32, y0: u32, color: Rgb<u8>) {
    for (n, ch) in s.chars().enumerate() {
        let ch = ch.to_ascii_uppercase();
        let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) else { continue };
        for (ry, row) in rows.iter().enumerate() {
            for (rx, px) in row.bytes().enumerate() {
                if px != b'#' {
                    continue;
                }
                for dy in 0..FONT_SCALE {
                    for dx in 0..FONT_SCALE {
                        let x = x0 + (n as u32 * 4 + rx as u32) * FONT_SCALE + dx;
                        let y = y0 + ry as u32 * FONT_SCALE + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// Dark blue at 0 through teal to pale yellow at 1.
pub fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 4] = [(0.0, [20.0, 24.0, 82.0]), (0.4, [33.0, 120.0, 140.0]), (0.75, [120.0, 200.0, 110.0]), (1.0, [252.0, 250.0, 205.0])];
    let v = v.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|(t, _)| *t <= v).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let f = (v - t0) / (t1 - t0);
    Rgb([0, 1, 2].map(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8))
}

/// Heatmap PNG: one annotated cell per entry, light = high, layer indices on both axes.
pub fn render_heatmap(m: &SimilarityMatrix, path: &Path) -> Result<()> {
    m.check_range()?;
    let n = m.size() as u32;
    let (w, h) = (MARGIN_LEFT + n * CELL + MARGIN, MARGIN_TOP + n * CELL + MARGIN);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    draw_text(&mut img, &format!("ROWS {}  COLS {}", m.row_label, m.col_label), MARGIN, MARGIN, black);
    for i in 0..n {
        let label = format!("L{i}");
        let cx = MARGIN_LEFT + i * CELL + (CELL - text_width(&label)) / 2;
        draw_text(&mut img, &label, cx, MARGIN_TOP - 14, black);
        draw_text(&mut img, &label, MARGIN, MARGIN_TOP + i * CELL + (CELL - 10) / 2, black);
    }
    for (i, row) in m.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let color = colormap(v);
            let (x0, y0) = (MARGIN_LEFT + j as u32 * CELL, MARGIN_TOP + i as u32 * CELL);
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    img.put_pixel(x, y, color);
                }
            }
            let text = format!("{:.2}", v.clamp(0.0, 1.0));
            let ink = if v > 0.55 { black } else { Rgb([255, 255, 255]) };
            draw_text(&mut img, &text, x0 + (CELL - text_width(&text)) / 2, y0 + (CELL - 10) / 2, ink);
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    img.save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DumpHeader {
    probes: Vec<(String, Vec<usize>)>,
    manifest: SampleManifest,
    seed: u64,
    checkpoint: Option<String>,
}

/// Writes `<stem>.safetensors` (f64 matrices) and `<stem>.json` (probe shapes, manifest, seed, checkpoint hash).
pub fn save_activations(set: &ActivationSet, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).at(dir)?;
    let raw: Vec<(String, Vec<u8>, Vec<usize>)> = set
        .probes
        .iter()
        .map(|(id, m)| {
            let bytes = m.transpose().iter().flat_map(|v| v.to_le_bytes()).collect();
            (id.clone(), bytes, vec![m.nrows(), m.ncols()])
        })
        .collect();
    let views = raw
        .iter()
        .map(|(id, b, s)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (id.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| MesaError::Checkpoint(e.to_string()))?;
    let bin = dir.join(format!("{stem}.safetensors"));
    let bytes = safetensors::serialize(views, &None).map_err(|e| MesaError::Checkpoint(e.to_string()))?;
    fs::write(&bin, bytes).at(&bin)?;
    let header = DumpHeader {
        probes: set.probes.iter().map(|(id, m)| (id.clone(), vec![m.nrows(), m.ncols()])).collect(),
        manifest: set.manifest.clone(),
        seed: set.manifest.seed,
        checkpoint: set.source.clone(),
    };
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&header)?).at(&json)?;
    Ok((bin, json))
}

pub fn load_activations(dir: &Path, stem: &str) -> Result<ActivationSet> {
    let json = dir.join(format!("{stem}.json"));
    let header: DumpHeader = serde_json::from_str(&fs::read_to_string(&json).at(&json)?)?;
    let bin = dir.join(format!("{stem}.safetensors"));
    let bytes = fs::read(&bin).at(&bin)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| MesaError::Checkpoint(e.to_string()))?;
    let mut probes = Vec::new();
    for (id, shape) in &header.probes {
        let view = st.tensor(id).map_err(|e| MesaError::Checkpoint(e.to_string()))?;
        if view.dtype() != Dtype::F64 || view.shape() != shape.as_slice() {
            return Err(MesaError::Checkpoint(format!("{id}: dump does not match its manifest")));
        }
        let vals = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        probes.push((id.clone(), DMatrix::from_row_iterator(shape[0], shape[1], vals)));
    }
    Ok(ActivationSet { probes, manifest: header.manifest, source: header.checkpoint })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaSettings {
    pub n_images: usize,
    pub tokens_per_image: usize,
    pub seed: u64,
}

impl Default for CkaSettings {
    fn default() -> Self {
        Self { n_images: 128, tokens_per_image: 64, seed: 0 }
    }
}

/// Everything `analyze-cka` emits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub pre_pre: SimilarityMatrix,
    pub pre_ft: SimilarityMatrix,
    pub first_row: Vec<f64>,
    pub diagonal: Vec<f64>,
    pub u_shape: UShape,
    pub files: BTreeMap<String, PathBuf>,
}

/// Compares checkpoint `a` with itself and with `b` on the same sampled inputs.
pub fn analyze_cka(a: &Checkpoint, b: &Checkpoint, images: &[(String, &Image)], settings: &CkaSettings, out: &Path) -> Result<CkaReport> {
    let images = &images[..images.len().min(settings.n_images)];
    let (ma, mb) = (model_from_checkpoint(a)?, model_from_checkpoint(b)?);
    let registry = ProbeRegistry::for_model(&ma)?;
    let mut acts_a = collect_activations(&ma, &registry, images, settings.tokens_per_image, settings.seed, None)?;
    acts_a.source = Some(checkpoint_hash(a)?);
    let mut acts_b = collect_activations(&mb, &registry, images, settings.tokens_per_image, settings.seed, Some(&acts_a.manifest))?;
    acts_b.source = Some(checkpoint_hash(b)?);
    let (la, lb) = (a.meta.stage.to_string(), b.meta.stage.to_string());
    let pre_pre = similarity_matrix(&acts_a, &acts_a, &la, &la)?;
    let pre_ft = similarity_matrix(&acts_a, &acts_b, &la, &lb)?;
    let first_row = first_row_profile(&pre_pre);
    let diagonal = diagonal_profile(&pre_ft);
    let u_shape = u_shape_score(&first_row);
    let mut files = BTreeMap::new();
    let (bin, json) = save_activations(&acts_a, out, "activations_a")?;
    files.insert("activations_a".into(), bin);
    files.insert("activations_a_manifest".into(), json);
    let (bin, json) = save_activations(&acts_b, out, "activations_b")?;
    files.insert("activations_b".into(), bin);
    files.insert("activations_b_manifest".into(), json);
    for (name, m) in [("pre_pre", &pre_pre), ("pre_ft", &pre_ft)] {
        let png = out.join(format!("{name}.png"));
        render_heatmap(m, &png)?;
        let csv = out.join(format!("{name}.csv"));
        fs::write(&csv, m.to_csv()).at(&csv)?;
        files.insert(format!("{name}_heatmap"), png);
        files.insert(format!("{name}_csv"), csv);
    }
    let report = CkaReport { pre_pre, pre_ft, first_row, diagonal, u_shape, files };
    let path = out.join("cka_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).at(&path)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    /// Centered-Gram HSIC: `tr(Kc Lc) / sqrt(tr(Kc Kc) tr(Lc Lc))`.
    fn gram_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        let n = x.nrows();
        let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let kc = &h * (x * x.transpose()) * &h;
        let lc = &h * (y * y.transpose()) * &h;
        (&kc * &lc).trace() / ((&kc * &kc).trace() * (&lc * &lc).trace()).sqrt()
    }

    fn orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
        gaussian(n, n, seed).qr().q()
    }

    fn set(probes: Vec<(String, DMatrix<f64>)>) -> ActivationSet {
        let rows = probes[0].1.nrows();
        let manifest = SampleManifest { image_ids: vec!["a".into()], positions: (0..rows).map(|r| (0, r, 0)).collect(), seed: 0 };
        ActivationSet { probes, manifest, source: None }
    }

    #[test]
    fn cka_basic_invariances() {
        let x = gaussian(40, 6, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = &x * orthogonal(6, 2) * -3.5;
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-9);
        let constant = DMatrix::from_element(40, 3, 2.0);
        assert!(matches!(linear_cka(&x, &constant), Err(MesaError::DegenerateActivations(_))));
        assert!(linear_cka(&x, &gaussian(39, 6, 3)).is_err());
    }

    #[test]
    fn u_shape_cases() {
        let u = u_shape_score(&[1.0, 0.8, 0.5, 0.3, 0.2, 0.3, 0.5, 0.7, 0.9]);
        assert_eq!(u.min_index, 4);
        assert!((u.depth - 0.7).abs() < 1e-12 && u.is_u_shaped);
        let down = u_shape_score(&[1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]);
        assert!(!down.is_u_shaped && down.min_index == 8);
        let flat = u_shape_score(&[1.0; 9]);
        assert!(!flat.is_u_shaped && flat.depth == 0.0);
    }

    #[test]
    fn two_probe_matrix_is_four_cka_calls() {
        let a = set(vec![("layer0".into(), gaussian(30, 3, 1)), ("layer1".into(), gaussian(30, 4, 2))]);
        let b = set(vec![("layer0".into(), gaussian(30, 5, 3)), ("layer1".into(), gaussian(30, 2, 4))]);
        let m = similarity_matrix(&a, &b, "a", "b").unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.values[i][j], linear_cka(&a.probes[i].1, &b.probes[j].1).unwrap());
            }
        }
    }

    #[test]
    fn permuting_layers_permutes_rows() {
        let mats: Vec<_> = (0..3).map(|i| (format!("layer{i}"), gaussian(25, 3, i))).collect();
        let a = set(mats.clone());
        let p = set(vec![mats[2].clone(), mats[0].clone(), mats[1].clone()]);
        let (ma, mp) = (similarity_matrix(&a, &a, "a", "a").unwrap(), similarity_matrix(&p, &a, "p", "a").unwrap());
        assert_eq!(mp.values[0], ma.values[2]);
        assert_eq!(mp.values[1], ma.values[0]);
    }

    #[test]
    fn manifest_mismatch_is_refused() {
        let a = set(vec![("layer0".into(), gaussian(10, 2, 1))]);
        let mut b = a.clone();
        b.manifest.seed = 1;
        assert!(matches!(similarity_matrix(&a, &b, "a", "b"), Err(MesaError::ManifestMismatch)));
    }

    #[test]
    fn constructed_u_profile_dips_then_rises() {
        let base = gaussian(400, 8, 0);
        let angles = [0.0, 0.4, 0.8, 1.1, 1.3, 1.1, 0.8, 0.5, 0.2];
        let probes = angles
            .iter()
            .enumerate()
            .map(|(i, &a): (usize, &f64)| (format!("layer{i}"), &base * a.cos() + gaussian(400, 8, 100 + i as u64) * a.sin()))
            .collect();
        let s = set(probes);
        let row = first_row_profile(&similarity_matrix(&s, &s, "a", "a").unwrap());
        assert!((row[0] - 1.0).abs() < 1e-12);
        let u = u_shape_score(&row);
        assert!(u.is_u_shaped && u.min_index == 4, "{row:?}");
    }

    #[test]
    fn replaced_layer_is_detected_on_the_diagonal() {
        let probes: Vec<_> = (0..9).map(|i| (format!("layer{i}"), gaussian(512, 16, i))).collect();
        let pre = set(probes.clone());
        let mut ft = probes;
        ft[8].1 = gaussian(512, 16, 999);
        let d = diagonal_profile(&similarity_matrix(&pre, &set(ft), "pre", "ft").unwrap());
        assert!(d[..8].iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(d[8] < 0.1, "{}", d[8]);
    }

    #[test]
    fn heatmap_is_deterministic_and_light_on_diagonal() {
        let probes: Vec<_> = (0..9).map(|i| (format!("layer{i}"), gaussian(60, 4, i))).collect();
        let s = set(probes);
        let m = similarity_matrix(&s, &s, "mp", "mp").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_heatmap(&m, &p1).unwrap();
        render_heatmap(&m, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let img = image::open(&p1).unwrap().to_rgb8();
        let corner = |i: u32, j: u32| img.get_pixel(MARGIN_LEFT + j * CELL + 2, MARGIN_TOP + i * CELL + 2).0.iter().map(|&c| c as u32).sum::<u32>();
        for i in 0..9 {
            for j in 0..9 {
                assert!(corner(i, i) >= corner(i, j));
            }
        }
        let mut bad = m.clone();
        bad.values[0][1] = 1.01;
        assert!(render_heatmap(&bad, &dir.path().join("c.png")).is_err());
    }

    #[test]
    fn registry_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ProbeRegistry::swin_v2_large();
        let p = dir.path().join("swin.json");
        reg.save(&p).unwrap();
        assert_eq!(ProbeRegistry::load(&p).unwrap(), reg);
        assert_eq!(reg.entries()[2].1, "layers.2.blocks.3.norm1");
        assert!(ProbeRegistry::new(&["a", "b"]).is_err());
    }

    #[test]
    fn activation_dump_round_trips() {
        let s = set(vec![("layer0".into(), gaussian(10, 3, 1)), ("layer1".into(), gaussian(10, 2, 2))]);
        let dir = tempfile::tempdir().unwrap();
        save_activations(&s, dir.path(), "acts").unwrap();
        assert_eq!(load_activations(dir.path(), "acts").unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn cka_matches_gram_oracle_and_is_symmetric(rows in 8usize..=64, p in 2usize..=16, q in 2usize..=16, seed in 0u64..1_000_000) {
            let x = gaussian(rows, p, seed);
            let y = gaussian(rows, q, seed ^ 0xabc);
            let c = linear_cka(&x, &y).unwrap();
            prop_assert!((c - gram_cka(&x, &y)).abs() < 1e-8);
            prop_assert!((c - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!((-1e-9..=1.0 + 1e-9).contains(&c));
        }

        #[test]
        fn cka_invariances(rows in 8usize..=40, p in 2usize..=8, seed in 0u64..1_000_000, s in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let x = gaussian(rows, p, seed);
            let y = gaussian(rows, p + 1, seed + 1);
            let base = linear_cka(&x, &y).unwrap();
            let scaled = &x * s;
            let rotated = &x * orthogonal(p, seed + 2);
            let mut shifted = x.clone();
            for (j, mut col) in shifted.column_iter_mut().enumerate() {
                col.add_scalar_mut(shift * (j as f64 + 1.0));
            }
            for v in [&scaled, &rotated, &shifted] {
                prop_assert!((linear_cka(v, &y).unwrap() - base).abs() < 1e-9);
                prop_assert!((linear_cka(&y, v).unwrap() - base).abs() < 1e-9);
            }
        }

        #[test]
        fn manifest_sampling_is_distinct_and_seeded(tokens in 1usize..30, seed in 0u64..1000) {
            let ids = vec!["a".to_string(), "b".to_string()];
            let m = SampleManifest::sample(ids.clone(), 6, 5, tokens, seed).unwrap();
            prop_assert_eq!(m.positions.len(), 2 * tokens);
            let mut first: Vec<_> = m.positions.iter().filter(|p| p.0 == 0).collect();
            first.dedup();
            prop_assert_eq!(first.len(), tokens);
            prop_assert_eq!(m, SampleManifest::sample(ids, 6, 5, tokens, seed).unwrap());
        }
    }
}
