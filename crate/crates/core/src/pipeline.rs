//! Experiment configuration, the staged pre-training pipeline with a content-hashed
//! stage cache, and the ablation runner.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::{ood_path, pseudo_path, MANIFEST};
use crate::data::{load_sequence, save_sequence, FrameSequence, Image, SceneSpec};
use crate::error::{IoContext, MesaError, Result};
use crate::finetune_eval::{
    evaluate_depth, evaluate_ood, relative_improvement, run_finetune_stage, scene_annotations, Better, DepthMetrics, EvalConfig,
    EvalReport, FtConfig, OodAnnotations,
};
use crate::geometric_pretrain::{run_gp_stage, GpConfig};
use crate::masked_pretrain::{run_mp_stage, MpConfig};
use crate::networks::{Checkpoint, Model, ModelConfig, Stage};
use crate::supervised_pretrain::{load_pseudo_depth, oracle_pseudo_depths, run_gp_sp_stage, GpSpConfig, NoiseSpec, PseudoDepth};
use crate::train::LossCurve;

/// Environment variable that roots relative output directories.
pub const OUT_ENV: &str = "MESA_OUT";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const CURVE_FILE: &str = "curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const OOD_FILE: &str = "ood.json";
pub const OOD_CSV: &str = "ood.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

/// Random indoor rooms rendered on the fly; scene `s` uses seed `seed + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub scenes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticCorpus {
    pub fn frame_count(&self) -> usize {
        self.scenes * self.frames
    }

    pub fn specs(&self) -> Vec<SceneSpec> {
        (0..self.scenes).map(|s| SceneSpec::random_room(self.seed + s as u64, self.width, self.height, self.frames)).collect()
    }

    pub fn generate(&self) -> Result<Vec<FrameSequence>> {
        if self.scenes == 0 {
            return Err(MesaError::Config("synthetic corpus needs at least one scene".into()));
        }
        self.specs().iter().map(crate::data::generate_synthetic_sequence).collect()
    }

    /// Boundary and plane annotations for every rendered frame.
    pub fn annotations(&self, seqs: &[FrameSequence]) -> Result<Vec<Vec<OodAnnotations>>> {
        self.specs()
            .iter()
            .zip(seqs)
            .map(|(spec, seq)| {
                let cams = spec.camera_poses()?;
                let depths = seq.gt_depths().ok_or_else(|| MesaError::Invariant("synthetic sequence without depth".into()))?;
                Ok(cams.iter().zip(depths).map(|(cam, d)| scene_annotations(spec, cam, d, 16)).collect())
            })
            .collect()
    }

    /// Writes `scene_%04d/` sequence directories with depth, oracle pseudo-depth, and annotations.
    pub fn write(&self, dir: &Path, noise: &NoiseSpec) -> Result<Vec<PathBuf>> {
        let seqs = self.generate()?;
        let pseudo = oracle_pseudo_depths(&seqs, noise)?;
        let ann = self.annotations(&seqs)?;
        let mut out = Vec::with_capacity(seqs.len());
        for (s, seq) in seqs.iter().enumerate() {
            let d = dir.join(format!("scene_{s:04}"));
            save_sequence(seq, &d)?;
            for (i, (p, a)) in pseudo[s].iter().zip(&ann[s]).enumerate() {
                crate::data::io::save_depth(&p.depth, &pseudo_path(&d, i))?;
                a.save(&ood_path(&d, i))?;
            }
            out.push(d);
        }
        let meta = dir.join("corpus.json");
        fs::write(&meta, serde_json::to_string_pretty(self)?).at(&meta)?;
        Ok(out)
    }
}

/// A dataset: a directory of sequences (or one sequence), or a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    Dir { dir: PathBuf },
    Synthetic { synthetic: SyntheticCorpus },
}

/// A loaded dataset plus whatever optional side files it carries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<FrameSequence>,
    pub pseudo: Option<Vec<Vec<PseudoDepth>>>,
    pub ood: Option<Vec<Vec<OodAnnotations>>>,
    /// Content hash used in stage keys.
    pub hash: String,
}

impl Dataset {
    pub fn images(&self) -> Vec<Image> {
        self.sequences.iter().flat_map(|s| s.frames().iter().cloned()).collect()
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(FrameSequence::len).sum()
    }
}

impl DatasetSpec {
    fn resolve(&self, base: &Path) -> DatasetSpec {
        match self {
            DatasetSpec::Dir { dir } if dir.is_relative() => DatasetSpec::Dir { dir: base.join(dir) },
            other => other.clone(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic { synthetic } => {
                let sequences = synthetic.generate()?;
                let ood = Some(synthetic.annotations(&sequences)?);
                let hash = sha_hex(&serde_json::to_vec(synthetic)?);
                Ok(Dataset { sequences, pseudo: None, ood, hash })
            }
            DatasetSpec::Dir { dir } => load_dataset_dir(dir),
        }
    }

    fn check_exists(&self) -> Result<()> {
        match self {
            DatasetSpec::Dir { dir } if !dir.is_dir() => Err(MesaError::Config(format!("dataset directory {} does not exist", dir.display()))),
            _ => Ok(()),
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sequence directories under `dir`: `dir` itself when it has a manifest, else its sorted children.
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.join(MANIFEST).exists() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(MesaError::InvalidInput(format!("{} contains no sequence directories", dir.display())));
    }
    Ok(out)
}

fn hash_tree(dir: &Path, hasher: &mut Sha256) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).at(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(dir)?;
    entries.sort();
    for path in entries {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hasher.update(name.as_bytes());
        if path.is_dir() {
            hash_tree(&path, hasher)?;
        } else {
            hasher.update(fs::read(&path).at(&path)?);
        }
    }
    Ok(())
}

fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let dirs = sequence_dirs(dir)?;
    let mut sequences = Vec::with_capacity(dirs.len());
    let mut pseudo = Some(Vec::new());
    let mut ood = Some(Vec::new());
    for d in &dirs {
        let seq = load_sequence(d)?;
        let n = seq.len();
        let shape = Some((seq.height(), seq.width()));
        if let Some(p) = pseudo.as_mut() {
            if (0..n).all(|i| pseudo_path(d, i).exists()) {
                p.push((0..n).map(|i| load_pseudo_depth(&pseudo_path(d, i), shape)).collect::<Result<Vec<_>>>()?);
            } else {
                pseudo = None;
            }
        }
        if let Some(o) = ood.as_mut() {
            if (0..n).all(|i| ood_path(d, i).exists()) {
                o.push((0..n).map(|i| OodAnnotations::load(&ood_path(d, i))).collect::<Result<Vec<_>>>()?);
            } else {
                ood = None;
            }
        }
        sequences.push(seq);
    }
    let mut hasher = Sha256::new();
    hash_tree(dir, &mut hasher)?;
    Ok(Dataset { sequences, pseudo, ood, hash: hex::encode(hasher.finalize()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Pre-training corpus (frames for MP, frame pairs for GP and GP+SP).
    pub train: DatasetSpec,
    /// Validation set for the geometric stages; defaults to `train`.
    #[serde(default)]
    pub val: Option<DatasetSpec>,
    /// Labeled fine-tuning set; defaults to `train`.
    #[serde(default)]
    pub finetune: Option<DatasetSpec>,
    /// Held-out evaluation set scored after fine-tuning.
    #[serde(default)]
    pub test: Option<DatasetSpec>,
    /// Oracle pseudo-depth corruption when `train` ships no pseudo-depth files.
    #[serde(default)]
    pub pseudo_noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Pre-training stages; fine-tuning is appended.
    pub stages: Vec<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

/// Everything one experiment needs, loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub mp: MpConfig,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub gp_sp: GpSpConfig,
    #[serde(default)]
    pub finetune: FtConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: Option<AblationConfig>,
    /// Directory that relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Checks stage order: mp only first, gp after nothing or mp, gp_sp after mp or gp, finetune after anything.
pub fn validate_stage_order(stages: &[Stage]) -> Result<()> {
    let mut prev: Option<Stage> = None;
    for &s in stages {
        let ok = match s {
            Stage::Mp => prev.is_none(),
            Stage::Gp => matches!(prev, None | Some(Stage::Mp)),
            Stage::GpSp => matches!(prev, Some(Stage::Mp | Stage::Gp)),
            Stage::Finetune => true,
        };
        if !ok {
            let after = prev.map_or("the start".to_string(), |p| p.to_string());
            return Err(MesaError::Config(format!("stage {s} cannot follow {after}")));
        }
        prev = Some(s);
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| MesaError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        validate_stage_order(&self.stages)?;
        for spec in self.dataset_specs() {
            spec.resolve(&self.base_dir).check_exists()?;
        }
        if let Some(ab) = &self.ablation {
            if ab.variants.is_empty() || ab.seeds.is_empty() {
                return Err(MesaError::Config("ablation needs at least one variant and one seed".into()));
            }
            for v in &ab.variants {
                if v.stages.contains(&Stage::Finetune) {
                    return Err(MesaError::Config(format!("variant `{}` lists finetune; it is appended automatically", v.name)));
                }
                validate_stage_order(&v.stages)?;
            }
        }
        Ok(())
    }

    fn dataset_specs(&self) -> Vec<&DatasetSpec> {
        let d = &self.data;
        std::iter::once(&d.train).chain(d.val.iter()).chain(d.finetune.iter()).chain(d.test.iter()).collect()
    }

    /// Output directory after applying `MESA_OUT` to relative paths.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output)
    }

    /// Stage configs with every seed field set to `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.mp.seed = seed;
        c.mp.mask.seed = seed;
        c.gp.seed = seed;
        c.gp_sp.seed = seed;
        c.gp_sp.sampler.seed = seed;
        c.gp_sp.noise.seed = seed;
        c.data.pseudo_noise.seed = seed;
        c.finetune.seed = seed;
        c
    }
}

/// Relative paths resolve against `MESA_OUT` when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    resolve_output_under(std::env::var_os(OUT_ENV).as_deref().map(Path::new), path)
}

pub fn resolve_output_under(root: Option<&Path>, path: &Path) -> PathBuf {
    match root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

/// One pipeline per output directory; a lock whose owner process is gone is stale and taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).at(&path)?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if Path::new(&format!("/proc/{pid}")).exists() => {
                            return Err(MesaError::Pipeline(format!("{} is locked by running process {pid}", dir.display())));
                        }
                        _ => {
                            log::warn!("removing stale lock {}", path.display());
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(MesaError::Io { path, source: e }),
            }
        }
        Err(MesaError::Pipeline(format!("could not acquire {}", path.display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Reused,
    Failed,
}

/// One stage execution (or cache hit); paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// `pipeline`, or `<variant>/seed<k>` for ablations.
    pub run: String,
    pub stage: Stage,
    pub key: String,
    pub status: StageStatus,
    pub seed: u64,
    pub snapshot: usize,
    #[serde(default)]
    pub chain: Vec<Stage>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
    #[serde(default)]
    pub curve: Option<PathBuf>,
    #[serde(default)]
    pub reports: Vec<PathBuf>,
    pub wall_clock_s: f64,
    #[serde(default)]
    pub error: Option<String>,
}

/// Append-only log of config snapshots and stage records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub snapshots: Vec<serde_json::Value>,
    pub records: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).at(path)?)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Every artifact path named by a record, relative to the output directory.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        self.records.iter().flat_map(|r| r.checkpoint.iter().chain(r.curve.iter()).chain(r.reports.iter()).cloned()).collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Datasets materialized once per run.
pub struct Inputs {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub finetune: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let load = |s: &DatasetSpec| s.resolve(&cfg.base_dir).load();
        let d = &cfg.data;
        Ok(Self {
            train: load(&d.train)?,
            val: d.val.as_ref().map(load).transpose()?,
            finetune: d.finetune.as_ref().map(load).transpose()?,
            test: d.test.as_ref().map(load).transpose()?,
        })
    }

    fn val(&self) -> &Dataset {
        self.val.as_ref().unwrap_or(&self.train)
    }

    fn labeled(&self) -> &Dataset {
        self.finetune.as_ref().unwrap_or(&self.train)
    }
}

/// Content hash of everything that determines a stage's output.
pub fn stage_key(stage: Stage, cfg: &ExperimentConfig, inputs: &Inputs, prev_key: Option<&str>) -> Result<String> {
    let stage_cfg = match stage {
        Stage::Mp => serde_json::to_value(&cfg.mp)?,
        Stage::Gp => serde_json::to_value(&cfg.gp)?,
        Stage::GpSp => serde_json::json!({ "gp_sp": cfg.gp_sp, "pseudo_noise": cfg.data.pseudo_noise }),
        Stage::Finetune => serde_json::json!({ "finetune": cfg.finetune, "eval": cfg.eval }),
    };
    let data = match stage {
        Stage::Mp => vec![&inputs.train.hash, &inputs.val().hash],
        Stage::Gp | Stage::GpSp => vec![&inputs.train.hash, &inputs.val().hash],
        Stage::Finetune => {
            let mut v = vec![&inputs.labeled().hash];
            v.extend(inputs.test.as_ref().map(|t| &t.hash));
            v
        }
    };
    let doc = serde_json::json!({
        "stage": stage,
        "config": stage_cfg,
        "model": cfg.model.fingerprint(),
        "seed": cfg.seed,
        "data": data,
        "prev": prev_key,
        "version": env!("CARGO_PKG_VERSION"),
    });
    Ok(sha_hex(&serde_json::to_vec(&doc)?)[..16].to_string())
}

/// Output of one stage: the checkpoint and the files written next to it.
#[derive(Clone, Debug)]
pub struct StageArtifacts {
    pub checkpoint: Checkpoint,
    pub dir: PathBuf,
    pub reports: Vec<PathBuf>,
}

fn write_curve(curve: &LossCurve, dir: &Path) -> Result<()> {
    let p = dir.join(CURVE_FILE);
    fs::write(&p, curve.to_csv()).at(&p)
}

fn write_eval(model: &Model, inputs: &Inputs, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let Some(test) = &inputs.test else { return Ok(vec![]) };
    let report = evaluate_depth(model, &test.sequences, &cfg.eval)?;
    report.write_json(&dir.join(EVAL_FILE))?;
    let p = dir.join(EVAL_CSV);
    fs::write(&p, report.to_csv()).at(&p)?;
    let mut out = vec![PathBuf::from(EVAL_FILE), PathBuf::from(EVAL_CSV)];
    if let Some(ann) = &test.ood {
        let ood = evaluate_ood(model, &test.sequences, ann, &cfg.eval)?;
        ood.write_json(&dir.join(OOD_FILE))?;
        let p = dir.join(OOD_CSV);
        fs::write(&p, ood.to_csv()).at(&p)?;
        out.extend([PathBuf::from(OOD_FILE), PathBuf::from(OOD_CSV)]);
    }
    Ok(out)
}

/// Runs one stage from `init` and writes checkpoint, loss curve, summary, and (for fine-tuning) reports into `dir`.
pub fn execute_stage(stage: Stage, cfg: &ExperimentConfig, inputs: &Inputs, init: Option<Checkpoint>, dir: &Path, force: bool) -> Result<StageArtifacts> {
    fs::create_dir_all(dir).at(dir)?;
    let model_cfg = &cfg.model;
    let train = &inputs.train;
    let val = &inputs.val().sequences;
    let (checkpoint, summary, reports) = match stage {
        Stage::Mp => {
            let model = match init {
                Some(ck) => ck.into_model(model_cfg, Stage::Mp, cfg.seed, force)?,
                None => Model::new(model_cfg.clone(), cfg.seed),
            };
            let heldout = inputs.val.as_ref().map(Dataset::images).unwrap_or_default();
            let o = run_mp_stage(&cfg.mp, model, &train.images(), &heldout)?;
            write_curve(&o.curve, dir)?;
            (o.checkpoint, serde_json::json!({ "heldout_start": o.heldout_start, "heldout_end": o.heldout_end }), vec![])
        }
        Stage::Gp => {
            let o = run_gp_stage(&cfg.gp, init, model_cfg, &train.sequences, val, force)?;
            write_curve(&o.curve, dir)?;
            (o.checkpoint, serde_json::json!({ "val_photometric_start": o.val_start, "val_photometric_end": o.val_end }), vec![])
        }
        Stage::GpSp => {
            let init = init.ok_or_else(|| MesaError::Pipeline("gp_sp needs an mp or gp checkpoint".into()))?;
            let pseudo = match &train.pseudo {
                Some(p) => p.clone(),
                None => oracle_pseudo_depths(&train.sequences, &cfg.data.pseudo_noise)?,
            };
            let o = run_gp_sp_stage(&cfg.gp_sp, init, model_cfg, &train.sequences, &pseudo, val, force)?;
            write_curve(&o.curve, dir)?;
            (o.checkpoint, serde_json::json!({ "val_absrel_start": o.val_absrel_start, "val_absrel_end": o.val_absrel_end }), vec![])
        }
        Stage::Finetune => {
            let o = run_finetune_stage(&cfg.finetune, init, model_cfg, &inputs.labeled().sequences, force)?;
            write_curve(&o.curve, dir)?;
            let reports = write_eval(&o.model, inputs, cfg, dir)?;
            let last = o.curve.column("silog").and_then(|c| c.last().copied());
            (o.checkpoint, serde_json::json!({ "final_silog": last }), reports)
        }
    };
    checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    // the summary is written last and marks the directory complete
    write_atomic(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(StageArtifacts { checkpoint, dir: dir.to_path_buf(), reports })
}

fn cached_stage(dir: &Path) -> Option<StageArtifacts> {
    if !dir.join(SUMMARY_FILE).exists() {
        return None;
    }
    let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).ok()?;
    let reports = [EVAL_FILE, EVAL_CSV, OOD_FILE, OOD_CSV].iter().filter(|f| dir.join(f).exists()).map(PathBuf::from).collect();
    Some(StageArtifacts { checkpoint, dir: dir.to_path_buf(), reports })
}

/// Result of running (or resuming) a stage list.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub manifest: ExperimentManifest,
    pub executed: Vec<Stage>,
    pub reused: Vec<Stage>,
    /// Artifacts of the last stage.
    pub last: Option<StageArtifacts>,
}

/// Owns an output directory: lock, shared stage cache, and manifest.
pub struct Runner {
    out: PathBuf,
    manifest: ExperimentManifest,
    snapshot: usize,
    _lock: RunLock,
}

impl Runner {
    pub fn open(out: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let lock = RunLock::acquire(out)?;
        let path = out.join(MANIFEST_FILE);
        let mut manifest = if path.exists() { ExperimentManifest::load(&path)? } else { ExperimentManifest::default() };
        let snap = serde_json::to_value(cfg)?;
        if manifest.snapshots.last() != Some(&snap) {
            manifest.snapshots.push(snap);
        }
        let snapshot = manifest.snapshots.len() - 1;
        let runner = Self { out: out.to_path_buf(), manifest, snapshot, _lock: lock };
        runner.manifest.save(&path)?;
        Ok(runner)
    }

    pub fn manifest(&self) -> &ExperimentManifest {
        &self.manifest
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn push(&mut self, record: StageRecord) -> Result<()> {
        self.manifest.records.push(record);
        self.manifest.save(&self.out.join(MANIFEST_FILE))
    }

    /// Runs `stages` in order under seed `cfg.seed`, reusing cached stages whose keys match.
    pub fn run_stages(&mut self, run: &str, stages: &[Stage], cfg: &ExperimentConfig, inputs: &Inputs) -> Result<PipelineRun> {
        validate_stage_order(stages)?;
        let mut prev: Option<(String, StageArtifacts)> = None;
        let (mut executed, mut reused) = (Vec::new(), Vec::new());
        for &stage in stages {
            let key = stage_key(stage, cfg, inputs, prev.as_ref().map(|(k, _)| k.as_str()))?;
            let dir = self.out.join("cache").join(format!("{stage}-{key}"));
            let started = Instant::now();
            let (artifacts, status) = match cached_stage(&dir) {
                Some(a) => (a, StageStatus::Reused),
                None => {
                    log::info!("{run}: running {stage} ({key})");
                    let init = prev.as_ref().map(|(_, a)| a.checkpoint.clone());
                    match execute_stage(stage, cfg, inputs, init, &dir, false) {
                        Ok(a) => (a, StageStatus::Completed),
                        Err(e) => {
                            self.push(StageRecord {
                                run: run.to_string(),
                                stage,
                                key,
                                status: StageStatus::Failed,
                                seed: cfg.seed,
                                snapshot: self.snapshot,
                                chain: vec![],
                                checkpoint: None,
                                checkpoint_hash: None,
                                curve: None,
                                reports: vec![],
                                wall_clock_s: started.elapsed().as_secs_f64(),
                                error: Some(e.to_string()),
                            })?;
                            return Err(e);
                        }
                    }
                }
            };
            if status == StageStatus::Reused {
                reused.push(stage);
            } else {
                executed.push(stage);
            }
            let rel_dir = self.rel(&dir);
            let curve = dir.join(CURVE_FILE).exists().then(|| rel_dir.join(CURVE_FILE));
            self.push(StageRecord {
                run: run.to_string(),
                stage,
                key: key.clone(),
                status,
                seed: cfg.seed,
                snapshot: self.snapshot,
                chain: artifacts.checkpoint.meta.chain.clone(),
                checkpoint: Some(rel_dir.join(CHECKPOINT_FILE)),
                checkpoint_hash: Some(sha_hex(&artifacts.checkpoint.to_bytes()?)),
                curve,
                reports: artifacts.reports.iter().map(|r| rel_dir.join(r)).collect(),
                wall_clock_s: started.elapsed().as_secs_f64(),
                error: None,
            })?;
            prev = Some((key, artifacts));
        }
        Ok(PipelineRun { manifest: self.manifest.clone(), executed, reused, last: prev.map(|(_, a)| a) })
    }
}

/// Runs `cfg.stages` under `cfg.seed` in the configured output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    if cfg.stages.is_empty() {
        return Err(MesaError::Config("no stages configured".into()));
    }
    let cfg = cfg.seeded(cfg.seed);
    let inputs = Inputs::load(&cfg)?;
    let out = cfg.output_dir();
    let mut runner = Runner::open(&out, &cfg)?;
    let run = runner.run_stages("pipeline", &cfg.stages, &cfg, &inputs)?;
    if let Some(last) = &run.last {
        let ck = out.join("final").join(CHECKPOINT_FILE);
        last.checkpoint.save(&ck)?;
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: DepthMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub stages: Vec<Stage>,
    pub per_seed: Vec<SeedResult>,
    pub mean: DepthMetrics,
}

/// Percent improvement of `variant` over `baseline` per metric column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub variant: String,
    pub baseline: String,
    pub values: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub columns: Vec<String>,
    pub variants: Vec<VariantResult>,
    pub improvement: Vec<ImprovementRow>,
}

impl AblationReport {
    /// Improvement rows of every variant against the first one.
    pub fn from_variants(variants: Vec<VariantResult>) -> Result<Self> {
        let first = variants.first().ok_or_else(|| MesaError::InvalidInput("ablation produced no variants".into()))?;
        let base = first.mean.as_array();
        let mut improvement = Vec::new();
        for v in &variants[1..] {
            let cur = v.mean.as_array();
            let mut values = [0.0; 6];
            for (j, val) in values.iter_mut().enumerate() {
                let better = if DepthMetrics::HIGHER_IS_BETTER[j] { Better::Higher } else { Better::Lower };
                *val = relative_improvement(base[j], cur[j], better)?;
            }
            improvement.push(ImprovementRow { variant: v.name.clone(), baseline: first.name.clone(), values });
        }
        Ok(Self { columns: DepthMetrics::COLUMNS.iter().map(|c| c.to_string()).collect(), variants, improvement })
    }

    /// Rows: per-seed results, per-variant means, then improvement percentages.
    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,seed,{}\n", self.columns.join(","));
        let fmt = |vals: &[f64]| vals.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",");
        for v in &self.variants {
            for s in &v.per_seed {
                out.push_str(&format!("{},{},{}\n", v.name, s.seed, fmt(&s.metrics.as_array())));
            }
        }
        for v in &self.variants {
            out.push_str(&format!("{},mean,{}\n", v.name, fmt(&v.mean.as_array())));
        }
        for r in &self.improvement {
            out.push_str(&format!("{},improvement_vs_{}_pct,{}\n", r.variant, r.baseline, fmt(&r.values)));
        }
        out
    }
}

/// Fine-tunes after each variant's pre-training stages under every seed and
/// scores the held-out set; shared prefixes hit the stage cache.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let ab = cfg.ablation.as_ref().ok_or_else(|| MesaError::Config("missing [ablation] section".into()))?;
    if cfg.data.test.is_none() {
        return Err(MesaError::Config("ablation needs data.test".into()));
    }
    let inputs = Inputs::load(cfg)?;
    let out = cfg.output_dir();
    let mut runner = Runner::open(&out, cfg)?;
    let mut results: Vec<VariantResult> = ab
        .variants
        .iter()
        .map(|v| VariantResult { name: v.name.clone(), stages: v.stages.clone(), per_seed: vec![], mean: DepthMetrics::default() })
        .collect();
    for &seed in &ab.seeds {
        let seeded = cfg.seeded(seed);
        for (v, res) in ab.variants.iter().zip(results.iter_mut()) {
            let mut stages = v.stages.clone();
            stages.push(Stage::Finetune);
            let run = runner.run_stages(&format!("{}/seed{seed}", v.name), &stages, &seeded, &inputs)?;
            let last = run.last.expect("finetune stage ran");
            let path = last.dir.join(EVAL_FILE);
            let report: EvalReport<DepthMetrics> = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
            log::info!("{} seed {seed}: rmse {:.4}", v.name, report.aggregate.rmse);
            res.per_seed.push(SeedResult { seed, metrics: report.aggregate });
        }
    }
    for r in &mut results {
        let all: Vec<DepthMetrics> = r.per_seed.iter().map(|s| s.metrics).collect();
        r.mean = DepthMetrics::mean(&all).expect("at least one seed");
    }
    let report = AblationReport::from_variants(results)?;
    write_atomic(&out.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out.join("ablation.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

/// Checkpoint path, or the matching file inside a stage directory.
pub fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}
