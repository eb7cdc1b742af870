//! Safetensors checkpoints: float32 tensors plus one JSON metadata entry.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, DEPTH_DECODER, ENCODER, POSE};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{IoContext, MesaError, Result};

const META_KEY: &str = "mesa";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mp,
    Gp,
    GpSp,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mp => "mp",
            Stage::Gp => "gp",
            Stage::GpSp => "gp_sp",
            Stage::Finetune => "finetune",
        }
    }

    fn is_geometric(self) -> bool {
        matches!(self, Stage::Gp | Stage::GpSp)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = MesaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(Stage::Mp),
            "gp" => Ok(Stage::Gp),
            "gp_sp" => Ok(Stage::GpSp),
            "finetune" => Ok(Stage::Finetune),
            other => Err(MesaError::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Stage that produced these weights.
    pub stage: Stage,
    /// Every stage applied so far, oldest first.
    pub chain: Vec<Stage>,
    pub seed: u64,
    pub fingerprint: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage: Stage, mut chain: Vec<Stage>, seed: u64) -> Self {
        chain.push(stage);
        Self {
            meta: CheckpointMeta {
                stage,
                chain,
                seed,
                fingerprint: model.config.fingerprint(),
                config: model.config.clone(),
            },
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Model::check_namespace(&self.params)?;
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(name, t)| {
                let raw = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                (name.to_string(), raw, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), raw)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| MesaError::Checkpoint(e.to_string()))?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(views, &Some(meta)).map_err(|e| MesaError::Checkpoint(e.to_string()))
    }

    /// Parses the whole buffer before returning, so a bad file never yields a partial model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |e: String| MesaError::Checkpoint(e);
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing provenance header".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| bad(format!("bad header: {e}")))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("tensor `{name}` is {:?}, expected F32", view.dtype())));
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("tensor `{name}` holds non-finite values")));
            }
            params.insert(name, Tensor::new(view.shape(), data));
        }
        Model::check_namespace(&params)?;
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).at(&tmp)?;
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    /// Builds a model for `target` from these weights.
    ///
    /// The encoder always carries over. The depth decoder and pose net carry
    /// over only between geometric stages (or when resuming the same stage);
    /// otherwise they are freshly initialized, so the masked-reconstruction
    /// head never leaks into depth prediction.
    pub fn into_model(self, config: &ModelConfig, target: Stage, seed: u64, force: bool) -> Result<Model> {
        let expected = config.fingerprint();
        if self.meta.fingerprint != expected && !force {
            return Err(MesaError::FingerprintMismatch { expected, found: self.meta.fingerprint });
        }
        let src = self.meta.stage;
        let keep_heads = src == target || (src.is_geometric() && target.is_geometric());
        let mut model = Model::new(config.clone(), seed);
        let carries = |name: &str| {
            name.starts_with(ENCODER)
                || (keep_heads && (name.starts_with(DEPTH_DECODER) || name.starts_with(POSE)))
                || src == target
        };
        let mut fresh = model.params.clone();
        for (name, t) in self.params.iter() {
            if !carries(name) {
                continue;
            }
            match fresh.get(name) {
                Some(cur) if cur.shape() == t.shape() => fresh.insert(name, t.clone()),
                Some(cur) => {
                    return Err(MesaError::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        cur.shape()
                    )))
                }
                None if force => {}
                None => return Err(MesaError::Checkpoint(format!("unexpected parameter `{name}`"))),
            }
        }
        model.params = fresh;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, stage: Stage, chain: Vec<Stage>, seed: u64, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_model(model, stage, chain, seed);
    ckpt.save(path)?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut m = Model::new(ModelConfig::narrow([4, 8, 8, 16], vec![4, 8]), 3);
        m.params.round_to_f32();
        m
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.safetensors");
        let ck = save_checkpoint(&model(), Stage::Mp, vec![], 3, &p).unwrap();
        let first = fs::read(&p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        let p2 = dir.path().join("b.safetensors");
        back.save(&p2).unwrap();
        assert_eq!(first, fs::read(&p2).unwrap());
        assert_eq!(back.meta.chain, vec![Stage::Mp]);
    }

    #[test]
    fn mp_weights_enter_gp_with_fresh_heads() {
        let m = model();
        let mut trained = m.clone();
        for (name, t) in m.params.iter() {
            trained.params.insert(name, t.map(|v| v + 0.25));
        }
        let ck = Checkpoint::from_model(&trained, Stage::Mp, vec![], 3);
        let gp = ck.into_model(&m.config, Stage::Gp, 9, false).unwrap();
        let fresh = Model::new(m.config.clone(), 9);
        for (name, t) in gp.params.iter() {
            if name.starts_with(ENCODER) {
                assert_eq!(t, trained.params.get(name).unwrap(), "{name}");
            } else {
                assert_eq!(t, fresh.params.get(name).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_needs_force() {
        let ck = Checkpoint::from_model(&model(), Stage::Gp, vec![Stage::Mp], 3);
        let mut other = ck.meta.config.clone();
        other.decoder.disp_offset = 0.02;
        assert!(matches!(
            ck.clone().into_model(&other, Stage::GpSp, 3, false),
            Err(MesaError::FingerprintMismatch { .. })
        ));
        assert!(ck.into_model(&other, Stage::GpSp, 3, true).is_ok());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_model(&model(), Stage::Mp, vec![], 3).to_bytes().unwrap();
        for cut in [0, 4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(MesaError::Checkpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[10] ^= 0xff;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
    }

    #[test]
    fn prefix_names_are_refused() {
        let mut ck = Checkpoint::from_model(&model(), Stage::Mp, vec![], 3);
        ck.params.insert("encoder.stem", Tensor::zeros(&[1]));
        assert!(ck.to_bytes().is_err());
    }

    #[test]
    fn stage_tags_round_trip() {
        for s in [Stage::Mp, Stage::Gp, Stage::GpSp, Stage::Finetune] {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }
}
