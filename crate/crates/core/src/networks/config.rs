use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Probe identifiers in network order.
pub const PROBE_IDS: [&str; 9] = ["layer0", "layer1", "layer2", "layer3", "layer4", "layer5", "layer6", "layer7", "layer8"];

/// Four-stage convolutional encoder.
///
/// Layout: a stride-2 stem, then stages 0..=3. Stages 0–2 end in a stride-2
/// downsample with a channel norm; stage 2 holds `stage2_blocks` residual blocks
/// whose `norm1` outputs are probed; stage 3 ends in `norm3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub channels: [usize; 4],
    #[serde(default = "default_stage2_blocks")]
    pub stage2_blocks: usize,
    /// Model-layer names for `layer0`..`layer8`.
    #[serde(default = "default_probe_layers")]
    pub probe_layers: Vec<String>,
}

fn default_stage2_blocks() -> usize {
    5
}

pub fn default_probe_layers() -> Vec<String> {
    let mut v = vec!["stages.0.downsample.norm".to_string(), "stages.1.downsample.norm".to_string()];
    v.extend((0..5).map(|b| format!("stages.2.blocks.{b}.norm1")));
    v.push("stages.2.downsample.norm".into());
    v.push("norm3".into());
    v
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { channels: [32, 64, 128, 256], stage2_blocks: 5, probe_layers: default_probe_layers() }
    }
}

impl EncoderSpec {
    /// Stem plus three downsamples, each stride 2.
    pub const TOTAL_STRIDE: usize = 16;

    pub fn narrow(channels: [usize; 4]) -> Self {
        Self { channels, ..Self::default() }
    }

    /// Every computation node that can be probed.
    pub fn probe_points(&self) -> Vec<String> {
        let mut v = vec!["stem.norm".to_string()];
        v.push("stages.0.blocks.0.norm1".into());
        v.push("stages.0.downsample.norm".into());
        v.push("stages.1.blocks.0.norm1".into());
        v.push("stages.1.downsample.norm".into());
        v.extend((0..self.stage2_blocks).map(|b| format!("stages.2.blocks.{b}.norm1")));
        v.push("stages.2.downsample.norm".into());
        v.push("stages.3.blocks.0.norm1".into());
        v.push("norm3".into());
        v
    }

    /// Spatial stride (relative to the input) of a probe point.
    pub fn stride_of(&self, point: &str) -> Option<usize> {
        let s = match point {
            "stem.norm" | "stages.0.blocks.0.norm1" => 2,
            "stages.0.downsample.norm" | "stages.1.blocks.0.norm1" => 4,
            "stages.1.downsample.norm" => 8,
            "stages.2.downsample.norm" | "stages.3.blocks.0.norm1" | "norm3" => 16,
            p if p.starts_with("stages.2.blocks.") && self.probe_points().iter().any(|q| q == p) => 8,
            _ => return None,
        };
        Some(s)
    }

    pub fn channels_of(&self, point: &str) -> Option<usize> {
        let c = self.channels;
        let s = match point {
            "stem.norm" | "stages.0.blocks.0.norm1" => c[0],
            "stages.0.downsample.norm" | "stages.1.blocks.0.norm1" => c[1],
            "stages.1.downsample.norm" => c[2],
            "stages.2.downsample.norm" | "stages.3.blocks.0.norm1" | "norm3" => c[3],
            p if self.stride_of(p) == Some(8) => c[2],
            _ => return None,
        };
        Some(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderSpec {
    /// Disparity mapping `depth = 1 / (scale · σ(raw) + offset)`.
    pub disp_scale: f64,
    pub disp_offset: f64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self { disp_scale: 10.0, disp_offset: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSpec {
    /// Output channels of the stride-2 conv layers.
    pub channels: Vec<usize>,
    pub output_scale: f64,
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64, 128], output_scale: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub pose: PoseSpec,
}

impl ModelConfig {
    pub fn narrow(channels: [usize; 4], pose_channels: Vec<usize>) -> Self {
        Self {
            encoder: EncoderSpec::narrow(channels),
            decoder: DecoderSpec::default(),
            pose: PoseSpec { channels: pose_channels, ..PoseSpec::default() },
        }
    }

    /// Short hash of the architecture.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
