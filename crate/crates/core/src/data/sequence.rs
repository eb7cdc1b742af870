use super::geometry::{Intrinsics, SE3Transform};
use super::image::{DepthMap, Image};
use crate::error::{MesaError, Result};

/// Consecutive video frames with shared intrinsics and optional ground truth.
///
/// `gt_poses[i]` maps points from camera `i` into camera `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
    intrinsics: Intrinsics,
    gt_depths: Option<Vec<DepthMap>>,
    gt_poses: Option<Vec<SE3Transform>>,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<Image>,
        intrinsics: Intrinsics,
        gt_depths: Option<Vec<DepthMap>>,
        gt_poses: Option<Vec<SE3Transform>>,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(MesaError::InvalidInput(format!("sequence needs at least 2 frames, got {}", frames.len())));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if let Some(i) = frames.iter().position(|f| f.height() != h || f.width() != w) {
            return Err(MesaError::Shape(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                frames[i].height(),
                frames[i].width()
            )));
        }
        intrinsics.validate(w, h)?;
        if let Some(d) = &gt_depths {
            if d.len() != frames.len() {
                return Err(MesaError::Shape(format!("{} depth maps for {} frames", d.len(), frames.len())));
            }
            if d.iter().any(|d| d.height() != h || d.width() != w) {
                return Err(MesaError::Shape("depth map size differs from frame size".into()));
            }
        }
        if let Some(p) = &gt_poses {
            if p.len() != frames.len() - 1 {
                return Err(MesaError::Shape(format!("{} poses for {} frames", p.len(), frames.len())));
            }
            for pose in p {
                pose.validate()?;
            }
        }
        Ok(Self { frames, intrinsics, gt_depths, gt_poses })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }

    pub fn gt_depths(&self) -> Option<&[DepthMap]> {
        self.gt_depths.as_deref()
    }

    pub fn gt_poses(&self) -> Option<&[SE3Transform]> {
        self.gt_poses.as_deref()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Ground-truth transform from frame `a` into frame `b` (`a < b`).
    pub fn relative_pose(&self, a: usize, b: usize) -> Option<SE3Transform> {
        let poses = self.gt_poses.as_ref()?;
        if a >= b || b >= self.frames.len() {
            return None;
        }
        Some(poses[a..b].iter().fold(SE3Transform::identity(), |acc, p| p.compose(&acc)))
    }
}
