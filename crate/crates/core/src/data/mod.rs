//! Images, depth, camera geometry, and the synthetic scene generator.

pub mod geometry;
pub mod image;
pub mod io;
pub mod scene;
pub mod sequence;

pub use self::geometry::{Intrinsics, Pose6D, SE3Transform};
pub use self::image::{DepthMap, Image};
pub use self::io::{load_sequence, save_sequence};
pub use self::scene::{generate_synthetic_sequence, Primitive, SceneSpec, Texture, TrajectorySpec};
pub use self::sequence::FrameSequence;
