use crate::autodiff::Tensor;
use crate::error::{MesaError, Result};

/// RGB image, channel-major (`[3, H, W]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(MesaError::InvalidInput("image must be non-empty".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(MesaError::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(MesaError::Invariant(format!("non-finite image value {v}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Channel-mean intensity, row-major `[H, W]`.
    pub fn gray(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n).map(|i| (self.data[i] + self.data[n + i] + self.data[2 * n + i]) / 3.0).collect()
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => return Err(MesaError::Shape(format!("expected [3,H,W] tensor, got {s:?}"))),
        };
        Self::new(h, w, t.data().to_vec())
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Positive per-pixel depth in meters with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if depth.len() != n || valid.len() != n {
            return Err(MesaError::Shape(format!("depth map {height}x{width} with {} / {} entries", depth.len(), valid.len())));
        }
        for (d, &ok) in depth.iter().zip(&valid) {
            if !d.is_finite() || (ok && *d <= 0.0) {
                return Err(MesaError::Invariant(format!("depth {d} invalid at a valid pixel")));
            }
        }
        Ok(Self { height, width, depth, valid })
    }

    /// Dense map, every pixel valid.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        Self::new(height, width, depth, vec![true; height * width])
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::dense(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Multiplies every depth by `s > 0`.
    pub fn scaled(&self, s: f64) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            depth: self.depth.iter().map(|d| d * s).collect(),
            valid: self.valid.clone(),
        }
    }

    /// `[H, W]` tensor of depths.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.depth.clone())
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}
