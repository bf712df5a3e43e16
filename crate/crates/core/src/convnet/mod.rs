//! The MaxoutNet marginal feature detector.
//!
//! Three ConvPool layers (two 4x4 convolution branches, each followed by a
//! stride-2 2x2 max pool, merged by an element-wise maximum) and a final 6x6
//! kernel with a binary softmax. One 69x69 input patch maps to one output
//! pixel; [`forward_dense`] produces every output pixel of an image at once by
//! carrying all pooling phases through the network as fragments.

mod forward;
mod ops;
mod params;
mod train;

pub use forward::{
    forward_dense, forward_dense_counted, forward_patch, normalize_bytes, patch_macs, quantize_prob, DenseStats,
};
pub use ops::{conv2d_valid, maxout2, maxpool2_stride2};
pub use params::{param_count, ConvKernel, ConvPoolParams, MaxoutNetParams, CANONICAL_WIDTH};
pub use train::{
    backward, backward_scaled, loss_bce, routing, train, train_with_report, Sample, TrainConfig, TrainReport,
};

use num_traits::Float;
use thiserror::Error;

/// Side of the square input window that determines one output pixel.
pub const RECEPTIVE_FIELD: usize = 69;
/// Border lost on each side by valid dense inference.
pub const HALF_FIELD: usize = RECEPTIVE_FIELD / 2;
pub const CONV_SIZE: usize = 4;
pub const FINAL_SIZE: usize = 6;

#[derive(Debug, Error)]
pub enum ConvNetError {
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("input {height}x{width} is smaller than the {kernel}x{kernel} kernel")]
    InputTooSmall { height: usize, width: usize, kernel: usize },
    #[error("shape mismatch between {0:?} and {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("pooling produced an empty map")]
    EmptyPool,
    #[error("invalid pooling phase {0:?}")]
    BadPhase((usize, usize)),
    #[error("patch must be 1x{size}x{size}, got {actual:?}", size = RECEPTIVE_FIELD)]
    WrongPatchSize { actual: [usize; 3] },
    #[error("non-finite probability {0}")]
    NonFinite(f64),
    #[error("training set needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConvNetError>;

/// Floating-point element type the network can run in.
///
/// Inference and training use `f32`; `f64` exists so gradients can be checked
/// against finite differences without single-precision round-off.
pub trait Real: Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static {
    /// `C <- A * B + beta * C` for strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the stated shapes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("representable")
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Activations: channel-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != channels * height * width || channels == 0 {
            return Err(ConvNetError::ShapeMismatch([channels, height, width], [values.len(), 0, 0]));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![T::zero(); channels * height * width] }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy a `height x width` window starting at `(y, x)`.
    pub fn window(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self> {
        if y + height > self.height || x + width > self.width {
            return Err(ConvNetError::ShapeMismatch(self.shape(), [self.channels, y + height, x + width]));
        }
        let mut out = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for r in 0..height {
                let start = (c * self.height + y + r) * self.width + x;
                out.extend_from_slice(&self.values[start..start + width]);
            }
        }
        Ok(Self { channels: self.channels, height, width, values: out })
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}
