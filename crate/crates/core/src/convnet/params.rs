use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvNetError, Real, Result, CONV_SIZE, FINAL_SIZE};

/// Channel width of the published network.
pub const CANONICAL_WIDTH: usize = 32;

const MAGIC: &[u8; 4] = b"MXNT";
const VERSION: u32 = 1;

/// A bank of `c_out` kernels of `size x size x c_in`.
///
/// Weights are stored `[c_out][c_in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub c_in: usize,
    pub c_out: usize,
    pub size: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(c_in: usize, c_out: usize, size: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != c_out * c_in * size * size || bias.len() != c_out {
            return Err(ConvNetError::ShapeMismatch([c_out, c_in, size], [weights.len(), bias.len(), 0]));
        }
        Ok(Self { c_in, c_out, size, weights, bias })
    }

    pub fn zeros(c_in: usize, c_out: usize, size: usize) -> Self {
        Self { c_in, c_out, size, weights: vec![T::zero(); c_out * c_in * size * size], bias: vec![T::zero(); c_out] }
    }

    fn random(c_in: usize, c_out: usize, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * size * size) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let weights = (0..c_out * c_in * size * size).map(|_| T::lit(rng.random_range(-scale..scale))).collect();
        Self { c_in, c_out, size, weights, bias: vec![T::zero(); c_out] }
    }

    #[inline]
    pub fn weight(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.weights[((co * self.c_in + ci) * self.size + ky) * self.size + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        ConvKernel {
            c_in: self.c_in,
            c_out: self.c_out,
            size: self.size,
            weights: self.weights.iter().map(|&w| U::lit(w.as_f64())).collect(),
            bias: self.bias.iter().map(|&b| U::lit(b.as_f64())).collect(),
        }
    }
}

/// Two parallel convolution branches merged by maxout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPoolParams<T = f32> {
    pub branches: [ConvKernel<T>; 2],
}

/// All weights of one marginal detector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxoutNetParams<T = f32> {
    pub layers: [ConvPoolParams<T>; 3],
    pub final_layer: ConvKernel<T>,
}

impl<T: Real> MaxoutNetParams<T> {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases from `seed`.
    pub fn random(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |c_in: usize| ConvPoolParams {
            branches: [
                ConvKernel::random(c_in, width, CONV_SIZE, &mut rng),
                ConvKernel::random(c_in, width, CONV_SIZE, &mut rng),
            ],
        };
        let layers = [layer(1), layer(width), layer(width)];
        let final_layer = ConvKernel::random(width, 2, FINAL_SIZE, &mut rng);
        Self { layers, final_layer }
    }

    pub fn zeros(width: usize) -> Self {
        let layer = |c_in| ConvPoolParams {
            branches: [ConvKernel::zeros(c_in, width, CONV_SIZE), ConvKernel::zeros(c_in, width, CONV_SIZE)],
        };
        Self { layers: [layer(1), layer(width), layer(width)], final_layer: ConvKernel::zeros(width, 2, FINAL_SIZE) }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width())
    }

    pub fn width(&self) -> usize {
        self.layers[0].branches[0].c_out
    }

    /// Every tensor in file order: per layer, per branch, weights then bias;
    /// then the final kernel's weights and bias.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(14);
        for l in &self.layers {
            for b in &l.branches {
                out.push(b.weights.as_slice());
                out.push(b.bias.as_slice());
            }
        }
        out.push(&self.final_layer.weights);
        out.push(&self.final_layer.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(14);
        for l in &mut self.layers {
            for b in &mut l.branches {
                out.push(b.weights.as_mut_slice());
                out.push(b.bias.as_mut_slice());
            }
        }
        out.push(&mut self.final_layer.weights);
        out.push(&mut self.final_layer.bias);
        out
    }

    /// Names matching [`Self::tensors`].
    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::with_capacity(14);
        for l in 1..=3 {
            for b in 0..2 {
                names.push(format!("convpool{l}.branch{b}.weights"));
                names.push(format!("convpool{l}.branch{b}.bias"));
            }
        }
        names.push("final.weights".into());
        names.push("final.bias".into());
        names
    }

    pub fn cast<U: Real>(&self) -> MaxoutNetParams<U> {
        let layer = |l: &ConvPoolParams<T>| ConvPoolParams { branches: [l.branches[0].cast(), l.branches[1].cast()] };
        MaxoutNetParams {
            layers: [layer(&self.layers[0]), layer(&self.layers[1]), layer(&self.layers[2])],
            final_layer: self.final_layer.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Human-readable description: layer shapes, parameter count and
    /// per-tensor statistics.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let w = self.width();
        let _ = writeln!(s, "MaxoutNet  width={w}  receptive_field=69x69  params={}", param_count(self));
        for (i, l) in self.layers.iter().enumerate() {
            let b = &l.branches[0];
            let _ = writeln!(
                s,
                "  convpool{}: 2 x conv {}x{} {}->{} + maxpool 2x2/2, maxout",
                i + 1,
                b.size,
                b.size,
                b.c_in,
                b.c_out
            );
        }
        let f = &self.final_layer;
        let _ = writeln!(s, "  final: conv {}x{} {}->{} + softmax", f.size, f.size, f.c_in, f.c_out);
        for (name, t) in Self::tensor_names().iter().zip(self.tensors()) {
            let n = t.len() as f64;
            let mean = t.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = t.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let _ = writeln!(s, "  {name:<26} n={:<6} mean={mean:+.5} std={:.5}", t.len(), var.sqrt());
        }
        s
    }
}

impl MaxoutNetParams<f32> {
    /// Serialize: magic `MXNT`, version, layer spec (input channels, width,
    /// conv size, final size, classes) as little-endian u32, then every tensor
    /// of [`Self::tensors`] as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * param_count(self));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, 1, self.width() as u32, CONV_SIZE as u32, FINAL_SIZE as u32, 2] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ConvNetError::Format(m.to_string());
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(bad("missing MXNT header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(bad(&format!("unsupported version {}", word(0))));
        }
        let (c_in, width, conv, fin, classes) = (word(1), word(2), word(3), word(4), word(5));
        if c_in != 1 || conv != CONV_SIZE || fin != FINAL_SIZE || classes != 2 || width == 0 {
            return Err(bad("unsupported layer spec"));
        }
        let mut params = Self::zeros(width);
        let expected = 28 + 4 * param_count(&params);
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut floats = bytes[28..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = floats.next().unwrap();
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| ConvNetError::Io { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ConvNetError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Total number of scalar parameters.
pub fn param_count<T: Real>(params: &MaxoutNetParams<T>) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_count() {
        let p = MaxoutNetParams::<f32>::zeros(CANONICAL_WIDTH);
        assert_eq!(param_count(&p), 69_058);
        let closed = 2 * (4 * 4 * 32 + 32) + 2 * 2 * (4 * 4 * 32 * 32 + 32) + (6 * 6 * 32 * 2 + 2);
        assert_eq!(closed, 69_058);
        assert_eq!(param_count(&p).to_string().len(), 5, "order 10^4..10^5");
    }

    #[test]
    fn doubling_width_quadruples_inner_kernels() {
        let a = MaxoutNetParams::<f32>::zeros(8);
        let b = MaxoutNetParams::<f32>::zeros(16);
        let k = |p: &MaxoutNetParams<f32>| p.layers[1].branches[0].weights.len();
        assert_eq!(k(&b), 4 * k(&a));
    }

    #[test]
    fn bytes_roundtrip_and_reject() {
        let p = MaxoutNetParams::<f32>::random(4, 7);
        let bytes = p.to_bytes();
        assert_eq!(MaxoutNetParams::from_bytes(&bytes).unwrap(), p);
        assert!(MaxoutNetParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MaxoutNetParams::from_bytes(&bad).is_err());
        assert!(p.summary().contains("final: conv 6x6 4->2"));
    }

    #[test]
    fn random_is_seeded() {
        assert_eq!(MaxoutNetParams::<f32>::random(4, 1), MaxoutNetParams::<f32>::random(4, 1));
        assert_ne!(MaxoutNetParams::<f32>::random(4, 1), MaxoutNetParams::<f32>::random(4, 2));
    }
}
