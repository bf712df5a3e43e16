use super::ops::{conv2d_valid, maxout2, pool_full};
use super::{ConvKernel, ConvNetError, FeatureMap, MaxoutNetParams, Real, Result, RECEPTIVE_FIELD};

/// Binary softmax of a two-logit output: `(p_background, p_foreground)`.
pub(crate) fn softmax2<T: Real>(z0: T, z1: T) -> (T, T) {
    let m = z0.max(z1);
    let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Class probabilities for one 1x69x69 patch.
pub fn forward_patch<T: Real>(patch: &FeatureMap<T>, params: &MaxoutNetParams<T>) -> Result<(T, T)> {
    if patch.shape() != [1, RECEPTIVE_FIELD, RECEPTIVE_FIELD] {
        return Err(ConvNetError::WrongPatchSize { actual: patch.shape() });
    }
    let mut x = patch.clone();
    for layer in &params.layers {
        let a = conv2d_valid(&x, &layer.branches[0])?;
        let b = conv2d_valid(&x, &layer.branches[1])?;
        x = pool_full(&maxout2(&a, &b)?, 0, 0, false).0;
    }
    let z = conv2d_valid(&x, &params.final_layer)?;
    Ok(softmax2(z.values()[0], z.values()[1]))
}

/// Work done by one dense pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DenseStats {
    /// Multiply-accumulates over every convolution.
    pub macs: u64,
    /// Fragments alive at the final kernel.
    pub fragments: usize,
}

/// Multiply-accumulates of one [`forward_patch`] call at channel `width`.
pub fn patch_macs(width: usize) -> u64 {
    let conv = |out: usize, c_in: usize, c_out: usize, k: usize| (out * out * c_in * c_out * k * k) as u64;
    2 * conv(66, 1, width, 4) + 2 * conv(30, width, width, 4) + 2 * conv(12, width, width, 4) + conv(1, width, 2, 6)
}

fn conv_macs<T>(input: &FeatureMap<T>, k: &ConvKernel<T>) -> u64
where
    T: Real,
{
    let (h, w) = (input.height() + 1 - k.size, input.width() + 1 - k.size);
    (h * w * k.c_in * k.c_out * k.size * k.size) as u64
}

struct Fragment<T> {
    map: FeatureMap<T>,
    /// Input-image offset of the fragment's first window.
    offset: (usize, usize),
    /// Input-image distance between neighbouring fragment elements.
    stride: usize,
}

/// Foreground probability for every 69x69 window of a 1xHxW image.
///
/// Output pixel `(y, x)` is the prediction for the window whose top-left
/// corner is `(y, x)`, i.e. centred on input pixel `(y + 34, x + 34)`.
pub fn forward_dense<T: Real>(image: &FeatureMap<T>, params: &MaxoutNetParams<T>) -> Result<FeatureMap<T>> {
    forward_dense_counted(image, params).map(|(m, _)| m)
}

/// [`forward_dense`] plus an arithmetic-cost account.
///
/// Each 2x2/2 pool is evaluated at all four phases, turning one map into four
/// fragments; after three pools 64 fragments cover the 8x8 output phases and
/// are interleaved back into a stride-1 map.
pub fn forward_dense_counted<T: Real>(
    image: &FeatureMap<T>,
    params: &MaxoutNetParams<T>,
) -> Result<(FeatureMap<T>, DenseStats)> {
    if image.channels() != 1 {
        return Err(ConvNetError::ChannelMismatch { expected: 1, actual: image.channels() });
    }
    let (h, w) = (image.height(), image.width());
    if h < RECEPTIVE_FIELD || w < RECEPTIVE_FIELD {
        return Err(ConvNetError::InputTooSmall { height: h, width: w, kernel: RECEPTIVE_FIELD });
    }
    let (oh, ow) = (h + 1 - RECEPTIVE_FIELD, w + 1 - RECEPTIVE_FIELD);
    let mut stats = DenseStats::default();
    let mut frags = vec![Fragment { map: image.clone(), offset: (0, 0), stride: 1 }];
    for layer in &params.layers {
        let k = &layer.branches[0];
        let mut next = Vec::with_capacity(frags.len() * 4);
        for f in &frags {
            if f.map.height() < k.size || f.map.width() < k.size {
                continue;
            }
            let a = conv2d_valid(&f.map, &layer.branches[0])?;
            let b = conv2d_valid(&f.map, &layer.branches[1])?;
            stats.macs += 2 * conv_macs(&f.map, k);
            let m = maxout2(&a, &b)?;
            for py in 0..2 {
                for px in 0..2 {
                    let (p, _) = pool_full(&m, py, px, false);
                    if p.height() == 0 || p.width() == 0 {
                        continue;
                    }
                    next.push(Fragment {
                        map: p,
                        offset: (f.offset.0 + py * f.stride, f.offset.1 + px * f.stride),
                        stride: f.stride * 2,
                    });
                }
            }
        }
        frags = next;
    }
    let mut out = FeatureMap::zeros(1, oh, ow);
    let fin = &params.final_layer;
    for f in &frags {
        if f.map.height() < fin.size || f.map.width() < fin.size {
            continue;
        }
        let z = conv2d_valid(&f.map, fin)?;
        stats.macs += conv_macs(&f.map, fin);
        stats.fragments += 1;
        let (zh, zw) = (z.height(), z.width());
        let plane = zh * zw;
        let vals = out.values_mut();
        for j in 0..zh {
            let y = f.offset.0 + f.stride * j;
            debug_assert!(y < oh);
            for i in 0..zw {
                let x = f.offset.1 + f.stride * i;
                let (_, fg) = softmax2(z.values()[j * zw + i], z.values()[plane + j * zw + i]);
                vals[y * ow + x] = fg;
            }
        }
    }
    Ok((out, stats))
}

/// Map raw bytes to `[0, 1]`.
pub fn normalize_bytes<T: Real>(bytes: &[u8]) -> Vec<T> {
    let s = T::lit(1.0 / 255.0);
    bytes.iter().map(|&b| T::lit(b as f64) * s).collect()
}

/// `round(p * 255)` with halves rounded up and out-of-range values saturated.
pub fn quantize_prob<T: Real>(values: &[T]) -> Result<Vec<u8>> {
    values
        .iter()
        .map(|&p| {
            let p = p.as_f64();
            if !p.is_finite() {
                return Err(ConvNetError::NonFinite(p));
            }
            Ok((p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        })
        .collect()
}
