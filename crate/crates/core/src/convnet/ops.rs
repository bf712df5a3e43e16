use super::{ConvKernel, ConvNetError, FeatureMap, Real, Result};

/// Target number of output pixels per im2col tile.
const TILE_PIXELS: usize = 4096;

/// Valid (unpadded, stride 1) multi-channel convolution plus bias.
///
/// Every output element is `bias + sum(weights * window)` accumulated over the
/// kernel in a fixed order, so the value depends only on its input window and
/// not on the image size or tile layout.
pub fn conv2d_valid<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<T>) -> Result<FeatureMap<T>> {
    check_conv(input, kernel)?;
    let k = kernel.size;
    let (h, w) = (input.height() - k + 1, input.width() - k + 1);
    let mut out = FeatureMap::zeros(kernel.c_out, h, w);
    for (c, plane) in out.values_mut().chunks_exact_mut(h * w).enumerate() {
        plane.fill(kernel.bias[c]);
    }
    let kk = kernel.c_in * k * k;
    let rows_per_tile = (TILE_PIXELS / w).max(1);
    let mut col = Vec::new();
    let mut y0 = 0;
    while y0 < h {
        let rows = rows_per_tile.min(h - y0);
        let n = rows * w;
        im2col(input, k, y0, rows, w, &mut col);
        let out_vals = out.values_mut();
        // SAFETY: `weights` is c_out x kk row-major, `col` is kk x n row-major and
        // the output tile is c_out rows of n contiguous pixels strided by h*w.
        unsafe {
            T::gemm(
                kernel.c_out,
                kk,
                n,
                kernel.weights.as_ptr(),
                kk as isize,
                1,
                col.as_ptr(),
                n as isize,
                1,
                T::one(),
                out_vals.as_mut_ptr().add(y0 * w),
                (h * w) as isize,
                1,
            );
        }
        y0 += rows;
    }
    Ok(out)
}

fn check_conv<T: Real>(input: &FeatureMap<T>, kernel: &ConvKernel<T>) -> Result<()> {
    if input.channels() != kernel.c_in {
        return Err(ConvNetError::ChannelMismatch { expected: kernel.c_in, actual: input.channels() });
    }
    if input.height() < kernel.size || input.width() < kernel.size {
        return Err(ConvNetError::InputTooSmall {
            height: input.height(),
            width: input.width(),
            kernel: kernel.size,
        });
    }
    Ok(())
}

/// Fill `col` (kk x rows*w) with the input windows of output rows `y0..y0+rows`.
fn im2col<T: Real>(input: &FeatureMap<T>, k: usize, y0: usize, rows: usize, w: usize, col: &mut Vec<T>) {
    let n = rows * w;
    let (ih, iw) = (input.height(), input.width());
    let vals = input.values();
    col.clear();
    col.resize(input.channels() * k * k * n, T::zero());
    for ci in 0..input.channels() {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for r in 0..rows {
                    let src = (ci * ih + y0 + r + ky) * iw + kx;
                    col[row + r * w..row + (r + 1) * w].copy_from_slice(&vals[src..src + w]);
                }
            }
        }
    }
}

/// Back-propagate `dout` through [`conv2d_valid`], accumulating weight and
/// bias gradients into `grad` (shaped like `kernel`). The input gradient is
/// only formed when requested.
pub(crate) fn conv2d_backward<T: Real>(
    input: &FeatureMap<T>,
    kernel: &ConvKernel<T>,
    dout: &FeatureMap<T>,
    grad: &mut ConvKernel<T>,
    want_input: bool,
) -> Option<FeatureMap<T>> {
    let k = kernel.size;
    let (h, w) = (dout.height(), dout.width());
    let kk = kernel.c_in * k * k;
    for (c, plane) in dout.values().chunks_exact(h * w).enumerate() {
        let mut s = T::zero();
        for &v in plane {
            s = s + v;
        }
        grad.bias[c] = grad.bias[c] + s;
    }
    let mut din = want_input.then(|| FeatureMap::zeros(input.channels(), input.height(), input.width()));
    let rows_per_tile = (TILE_PIXELS / w).max(1);
    let mut col = Vec::new();
    let mut dcol: Vec<T> = Vec::new();
    let mut y0 = 0;
    while y0 < h {
        let rows = rows_per_tile.min(h - y0);
        let n = rows * w;
        im2col(input, k, y0, rows, w, &mut col);
        // SAFETY: dout tile is c_out x n (row stride h*w), col^T is n x kk,
        // dweights is c_out x kk row-major.
        unsafe {
            T::gemm(
                kernel.c_out,
                n,
                kk,
                dout.values().as_ptr().add(y0 * w),
                (h * w) as isize,
                1,
                col.as_ptr(),
                1,
                n as isize,
                T::one(),
                grad.weights.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if let Some(din) = din.as_mut() {
            dcol.clear();
            dcol.resize(kk * n, T::zero());
            // SAFETY: weights^T is kk x c_out, dout tile c_out x n, dcol kk x n.
            unsafe {
                T::gemm(
                    kk,
                    kernel.c_out,
                    n,
                    kernel.weights.as_ptr(),
                    1,
                    kk as isize,
                    dout.values().as_ptr().add(y0 * w),
                    (h * w) as isize,
                    1,
                    T::zero(),
                    dcol.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            let (ih, iw) = (din.height(), din.width());
            let dv = din.values_mut();
            for ci in 0..kernel.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((ci * k + ky) * k + kx) * n;
                        for r in 0..rows {
                            let dst = (ci * ih + y0 + r + ky) * iw + kx;
                            let src = &dcol[row + r * w..row + (r + 1) * w];
                            for (d, &s) in dv[dst..dst + w].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                }
            }
        }
        y0 += rows;
    }
    din
}

/// 2x2 max pool with stride 2 whose windows start at `phase = (py, px)`.
///
/// Windows that run past the bottom/right border are truncated to the voxels
/// that exist, so the output is `ceil((H - py) / 2) x ceil((W - px) / 2)`.
pub fn maxpool2_stride2<T: Real>(fm: &FeatureMap<T>, phase: (usize, usize)) -> Result<FeatureMap<T>> {
    let (py, px) = phase;
    if py > 1 || px > 1 {
        return Err(ConvNetError::BadPhase(phase));
    }
    let (h, w) = (fm.height(), fm.width());
    if h <= py || w <= px {
        return Err(ConvNetError::EmptyPool);
    }
    let (oh, ow) = ((h - py).div_ceil(2), (w - px).div_ceil(2));
    let mut out = Vec::with_capacity(fm.channels() * oh * ow);
    for c in 0..fm.channels() {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (py + 2 * oy, px + 2 * ox);
                let mut m = fm.at(c, y, x);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    if y + dy < h && x + dx < w {
                        m = m.max(fm.at(c, y + dy, x + dx));
                    }
                }
                out.push(m);
            }
        }
    }
    FeatureMap::new(fm.channels(), oh, ow, out)
}

/// Max pool over full 2x2 windows only; also returns, per output element, the
/// flat input index of the winning element (first maximum in scan order).
pub(crate) fn pool_full<T: Real>(fm: &FeatureMap<T>, py: usize, px: usize, want_argmax: bool) -> (FeatureMap<T>, Vec<u32>) {
    let (h, w) = (fm.height(), fm.width());
    let oh = h.saturating_sub(py) / 2;
    let ow = w.saturating_sub(px) / 2;
    let mut out = Vec::with_capacity(fm.channels() * oh * ow);
    let mut arg = Vec::with_capacity(if want_argmax { out.capacity() } else { 0 });
    let vals = fm.values();
    for c in 0..fm.channels() {
        for oy in 0..oh {
            let r0 = (c * h + py + 2 * oy) * w + px;
            let r1 = r0 + w;
            for ox in 0..ow {
                let i = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                let mut best = i[0];
                for &j in &i[1..] {
                    if vals[j] > vals[best] {
                        best = j;
                    }
                }
                out.push(vals[best]);
                if want_argmax {
                    arg.push(best as u32);
                }
            }
        }
    }
    let fm = FeatureMap { channels: fm.channels(), height: oh, width: ow, values: out };
    (fm, arg)
}

/// Element-wise maximum of two equally shaped maps.
pub fn maxout2<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.shape() != b.shape() {
        return Err(ConvNetError::ShapeMismatch(a.shape(), b.shape()));
    }
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| if x >= y { x } else { y }).collect();
    FeatureMap::new(a.channels(), a.height(), a.width(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fm(c: usize, h: usize, w: usize, v: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::new(c, h, w, v).unwrap()
    }

    fn naive_conv(input: &FeatureMap<f64>, k: &ConvKernel<f64>) -> FeatureMap<f64> {
        let (h, w) = (input.height() - k.size + 1, input.width() - k.size + 1);
        let mut out = vec![0.0; k.c_out * h * w];
        for co in 0..k.c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut s = k.bias[co];
                    for ci in 0..k.c_in {
                        for ky in 0..k.size {
                            for kx in 0..k.size {
                                s += k.weight(co, ci, ky, kx) * input.at(ci, y + ky, x + kx);
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = s;
                }
            }
        }
        fm(k.c_out, h, w, out)
    }

    #[test]
    fn identity_kernel() {
        let input = fm(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = ConvKernel::new(1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        assert_eq!(conv2d_valid(&input, &k).unwrap(), input);
    }

    #[test]
    fn hand_computed_sums() {
        let input = fm(1, 3, 3, (1..=9).map(f64::from).collect());
        let k = ConvKernel::new(1, 1, 2, vec![1.0; 4], vec![0.0]).unwrap();
        assert_eq!(conv2d_valid(&input, &k).unwrap().values(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_errors() {
        let k = ConvKernel::<f64>::new(2, 1, 4, vec![0.0; 32], vec![0.0]).unwrap();
        let small = FeatureMap::<f64>::zeros(2, 3, 8);
        assert!(matches!(conv2d_valid(&small, &k), Err(ConvNetError::InputTooSmall { .. })));
        let wrong = FeatureMap::<f64>::zeros(3, 8, 8);
        assert!(matches!(conv2d_valid(&wrong, &k), Err(ConvNetError::ChannelMismatch { .. })));
    }

    #[test]
    fn random_conv_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (ci, co, h, w, ks) in [(1, 32, 20, 17, 4), (5, 3, 9, 70, 4), (32, 2, 6, 6, 6), (3, 4, 130, 40, 4)] {
            let input = fm(ci, h, w, (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
            let k = ConvKernel::new(
                ci,
                co,
                ks,
                (0..co * ci * ks * ks).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..co).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let got = conv2d_valid(&input, &k).unwrap();
            let want = naive_conv(&input, &k);
            for (a, b) in got.values().iter().zip(want.values()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            let got32 = conv2d_valid(&input.cast::<f32>(), &k.cast::<f32>()).unwrap();
            for (a, b) in got32.values().iter().zip(want.values()) {
                assert!((*a as f64 - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_backward_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ci, co, h, w, ks) = (3, 2, 7, 6, 4);
        let input = fm(ci, h, w, (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
        let k = ConvKernel::new(ci, co, ks, (0..co * ci * 16).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![0.0; co])
            .unwrap();
        let (oh, ow) = (h - 3, w - 3);
        let dout = fm(co, oh, ow, (0..co * oh * ow).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut g = ConvKernel::zeros(ci, co, 4);
        let gin = conv2d_backward(&input, &k, &dout, &mut g, true);
        let mut dw = vec![0.0; co * ci * 16];
        let mut din = vec![0.0; ci * h * w];
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let d = dout.at(o, y, x);
                    for c in 0..ci {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                dw[((o * ci + c) * 4 + ky) * 4 + kx] += d * input.at(c, y + ky, x + kx);
                                din[(c * h + y + ky) * w + x + kx] += d * k.weight(o, c, ky, kx);
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in g.weights.iter().zip(&dw) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in gin.unwrap().values().iter().zip(&din) {
            assert!((a - b).abs() < 1e-10);
        }
        let db: f64 = dout.values()[..oh * ow].iter().sum();
        assert!((g.bias[0] - db).abs() < 1e-12);
    }

    #[test]
    fn pool_examples() {
        let c = fm(1, 4, 6, vec![3.0; 24]);
        let p = maxpool2_stride2(&c, (0, 0)).unwrap();
        assert_eq!(p.shape(), [1, 2, 3]);
        assert!(p.values().iter().all(|&v| v == 3.0));

        let m = fm(1, 4, 4, (0..16).map(f64::from).collect());
        assert_eq!(maxpool2_stride2(&m, (0, 0)).unwrap().values(), &[5.0, 7.0, 13.0, 15.0]);
        let shifted = maxpool2_stride2(&m, (1, 1)).unwrap();
        assert_eq!(shifted.at(0, 0, 0), 10.0);
        assert_eq!(shifted.shape(), [1, 2, 2]);
        // truncated border windows
        assert_eq!(shifted.values(), &[10.0, 11.0, 14.0, 15.0]);

        assert!(matches!(maxpool2_stride2(&fm(1, 1, 1, vec![0.0]), (1, 0)), Err(ConvNetError::EmptyPool)));
        assert!(matches!(maxpool2_stride2(&m, (2, 0)), Err(ConvNetError::BadPhase(_))));
    }

    #[test]
    fn pool_full_argmax_prefers_first() {
        let m = fm(1, 2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let (p, arg) = pool_full(&m, 0, 0, true);
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(arg, vec![0]);
        let m = fm(1, 2, 2, vec![0.0, 2.0, 2.0, 1.0]);
        assert_eq!(pool_full(&m, 0, 0, true).1, vec![1]);
    }

    #[test]
    fn maxout_examples() {
        let a = fm(1, 1, 2, vec![1.0, -2.0]);
        let b = fm(1, 1, 2, vec![0.0, 5.0]);
        assert_eq!(maxout2(&a, &b).unwrap().values(), &[1.0, 5.0]);
        assert_eq!(maxout2(&a, &a).unwrap(), a);
        assert!(maxout2(&a, &fm(1, 2, 1, vec![0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn maxout_commutes(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
            let n = v.len();
            let a = fm(1, 1, n, v.iter().map(|p| p.0).collect());
            let b = fm(1, 1, n, v.iter().map(|p| p.1).collect());
            prop_assert_eq!(maxout2(&a, &b).unwrap(), maxout2(&b, &a).unwrap());
        }
    }
}
