//! Anisotropic Euclidean distance transform.
//!
//! Exact, via three 1-D lower-envelope passes over squared physical
//! distances, so it is well inside any chamfer error bound.

/// Distance in nanometres from every voxel to the nearest `true` voxel of
/// `mask`; `f64::INFINITY` everywhere when the mask is empty.
pub fn distance_to_vesicles(mask: &[bool], dims: [usize; 3], resolution_nm: [f64; 3]) -> Vec<f64> {
    let mut sq = squared_edt(mask, dims, resolution_nm);
    for v in &mut sq {
        *v = v.sqrt();
    }
    sq
}

/// Squared distances in nm².
pub fn squared_edt(mask: &[bool], dims: [usize; 3], resolution_nm: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    assert_eq!(mask.len(), n, "mask length");
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let longest = *dims.iter().max().unwrap_or(&0);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);
    for axis in 0..3 {
        let len = dims[axis];
        let w2 = resolution_nm[axis] * resolution_nm[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for j in 0..dims[others[1]] {
            for i in 0..dims[others[0]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..len {
                    line[k] = d[base + k * strides[axis]];
                }
                env.transform(&line[..len], w2, &mut out[..len]);
                for k in 0..len {
                    d[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    d
}

/// Lower envelope of parabolas `w2 (x - q)^2 + f(q)`.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], w2: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                let Some(&p) = self.v.last() else {
                    self.v.push(q);
                    self.z.push(f64::NEG_INFINITY);
                    break;
                };
                let (qf, pf) = (q as f64, p as f64);
                let s = ((fq + w2 * qf * qf) - (f[p] + w2 * pf * pf)) / (2.0 * w2 * (qf - pf));
                if s <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(s);
                    break;
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (x, o) in out.iter_mut().enumerate() {
            let xf = x as f64;
            while k + 1 < self.v.len() && self.z[k + 1] < xf {
                k += 1;
            }
            let dx = xf - self.v[k] as f64;
            *o = w2 * dx * dx + f[self.v[k]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RES: [f64; 3] = [6.0, 6.0, 29.0];

    fn brute(mask: &[bool], dims: [usize; 3], res: [f64; 3]) -> Vec<f64> {
        let pts: Vec<[f64; 3]> = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| [(i % dims[0]) as f64, ((i / dims[0]) % dims[1]) as f64, (i / (dims[0] * dims[1])) as f64])
            .collect();
        (0..mask.len())
            .map(|i| {
                let p = [(i % dims[0]) as f64, ((i / dims[0]) % dims[1]) as f64, (i / (dims[0] * dims[1])) as f64];
                pts.iter()
                    .map(|q| (0..3).map(|a| ((p[a] - q[a]) * res[a]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_steps_are_anisotropic() {
        let dims = [3, 1, 2];
        let mut mask = vec![false; 6];
        mask[0] = true;
        let d = distance_to_vesicles(&mask, dims, RES);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[3], 29.0);
    }

    #[test]
    fn empty_mask_is_infinite() {
        let d = distance_to_vesicles(&[false; 8], [2, 2, 2], RES);
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            dims in (1usize..9, 1usize..9, 1usize..5),
            bits in proptest::collection::vec(0u8..20, 324),
        ) {
            let dims = [dims.0, dims.1, dims.2];
            let n = dims.iter().product::<usize>();
            let mask: Vec<bool> = bits[..n].iter().map(|&b| b == 0).collect();
            let fast = distance_to_vesicles(&mask, dims, RES);
            let slow = brute(&mask, dims, RES);
            for (a, b) in fast.iter().zip(&slow) {
                if b.is_infinite() {
                    prop_assert!(a.is_infinite());
                } else {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b), "{} vs {}", a, b);
                }
            }
        }
    }
}
