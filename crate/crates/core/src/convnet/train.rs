use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::softmax2;
use super::ops::{conv2d_backward, conv2d_valid, maxout2, pool_full};
use super::{ConvNetError, FeatureMap, MaxoutNetParams, Real, Result, CANONICAL_WIDTH, RECEPTIVE_FIELD};

const MIN_PROB: f64 = 1e-12;

/// Negative log-likelihood of `label` under `(p_bg, p_fg)`, with the
/// probability clamped at `1e-12`.
pub fn loss_bce<T: Real>(predicted: (T, T), label: u8) -> T {
    let p = if label == 0 { predicted.0 } else { predicted.1 };
    -p.max(T::lit(MIN_PROB)).ln()
}

/// One labelled training patch (1x69x69, values in `[0, 1]`).
#[derive(Debug, Clone)]
pub struct Sample {
    pub patch: FeatureMap<f32>,
    pub label: u8,
}

/// SGD-with-momentum settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of every mini-batch drawn from the positive class.
    pub class_balance: f64,
    pub seed: u64,
    /// Channel width; 32 is the published network.
    pub width: usize,
    /// Random flips/transposes of each drawn patch.
    pub augment: bool,
    /// Rescale each batch gradient to at most this L2 norm; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 30,
            class_balance: 0.5,
            seed: 0,
            width: CANONICAL_WIDTH,
            augment: true,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConvNetError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return bad("class balance must lie strictly between 0 and 1");
        }
        if self.width == 0 {
            return bad("width must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

struct LayerTrace<T> {
    input: FeatureMap<T>,
    a: FeatureMap<T>,
    b: FeatureMap<T>,
    argmax: Vec<u32>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    last: FeatureMap<T>,
    probs: (T, T),
}

fn trace<T: Real>(patch: &FeatureMap<T>, params: &MaxoutNetParams<T>) -> Result<Trace<T>> {
    if patch.shape() != [1, RECEPTIVE_FIELD, RECEPTIVE_FIELD] {
        return Err(ConvNetError::WrongPatchSize { actual: patch.shape() });
    }
    let mut layers = Vec::with_capacity(3);
    let mut x = patch.clone();
    for layer in &params.layers {
        let a = conv2d_valid(&x, &layer.branches[0])?;
        let b = conv2d_valid(&x, &layer.branches[1])?;
        let (pooled, argmax) = pool_full(&maxout2(&a, &b)?, 0, 0, true);
        layers.push(LayerTrace { input: x, a, b, argmax });
        x = pooled;
    }
    let z = conv2d_valid(&x, &params.final_layer)?;
    let probs = softmax2(z.values()[0], z.values()[1]);
    Ok(Trace { layers, last: x, probs })
}

/// Add `scale * d loss / d params` for one patch into `grad`; returns the loss.
fn accumulate<T: Real>(
    patch: &FeatureMap<T>,
    label: u8,
    params: &MaxoutNetParams<T>,
    scale: T,
    grad: &mut MaxoutNetParams<T>,
) -> Result<T> {
    let t = trace(patch, params)?;
    let loss = loss_bce(t.probs, label);
    let (p_bg, p_fg) = t.probs;
    let p_label = if label == 0 { p_bg } else { p_fg };
    let dz = if p_label.as_f64() < MIN_PROB {
        [T::zero(), T::zero()]
    } else {
        let y = if label == 0 { [T::one(), T::zero()] } else { [T::zero(), T::one()] };
        [(p_bg - y[0]) * scale, (p_fg - y[1]) * scale]
    };
    let dz = FeatureMap::new(2, 1, 1, dz.to_vec())?;
    let mut d = conv2d_backward(&t.last, &params.final_layer, &dz, &mut grad.final_layer, true).expect("requested");
    for (l, lt) in t.layers.iter().enumerate().rev() {
        let shape = lt.a.shape();
        let mut dm = vec![T::zero(); lt.a.values().len()];
        for (&i, &g) in lt.argmax.iter().zip(d.values()) {
            dm[i as usize] = dm[i as usize] + g;
        }
        let (mut da, mut db) = (dm.clone(), dm);
        for (i, (&av, &bv)) in lt.a.values().iter().zip(lt.b.values()).enumerate() {
            if av >= bv {
                db[i] = T::zero();
            } else {
                da[i] = T::zero();
            }
        }
        let da = FeatureMap::new(shape[0], shape[1], shape[2], da)?;
        let db = FeatureMap::new(shape[0], shape[1], shape[2], db)?;
        let want = l > 0;
        let [g0, g1] = &mut grad.layers[l].branches;
        let di0 = conv2d_backward(&lt.input, &params.layers[l].branches[0], &da, g0, want);
        let di1 = conv2d_backward(&lt.input, &params.layers[l].branches[1], &db, g1, want);
        if let (Some(mut a), Some(b)) = (di0, di1) {
            for (x, &y) in a.values_mut().iter_mut().zip(b.values()) {
                *x = *x + y;
            }
            d = a;
        }
    }
    Ok(loss)
}

/// Exact gradient of `loss_bce(forward_patch(patch), label)`.
///
/// Max and max-pool route the incoming gradient to their winning input; ties
/// go to the first candidate in scan order (branch 0 for maxout).
pub fn backward<T: Real>(patch: &FeatureMap<T>, label: u8, params: &MaxoutNetParams<T>) -> Result<MaxoutNetParams<T>> {
    backward_scaled(patch, label, params, T::one())
}

/// Gradient of `scale * loss`.
pub fn backward_scaled<T: Real>(
    patch: &FeatureMap<T>,
    label: u8,
    params: &MaxoutNetParams<T>,
    scale: T,
) -> Result<MaxoutNetParams<T>> {
    let mut grad = params.zeros_like();
    accumulate(patch, label, params, scale, &mut grad)?;
    Ok(grad)
}

/// Apply one of the eight square symmetries to a single-channel patch.
fn dihedral(patch: &FeatureMap<f32>, t: u8) -> FeatureMap<f32> {
    if t == 0 {
        return patch.clone();
    }
    let n = patch.height();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = if t & 4 != 0 { (x, y) } else { (y, x) };
            if t & 1 != 0 {
                sx = n - 1 - sx;
            }
            if t & 2 != 0 {
                sy = n - 1 - sy;
            }
            out.push(patch.at(0, sy, sx));
        }
    }
    FeatureMap::new(1, n, n, out).expect("square patch")
}

/// Endless shuffled stream over one class's sample indices.
struct ClassStream {
    items: Vec<usize>,
    pos: usize,
}

impl ClassStream {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.items.len() {
            self.items.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.items[self.pos - 1]
    }
}

/// Train a fresh network (initialised from `config.seed`).
pub fn train(samples: &[Sample], config: &TrainConfig) -> Result<MaxoutNetParams> {
    train_with_report(samples, config).map(|(p, _)| p)
}

/// [`train`] plus per-epoch losses.
///
/// Mini-batches are class balanced: slot `i` of the global slot sequence is
/// positive iff `floor((i + 1) * balance) > floor(i * balance)`. Per-sample
/// gradients are computed in parallel and summed in batch order, so results
/// do not depend on the thread count.
pub fn train_with_report(samples: &[Sample], config: &TrainConfig) -> Result<(MaxoutNetParams, TrainReport)> {
    config.validate()?;
    let positives: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label != 0).collect();
    let negatives: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == 0).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(ConvNetError::SingleClass { positives: positives.len(), negatives: negatives.len() });
    }
    if let Some(s) = samples.iter().find(|s| s.patch.shape() != [1, RECEPTIVE_FIELD, RECEPTIVE_FIELD]) {
        return Err(ConvNetError::WrongPatchSize { actual: s.patch.shape() });
    }
    let mut params = MaxoutNetParams::<f32>::random(config.width, config.seed);
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A41);
    let mut pos = ClassStream { items: positives, pos: 0 };
    let mut neg = ClassStream { items: negatives, pos: 0 };
    pos.pos = pos.items.len();
    neg.pos = neg.items.len();
    let batches = samples.len().div_ceil(config.batch_size);
    let (lr, mu) = (config.learning_rate as f32, config.momentum as f32);
    let mut slot = 0u64;
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for _ in 0..batches {
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let b = config.class_balance;
                let positive = ((slot + 1) as f64 * b).floor() > (slot as f64 * b).floor();
                slot += 1;
                let idx = if positive { pos.next(&mut rng) } else { neg.next(&mut rng) };
                let t = if config.augment { rng.random_range(0..8u8) } else { 0 };
                batch.push((idx, t));
            }
            let results: Vec<Result<(f32, MaxoutNetParams)>> = batch
                .par_iter()
                .map(|&(idx, t)| {
                    let s = &samples[idx];
                    let patch = dihedral(&s.patch, t);
                    let mut g = params.zeros_like();
                    let loss = accumulate(&patch, s.label, &params, 1.0, &mut g)?;
                    Ok((loss, g))
                })
                .collect();
            let mut grad = params.zeros_like();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss as f64;
                seen += 1;
                for (acc, gi) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                    for (a, &v) in acc.iter_mut().zip(gi) {
                        *a += v;
                    }
                }
            }
            let mut inv = 1.0 / batch.len() as f32;
            if config.clip_norm > 0.0 {
                let sq: f64 = grad.tensors().iter().flat_map(|t| t.iter()).map(|&g| (g * inv) as f64 * (g * inv) as f64).sum();
                if sq.sqrt() > config.clip_norm {
                    inv *= (config.clip_norm / sq.sqrt()) as f32;
                }
            }
            for ((p, v), g) in params.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grad.tensors()) {
                for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v - lr * (g * inv);
                    *p += *v;
                }
            }
        }
        let mean = epoch_loss / seen.max(1) as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(ConvNetError::Diverged { epoch, loss: mean });
        }
        report.epoch_losses.push(mean);
    }
    Ok((params, report))
}

/// Which branch wins every maxout and which input wins every pool window.
/// The loss is smooth in the parameters wherever this does not change.
pub fn routing<T: Real>(patch: &FeatureMap<T>, params: &MaxoutNetParams<T>) -> Result<Vec<u32>> {
    let t = trace(patch, params)?;
    let mut r = Vec::new();
    for l in &t.layers {
        r.extend(l.a.values().iter().zip(l.b.values()).map(|(a, b)| (a >= b) as u32));
        r.extend_from_slice(&l.argmax);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::forward_patch;

    fn patch(seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(1, 69, 69, (0..69 * 69).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(loss_bce((0.0f64, 1.0), 1), 0.0);
        assert!((loss_bce((0.5f64, 0.5), 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_bce((0.7f64, 0.3), 1) > loss_bce((0.6f64, 0.4), 1));
        assert!((loss_bce((1.0f64, 0.0), 1) - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn losing_branch_gets_no_gradient() {
        let mut p = MaxoutNetParams::<f64>::random(4, 2);
        // branch 1 of the first layer can never win
        for b in &mut p.layers[0].branches[1].bias {
            *b = -1e6;
        }
        let g = backward(&patch(1), 1, &p).unwrap();
        assert!(g.layers[0].branches[1].weights.iter().all(|&v| v == 0.0));
        assert!(g.layers[0].branches[1].bias.iter().all(|&v| v == 0.0));
        assert!(g.layers[0].branches[0].weights.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let p = MaxoutNetParams::<f64>::random(4, 3);
        let g1 = backward(&patch(2), 0, &p).unwrap();
        let g2 = backward_scaled(&patch(2), 0, &p, 2.0).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    /// Smooth input keeps max/pool comparisons well separated from `h`.
    fn smooth_patch() -> FeatureMap<f64> {
        let v = (0..69 * 69)
            .map(|i| {
                let (y, x) = ((i / 69) as f64, (i % 69) as f64);
                0.5 + 0.3 * (0.23 * y + 0.11 * x).sin() + 0.2 * (0.07 * x * y / 10.0).cos()
            })
            .collect();
        FeatureMap::new(1, 69, 69, v).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // seed chosen so every bias channel has kink-free neighbourhoods at h
        let p = MaxoutNetParams::<f64>::random(4, 4);
        let x = smooth_patch();
        let g = backward(&x, 1, &p).unwrap();
        let loss = |q: &MaxoutNetParams<f64>| loss_bce(forward_patch(&x, q).unwrap(), 1);
        let h = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = [0usize; 14];
        let mut attempts = 0;
        while checked.iter().sum::<usize>() < 210 {
            attempts += 1;
            assert!(attempts < 20_000, "too many kinks: {checked:?}");
            let t = attempts % 14;
            if checked[t] >= 15 {
                continue;
            }
            let i = rng.random_range(0..p.tensors()[t].len());
            let mut plus = p.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[t][i] -= h;
            let base = routing(&x, &p).unwrap();
            if routing(&x, &plus).unwrap() != base || routing(&x, &minus).unwrap() != base {
                continue;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = g.tensors()[t][i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
            assert!(rel < 1e-3, "tensor {t} index {i}: {analytic} vs {numeric}");
            checked[t] += 1;
        }
    }

    #[test]
    fn dihedral_group_closes() {
        let p = patch(9).cast::<f32>();
        for t in 0..8u8 {
            let q = dihedral(&p, t);
            assert_eq!(q.shape(), p.shape());
        }
        assert_eq!(dihedral(&dihedral(&p, 1), 1), p);
        assert_eq!(dihedral(&dihedral(&p, 4), 4), p);
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let base = if label == 1 { 0.75 } else { 0.25 };
                let v = (0..69 * 69).map(|_| base + rng.random_range(-0.1..0.1)).collect();
                Sample { patch: FeatureMap::new(1, 69, 69, v).unwrap(), label }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig { width: 4, epochs: 25, batch_size: 5, learning_rate: 0.02, augment: false, seed: 3, ..Default::default() }
    }

    #[test]
    fn separable_toy_converges() {
        let samples = toy_samples(50);
        let (params, report) = train_with_report(&samples, &toy_config()).unwrap();
        let mean: f64 = samples
            .iter()
            .map(|s| loss_bce(forward_patch(&s.patch, &params).unwrap(), s.label) as f64)
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mean < 0.1, "final mean loss {mean}");
        let tail = &report.epoch_losses[5..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", report.epoch_losses);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(20);
        let cfg = TrainConfig { epochs: 3, augment: true, ..toy_config() };
        assert_eq!(train(&samples, &cfg).unwrap(), train(&samples, &cfg).unwrap());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let samples = toy_samples(10);
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.0, ..toy_config() };
        assert_eq!(train(&samples, &cfg).unwrap(), MaxoutNetParams::random(4, cfg.seed));
    }

    #[test]
    fn single_class_is_rejected() {
        let samples: Vec<_> = toy_samples(10).into_iter().filter(|s| s.label == 1).collect();
        assert!(matches!(train(&samples, &toy_config()), Err(ConvNetError::SingleClass { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        let samples = toy_samples(10);
        let cfg = TrainConfig { learning_rate: 1e30, epochs: 5, ..toy_config() };
        assert!(matches!(train(&samples, &cfg), Err(ConvNetError::Diverged { .. })));
    }
}
