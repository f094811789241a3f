//! Fully connected ELU network over a flat parameter vector whose last
//! layer (weights and biases) is the node-specific head.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU (alpha = 1). Continuous at 0 and bounded by 1.
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Layer sizes `[d_in, h_1, ..., h_m, C]`. Parameters are stored layer by
/// layer, each as a row-major `out x in` weight block followed by `out`
/// biases, so the head is the contiguous tail of the vector.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamLayout {
    sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    fan_in: usize,
    fan_out: usize,
    /// Offset within the global part, or within the head for the last layer.
    offset: usize,
    is_head: bool,
}

impl LayerSpec {
    fn weights<'a>(&self, part: &'a [f64]) -> &'a [f64] {
        &part[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, part: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.fan_in * self.fan_out;
        &part[start..start + self.fan_out]
    }
}

impl ParamLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_len(&self, l: usize) -> usize {
        (self.sizes[l] + 1) * self.sizes[l + 1]
    }

    /// Parameter count of every layer but the last.
    pub fn n_global(&self) -> usize {
        (0..self.n_layers() - 1).map(|l| self.layer_len(l)).sum()
    }

    /// Head size `F = (h_m + 1) * C`.
    pub fn head_len(&self) -> usize {
        self.layer_len(self.n_layers() - 1)
    }

    pub fn total(&self) -> usize {
        self.n_global() + self.head_len()
    }

    fn layer(&self, l: usize) -> LayerSpec {
        let last = l == self.n_layers() - 1;
        let offset = if last {
            0
        } else {
            (0..l).map(|k| self.layer_len(k)).sum()
        };
        LayerSpec {
            fan_in: self.sizes[l],
            fan_out: self.sizes[l + 1],
            offset,
            is_head: last,
        }
    }
}

/// Flat parameter vector with global/head views into the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    n_global: usize,
}

impl ParamVector {
    pub fn zeros(layout: &ParamLayout) -> Self {
        Self {
            data: vec![0.0; layout.total()],
            n_global: layout.n_global(),
        }
    }

    pub fn from_parts(global: &[f64], head: &[f64]) -> Self {
        let mut data = global.to_vec();
        data.extend_from_slice(head);
        Self {
            data,
            n_global: global.len(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn global(&self) -> &[f64] {
        &self.data[..self.n_global]
    }

    pub fn head(&self) -> &[f64] {
        &self.data[self.n_global..]
    }

    pub fn global_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.n_global]
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.n_global..]
    }

    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.data.split_at_mut(self.n_global)
    }

    /// Checkpoint: `b"GATP"`, u32 layer count, u32 sizes, then the values as
    /// little-endian f64.
    pub fn write_snapshot<W: Write>(&self, layout: &ParamLayout, mut out: W) -> Result<()> {
        if layout.total() != self.len() {
            return Err(Error::Dimension {
                what: "snapshot parameters",
                expected: layout.total(),
                got: self.len(),
            });
        }
        out.write_all(b"GATP")?;
        out.write_all(&(layout.sizes.len() as u32).to_le_bytes())?;
        for &s in &layout.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<(ParamLayout, Self)> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"GATP" {
            return Err(Error::Parse("not a parameter snapshot".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut word)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        let layout = ParamLayout::new(sizes)?;
        let mut data = vec![0.0; layout.total()];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let n_global = layout.n_global();
        Ok((layout, Self { data, n_global }))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(layout: &ParamLayout, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut p = ParamVector::zeros(layout);
    let (global, head) = p.split_mut();
    for l in 0..layout.n_layers() {
        let spec = layout.layer(l);
        let part: &mut [f64] = if spec.is_head { head } else { global };
        let s = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
        for w in &mut part[spec.offset..spec.offset + spec.fan_in * spec.fan_out] {
            *w = rng.random_range(-s..s);
        }
    }
    p
}

/// Pre-activations and activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
    /// (the last one being the logits).
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

fn check_parts(layout: &ParamLayout, global: &[f64], head: &[f64]) -> Result<()> {
    if global.len() != layout.n_global() {
        return Err(Error::Dimension {
            what: "global parameters",
            expected: layout.n_global(),
            got: global.len(),
        });
    }
    if head.len() != layout.head_len() {
        return Err(Error::Dimension {
            what: "head parameters",
            expected: layout.head_len(),
            got: head.len(),
        });
    }
    Ok(())
}

/// ELU after every layer but the last; the last layer is linear.
pub fn forward(layout: &ParamLayout, global: &[f64], head: &[f64], x: &[f64]) -> Result<Forward> {
    check_parts(layout, global, head)?;
    if x.len() != layout.input_dim() {
        return Err(Error::Dimension {
            what: "input features",
            expected: layout.input_dim(),
            got: x.len(),
        });
    }
    Ok(forward_unchecked(layout, global, head, x))
}

fn forward_unchecked(layout: &ParamLayout, global: &[f64], head: &[f64], x: &[f64]) -> Forward {
    let n_layers = layout.n_layers();
    let mut acts = Vec::with_capacity(n_layers + 1);
    let mut pre = Vec::with_capacity(n_layers);
    acts.push(x.to_vec());
    for l in 0..n_layers {
        let spec = layout.layer(l);
        let part = if spec.is_head { head } else { global };
        let (w, b) = (spec.weights(part), spec.bias(part));
        let input = &acts[l];
        let z: Vec<f64> = (0..spec.fan_out)
            .map(|o| {
                let row = &w[o * spec.fan_in..(o + 1) * spec.fan_in];
                b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let a = if spec.is_head {
            z.clone()
        } else {
            z.iter().map(|&v| elu(v)).collect()
        };
        pre.push(z);
        acts.push(a);
    }
    Forward { acts, pre }
}

/// Returns `(loss, softmax probabilities)` for one sample.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub global: Vec<f64>,
    pub head: Vec<f64>,
}

/// Mean softmax cross-entropy over `batch` (indices into `data`) and its
/// gradient with respect to both parameter parts.
pub fn loss_and_grad(
    layout: &ParamLayout,
    global: &[f64],
    head: &[f64],
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Gradients)> {
    check_parts(layout, global, head)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if data.dim() != layout.input_dim() {
        return Err(Error::Dimension {
            what: "dataset features",
            expected: layout.input_dim(),
            got: data.dim(),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients {
        global: vec![0.0; global.len()],
        head: vec![0.0; head.len()],
    };
    let mut total = 0.0;
    for &idx in batch {
        let fwd = forward_unchecked(layout, global, head, data.row(idx));
        let (loss, probs) = softmax_cross_entropy(fwd.logits(), data.label(idx));
        total += loss;
        let mut delta: Vec<f64> = probs;
        delta[data.label(idx)] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= scale);
        for l in (0..layout.n_layers()).rev() {
            let spec = layout.layer(l);
            let (part, gpart) = if spec.is_head {
                (head, &mut grads.head)
            } else {
                (global, &mut grads.global)
            };
            let input = &fwd.acts[l];
            for o in 0..spec.fan_out {
                let row = spec.offset + o * spec.fan_in;
                for (g, a) in gpart[row..row + spec.fan_in].iter_mut().zip(input) {
                    *g += delta[o] * a;
                }
                gpart[spec.offset + spec.fan_in * spec.fan_out + o] += delta[o];
            }
            if l > 0 {
                let w = spec.weights(part);
                let prev_pre = &fwd.pre[l - 1];
                delta = (0..spec.fan_in)
                    .map(|i| {
                        let s: f64 = (0..spec.fan_out).map(|o| w[o * spec.fan_in + i] * delta[o]).sum();
                        s * elu_grad(prev_pre[i])
                    })
                    .collect();
            }
        }
    }
    Ok((total * scale, grads))
}

/// Mean loss without gradients.
pub fn loss(layout: &ParamLayout, global: &[f64], head: &[f64], data: &Dataset, batch: &[usize]) -> Result<f64> {
    check_parts(layout, global, head)?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let total: f64 = batch
        .iter()
        .map(|&i| {
            softmax_cross_entropy(
                forward_unchecked(layout, global, head, data.row(i)).logits(),
                data.label(i),
            )
            .0
        })
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn predict(layout: &ParamLayout, global: &[f64], head: &[f64], x: &[f64]) -> usize {
    let fwd = forward_unchecked(layout, global, head, x);
    fwd.logits()
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (k, &v)| if v > best.1 { (k, v) } else { best },
        )
        .0
}

/// Fraction of `data` classified correctly; 0 for an empty set.
pub fn accuracy(layout: &ParamLayout, global: &[f64], head: &[f64], data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| predict(layout, global, head, data.row(i)) == data.label(i))
        .count();
    correct as f64 / data.len() as f64
}

/// RMSProp: `v <- gamma v + (1 - gamma) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    v: Vec<f64>,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(len: usize) -> Self {
        Self::with_params(len, 0.9, 1e-8)
    }

    pub fn with_params(len: usize, decay: f64, eps: f64) -> Self {
        Self {
            v: vec![0.0; len],
            decay,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), self.v.len());
        debug_assert_eq!(grad.len(), self.v.len());
        for ((p, v), &g) in params.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *v = self.decay * *v + (1.0 - self.decay) * g * g;
            *p -= lr * g / (v.sqrt() + self.eps);
        }
    }
}

/// Denominator floor for relative gradient errors; central differences at
/// `h = 1e-5` carry ~1e-10 absolute error, so smaller components are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient with central differences on a random
/// subset of 64 global coordinates plus every head coordinate; returns the
/// worst relative error.
pub fn finite_diff_check(
    layout: &ParamLayout,
    params: &ParamVector,
    data: &Dataset,
    batch: &[usize],
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, grads) = loss_and_grad(layout, params.global(), params.head(), data, batch)?;
    let n_global = layout.n_global();
    let mut coords: Vec<usize> = if n_global <= 64 {
        (0..n_global).collect()
    } else {
        sample(rng, n_global, 64).into_vec()
    };
    coords.extend(n_global..layout.total());
    let mut worst = 0.0_f64;
    let mut probe = params.clone();
    for k in coords {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = loss(layout, probe.global(), probe.head(), data, batch)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = loss(layout, probe.global(), probe.head(), data, batch)?;
        probe.as_mut_slice()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = if k < n_global {
            grads.global[k]
        } else {
            grads.head[k - n_global]
        };
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gaussian_mixture;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn layout_arithmetic() {
        let l = ParamLayout::new(vec![2, 3, 2]).unwrap();
        assert_eq!(l.total(), 17);
        assert_eq!(l.head_len(), 8);
        assert_eq!(l.n_global(), 9);
        let l = ParamLayout::new(vec![784, 400, 100, 62]).unwrap();
        assert_eq!(l.total(), 784 * 400 + 400 + 400 * 100 + 100 + 100 * 62 + 62);
        assert_eq!(l.head_len(), 6262);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let l = ParamLayout::new(vec![4, 5, 3]).unwrap();
        let a = init_params(&l, &mut rng(1));
        let b = init_params(&l, &mut rng(1));
        assert_eq!(a, b);
        assert!(a.global()[20..25].iter().all(|&v| v == 0.0));
        assert!(a.head()[15..18].iter().all(|&v| v == 0.0));
        let s = (6.0_f64 / 9.0).sqrt();
        assert!(a.global()[..20].iter().all(|v| v.abs() < s));
    }

    #[test]
    fn views_alias_storage() {
        let l = ParamLayout::new(vec![2, 3, 2]).unwrap();
        let mut p = ParamVector::zeros(&l);
        p.head_mut()[0] = 5.0;
        p.global_mut()[1] = 2.0;
        assert_eq!(p.as_slice()[9], 5.0);
        assert_eq!(p.as_slice()[1], 2.0);
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let l = ParamLayout::new(vec![3, 4, 2]).unwrap();
        let p = ParamVector::zeros(&l);
        let f = forward(&l, p.global(), p.head(), &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(f.logits(), &[0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let l = ParamLayout::new(vec![2, 2]).unwrap();
        let head = [1.0, 0.0, 0.0, 1.0, 0.5, -0.5];
        let f = forward(&l, &[], &head, &[2.0, 3.0]).unwrap();
        assert_eq!(f.logits(), &[2.5, 2.5]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let l = ParamLayout::new(vec![2, 2]).unwrap();
        assert!(forward(&l, &[], &[0.0; 6], &[1.0]).is_err());
    }

    /// Independent straight-line forward pass for a `[d, h, C]` network.
    fn reference_logits(d: usize, h: usize, c: usize, p: &[f64], x: &[f64]) -> Vec<f64> {
        let w1 = &p[..d * h];
        let b1 = &p[d * h..d * h + h];
        let rest = &p[d * h + h..];
        let w2 = &rest[..h * c];
        let b2 = &rest[h * c..];
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut s = b1[j];
            for i in 0..d {
                s += w1[j * d + i] * x[i];
            }
            hidden[j] = if s > 0.0 { s } else { s.exp() - 1.0 };
        }
        (0..c)
            .map(|k| b2[k] + (0..h).map(|j| w2[k * h + j] * hidden[j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_reference() {
        let l = ParamLayout::new(vec![5, 7, 3]).unwrap();
        let mut r = rng(4);
        let mut p = init_params(&l, &mut r);
        p.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.3..0.3));
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let f = forward(&l, p.global(), p.head(), &x).unwrap();
        let reference = reference_logits(5, 7, 3, p.as_slice(), &x);
        for (a, b) in f.logits().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, probs) = softmax_cross_entropy(&[0.3; 6], 2);
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_correct_prediction_has_no_loss() {
        let (loss, _) = softmax_cross_entropy(&[500.0, -500.0], 0);
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let z = [0.2, -1.3, 4.0];
        let (a, _) = softmax_cross_entropy(&z, 1);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let (b, _) = softmax_cross_entropy(&shifted, 1);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = gaussian_mixture(4, 6, 8, 2.0, 3).unwrap();
        for (k, sizes) in [vec![6, 4], vec![6, 8, 4], vec![6, 5, 7, 4]].into_iter().enumerate() {
            let l = ParamLayout::new(sizes).unwrap();
            let mut r = rng(10 + k as u64);
            let p = init_params(&l, &mut r);
            let batch: Vec<usize> = (0..data.len()).step_by(3).collect();
            let err = finite_diff_check(&l, &p, &data, &batch, 1e-5, &mut r).unwrap();
            assert!(err < 1e-6, "layout {k}: {err}");
        }
    }

    #[test]
    fn elu_is_smooth_and_bounded() {
        assert_eq!(elu_grad(0.0), 1.0);
        assert!((elu_grad(-1e-12) - 1.0).abs() < 1e-11);
        for x in [-50.0, -3.0, -0.1, 0.0, 0.1, 10.0] {
            assert!(elu_grad(x) <= 1.0 && elu_grad(x) > 0.0);
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let mut opt = RmsProp::new(1);
        let mut p = [0.0];
        opt.step(&mut p, &[1.0], 0.01);
        assert!((opt.second_moment()[0] - 0.1).abs() < 1e-15);
        let expected = -0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_zero_gradient_decays_only() {
        let mut opt = RmsProp::new(2);
        let mut p = [1.0, 2.0];
        opt.step(&mut p, &[1.0, 1.0], 0.1);
        let before = p;
        let v = opt.second_moment().to_vec();
        opt.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, before);
        assert!((opt.second_moment()[0] - 0.9 * v[0]).abs() < 1e-15);
    }

    #[test]
    fn snapshot_round_trip() {
        let l = ParamLayout::new(vec![3, 4, 2]).unwrap();
        let p = init_params(&l, &mut rng(2));
        let mut buf = Vec::new();
        p.write_snapshot(&l, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 12 + 8 * l.total());
        let (l2, p2) = ParamVector::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(l, l2);
        assert_eq!(p, p2);
    }
}
