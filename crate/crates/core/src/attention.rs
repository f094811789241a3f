//! Graph-attention fusion of node-specific heads.
//!
//! For agent `i` with cached previous-round heads, each active neighbor `j`
//! is scored by `x_j = beta^T (w_i ‖ w_j)`; the weights are
//! `alpha = softmax(ELU(x))` over the active set, and the new head is
//! `w_ns = mu * w_lu + (1 - mu) * ELU(sum_j alpha_j w_j)` applied
//! elementwise.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::{elu, elu_grad, loss_and_grad, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    /// Scoring vector, length `2F`.
    pub beta: Vec<f64>,
    /// Local-update head component, length `F`.
    pub w_lu: Vec<f64>,
    /// This agent's head from the previous round.
    pub own_prev_head: Vec<f64>,
    /// Previous-round heads received from neighbors.
    pub neighbor_heads: BTreeMap<usize, Vec<f64>>,
    pub mu: f64,
}

impl AttentionState {
    pub fn head_len(&self) -> usize {
        self.w_lu.len()
    }

    fn check(&self) -> Result<()> {
        let f = self.head_len();
        if self.beta.len() != 2 * f {
            return Err(Error::Dimension {
                what: "attention beta",
                expected: 2 * f,
                got: self.beta.len(),
            });
        }
        if self.own_prev_head.len() != f {
            return Err(Error::Dimension {
                what: "own previous head",
                expected: f,
                got: self.own_prev_head.len(),
            });
        }
        if let Some(h) = self.neighbor_heads.values().find(|h| h.len() != f) {
            return Err(Error::Dimension {
                what: "neighbor head",
                expected: f,
                got: h.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid(format!(
                "fusion parameter mu = {} outside [0, 1]",
                self.mu
            )));
        }
        Ok(())
    }

    fn head(&self, j: usize) -> Result<&[f64]> {
        self.neighbor_heads
            .get(&j)
            .map(Vec::as_slice)
            .ok_or(Error::MissingNeighborHead(j))
    }

    fn concat(&self, j: usize) -> Result<Vec<f64>> {
        let mut c = self.own_prev_head.clone();
        c.extend_from_slice(self.head(j)?);
        Ok(c)
    }
}

/// Intermediate values of one attention forward pass, in `active` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub active: Vec<usize>,
    pub concat: Vec<Vec<f64>>,
    /// `x_j = beta^T c_j`.
    pub pre: Vec<f64>,
    /// `ELU(x_j)`, the softmax inputs.
    pub scores: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `z = sum_j alpha_j w_j`.
    pub z: Vec<f64>,
    pub z_grad: Vec<f64>,
}

impl AttentionCache {
    pub fn alpha_map(&self) -> BTreeMap<usize, f64> {
        self.active.iter().copied().zip(self.alphas.iter().copied()).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn attention_coeffs(state: &AttentionState, active: &[usize]) -> Result<AttentionCache> {
    state.check()?;
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let concat = active.iter().map(|&j| state.concat(j)).collect::<Result<Vec<_>>>()?;
    let pre: Vec<f64> = concat.iter().map(|c| dot(&state.beta, c)).collect();
    let scores: Vec<f64> = pre.iter().map(|&x| elu(x)).collect();
    let alphas = softmax(&scores);
    let f = state.head_len();
    let mut z = vec![0.0; f];
    for (&j, &a) in active.iter().zip(&alphas) {
        for (zk, hk) in z.iter_mut().zip(state.head(j)?) {
            *zk += a * hk;
        }
    }
    let z_grad = z.iter().map(|&v| elu_grad(v)).collect();
    Ok(AttentionCache {
        active: active.to_vec(),
        concat,
        pre,
        scores,
        alphas,
        z,
        z_grad,
    })
}

pub fn fuse_head(state: &AttentionState, cache: &AttentionCache) -> Vec<f64> {
    let mu = state.mu;
    state
        .w_lu
        .iter()
        .zip(&cache.z)
        .map(|(&lu, &z)| mu * lu + (1.0 - mu) * elu(z))
        .collect()
}

/// Backpropagates a gradient on the fused head into `(grad_w_lu, grad_beta)`.
pub fn attention_backward(
    upstream: &[f64],
    state: &AttentionState,
    cache: &AttentionCache,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = state.head_len();
    if upstream.len() != f {
        return Err(Error::Dimension {
            what: "upstream head gradient",
            expected: f,
            got: upstream.len(),
        });
    }
    let n = cache.active.len();
    if cache.z.len() != f
        || cache.alphas.len() != n
        || cache.pre.len() != n
        || cache.concat.iter().any(|c| c.len() != 2 * f)
        || state.beta.len() != 2 * f
    {
        return Err(Error::StaleCache(format!(
            "cache built for F={} with {} neighbors, state has F={f}",
            cache.z.len(),
            n
        )));
    }
    let mu = state.mu;
    let grad_wlu: Vec<f64> = upstream.iter().map(|g| mu * g).collect();

    // u = dL/dz; dL/dalpha_j = u^T w_j
    let u: Vec<f64> = upstream
        .iter()
        .zip(&cache.z_grad)
        .map(|(g, s)| (1.0 - mu) * g * s)
        .collect();
    let mut grad_beta = vec![0.0; 2 * f];
    if mu == 1.0 || n == 1 {
        return Ok((grad_wlu, grad_beta));
    }
    let dalpha = cache
        .active
        .iter()
        .map(|&j| Ok(dot(&u, state.head(j)?)))
        .collect::<Result<Vec<f64>>>()?;
    let slopes: Vec<f64> = cache.pre.iter().map(|&x| elu_grad(x)).collect();
    // d alpha_j / d beta = alpha_j (s_j c_j - sum_l alpha_l s_l c_l)
    let mut mean = vec![0.0; 2 * f];
    for ((a, s), c) in cache.alphas.iter().zip(&slopes).zip(&cache.concat) {
        for (m, ck) in mean.iter_mut().zip(c) {
            *m += a * s * ck;
        }
    }
    for (((g, a), s), c) in dalpha.iter().zip(&cache.alphas).zip(&slopes).zip(&cache.concat) {
        for ((gb, ck), mk) in grad_beta.iter_mut().zip(c).zip(&mean) {
            *gb += g * a * (s * ck - mk);
        }
    }
    Ok((grad_wlu, grad_beta))
}

/// Loss and gradients of the full personalized model: the head is fused
/// from `state` over `active`, then fed to the network with `global`.
#[derive(Debug, Clone)]
pub struct ComposedGrad {
    pub loss: f64,
    pub head: Vec<f64>,
    pub grad_global: Vec<f64>,
    pub grad_wlu: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub cache: AttentionCache,
}

pub fn composed_loss_and_grad(
    layout: &ParamLayout,
    global: &[f64],
    state: &AttentionState,
    active: &[usize],
    data: &Dataset,
    batch: &[usize],
) -> Result<ComposedGrad> {
    let cache = attention_coeffs(state, active)?;
    let head = fuse_head(state, &cache);
    let (loss, grads) = loss_and_grad(layout, global, &head, data, batch)?;
    let (grad_wlu, grad_beta) = attention_backward(&grads.head, state, &cache)?;
    Ok(ComposedGrad {
        loss,
        head,
        grad_global: grads.global,
        grad_wlu,
        grad_beta,
        cache,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuBound {
    pub degree: usize,
    /// `D_i` with the ELU slopes at the current scores.
    pub d_value: f64,
    /// Closed form valid when every `x_j >= 0`.
    pub simplified_d: Option<f64>,
    /// Lower bound on `mu`, clamped to `[0, 1]`.
    pub bound: f64,
}

/// Smallest fusion parameter for which the attention gradient stays within
/// the head-gradient bound: `1 - 1/sqrt(d (d - 1) D)`, with
/// `D = [sum_j |w_j|^2] * [sum_j sum_{l != j} |s_j c_j - s_l c_l|^2]` and
/// `s_j = ELU'(x_j)`. Vacuous (0) when `d = 1` or `D = 0`.
pub fn mu_lower_bound(state: &AttentionState, active: &[usize]) -> Result<MuBound> {
    state.check()?;
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let d = active.len();
    let heads = active.iter().map(|&j| state.head(j)).collect::<Result<Vec<_>>>()?;
    let concat = active.iter().map(|&j| state.concat(j)).collect::<Result<Vec<_>>>()?;
    let pre: Vec<f64> = concat.iter().map(|c| dot(&state.beta, c)).collect();
    let slopes: Vec<f64> = pre.iter().map(|&x| elu_grad(x)).collect();
    let norms: f64 = heads.iter().map(|h| dot(h, h)).sum();
    let mut pair_sum = 0.0;
    for j in 0..d {
        for l in 0..d {
            if l != j {
                pair_sum += concat[j]
                    .iter()
                    .zip(&concat[l])
                    .map(|(a, b)| (slopes[j] * a - slopes[l] * b).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let d_value = norms * pair_sum;
    let simplified_d = pre.iter().all(|&x| x >= 0.0).then(|| {
        let mut s = 0.0;
        for j in 0..d {
            for l in 0..d {
                if l != j {
                    s += heads[j].iter().zip(heads[l]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
            }
        }
        norms * s
    });
    let bound = if d <= 1 || d_value == 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / ((d * (d - 1)) as f64 * d_value).sqrt()).clamp(0.0, 1.0)
    };
    Ok(MuBound {
        degree: d,
        d_value,
        simplified_d,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(f: usize, heads: &[(usize, Vec<f64>)], beta: Vec<f64>, mu: f64) -> AttentionState {
        AttentionState {
            beta,
            w_lu: vec![0.0; f],
            own_prev_head: vec![1.0; f],
            neighbor_heads: heads.iter().cloned().collect(),
            mu,
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, f: usize, n: usize, mu: f64) -> AttentionState {
        let mut v = |len: usize, s: f64| (0..len).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        AttentionState {
            beta: v(2 * f, 1.0),
            w_lu: v(f, 1.0),
            own_prev_head: v(f, 1.0),
            neighbor_heads: (0..n).map(|j| (j * 3 + 1, v(f, 1.5))).collect(),
            mu,
        }
    }

    #[test]
    fn singleton_gets_full_weight() {
        let s = state(2, &[(4, vec![0.3, -1.0])], vec![0.5; 4], 0.5);
        let c = attention_coeffs(&s, &[4]).unwrap();
        assert_eq!(c.alphas, vec![1.0]);
    }

    #[test]
    fn zero_beta_is_uniform() {
        let heads: Vec<_> = (0..4).map(|j| (j, vec![j as f64, 1.0])).collect();
        let s = state(2, &heads, vec![0.0; 4], 0.5);
        let c = attention_coeffs(&s, &[0, 1, 2, 3]).unwrap();
        assert!(c.pre.iter().all(|&x| x == 0.0));
        assert!(c.alphas.iter().all(|a| (a - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_evaluated_coefficients() {
        let s = state(1, &[(0, vec![1.0]), (1, vec![2.0])], vec![1.0, 1.0], 0.5);
        let c = attention_coeffs(&s, &[0, 1]).unwrap();
        assert_eq!(c.pre, vec![2.0, 3.0]);
        let e = std::f64::consts::E;
        assert!((c.alphas[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((c.alphas[1] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn empty_active_set_fails() {
        let s = state(1, &[(0, vec![1.0])], vec![1.0, 1.0], 0.5);
        assert!(matches!(attention_coeffs(&s, &[]), Err(Error::EmptyActiveSet)));
        assert!(matches!(attention_coeffs(&s, &[9]), Err(Error::MissingNeighborHead(9))));
    }

    #[test]
    fn fusion_cases() {
        let mut s = state(2, &[(0, vec![1.0, 1.0]), (1, vec![3.0, 3.0])], vec![0.0; 4], 1.0);
        s.w_lu = vec![0.7, -0.2];
        let c = attention_coeffs(&s, &[0, 1]).unwrap();
        assert_eq!(fuse_head(&s, &c), s.w_lu);

        s.mu = 0.9;
        s.w_lu = vec![0.0, 0.0];
        let w = fuse_head(&s, &c);
        assert!((w[0] - 0.2).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);

        let s = state(2, &[(5, vec![0.4, 2.0])], vec![0.3; 4], 0.0);
        let c = attention_coeffs(&s, &[5]).unwrap();
        assert_eq!(fuse_head(&s, &c), vec![0.4, 2.0]);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, 3, 3, 1.0);
        let c = attention_coeffs(&s, &[1, 4, 7]).unwrap();
        let up = [0.3, -1.2, 0.8];
        let (gl, gb) = attention_backward(&up, &s, &c).unwrap();
        assert_eq!(gl, up.to_vec());
        assert!(gb.iter().all(|&g| g == 0.0));

        let s = random_state(&mut rng, 3, 1, 0.4);
        let c = attention_coeffs(&s, &[1]).unwrap();
        let (gl, gb) = attention_backward(&up, &s, &c).unwrap();
        assert!(gb.iter().all(|&g| g == 0.0));
        for (g, u) in gl.iter().zip(&up) {
            assert_eq!(*g, 0.4 * u);
        }
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_state(&mut rng, 3, 2, 0.5);
        let c = attention_coeffs(&s, &[1, 4]).unwrap();
        let other = random_state(&mut rng, 2, 2, 0.5);
        assert!(matches!(
            attention_backward(&[0.0; 2], &other, &c),
            Err(Error::StaleCache(_))
        ));
        assert!(attention_backward(&[0.0; 2], &s, &c).is_err());
    }

    /// Scalar loss `sum_k w_k * q_k` through the fusion, differentiated numerically.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let s = random_state(&mut rng, 2, 3, 0.3 + 0.05 * trial as f64);
            let q: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let active = [1, 4, 7];
            let objective = |st: &AttentionState| {
                let c = attention_coeffs(st, &active).unwrap();
                dot(&fuse_head(st, &c), &q)
            };
            let c = attention_coeffs(&s, &active).unwrap();
            let (gl, gb) = attention_backward(&q, &s, &c).unwrap();
            let h = 1e-5;
            for (k, &g) in gb.iter().enumerate() {
                let mut up = s.clone();
                up.beta[k] += h;
                let mut down = s.clone();
                down.beta[k] -= h;
                let num = (objective(&up) - objective(&down)) / (2.0 * h);
                assert!(relative_error(g, num) < 1e-6, "beta[{k}] {g} vs {num}");
            }
            for (k, &g) in gl.iter().enumerate() {
                let mut up = s.clone();
                up.w_lu[k] += h;
                let mut down = s.clone();
                down.w_lu[k] -= h;
                let num = (objective(&up) - objective(&down)) / (2.0 * h);
                assert!(relative_error(g, num) < 1e-6);
            }
        }
    }

    #[test]
    fn mu_bound_vacuous_cases() {
        let h = vec![0.5, 0.5];
        let s = state(2, &[(0, h.clone()), (1, h.clone()), (2, h)], vec![0.1; 4], 0.5);
        let b = mu_lower_bound(&s, &[0, 1, 2]).unwrap();
        assert_eq!(b.simplified_d, Some(0.0));
        assert_eq!(b.bound, 0.0);
        let b = mu_lower_bound(&s, &[1]).unwrap();
        assert_eq!(b.bound, 0.0);
    }

    #[test]
    fn mu_bound_hand_enumeration() {
        let mut s = state(2, &[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])], vec![0.0; 4], 0.5);
        s.own_prev_head = vec![1.0, 1.0];
        // slopes are ELU'(0) = 1, so each ordered pair contributes
        // |(1,1,1,0) - (1,1,0,1)|^2 = 2; two ordered pairs -> 4.
        let norms = 1.0 + 1.0;
        let pairs = 2.0 + 2.0;
        let d = norms * pairs;
        let b = mu_lower_bound(&s, &[0, 1]).unwrap();
        assert_eq!(b.d_value, d);
        assert_eq!(b.simplified_d, Some(d));
        assert!((b.bound - (1.0 - 1.0 / (2.0 * d).sqrt())).abs() < 1e-15);
        assert!((b.bound - 0.75).abs() < 1e-15);
    }
}
