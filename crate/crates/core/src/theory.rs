//! Convergence-analysis quantities evaluated on concrete configurations.
//! Everything here is diagnostic: it reports and warns, it never changes
//! how training runs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::MixingMatrix;

/// `rho_{s,k-1} = |W^{k-s} - Q|_2` for a constant mixing matrix, stored by
/// lag `m = k - s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoTable {
    horizon: usize,
    lags: Vec<f64>,
}

impl RhoTable {
    /// Table for a mixing matrix whose lag-`m` contraction is `rho^m`.
    pub fn geometric(rho: f64, horizon: usize) -> Self {
        let lags = (1..horizon).map(|m| rho.powi(m as i32)).collect();
        Self { horizon, lags }
    }

    /// Table from explicit lag values `[rho(1), ..., rho(K-1)]`.
    pub fn from_lags(lags: Vec<f64>) -> Self {
        Self {
            horizon: lags.len() + 1,
            lags,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    /// `rho_{s,k-1}` for `1 <= s <= k-1 <= K-1`.
    pub fn get(&self, s: usize, k_minus_1: usize) -> f64 {
        assert!(
            s >= 1 && s <= k_minus_1 && k_minus_1 < self.horizon,
            "index ({s}, {k_minus_1}) outside table"
        );
        self.lags[k_minus_1 - s]
    }
}

fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Builds the table for horizon `K` by eigensolving `W^m - Q` for every lag.
pub fn rho_products(mixing: &MixingMatrix, horizon: usize) -> RhoTable {
    let n = mixing.n();
    let q = DMatrix::from_element(n, n, 1.0 / n as f64);
    let w = mixing.weights();
    let mut power = w.clone();
    let mut lags = Vec::with_capacity(horizon.saturating_sub(1));
    for m in 1..horizon {
        if m > 1 {
            power = &power * w;
        }
        lags.push(spectral_norm_sym(&(&power - &q)));
    }
    RhoTable { horizon, lags }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AbcConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// `A_K`, `B_K`, `C_K` by direct summation over the table.
pub fn abc_constants(table: &RhoTable) -> AbcConstants {
    let k_max = table.horizon();
    let mut a = 0.0;
    let mut b = 0.0;
    for k in 1..=k_max {
        let mut sum = 0.0;
        for s in 1..k {
            let r = table.get(s, k - 1);
            a += r * r;
            sum += r;
        }
        b += sum * sum;
    }
    let mut c: f64 = 0.0;
    for s in 1..k_max {
        let mut acc = 0.0;
        for k in s + 1..=k_max {
            let inner: f64 = (1..k).map(|l| table.get(l, k - 1)).sum();
            acc += table.get(s, k - 1) * inner;
        }
        c = c.max(acc);
    }
    AbcConstants {
        a: a / k_max as f64,
        b: b / k_max as f64,
        c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    /// Smoothness `L`.
    pub smoothness: f64,
    /// Gradient-noise bound.
    pub chi: f64,
    /// Non-i.i.d. degree.
    pub kappa: f64,
    /// Local steps per round.
    pub local_steps: usize,
    pub lr: f64,
    pub rounds: usize,
    /// Constant of the descent lemma; must lie in `(0, c_limit)`.
    pub c: f64,
}

impl TheoryConstants {
    /// `1/2 - 8 eta^2 T^2 L^2`.
    pub fn c_limit(&self) -> f64 {
        let t = self.local_steps as f64;
        0.5 - 8.0 * (self.lr * t * self.smoothness).powi(2)
    }

    /// Midpoint of the admissible range for `c`, if it is non-empty.
    pub fn default_c(&self) -> Option<f64> {
        let limit = self.c_limit();
        (limit > 0.0).then_some(0.5 * limit)
    }
}

/// Largest admissible step size `min(1/(24TL), 1/(32TL sqrt(C_K)))`.
pub fn lr_gate(local_steps: usize, smoothness: f64, c_k: f64) -> Result<f64> {
    let tl = local_steps as f64 * smoothness;
    if tl.is_nan() || tl <= 0.0 {
        return Err(Error::invalid(format!(
            "lr gate needs T*L > 0, got T={local_steps}, L={smoothness}"
        )));
    }
    let first = 1.0 / (24.0 * tl);
    if c_k <= 0.0 {
        return Ok(first);
    }
    Ok(first.min(1.0 / (32.0 * tl * c_k.sqrt())))
}

fn check_c(tc: &TheoryConstants) -> Result<()> {
    let limit = tc.c_limit();
    if !(tc.c > 0.0 && tc.c < limit) {
        return Err(Error::DescentConstant { c: tc.c, limit });
    }
    Ok(())
}

/// Stationarity bound `Phi` for `n_agents` agents.
pub fn phi_bound(tc: &TheoryConstants, abc: AbcConstants, n_agents: usize) -> Result<f64> {
    check_c(tc)?;
    let (eta, l, t) = (tc.lr, tc.smoothness, tc.local_steps as f64);
    let chi2 = tc.chi * tc.chi;
    let kappa2 = tc.kappa * tc.kappa;
    let n = n_agents as f64;
    let noise = eta * l * (1.0 + 4.0 * eta * t * l) * chi2;
    let averaged = (eta * l * (4.0 * kappa2 * t + chi2) + 6.0 * t * eta * eta * chi2 * l * l) / n;
    let drift = 64.0 * eta * eta * t * l * l * (abc.a * chi2 + abc.b * t * (kappa2 + t * eta * eta * chi2 * l * l));
    Ok((noise + averaged + drift) / tc.c)
}

/// `(F_0 - F_*) / (c T K eta) + Phi`.
pub fn bound_rhs(tc: &TheoryConstants, abc: AbcConstants, n_agents: usize, f0: f64, f_star: f64) -> Result<f64> {
    let phi = phi_bound(tc, abc, n_agents)?;
    let denom = tc.c * tc.local_steps as f64 * tc.rounds as f64 * tc.lr;
    Ok((f0 - f_star) / denom + phi)
}

/// Gradients collected at one probe point of a run.
#[derive(Debug, Clone, Default)]
pub struct TraceSample {
    /// Each agent's full parameter vector.
    pub points: Vec<Vec<f64>>,
    /// Full-batch gradient of each `f_i` at its own point.
    pub full_grads: Vec<Vec<f64>>,
    /// Minibatch gradients of each `f_i` at its own point.
    pub minibatch_grads: Vec<Vec<Vec<f64>>>,
    /// Global-part gradient of each `f_i` at the agent-averaged global
    /// parameters (own head kept).
    pub grads_at_mean: Vec<Vec<f64>>,
}

/// Empirical lower-bound estimates of `chi`, `kappa`, `L`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    pub chi: f64,
    pub kappa: f64,
    pub smoothness: f64,
    pub samples: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Heuristic estimates: `chi` is the largest observed minibatch deviation,
/// `kappa` the largest mean gradient dissimilarity at the averaged point,
/// `L` the largest per-agent secant ratio between probe points. All three
/// can only underestimate the true constants.
pub fn estimate_constants(trace: &[TraceSample]) -> ConstantEstimates {
    let mut est = ConstantEstimates {
        samples: trace.len(),
        ..Default::default()
    };
    for sample in trace {
        for (mbs, full) in sample.minibatch_grads.iter().zip(&sample.full_grads) {
            for g in mbs {
                est.chi = est.chi.max(dist(g, full));
            }
        }
        let n = sample.grads_at_mean.len();
        if n > 0 {
            let mut mean = vec![0.0; sample.grads_at_mean[0].len()];
            for g in &sample.grads_at_mean {
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v / n as f64;
                }
            }
            let spread = sample.grads_at_mean.iter().map(|g| dist(g, &mean)).sum::<f64>() / n as f64;
            est.kappa = est.kappa.max(spread);
        }
    }
    for (p, a) in trace.iter().enumerate() {
        for b in &trace[p + 1..] {
            for i in 0..a.points.len().min(b.points.len()) {
                let dx = dist(&a.points[i], &b.points[i]);
                if dx > 0.0 {
                    est.smoothness = est.smoothness.max(dist(&a.full_grads[i], &b.full_grads[i]) / dx);
                }
            }
        }
    }
    est
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    /// Slope of `log min_{j<=k} g_j` against `log k`.
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Least-squares log-log slope of the running minimum of `values`
/// (`values[k-1]` observed at round `k`). Non-positive entries are skipped.
pub fn check_rate(values: &[f64]) -> Option<RateReport> {
    let mut best = f64::INFINITY;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, &v) in values.iter().enumerate() {
        best = best.min(v);
        if best > 0.0 && best.is_finite() {
            xs.push(((k + 1) as f64).ln());
            ys.push(best.ln());
        }
    }
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some(RateReport {
        slope,
        intercept: my - slope * mx,
        points: xs.len(),
    })
}

pub struct ValidationInput<'a> {
    pub mixing: &'a MixingMatrix,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub n_agents: usize,
    /// `Some` for attention-based algorithms.
    pub mu: Option<f64>,
    /// Per-agent fusion-parameter lower bounds at initialization.
    pub mu_bounds: Vec<f64>,
    pub smoothness: f64,
    pub chi: f64,
    pub kappa: f64,
    /// Where `smoothness`, `chi`, `kappa` came from.
    pub constants_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub rho: f64,
    pub spectral_gap: f64,
    pub rounds: usize,
    pub local_steps: usize,
    pub a_k: f64,
    pub b_k: f64,
    pub c_k: f64,
    pub lr: f64,
    pub lr_gate: Option<f64>,
    pub lr_ok: bool,
    pub mu: Option<f64>,
    pub mu_bound_max: Option<f64>,
    pub mu_ok: bool,
    pub smoothness: f64,
    pub chi: f64,
    pub kappa: f64,
    pub constants_source: String,
    pub c: Option<f64>,
    pub c_limit: f64,
    pub phi: Option<f64>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.lr_ok && self.mu_ok && self.c.is_some()
    }

    pub fn render_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6e}"));
        let mut s = String::new();
        s.push_str("== theory validation ==\n");
        s.push_str(&format!(
            "spectral: rho = {:.6}, gap = {:.6}\n",
            self.rho, self.spectral_gap
        ));
        s.push_str(&format!(
            "horizon K = {}, local steps T = {}: A_K = {:.6e}, B_K = {:.6e}, C_K = {:.6e}\n",
            self.rounds, self.local_steps, self.a_k, self.b_k, self.c_k
        ));
        s.push_str(&format!(
            "constants ({}): L = {:.4e}, chi = {:.4e}, kappa = {:.4e}\n",
            self.constants_source, self.smoothness, self.chi, self.kappa
        ));
        s.push_str(&format!(
            "learning rate {:.4e} vs gate {} -> {}\n",
            self.lr,
            opt(self.lr_gate),
            if self.lr_ok { "ok" } else { "VIOLATED" }
        ));
        match self.mu {
            Some(mu) => s.push_str(&format!(
                "mu {:.4} vs max per-agent lower bound {} -> {}\n",
                mu,
                opt(self.mu_bound_max),
                if self.mu_ok { "ok" } else { "VIOLATED" }
            )),
            None => s.push_str("mu: not used by this algorithm\n"),
        }
        s.push_str(&format!(
            "c = {} (limit {:.6e}), Phi = {}\n",
            opt(self.c),
            self.c_limit,
            opt(self.phi)
        ));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!("result: {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        s
    }
}

/// Evaluates the step-size gate, fusion-parameter bounds and `Phi` for a
/// configuration. Never errors on a violated condition; it records it.
pub fn validate(input: &ValidationInput<'_>) -> ValidationReport {
    let mut warnings = Vec::new();
    let table = rho_products(input.mixing, input.rounds.max(1));
    let abc = abc_constants(&table);
    let gate = match lr_gate(input.local_steps, input.smoothness, abc.c) {
        Ok(g) => Some(g),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    let lr_ok = gate.is_some_and(|g| input.lr < g);
    if let Some(g) = gate.filter(|_| !lr_ok) {
        warnings.push(format!(
            "learning rate {:.4e} exceeds the admissible {:.4e}",
            input.lr, g
        ));
    }
    let mu_bound_max = input.mu_bounds.iter().copied().reduce(f64::max);
    let mu_ok = match (input.mu, mu_bound_max) {
        (Some(mu), Some(b)) => mu >= b,
        _ => true,
    };
    if let (Some(mu), Some(b)) = (input.mu, mu_bound_max) {
        if mu < b {
            warnings.push(format!("mu = {mu} below the largest per-agent lower bound {b:.4}"));
        }
    }
    let tc = TheoryConstants {
        smoothness: input.smoothness,
        chi: input.chi,
        kappa: input.kappa,
        local_steps: input.local_steps,
        lr: input.lr,
        rounds: input.rounds,
        c: 0.0,
    };
    let c = tc.default_c();
    let phi = match c {
        Some(c) => phi_bound(&TheoryConstants { c, ..tc }, abc, input.n_agents).ok(),
        None => {
            warnings.push(format!(
                "no admissible c: 1/2 - 8 eta^2 T^2 L^2 = {:.4e} <= 0, Phi not evaluated",
                tc.c_limit()
            ));
            None
        }
    };
    ValidationReport {
        rho: input.mixing.rho(),
        spectral_gap: input.mixing.spectral_gap(),
        rounds: input.rounds,
        local_steps: input.local_steps,
        a_k: abc.a,
        b_k: abc.b,
        c_k: abc.c,
        lr: input.lr,
        lr_gate: gate,
        lr_ok,
        mu: input.mu,
        mu_bound_max,
        mu_ok,
        smoothness: input.smoothness,
        chi: input.chi,
        kappa: input.kappa,
        constants_source: input.constants_source.clone(),
        c,
        c_limit: tc.c_limit(),
        phi,
        warnings,
    }
}
