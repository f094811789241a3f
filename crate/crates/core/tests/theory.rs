use gatta_core::datagen::{gaussian_mixture, partition_label_skew};
use gatta_core::nn::ParamLayout;
use gatta_core::protocols::{Algorithm, Simulation, SimulationSpec, TauRule, TrainParams};
use gatta_core::theory::*;
use gatta_core::topology::{complete, erdos_renyi, ring, star, MixingMatrix};
use gatta_core::Error;
use nalgebra::DMatrix;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Largest singular value by power iteration on `M^T M`.
fn power_norm(m: &DMatrix<f64>) -> f64 {
    let mtm = m.transpose() * m;
    let mut v = DMatrix::from_fn(m.ncols(), 1, |i, _| 1.0 + 0.1 * i as f64);
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w = &mtm * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.norm();
        v = w / norm;
    }
    lambda.sqrt()
}

#[test]
fn lag_one_is_rho_and_q_gives_zeros() {
    let g = erdos_renyi(8, 0.5, 2).unwrap();
    let w = MixingMatrix::metropolis(&g, true).unwrap();
    let t = rho_products(&w, 5);
    for k in 2..=4 {
        assert!(close(t.get(k - 1, k - 1), w.rho(), 1e-12));
    }
    let q = rho_products(&MixingMatrix::uniform(6).unwrap(), 6);
    assert!(q.lags().iter().all(|&r| r.abs() < 1e-12));
    let abc = abc_constants(&q);
    assert!(abc.a < 1e-20 && abc.b < 1e-20 && abc.c < 1e-20);
}

#[test]
fn lazy_four_ring_lag_three() {
    let w = MixingMatrix::metropolis(&ring(4).unwrap(), true).unwrap();
    let t = rho_products(&w, 5);
    assert!(close(t.get(1, 3), (1.0f64 / 3.0).powi(3), 1e-12));
    let q = DMatrix::from_element(4, 4, 0.25);
    let explicit = w.weights() * w.weights() * w.weights() - q;
    assert!(close(power_norm(&explicit), 1.0 / 27.0, 1e-12));
}

#[test]
fn products_match_powers_of_rho() {
    let graphs = [
        ring(5).unwrap(),
        ring(10).unwrap(),
        star(7, 0).unwrap(),
        complete(4).unwrap(),
        erdos_renyi(10, 0.3, 8).unwrap(),
    ];
    for g in &graphs {
        for lazy in [true, false] {
            let Ok(w) = MixingMatrix::metropolis(g, lazy) else {
                continue;
            };
            let t = rho_products(&w, 13);
            for (m, r) in t.lags().iter().enumerate() {
                assert!(close(*r, w.rho().powi(m as i32 + 1), 1e-10));
            }
        }
    }
}

#[test]
fn abc_trivial_cases() {
    let one = abc_constants(&RhoTable::geometric(0.7, 1));
    assert_eq!(one, AbcConstants { a: 0.0, b: 0.0, c: 0.0 });
    let zero = abc_constants(&RhoTable::geometric(0.0, 6));
    assert_eq!(zero, AbcConstants { a: 0.0, b: 0.0, c: 0.0 });
}

#[test]
fn abc_geometric_third_horizon_four() {
    let r: f64 = 1.0 / 3.0;
    let got = abc_constants(&RhoTable::geometric(r, 4));
    let a = (3.0 * r.powi(2) + 2.0 * r.powi(4) + r.powi(6)) / 4.0;
    let s2 = r;
    let s3 = r + r * r;
    let s4 = r + r * r + r.powi(3);
    let b = (s2 * s2 + s3 * s3 + s4 * s4) / 4.0;
    let c1 = r * s2 + r * r * s3 + r.powi(3) * s4;
    let c2 = r * s3 + r * r * s4;
    let c3 = r * s4;
    let c = c1.max(c2).max(c3);
    assert_eq!(c, c2);
    assert!(close(got.a, a, 1e-12));
    assert!(close(got.b, b, 1e-12));
    assert!(close(got.c, c, 1e-12));
}

#[test]
fn abc_monotone_in_rho() {
    for k in [2, 5, 12] {
        let mut prev = AbcConstants { a: 0.0, b: 0.0, c: 0.0 };
        for rho in [0.0, 0.2, 0.5, 0.8] {
            let v = abc_constants(&RhoTable::geometric(rho, k));
            assert!(v.a >= 0.0 && v.b >= 0.0 && v.c >= 0.0);
            assert!(v.a >= prev.a && v.b >= prev.b && v.c >= prev.c);
            prev = v;
        }
    }
}

#[test]
fn learning_rate_gate_examples() {
    assert_eq!(lr_gate(1, 1.0, 0.0).unwrap(), 1.0 / 24.0);
    assert_eq!(lr_gate(1, 1.0, 1.0).unwrap(), 1.0 / 32.0);
    assert!(close(lr_gate(5, 2.0, 4.0).unwrap(), 1.0 / 640.0, 1e-15));
    assert!(lr_gate(0, 1.0, 1.0).is_err());
}

fn tc(chi: f64, kappa: f64, lr: f64) -> TheoryConstants {
    TheoryConstants {
        smoothness: 2.0,
        chi,
        kappa,
        local_steps: 4,
        lr,
        rounds: 50,
        c: 0.2,
    }
}

/// Second, independently expanded evaluation of the bound.
fn phi_expanded(t: &TheoryConstants, abc: AbcConstants, n: f64) -> f64 {
    let (e, l, tt, x, k) = (t.lr, t.smoothness, t.local_steps as f64, t.chi, t.kappa);
    let terms = [
        e * l * x * x,
        4.0 * e * e * tt * l * l * x * x,
        e * l * 4.0 * k * k * tt / n,
        e * l * x * x / n,
        6.0 * tt * e * e * x * x * l * l / n,
        64.0 * e * e * tt * l * l * abc.a * x * x,
        64.0 * e * e * tt * tt * l * l * abc.b * k * k,
        64.0 * e.powi(4) * tt.powi(3) * l.powi(4) * abc.b * x * x,
    ];
    terms.iter().sum::<f64>() / t.c
}

#[test]
fn phi_zero_cases_and_numeric_instance() {
    let abc = AbcConstants { a: 0.3, b: 1.1, c: 0.9 };
    assert_eq!(phi_bound(&tc(0.0, 0.0, 0.01), abc, 8).unwrap(), 0.0);
    let tiny = phi_bound(&tc(1.0, 1.0, 1e-12), abc, 8).unwrap();
    assert!(tiny < 1e-9);
    let t = tc(1.7, 0.6, 0.01);
    let got = phi_bound(&t, abc, 8).unwrap();
    assert!(close(got, phi_expanded(&t, abc, 8.0), 1e-12 * got));
    let rhs = bound_rhs(&t, abc, 8, 2.3, 0.1).unwrap();
    assert!(close(rhs, 2.2 / (0.2 * 4.0 * 50.0 * 0.01) + got, 1e-12));
}

#[test]
fn phi_rejects_c_outside_constraint() {
    let abc = AbcConstants { a: 0.0, b: 0.0, c: 0.0 };
    let mut t = tc(1.0, 1.0, 0.01);
    t.c = 0.6;
    assert!(matches!(phi_bound(&t, abc, 4), Err(Error::DescentConstant { .. })));
    t.c = 0.0;
    assert!(phi_bound(&t, abc, 4).is_err());
    t.c = 0.2;
    t.lr = 0.1;
    assert!(t.c_limit() < 0.0);
    assert!(t.default_c().is_none());
    assert!(phi_bound(&t, abc, 4).is_err());
}

#[test]
fn phi_monotone_in_chi_kappa_eta() {
    let abc = AbcConstants { a: 0.4, b: 0.9, c: 1.2 };
    let grid = [0.0, 0.5, 1.0, 2.0];
    for &k in &grid {
        let mut prev = -1.0;
        for &x in &grid {
            let v = phi_bound(&tc(x, k, 0.01), abc, 5).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
    for &x in &grid {
        let mut prev = -1.0;
        for &k in &grid {
            let v = phi_bound(&tc(x, k, 0.01), abc, 5).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
    let mut prev = -1.0;
    for eta in [0.001, 0.005, 0.01, 0.02] {
        let v = phi_bound(&tc(1.0, 1.0, eta), abc, 5).unwrap();
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn rate_fit_examples() {
    let series: Vec<f64> = (1..=200).map(|k| 3.0 / (k as f64).sqrt()).collect();
    let r = check_rate(&series).unwrap();
    assert!(close(r.slope, -0.5, 0.05));
    let flat = check_rate(&[2.0; 50]).unwrap();
    assert!(close(flat.slope, 0.0, 1e-12));
    assert!(check_rate(&[1.0]).is_none());
}

#[test]
fn smoothness_estimate_on_known_quadratic() {
    // f(x) = 0.5 x^T H x with H = diag(1..=10), so L = 10.
    let h: Vec<f64> = (1..=10).map(|v| v as f64).collect();
    let mut rng_state = 12345u64;
    let mut next = || {
        rng_state = rng_state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let trace: Vec<TraceSample> = (0..20)
        .map(|_| {
            let x: Vec<f64> = (0..10).map(|_| next()).collect();
            let g: Vec<f64> = x.iter().zip(&h).map(|(x, h)| x * h).collect();
            TraceSample {
                points: vec![x],
                full_grads: vec![g.clone()],
                minibatch_grads: vec![vec![g.clone()]],
                grads_at_mean: vec![g],
            }
        })
        .collect();
    let est = estimate_constants(&trace);
    assert!(est.smoothness <= 10.0 + 1e-12);
    assert!(est.smoothness >= 5.0);
    assert_eq!(est.chi, 0.0);
    assert_eq!(est.kappa, 0.0);
}

fn probe_sim(identical: bool, batch: usize) -> Simulation {
    let data = gaussian_mixture(3, 4, 30, 2.0, 1).unwrap();
    let mut shards = partition_label_skew(&data, 4, 2, 0.2, 1).unwrap().shards;
    if identical {
        shards = vec![shards[0].clone(); 4];
    }
    let g = ring(4).unwrap();
    let mut s = Simulation::new(SimulationSpec {
        algorithm: Algorithm::Dsgd,
        layout: ParamLayout::new(vec![4, 5, 3]).unwrap(),
        mixing: MixingMatrix::metropolis(&g, true).unwrap(),
        graph: g,
        shards,
        train: TrainParams {
            lr: 0.05,
            batch,
            steps_per_epoch: None,
            mu: 0.9,
            tau: TauRule::QuarterDeg,
            ft_epochs: 0,
            rounds: 3,
        },
        seed: 4,
    })
    .unwrap();
    if identical {
        let p0 = s.agents()[0].params.clone();
        for a in s.agents_mut() {
            a.params = p0.clone();
        }
    }
    s
}

#[test]
fn estimates_from_simulation_probes() {
    let s = probe_sim(true, 8);
    let est = estimate_constants(&[s.trace_sample(3).unwrap()]);
    assert!(est.kappa < 1e-12);
    assert!(est.chi > 0.0);

    let s = probe_sim(false, 10_000);
    let est = estimate_constants(&[s.trace_sample(3).unwrap()]);
    assert!(est.chi < 1e-12);
    assert!(est.kappa > 0.0);

    let mut s = probe_sim(false, 8);
    let mut trace = vec![s.trace_sample(2).unwrap()];
    for _ in 0..3 {
        s.step().unwrap();
        trace.push(s.trace_sample(2).unwrap());
    }
    assert!(estimate_constants(&trace).smoothness > 0.0);
}

#[test]
fn probing_does_not_perturb_training() {
    let mut a = probe_sim(false, 8);
    let mut b = probe_sim(false, 8);
    for _ in 0..3 {
        a.trace_sample(4).unwrap();
        let ra = a.step().unwrap();
        let rb = b.step().unwrap();
        assert_eq!(ra.metrics, rb.metrics);
    }
}

#[test]
fn passing_validation_admits_a_valid_c() {
    let g = erdos_renyi(10, 0.4, 3).unwrap();
    let w = MixingMatrix::metropolis(&g, true).unwrap();
    let c_k = abc_constants(&rho_products(&w, 40)).c;
    let gate = lr_gate(5, 3.0, c_k).unwrap();
    for lr in [0.5 * gate, 0.99 * gate, 2.0 * gate, 20.0 * gate] {
        let report = validate(&ValidationInput {
            mixing: &w,
            rounds: 40,
            local_steps: 5,
            lr,
            n_agents: 10,
            mu: Some(0.9),
            mu_bounds: vec![0.2, 0.5],
            smoothness: 3.0,
            chi: 1.0,
            kappa: 0.5,
            constants_source: "test".into(),
        });
        assert_eq!(report.lr_ok, lr < gate);
        if report.passed() {
            let c = report.c.unwrap();
            let t = TheoryConstants {
                smoothness: 3.0,
                chi: 1.0,
                kappa: 0.5,
                local_steps: 5,
                lr,
                rounds: 40,
                c,
            };
            let abc = AbcConstants {
                a: report.a_k,
                b: report.b_k,
                c: report.c_k,
            };
            assert_eq!(phi_bound(&t, abc, 10).unwrap(), report.phi.unwrap());
        }
        assert!(report
            .render_text()
            .contains(if report.passed() { "PASS" } else { "FAIL" }));
    }
    let low_mu = validate(&ValidationInput {
        mixing: &w,
        rounds: 10,
        local_steps: 5,
        lr: 1e-5,
        n_agents: 10,
        mu: Some(0.1),
        mu_bounds: vec![0.2],
        smoothness: 3.0,
        chi: 1.0,
        kappa: 0.5,
        constants_source: "test".into(),
    });
    assert!(!low_mu.mu_ok && !low_mu.passed());
}
