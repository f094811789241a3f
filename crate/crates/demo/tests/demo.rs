use gatta_demo::{attention_json, consensus_json, race_json};
use serde_json::{json, Value};

fn call(f: fn(&str) -> Result<String, String>, v: Value) -> Value {
    serde_json::from_str(&f(&v.to_string()).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[test]
fn zero_beta_gives_uniform_weights_and_hand_fused_head() {
    let out = call(
        attention_json,
        json!({"own": [0.5, -1.0], "neighbors": [[1.0, 2.0], [-3.0, 0.0], [0.0, 1.0]], "beta": [0, 0, 0, 0], "mu": 0.25}),
    );
    for a in floats(&out["alphas"]) {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
    let fused = floats(&out["fused"]);
    let z = [(1.0 - 3.0 + 0.0) / 3.0, (2.0 + 0.0 + 1.0) / 3.0];
    let own = [0.5, -1.0];
    for k in 0..2 {
        assert!((fused[k] - (0.25 * own[k] + 0.75 * elu(z[k]))).abs() < 1e-15);
    }
}

#[test]
fn attention_favors_higher_score() {
    let out = call(
        attention_json,
        json!({"own": [1.0], "neighbors": [[2.0], [-2.0]], "beta": [0.0, 1.0], "mu": 0.5}),
    );
    let a = floats(&out["alphas"]);
    let e = [elu(2.0), elu(-2.0)];
    let expect = e[0].exp() / (e[0].exp() + e[1].exp());
    assert!((a[0] - expect).abs() < 1e-14);
}

#[test]
fn attention_rejects_bad_shapes() {
    assert!(attention_json(r#"{"own":[1.0],"neighbors":[[1.0]],"beta":[1.0],"mu":0.5}"#).is_err());
    assert!(attention_json(r#"{"own":[1.0],"neighbors":[],"beta":[1.0,1.0],"mu":0.5}"#).is_err());
    assert!(attention_json("not json").is_err());
}

#[test]
fn consensus_error_stays_under_spectral_envelope() {
    let out = call(consensus_json, json!({"n": 12, "p": 0.4, "seed": 3, "rounds": 30}));
    let err = floats(&out["errors"]);
    let env = floats(&out["envelope"]);
    assert_eq!(err.len(), 31);
    for (e, b) in err.iter().zip(&env) {
        assert!(*e <= b * (1.0 + 1e-9) + 1e-15);
    }
    assert!(err[30] < err[0]);
    let rho = out["rho"].as_f64().unwrap();
    assert!((out["spectral_gap"].as_f64().unwrap() - (1.0 - rho)).abs() < 1e-12);
}

#[test]
fn race_reports_each_algorithm() {
    let cfg = json!({
        "algorithms": ["gatta", "dsgd", "il"],
        "rounds": 3,
        "seed": 2,
        "topology": {"kind": "ring", "n": 4},
        "data": {"regime": "label_skew", "classes": 4, "dim": 5, "per_class": 30, "labels_per_agent": 2},
        "model": {"hidden": [6]},
        "train": {"lr": 0.01, "batch": 8}
    });
    let out = call(race_json, cfg);
    let lanes = out.as_array().unwrap();
    assert_eq!(lanes.len(), 3);
    for lane in lanes {
        assert_eq!(lane["accuracy"].as_array().unwrap().len(), 3);
        let s: Vec<u64> = lane["scalars"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap())
            .collect();
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        if lane["algorithm"] == "il" {
            assert!(s.iter().all(|&x| x == 0));
        } else {
            assert!(s[2] > 0);
        }
    }
    assert!(race_json(r#"{"rounds": 0}"#).is_err());
}
