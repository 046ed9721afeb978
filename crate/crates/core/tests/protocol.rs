//! End-to-end protocol behaviour: byte accounting, determinism, error context
//! and a golden trace.

use std::path::PathBuf;

use fedmmkt::protocol::{comm_cost, Direction, PayloadKind};
use fedmmkt::{parse_config_str, preset, run_experiment, Error, Experiment, ProtocolConfig, Variant};
use serde_json::Value;

fn smoke() -> ProtocolConfig {
    preset("smoke").unwrap()
}

fn with_variant(mut cfg: ProtocolConfig, v: Variant) -> ProtocolConfig {
    cfg.variant = v;
    cfg
}

fn single_modality(mut cfg: ProtocolConfig) -> ProtocolConfig {
    cfg.num_image_clients = cfg.num_clients;
    cfg
}

#[test]
fn ledger_matches_formula_every_round() {
    let cases = [
        with_variant(smoke(), Variant::Representation),
        with_variant(smoke(), Variant::Logit),
        with_variant(single_modality(smoke()), Variant::Unimodal),
        with_variant(single_modality(smoke()), Variant::Logit),
    ];
    for mut cfg in cases {
        cfg.rounds = 3;
        let res = run_experiment(&cfg).unwrap();
        let expected = comm_cost(&cfg, cfg.effective_variant());
        assert_eq!(res.ledger.rows().len(), 3);
        for row in res.ledger.rows() {
            assert_eq!(row.upload_bytes, expected.upload_bytes, "{:?} round {}", cfg.variant, row.round);
            assert_eq!(row.download_bytes, expected.download_bytes, "{:?} round {}", cfg.variant, row.round);
        }
    }
}

#[test]
fn messages_sum_to_ledger() {
    let res = run_experiment(&smoke()).unwrap();
    for (tr, row) in res.traces.iter().zip(res.ledger.rows()) {
        let up: u64 = tr.messages.iter().filter(|m| m.direction == Direction::Up).map(|m| m.bytes).sum();
        let down: u64 = tr.messages.iter().filter(|m| m.direction == Direction::Down).map(|m| m.bytes).sum();
        assert_eq!((up, down), (row.upload_bytes, row.download_bytes));
        let k = smoke().num_clients;
        for kind in [PayloadKind::SyntheticBatch, PayloadKind::ReportBatch, PayloadKind::RefinedBatch] {
            assert_eq!(tr.messages.iter().filter(|m| m.kind == kind).count(), k);
        }
    }
}

#[test]
fn zero_epochs_leave_models_untouched() {
    for v in [Variant::Representation, Variant::Logit] {
        let mut cfg = with_variant(smoke(), v);
        cfg.rounds = 2;
        cfg.server.finetune_epochs = 0;
        cfg.server.retrain_epochs = 0;
        let mut exp = Experiment::new(cfg.clone()).unwrap();
        exp.pretrain_clients().unwrap();
        let clients: Vec<Vec<f64>> = exp.clients.iter().map(|c| c.parameters()).collect();
        let decoder = exp.generator.decoder.clone();
        for _ in 0..cfg.rounds {
            exp.run_round().unwrap();
        }
        for (before, after) in clients.iter().zip(&exp.clients) {
            let after = after.parameters();
            assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(decoder, exp.generator.decoder);
        let c = comm_cost(&cfg, v);
        assert_eq!(exp.ledger.total_upload(), 2 * c.upload_bytes);
        assert_eq!(exp.ledger.total_download(), 2 * c.download_bytes);
    }
}

#[test]
fn perfect_agreement_keeps_every_record() {
    // well-separated, uncorrupted, low-noise world: every client predicts the
    // same label for every synthetic record
    let mut cfg = smoke();
    cfg.world.corruption = 0.0;
    cfg.world.noise_std = 0.05;
    cfg.world.dirichlet_alpha = 1000.0;
    let res = run_experiment(&cfg).unwrap();
    for tr in &res.traces {
        assert!(tr.records.iter().all(|r| r.kept && r.votes == cfg.num_clients));
    }
    assert_eq!(res.final_metrics().kept_fraction, Some(1.0));
}

#[test]
fn runs_are_deterministic() {
    for v in [Variant::Representation, Variant::Logit] {
        let cfg = with_variant(smoke(), v);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics_jsonl(), b.metrics_jsonl());
        assert_eq!(a.ledger.to_csv(), b.ledger.to_csv());
        assert_eq!(
            serde_json::to_string(&a.traces).unwrap(),
            serde_json::to_string(&b.traces).unwrap()
        );
    }
    let mut other = smoke();
    other.seed += 1;
    assert_ne!(run_experiment(&smoke()).unwrap().metrics_jsonl(), run_experiment(&other).unwrap().metrics_jsonl());
}

#[test]
fn single_modality_rep_runs_unimodal() {
    let cfg = single_modality(smoke());
    assert_eq!(cfg.effective_variant(), Variant::Unimodal);
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.variant, Variant::Unimodal);
    let m = res.final_metrics();
    assert!(m.txt_acc.is_none() && m.img_acc.is_some());
    for tr in &res.traces {
        for r in tr.records.iter().filter(|r| r.kept) {
            let a = r.alphas.as_ref().unwrap();
            assert_eq!(a.len(), cfg.num_clients);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn unimodal_on_mixed_clients_is_rejected() {
    let cfg = with_variant(smoke(), Variant::Unimodal);
    assert!(Experiment::new(cfg).is_err());
}

#[test]
fn round_before_pretraining_is_rejected() {
    let mut exp = Experiment::new(smoke()).unwrap();
    assert!(exp.run_round().is_err());
}

#[test]
fn errors_carry_round_and_phase() {
    let mut exp = Experiment::new(smoke()).unwrap();
    exp.pretrain_clients().unwrap();
    exp.run_round().unwrap();
    // an extractor whose input width no longer matches the client's modality
    let hidden = exp.clients[0].hidden_dim();
    exp.clients[0].extractor = fedmmkt::math::Mat::zeros(hidden, 3);
    let err = exp.run_round().unwrap_err();
    match &err {
        Error::Phase { round, phase, .. } => {
            assert_eq!(*round, 2);
            assert_eq!(*phase, "inference");
        }
        other => panic!("expected phase context, got {other:?}"),
    }
    assert!(err.to_string().starts_with("round 2, phase inference:"));
}

const GOLDEN_CONFIG: &str = r#"{
    "rounds": 2,
    "num_clients": 2,
    "num_image_clients": 1,
    "synthetic_per_round": 6,
    "num_classes": 3,
    "rep_dim": 8,
    "seed": 11,
    "world": {"image_dim": 4, "text_dim": 4, "samples_per_client": 30},
    "model": {"hidden_dims": [6, 5]},
    "train": {"epochs": 5, "batch_size": 8},
    "server": {"learning_rate": 0.2, "finetune_epochs": 2, "retrain_epochs": 2},
    "fusion": {"batch_size": 3},
    "eval": {"heldout_per_class": 10, "gan_test_per_class": 5}
}"#;

fn golden_path(variant: Variant) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/trace_{}.json", variant.as_str()))
}

fn assert_close(expected: &Value, actual: &Value, path: &str) {
    match (expected, actual) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{path}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{path}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_close(x, y, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "{path}: keys");
            for (k, x) in a {
                assert_close(x, &b[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(expected, actual, "{path}"),
    }
}

/// Set `FEDMMKT_BLESS=1` to regenerate the golden files.
#[test]
fn golden_trace() {
    for v in [Variant::Representation, Variant::Logit] {
        let mut cfg = parse_config_str(GOLDEN_CONFIG).unwrap();
        cfg.variant = v;
        let res = run_experiment(&cfg).unwrap();
        let actual = serde_json::json!({
            "metrics": res.metrics,
            "ledger": res.ledger.rows(),
            "traces": res.traces,
        });
        let path = golden_path(v);
        if std::env::var_os("FEDMMKT_BLESS").is_some() {
            std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap()).unwrap();
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let expected: Value = serde_json::from_str(&text).unwrap();
        assert_close(&expected, &actual, v.as_str());
    }
}
