"""Smoke test for the fedmmkt Python bindings.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""

import json
import math

import fedmmkt


def check_kernels():
    p = fedmmkt.softmax([1.0, 2.0, 3.0])
    assert abs(sum(p) - 1.0) < 1e-12
    assert fedmmkt.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert abs(fedmmkt.kl_divergence([0.7, 0.3], [0.4, 0.6]) - 0.1837869) < 1e-6
    assert fedmmkt.entropy_weight([1.0, 0.0]) == 1.0
    assert abs(fedmmkt.entropy_weight([0.5, 0.5]) - 1.0 / (1.0 + math.log(2))) < 1e-12
    assert abs(fedmmkt.cosine([1.0, 0.0], [0.0, 2.0])) < 1e-12
    assert fedmmkt.lab_vote([(2, 0.9), (2, 0.5), (1, 0.8)], 3) == (2, 2, 1.4)
    assert abs(sum(fedmmkt.fusion_alphas([0.3, -1.0, 2.0])) - 1.0) < 1e-12
    try:
        fedmmkt.kl_divergence([0.5, 0.6], [0.5, 0.5])
    except ValueError:
        pass
    else:
        raise AssertionError("unnormalised distribution accepted")


def check_comm_cost():
    cfg = fedmmkt.ProtocolConfig.preset("comm-reference")
    assert cfg.comm_cost("rep") == (2_464_000, 7_478_400)
    assert cfg.comm_cost("logit") == (326_400, 5_020_800)
    assert fedmmkt.format_mb(2_464_000) == "2.35"


def check_config():
    names = [n for n, _ in fedmmkt.presets()]
    assert "smoke" in names and "desk" in names
    cfg = fedmmkt.ProtocolConfig.preset("smoke")
    again = fedmmkt.ProtocolConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
    bad = json.loads(cfg.to_json())
    bad["not_a_field"] = 1
    try:
        fedmmkt.ProtocolConfig.from_json(json.dumps(bad))
    except ValueError as e:
        assert "not_a_field" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def check_run():
    cfg = fedmmkt.ProtocolConfig.preset("smoke")
    cfg.rounds = 2
    cfg.variant = "logit"
    res = fedmmkt.run(cfg)
    rows = res.metrics()
    assert [r["round"] for r in rows] == [0, 1, 2]
    assert all(0.0 <= r["mean_acc"] <= 1.0 for r in rows)
    up, down = cfg.comm_cost()
    assert res.ledger() == [(1, up, down), (2, up, down)]
    assert res.metrics_jsonl() == fedmmkt.run(cfg).metrics_jsonl()
    assert len(fedmmkt.run_standalone(cfg)) == 4


if __name__ == "__main__":
    check_kernels()
    check_comm_cost()
    check_config()
    check_run()
    print("python smoke test passed")
