import json

import numpy as np
import pytest

from pacle.cli import ConfigError, git_blob_hash, main, parse_seed_range
from pacle.benchmarks import linear_mdp
from pacle.data import OfflineDataset
from pacle.mdp import TabularLinearMdp, TabularPolicy, evaluate_policy_exact


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_generate_episode_count_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "linear"}, "data": {"episodes": 37}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "data_seed0.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "data_seed0.jsonl").read_bytes()
    ds = OfflineDataset.load(tmp_path / "a" / "data_seed0.jsonl")
    assert ds.n == 37 * ds.horizon


def test_generate_chain_writes_mdp_file(tmp_path):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "chain", "params": {"N": 3, "variant": "b"}},
                               "data": {"episodes": 5}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    m = TabularLinearMdp.load(tmp_path / "o" / "mdp.json")
    assert m.horizon == 4


def test_mdp_file_roundtrip_through_config(tmp_path):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "chain", "params": {"N": 2}}, "data": {"episodes": 5}})
    main(["generate", "--config", cfg, "--out", str(tmp_path / "o")])
    cfg2 = write_cfg(tmp_path, {"mdp": {"file": "o/mdp.json"}, "data": {"episodes": 5}}, "cfg2.json")
    assert main(["generate", "--config", cfg2, "--out", str(tmp_path / "p")]) == 0


def test_run_single_round_is_uniform_policy(tmp_path):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "linear"}, "data": {"episodes": 20},
                               "actor": {"T": 1, "eta": 0.1}})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o" / "summary.json").read_text())["seeds"][0]
    m = linear_mdp(np.random.default_rng(0))
    assert rec["V_alg"] == pytest.approx(evaluate_policy_exact(m, TabularPolicy.uniform(m)).v1, abs=1e-12)


def test_run_is_reproducible_and_complete(tmp_path):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "linear"}, "data": {"episodes": 30},
                               "actor": {"T": 5}, "baselines": ["beta0", "greedy-lsvi"]})
    for d in ("a", "b"):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for f in ("trace_seed0.jsonl", "values_seed0.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rec = json.loads((tmp_path / "a" / "summary.json").read_text())["seeds"][0]
    for key in ("V_star", "V_alg", "U_opt", "R_opt", "theorem_residual"):
        assert key in rec
    assert set(rec["baselines"]) == {"beta0", "greedy-lsvi"}
    lines = (tmp_path / "a" / "trace_seed0.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 5
    assert "provenance" in json.loads(lines[0])


def test_verify_passes_hard_checks(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "linear"}, "data": {"episodes": 50},
                               "actor": {"T": 5},
                               "verify": {"resamples": 10, "policies": 2, "nearby_draws": 100, "regret_T": 50}})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert json.loads((tmp_path / "o" / "verify.json").read_text())["pass"]


@pytest.mark.parametrize("cfg", [
    {"mdp": {"generator": "nope"}},
    {"mdp": {"generator": "linear"}, "actor": {"T": 0}},
    {"mdp": {"generator": "linear"}, "critic": {"lam": -1}},
    {"mdp": {"generator": "linear"}, "unknown": 1},
    {"mdp": {"file": "missing.json"}},
    {"mdp": {"generator": "hypercube", "params": {"d": 2}}},
    {"mdp": {"generator": "linear"}, "critic": {"radius": 2.0}},
])
def test_bad_configs_exit_2(tmp_path, cfg):
    assert main(["run", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2


def test_unreadable_config_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["run", "--config", str(p)]) == 2


def test_seed_range_and_jobs(tmp_path, monkeypatch):
    assert parse_seed_range("2..4") == [2, 3, 4]
    with pytest.raises(ConfigError):
        parse_seed_range("4..2")
    with pytest.raises(ConfigError):
        parse_seed_range("x")
    monkeypatch.setenv("PACLE_JOBS", "3")
    cfg = write_cfg(tmp_path, {"mdp": {"generator": "linear"}, "data": {"episodes": 4}})
    assert main(["generate", "--config", cfg, "--seed-range", "1..3", "--out", str(tmp_path / "o")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").glob("data_seed*.jsonl")) == [
        "data_seed1.jsonl", "data_seed2.jsonl", "data_seed3.jsonl"]


def test_git_blob_hash_matches_git():
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
