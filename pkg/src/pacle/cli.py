"""Batch front-end: ``pacle generate|run|verify --config cfg.json``.

Exit codes: 0 success, 1 property failure (or every seed failed), 2 config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import analysis, benchmarks
from .actor import (ActorConfig, mirror_descent_regret_check, optimization_error,
                    run_pacle, softmax_l1_distance)
from .baselines import greedy_lsvi
from .critic import CriticConfig, CriticInfeasible, RegressionData, pessimism_vector, run_critic
from .data import BehaviorPlan, OfflineDataset, build_covariances, collect_dataset
from .mdp import (MixturePolicy, SoftmaxPolicy, TabularLinearMdp, TabularPolicy,
                  ValidationError, evaluate_policy_exact, optimal_values)

MAX_PAIRS_PER_STAGE = 10_000

_beta_schema = {
    "oneOf": [
        {"type": "object", "required": ["mode"], "additionalProperties": False,
         "properties": {"mode": {"const": "formula"}, "c": {"type": "number", "minimum": 0},
                        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "eps": {"type": "number", "minimum": 0},
                        "log_count": {"enum": ["samples", "iterations"]}}},
        {"type": "object", "required": ["mode"], "additionalProperties": False,
         "properties": {"mode": {"const": "calibrated"},
                        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "resamples": {"type": "integer", "minimum": 10},
                        "probes": {"type": "integer", "minimum": 0},
                        "eps": {"type": "number", "minimum": 0}}},
        {"type": "object", "required": ["mode", "values"], "additionalProperties": False,
         "properties": {"mode": {"const": "explicit"},
                        "values": {"type": "array", "items": {"type": "number", "minimum": 0}}}},
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["mdp"],
    "additionalProperties": False,
    "properties": {
        "mdp": {
            "type": "object",
            "oneOf": [
                {"required": ["file"], "properties": {"file": {"type": "string"}}, "additionalProperties": False},
                {"required": ["generator"], "additionalProperties": False,
                 "properties": {"generator": {"enum": list(benchmarks.GENERATORS)},
                                "params": {"type": "object"}}},
            ],
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"plan": {"enum": ["default", "uniform-behavior", "file"]},
                           "episodes": {"type": "integer", "minimum": 0},
                           "path": {"type": "string"}},
        },
        "actor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T": {"type": "integer", "minimum": 1},
                           "eta": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "theorem"}]}},
        },
        "critic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"radius": {"oneOf": [{"type": "number"}, {"type": "array", "items": {"type": "number"}}]},
                           "lam": {"type": "number", "exclusiveMinimum": 0},
                           "beta": _beta_schema},
        },
        "baselines": {"type": "array", "items": {"enum": ["beta0", "greedy-lsvi"]}, "uniqueItems": True},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "output": {"type": "string"},
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"resamples": {"type": "integer", "minimum": 1},
                           "policies": {"type": "integer", "minimum": 1},
                           "nearby_draws": {"type": "integer", "minimum": 1},
                           "regret_T": {"type": "integer", "minimum": 1},
                           "negative_control": {"type": "boolean"}},
        },
    },
}

DEFAULTS = {
    "data": {"plan": "default", "episodes": 500},
    "actor": {"T": 50, "eta": "theorem"},
    "critic": {"radius": 1.0, "lam": 1.0, "beta": {"mode": "formula", "c": 1.0, "delta": 0.1, "eps": 0.0}},
    "baselines": [],
    "seeds": [0],
    "output": "pacle_out",
    "verify": {"resamples": 50, "policies": 5, "nearby_draws": 1000, "regret_T": 200, "negative_control": True},
}


class ConfigError(Exception):
    pass


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format: sha1("blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path, seed_range=None, out=None) -> dict:
    try:
        raw = Path(path).read_bytes()
        given = json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        jsonschema.validate(given, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config invalid at {list(exc.absolute_path)}: {exc.message}") from exc
    cfg = _merge(DEFAULTS, given)
    if "beta" in given.get("critic", {}):
        cfg["critic"]["beta"] = copy.deepcopy(given["critic"]["beta"])
    base = Path(path).resolve().parent
    for section, key in (("mdp", "file"), ("data", "path")):
        if key in cfg.get(section, {}):
            cfg[section][key] = str((base / cfg[section][key]).resolve())
    if seed_range:
        cfg["seeds"] = parse_seed_range(seed_range)
    if out:
        cfg["output"] = out
    if cfg["data"]["plan"] == "file" and "path" not in cfg["data"]:
        raise ConfigError("data plan 'file' needs a path")
    hashes = {"config": git_blob_hash(raw)}
    for section, key in (("mdp", "file"), ("data", "path")):
        p = cfg.get(section, {}).get(key)
        if p:
            try:
                hashes[p] = git_blob_hash(Path(p).read_bytes())
            except OSError as exc:
                raise ConfigError(f"cannot read {p}: {exc}") from exc
    cfg["_input_hashes"] = hashes
    return cfg


def parse_seed_range(text: str) -> list[int]:
    try:
        a, b = text.split("..")
        a, b = int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"seed range must look like a..b, got {text!r}") from exc
    if a < 0 or b < a:
        raise ConfigError("seed range must satisfy 0 <= a <= b")
    return list(range(a, b + 1))


def provenance(cfg: dict) -> dict:
    # the output location is not an input, so it stays out of the hashed record
    resolved = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "output"}
    return {"config": resolved, "input_hashes": cfg["_input_hashes"],
            "config_hash": git_blob_hash(json.dumps(resolved, sort_keys=True).encode())}


# ---------------------------------------------------------------------------
# Instance and data construction


def build_instance(cfg: dict, seed: int):
    """Returns (mdp, dataset, extra) for one seed."""
    spec = cfg["mdp"]
    plan = cfg["data"]["plan"]
    extra = {}
    if "file" in spec:
        mdp = TabularLinearMdp.load(spec["file"])
    else:
        name, params = spec["generator"], dict(spec.get("params", {}))
        try:
            if name == "hypercube":
                d, H, n = int(params["d"]), int(params["H"]), int(params["n"])
                u = params.get("u")
                if u is None:
                    u = np.random.default_rng(params.get("instance_seed", 0)).choice([-1.0, 1.0], size=(H, d))
                inst, data = benchmarks.make_lower_bound_instance(d, H, n, u, rng_seed=seed)
                mdp = inst.mdp
                extra["instance"] = inst
                if plan == "default":
                    _check_size(mdp)
                    return mdp, data, extra
            elif name == "chain":
                mdp = benchmarks.make_chain_mdp(int(params.get("N", 3)), params.get("variant", "a"))
            elif name == "linear":
                rng = np.random.default_rng(params.get("instance_seed", 0))
                mdp = benchmarks.linear_mdp(rng, int(params.get("n_states", 3)), int(params.get("horizon", 2)),
                                            float(params.get("reward_scale", 0.3)))
            elif name == "coverage-gap":
                mdp = benchmarks.coverage_gap_mdp(thin_actions=int(params.get("thin_actions", 2)))
                if plan == "default":
                    _check_size(mdp)
                    return mdp, benchmarks.coverage_gap_dataset(mdp, int(params.get("good_samples", 400)), seed), extra
            elif name == "random":
                rng = np.random.default_rng(params.get("instance_seed", 0))
                mdp = benchmarks.random_tabular_mdp(rng, reward_scale=float(params.get("reward_scale", 0.3)))
            else:  # pragma: no cover - schema guards the names
                raise ConfigError(f"unknown generator {name}")
        except KeyError as exc:
            raise ConfigError(f"generator {name} needs parameter {exc}") from exc
    _check_size(mdp)
    if plan == "file":
        data = OfflineDataset.load(cfg["data"]["path"])
        if data.horizon != mdp.horizon:
            raise ConfigError("dataset horizon does not match the MDP")
    else:
        data = collect_dataset(mdp, BehaviorPlan(TabularPolicy.uniform(mdp), cfg["data"]["episodes"]), seed)
    return mdp, data, extra


def _check_size(mdp):
    for h in range(mdp.horizon):
        if mdp.n_states(h) * mdp.n_actions(h) > MAX_PAIRS_PER_STAGE:
            raise ConfigError(f"stage {h} has more than {MAX_PAIRS_PER_STAGE} state-action pairs")


def actor_config(cfg: dict, mdp: TabularLinearMdp) -> ActorConfig:
    a = cfg["actor"]
    if a["eta"] == "theorem":
        return ActorConfig.theorem_stepsize(a["T"], mdp.max_actions)
    return ActorConfig(a["T"], float(a["eta"]))


def radii(cfg: dict, mdp: TabularLinearMdp) -> list[float]:
    r = cfg["critic"]["radius"]
    out = [float(r)] * mdp.horizon if np.isscalar(r) else [float(x) for x in r]
    if len(out) != mdp.horizon:
        raise ConfigError("radius list length differs from the horizon")
    return out


def compute_beta(cfg: dict, mdp: TabularLinearMdp, data: OfflineDataset, actor: ActorConfig, seed: int):
    spec = cfg["critic"]["beta"]
    lam = cfg["critic"]["lam"]
    if spec["mode"] == "explicit":
        vals = [float(v) for v in spec["values"]]
        if len(vals) == 1:
            vals = vals * mdp.horizon
        if len(vals) != mdp.horizon:
            raise ConfigError("explicit beta needs one value per stage")
        return vals, {"mode": "explicit"}
    delta = spec.get("delta", 0.1)
    eps = spec.get("eps", 0.0)
    if spec["mode"] == "formula":
        vals = pessimism_vector(delta, mdp.dims, data.stage_counts, actor.T, actor.eta, eps, lam,
                                spec.get("c", 1.0), spec.get("log_count", "samples"))
        return vals, {"mode": "formula", "c": spec.get("c", 1.0), "delta": delta}
    probes = analysis.make_probes(mdp, radii(cfg, mdp), spec.get("probes", 10), seed)
    stats = analysis.ProbeStatistics(mdp, probes, radii(cfg, mdp))
    vals = analysis.calibrated_beta(data, stats, lam, delta, spec.get("resamples", 200), seed, eps)
    return vals, {"mode": "calibrated", "delta": delta, "resamples": spec.get("resamples", 200)}


# ---------------------------------------------------------------------------
# Commands


def _jobs(arg) -> int:
    env = os.environ.get("PACLE_JOBS")
    n = int(env) if env else (arg or 1)
    if n < 1:
        raise ConfigError("jobs must be positive")
    return n


def _fan_out(fn, seeds, jobs):
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, seeds))


def cmd_generate(cfg: dict, jobs: int = 1) -> int:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)

    def one(seed):
        mdp, data, _ = build_instance(cfg, seed)
        data.save(out / f"data_seed{seed}.jsonl", {"provenance": prov, "seed": seed})
        return mdp

    mdps = _fan_out(one, cfg["seeds"], jobs)
    spec = mdps[0].to_dict()
    spec["provenance"] = prov
    (out / "mdp.json").write_text(json.dumps(spec, sort_keys=True))
    return 0


def _run_seed(cfg: dict, seed: int) -> dict:
    mdp, data, _ = build_instance(cfg, seed)
    actor = actor_config(cfg, mdp)
    beta, beta_meta = compute_beta(cfg, mdp, data, actor, seed)
    crit = CriticConfig(radii(cfg, mdp), beta, cfg["critic"]["lam"])
    reg = RegressionData(data, mdp, crit.lam)
    covs = reg.covariances
    vstar, pstar = optimal_values(mdp)
    rec = {"seed": seed, "beta": beta, "beta_meta": beta_meta, "n": data.n, "V_star": vstar.v1}
    try:
        trace = run_pacle(data, mdp, actor, crit, reg=reg)
    except CriticInfeasible as exc:
        rec.update(status="failed", error=str(exc), certificate=exc.certificate)
        return rec
    v_alg = evaluate_policy_exact(mdp, trace.mixture).v1
    U = analysis.uncertainty(pstar, beta, covs, mdp)
    R = optimization_error(mdp.horizon, mdp.max_actions, actor.T)
    rec.update(status="ok", V_alg=v_alg, U_opt=U, R_opt=R, suboptimality=vstar.v1 - v_alg,
               theorem_residual=vstar.v1 - v_alg - U - R,
               values=[float(v) for v in trace.values], trace=[r.to_json() for r in trace.records])
    rec["baselines"] = {}
    for name in cfg["baselines"]:
        if name == "greedy-lsvi":
            pol, _ = greedy_lsvi(data, mdp, crit.lam)
            v = evaluate_policy_exact(mdp, pol).v1
        else:
            tr0 = run_pacle(data, mdp, actor, crit.with_beta([0.0] * mdp.horizon), reg=reg)
            v = evaluate_policy_exact(mdp, tr0.mixture).v1
        rec["baselines"][name] = {"V": v, "suboptimality": vstar.v1 - v}
    return rec


def cmd_run(cfg: dict, jobs: int = 1) -> int:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)
    results = _fan_out(lambda s: _run_seed(cfg, s), cfg["seeds"], jobs)
    summary = {"provenance": prov, "seeds": []}
    for rec in results:
        seed = rec["seed"]
        trace = rec.pop("trace", None)
        values = rec.pop("values", None)
        if trace is not None:
            with open(out / f"trace_seed{seed}.jsonl", "w") as fh:
                fh.write(json.dumps({"provenance": prov, "seed": seed}, sort_keys=True) + "\n")
                for line in trace:
                    line["solver"] = {k: v for k, v in line["solver"].items() if k != "wall_time"}
                    fh.write(json.dumps(line) + "\n")
            with open(out / f"values_seed{seed}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["# config_hash", prov["config_hash"]])
                w.writerow(["t", "V_lower"])
                w.writerows([t, v] for t, v in enumerate(values))
        summary["seeds"].append(rec)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    ok = [r for r in results if r["status"] == "ok"]
    return 0 if ok else 1


def _verify_seed(cfg: dict, seed: int) -> dict:
    """Hard identities plus the statistical Prop-2 style frequencies for one seed."""
    vcfg = cfg["verify"]
    mdp, data, _ = build_instance(cfg, seed)
    actor = actor_config(cfg, mdp)
    beta, _ = compute_beta(cfg, mdp, data, actor, seed)
    rad = radii(cfg, mdp)
    crit = CriticConfig(rad, beta, cfg["critic"]["lam"])
    rng = np.random.default_rng(seed)
    hard, stats = {}, {}

    # critic identities on a few random softmax policies
    reg = RegressionData(data, mdp, crit.lam)
    exact, simple, kkt = 0.0, 0.0, 0.0
    vstar, pstar = optimal_values(mdp)
    comparators = [pstar, TabularPolicy.uniform(mdp)]
    for _ in range(vcfg["policies"]):
        pol = SoftmaxPolicy(tuple(rng.normal(size=d) for d in mdp.dims))
        try:
            sol = run_critic(reg, pol, crit)
        except CriticInfeasible:
            continue
        kkt = max(kkt, sol.report.kkt_residual)
        ind = analysis.induced_mdp(mdp, pol, sol)
        exact = max(exact, analysis.exactness_residual(ind, pol))
        for comp in comparators + [pol]:
            lhs, rhs = analysis.value_difference(ind, comp)
            simple = max(simple, abs(lhs - rhs))
    hard["critic_exactness"] = {"value": exact, "tol": 1e-6, "pass": exact <= 1e-6}
    hard["value_difference_identity"] = {"value": simple, "tol": 1e-8, "pass": simple <= 1e-8}
    hard["solver_kkt"] = {"value": kkt, "tol": 1e-6, "pass": kkt <= 1e-6}

    # nearby policies on this instance's features
    worst = -np.inf
    for _ in range(vcfg["nearby_draws"]):
        h = int(rng.integers(mdp.horizon))
        d = mdp.dim(h)
        th = rng.normal(size=d) * rng.uniform(0, 5)
        step = rng.normal(size=d)
        step *= rng.uniform(0, 0.5) / max(np.linalg.norm(step), 1e-300)
        gap = softmax_l1_distance(mdp.features[h], th, th + step, mdp.action_mask[h]) - 8 * np.linalg.norm(step)
        worst = max(worst, gap)
    hard["nearby_policies"] = {"value": float(worst), "pass": bool(worst <= 1e-12)}

    # exact-feedback regret on a one-hot sequence
    T = vcfg["regret_T"]
    seq, mean = benchmarks.one_hot_mdp_sequence(rng, T)
    eta = math.sqrt(math.log(4) / T)
    res = mirror_descent_regret_check(seq, optimal_values(mean)[1], eta)
    hard["actor_regret"] = {"value": res.average_regret, "bound": res.bound, "pass": res.average_regret <= res.bound}

    # closedness fixtures
    ca = analysis.closedness_report(benchmarks.make_chain_mdp(3, "a"), [1.0] * 4, 5, seed)
    chain_b = benchmarks.make_chain_mdp(3, "b")
    cb = analysis.closedness_report(chain_b, [1.0] * 4, 5, seed, extra=[benchmarks.chain_adversarial_probe(chain_b)])
    hard["closedness_chain_a"] = {"value": max(ca.eps), "pass": max(ca.eps) <= 1e-7}
    hard["closedness_chain_b"] = {"value": cb.eps[0], "pass": cb.eps[0] >= 1 - 1e-6}

    # statistical: bounds on the induced MDP over resampled datasets
    def frequencies(beta_vec):
        c = crit.with_beta(beta_vec)
        pol = SoftmaxPolicy.zeros(mdp.dims)
        ok_a = ok_b = trials = 0
        for k in range(vcfg["resamples"]):
            d_k, _, _ = _resample(cfg, mdp, seed * 100_003 + k + 1)
            try:
                sol = run_critic(RegressionData(d_k, mdp, c.lam), pol, c)
            except CriticInfeasible:
                continue
            rep = analysis.verify_proposition2(mdp, pol, comparators, sol, beta_vec, [0.0] * mdp.horizon,
                                               build_covariances(d_k, mdp, c.lam))
            trials += 1
            ok_a += rep.holds_a
            ok_b += rep.holds_b
        return {"trials": trials, "freq_a": ok_a / max(trials, 1), "freq_b": ok_b / max(trials, 1)}

    stats["pessimism_bounds"] = frequencies(beta)
    if vcfg["negative_control"]:
        stats["pessimism_half_beta"] = frequencies([b / 2 for b in beta])
    return {"seed": seed, "hard": hard, "statistical": stats}


def _resample(cfg, mdp, seed):
    """A fresh dataset from the configured plan for the same instance."""
    spec = cfg["mdp"]
    if "generator" in spec and spec["generator"] in ("hypercube", "coverage-gap") and cfg["data"]["plan"] == "default":
        return build_instance(cfg, seed)
    return collect_dataset(mdp, BehaviorPlan(TabularPolicy.uniform(mdp), cfg["data"]["episodes"]), seed), None, None


def cmd_verify(cfg: dict, jobs: int = 1) -> int:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    results = _fan_out(lambda s: _verify_seed(cfg, s), cfg["seeds"], jobs)
    all_hard = all(v["pass"] for r in results for v in r["hard"].values())
    report = {"provenance": provenance(cfg), "pass": all_hard, "seeds": results}
    (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    for r in results:
        for name, v in r["hard"].items():
            print(f"seed {r['seed']} {name}: {'PASS' if v['pass'] else 'FAIL'} ({v['value']:.3g})")
        for name, v in r["statistical"].items():
            print(f"seed {r['seed']} {name}: freq(a)={v['freq_a']:.3f} freq(b)={v['freq_b']:.3f} over {v['trials']}")
    return 0 if all_hard else 1


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pacle", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed-range", help="inclusive range a..b, overrides the config seeds")
    parser.add_argument("--jobs", type=int, default=None, help="worker threads (PACLE_JOBS overrides)")
    parser.add_argument("--out", help="output directory, overrides the config")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed_range, args.out)
        jobs = _jobs(args.jobs)
        return COMMANDS[args.command](cfg, jobs)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
