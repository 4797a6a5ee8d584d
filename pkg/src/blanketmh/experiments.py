"""End-to-end benchmark runs: generate, compile, infer, diagnose, compare with oracles."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import zlib
from pathlib import Path

import numpy as np

from . import compile as C
from . import diagnostics as D
from . import infer as I
from . import models as M
from . import nn
from .graph import Address, addr, ancestral_sample

log = logging.getLogger(__name__)


def substream(seed: int, name: str) -> int:
    """Integer seed for the named substream of a master seed."""
    seq = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclasses.dataclass
class Stage:
    """Output of one proposer's inference run."""

    outputs: list
    metrics: dict
    timings: dict


def draws_of(outputs: list[I.ChainOutput]) -> list[dict]:
    """Every recorded state as an address -> value dict (chains in order)."""
    draws = []
    for o in outputs:
        for it in range(o.num_samples):
            draws.append({a: seq[it] for a, seq in o.samples.items() if seq[it] is not None})
    return draws


def sample_matrices(outputs: list[I.ChainOutput]) -> dict[Address, np.ndarray]:
    good = [o for o in outputs if o.error is None]
    addrs = sorted({a for o in good for a in o.samples})
    n = min((o.num_samples for o in good), default=0)
    out = {}
    for a in addrs:
        rows = []
        for o in good:
            seq = o.samples.get(a, [None] * n)[:n]
            rows.append([math.nan if v is None else float(v) for v in seq])
        out[a] = np.asarray(rows, dtype=np.float64).reshape(len(good), n)
    return out


def diagnose(outputs: list[I.ChainOutput], model=None, heldout=None) -> dict:
    """Metrics JSON for a set of chains; timings are deliberately excluded."""
    n = min((o.num_samples for o in outputs), default=0)
    errors = {str(o.chain): o.error for o in outputs if o.error}
    summary = I.chain_summary(outputs)
    if n < 4:
        metrics = {"ess": {}, "rhat": {}, "min_ess": None, "median_ess": None, "max_rhat": None,
                   "median_rhat": None, "flags": ["insufficient draws"]}
    else:
        metrics = D.summarize(sample_matrices(outputs))
    if heldout and model is not None and n >= 1:
        metrics["pll"] = D.model_pll(model, draws_of([o for o in outputs if o.error is None]), heldout)
    metrics["acceptance_rate"] = summary["acceptance_rate"]
    metrics["n_chains"] = len(outputs)
    metrics["n_draws"] = n
    if errors:
        metrics["errors"] = errors
        metrics["flags"] = metrics.get("flags", []) + ["chain failure"]
    return metrics


def run_inference(zoo: M.ZooModel, prop, cfg: I.ChainConfig, n_chains: int, init=None) -> Stage:
    t0 = time.perf_counter()
    outputs = I.run_chains(zoo.model, zoo.observations, prop, cfg, n_chains, init=init)
    wall = time.perf_counter() - t0
    metrics = diagnose(outputs, zoo.model, zoo.heldout)
    timings = {"infer_seconds": wall, "per_chain_seconds": [o.infer_seconds for o in outputs]}
    return Stage(outputs, metrics, timings)


def compile_model(zoo: M.ZooModel, cfg: C.TrainingConfig):
    t0 = time.perf_counter()
    store = C.train(zoo.model, cfg)
    return store, time.perf_counter() - t0


def training_report(store: C.ArtifactStore, seconds: float) -> dict:
    return {
        "param_count": store.param_count(),
        "param_count_by_family": {f: store.param_count([f]) for f in store.family_list},
        "final_loss": store.provenance.get("final_loss"),
        "compile_seconds": seconds,
    }


def _verdict(checks: dict[str, bool]) -> dict:
    return {"checks": checks, "passed": all(checks.values())}


# ---------------------------------------------------------------------------
# individual experiments


def conj_normal(seed: int = 0, num_worlds: int = 1000, epochs: int = 200, grid: int = 33,
                chains: int = 10, samples: int = 100, burn_in: int = 100, **_) -> dict:
    zoo = M.conj_normal()
    cfg = C.TrainingConfig(num_worlds=num_worlds, epochs=epochs, components=1, seed=substream(seed, "compile"))
    store, secs = compile_model(zoo, cfg)
    m = zoo.model
    errs = []
    rng = np.random.default_rng(substream(seed, "grid"))
    for y in np.linspace(-4.0, 4.0, grid):
        w = ancestral_sample(m.conditioned({addr("y"): float(y)}), rng)
        phi = nn.compute_phi(store, w, addr("x"))
        errs.append(abs(float(phi.means[0]) - m.posterior(float(y))[0]))
    stage = run_inference(zoo, I.LicProposer(store), I.ChainConfig(samples, burn_in, substream(seed, "infer")), chains)
    report = {
        "max_abs_mean_error": max(errs),
        "mean_abs_mean_error": float(np.mean(errs)),
        "grid_errors": errs,
        "training": training_report(store, secs),
        "metrics": {"lic": stage.metrics},
    }
    report["verdict"] = _verdict({
        "max_abs_mean_error<=0.1": report["max_abs_mean_error"] <= 0.1,
        "mean_abs_mean_error<=0.05": report["mean_abs_mean_error"] <= 0.05,
    })
    return {"report": report, "stages": {"lic": stage}, "stores": {"lic": store}}


def random_walk_escapes(replicates: int = 5, steps: int = 1000, step_size: float = 0.5, seed: int = 0,
                        threshold: float = 5.0) -> list[bool]:
    """Fixed-step random-walk chains on gmm2d started at x=0; whether each ever passes ``threshold``."""
    zoo = M.gmm2d()
    hits = []
    for r in range(replicates):
        prop = I.AdaptiveRwmh(math.log(step_size), adapt=False)
        cfg = I.ChainConfig(steps, 0, seed + r)
        out = I.run_chain(zoo.model, zoo.observations, prop, cfg, init={addr("x"): 0.0})
        hits.append(any(v > threshold for v in out.samples[addr("x")]))
    return hits


def mode_escape(seed: int = 0, num_worlds: int = 10000, epochs: int = 20, components: int = 4,
                samples: int = 1000, burn_in: int = 100, **_) -> dict:
    zoo = M.gmm2d()
    cfg = C.TrainingConfig(num_worlds=num_worlds, epochs=epochs, components=components,
                           seed=substream(seed, "compile"))
    store, secs = compile_model(zoo, cfg)
    chain_cfg = I.ChainConfig(samples, burn_in, substream(seed, "infer"))
    stage = run_inference(zoo, I.LicProposer(store), chain_cfg, 1, init={addr("x"): 0.0})
    xs = np.array([v for v in stage.outputs[0].samples.get(addr("x"), [])], dtype=np.float64)
    right = float(np.mean(xs > 5.0)) if xs.size else math.nan
    oracle = zoo.oracle(0.25)[1]
    hits = random_walk_escapes(seed=substream(seed, "random-walk"))
    report = {
        "right_mode_mass": right,
        "oracle_right_mode_mass": oracle,
        "visited_left": bool(np.any(xs < 5.0)),
        "visited_right": bool(np.any(xs > 5.0)),
        "random_walk_escapes": int(sum(hits)),
        "random_walk_replicates": len(hits),
        "training": training_report(store, secs),
        "metrics": {"lic": stage.metrics},
    }
    report["verdict"] = _verdict({
        "visits_both_modes": report["visited_left"] and report["visited_right"],
        "right_mode_mass_within_0.1": abs(right - oracle) <= 0.1,
        "random_walk_stuck": report["random_walk_escapes"] == 0,
    })
    return {"report": report, "stages": {"lic": stage}, "stores": {"lic": store}}


NON_NUISANCE = ("noisy_sq_length", "x", "y")


def nuisance(seed: int = 0, n=(0, 10, 100), num_worlds: int = 10000, epochs: int = 30, lr: float = 3e-3,
             chains: int = 10, samples: int = 100, burn_in: int = 100, **_) -> dict:
    sizes = [int(v) for v in (n if isinstance(n, (list, tuple)) else [n])]
    compile_seed = substream(seed, "compile")
    infer_seed = substream(seed, "infer")
    # reference parameter count from the nuisance-free architecture
    base = M.nuisance_model(0)
    base_specs = C.family_specs(base.model, C.generate_dataset(base.model, 1, compile_seed))
    base_count = C.ArtifactStore(base_specs, C.nn.init_params(
        base_specs, np.random.SeedSequence(0), C.TrainingConfig().embed_dim, C.TrainingConfig().hidden_dim,
        C.TrainingConfig().layers, 10), {}).param_count(NON_NUISANCE)
    per_n, stages, stores = {}, {}, {}
    for k in sizes:
        zoo = M.nuisance_model(k)
        cfg = C.TrainingConfig(num_worlds=num_worlds, epochs=epochs, components=10, seed=compile_seed, lr=lr)
        store, secs = compile_model(zoo, cfg)
        stage = run_inference(zoo, I.LicProposer(store), I.ChainConfig(samples, burn_in, infer_seed), chains)
        per_n[str(k)] = {
            "param_count_nonnuisance_families": store.param_count(NON_NUISANCE),
            "param_count": store.param_count(),
            "ess_x": stage.metrics["ess"].get("x"),
            "rhat_x": stage.metrics["rhat"].get("x"),
            "training": training_report(store, secs),
        }
        stages[f"n{k}"] = stage
        stores[f"n{k}"] = store
    counts = [v["param_count_nonnuisance_families"] for v in per_n.values()]
    report = {
        "per_n": per_n,
        "param_count_nonnuisance_reference": base_count,
        "param_count_delta_nonnuisance_families": max(abs(c - base_count) for c in counts),
    }
    checks = {"param_count_invariant": report["param_count_delta_nonnuisance_families"] == 0}
    if "0" in per_n and "100" in per_n:
        e0, e100 = per_n["0"]["ess_x"], per_n["100"]["ess_x"]
        ratio = max(e0, e100) / min(e0, e100) if e0 and e100 else math.inf
        report["ess_ratio_0_vs_100"] = ratio
        checks["ess_ratio<2"] = ratio < 2.0
    report["metrics"] = {name: s.metrics for name, s in stages.items()}
    report["verdict"] = _verdict(checks)
    return {"report": report, "stages": stages, "stores": stores}


def _compare(zoo: M.ZooModel, seed: int, store, baseline_name: str, baseline, chains: int, samples: int,
             burn_in: int, thinning: int = 1) -> dict:
    chain_cfg = I.ChainConfig(samples, burn_in, substream(seed, "infer"), thinning=thinning)
    lic = run_inference(zoo, I.LicProposer(store), chain_cfg, chains)
    base = run_inference(zoo, baseline, chain_cfg, chains)
    return {"lic": lic, baseline_name: base}


def blr(seed: int = 0, n_rows: int = 500, n_features: int = 5, num_worlds: int = 1000, epochs: int = 300,
        batch_size: int = 8, lr: float = 3e-3, lr_final: float | None = 3e-5, embed_dim: int = 8,
        hidden_dim: int = 16, chains: int = 10, samples: int = 100, burn_in: int = 200, thinning: int = 5,
        prior_scale: str = "variance", **_) -> dict:
    zoo = M.blr(n_rows=n_rows, n_features=n_features, seed=substream(seed, "data"), prior_scale=prior_scale)
    cfg = C.TrainingConfig(num_worlds=num_worlds, epochs=epochs, batch_size=batch_size, lr=lr, lr_final=lr_final,
                           embed_dim=embed_dim, hidden_dim=hidden_dim, seed=substream(seed, "compile"))
    store, secs = compile_model(zoo, cfg)
    stages = _compare(zoo, seed, store, "rwmh", I.AdaptiveRwmh(), chains, samples, burn_in, thinning)
    lic, rw = stages["lic"].metrics, stages["rwmh"].metrics
    n_test = len(zoo.heldout)
    report = {
        "n_test": n_test,
        "training": training_report(store, secs),
        "metrics": {k: s.metrics for k, s in stages.items()},
    }
    report["verdict"] = _verdict({
        "lic_min_ess>=rwmh_min_ess": (lic["min_ess"] or 0) >= (rw["min_ess"] or 0),
        "lic_pll>=rwmh_pll-0.02n": lic["pll"] >= rw["pll"] - 0.02 * n_test,
        "lic_max_rhat<=1.1": lic["max_rhat"] is not None and lic["max_rhat"] <= 1.1,
    })
    return {"report": report, "stages": stages, "stores": {"lic": store}}


def nschools(seed: int = 0, n_schools: int = 50, num_worlds: int = 10000, epochs: int = 30, chains: int = 10,
             samples: int = 100, burn_in: int = 200, thinning: int = 5, **_) -> dict:
    zoo = M.nschools(n_schools=n_schools, seed=substream(seed, "data"))
    cfg = C.TrainingConfig(num_worlds=num_worlds, epochs=epochs, seed=substream(seed, "compile"))
    store, secs = compile_model(zoo, cfg)
    stages = _compare(zoo, seed, store, "prior", I.PriorProposer(), chains, samples, burn_in, thinning)
    lic, pr = stages["lic"].metrics, stages["prior"].metrics
    report = {
        "training": training_report(store, secs),
        "metrics": {k: s.metrics for k, s in stages.items()},
    }
    report["verdict"] = _verdict({
        "lic_max_rhat<=1.1": lic["max_rhat"] is not None and lic["max_rhat"] <= 1.1,
        "lic_min_ess>=prior_min_ess": (lic["min_ess"] or 0) >= (pr["min_ess"] or 0),
    })
    return {"report": report, "stages": stages, "stores": {"lic": store}}


EXPERIMENTS = {
    "mode-escape": mode_escape,
    "conj-normal": conj_normal,
    "nuisance": nuisance,
    "blr": blr,
    "nschools": nschools,
}


def run(name: str, out_dir: Path | None = None, **overrides) -> dict:
    """Run one experiment; writes report.json, timings.json and per-stage samples/metrics when ``out_dir`` is set."""
    try:
        fn = EXPERIMENTS[name]
    except KeyError:
        raise ValueError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}") from None
    t0 = time.perf_counter()
    result = fn(**overrides)
    wall = time.perf_counter() - t0
    report = result["report"]
    report["experiment"] = name
    timings = {"total_seconds": wall, "stages": {k: s.timings for k, s in result["stages"].items()}}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for stage_name, stage in result["stages"].items():
            sub = out_dir / stage_name
            sub.mkdir(exist_ok=True)
            I.write_samples_csv(stage.outputs, sub / "samples.csv")
            I.dump_json(stage.metrics, sub / "metrics.json")
        for store_name, store in result.get("stores", {}).items():
            C.save(store, out_dir / f"artifact_{store_name}.json")
        I.dump_json(report, out_dir / "report.json")
        I.dump_json(timings, out_dir / "timings.json")
    result["timings"] = timings
    return result
