"""Command line: compile, infer, diagnose and experiment subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import compile as C
from . import diagnostics as D
from . import experiments as E
from . import infer as I
from . import models as M

log = logging.getLogger("blanketmh")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CRITERION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunSpec:
    """Everything a run depends on; echoed into manifest.json."""

    command: str
    model: str | None = None
    model_params: dict = field(default_factory=dict)
    proposer: str = "lic"
    training: dict = field(default_factory=dict)
    chains: int = 10
    samples: int = 100
    burn_in: int = 1000
    thinning: int = 1
    seed: int = 0
    out: str = "out"
    artifact: str | None = None
    experiment: str | None = None
    overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.command in ("compile", "infer") and self.model not in M.BUILDERS:
            raise UsageError(f"unknown or missing model {self.model!r}; choose from {sorted(M.BUILDERS)}")
        if self.proposer not in ("lic", "prior", "rwmh"):
            raise UsageError(f"unknown proposer {self.proposer!r}")
        if self.command == "infer" and self.proposer == "lic" and not self.artifact:
            raise UsageError("the lic proposer needs --artifact")
        if self.chains < 1 or self.samples < 0 or self.burn_in < 0 or self.seed < 0 or self.thinning < 1:
            raise UsageError("chains and thinning must be >= 1; samples, burn-in and seed must be >= 0")
        if self.command == "experiment" and self.experiment not in E.EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}; choose from {sorted(E.EXPERIMENTS)}")
        try:
            C.TrainingConfig.from_dict(self.training)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad training config: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--model", help="zoo model name")
    shared.add_argument("--proposer", choices=["lic", "prior", "rwmh"])
    shared.add_argument("--seed", type=int)
    shared.add_argument("--chains", type=int)
    shared.add_argument("--samples", type=int)
    shared.add_argument("--burn-in", type=int, dest="burn_in")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--artifact", help="trained artifact file")
    shared.add_argument("--config", help="JSON config file; flags win over its values")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="blanketmh", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("compile", parents=[shared], help="train proposal networks for a model")
    sub.add_parser("infer", parents=[shared], help="run MCMC chains and write samples and metrics")
    d = sub.add_parser("diagnose", parents=[shared], help="recompute metrics from a samples CSV")
    d.add_argument("--samples-csv", dest="samples_csv", required=True)
    e = sub.add_parser("experiment", parents=[shared], help="run a benchmark end to end")
    e.add_argument("name", nargs="?", help=f"one of {sorted(E.EXPERIMENTS)}; defaults to the config's experiment")
    e.add_argument("--n", type=int, action="append", help="nuisance count (repeatable)")
    return p


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    # a previous run's manifest.json works as a config: its spec is nested
    if isinstance(cfg.get("spec"), dict):
        cfg = cfg["spec"]
    return cfg


def make_spec(args) -> RunSpec:
    cfg = _load_config(args.config)
    spec = RunSpec(command=args.command)
    for key in ("model", "model_params", "proposer", "training", "chains", "samples", "burn_in", "thinning", "seed",
                "out", "artifact", "overrides", "experiment"):
        if key in cfg:
            setattr(spec, key, cfg[key])
    for key in ("model", "proposer", "chains", "samples", "burn_in", "seed", "out", "artifact"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(spec, key, v)
    if args.command == "experiment":
        if args.name is not None:
            spec.experiment = args.name
        if args.n:
            spec.overrides["n"] = args.n
    spec.validate()
    return spec


def manifest(spec: RunSpec, **extra) -> dict:
    return {
        "spec": asdict(spec),
        "seeds": {name: E.substream(spec.seed, name) for name in ("compile", "infer", "data")},
        "versions": {
            "blanketmh": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        **extra,
    }


def _zoo(spec: RunSpec) -> M.ZooModel:
    params = dict(spec.model_params)
    if spec.model in ("blr", "nschools"):
        params.setdefault("seed", E.substream(spec.seed, "data"))
    try:
        return M.build(spec.model, **params)
    except TypeError as exc:
        raise UsageError(f"bad model parameters: {exc}") from exc


def cmd_compile(spec: RunSpec) -> int:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    zoo = _zoo(spec)
    training = dict(spec.training)
    training.setdefault("seed", E.substream(spec.seed, "compile"))
    cfg = C.TrainingConfig.from_dict(training)
    store, seconds = E.compile_model(zoo, cfg)
    artifact = Path(spec.artifact) if spec.artifact else out / "artifact.json"
    C.save(store, artifact)
    I.dump_json(E.training_report(store, seconds), out / "training_report.json")
    I.dump_json(manifest(spec, artifact=str(artifact)), out / "manifest.json")
    log.info("compiled %s: %d parameters in %.1fs", spec.model, store.param_count(), seconds)
    return EXIT_OK


def cmd_infer(spec: RunSpec) -> int:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    zoo = _zoo(spec)
    store = None
    if spec.proposer == "lic":
        try:
            store = C.load(spec.artifact)
        except OSError as exc:
            raise UsageError(f"cannot read artifact: {exc}") from exc
    prop = I.make_proposer(spec.proposer, store)
    chain_cfg = I.ChainConfig(spec.samples, spec.burn_in, E.substream(spec.seed, "infer"), spec.thinning)
    stage = E.run_inference(zoo, prop, chain_cfg, spec.chains)
    I.write_samples_csv(stage.outputs, out / "samples.csv")
    I.dump_json(stage.metrics, out / "metrics.json")
    I.dump_json(stage.timings, out / "timings.json")
    I.dump_json(manifest(spec), out / "manifest.json")
    if "errors" in stage.metrics:
        log.error("chain failures: %s", stage.metrics["errors"])
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_diagnose(spec: RunSpec, samples_csv: str) -> int:
    try:
        mats = I.read_samples_csv(samples_csv)
    except OSError as exc:
        raise UsageError(f"cannot read samples: {exc}") from exc
    n = min((m.shape[1] for m in mats.values()), default=0)
    metrics = D.summarize(mats) if n >= 4 else {"flags": ["insufficient draws"]}
    if spec.model and n >= 1:
        zoo = _zoo(spec)
        if zoo.heldout:
            chains, iters = next(iter(mats.values())).shape
            draws = [{a: float(m[c, i]) for a, m in mats.items() if not np.isnan(m[c, i])}
                     for c in range(chains) for i in range(iters)]
            metrics["pll"] = D.model_pll(zoo.model, draws, zoo.heldout)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    I.dump_json(metrics, out / "metrics.json")
    return EXIT_OK


def cmd_experiment(spec: RunSpec) -> int:
    overrides = dict(spec.overrides)
    overrides.setdefault("seed", spec.seed)
    result = E.run(spec.experiment, Path(spec.out), **overrides)
    I.dump_json(manifest(spec), Path(spec.out) / "manifest.json")
    verdict = result["report"]["verdict"]
    for name, ok in verdict["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {spec.experiment}: {name}")
    return EXIT_OK if verdict["passed"] else EXIT_CRITERION


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    t0 = time.perf_counter()
    try:
        spec = make_spec(args)
        if spec.command == "compile":
            code = cmd_compile(spec)
        elif spec.command == "infer":
            code = cmd_infer(spec)
        elif spec.command == "diagnose":
            code = cmd_diagnose(spec, args.samples_csv)
        else:
            code = cmd_experiment(spec)
    except UsageError as exc:
        print(f"blanketmh: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any stage failure
        log.exception("run failed: %s", exc)
        return EXIT_RUNTIME
    log.info("done in %.1fs", time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
