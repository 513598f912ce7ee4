"""Command-line driver: ``pii {simulate,embed,fit,test,identify,diagnose}``.

Each run reads one YAML config, rejects unknown keys, and writes its outputs
plus ``resolved_config.json`` (the config with every default filled in) to
the output directory. Exit codes: 0 ok, 2 config or validation error,
3 numerical or runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from pathlib import Path

import numpy as np
import yaml

from pii.data_model import (
    Dataset, FitResult, NumericalError, ValidationError, dumps_json, load_dataset, read_matrix_csv,
)
from pii.diagnostics import backward_error_bound, bias_bound_linear, bias_trend, fwl_check
from pii.dr_estimator import DrOptions, fit
from pii.embedding import EmbedConfig, embed, load_embedding, save_embedding
from pii.identification import PmfTables, identify
from pii.multiple_testing import test_outcomes
from pii.nuisance import LearnerSpec
from pii.simulation import SimConfig, gen_linear_gaussian, run_experiment

_NESTED = {"embed": EmbedConfig, "learners": DrOptions, "x_learner": LearnerSpec,
           "y_learner": LearnerSpec, "outer_learner": LearnerSpec, "options": DrOptions}


def build(cls, raw, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValidationError(f"{where}: expected a mapping")
    # fold plans are runtime objects, not config
    names = {f.name for f in dataclasses.fields(cls) if f.init} - {"crossfit"}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(map(repr, sorted(unknown)))}")
    kwargs = {}
    for k, v in raw.items():
        if k in _NESTED and isinstance(v, dict):
            v = build(_NESTED[k], v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def to_plain(obj):
    """Dataclass tree to JSON-ready plain values."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.name != "crossfit"}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _check_keys(raw: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(map(repr, unknown))}")


def _section(raw: dict, key: str) -> dict:
    v = raw.get(key)
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ValidationError(f"{key}: expected a mapping")
    return v


def _path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _seeded(obj, seed):
    return obj if seed is None else dataclasses.replace(obj, seed=int(seed))


def _data(raw: dict, base: Path):
    _check_keys(raw, {"x", "y", "controls"}, "data")
    if "x" not in raw or "y" not in raw:
        raise ValidationError("data: 'x' and 'y' paths are required")
    ctrl = raw.get("controls")
    return load_dataset(_path(base, raw["x"]), _path(base, raw["y"]),
                        None if ctrl is None else _path(base, ctrl))


# ----------------------------------------------------------------- commands

def cmd_simulate(raw, base, out, threads, seed):
    _check_keys(raw, {"simulation", "seed"}, "config")
    simraw = dict(_section(raw, "simulation"))
    if isinstance(simraw.get("learners"), dict) and "link" not in simraw["learners"]:
        simraw["learners"] = {**simraw["learners"], "link": simraw.get("link", "logit")}
    sim = build(SimConfig, simraw, "simulation")
    s = seed if seed is not None else raw.get("seed")
    sim = _seeded(sim, s)
    report = run_experiment(sim, threads=threads)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    return {"simulation": to_plain(sim)}


def cmd_embed(raw, base, out, threads, seed):
    _check_keys(raw, {"data", "embed", "source", "seed"}, "config")
    ds = _data(_section(raw, "data"), base)
    cfg = build(EmbedConfig, _section(raw, "embed"), "embed")
    cfg = _seeded(cfg, seed if seed is not None else raw.get("seed"))
    source = raw.get("source", "controls")
    res = embed(ds, cfg, source)
    save_embedding(res, out / "embedding.csv")
    return {"data": raw.get("data"), "embed": to_plain(cfg), "source": source}


def cmd_fit(raw, base, out, threads, seed):
    _check_keys(raw, {"data", "embedding", "embed", "source", "options", "seed"}, "config")
    ds = _data(_section(raw, "data"), base)
    s = seed if seed is not None else raw.get("seed")
    resolved = {"data": raw.get("data")}
    if "embedding" in raw:
        emb = load_embedding(_path(base, raw["embedding"]))
        resolved["embedding"] = raw["embedding"]
    else:
        cfg = _seeded(build(EmbedConfig, _section(raw, "embed"), "embed"), s)
        source = raw.get("source", "controls")
        emb = embed(ds, cfg, source)
        resolved.update(embed=to_plain(cfg), source=source)
    opts = _seeded(build(DrOptions, _section(raw, "options"), "options"), s)
    res = fit(ds, emb, opts)
    (out / "fit.json").write_text(dumps_json(res.to_json_dict()))
    resolved["options"] = to_plain(opts)
    return resolved


def cmd_test(raw, base, out, threads, seed):
    _check_keys(raw, {"fit", "alpha", "q_fdr", "truth", "coordinate", "seed"}, "config")
    if "fit" not in raw:
        raise ValidationError("config: 'fit' path is required")
    res = FitResult.from_json_dict(json.loads(_path(base, raw["fit"]).read_text()))
    truth = None
    if raw.get("truth") is not None:
        tv, _ = read_matrix_csv(_path(base, raw["truth"]))
        truth = tv[:, 0].astype(bool)
    alpha = float(raw.get("alpha", 0.05))
    q = float(raw.get("q_fdr", 0.05))
    coord = int(raw.get("coordinate", 0))
    rep = test_outcomes(res, alpha, q, truth, coord)
    (out / "test.json").write_text(dumps_json(rep.to_json_dict()))
    rep.write_csv(out / "test.csv", res.outcome_names)
    return {"fit": raw["fit"], "alpha": alpha, "q_fdr": q, "truth": raw.get("truth"),
            "coordinate": coord}


def cmd_identify(raw, base, out, threads, seed):
    _check_keys(raw, {"tables", "strict", "seed"}, "config")
    if "tables" not in raw:
        raise ValidationError("config: 'tables' path is required")
    tables = PmfTables.load(_path(base, raw["tables"]))
    strict = bool(raw.get("strict", False))
    res = identify(tables, strict=strict)
    (out / "identification.json").write_text(dumps_json(res.to_json_dict(tables)))
    return {"tables": raw["tables"], "strict": strict}


_INSTANCE_KEYS = {"seed", "n", "d", "r", "p", "noise", "coupling"}


def _instance(raw: dict, seed):
    _check_keys(raw, _INSTANCE_KEYS, "instance")
    s = seed if seed is not None else raw.get("seed", 0)
    args = {"n": 200, "d": 1, "r": 3, "p": 20, "noise": 1.0, "coupling": 1.0} | {
        k: v for k, v in raw.items() if k != "seed"}
    x, u, y, _ = gen_linear_gaussian(int(s), int(args["n"]), int(args["d"]), int(args["r"]),
                                     int(args["p"]), noise=float(args["noise"]),
                                     coupling=float(args["coupling"]))
    return Dataset(x, y, ()), u, {"seed": int(s)} | args


def cmd_diagnose(raw, base, out, threads, seed):
    _check_keys(raw, {"kind", "instance", "u_noise", "system", "levels", "seeds", "seed"},
                "config")
    kind = raw.get("kind")
    if kind not in ("fwl", "bias_bound", "backward_error", "bias_trend"):
        raise ValidationError("config: 'kind' must be fwl, bias_bound, backward_error or bias_trend")
    resolved = {"kind": kind}
    s = seed if seed is not None else raw.get("seed")
    if kind in ("fwl", "bias_bound"):
        ds, u, inst = _instance(_section(raw, "instance"), s)
        resolved["instance"] = inst
        if kind == "fwl":
            report = fwl_check(ds, u).to_json_dict()
        else:
            noise = float(raw.get("u_noise", 0.01))
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([inst["seed"], 0xD1])))
            u_est = u + noise * rng.standard_normal(u.shape)
            report = bias_bound_linear(ds, u, u_est).to_json_dict()
            resolved["u_noise"] = noise
    elif kind == "backward_error":
        sysraw = _section(raw, "system")
        _check_keys(sysraw, {"a", "delta_a", "b", "delta_b"}, "system")
        try:
            rep = backward_error_bound(sysraw["a"], sysraw["delta_a"], sysraw["b"], sysraw["delta_b"])
        except KeyError as exc:
            raise ValidationError(f"system: missing {exc.args[0]!r}") from None
        report = dataclasses.asdict(rep)
        if report["actual_abs"] != report["actual_abs"]:
            report["actual_abs"] = None
        resolved["system"] = sysraw
    else:
        levels = [float(v) for v in raw.get("levels", [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5])]
        seeds = [int(v) for v in raw.get("seeds", list(range(20)))]
        if s is not None:
            seeds = [int(s) * 100003 + k for k in seeds]
        report = bias_trend(seeds, levels).to_json_dict()
        resolved.update(levels=levels, seeds=seeds)
    (out / "diagnostics.json").write_text(dumps_json(report))
    return resolved


COMMANDS = {"simulate": cmd_simulate, "embed": cmd_embed, "fit": cmd_fit, "test": cmd_test,
            "identify": cmd_identify, "diagnose": cmd_diagnose}


def main(argv: typing.Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pii", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="output directory (default: config's folder)")
    parser.add_argument("--threads", type=int, default=1, help="worker processes; 0 = all cores")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the config's seed")
    args = parser.parse_args(argv)
    try:
        cfg_path = Path(args.config)
        try:
            raw = yaml.safe_load(cfg_path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError("config must be a mapping")
        base = cfg_path.resolve().parent
        out = Path(args.out) if args.out else base
        out.mkdir(parents=True, exist_ok=True)
        threads = args.threads
        if threads == 0:
            threads = os.cpu_count() or 1
        resolved = COMMANDS[args.command](raw, base, out, threads, args.seed_override)
        resolved = {"command": args.command, **resolved}
        if args.seed_override is not None:
            resolved["seed_override"] = args.seed_override
        (out / "resolved_config.json").write_text(dumps_json(to_plain(resolved)))
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"pii {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError, RuntimeError, ArithmeticError) as exc:
        print(f"pii {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
