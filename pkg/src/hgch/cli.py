"""Command-line entry point: ``hgch {prepare,train,eval,export-embeddings,grad-check}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Run configuration files are INI with optional ``[model]``, ``[train]``,
``[eval]`` and ``[run]`` sections whose keys are the field names of
:class:`~hgch.model.ModelConfig`, :class:`~hgch.training.TrainConfig`,
``ks`` and ``dataset`` / ``out`` / ``threads``.  Command-line flags
override the file, which overrides the defaults.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .graph import (
    EmptyGraphError,
    ParseError,
    SchemaError,
    dataset_fingerprint,
    ingest,
    k_core,
    load_manifest,
    load_processed,
    save_processed,
    split,
)
from .metrics import head_tail_partition
from .model import (
    GraphContext,
    ModelConfig,
    forward_values,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import TrainConfig, evaluate_split, train

logger = logging.getLogger("hgch")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def code_version_hash(version: str = __version__) -> str:
    """Git blob hash of the version string."""
    data = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# -- run configuration ----------------------------------------------------------


def _parse_mapping(text: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, _, value = part.partition(":")
        if not _:
            raise ConfigError(f"expected name:value, got {part!r}")
        out[key.strip()] = float(value)
    return out


def _convert(value, default, name: str):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, dict):
            return _parse_mapping(value)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value.strip()


def _fields(cls) -> dict:
    return {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory()) for f in dataclasses.fields(cls)}


MODEL_KEYS = _fields(ModelConfig)
TRAIN_KEYS = _fields(TrainConfig)
RUN_KEYS = {"dataset": "", "out": "", "threads": 0, "ks": "10,20"}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    dataset: str = ""
    out: str = ""
    threads: int = 0
    ks: tuple = (10, 20)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        fmt = lambda v: ",".join(f"{k}:{x}" for k, x in v.items()) if isinstance(v, dict) else str(v)
        cp["model"] = {k: fmt(v) for k, v in dataclasses.asdict(self.model).items()}
        cp["train"] = {k: fmt(v) for k, v in dataclasses.asdict(self.train).items()}
        cp["run"] = {"dataset": self.dataset, "out": self.out, "threads": str(self.threads)}
        cp["eval"] = {"ks": ",".join(map(str, self.ks))}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _parse_ks(text) -> tuple:
    try:
        ks = tuple(int(k) for k in str(text).split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"bad K list: {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError(f"K values must be positive integers: {text!r}")
    return ks


def resolve_config(path=None, overrides: dict | None = None, base: dict | None = None) -> RunConfig:
    """Merge defaults, an optional INI file and flag overrides (in that order).

    ``base`` replaces individual built-in defaults before the file is read.
    """
    values: dict = dict(base or {})
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.read(path, encoding="utf-8")
        known = {**MODEL_KEYS, **TRAIN_KEYS, **RUN_KEYS}
        for section in cp.sections():
            if section not in ("model", "train", "eval", "run"):
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in cp[section].items():
                if key not in known:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        model = ModelConfig(**{k: _convert(values[k], d, k) for k, d in MODEL_KEYS.items() if k in values})
        tr = TrainConfig(**{k: _convert(values[k], d, k) for k, d in TRAIN_KEYS.items() if k in values})
        model.validate()
        tr.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(
        model,
        tr,
        dataset=str(values.get("dataset", "")),
        out=str(values.get("out", "")),
        threads=_convert(values.get("threads", 0), 0, "threads"),
        ks=_parse_ks(values.get("ks", "10,20")),
    )


# -- commands -----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    manifest = load_manifest(args.manifest)
    hcg = ingest(
        manifest.interactions,
        manifest.side_specs,
        threshold=manifest.threshold,
        node_types=manifest.node_types,
        locations_path=manifest.locations,
        geo_radius_km=manifest.geo_radius_km,
    )
    hcg = k_core(hcg, manifest.user_core, manifest.item_core)
    data = split(hcg, manifest.seed)
    fp = save_processed(data, args.out)
    stats = json.loads((Path(args.out) / "stats.json").read_text())
    print(json.dumps({"out": str(args.out), "fingerprint": fp, **stats["split"]}))
    return EXIT_OK


def _threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n if n and n > 0 else None)


def _train_overrides(args) -> dict:
    keys = list(MODEL_KEYS) + list(TRAIN_KEYS) + ["dataset", "out", "threads", "ks"]
    return {k: getattr(args, k, None) for k in keys}


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _train_overrides(args))
    if not cfg.dataset:
        raise ConfigError("no dataset directory given (--dataset or [run] dataset)")
    if not cfg.out:
        raise ConfigError("no run directory given (--out or [run] out)")
    data = load_processed(cfg.dataset)
    fp = dataset_fingerprint(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    with _threads(cfg.threads), open(out / "log.jsonl", "w", encoding="utf-8") as log:
        result = train(data, cfg.model, cfg.train, log=log)
    save_checkpoint(out / "checkpoint.npz", result.params, cfg.model, fp, {"best_epoch": result.best_epoch})
    run = {
        "dataset": str(cfg.dataset),
        "fingerprint": fp,
        "code_version": __version__,
        "code_hash": code_version_hash(),
        "best_epoch": result.best_epoch,
        f"best_val_ndcg@{cfg.train.eval_k}": result.best_score,
        "epochs_run": len(result.history),
        "n_params": parameter_count(result.params),
    }
    (out / "run.json").write_text(json.dumps(run, indent=2), encoding="utf-8")
    print(json.dumps(run))
    return EXIT_OK


def _load_for_eval(checkpoint, dataset):
    params, config, meta = load_checkpoint(checkpoint)
    fp = dataset_fingerprint(dataset)
    if meta.get("fingerprint") != fp:
        raise FingerprintError(
            f"checkpoint {checkpoint} was trained on dataset {meta.get('fingerprint')!r}, "
            f"but {dataset} has fingerprint {fp!r}"
        )
    data = load_processed(dataset)
    ctx = GraphContext(data.train_graph(), config)
    return params, config, data, ctx


class FingerprintError(RuntimeError):
    pass


def cmd_eval(args) -> int:
    params, config, data, ctx = _load_for_eval(args.checkpoint, args.dataset)
    ks = _parse_ks(args.ks)
    with _threads(args.threads):
        final = forward_values(params, ctx, config)
        head, _ = head_tail_partition(np.bincount(data.train[:, 1], minlength=data.n_items))
        report = evaluate_split(final, data, args.split, ks, config.score_curvature, head)
    prefix = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"report_{args.split}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.json").write_text(report.to_json(), encoding="utf-8")
    Path(f"{prefix}.csv").write_text(report.to_csv(), encoding="utf-8")
    if args.per_user:
        arrays = {f"{m}@{k}/{s}": v for (m, k, s), v in report.per_user.items()}
        np.savez(f"{prefix}_per_user.npz", **arrays)
    print(report.to_json())
    return EXIT_OK


def quartile_labels(counts) -> np.ndarray:
    """Popularity quartile per entry: ranks split into four near-equal groups."""
    counts = np.asarray(counts)
    n = len(counts)
    order = np.lexsort((np.arange(n), counts))
    q = np.empty(n, dtype=np.int64)
    q[order] = (np.arange(n) * 4) // max(n, 1)
    names = np.array(["[0,25)", "[25,50)", "[50,75)", "[75,100]"])
    return names[q]


def cmd_export_embeddings(args) -> int:
    params, config, data, ctx = _load_for_eval(args.checkpoint, args.dataset)
    emb = params.embeddings if args.stage == "initial" else forward_values(params, ctx, config)
    hcg = ctx.hcg
    inter = hcg.degree("interaction")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "type", "quartile"] + [f"x{j}" for j in range(emb.shape[1])])
        for t in hcg.type_names:
            off = hcg.offset(t)
            n = len(hcg.ids[t])
            labels = quartile_labels(inter[off:off + n])
            for i in range(n):
                w.writerow([hcg.ids[t][i], t, labels[i]] + [f"{x:.10g}" for x in emb[off + i]])
    print(f"wrote {hcg.n_nodes} rows to {out}")
    return EXIT_OK


# small, well-conditioned toy setting; file and flags still override it
GRAD_CHECK_BASE = {"dim": 4, "init_scale": 0.5, "margin": 0.5, "alpha": 0.5, "n_neg": 2}


def cmd_grad_check(args) -> int:
    from .diagnostics import toy_grad_check

    overrides = {k: getattr(args, k, None) for k in ("dim", "n_layers", "fusion", "aggregation", "init")}
    cfg = resolve_config(args.config, overrides, base=GRAD_CHECK_BASE)
    report = toy_grad_check(cfg.model, cfg.train, seed=args.seed, dtype=args.dtype, h=args.h, tol=args.tol)
    print(report)
    return EXIT_OK if report.passed else EXIT_RUNTIME


# -- argument parsing -----------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--dim", type=int)
    g.add_argument("--n-layers", dest="n_layers", type=int)
    g.add_argument("--curvature", type=float)
    g.add_argument("--score-curvature", dest="score_curvature", type=float)
    g.add_argument("--init-scale", dest="init_scale", type=float)
    g.add_argument("--power", type=float)
    g.add_argument("--fusion", choices=["none", "gate", "prior", "gate_prior"])
    g.add_argument("--aggregation", choices=["gyromidpoint", "tangent"])
    g.add_argument("--init", choices=["power_law", "uniform"])
    g.add_argument("--include-layer0", dest="include_layer0", choices=["true", "false"])
    g = p.add_argument_group("training")
    g.add_argument("--margin", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--n-neg", dest="n_neg", type=int)
    g.add_argument("--sampling", choices=["hyperbolic", "uniform"])
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-k", dest="eval_k", type=int)
    g = p.add_argument_group("run")
    g.add_argument("--dataset")
    g.add_argument("--out")
    g.add_argument("--threads", type=int)
    g.add_argument("--ks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, k-core, split and write a processed dataset")
    p.add_argument("manifest")
    p.add_argument("out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a processed dataset")
    p.add_argument("--config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["test", "valid"], default="test")
    p.add_argument("--ks", default="10,20")
    p.add_argument("--out", help="output prefix for .json / .csv")
    p.add_argument("--per-user", action="store_true", help="also dump per-user metric vectors")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="write node embeddings as CSV")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stage", choices=["final", "initial"], default="final")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("grad-check", help="finite-difference check of the model gradients")
    p.add_argument("--config")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--fusion", choices=["none", "gate", "prior", "gate_prior"])
    p.add_argument("--aggregation", choices=["gyromidpoint", "tangent"])
    p.add_argument("--init", choices=["power_law", "uniform"])
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (FileNotFoundError, ConfigError, SchemaError, ParseError) as exc:
        print(f"hgch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EmptyGraphError, FingerprintError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"hgch: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
