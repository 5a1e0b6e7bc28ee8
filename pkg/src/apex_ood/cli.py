"""Command-line interface.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
Configuration precedence: defaults < ``--config`` JSON < flags < ``APEX_SEED``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .embeddings import EmbeddingSet, load_embeddings, normalize_rows, save_embeddings
from .errors import ApexError, ConfigError, LoadError, NumericalError
from .gmm import STRATEGIES, KSelectionReport, assign_k_all_classes
from .losses import TrainResult, save_trace, toy_train
from .manifold import load_manifold, save_manifold
from .metrics import ORIENTATIONS, evaluate
from .paos import load_stats, save_stats, score_batch
from .pipeline import alpha_sweep, class_conf, fit_stats, run_pipeline
from .quality import DEFAULT_COLLISION_THRESHOLD, collision_report
from .synth import BenchmarkSpec, generate, hetero2_spec, load_spec

log = logging.getLogger("apex_ood")

# flag dest -> RunConfig field
CONFIG_FLAGS = {
    "tau": "tau",
    "tau_p": "tau_p",
    "tau_q": "tau_q",
    "lam": "lambda_pc",
    "alpha": "alpha",
    "beta_p": "beta_p",
    "beta_q": "beta_q",
    "epsilon": "epsilon_ot",
    "seed": "seed",
    "cov_kind": "cov_kind",
    "epochs": "epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "init": "init_strategy",
    "sinkhorn_iters": "sinkhorn_iters",
    "restarts": "gmm_restarts",
    "shrinkage": "shrinkage",
    "conf_source": "conf_source",
}


class UsageError(ApexError):
    pass


# --------------------------------------------------------------------------
# argument plumbing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="JSON file mirroring any of these flags")
    g.add_argument("--seed", type=int)
    g.add_argument("--tau", type=float, help="posterior temperature (1/kappa)")
    g.add_argument("--tau-p", type=float, help="prototype contrast temperature")
    g.add_argument("--tau-q", type=float, help="quality temperature")
    g.add_argument("--lambda", dest="lam", type=float, help="weight of the prototype contrastive loss")
    g.add_argument("--alpha", type=float, help="calibration strength")
    g.add_argument("--beta-p", type=float, help="prototype EMA momentum")
    g.add_argument("--beta-q", type=float, help="quality EMA momentum (default: beta-p)")
    g.add_argument("--epsilon", type=float, help="Sinkhorn regularization")
    g.add_argument("--cov-kind", choices=("diagonal", "full"))
    g.add_argument("--k-max", type=int, help="candidate prototype counts are 1..k-max")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--init", choices=("kmeans++", "random-unit"))
    g.add_argument("--sinkhorn-iters", type=int)
    g.add_argument("--restarts", type=int, help="EM restarts per candidate")
    g.add_argument("--shrinkage", type=float)
    g.add_argument("--conf-source", choices=("ema", "instant"))


def _config_file(path) -> dict:
    """Config JSON keys may be flag spellings (``tau-p``, ``lambda``) or field names."""
    raw = _read_json(path, "config")
    if not isinstance(raw, dict):
        raise ConfigError("config JSON must be an object")
    out = {}
    for key, value in raw.items():
        dest = key.lstrip("-").replace("-", "_")
        dest = "lam" if dest == "lambda" else dest
        if dest == "k_max":
            out["k_candidates"] = list(range(1, int(value) + 1))
        else:
            out[CONFIG_FLAGS.get(dest, dest)] = value
    return out


def build_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        data.update(_config_file(args.config))
    for dest, name in CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            data[name] = v
    if getattr(args, "k_max", None) is not None:
        if args.k_max < 1:
            raise ConfigError("--k-max must be >= 1")
        data["k_candidates"] = list(range(1, args.k_max + 1))
    seed = _seed_override(args)
    if seed is not None:
        data["seed"] = seed
    return RunConfig.from_dict(data)


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed {what} JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _named(items) -> dict:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        out[name] = path
    return out


def write_scores(path, scores, argmin) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "score", "argmin_class"])
        for i, (s, c) in enumerate(zip(scores, argmin)):
            w.writerow([i, repr(float(s)), int(c)])
    return path


def read_scores(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"score file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or "score" not in header:
            raise LoadError(f"{path}: missing 'score' column")
        col = header.index("score")
        try:
            return np.array([float(row[col]) for row in reader if row])
        except (ValueError, IndexError):
            raise LoadError(f"{path}: unparseable score value") from None


def write_sweep(path, rows) -> Path:
    keys = ["alpha", "ood_set", "fpr@95", "auroc", "aupr", "n_id", "n_ood"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] for k in keys])
    return Path(path)


def _parse_sweep(text: str):
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError("--alpha-sweep expects START:STOP:STEP") from None
    if step <= 0 or hi < lo:
        raise ConfigError("--alpha-sweep needs STEP > 0 and STOP >= START")
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def _k_args(args):
    k_range = None
    if args.strategy == "random-uniform":
        k_range = (args.k_min, args.k if args.k is not None else args.k_range_max)
    return args.k, k_range


# --------------------------------------------------------------------------
# subcommands


def _seed_override(args):
    """Explicit seed from APEX_SEED or --seed, else None."""
    env = os.environ.get("APEX_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"APEX_SEED must be an integer, got {env!r}") from None
    return getattr(args, "seed", None)


def _benchmark_spec(args) -> BenchmarkSpec:
    seed = _seed_override(args)
    if args.preset:
        return hetero2_spec(seed=seed or 0)
    if not args.spec:
        raise UsageError("give a spec file or --preset hetero2")
    spec = load_spec(args.spec)
    if seed is not None:
        spec = hetero2_spec(seed=seed) if spec.name == "hetero2" else spec
        spec.seed = seed
    return spec


def cmd_synth(args) -> int:
    spec = _benchmark_spec(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = generate(spec)
    ext = ".csv" if args.format == "csv" else ".bin"
    save_embeddings(bench.id_train, out / f"train{ext}")
    save_embeddings(bench.id_test, out / f"test{ext}")
    for name, s in bench.ood_sets.items():
        save_embeddings(s, out / f"ood_{name}{ext}")
    _write_json(out / "truth.json", bench.truth)
    _write_json(out / "spec.json", spec.to_dict())
    print(f"wrote {2 + len(bench.ood_sets)} embedding files to {out}")
    return 0


def cmd_select_k(args) -> int:
    config = build_config(args)
    data = load_embeddings(args.embeddings)
    k, k_range = _k_args(args)
    report = assign_k_all_classes(data, config, args.strategy, config.seed, k=k, k_range=k_range)
    _write_json(args.out, report.to_dict())
    print(f"strategy={report.strategy} k_map={report.k_map} M={report.total_prototypes}")
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    data = load_embeddings(args.embeddings)
    data = data if data.normalized else normalize_rows(data)
    report = KSelectionReport.from_dict(_read_json(args.k_report, "k-report"))
    if len(report.k_map) != data.class_count:
        raise ConfigError(f"k-report covers {len(report.k_map)} classes, data has {data.class_count}")
    result = toy_train(data, report, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifold(result.manifold, out, config=config.to_dict(), seed=config.seed)
    trace_path = Path(args.trace) if args.trace else out.with_name(out.stem + ".trace.csv")
    save_trace(result.trace, trace_path)
    if args.save_embeddings:
        save_embeddings(result.embeddings, args.save_embeddings)
    if result.trace:
        first, last = result.trace[0], result.trace[-1]
        print(f"l_total {first.l_total:.6f} -> {last.l_total:.6f} over {len(result.trace)} epochs")
    else:
        print("0 epochs: checkpoint equals initialization")
    return 0


def cmd_quality(args) -> int:
    manifold = load_manifold(args.manifold)
    data = load_embeddings(args.embeddings)
    data = data if data.normalized else normalize_rows(data)
    report = collision_report(manifold, data, args.threshold)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    print(report.summary())
    return 0


def cmd_score(args) -> int:
    config = build_config(args)
    if args.stats:
        stats = load_stats(args.stats)
        if args.alpha is not None:
            stats = stats.with_alpha(config.alpha)
    else:
        if not (args.manifold and args.fit_embeddings):
            raise UsageError("score needs --stats, or --manifold with --fit-embeddings")
        manifold = load_manifold(args.manifold)
        train_h = load_embeddings(args.fit_embeddings)
        report = None
        if config.conf_source == "instant":
            train_n = train_h if train_h.normalized else normalize_rows(train_h)
            report = collision_report(manifold, train_n)
        conf = class_conf(TrainResult(manifold), report, config)
        stats = fit_stats(train_h, conf, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not args.stats:
        save_stats(stats, out / "stats.json", extra={"config": config.to_dict()})

    inputs = {}
    if args.id:
        inputs["id"] = args.id
    ood = _named(args.ood)
    inputs.update({f"ood_{k}": v for k, v in ood.items()})
    inputs.update({Path(p).stem: p for p in args.inputs or []})
    if not inputs:
        raise UsageError("nothing to score: give --id, --ood, or input files")
    loaded = {name: load_embeddings(path) for name, path in inputs.items()}
    for name, data in loaded.items():
        s, a = score_batch(data, stats)
        write_scores(out / f"scores_{name}.csv", s, a)
    if args.alpha_sweep:
        if "id" not in loaded or not ood:
            raise UsageError("--alpha-sweep needs --id and at least one --ood")
        from .pipeline import PipelineResult

        holder = PipelineResult(config, None, None, None, stats, None, None)
        rows = alpha_sweep(holder, loaded["id"], {k: loaded[f"ood_{k}"] for k in ood}, _parse_sweep(args.alpha_sweep))
        write_sweep(out / "alpha_sweep.csv", rows)
        for r in rows:
            print(f"alpha={r['alpha']:.2f} {r['ood_set']}: auroc={r['auroc']:.4f} fpr@95={r['fpr@95']:.4f}")
    print(f"scored {len(loaded)} set(s) into {out}")
    return 0


def cmd_eval(args) -> int:
    rep = evaluate(read_scores(args.id_scores), read_scores(args.ood_scores), args.orientation)
    text = rep.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_pipeline(args) -> int:
    config = build_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if args.preset or args.spec:
        spec = hetero2_spec(seed=config.seed) if args.preset else _benchmark_spec(args)
        bench = generate(spec)
        train, test, ood_sets = bench.id_train, bench.id_test, bench.ood_sets
        for name, data in [("train", train), ("test", test)] + [(f"ood_{k}", v) for k, v in ood_sets.items()]:
            files[name] = str(save_path(out / f"{name}.bin", data))
        files["truth"] = str(_write_json(out / "truth.json", bench.truth))
    elif args.train and args.test:
        train, test = load_embeddings(args.train), load_embeddings(args.test)
        ood_sets = {k: load_embeddings(v) for k, v in _named(args.ood).items()}
        files.update(train=args.train, test=args.test, **{f"ood_{k}": v for k, v in _named(args.ood).items()})
        if not ood_sets:
            raise UsageError("pipeline needs at least one --ood set")
    else:
        raise UsageError("pipeline needs --spec, --preset, or --train/--test/--ood")

    k, k_range = _k_args(args)
    score_h = load_embeddings(args.score_features) if args.score_features else None
    res = run_pipeline(train, test, ood_sets, config, args.strategy, k=k, k_range=k_range, score_features=score_h)

    files["k_report"] = str(_write_json(out / "k_report.json", res.k_report.to_dict()))
    files["manifold"] = str(save_manifold(res.train.manifold, out / "manifold.json", config.to_dict(), config.seed))
    files["loss_trace"] = str(out / "loss_trace.csv")
    save_trace(res.train.trace, out / "loss_trace.csv")
    if res.quality is not None:
        (out / "quality.json").write_text(res.quality.to_json())
        files["quality"] = str(out / "quality.json")
    files["stats"] = str(save_stats(res.stats, out / "stats.json", extra={"config": config.to_dict()}))
    files["scores_id"] = str(write_scores(out / "scores_id.csv", res.id_scores, res.id_argmin))
    for name in res.ood_scores:
        files[f"scores_ood_{name}"] = str(
            write_scores(out / f"scores_ood_{name}.csv", res.ood_scores[name], res.ood_argmin[name])
        )
    files["metrics"] = str(_write_json(out / "metrics.json", res.metrics_dict()))
    if args.alpha_sweep:
        rows = alpha_sweep(res, test, ood_sets, _parse_sweep(args.alpha_sweep))
        files["alpha_sweep"] = str(write_sweep(out / "alpha_sweep.csv", rows))
    root = out.resolve()
    manifest = {
        "tool_version": __version__,
        "seed": config.seed,
        "strategy": res.k_report.strategy,
        "strategy_args": {"k": k, "k_range": list(k_range) if k_range else None},
        "source": {"preset": args.preset, "spec": args.spec, "score_features": args.score_features},
        "k_map": res.k_report.k_map,
        "config": config.to_dict(),
        "files": {name: os.path.relpath(Path(p).resolve(), root) for name, p in files.items()},
    }
    _write_json(out / "manifest.json", manifest)
    for name, m in res.metrics_dict().items():
        print(f"{name}: auroc={m['auroc']:.4f} fpr@95={m['fpr@95']:.4f} aupr={m['aupr']:.4f}")
    if res.quality is not None:
        print(res.quality.summary())
    return 0


def save_path(path: Path, data: EmbeddingSet) -> Path:
    save_embeddings(data, path)
    return path


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("spec", nargs="?", help="benchmark spec JSON")
    p.add_argument("--preset", choices=("hetero2",))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("bin", "csv"), default="bin")
    p.set_defaults(func=cmd_synth)

    def strategy_flags(p):
        p.add_argument("--strategy", choices=STRATEGIES, default="bic")
        p.add_argument("--k", type=int, help="prototype count for --strategy fixed")
        p.add_argument("--k-min", type=int, default=1, help="lower bound for random-uniform")
        p.add_argument("--k-range-max", type=int, default=10, help="upper bound for random-uniform")

    p = sub.add_parser("select-k", help="assign per-class prototype counts")
    p.add_argument("embeddings")
    strategy_flags(p)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("train", help="toy-train a prototype manifold")
    p.add_argument("embeddings")
    p.add_argument("--k-report", required=True)
    p.add_argument("--out", required=True, help="manifold checkpoint (.json)")
    p.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--save-embeddings", help="write the trained embeddings here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quality", help="prototype quality and collision report")
    p.add_argument("embeddings")
    p.add_argument("--manifold", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_COLLISION_THRESHOLD)
    p.add_argument("--out", help="write the full report as JSON")
    p.set_defaults(func=cmd_quality)

    p = sub.add_parser("score", help="posterior-aware OOD scores")
    p.add_argument("inputs", nargs="*", help="extra embedding files to score")
    p.add_argument("--manifold")
    p.add_argument("--fit-embeddings", help="features used to fit class means and covariance")
    p.add_argument("--stats", help="previously saved stats checkpoint")
    p.add_argument("--id", help="ID test embeddings")
    p.add_argument("--ood", action="append", help="NAME=PATH of an OOD set (repeatable)")
    p.add_argument("--alpha-sweep", help="START:STOP:STEP; writes alpha_sweep.csv")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="FPR@95 / AUROC / AUPR from score CSVs")
    p.add_argument("--id-scores", required=True)
    p.add_argument("--ood-scores", required=True)
    p.add_argument("--orientation", choices=ORIENTATIONS, default="lower-is-id")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--spec", help="benchmark spec JSON")
    p.add_argument("--preset", choices=("hetero2",))
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--ood", action="append", help="NAME=PATH (repeatable)")
    p.add_argument("--score-features", help="separate training features for the Mahalanobis stats")
    p.add_argument("--alpha-sweep", help="START:STOP:STEP; writes alpha_sweep.csv")
    strategy_flags(p)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pipeline)
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
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ApexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
