"""Command-line entry point: ``ssdeformer {gen,train,eval,render,diag,bench,report}``."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .geometry import mesh_topology_check, template_cylinder, write_obj, write_ply
from .harness import (
    CD_SCALE,
    MetricsReport,
    TrainConfig,
    TrainingDiverged,
    benchmark,
    evaluate,
    field_similarity,
    grid_points,
    train,
)
from .model import DeformerModel
from .synthgen import PROTOCOLS, DatasetConfig, ExperimentSplit, generate_dataset, load_dataset, make_split, save_dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------- helpers


def sig4(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.4g}"


def _hash_bytes(chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def hash_directory(path: Path, exclude=("manifest.json",)) -> str:
    files = sorted(p for p in Path(path).rglob("*") if p.is_file() and p.name not in exclude)
    return _hash_bytes(c for p in files for c in (str(p.relative_to(path)).encode(), p.read_bytes()))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


@contextlib.contextmanager
def atomic_dir(out: Path):
    """Yield a temp directory that is renamed onto ``out`` only if the block succeeds."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UserError(f"output directory {out} exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        if out.exists():
            out.rmdir()
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_manifest(out: Path, argv: Sequence[str], config: dict, dataset_hash: Optional[str], started: float, outputs) -> None:
    cfg_text = json.dumps(config, sort_keys=True)
    manifest = {
        "command_line": list(argv),
        "config": config,
        "config_hash": hashlib.sha256(cfg_text.encode()).hexdigest(),
        "dataset_hash": dataset_hash,
        "revision": _revision(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "outputs": sorted(outputs),
    }
    path = out / "manifest.json"
    if path.is_file():
        # a dataset directory already has its own manifest; keep one file per directory
        existing = json.loads(path.read_text())
        existing["run"] = manifest
        manifest = existing
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file {p} not found")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UserError(f"config file {p}: {exc}") from exc


def resolve(args, file_cfg: dict, name: str, default):
    """Flag > config file > built-in default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return file_cfg.get(name, default)


def _default_out(kind: str) -> Path:
    return Path("runs") / kind / time.strftime("%Y%m%d-%H%M%S")


def _threads(args) -> Optional[int]:
    n = getattr(args, "threads", None)
    if n is None and os.environ.get("SSD_THREADS"):
        try:
            n = int(os.environ["SSD_THREADS"])
        except ValueError as exc:
            raise UserError(f"SSD_THREADS must be an integer, got {os.environ['SSD_THREADS']!r}") from exc
    if n is not None and n < 1:
        raise UserError("--threads must be >= 1")
    return n


# --------------------------------------------------------------------------- subcommands


def cmd_gen(args, argv) -> int:
    fc = load_config_file(args.config)
    try:
        cfg = _dataset_config(args, fc)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid dataset configuration: {exc}") from exc
    started = time.time()
    out = Path(args.out) if args.out else _default_out("data")
    ds = generate_dataset(cfg)
    with atomic_dir(out) as tmp:
        save_dataset(ds, tmp)
        write_manifest(tmp, argv, asdict(cfg), hash_directory(tmp), started, [p.name for p in tmp.iterdir()])
    print(f"wrote {len(ds.samples)} samples for {ds.n} objects to {out}")
    return EXIT_OK


def _dataset_config(args, fc: dict) -> DatasetConfig:
    defaults = DatasetConfig()
    return DatasetConfig(
        n_objects=resolve(args, fc, "objects", defaults.n_objects),
        n_deforms=resolve(args, fc, "deforms", defaults.n_deforms),
        seed=resolve(args, fc, "seed", defaults.seed),
        surface_samples=resolve(args, fc, "samples", defaults.surface_samples),
        queries=resolve(args, fc, "queries", defaults.queries),
        on_surface_fraction=fc.get("on_surface_fraction", defaults.on_surface_fraction),
        noise_sigma=fc.get("noise_sigma", defaults.noise_sigma),
    )


def _train_config(args, fc: dict) -> TrainConfig:
    base = TrainConfig()
    kw = {}
    for f in fields(TrainConfig):
        if f.name in ("template", "model"):
            kw[f.name] = fc.get(f.name, getattr(base, f.name))
        else:
            kw[f.name] = resolve(args, fc, f.name, getattr(base, f.name))
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid training configuration: {exc}") from exc


def _load_data(path) -> tuple:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UserError(f"{p} is not a dataset directory (missing manifest.json)")
    return load_dataset(p), hash_directory(p)


def cmd_train(args, argv) -> int:
    fc = load_config_file(args.config)
    cfg = _train_config(args, fc)
    dataset, dhash = _load_data(args.data)
    protocol = resolve(args, fc, "protocol", "known")
    split_kw = {}
    for name in ("withhold", "target", "k"):
        v = resolve(args, fc, name, None)
        if v is not None:
            split_kw[name] = v
    try:
        split = make_split(dataset, protocol, seed=cfg.seed, **split_kw)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    started = time.time()
    out = Path(args.out) if args.out else _default_out(protocol)
    with atomic_dir(out) as tmp:
        result = train(dataset, split, cfg, checkpoint_path=tmp / "model.ssdf")
        (tmp / "history.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.history))
        (tmp / "steps.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.steps))
        (tmp / "split.json").write_text(json.dumps(split.to_json(), indent=1, sort_keys=True))
        effective = {"train": asdict(cfg), "protocol": protocol, "split": split_kw, "data": str(Path(args.data).resolve())}
        (tmp / "config.json").write_text(json.dumps(effective, indent=1, sort_keys=True))
        write_manifest(tmp, argv, effective, dhash, started, [p.name for p in tmp.iterdir()])
    h = result.history
    print(f"trained {protocol} for {cfg.epochs} epochs: total {h[0]['total']:.4g} -> {h[-1]['total']:.4g}; checkpoint {out / 'model.ssdf'}")
    return EXIT_OK


def _load_run(run) -> tuple:
    run = Path(run)
    if not (run / "model.ssdf").is_file():
        raise UserError(f"{run} is not a training run (missing model.ssdf)")
    model, meta, _ = DeformerModel.load(run / "model.ssdf")
    cfg = json.loads((run / "config.json").read_text())
    split = ExperimentSplit.from_json(json.loads((run / "split.json").read_text()))
    return model, meta, cfg, split


def _template_from(meta: dict, args=None):
    params = dict(meta.get("template") or {})
    if args is not None and getattr(args, "n_theta", None):
        params["n_theta"] = args.n_theta
    if args is not None and getattr(args, "n_z", None):
        params["n_z"] = args.n_z
    return template_cylinder(**params)


def cmd_eval(args, argv) -> int:
    model, meta, cfg, split = _load_run(args.run)
    data = Path(args.data or cfg["data"])
    dataset, dhash = _load_data(data)
    if args.split == "train":
        split = ExperimentSplit(split.name, split.train_ids, split.train_ids, split.k, split.params)
    template = _template_from(meta)
    started = time.time()
    out = Path(args.out) if args.out else Path(args.run) / f"eval-{args.split}"
    with atomic_dir(out) as tmp:
        topo_failures = []

        def on_mesh(key, mesh):
            if not args.emit_meshes:
                return
            (tmp / "meshes").mkdir(exist_ok=True)
            write_obj(tmp / "meshes" / f"{key[0]:03d}_{key[1]:03d}.obj", mesh)
            topo = mesh_topology_check(mesh)
            if not (topo.watertight and topo.euler == 2):
                topo_failures.append(key)

        report = evaluate(model, dataset, split, template, on_mesh=on_mesh)
        (tmp / "metrics.csv").write_text(report.to_csv())
        summary = report.summary()
        summary.update(split=args.split, k=split.k, run=str(Path(args.run).resolve()))
        (tmp / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        write_manifest(tmp, argv, {"run": str(args.run), "split": args.split, "data": str(data)}, dhash, started, [p.name for p in tmp.iterdir()])
    if topo_failures or not report.topology_ok:
        print(f"topology check failed for {topo_failures}", file=sys.stderr)
        return EXIT_INTERNAL
    for group, agg in report.aggregates().items():
        print(f"{group:9s} CDx1e3 {sig4(agg['mean'])} +- {sig4(agg['std'])} (n={agg['count']})")
    return EXIT_OK


def _condition_for(model, dataset, args):
    if args.nominal or args.deform is None:
        return model.nominal_condition(args.object), (args.object, "nominal")
    key = (args.object, args.deform)
    if key not in dataset.samples:
        raise UserError(f"no sample {key} in dataset")
    smp = dataset.samples[key]
    return model.condition(smp.object_id, smp.contacts, smp.force), key


def cmd_render(args, argv) -> int:
    model, meta, cfg, _ = _load_run(args.run)
    dataset, _ = _load_data(args.data or cfg["data"])
    if not 0 <= args.object < model.config.n_objects:
        raise UserError(f"unknown object id {args.object}")
    template = _template_from(meta, args)
    theta, _ = _condition_for(model, dataset, args)
    mesh = template.with_vertices(model.surface_points(template.vertices, theta))
    out = Path(args.out)
    tmp = out.with_name(f".{out.name}.tmp{out.suffix}")
    (write_ply if out.suffix.lower() == ".ply" else write_obj)(tmp, mesh)
    os.replace(tmp, out)
    topo = mesh_topology_check(mesh)
    print(json.dumps({"out": str(out), **topo.as_dict()}, sort_keys=True))
    return EXIT_OK if topo.watertight else EXIT_INTERNAL


def cmd_diag(args, argv) -> int:
    model, meta, cfg, _ = _load_run(args.run)
    dataset, _ = _load_data(args.data or cfg["data"])
    if not 0 <= args.object < model.config.n_objects:
        raise UserError(f"unknown object id {args.object}")
    key = (args.object, args.deform)
    if key not in dataset.samples:
        raise UserError(f"no sample {key} in dataset")
    smp = dataset.samples[key]
    theta_nom = model.nominal_condition(args.object)
    theta_def = model.condition(smp.object_id, smp.contacts, smp.force)
    res = field_similarity(model, args.object, theta_nom, theta_def, grid_points(args.grid))
    res.update(object_id=args.object, deform_id=args.deform)
    text = json.dumps(res, indent=1, sort_keys=True)
    if args.out:
        atomic_write(Path(args.out), text.encode())
    print(f"mean cosine similarity nominal vs deform {args.deform}: {res['mean_cosine']:.4f}")
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    model, meta, cfg, _ = _load_run(args.run)
    n_theta = args.n_theta or 100
    n_z = args.n_z or max(1, int(round(args.vertices / n_theta)) - 1)
    params = dict(meta.get("template") or {})
    params.update(n_theta=n_theta, n_z=n_z)
    template = template_cylinder(**params)
    dataset = tcfg = None
    if args.epoch:
        dataset, _ = _load_data(args.data or cfg["data"])
        tcfg = TrainConfig(**cfg["train"])
    res = benchmark(model, template, dataset, tcfg)
    text = json.dumps(res, indent=1, sort_keys=True)
    if args.out:
        atomic_write(Path(args.out), text.encode())
    print(text)
    return EXIT_OK


FORCE_COLUMNS = ("random", "lowest", "highest", "direction")


def _read_summary(path: Path):
    """Locate a metrics report under ``path``: an eval dir or a run containing ``eval-*``."""
    candidates = [path] if (path / "metrics.csv").is_file() else sorted(path.glob("eval-test")) + sorted(path.glob("eval-*"))
    for c in candidates:
        if (c / "metrics.csv").is_file() and (c / "summary.json").is_file():
            summary = json.loads((c / "summary.json").read_text())
            report = MetricsReport.from_csv((c / "metrics.csv").read_text(), summary.get("protocol", ""))
            agg = report.aggregates()
            for group, vals in summary.get("aggregates", {}).items():
                if group in agg and abs(agg[group]["mean"] - vals["mean"]) > 1e-9 * max(1.0, abs(vals["mean"])):
                    raise ValueError(f"{c}: summary disagrees with metrics.csv for {group}")
            return summary, report
    raise ValueError(f"{path}: no metrics report found")


def cmd_report(args, argv) -> int:
    rows: Dict[str, Dict[str, MetricsReport]] = {"shape": {}, "force": {}, "k": {}}
    bad = []
    for run in args.runs:
        try:
            summary, report = _read_summary(Path(run))
        except (ValueError, KeyError, json.JSONDecodeError, OSError) as exc:
            bad.append(f"{run}: {exc}")
            continue
        protocol = summary.get("protocol", "")
        if protocol == "known":
            rows["shape"]["nominal"] = report.values("nominal")
            rows["shape"]["deformed"] = report.values("deformed")
        elif protocol in FORCE_COLUMNS:
            rows["force"][protocol] = report.values("deformed")
        elif protocol in ("k_deformed", "no_deformed"):
            rows["k"][str(summary.get("k", 0))] = report.values("deformed")

    def cell(v):
        if v is None or len(v) == 0:
            return "", None, None, 0
        return f"{sig4(v.mean())} +- {sig4(v.std())}", float(v.mean()), float(v.std()), len(v)

    tables = [
        ("shape_reconstruction", ["nominal", "deformed"], rows["shape"]),
        ("force_generalisation", list(FORCE_COLUMNS), rows["force"]),
        ("k_deformed", sorted(rows["k"], key=int) or ["1", "2", "3", "4"], rows["k"]),
    ]
    csv_lines = ["table,column,mean_cd_e3,std_cd_e3,count"]
    text = []
    for name, cols, data in tables:
        cells = [cell(data.get(c)) for c in cols]
        for c, (_, mean, std, n) in zip(cols, cells):
            csv_lines.append(f"{name},{c},{'' if mean is None else repr(mean)},{'' if std is None else repr(std)},{n}")
        width = max(18, *(len(s) for s, *_ in cells))
        text.append(f"{name} (CD x 1e3)")
        text.append(" | ".join(c.rjust(width) for c in cols))
        text.append(" | ".join(s.rjust(width) for s, *_ in cells))
        text.append("")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "report.csv", ("\n".join(csv_lines) + "\n").encode())
        atomic_write(out / "report.txt", ("\n".join(text)).encode())
    print("\n".join(text))
    for b in bad:
        print(f"skipped corrupt report {b}", file=sys.stderr)
    return EXIT_USER if bad else EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--config", default=None, help="TOML file of key = value defaults")
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--precision", choices=("f32", "f64"), default=None)

    p = _Parser(prog="ssdeformer", description="Shape-space deformer laboratory")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--objects", type=int, default=None)
    g.add_argument("--deforms", type=int, default=None)
    g.add_argument("--samples", type=int, default=None, help="surface points per cloud")
    g.add_argument("--queries", type=int, default=None, help="training queries per sample")

    t = sub.add_parser("train", parents=[common], help="train a model on one protocol split")
    t.add_argument("--data", required=True)
    t.add_argument("--protocol", choices=PROTOCOLS, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr-alpha", dest="lr_alpha", type=float, default=None)
    t.add_argument("--lr-net", dest="lr_net", type=float, default=None)
    t.add_argument("--withhold", type=int, default=None)
    t.add_argument("--target", type=int, default=None)
    t.add_argument("--k", type=int, default=None)

    e = sub.add_parser("eval", parents=[common], help="evaluate a training run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--emit-meshes", dest="emit_meshes", action="store_true")

    r = sub.add_parser("render", parents=[common], help="render one mesh (.obj or .ply)")
    r.add_argument("--run", required=True)
    r.add_argument("--data", default=None)
    r.add_argument("--object", type=int, required=True)
    r.add_argument("--deform", type=int, default=None)
    r.add_argument("--nominal", action="store_true")
    r.add_argument("--n-theta", dest="n_theta", type=int, default=None)
    r.add_argument("--n-z", dest="n_z", type=int, default=None)

    d = sub.add_parser("diag", parents=[common], help="nominal vs deformed field similarity")
    d.add_argument("--run", required=True)
    d.add_argument("--data", default=None)
    d.add_argument("--object", type=int, required=True)
    d.add_argument("--deform", type=int, required=True)
    d.add_argument("--grid", type=int, default=16)

    b = sub.add_parser("bench", parents=[common], help="parameter count and timings")
    b.add_argument("--run", required=True)
    b.add_argument("--data", default=None)
    b.add_argument("--vertices", type=int, default=10_000)
    b.add_argument("--n-theta", dest="n_theta", type=int, default=None)
    b.add_argument("--n-z", dest="n_z", type=int, default=None)
    b.add_argument("--epoch", action="store_true", help="also time one training epoch")

    rp = sub.add_parser("report", parents=[common], help="consolidate evaluation reports into tables")
    rp.add_argument("runs", nargs="+")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "diag": cmd_diag,
    "bench": cmd_bench,
    "report": cmd_report,
}


def _error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UserError(parser.format_help())
        threads = _threads(args)
        limiter = contextlib.nullcontext()
        if threads is not None:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(threads)
        with limiter:
            return COMMANDS[args.command](args, ["ssdeformer", *argv])
    except UserError as exc:
        _error("usage", str(exc))
        return EXIT_USER
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        _error("path", str(exc))
        return EXIT_USER
    except TrainingDiverged as exc:
        _error("diverged", str(exc))
        return EXIT_INTERNAL
    except (AssertionError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
