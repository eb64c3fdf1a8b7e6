"""Training loop, evaluation, experiment protocols, diagnostics and benchmarks."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import KdTree, TriangleMesh, chamfer_distance, mesh_topology_check, template_cylinder
from .losses import LossWeights, total_loss
from .model import DeformerModel, ModelConfig
from .numerics import NonFiniteError, ParamGroup, adam_step, mark_params_updated
from .synthgen import Dataset, ExperimentSplit, SampleId, make_split

log = logging.getLogger(__name__)

CD_SCALE = 1e3


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_alpha: float = 1e-4
    lr_net: float = 5e-5
    lambda_shape: float = 5e6
    lambda_reg: float = 1e2
    w_vec: float = 1.0
    w_cd: float = 1.0
    w_alpha: float = 1.0
    w_w: float = 1.0
    cd_points: int = 512  # template vertices warped per step for the Chamfer term
    seed: int = 7
    precision: str = "f32"
    divergence_factor: float = 1e3
    template: dict = field(default_factory=lambda: {"n_theta": 48, "n_z": 48, "radius": 0.25, "height": 1.8})
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.lr_alpha < 0 or self.lr_net < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_shape, self.lambda_reg, self.w_vec, self.w_cd, self.w_alpha, self.w_w)

    def make_template(self) -> TriangleMesh:
        return template_cylinder(**self.template)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Optional[str], reason: str):
        super().__init__(f"training diverged at epoch {epoch}: {reason} (last good checkpoint: {checkpoint})")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: DeformerModel
    history: List[dict]
    steps: List[dict]
    groups: Dict[str, ParamGroup]
    seconds: float

    def optimizer_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for g in self.groups.values():
            for k in g.params:
                out[f"adam.{g.name}.{k}.m"] = g.m[k]
                out[f"adam.{g.name}.{k}.v"] = g.v[k]
            out[f"adam.{g.name}.step"] = np.array([g.step], dtype=np.float64)
        return out


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tags]))


def build_model(dataset: Dataset, config: TrainConfig) -> DeformerModel:
    overrides = {"n_objects": dataset.n, "seed": config.seed, "precision": config.precision, **config.model}
    model = DeformerModel(ModelConfig(**overrides))
    h = config.template.get("height", 1.8)
    model.canonical_contact = np.array([[0.0, 0.0, h / 2.0]])
    return model


def train(
    dataset: Dataset,
    split: ExperimentSplit,
    config: TrainConfig,
    model: Optional[DeformerModel] = None,
    checkpoint_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Jointly optimise codes, force encoder, hypernetwork and field on ``split.train_ids``.

    One optimizer step per sample, visiting every training sample once per epoch
    in a seeded shuffled order.
    """
    if not split.train_ids:
        raise ValueError("empty training split")
    model = model or build_model(dataset, config)
    params = model.parameters()
    groups = {
        "alpha": ParamGroup("alpha", {"alpha": params["alpha"]}, config.lr_alpha),
        "net": ParamGroup("net", {k: v for k, v in params.items() if k != "alpha"}, config.lr_net),
    }
    template = config.make_template()
    weights = config.loss_weights
    trees = {key: KdTree(dataset.samples[key].cloud) for key in split.train_ids}
    order_rng = _rng(config.seed, 1)
    cd_rng = _rng(config.seed, 2)
    ids = list(split.train_ids)
    history: List[dict] = []
    steps: List[dict] = []
    first_total = None
    last_good = None
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        n_cd = min(config.cd_points, len(template.vertices))
        cd_pts = template.vertices[np.sort(cd_rng.choice(len(template.vertices), n_cd, replace=False))]
        sums = np.zeros(5)
        for step, j in enumerate(order_rng.permutation(len(ids))):
            key = ids[j]
            br, grads = total_loss(dataset.samples[key], model, weights, cd_pts, trees[key])
            row = {"epoch": epoch, "step": step, "object_id": key[0], "deform_id": key[1], **br.as_dict()}
            steps.append(row)
            if not np.isfinite(br.total):
                raise TrainingDiverged(epoch, _dump_last_good(last_good, checkpoint_path, model), "non-finite loss")
            sums += [br.l_vec, br.l_cd, br.l_alpha, br.l_w, br.total]
            try:
                adam_step(groups["alpha"], {"alpha": grads["alpha"]})
                adam_step(groups["net"], grads)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, _dump_last_good(last_good, checkpoint_path, model), str(exc)) from exc
        mean = sums / len(ids)
        rec = dict(zip(("l_vec", "l_cd", "l_alpha", "l_w", "total"), map(float, mean)))
        rec["epoch"] = epoch
        history.append(rec)
        if first_total is None:
            first_total = rec["total"]
        elif rec["total"] > config.divergence_factor * first_total:
            raise TrainingDiverged(epoch, _dump_last_good(last_good, checkpoint_path, model), "loss blew up")
        last_good = {k: v.copy() for k, v in model.parameters().items()}
        if on_epoch:
            on_epoch(rec)
        log.debug("epoch %d total %.6g", epoch, rec["total"])
    model._nominal_cache.clear()
    result = TrainResult(model, history, steps, groups, time.perf_counter() - t0)
    if checkpoint_path is not None:
        model.save(checkpoint_path, config.template, result.optimizer_tensors())
    return result


def _dump_last_good(last_good, path, model) -> Optional[str]:
    if last_good is None or path is None:
        return None
    good = copy.deepcopy(model)
    good.load_parameters(last_good)
    out = Path(str(path) + ".lastgood")
    good.save(out)
    return str(out)


# --------------------------------------------------------------------------- evaluation


@dataclass
class SampleMetric:
    object_id: int
    deform_id: int
    group: str
    cd_e3: float


@dataclass
class MetricsReport:
    protocol: str
    rows: List[SampleMetric]
    param_count: int
    timings: Dict[str, float] = field(default_factory=dict)
    topology_ok: bool = True
    extra: dict = field(default_factory=dict)

    def values(self, group: Optional[str] = None) -> np.ndarray:
        return np.array([r.cd_e3 for r in self.rows if group is None or r.group == group], dtype=np.float64)

    def aggregates(self) -> Dict[str, dict]:
        out = {}
        for group in ("nominal", "deformed", "all"):
            v = self.values(None if group == "all" else group)
            if len(v):
                out[group] = {"mean": float(v.mean()), "std": float(v.std()), "count": int(len(v))}
        return out

    def mean(self, group: Optional[str] = None) -> float:
        v = self.values(group)
        return float(v.mean()) if len(v) else float("nan")

    def to_csv(self) -> str:
        lines = ["object_id,deform_id,group,cd_e3"]
        lines += [f"{r.object_id},{r.deform_id},{r.group},{r.cd_e3!r}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "aggregates": self.aggregates(),
            "param_count": self.param_count,
            "timings": self.timings,
            "topology_ok": self.topology_ok,
            **self.extra,
        }

    @classmethod
    def from_csv(cls, text: str, protocol: str = "", param_count: int = 0) -> "MetricsReport":
        rows = []
        lines = text.strip().splitlines()
        if not lines or lines[0].strip() != "object_id,deform_id,group,cd_e3":
            raise ValueError("not a metrics CSV")
        for line in lines[1:]:
            o, d, g, v = line.split(",")
            rows.append(SampleMetric(int(o), int(d), g, float(v)))
        return cls(protocol, rows, param_count)


def parameter_digest(model: DeformerModel) -> str:
    h = hashlib.sha256()
    for key, p in model.parameters().items():
        h.update(key.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def evaluate(
    model,
    dataset: Dataset,
    split: ExperimentSplit,
    template: TriangleMesh,
    on_mesh: Optional[Callable[[SampleId, TriangleMesh], None]] = None,
) -> MetricsReport:
    """Render every test sample from the template and score it against its ground-truth cloud."""
    rows = []
    topo_ok = True
    template_topo = mesh_topology_check(template)
    t0 = time.perf_counter()
    for key in split.test_ids:
        if key not in dataset.samples:
            raise KeyError(f"test sample {key} not in dataset")
        smp = dataset.samples[key]
        if not 0 <= smp.object_id < model.config.n_objects:
            raise KeyError(f"test sample {key} references unknown object {smp.object_id}")
        mesh = model.render_mesh(smp.object_id, smp.contacts, smp.force, template)
        if not np.array_equal(mesh.triangles, template.triangles):
            topo_ok = False
        else:
            topo = mesh_topology_check(mesh)
            topo_ok &= topo.watertight == template_topo.watertight and topo.euler == template_topo.euler
        cd = chamfer_distance(mesh.vertices, smp.cloud) * CD_SCALE
        rows.append(SampleMetric(key[0], key[1], "nominal" if smp.nominal else "deformed", cd))
        if on_mesh:
            on_mesh(key, mesh)
    elapsed = time.perf_counter() - t0
    report = MetricsReport(split.name, rows, model.param_count() if hasattr(model, "param_count") else 0)
    report.timings["eval_seconds"] = elapsed
    report.topology_ok = topo_ok
    return report


def run_experiment(
    protocol: str,
    dataset: Dataset,
    config: TrainConfig,
    split_seed: Optional[int] = None,
    ks: Sequence[int] = (1, 2, 3, 4),
    **split_params,
) -> Dict[str, MetricsReport]:
    """Split, train a fresh model and evaluate on the test ids.

    ``k_deformed`` trains one model per ``k`` in ``ks``. Reports carry the
    matching train-set CD under ``extra['train_cd_e3']``.
    """
    seed = config.seed if split_seed is None else split_seed
    runs = [("k", k) for k in ks] if protocol == "k_deformed" else [(None, None)]
    out = {}
    for tag, k in runs:
        kwargs = dict(split_params)
        if tag:
            kwargs["k"] = k
        split = make_split(dataset, protocol, seed=seed, **kwargs)
        result = train(dataset, split, config)
        template = config.make_template()
        report = evaluate(result.model, dataset, split, template)
        train_split = ExperimentSplit(split.name, split.train_ids, split.train_ids)
        report.extra["train_cd_e3"] = evaluate(result.model, dataset, train_split, template).mean()
        report.extra["final_total"] = result.history[-1]["total"]
        report.extra["first_total"] = result.history[0]["total"]
        report.timings["train_seconds"] = result.seconds
        report.timings["train_seconds_per_epoch"] = result.seconds / config.epochs
        name = protocol if tag is None else f"{protocol}_k{k}"
        out[name] = report
    return out


# --------------------------------------------------------------------------- diagnostics


def field_similarity(model, object_id: int, theta_a, theta_b, grid, bins: int = 20) -> dict:
    """Per-point cosine similarity of the displacement fields under two conditionings."""
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, 3)
    if len(grid) == 0:
        raise ValueError("empty grid")
    model._check_object(object_id)
    da = np.asarray(model.deform_query(grid, theta_a), dtype=np.float64)
    db = np.asarray(model.deform_query(grid, theta_b), dtype=np.float64)
    na, nb = np.linalg.norm(da, axis=1), np.linalg.norm(db, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.clip((da[ok] * db[ok]).sum(axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
    hist, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    return {
        "mean_cosine": float(cos.mean()) if len(cos) else float("nan"),
        "points": int(len(grid)),
        "excluded_zero": int((~ok).sum()),
        "histogram": hist.tolist(),
        "bin_edges": edges.tolist(),
    }


def grid_points(n: int = 16, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    ax = np.linspace(lo, hi, n)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def benchmark(
    model: DeformerModel,
    template: TriangleMesh,
    dataset: Optional[Dataset] = None,
    config: Optional[TrainConfig] = None,
    repeats: int = 10,
) -> dict:
    """Parameter count, seconds per training epoch (when data is given) and median render time."""
    times = []
    contact = model.canonical_contact
    for _ in range(repeats):
        t = time.perf_counter()
        model.render_mesh(0, contact, np.zeros(3), template)
        times.append(time.perf_counter() - t)
    out = {
        "param_count": model.param_count(),
        "render_seconds": float(np.median(times)),
        "render_vertices": int(len(template.vertices)),
        "train_seconds_per_epoch": None,
    }
    if dataset is not None:
        cfg = copy.deepcopy(config or TrainConfig())
        cfg.epochs = 1
        scratch = copy.deepcopy(model)
        split = make_split(dataset, "known")
        t = time.perf_counter()
        train(dataset, split, cfg, model=scratch)
        out["train_seconds_per_epoch"] = time.perf_counter() - t
    return out
