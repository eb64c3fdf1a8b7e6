"""Shape-Space Deformer: force encoder, object codes, hypernetwork and conditioned displacement field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import TriangleMesh
from .numerics import (
    IDENTITY,
    RELU,
    SINE,
    Layer,
    Tape,
    init_layer,
    layer_tensors,
    mark_params_updated,
    matmul,
    mlp_backward,
    mlp_forward,
    read_checkpoint,
    write_checkpoint,
)


@dataclass
class ModelConfig:
    n_objects: int = 4
    code_size: int = 6  # l
    force_code_size: int = 12  # d
    max_contacts: int = 8
    contact_width: int = 64
    force_width: int = 64
    hyper_width: int = 128
    hyper_layers: int = 2
    theta_width: int = 64
    field_width: int = 128
    field_layers: int = 5
    conditioning_layer: int = 2  # theta joins the output of this hidden layer
    omega: float = 30.0
    code_std: float = 0.1
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if not 1 <= self.conditioning_layer <= self.field_layers:
            raise ValueError("conditioning_layer must index a hidden layer of the field")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class ConditionTape:
    object_id: int
    mask: np.ndarray
    argmax: np.ndarray
    point_tape: Tape
    head_tape: Tape
    hyper_tape: Tape


@dataclass
class FieldTape:
    head_tape: Tape
    tail_tape: Tape
    head_width: int


def _dense_param_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def param_count_from_config(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    l, d = cfg.code_size, cfg.force_code_size
    total = cfg.n_objects * l
    total += _dense_param_count([3, cfg.contact_width, cfg.contact_width])
    total += _dense_param_count([cfg.contact_width + 3, cfg.force_width, d])
    total += _dense_param_count([l + d] + [cfg.hyper_width] * cfg.hyper_layers + [cfg.theta_width])
    k = cfg.conditioning_layer
    total += _dense_param_count([3] + [cfg.field_width] * k)
    tail = [cfg.field_width + cfg.theta_width] + [cfg.field_width] * (cfg.field_layers - k) + [3]
    total += _dense_param_count(tail)
    return total


class DeformerModel:
    """Object codes ``alpha``, force encoder ``F``, hypernetwork ``Psi`` and field ``OD``.

    ``OD`` is split at the conditioning layer: ``field_head`` maps x to hidden
    features, ``theta`` is concatenated to them, ``field_tail`` maps to a 3-vector.
    """

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        dt = cfg.dtype
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0D]))
        self.alpha = rng.normal(0.0, cfg.code_std, size=(cfg.n_objects, cfg.code_size)).astype(dt)
        w = cfg.omega
        self.contact_net = [
            init_layer(3, cfg.contact_width, RELU, rng, dtype=dt),
            init_layer(cfg.contact_width, cfg.contact_width, RELU, rng, dtype=dt),
        ]
        self.force_head = [
            init_layer(cfg.contact_width + 3, cfg.force_width, RELU, rng, dtype=dt),
            init_layer(cfg.force_width, cfg.force_code_size, IDENTITY, rng, scale=np.sqrt(3.0 / cfg.force_width), dtype=dt),
        ]
        hyper = [init_layer(cfg.code_size + cfg.force_code_size, cfg.hyper_width, SINE, rng, omega=w, first=True, dtype=dt)]
        for _ in range(cfg.hyper_layers - 1):
            hyper.append(init_layer(cfg.hyper_width, cfg.hyper_width, SINE, rng, omega=w, dtype=dt))
        # theta feeds a sine layer next to unit-scale features, so it is emitted at unit scale too.
        hyper.append(init_layer(cfg.hyper_width, cfg.theta_width, IDENTITY, rng, scale=np.sqrt(6.0 / cfg.hyper_width), dtype=dt))
        self.hyper = hyper
        head = [init_layer(3, cfg.field_width, SINE, rng, omega=w, first=True, dtype=dt)]
        for _ in range(cfg.conditioning_layer - 1):
            head.append(init_layer(cfg.field_width, cfg.field_width, SINE, rng, omega=w, dtype=dt))
        tail = [init_layer(cfg.field_width + cfg.theta_width, cfg.field_width, SINE, rng, omega=w, dtype=dt)]
        for _ in range(cfg.field_layers - cfg.conditioning_layer - 1):
            tail.append(init_layer(cfg.field_width, cfg.field_width, SINE, rng, omega=w, dtype=dt))
        tail.append(init_layer(cfg.field_width, 3, IDENTITY, rng, omega=w, dtype=dt))
        self.field_head = head
        self.field_tail = tail
        self._nominal_cache: Dict[int, np.ndarray] = {}
        self.canonical_contact = np.array([[0.0, 0.0, 0.9]])  # template tip

    # ------------------------------------------------------------------ parameters

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {"alpha": self.alpha}
        out.update(layer_tensors("force.contact", self.contact_net))
        out.update(layer_tensors("force.head", self.force_head))
        out.update(layer_tensors("hyper", self.hyper))
        out.update(layer_tensors("field.head", self.field_head))
        out.update(layer_tensors("field.tail", self.field_tail))
        return out

    def field_weight_names(self) -> List[str]:
        return [k for k in self.parameters() if k.startswith("field.") and k.endswith(".weight")]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def load_parameters(self, tensors: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for key, p in params.items():
            if key not in tensors:
                raise KeyError(f"missing tensor {key}")
            if tensors[key].shape != p.shape:
                raise ValueError(f"{key}: shape {tensors[key].shape} != {p.shape}")
            p[...] = tensors[key]
        self._nominal_cache.clear()
        mark_params_updated()

    def astype(self, precision: str) -> "DeformerModel":
        cfg = ModelConfig(**{**asdict(self.config), "precision": precision})
        other = DeformerModel(cfg)
        other.load_parameters({k: v.astype(cfg.dtype) for k, v in self.parameters().items()})
        other.canonical_contact = self.canonical_contact.copy()
        return other

    # ------------------------------------------------------------------ conditioning

    def _check_object(self, object_id: int) -> None:
        if not 0 <= int(object_id) < self.config.n_objects:
            raise KeyError(f"unknown object id {object_id}")

    def _pad_contacts(self, contacts) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(contacts, dtype=np.float64).reshape(-1, 3)
        if len(c) == 0:
            raise ValueError("empty contact set")
        if len(c) > self.config.max_contacts:
            raise ValueError(f"{len(c)} contacts exceed max_contacts={self.config.max_contacts}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite contact coordinates")
        padded = np.zeros((self.config.max_contacts, 3), dtype=self.config.dtype)
        padded[: len(c)] = c
        mask = np.zeros(self.config.max_contacts, dtype=bool)
        mask[: len(c)] = True
        return padded, mask

    def _encode(self, contacts, force):
        padded, mask = self._pad_contacts(contacts)
        u = np.asarray(force, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite force")
        feats, point_tape = mlp_forward(self.contact_net, padded)
        masked = np.where(mask[:, None], feats, -np.inf)
        argmax = np.argmax(masked, axis=0)
        pooled = feats[argmax, np.arange(feats.shape[1])]
        head_in = np.concatenate([pooled, u.astype(self.config.dtype)])[None]
        z, head_tape = mlp_forward(self.force_head, head_in)
        return z[0], mask, argmax, point_tape, head_tape

    def encode_force(self, contacts, force) -> np.ndarray:
        """Force code ``z``; invariant to the order of ``contacts``."""
        return self._encode(contacts, force)[0]

    def hyper_forward(self, alpha, z) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=self.config.dtype).reshape(-1)
        z = np.asarray(z, dtype=self.config.dtype).reshape(-1)
        if alpha.size != self.config.code_size or z.size != self.config.force_code_size:
            raise ValueError(
                f"hyper input sizes ({alpha.size}, {z.size}) != ({self.config.code_size}, {self.config.force_code_size})"
            )
        theta, _ = mlp_forward(self.hyper, np.concatenate([alpha, z])[None])
        return theta[0]

    def condition_forward(self, object_id: int, contacts, force) -> Tuple[np.ndarray, ConditionTape]:
        self._check_object(object_id)
        z, mask, argmax, point_tape, head_tape = self._encode(contacts, force)
        hyper_in = np.concatenate([self.alpha[object_id], z])[None]
        theta, hyper_tape = mlp_forward(self.hyper, hyper_in)
        return theta[0], ConditionTape(int(object_id), mask, argmax, point_tape, head_tape, hyper_tape)

    def condition(self, object_id: int, contacts, force) -> np.ndarray:
        return self.condition_forward(object_id, contacts, force)[0]

    def nominal_condition(self, object_id: int) -> np.ndarray:
        """Conditioning for the undeformed shape: zero force at a fixed canonical contact."""
        self._check_object(object_id)
        if object_id not in self._nominal_cache:
            self._nominal_cache[object_id] = self.condition(object_id, self.canonical_contact, np.zeros(3))
        return self._nominal_cache[object_id]

    # ------------------------------------------------------------------ field

    def field_forward(self, x, theta) -> Tuple[np.ndarray, FieldTape]:
        x = np.asarray(x, dtype=self.config.dtype).reshape(-1, 3)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite query point")
        theta = np.asarray(theta, dtype=self.config.dtype).reshape(-1)
        if theta.size != self.config.theta_width:
            raise ValueError(f"theta width {theta.size} != {self.config.theta_width}")
        h, head_tape = mlp_forward(self.field_head, x)
        hc = np.concatenate([h, np.broadcast_to(theta, (len(x), theta.size))], axis=1)
        d, tail_tape = mlp_forward(self.field_tail, hc)
        return d, FieldTape(head_tape, tail_tape, h.shape[1])

    def deform_query(self, x, theta) -> np.ndarray:
        """Displacement from each query point towards its nearest surface point."""
        return self.field_forward(x, theta)[0]

    def surface_points(self, x, theta) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if len(x) == 0:
            raise ValueError("empty query set")
        return x + np.asarray(self.deform_query(x, theta), dtype=np.float64)

    def render_mesh(self, object_id: int, contacts, force, template: TriangleMesh) -> TriangleMesh:
        """Displace the template's vertices into the (object, deformation) instance."""
        self._check_object(object_id)
        theta = self.condition(object_id, contacts, force)
        return TriangleMesh(self.surface_points(template.vertices, theta), template.triangles)

    # ------------------------------------------------------------------ backward

    def backward(
        self,
        cond: ConditionTape,
        field_tape: FieldTape,
        grad_d: np.ndarray,
        want_input_grad: bool = False,
    ):
        """Gradients of a scalar loss given dL/d(displacement) for every query row."""
        grads: Dict[str, np.ndarray] = {}
        g_tail, g_hc = mlp_backward(self.field_tail, field_tape.tail_tape, grad_d.astype(self.config.dtype, copy=False))
        _store(grads, "field.tail", g_tail)
        g_h = g_hc[:, : field_tape.head_width]
        g_theta = g_hc[:, field_tape.head_width :].sum(axis=0)
        g_head, g_x = mlp_backward(self.field_head, field_tape.head_tape, np.ascontiguousarray(g_h))
        _store(grads, "field.head", g_head)

        g_hyper, g_hin = mlp_backward(self.hyper, cond.hyper_tape, g_theta[None])
        _store(grads, "hyper", g_hyper)
        l = self.config.code_size
        g_alpha = np.zeros_like(self.alpha)
        g_alpha[cond.object_id] = g_hin[0, :l]
        grads["alpha"] = g_alpha

        g_fhead, g_fin = mlp_backward(self.force_head, cond.head_tape, g_hin[:, l:])
        _store(grads, "force.head", g_fhead)
        g_pooled = g_fin[0, : self.config.contact_width]
        g_feats = np.zeros((self.config.max_contacts, self.config.contact_width), dtype=self.config.dtype)
        g_feats[cond.argmax, np.arange(g_feats.shape[1])] = g_pooled
        g_contact, _ = mlp_backward(self.contact_net, cond.point_tape, g_feats)
        _store(grads, "force.contact", g_contact)
        if want_input_grad:
            return grads, g_x
        return grads

    # ------------------------------------------------------------------ persistence

    def sidecar(self, template: Optional[dict] = None) -> dict:
        cfg = self.config
        return {
            "l": cfg.code_size,
            "d": cfg.force_code_size,
            "widths": {
                "contact": cfg.contact_width,
                "force": cfg.force_width,
                "hyper": [cfg.hyper_width] * cfg.hyper_layers,
                "theta": cfg.theta_width,
                "field": [cfg.field_width] * cfg.field_layers,
            },
            "conditioning_layer": cfg.conditioning_layer,
            "max_contacts": cfg.max_contacts,
            "object_count": cfg.n_objects,
            "template": template,
            "config": asdict(cfg),
            "canonical_contact": self.canonical_contact.tolist(),
            "param_count": self.param_count(),
        }

    def save(self, path, template: Optional[dict] = None, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
        tensors = dict(self.parameters())
        if extra:
            tensors.update(extra)
        write_checkpoint(path, tensors)
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(template), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> Tuple["DeformerModel", dict, Dict[str, np.ndarray]]:
        """Returns the model, its sidecar and any extra (optimizer) tensors."""
        meta = json.loads(Path(str(path) + ".json").read_text())
        model = cls(ModelConfig(**meta["config"]))
        model.canonical_contact = np.asarray(meta["canonical_contact"], dtype=np.float64).reshape(-1, 3)
        tensors = read_checkpoint(path)
        names = set(model.parameters())
        model.load_parameters({k: v.astype(model.config.dtype) for k, v in tensors.items() if k in names})
        extra = {k: v for k, v in tensors.items() if k not in names}
        return model, meta, extra


def _store(grads: Dict[str, np.ndarray], prefix: str, layer_grads) -> None:
    for i, (gw, gb) in enumerate(layer_grads):
        grads[f"{prefix}.{i}.weight"] = gw
        grads[f"{prefix}.{i}.bias"] = gb
