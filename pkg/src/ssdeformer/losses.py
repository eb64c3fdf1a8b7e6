"""Training objective: vector loss + Chamfer loss, plus code and field-weight regularisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .geometry import KdTree, as_points


@dataclass(frozen=True)
class LossWeights:
    lambda_shape: float = 5e6
    lambda_reg: float = 1e2
    w_vec: float = 1.0
    w_cd: float = 1.0
    w_alpha: float = 1.0
    w_w: float = 1.0

    def __post_init__(self):
        for name in ("lambda_shape", "lambda_reg", "w_vec", "w_cd", "w_alpha", "w_w"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    l_vec: float
    l_cd: float
    l_alpha: float
    l_w: float
    weights: LossWeights = LossWeights()

    @property
    def shape(self) -> float:
        w = self.weights
        return w.w_vec * self.l_vec + w.w_cd * self.l_cd

    @property
    def reg(self) -> float:
        w = self.weights
        return w.w_alpha * self.l_alpha + w.w_w * self.l_w

    @property
    def total(self) -> float:
        return self.weights.lambda_shape * self.shape + self.weights.lambda_reg * self.reg

    def as_dict(self) -> dict:
        return {"l_vec": self.l_vec, "l_cd": self.l_cd, "l_alpha": self.l_alpha, "l_w": self.l_w, "total": self.total}


def loss_vec(queries, targets, displacement) -> Tuple[float, np.ndarray]:
    """Mean squared distance between ``x + d`` and ``p*``; returns the loss and dL/dd."""
    x = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise ValueError("empty query set")
    d = np.asarray(displacement)
    r = (x + d.astype(np.float64)) - np.asarray(targets, dtype=np.float64)
    loss = float(np.einsum("ij,ij->", r, r) / len(x))
    return loss, (2.0 / len(x)) * r


def loss_cd(predicted, ground_truth, gt_tree: Optional[KdTree] = None) -> Tuple[float, np.ndarray]:
    """Chamfer distance and its gradient with respect to the predicted points.

    Nearest-neighbour assignments are held fixed when differentiating.
    """
    p = as_points(predicted, "predicted")
    g = as_points(ground_truth, "ground truth")
    gt_tree = gt_tree or KdTree(g)
    nn_pg, d_pg = gt_tree.query(p)
    nn_gp, d_gp = KdTree(p).query(g)
    loss = float(d_pg.mean() + d_gp.mean())
    grad = (2.0 / len(p)) * (p - g[nn_pg])
    back = (2.0 / len(g)) * (p[nn_gp] - g)
    np.add.at(grad, nn_gp, back)
    return loss, grad


def loss_reg(codes: np.ndarray, field_weights: Sequence[np.ndarray]):
    """``(l_alpha, l_w, dl_alpha/dcodes, [dl_w/dW ...])`` as means of squared entries."""
    codes = np.asarray(codes)
    if codes.size == 0 or len(field_weights) == 0:
        raise ValueError("need at least one code and one weight tensor")
    c = codes.astype(np.float64)
    l_alpha = float(np.mean(c * c))
    g_alpha = (2.0 / c.size) * c
    n_w = sum(w.size for w in field_weights)
    l_w = float(sum(np.sum(w.astype(np.float64) ** 2) for w in field_weights) / n_w)
    g_ws = [(2.0 / n_w) * w.astype(np.float64) for w in field_weights]
    return l_alpha, l_w, g_alpha, g_ws


def total_loss(
    sample,
    model,
    weights: LossWeights = LossWeights(),
    template_points: Optional[np.ndarray] = None,
    gt_tree: Optional[KdTree] = None,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Full objective for one (object, deformation) sample and gradients for every parameter.

    ``template_points`` are the vertices warped by the field for the Chamfer term;
    without them the Chamfer term is zero.
    """
    theta, cond = model.condition_forward(sample.object_id, sample.contacts, sample.force)
    nq = len(sample.queries)
    pts = sample.queries if template_points is None else np.concatenate([sample.queries, template_points])
    d, ftape = model.field_forward(pts, theta)

    l_vec, g_dq = loss_vec(sample.queries, sample.targets, d[:nq])
    grad_d = np.empty((len(pts), 3))
    grad_d[:nq] = (weights.lambda_shape * weights.w_vec) * g_dq
    l_cd = 0.0
    if template_points is not None:
        pred = np.asarray(template_points, dtype=np.float64) + d[nq:].astype(np.float64)
        l_cd, g_pred = loss_cd(pred, sample.cloud, gt_tree)
        grad_d[nq:] = (weights.lambda_shape * weights.w_cd) * g_pred
    grads = model.backward(cond, ftape, grad_d)

    names = model.field_weight_names()
    params = model.parameters()
    l_alpha, l_w, g_alpha, g_ws = loss_reg(model.alpha, [params[k] for k in names])
    dt = model.alpha.dtype
    grads["alpha"] = grads["alpha"] + (weights.lambda_reg * weights.w_alpha * g_alpha).astype(dt)
    for key, g in zip(names, g_ws):
        grads[key] = grads[key] + (weights.lambda_reg * weights.w_w * g).astype(dt)
    return LossBreakdown(l_vec, l_cd, l_alpha, l_w, weights), grads
