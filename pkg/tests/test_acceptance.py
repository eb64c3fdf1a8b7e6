"""End-to-end acceptance criteria on the desk-scale synthetic dataset.

Each test records one pass/fail line, printed in the terminal summary. The
desk runs are long (tens of minutes on one core); deselect with ``-m "not acceptance"``.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ssdeformer.cli import dispatch
from ssdeformer.geometry import KdTree, chamfer_distance, mesh_topology_check, template_cylinder
from ssdeformer.harness import TrainConfig, benchmark, build_model, evaluate, run_experiment, train
from ssdeformer.losses import LossBreakdown, LossWeights, loss_cd, loss_vec, total_loss
from ssdeformer.model import param_count_from_config
from ssdeformer.numerics import grad_check
from ssdeformer.synthgen import DatasetConfig, ExperimentSplit, generate_dataset, make_split

from conftest import record_criterion, tiny_model

pytestmark = pytest.mark.acceptance

NOMINAL_GATE = 5.0
DEFORMED_GATE = 10.0
FORCE_EPOCHS = 100
K_EPOCHS = 100
K_SEEDS = (0, 1, 2)

# every mesh rendered anywhere in this module, for criterion 4
RENDERED = []


def _collect(template):
    def on_mesh(key, mesh):
        RENDERED.append((key, mesh, template))

    return on_mesh


def _evaluate(model, dataset, split, template):
    return evaluate(model, dataset, split, template, on_mesh=_collect(template))


class Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        detail = f"{self.detail} [{dt:.1f}s]".strip()
        if exc_type is not None:
            detail = f"{detail} :: {exc_type.__name__}: {exc}"
        record_criterion(self.number, self.title, exc_type is None, detail)
        print(f"criterion {self.number} {'PASS' if exc_type is None else 'FAIL'}: {self.title} {detail}")
        return False


@pytest.fixture(scope="module")
def desk():
    return generate_dataset(DatasetConfig())


@pytest.fixture(scope="module")
def known_run(desk):
    cfg = TrainConfig()
    split = make_split(desk, "known")
    t0 = time.perf_counter()
    result = train(desk, split, cfg)
    seconds = time.perf_counter() - t0
    template = cfg.make_template()
    report = _evaluate(result.model, desk, split, template)
    return result, report, template, seconds


# --------------------------------------------------------------------------- 1


def test_c1_gradient_correctness():
    with Criterion(1, "finite-difference gradients, all parameter groups") as c:
        ds = generate_dataset(DatasetConfig(n_objects=2, n_deforms=2, seed=5, surface_samples=500, queries=24))
        model = tiny_model()
        batch = [ds.samples[(0, 0)], ds.samples[(1, 2)]]
        tpl = template_cylinder(6, 4).vertices[::3]
        trees = [KdTree(s.cloud) for s in batch]

        def closure():
            total, grads = 0.0, {}
            for smp, tree in zip(batch, trees):
                b, g = total_loss(smp, model, LossWeights(), tpl, tree)
                total += b.total
                for k, v in g.items():
                    grads[k] = grads.get(k, 0.0) + v
            return total, grads

        params = model.parameters()
        t0 = time.perf_counter()
        report = grad_check(closure, params, tolerance=1e-4, h=1e-6)
        elapsed = time.perf_counter() - t0
        groups = {"alpha": [], "F": [], "Psi": [], "OD": []}
        for key, err in report.errors.items():
            g = "alpha" if key == "alpha" else "F" if key.startswith("force") else "Psi" if key.startswith("hyper") else "OD"
            groups[g].append(err)
        worst = {g: max(v) for g, v in groups.items()}
        c.detail = f"worst rel err {worst}, {sum(p.size for p in params.values())} entries, {elapsed:.1f}s"
        assert all(v for v in groups.values())
        assert report.passed, report.worst
        assert elapsed < 60.0


# --------------------------------------------------------------------------- 2


def _dense_nn(q, cloud):
    d2 = ((q[:, None, :] - cloud[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1), d2.min(axis=1)


def test_c2_oracle_equivalence():
    with Criterion(2, "KD-tree and Chamfer vs O(n^2) brute force, 200 instances") as c:
        rng = np.random.default_rng(2024)
        worst_cd = 0.0
        for i in range(200):
            n, m = rng.integers(1, 1001, size=2)
            if i % 4 == 0:
                # integer lattice: many exact ties
                cloud = rng.integers(-3, 4, size=(n, 3)).astype(np.float64)
                q = rng.integers(-4, 5, size=(m, 3)) / 2.0
            else:
                cloud = rng.normal(size=(n, 3)) * rng.uniform(0.01, 10)
                q = rng.normal(size=(m, 3)) * rng.uniform(0.01, 10)
            idx, sq = KdTree(cloud).query(q)
            ref_idx, ref_sq = _dense_nn(q, cloud)
            assert np.array_equal(idx, ref_idx), f"instance {i}: nearest index mismatch"
            assert np.array_equal(sq, ref_sq), f"instance {i}: distance mismatch"
            ref_cd = ref_sq.mean() + _dense_nn(cloud, q)[1].mean()
            err = abs(chamfer_distance(q, cloud) - ref_cd)
            worst_cd = max(worst_cd, err)
            assert err <= 1e-9
        c.detail = f"worst |CD - brute| = {worst_cd:.2e}"
        assert time.perf_counter() - c.t0 < 30.0


# --------------------------------------------------------------------------- 3


def test_c3_loss_identities():
    with Criterion(3, "loss breakdown identity and hand examples") as c:
        assert LossBreakdown(1.0, 2.0, 3.0, 4.0).total == 1.50007e7
        assert loss_vec([[0, 0, 0]], [[0, 0, 0]], [[1, 0, 0]])[0] == 1.0
        cd, grad = loss_cd([[0, 0, 0]], [[1, 0, 0]])
        assert cd == 2.0 and np.array_equal(grad, [[-4.0, 0.0, 0.0]])
        assert chamfer_distance([[0, 0, 0], [2, 0, 0]], [[0, 0, 0]]) == 2.0
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(1000):
            parts = rng.uniform(0, 10, size=4) ** rng.uniform(-3, 3, size=4)
            w = LossWeights(float(rng.uniform(0, 1e7)), float(rng.uniform(0, 1e3)))
            b = LossBreakdown(*map(float, parts), w)
            ref = w.lambda_shape * (parts[0] + parts[1]) + w.lambda_reg * (parts[2] + parts[3])
            worst = max(worst, abs(b.total - ref) / ref)
        ds = generate_dataset(DatasetConfig(n_objects=2, n_deforms=2, seed=5, surface_samples=500, queries=24))
        model = tiny_model()
        for smp in ds.samples.values():
            b, _ = total_loss(smp, model, LossWeights(), template_cylinder(6, 4).vertices)
            ref = 5e6 * (b.l_vec + b.l_cd) + 1e2 * (b.l_alpha + b.l_w)
            worst = max(worst, abs(b.total - ref) / ref)
        c.detail = f"worst relative identity error {worst:.1e}"
        assert worst <= 1e-12


# --------------------------------------------------------------------------- 5, 8, 10 (share the known run)


def test_c5_known_deformation_run(known_run):
    with Criterion(5, "known-deformation desk run (4x12, 300 epochs, seed 7)") as c:
        result, report, _, seconds = known_run
        nominal, deformed = report.mean("nominal"), report.mean("deformed")
        ratio = result.history[-1]["total"] / result.history[0]["total"]
        c.detail = (
            f"CDx1e3 nominal {nominal:.4g} (<{NOMINAL_GATE}), deformed {deformed:.4g} (<{DEFORMED_GATE}), "
            f"final/first total {ratio:.4f} (<0.05), train {seconds:.0f}s"
        )
        assert len(result.history) == 300
        assert nominal < NOMINAL_GATE
        assert deformed < DEFORMED_GATE
        assert ratio < 0.05
        assert seconds < 15 * 60


def test_c8_trivial_deformation(known_run, desk):
    with Criterion(8, "zero-force conditioning renders the nominal shape") as c:
        result, _, template, _ = known_run
        model = result.model
        gate = 1.5 * NOMINAL_GATE
        cds = []
        for o in range(desk.n):
            nominal_cloud = desk.samples[(o, 0)].cloud
            # canonical contact and the recorded nominal contacts, both with u = 0
            for theta in (model.nominal_condition(o), model.condition(o, desk.samples[(o, 0)].contacts, np.zeros(3))):
                verts = model.surface_points(template.vertices, theta)
                RENDERED.append(((o, 0), template.with_vertices(verts), template))
                cds.append(chamfer_distance(verts, nominal_cloud) * 1e3)
        c.detail = f"max CDx1e3 {max(cds):.4g} (<{gate})"
        assert max(cds) < gate


def test_c10_efficiency(known_run, desk):
    with Criterion(10, "efficiency reporting and 10k-vertex render") as c:
        result, _, _, _ = known_run
        model = result.model
        template = template_cylinder(100, 99)
        assert len(template.vertices) >= 10_000
        with threadpool_limits(1):
            res = benchmark(model, template, desk, TrainConfig(), repeats=10)
        c.detail = (
            f"params {res['param_count']}, epoch {res['train_seconds_per_epoch']:.2f}s, "
            f"render {res['render_seconds'] * 1e3:.0f}ms for {res['render_vertices']} vertices"
        )
        assert res["param_count"] == param_count_from_config(model.config)
        assert res["train_seconds_per_epoch"] > 0
        assert res["render_seconds"] < 1.0


# --------------------------------------------------------------------------- 6


def test_c6_force_generalisation(desk):
    with Criterion(6, f"force generalisation sanity ({FORCE_EPOCHS} epochs per protocol)") as c:
        cfg = TrainConfig(epochs=FORCE_EPOCHS)
        template = cfg.make_template()
        rows = {}
        for protocol in ("random", "lowest", "highest", "direction"):
            split = make_split(desk, protocol, seed=cfg.seed)
            result = train(desk, split, cfg)
            test_cd = _evaluate(result.model, desk, split, template).mean()
            train_split = ExperimentSplit(protocol, split.train_ids, split.train_ids)
            train_cd = _evaluate(result.model, desk, train_split, template).mean()
            rows[protocol] = (test_cd, train_cd)
        c.detail = ", ".join(f"{p} test {t:.4g} / train {tr:.4g}" for p, (t, tr) in rows.items())
        c.detail += f"; random<=direction: {rows['random'][0] <= rows['direction'][0]}"
        for protocol, (test_cd, train_cd) in rows.items():
            assert np.isfinite(test_cd), protocol
            assert test_cd <= 50 * train_cd, protocol


# --------------------------------------------------------------------------- 7


def test_c7_k_deformed_trend(desk):
    with Criterion(7, f"k-deformed trend, median of {len(K_SEEDS)} seeds ({K_EPOCHS} epochs)") as c:
        per_k = {k: [] for k in (1, 2, 3, 4)}
        cfg = TrainConfig(epochs=K_EPOCHS)
        template = cfg.make_template()
        for seed in K_SEEDS:
            for k in per_k:
                split = make_split(desk, "k_deformed", seed=seed, k=k)
                result = train(desk, split, cfg)
                per_k[k].append(_evaluate(result.model, desk, split, template).mean())
        med = {k: float(np.median(v)) for k, v in per_k.items()}
        c.detail = "median CDx1e3 " + ", ".join(f"k={k}: {m:.4g}" for k, m in med.items())
        c.detail += " | per seed " + str({k: [round(x, 3) for x in v] for k, v in per_k.items()})
        assert all(med[k + 1] <= med[k] for k in (1, 2, 3))
        assert med[4] <= 0.5 * med[1]


# --------------------------------------------------------------------------- 9


def _pipeline(root, tag):
    data, run = root / f"data_{tag}", root / f"run_{tag}"
    assert dispatch(["gen", "--seed", "11", "--objects", "2", "--deforms", "3", "--threads", "1", "--out", str(data)]) == 0
    assert (
        dispatch(
            ["train", "--data", str(data), "--protocol", "random", "--epochs", "5", "--seed", "11", "--threads", "1", "--out", str(run)]
        )
        == 0
    )
    assert dispatch(["eval", "--run", str(run), "--threads", "1", "--emit-meshes"]) == 0
    return run


def test_c9_reproducibility(tmp_path):
    with Criterion(9, "two gen->train->eval pipelines are byte-identical") as c:
        a, b = _pipeline(tmp_path, "a"), _pipeline(tmp_path, "b")
        same_ckpt = (a / "model.ssdf").read_bytes() == (b / "model.ssdf").read_bytes()
        same_csv = (a / "eval-test" / "metrics.csv").read_bytes() == (b / "eval-test" / "metrics.csv").read_bytes()
        meshes_a = sorted((a / "eval-test" / "meshes").iterdir())
        same_meshes = all(p.read_bytes() == (b / "eval-test" / "meshes" / p.name).read_bytes() for p in meshes_a)
        c.detail = f"checkpoint {same_ckpt}, metrics.csv {same_csv}, {len(meshes_a)} meshes {same_meshes}"
        assert same_ckpt and same_csv and same_meshes


# --------------------------------------------------------------------------- 4 (runs last: audits every mesh above)


def test_c4_rendering_topology(desk):
    with Criterion(4, "every rendered mesh is watertight, Euler 2, template connectivity") as c:
        cfg = TrainConfig()
        template = cfg.make_template()
        untrained = build_model(desk, cfg)
        for key, smp in sorted(desk.samples.items()):
            mesh = untrained.render_mesh(smp.object_id, smp.contacts, smp.force, template)
            RENDERED.append((key, mesh, template))
        # an adversarially scaled untrained model as well
        wild = build_model(desk, cfg)
        for p in wild.parameters().values():
            p *= 7.0
        for o in range(desk.n):
            RENDERED.append(((o, -1), wild.render_mesh(o, [[0.0, 0.0, 0.9]], [1.0, -1.0, 0.2], template), template))
        bad = []
        for key, mesh, tpl in RENDERED:
            topo = mesh_topology_check(mesh)
            ok = np.array_equal(mesh.triangles, tpl.triangles) and topo.watertight and topo.manifold and topo.euler == 2
            if not ok:
                bad.append(key)
        c.detail = f"{len(RENDERED) - len(bad)}/{len(RENDERED)} meshes pass"
        assert len(RENDERED) > 0 and not bad
