"""Synthetic deformable-utensil dataset with an analytic cantilever deformation oracle.

Every object is a single lofted tube: a round handle blending into a flat,
rounded-tip paddle, clamped at the handle base. Loads bend it as a linear
Euler-Bernoulli cantilever; the whole cross-section at arc length ``s`` moves by
the same transverse displacement.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import (
    TriangleMesh,
    Transform,
    as_points,
    loft_mesh,
    nearest_brute,
    normalize_unit_cube,
    read_point_cloud,
    sample_surface,
    write_ply,
    write_point_cloud,
)

FORMAT_VERSION = 1
PROTOCOLS = ("known", "random", "lowest", "highest", "direction", "no_deformed", "k_deformed")

SampleId = Tuple[int, int]


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    handle_length: float
    handle_radius: float
    paddle_length: float
    paddle_width: float
    paddle_thickness: float
    stiffness: float  # EI, in normalised length/force units

    def __post_init__(self):
        dims = (self.handle_length, self.handle_radius, self.paddle_length, self.paddle_width, self.paddle_thickness)
        if not all(np.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"object {self.object_id}: all dimensions must be positive, got {dims}")
        if not (np.isfinite(self.stiffness) and self.stiffness > 0):
            raise ValueError(f"object {self.object_id}: stiffness must be positive")

    @property
    def length(self) -> float:
        return self.handle_length + self.paddle_length


def random_spec(object_id: int, rng: np.random.Generator) -> ObjectSpec:
    return ObjectSpec(
        object_id=object_id,
        handle_length=float(rng.uniform(0.14, 0.20)),
        handle_radius=float(rng.uniform(0.006, 0.012)),
        paddle_length=float(rng.uniform(0.07, 0.12)),
        paddle_width=float(rng.uniform(0.04, 0.08)),
        paddle_thickness=float(rng.uniform(0.003, 0.008)),
        stiffness=float(rng.uniform(4.0, 10.0)),
    )


@dataclass
class NominalObject:
    spec: ObjectSpec
    mesh: TriangleMesh  # normalised frame
    cloud: np.ndarray  # normalised frame
    face_ids: np.ndarray
    transform: Transform
    ring_z: np.ndarray  # normalised z of each vertex ring
    n_around: int

    @property
    def base_z(self) -> float:
        return float(self.ring_z[0])

    @property
    def length(self) -> float:
        return float(self.ring_z[-1] - self.ring_z[0])


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def utensil_rings(spec: ObjectSpec, n_rings: int = 65, n_around: int = 32) -> np.ndarray:
    """Vertex rings (object frame) of the handle-to-paddle loft, base at z = 0."""
    s = np.linspace(0.0, spec.length, n_rings)
    neck = 0.2 * spec.paddle_length
    blend = _smoothstep((s - spec.handle_length) / neck)
    a = (1 - blend) * spec.handle_radius + blend * spec.paddle_width / 2.0
    b = (1 - blend) * spec.handle_radius + blend * spec.paddle_thickness / 2.0
    p = 2.0 + 2.0 * blend
    tip = 0.3 * spec.paddle_length
    u = np.clip((s - (spec.length - tip)) / tip, 0.0, 1.0)
    a = a * np.maximum(0.35, np.sqrt(1.0 - u**2))
    phi = 2.0 * np.pi * np.arange(n_around) / n_around
    c, sn = np.cos(phi), np.sin(phi)
    ex = 2.0 / p[:, None]
    rings = np.empty((n_rings, n_around, 3))
    rings[:, :, 0] = a[:, None] * np.sign(c) * np.abs(c)[None] ** ex
    rings[:, :, 1] = b[:, None] * np.sign(sn) * np.abs(sn)[None] ** ex
    rings[:, :, 2] = s[:, None]
    return rings


def make_nominal(spec: ObjectSpec, surface_samples: int = 2048, seed: int = 0) -> NominalObject:
    """Watertight utensil mesh plus an area-weighted surface cloud, normalised to the unit cube."""
    if surface_samples < 500:
        raise ValueError(f"surface_samples must be >= 500, got {surface_samples}")
    rings = utensil_rings(spec)
    mesh = loft_mesh(rings, np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, spec.length]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.object_id, 0xC10D]))
    pts, faces, bary = sample_surface(mesh, surface_samples, rng)
    _, transform = normalize_unit_cube(pts)
    mesh_n = mesh.with_vertices(transform.apply(mesh.vertices))
    # Resample from the normalised mesh so every sample lies on it exactly.
    v = mesh_n.vertices[mesh_n.triangles[faces]]
    cloud = np.einsum("ij,ijk->ik", bary, v)
    cloud = np.clip(cloud, -1.0, 1.0).astype(np.float32).astype(np.float64)
    ring_z = transform.apply(rings[:, 0, :])[:, 2]
    return NominalObject(spec, mesh_n, cloud, faces, transform, ring_z, rings.shape[1])


def cantilever_deflection(s, contact_s: float, stiffness: float) -> np.ndarray:
    """Transverse deflection per unit transverse force at arc length ``s``.

    ``s^2 (3 s_c - s) / (6 EI)`` up to the load point, then straight along the
    load-point tangent.
    """
    s = np.maximum(np.asarray(s, dtype=np.float64), 0.0)
    inner = s**2 * (3.0 * contact_s - s) / (6.0 * stiffness)
    outer = contact_s**3 / (3.0 * stiffness) + contact_s**2 / (2.0 * stiffness) * (s - contact_s)
    return np.where(s <= contact_s, inner, outer)


@dataclass
class Deformation:
    cloud: np.ndarray
    mesh: TriangleMesh
    contacts: np.ndarray
    contact_s: float


def transverse(force) -> np.ndarray:
    u = np.asarray(force, dtype=np.float64).reshape(3)
    return np.array([u[0], u[1], 0.0])


def deform_cantilever(
    nominal: NominalObject,
    contact_s: float,
    force,
    contact_vertex: Optional[int] = None,
    n_contacts: int = 3,
) -> Deformation:
    """Bend ``nominal`` under a point load applied at arc length ``contact_s``.

    Contacts are ``n_contacts`` adjacent points of the loaded cross-section,
    centred on ``contact_vertex`` (default: the ring vertex whose direction most
    opposes the transverse force), displaced with the surface.
    """
    if not (0.0 < contact_s <= nominal.length + 1e-12):
        raise ValueError(f"contact arc position {contact_s} outside (0, {nominal.length}]")
    u_perp = transverse(force)

    def displace(points):
        s = points[:, 2] - nominal.base_z
        return points + cantilever_deflection(s, contact_s, nominal.spec.stiffness)[:, None] * u_perp[None]

    # Contacts lie on the vertical ring-to-ring edges at height contact_s.
    z = nominal.base_z + contact_s
    r = int(np.clip(np.searchsorted(nominal.ring_z, z) - 1, 0, len(nominal.ring_z) - 2))
    n = nominal.n_around
    z0, z1 = nominal.ring_z[r], nominal.ring_z[r + 1]
    t = float(np.clip((z - z0) / (z1 - z0), 0.0, 1.0))
    if np.isclose(z, z1, rtol=0, atol=1e-12):
        t = 1.0
    lower = nominal.mesh.vertices[r * n : (r + 1) * n]
    upper = nominal.mesh.vertices[(r + 1) * n : (r + 2) * n]
    ring = lower if t == 0.0 else upper if t == 1.0 else (1 - t) * lower + t * upper
    if contact_vertex is None:
        centre = ring[:, :2].mean(axis=0)
        if np.any(u_perp):
            contact_vertex = int(np.argmin((ring[:, :2] - centre) @ u_perp[:2]))
        else:
            contact_vertex = 0
    offsets = np.arange(n_contacts) - (n_contacts - 1) // 2
    contacts = ring[(contact_vertex + offsets) % n]

    cloud = displace(nominal.cloud)
    mesh = nominal.mesh.with_vertices(displace(nominal.mesh.vertices))
    return Deformation(cloud, mesh, displace(contacts), float(contact_s))


def sample_queries(
    cloud,
    count: int,
    on_surface_fraction: float = 0.5,
    noise_sigma: float = 0.02,
    seed: int = 0,
    normals: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Training queries ``x`` and their exhaustive-scan nearest cloud points ``p*``.

    On-surface queries are cloud points pushed along ``normals`` (isotropically if
    no normals are given) by Gaussian noise; the rest are uniform in [-1, 1]^3.
    Queries are rounded to float32 before the targets are found.
    """
    cloud = as_points(cloud)
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= on_surface_fraction <= 1.0:
        raise ValueError("on_surface_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_on = int(round(count * on_surface_fraction))
    pick = rng.integers(0, len(cloud), size=n_on)
    if normals is None:
        noise = rng.normal(0.0, noise_sigma, size=(n_on, 3)) if noise_sigma > 0 else np.zeros((n_on, 3))
    else:
        mag = rng.normal(0.0, noise_sigma, size=n_on) if noise_sigma > 0 else np.zeros(n_on)
        noise = normals[pick] * mag[:, None]
    on = cloud[pick] + noise
    off = rng.uniform(-1.0, 1.0, size=(count - n_on, 3))
    x = np.concatenate([on, off]).astype(np.float32).astype(np.float64)
    idx, _ = nearest_brute(x, cloud)
    return x, cloud[idx].copy()


# --------------------------------------------------------------------------- dataset


@dataclass
class DeformationSample:
    object_id: int
    deform_id: int
    contacts: np.ndarray
    force: np.ndarray
    cloud: np.ndarray
    queries: np.ndarray
    targets: np.ndarray
    contact_s: float

    @property
    def key(self) -> SampleId:
        return (self.object_id, self.deform_id)

    @property
    def nominal(self) -> bool:
        return not np.any(self.force)


@dataclass
class DatasetConfig:
    n_objects: int = 4
    n_deforms: int = 12
    seed: int = 7
    surface_samples: int = 2048
    queries: int = 2048
    on_surface_fraction: float = 0.5
    noise_sigma: float = 0.02
    force_min: float = 0.05
    force_max: float = 1.0
    axial_damping: float = 0.2
    contact_range: Tuple[float, float] = (0.55, 0.95)

    def __post_init__(self):
        if self.n_objects < 1 or self.n_deforms < 1:
            raise ValueError("need at least one object and one deformation")
        self.contact_range = tuple(self.contact_range)


@dataclass
class Dataset:
    config: DatasetConfig
    specs: List[ObjectSpec]
    nominals: List[NominalObject]
    samples: Dict[SampleId, DeformationSample]

    @property
    def n(self) -> int:
        return len(self.specs)

    @property
    def m(self) -> int:
        return self.config.n_deforms

    def forces(self) -> Dict[SampleId, np.ndarray]:
        return {k: s.force for k, s in self.samples.items()}

    def sample_seed(self, object_id: int, deform_id: int) -> int:
        return sample_seed(self.config.seed, object_id, deform_id)


def sample_seed(master: int, object_id: int, deform_id: int) -> int:
    return int(np.random.SeedSequence([master, object_id, deform_id]).generate_state(1)[0])


def _random_force(rng: np.random.Generator, cfg: DatasetConfig) -> np.ndarray:
    mag = float(np.exp(rng.uniform(np.log(cfg.force_min), np.log(cfg.force_max))))
    v = rng.normal(size=3)
    v[2] *= cfg.axial_damping
    return mag * v / np.linalg.norm(v)


def make_sample(nominal: NominalObject, deform_id: int, cfg: DatasetConfig) -> DeformationSample:
    rng = np.random.default_rng(sample_seed(cfg.seed, nominal.spec.object_id, deform_id))
    lo, hi = cfg.contact_range
    s_rings = nominal.ring_z - nominal.base_z
    eligible = np.flatnonzero((s_rings >= lo * nominal.length) & (s_rings <= hi * nominal.length))
    ring = int(rng.choice(eligible))
    if deform_id == 0:
        force = np.zeros(3)
        vertex = int(rng.integers(nominal.n_around))
    else:
        force = _random_force(rng, cfg).astype(np.float32).astype(np.float64)
        vertex = None
    deform = deform_cantilever(nominal, float(s_rings[ring]), force, contact_vertex=vertex)
    cloud = deform.cloud.astype(np.float32).astype(np.float64)
    normals = deform.mesh.face_normals()[nominal.face_ids]
    x, p = sample_queries(
        cloud, cfg.queries, cfg.on_surface_fraction, cfg.noise_sigma, seed=int(rng.integers(2**63)), normals=normals
    )
    return DeformationSample(
        nominal.spec.object_id,
        deform_id,
        deform.contacts.astype(np.float32).astype(np.float64),
        force,
        cloud,
        x,
        p,
        deform.contact_s,
    )


def generate_dataset(cfg: DatasetConfig, specs: Optional[Sequence[ObjectSpec]] = None) -> Dataset:
    if specs is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EC5]))
        specs = [random_spec(i, rng) for i in range(cfg.n_objects)]
    specs = list(specs)
    if len(specs) != cfg.n_objects:
        raise ValueError(f"config asks for {cfg.n_objects} objects, got {len(specs)} specs")
    nominals = [make_nominal(s, cfg.surface_samples, cfg.seed) for s in specs]
    samples = {}
    for nom in nominals:
        for j in range(cfg.n_deforms + 1):
            smp = make_sample(nom, j, cfg)
            samples[smp.key] = smp
    return Dataset(cfg, specs, nominals, samples)


# --------------------------------------------------------------------------- splits


@dataclass
class ExperimentSplit:
    name: str
    train_ids: List[SampleId]
    test_ids: List[SampleId]
    k: Optional[int] = None
    params: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "train_ids": [list(t) for t in self.train_ids],
            "test_ids": [list(t) for t in self.test_ids],
            "k": self.k,
            "params": self.params,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentSplit":
        return cls(
            d["name"],
            [tuple(t) for t in d["train_ids"]],
            [tuple(t) for t in d["test_ids"]],
            d.get("k"),
            d.get("params", {}),
        )


def default_withhold(m: int) -> int:
    # 5 of 24 in the original protocol, i.e. roughly a fifth.
    return max(1, int(round(m * 5 / 24)))


def make_split(
    dataset: Union[Dataset, Mapping[SampleId, np.ndarray]],
    protocol: str,
    seed: int = 0,
    withhold: Optional[int] = None,
    target: Optional[int] = None,
    k: Optional[int] = None,
) -> ExperimentSplit:
    """Build the train/test partition for one experiment protocol.

    ``dataset`` may also be a plain ``{(object, deform): force}`` mapping. Samples
    with a zero force are nominal and always train.
    """
    forces = dataset.forces() if isinstance(dataset, Dataset) else dict(dataset)
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    keys = sorted(forces)
    objects = sorted({o for o, _ in keys})
    nominal = [key for key in keys if not np.any(forces[key])]
    deformed = {o: [key for key in keys if key[0] == o and np.any(forces[key])] for o in objects}
    rng = np.random.default_rng(seed)
    test: List[SampleId] = []
    params: dict = {"seed": seed}

    if protocol == "known":
        return ExperimentSplit(protocol, list(keys), list(keys), params=params)

    if protocol in ("random", "lowest", "highest"):
        m_min = min(len(v) for v in deformed.values())
        withhold = default_withhold(m_min) if withhold is None else int(withhold)
        if not 0 < withhold < m_min:
            raise ValueError(f"withhold must be in [1, {m_min - 1}], got {withhold}")
        params["withhold"] = withhold
        for o in objects:
            ids = deformed[o]
            if protocol == "random":
                chosen = [ids[i] for i in rng.choice(len(ids), size=withhold, replace=False)]
            else:
                order = sorted(ids, key=lambda key: (float(np.linalg.norm(forces[key])), key[1]))
                chosen = order[:withhold] if protocol == "lowest" else order[-withhold:]
            test.extend(chosen)
    elif protocol == "direction":
        test = [key for o in objects for key in deformed[o] if forces[key][1] > 0]
    else:
        target = objects[-1] if target is None else int(target)
        if target not in deformed:
            raise ValueError(f"target object {target} not in dataset")
        m = len(deformed[target])
        if protocol == "no_deformed":
            k = 0
        if k is None or not 0 <= int(k) < m:
            raise ValueError(f"k must be in [0, {m - 1}], got {k}")
        k = int(k)
        # One permutation per seed, so larger k keeps the smaller k's samples.
        order = [deformed[target][i] for i in rng.permutation(m)]
        test = order[k:]
        params.update(target=target, k=k)

    test_set = set(test)
    train = [key for key in keys if key not in test_set]
    return ExperimentSplit(protocol, train, sorted(test), k=k if protocol in ("no_deformed", "k_deformed") else None, params=params)


# --------------------------------------------------------------------------- IO


def _sample_stem(o: int, d: int) -> str:
    return f"{o:03d}_{d:03d}"


def save_dataset(dataset: Dataset, root) -> None:
    """Write the dataset directory (see README for the layout)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    splits = {}
    for protocol in PROTOCOLS:
        kwargs = {"k": 1} if protocol == "k_deformed" else {}
        try:
            splits[protocol] = make_split(dataset, protocol, seed=cfg.seed, **kwargs).to_json()
        except ValueError as exc:
            splits[protocol] = {"error": str(exc)}
    manifest = {
        "version": FORMAT_VERSION,
        "n": dataset.n,
        "m": dataset.m,
        "config": asdict(cfg),
        "specs": [asdict(s) for s in dataset.specs],
        "seeds": {_sample_stem(*k): dataset.sample_seed(*k) for k in sorted(dataset.samples)},
        "normalisation": {str(n.spec.object_id): n.transform.to_json() for n in dataset.nominals},
        "splits": splits,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    for nom in dataset.nominals:
        write_ply(root / f"{nom.spec.object_id:03d}_nominal.ply", nom.mesh)
    for key in sorted(dataset.samples):
        smp = dataset.samples[key]
        stem = _sample_stem(*key)
        write_point_cloud(root / f"{stem}.pc", smp.cloud, source=f"object {key[0]} deform {key[1]}")
        qry = np.concatenate([smp.queries, smp.targets], axis=1).astype("<f4")
        (root / f"{stem}.qry").write_bytes(qry.tobytes())
        meta = {
            "object_id": key[0],
            "deform_id": key[1],
            "force": smp.force.tolist(),
            "contacts": smp.contacts.tolist(),
            "contact_s": smp.contact_s,
            "nominal": smp.nominal,
            "cloud_count": len(smp.cloud),
            "query_count": len(smp.queries),
        }
        (root / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported dataset version {manifest.get('version')}")
    cfg = DatasetConfig(**manifest["config"])
    specs = [ObjectSpec(**s) for s in manifest["specs"]]
    # Nominal geometry is a pure function of (spec, seed); rebuild instead of storing rings.
    nominals = [make_nominal(s, cfg.surface_samples, cfg.seed) for s in specs]
    samples = {}
    for o in range(len(specs)):
        for d in range(cfg.n_deforms + 1):
            stem = _sample_stem(o, d)
            meta = json.loads((root / f"{stem}.json").read_text())
            cloud = read_point_cloud(root / f"{stem}.pc", meta["cloud_count"])
            qry = np.frombuffer((root / f"{stem}.qry").read_bytes(), dtype="<f4").reshape(-1, 6).astype(np.float64)
            samples[(o, d)] = DeformationSample(
                o,
                d,
                np.asarray(meta["contacts"], dtype=np.float64),
                np.asarray(meta["force"], dtype=np.float64),
                cloud,
                qry[:, :3].copy(),
                qry[:, 3:].copy(),
                float(meta["contact_s"]),
            )
    return Dataset(cfg, specs, nominals, samples)
