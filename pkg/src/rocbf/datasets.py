"""Safe/unsafe datasets built from expert demonstrations.

Boundary points of the projected demonstrations are found by counting reverse
k-nearest neighbours; points with few of them are relabelled as unsafe. Safe
points too close to the unsafe ones are then dropped to leave a buffer in
which the barrier can change sign.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .models import MeasurementModel

_CHUNK = 256


@dataclass(frozen=True)
class DemoRecord:
    u: np.ndarray
    y: np.ndarray
    t: float
    # exogenous signal seen by the model at this record (path turn rate)
    w: Optional[float] = None


@dataclass(frozen=True)
class BpdConfig:
    k: int = 200
    eta: Optional[int] = None
    fraction: Optional[float] = 0.40

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.eta is None and self.fraction is None:
            raise ValueError("give either eta or a target fraction")
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")


@dataclass
class DatasetBundle:
    z_dyn: list[DemoRecord]
    z_safe: np.ndarray
    z_unsafe: np.ndarray
    z_safe_buffered: np.ndarray
    eps: float
    eps_n: float
    sigma_layer: float
    eps_bar: float
    # state coordinates in which distances are measured
    coords: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z_safe = np.asarray(self.z_safe, dtype=float)
        self.z_unsafe = np.asarray(self.z_unsafe, dtype=float)
        self.z_safe_buffered = np.asarray(self.z_safe_buffered, dtype=float)


def _as_points(points) -> np.ndarray:
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    return P


def _project(points, coords) -> np.ndarray:
    P = _as_points(points)
    if coords is None or len(coords) == 0:
        return P
    return P[:, list(coords)]


def project_safe(z_dyn: Sequence[DemoRecord], meas: MeasurementModel) -> np.ndarray:
    if len(z_dyn) == 0:
        return np.zeros((0, meas.n))
    return np.array([meas.X(r.y) for r in z_dyn])


def knn_indices(points, k: int) -> np.ndarray:
    """Exact k nearest neighbours of every point, excluding the point itself.

    Distance ties are broken by ascending index. Rows are returned as index
    sets (sorted by index, not by distance).
    """
    P = _as_points(points)
    N = P.shape[0]
    if N <= k:
        raise ValueError(f"need more than k={k} points, got {N}")
    out = np.empty((N, k), dtype=np.int64)
    for i0 in range(0, N, _CHUNK):
        i1 = min(N, i0 + _CHUNK)
        Dm = cdist(P[i0:i1], P)
        rows = np.arange(i1 - i0)
        Dm[rows, i0 + rows] = np.inf
        part = np.argpartition(Dm, k - 1, axis=1)
        dk = Dm[rows, part[:, k - 1]][:, None]
        less = Dm < dk
        eq = Dm == dk
        need = k - less.sum(axis=1, keepdims=True)
        take = less | (eq & (np.cumsum(eq, axis=1) <= need))
        out[i0:i1] = np.nonzero(take)[1].reshape(i1 - i0, k)
    return out


def reverse_knn_counts(knn: np.ndarray, N: int) -> np.ndarray:
    return np.bincount(knn.ravel(), minlength=N)


def _eta_for_fraction(counts: np.ndarray, fraction: float) -> int:
    need = int(np.ceil(fraction * counts.shape[0] - 1e-12))
    return int(np.sort(counts)[max(need, 1) - 1])


def boundary_point_detection(points, cfg: BpdConfig, return_counts: bool = False):
    """Boolean mask of boundary points (``RkNN_i <= eta``)."""
    P = _as_points(points)
    knn = knn_indices(P, cfg.k)
    counts = reverse_knn_counts(knn, P.shape[0])
    eta = cfg.eta if cfg.eta is not None else _eta_for_fraction(counts, cfg.fraction)
    mask = counts <= eta
    if return_counts:
        return mask, counts, eta, knn
    return mask


def augment_unsafe(
    points, boundary_mask, knn: np.ndarray, sigma_layer: float, copies: int = 2, seed: int = 0
) -> np.ndarray:
    """Jittered copies of boundary points pushed away from their neighbours.

    The outward direction of a boundary point is the unit vector from the mean
    of its k nearest neighbours to the point; magnitudes are uniform in
    ``(0, sigma_layer]``.
    """
    P = _as_points(points)
    idx = np.flatnonzero(boundary_mask)
    if copies <= 0 or idx.size == 0:
        return np.zeros((0, P.shape[1]))
    rng = np.random.default_rng(seed)
    out = np.empty((idx.size * copies, P.shape[1]))
    for j, i in enumerate(idx):
        d = P[i] - P[knn[i]].mean(axis=0)
        nrm = np.linalg.norm(d)
        if nrm == 0.0:
            d = rng.standard_normal(P.shape[1])
            nrm = np.linalg.norm(d)
        d = d / nrm
        mags = sigma_layer * (1.0 - rng.uniform(0.0, 1.0, size=copies))
        out[j * copies:(j + 1) * copies] = P[i] + mags[:, None] * d
    return out


def min_distances(points, reference) -> np.ndarray:
    """Distance from each point to its closest reference point."""
    P, R = _as_points(points), _as_points(reference)
    out = np.empty(P.shape[0])
    for i0 in range(0, P.shape[0], _CHUNK):
        out[i0:i0 + _CHUNK] = cdist(P[i0:i0 + _CHUNK], R).min(axis=1)
    return out


def buffered_mask(z_safe, z_unsafe, gamma_safe, gamma_unsafe, l_h) -> np.ndarray:
    if l_h <= 0:
        raise ValueError("l_h must be positive")
    S = _as_points(z_safe)
    if len(z_unsafe) == 0 or S.shape[0] == 0:
        return np.ones(S.shape[0], dtype=bool)
    threshold = (gamma_safe + gamma_unsafe) / l_h
    return min_distances(S, z_unsafe) >= threshold


def build_buffered_safe(z_safe, z_unsafe, gamma_safe, gamma_unsafe, l_h) -> np.ndarray:
    """Safe points at least ``(gamma_safe + gamma_unsafe) / l_h`` from every unsafe point."""
    S = _as_points(z_safe)
    return S[buffered_mask(S, z_unsafe, gamma_safe, gamma_unsafe, l_h)]


def nearest_neighbor_distances(points) -> np.ndarray:
    P = _as_points(points)
    if P.shape[0] < 2:
        raise ValueError("need at least two points")
    out = np.empty(P.shape[0])
    for i0 in range(0, P.shape[0], _CHUNK):
        i1 = min(P.shape[0], i0 + _CHUNK)
        Dm = cdist(P[i0:i1], P)
        rows = np.arange(i1 - i0)
        Dm[rows, i0 + rows] = np.inf
        out[i0:i1] = Dm.min(axis=1)
    return out


def estimate_eps(points, mode: str = "max") -> float:
    """Covering-radius proxy: max (or mean) distance to the nearest other point."""
    d = nearest_neighbor_distances(points)
    if mode == "max":
        return float(d.max())
    if mode == "mean":
        return float(d.mean())
    raise ValueError(f"unknown mode {mode!r}")


def compute_eps_bar(eps: float, meas: MeasurementModel, outputs=None) -> float:
    """Output-space net radius ``Lip_Y * (eps + max delta_x)``.

    The sup of ``delta_x`` is taken from the model when it is known in closed
    form, otherwise it is sampled over ``outputs``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if meas.delta_x_max is not None:
        dmax = meas.delta_x_max
    elif outputs is not None and len(outputs):
        dmax = max(meas.dX(y) for y in outputs)
    else:
        raise ValueError("no way to bound delta_x: pass sample outputs")
    return meas.lip_y_bound * (eps + dmax)


def thin_records(z_dyn: Sequence[DemoRecord], meas: MeasurementModel, coords, cell: float, seed: int = 0):
    """Keep one demonstration per grid cell of the projected states.

    The representative of a cell is chosen by a seeded random order, so no
    time window of the demonstrations is preferred. Returns kept indices in
    ascending order.
    """
    if cell <= 0 or len(z_dyn) == 0:
        return np.arange(len(z_dyn))
    Z = _project(project_safe(z_dyn, meas), coords)
    keys = np.floor(Z / cell).astype(np.int64)
    order = np.random.default_rng(seed).permutation(len(z_dyn))
    _, first = np.unique(keys[order], axis=0, return_index=True)
    return np.sort(order[first])


def subsample_indices(n: int, size: int, seed: int = 0) -> np.ndarray:
    """Uniform random subset of ``range(n)`` in ascending order; keeps the
    relative density of the data, unlike grid thinning."""
    if size >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


def build_bundle(
    z_dyn: Sequence[DemoRecord],
    meas: MeasurementModel,
    bpd: BpdConfig,
    gamma_safe: float,
    gamma_unsafe: float,
    l_h: float,
    sigma_layer: float = 0.05,
    augment_copies: int = 2,
    coords: Optional[Sequence[int]] = None,
    thin_cell: float = 0.0,
    max_points: Optional[int] = None,
    seed: int = 0,
) -> DatasetBundle:
    """Construct every dataset needed for training and verification."""
    n = meas.n
    coords = tuple(range(n)) if not coords else tuple(int(c) for c in coords)
    keep = thin_records(z_dyn, meas, coords, thin_cell, seed)
    if max_points is not None and len(keep) > max_points:
        keep = keep[subsample_indices(len(keep), max_points, seed)]
    z_dyn = [z_dyn[i] for i in keep]
    states = project_safe(z_dyn, meas)
    Zp = states[:, list(coords)]
    mask, counts, eta, knn = boundary_point_detection(Zp, bpd, return_counts=True)

    extra = augment_unsafe(Zp, mask, knn, sigma_layer, augment_copies, seed)
    # lift the jittered points back to full states: untouched coordinates are
    # copied from the boundary point they came from
    src = np.repeat(np.flatnonzero(mask), augment_copies) if augment_copies > 0 else np.zeros(0, int)
    lifted = states[src].copy()
    if extra.shape[0]:
        lifted[:, list(coords)] = extra
    z_unsafe = np.vstack([states[mask], lifted]) if lifted.size else states[mask]
    z_safe = states[~mask]
    bmask = buffered_mask(z_safe[:, list(coords)], z_unsafe[:, list(coords)], gamma_safe, gamma_unsafe, l_h)
    z_buf = z_safe[bmask]

    eps = estimate_eps(z_safe[:, list(coords)]) if len(z_safe) > 1 else float("inf")
    eps_n = estimate_eps(z_unsafe[:, list(coords)]) if len(z_unsafe) > 1 else float("inf")
    eps_bar = compute_eps_bar(eps, meas, [r.y for r in z_dyn])
    meta = dict(
        n_demos=len(z_dyn),
        n_boundary=int(mask.sum()),
        n_augmented=int(extra.shape[0]),
        eta=int(eta),
        k=bpd.k,
        l_h=l_h,
        thin_cell=thin_cell,
        max_points=max_points,
        eps_mean=estimate_eps(z_safe[:, list(coords)], "mean") if len(z_safe) > 1 else None,
        eps_n_mean=estimate_eps(z_unsafe[:, list(coords)], "mean") if len(z_unsafe) > 1 else None,
    )
    return DatasetBundle(
        z_dyn=z_dyn,
        z_safe=z_safe,
        z_unsafe=z_unsafe,
        z_safe_buffered=z_buf,
        eps=eps,
        eps_n=eps_n,
        sigma_layer=sigma_layer,
        eps_bar=eps_bar,
        coords=coords,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# persistence


def save_demos(path, z_dyn: Sequence[DemoRecord]) -> None:
    """Columnar text: ``t u_1..u_m y_1..y_p w`` per line, with a header row."""
    if len(z_dyn) == 0:
        raise ValueError("no demonstrations to write")
    m, p = len(np.atleast_1d(z_dyn[0].u)), len(z_dyn[0].y)
    header = ["t"] + [f"u{i}" for i in range(m)] + [f"y{i}" for i in range(p)] + ["w"]
    lines = ["# rocbf-demos v1", " ".join(header)]
    for r in z_dyn:
        vals = [r.t, *np.atleast_1d(r.u), *r.y, np.nan if r.w is None else r.w]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path) -> list[DemoRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "# rocbf-demos v1":
        raise ValueError(f"{path}: not a demonstration file")
    header = lines[1].split()
    m = sum(h.startswith("u") for h in header)
    p = sum(h.startswith("y") for h in header)
    data = np.array([[float(v) for v in ln.split()] for ln in lines[2:] if ln.strip()])
    out = []
    for row in data:
        w = row[1 + m + p]
        out.append(
            DemoRecord(u=row[1:1 + m].copy(), y=row[1 + m:1 + m + p].copy(), t=float(row[0]),
                       w=None if np.isnan(w) else float(w))
        )
    return out


def save_bundle(path, bundle: DatasetBundle) -> None:
    """JSON with the point sets (as nested lists) and all radii."""
    doc = dict(
        format="rocbf-bundle v1",
        n=int(bundle.z_safe.shape[1]) if bundle.z_safe.ndim == 2 else 0,
        eps=bundle.eps,
        eps_n=bundle.eps_n,
        sigma_layer=bundle.sigma_layer,
        eps_bar=bundle.eps_bar,
        coords=list(bundle.coords),
        meta=bundle.meta,
        z_safe=bundle.z_safe.tolist(),
        z_unsafe=bundle.z_unsafe.tolist(),
        z_safe_buffered=bundle.z_safe_buffered.tolist(),
        z_dyn=[
            dict(t=r.t, u=np.atleast_1d(r.u).tolist(), y=np.asarray(r.y).tolist(), w=r.w)
            for r in bundle.z_dyn
        ],
    )
    Path(path).write_text(json.dumps(doc))


def load_bundle(path) -> DatasetBundle:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "rocbf-bundle v1":
        raise ValueError(f"{path}: not a dataset bundle")
    z_dyn = [DemoRecord(u=np.array(r["u"]), y=np.array(r["y"]), t=r["t"], w=r["w"]) for r in doc["z_dyn"]]

    n = doc["n"]

    def pts(key):
        return np.array(doc[key], dtype=float).reshape(-1, n)

    return DatasetBundle(
        z_dyn=z_dyn,
        z_safe=pts("z_safe"),
        z_unsafe=pts("z_unsafe"),
        z_safe_buffered=pts("z_safe_buffered"),
        eps=doc["eps"],
        eps_n=doc["eps_n"],
        sigma_layer=doc["sigma_layer"],
        eps_bar=doc["eps_bar"],
        coords=tuple(doc["coords"]),
        meta=doc["meta"],
    )
