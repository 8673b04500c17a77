"""Random Fourier feature barrier functions and the robust barrier terms.

``h(x) = <phi(x), theta>`` with ``phi_i(x) = sqrt(2/l) cos(<x, w_i> + b_i)``.
All vector norms are Euclidean, which is self-dual.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .models import MeasurementModel, SystemModel

FORMAT_TAG = "rocbf-barrier v1"


@dataclass(frozen=True)
class RobustnessConsts:
    lbar1: float = 1.0
    lbar2: float = 0.5
    lbar3: float = 0.5

    def __post_init__(self):
        if min(self.lbar1, self.lbar2, self.lbar3) <= 0:
            raise ValueError("robustness constants must be positive")


@dataclass(frozen=True)
class BTerms:
    b1: float
    b2: np.ndarray
    b3: float

    def B(self, u) -> float:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(self.b1 + self.b2 @ u + self.b3 * np.linalg.norm(u))


@dataclass(frozen=True, eq=False)
class RffBarrier:
    W: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    sigma2: float = 1.0
    alpha_slope: float = 1.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if W.shape[0] < 1:
            raise ValueError("need at least one feature")
        if b.shape[0] != W.shape[0] or theta.shape[0] != W.shape[0]:
            raise ValueError("W, b and theta disagree on the feature count")
        if self.sigma2 <= 0 or self.alpha_slope <= 0:
            raise ValueError("sigma2 and alpha_slope must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", theta)

    @property
    def ell(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def scale(self) -> float:
        return float(np.sqrt(2.0 / self.ell))

    @classmethod
    def sample(
        cls,
        n: int,
        ell: int,
        sigma2: float = 1.0,
        alpha_slope: float = 1.0,
        seed: int = 0,
        freq_scale=None,
    ) -> "RffBarrier":
        """Draw ``w_i ~ N(0, sigma2 diag(freq_scale)^2)`` and ``b_i ~ U[0, 2pi)``.

        ``freq_scale`` defaults to ones (isotropic Gaussian kernel); a zero
        entry makes ``h`` independent of that state coordinate.
        """
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((ell, n)) * np.sqrt(sigma2)
        if freq_scale is not None:
            W = W * np.asarray(freq_scale, dtype=float).reshape(1, n)
        b = rng.uniform(0.0, 2.0 * np.pi, size=ell)
        return cls(W=W, b=b, theta=np.zeros(ell), sigma2=sigma2, alpha_slope=alpha_slope)

    def with_theta(self, theta) -> "RffBarrier":
        return replace(self, theta=np.array(theta, dtype=float))

    def alpha(self, r):
        return self.alpha_slope * r


def _state(x, bar: RffBarrier) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != bar.n:
        raise ValueError(f"state has length {x.shape[-1]}, barrier expects {bar.n}")
    return x


def features(x, bar: RffBarrier) -> np.ndarray:
    """Feature vector ``phi(x)``; a batch ``(N, n)`` gives ``(N, l)``."""
    x = _state(x, bar)
    return bar.scale * np.cos(x @ bar.W.T + bar.b)


def feature_jacobian(x, bar: RffBarrier) -> np.ndarray:
    """``D phi(x)`` of shape ``(l, n)`` (or ``(N, l, n)`` for a batch)."""
    x = _state(x, bar)
    s = -bar.scale * np.sin(x @ bar.W.T + bar.b)
    return s[..., :, None] * bar.W


def eval_h(x, bar: RffBarrier):
    out = features(x, bar) @ bar.theta
    return float(out) if np.ndim(out) == 0 else out


def grad_h(x, bar: RffBarrier) -> np.ndarray:
    x = _state(x, bar)
    s = -bar.scale * np.sin(x @ bar.W.T + bar.b)
    return (s * bar.theta) @ bar.W


def compute_b_terms(x, t: float, sys: SystemModel, bar: RffBarrier, w=None) -> BTerms:
    x = _state(x, bar)
    g = grad_h(x, bar)
    gn = float(np.linalg.norm(g))
    b1 = float(g @ sys.F(x, t, w)) + bar.alpha(eval_h(x, bar)) - gn * sys.dF(x, t)
    b2 = sys.G(x, t, w).T @ g
    b3 = -gn * sys.dG(x, t)
    return BTerms(b1=b1, b2=b2, b3=b3)


def measurement_penalty(u, y, meas: MeasurementModel, consts: RobustnessConsts) -> float:
    un = float(np.linalg.norm(np.atleast_1d(u)))
    return (consts.lbar1 + (consts.lbar2 + consts.lbar3) * un) * meas.dX(y)


def eval_q(
    u,
    y,
    t: float,
    sys: SystemModel,
    meas: MeasurementModel,
    bar: RffBarrier,
    consts: RobustnessConsts,
    w=None,
) -> float:
    """Robust barrier constraint value; ``q >= 0`` certifies ``u`` as safe."""
    bt = compute_b_terms(meas.X(y), t, sys, bar, w)
    return bt.B(u) - measurement_penalty(u, y, meas, consts)


def grad_q_theta(
    u,
    y,
    t: float,
    sys: SystemModel,
    meas: MeasurementModel,
    bar: RffBarrier,
    consts: RobustnessConsts,
    w=None,
) -> np.ndarray:
    """A subgradient of ``q`` with respect to ``theta``.

    ``grad h`` is linear in ``theta``, so the ``-||grad h||`` terms contribute
    ``-c J (grad h / ||grad h||)``; at ``grad h = 0`` the zero subgradient is used.
    """
    x = meas.X(y)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    J = feature_jacobian(x, bar)
    drift = sys.F(x, t, w) + sys.G(x, t, w) @ u
    out = J @ drift + bar.alpha_slope * features(x, bar)
    g = J.T @ bar.theta
    gn = np.linalg.norm(g)
    if gn > 0:
        rob = sys.dF(x, t) + sys.dG(x, t) * np.linalg.norm(u)
        out = out - rob * (J @ (g / gn))
    return out


def b_terms_batch(X, t: float, sys: SystemModel, bar: RffBarrier, w=None):
    """Vectorised ``(b1, b2, b3)`` for states ``X`` of shape ``(N, n)``."""
    X = np.atleast_2d(_state(X, bar))
    arg = X @ bar.W.T + bar.b
    h = (bar.scale * np.cos(arg)) @ bar.theta
    gh = (-bar.scale * np.sin(arg) * bar.theta) @ bar.W
    gn = np.linalg.norm(gh, axis=1)
    F = sys.F_batch(X, t, w)
    G = sys.G_batch(X, t, w)
    b1 = np.einsum("ni,ni->n", gh, F) + bar.alpha(h) - gn * sys.dF_batch(X, t)
    b2 = np.einsum("nim,ni->nm", G, gh)
    b3 = -gn * sys.dG_batch(X, t)
    return b1, b2, b3


def q_batch(u, Ys, t: float, sys, meas, bar, consts, w=None) -> np.ndarray:
    """``eval_q`` for a fixed input over many outputs ``Ys`` of shape ``(N, p)``."""
    Ys = np.atleast_2d(np.asarray(Ys, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    un = float(np.linalg.norm(u))
    b1, b2, b3 = b_terms_batch(meas.X_batch(Ys), t, sys, bar, w)
    pen = (consts.lbar1 + (consts.lbar2 + consts.lbar3) * un) * meas.dX_batch(Ys)
    return b1 + b2 @ u + b3 * un - pen


# ---------------------------------------------------------------------------
# serialization


def save_barrier(path, bar: RffBarrier, consts: Optional[RobustnessConsts] = None) -> None:
    """Write a self-describing text file; floats use ``repr`` so they round-trip."""
    consts = consts or RobustnessConsts()

    def row(vals):
        return " ".join(repr(float(v)) for v in np.asarray(vals).ravel())

    lines = [
        f"# {FORMAT_TAG}",
        f"n {bar.n}",
        f"ell {bar.ell}",
        f"sigma2 {bar.sigma2!r}",
        f"alpha_slope {bar.alpha_slope!r}",
        f"lbar1 {consts.lbar1!r}",
        f"lbar2 {consts.lbar2!r}",
        f"lbar3 {consts.lbar3!r}",
        f"W {row(bar.W)}",
        f"b {row(bar.b)}",
        f"theta {row(bar.theta)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_barrier(path) -> tuple[RffBarrier, RobustnessConsts]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != f"# {FORMAT_TAG}":
        raise ValueError(f"{path}: not a barrier file")
    fields = {}
    for line in text[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest
    n, ell = int(fields["n"]), int(fields["ell"])

    def arr(key):
        return np.array([float(v) for v in fields[key].split()], dtype=float)

    bar = RffBarrier(
        W=arr("W").reshape(ell, n),
        b=arr("b"),
        theta=arr("theta"),
        sigma2=float(fields["sigma2"]),
        alpha_slope=float(fields["alpha_slope"]),
    )
    consts = RobustnessConsts(
        float(fields["lbar1"]), float(fields["lbar2"]), float(fields["lbar3"])
    )
    return bar, consts
