"""Space-time potential with a two-layer ResNet and a quadratic block.

    phi(s) = omega . N(s) + 0.5 |A s|^2 + b . s + c,   s = (x, t)
    u0 = sigma(K0 s + b0),  N(s) = u0 + sigma(K1 u0 + b1)

The particle velocity is ``-grad_x phi``. The gradient and the trace of the
spatial Hessian are written out in closed form so they can be recorded on
the tape with first-order ops only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PARAM_NAMES = ("omega", "K0", "b0", "K1", "b1", "A", "b", "c")


def param_shapes(d: int, m: int) -> dict[str, tuple[int, int]]:
    return {
        "omega": (1, m),
        "K0": (m, d + 1),
        "b0": (1, m),
        "K1": (m, m),
        "b1": (1, m),
        "A": (d, d + 1),  # rank r = d
        "b": (1, d + 1),
        "c": (1, 1),
    }


def init_params(d: int, m: int = 32, seed: int = 0) -> dict[str, np.ndarray]:
    """Identity-flow initialisation: omega, A, b, c are zero so phi == 0."""
    if d < 1 or m < 1:
        raise ValueError("d and m must be positive")
    rng = np.random.default_rng(seed)
    shapes = param_shapes(d, m)
    bound = 1.0 / np.sqrt(m)
    params = {k: np.zeros(s) for k, s in shapes.items()}
    params["K0"] = rng.uniform(-bound, bound, size=shapes["K0"])
    params["K1"] = rng.uniform(-bound, bound, size=shapes["K1"])
    return params


def random_params(d: int, m: int, seed: int, scale: float = 0.5) -> dict[str, np.ndarray]:
    """Dense random parameters (every block nonzero), for testing."""
    rng = np.random.default_rng(seed)
    return {k: scale * rng.standard_normal(s) for k, s in param_shapes(d, m).items()}


def infer_dims(params: dict) -> tuple[int, int]:
    m, d1 = ad.value_of(params["K0"]).shape
    return d1 - 1, m


def validate_params(params: dict, d: int | None = None, m: int | None = None) -> None:
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)}")
    pd, pm = infer_dims(params)
    if d is not None and d != pd:
        raise ValueError(f"parameters are for d={pd}, expected d={d}")
    if m is not None and m != pm:
        raise ValueError(f"parameters are for width m={pm}, expected m={m}")
    for name, shape in param_shapes(pd, pm).items():
        got = ad.value_of(params[name]).shape
        if got != shape:
            raise ValueError(f"parameter {name} has shape {got}, expected {shape}")


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(params[k], dtype=float).ravel() for k in PARAM_NAMES])


def unflatten(vec: np.ndarray, d: int, m: int) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in param_shapes(d, m).items():
        size = shape[0] * shape[1]
        out[name] = np.asarray(vec[pos : pos + size], dtype=float).reshape(shape).copy()
        pos += size
    if pos != vec.size:
        raise ValueError(f"vector has {vec.size} entries, expected {pos}")
    return out


@dataclass
class Potential:
    """Parameters plus the slices reused by every evaluation.

    Works with ndarray parameters (plain numpy) or with :class:`Var` leaves,
    in which case every evaluation is recorded on their tape.
    """

    params: dict
    d: int
    m: int

    def __post_init__(self):
        validate_params(self.params)
        p, d = self.params, self.d
        self.omega = p["omega"]
        self.K1 = p["K1"]
        self.K1_T = ad.transpose(p["K1"])
        self.b0, self.b1 = p["b0"], p["b1"]
        self.c = p["c"]
        self.K0x = ad.slice_cols(p["K0"], 0, d)  # (m, d)
        self.K0x_T = ad.transpose(self.K0x)
        self.k0t = ad.transpose(ad.slice_cols(p["K0"], d, d + 1))  # (1, m)
        self.Ax = ad.slice_cols(p["A"], 0, d)  # (d, d)
        self.Ax_T = ad.transpose(self.Ax)
        self.at = ad.transpose(ad.slice_cols(p["A"], d, d + 1))  # (1, d)
        self.bx_T = ad.transpose(ad.slice_cols(p["b"], 0, d))  # (d, 1)
        self.bx = ad.slice_cols(p["b"], 0, d)
        self.bt = ad.slice_cols(p["b"], d, d + 1)
        self._trace_cache = None

    @classmethod
    def from_params(cls, params: dict) -> Potential:
        d, m = infer_dims(params)
        return cls(params, d, m)

    def _check_x(self, x):
        shape = ad.value_of(x).shape
        if len(shape) != 2 or shape[1] != self.d:
            raise ad.ShapeError(f"positions must have shape (n, {self.d}), got {shape}")

    def _forward(self, x, t: float):
        self._check_x(x)
        z0 = x @ self.K0x_T + (self.k0t * float(t) + self.b0)
        u0, tanh0 = ad.sigma_tanh(z0)
        z1 = u0 @ self.K1_T + self.b1
        s1, tanh1 = ad.sigma_tanh(z1)
        u1 = u0 + s1
        a_s = x @ self.Ax_T + self.at * float(t)  # rows of A s, (n, d)
        return tanh0, tanh1, u1, a_s

    def _phi(self, x, t, u1, a_s):
        lin = x @ self.bx_T + (self.bt * float(t) + self.c)
        return u1 @ ad.transpose(self.omega) + 0.5 * ad.sqnorm(a_s, axis=1) + lin

    def phi(self, x, t: float):
        """phi at each row of ``x`` (shape ``(n, 1)``)."""
        _, _, u1, a_s = self._forward(x, t)
        return self._phi(x, t, u1, a_s)

    def phi_grad(self, x, t: float):
        """phi and its spatial gradient ``(n, d)``."""
        tanh0, tanh1, u1, a_s = self._forward(x, t)
        g0 = self.omega + (tanh1 * self.omega) @ self.K1
        grad = (tanh0 * g0) @ self.K0x + a_s @ self.Ax + self.bx
        return self._phi(x, t, u1, a_s), grad

    def phi_grad_trace(self, x, t: float):
        """phi, spatial gradient and trace of the spatial Hessian ``(n, 1)``."""
        tanh0, tanh1, u1, a_s = self._forward(x, t)
        g0 = self.omega + (tanh1 * self.omega) @ self.K1
        h0 = tanh0 * g0
        grad = h0 @ self.K0x + a_s @ self.Ax + self.bx
        phi = self._phi(x, t, u1, a_s)

        if self._trace_cache is None:
            colsq = ad.transpose(ad.sqnorm(self.K0x_T, axis=0))  # (m, 1)
            rows = [ad.transpose(ad.slice_cols(self.K0x, k, k + 1)) for k in range(self.d)]
            self._trace_cache = (colsq, rows, ad.sqnorm(self.Ax))
        colsq, k0_rows, quad = self._trace_cache

        tr = ((1.0 - tanh0 * tanh0) * g0) @ colsq
        dw = (1.0 - tanh1 * tanh1) * self.omega
        for row in k0_rows:
            jk = (tanh0 * row) @ self.K1_T
            tr = tr + ad.sum(dw * ad.square(jk), axis=1)
        return phi, grad, tr + quad

    def grad_s(self, x, t: float):
        """Full space-time gradient ``(n, d + 1)``; the last column is d/dt."""
        tanh0, tanh1, u1, a_s = self._forward(x, t)
        g0 = self.omega + (tanh1 * self.omega) @ self.K1
        h0 = tanh0 * g0
        gx = h0 @ self.K0x + a_s @ self.Ax + self.bx
        gt = h0 @ ad.transpose(self.k0t) + a_s @ ad.transpose(self.at) + self.bt
        return np.hstack([ad.value_of(gx), ad.value_of(gt)])


def eval_phi(s, params: dict) -> np.ndarray:
    """phi at space-time points ``s`` of shape ``(n, d + 1)``; numpy only."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    pot = Potential.from_params(params)
    out = np.empty((s.shape[0], 1))
    for i, row in enumerate(s):
        out[i] = pot.phi(row[None, : pot.d], row[pot.d])
    return out


def grad_phi(s, params: dict) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=float))
    pot = Potential.from_params(params)
    return np.vstack([pot.grad_s(row[None, : pot.d], row[pot.d]) for row in s])


def trace_hessian(s, params: dict) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=float))
    pot = Potential.from_params(params)
    return np.vstack([pot.phi_grad_trace(row[None, : pot.d], row[pot.d])[2] for row in s])
