"""Finite factorized hypothesis classes ``b(x, u) = h(x) * g(u)``.

A :class:`FactorizedClass` holds ``m`` feature maps and ``k`` link maps. Its
evaluation matrix at predictions ``f`` has row ``i`` equal to
``kron(h(x_i), g(f_i))``, so the column for ``(h_a, g_b)`` (zero-based) is
``a * k + b``.
"""

import configparser
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numlin
from ._validation import as_matrix, as_vector, check_same_length
from .exceptions import ContractError

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class FeatureMap:
    """A map R^d -> R identified by ``kind`` and its parameters.

    kinds: ``constant`` (value), ``coordinate`` (j), ``threshold`` (j, tau),
    giving 1[x_j >= tau].
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        arity = {"constant": 1, "coordinate": 1, "threshold": 2}
        if self.kind not in arity:
            raise ContractError(f"unknown feature map kind {self.kind!r}")
        if len(self.params) != arity[self.kind]:
            raise ContractError(f"feature map {self.kind!r} takes {arity[self.kind]} parameter(s)")

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "constant":
            return np.full(X.shape[0], float(self.params[0]))
        j = int(self.params[0])
        if j < 0 or j >= X.shape[1]:
            raise ContractError(f"{self.describe()} needs column {j}, X has {X.shape[1]} columns")
        if self.kind == "coordinate":
            return X[:, j].copy()
        return (X[:, j] >= float(self.params[1])).astype(np.float64)

    def describe(self):
        if self.kind == "constant":
            return f"constant value={self.params[0]!r}"
        if self.kind == "coordinate":
            return f"coordinate j={int(self.params[0])}"
        return f"threshold j={int(self.params[0])} tau={self.params[1]!r}"


@dataclass(frozen=True)
class LinkMap:
    """A map R -> R on predictions, with a declared Lipschitz constant.

    kinds and parameters:

    - ``constant`` (value), Lipschitz 0
    - ``identity``, Lipschitz 1
    - ``affine`` (slope, intercept), Lipschitz |slope|
    - ``clamp`` (lo, hi): ``clip(u, lo, hi)``, Lipschitz 1
    - ``hinge`` (knot): ``max(0, u - knot)``, Lipschitz 1
    - ``tanh`` (scale): ``tanh(scale * u)``, Lipschitz |scale|
    - ``indicator`` (tau): ``1[u >= tau]``, not Lipschitz (``lipschitz is None``)
    """

    kind: str
    params: tuple = ()

    _ARITY = {"constant": 1, "identity": 0, "affine": 2, "clamp": 2, "hinge": 1, "tanh": 1, "indicator": 1}

    def __post_init__(self):
        if self.kind not in self._ARITY:
            raise ContractError(f"unknown link map kind {self.kind!r}")
        if len(self.params) != self._ARITY[self.kind]:
            raise ContractError(f"link map {self.kind!r} takes {self._ARITY[self.kind]} parameter(s)")
        if self.kind == "clamp" and not float(self.params[0]) <= float(self.params[1]):
            raise ContractError("clamp link needs lo <= hi")

    @property
    def lipschitz(self):
        k, p = self.kind, self.params
        if k == "constant":
            return 0.0
        if k in ("identity", "clamp", "hinge"):
            return 1.0
        if k == "affine":
            return abs(float(p[0]))
        if k == "tanh":
            return abs(float(p[0]))
        return None

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        k, p = self.kind, self.params
        if k == "constant":
            return np.full(u.shape, float(p[0]))
        if k == "identity":
            return u.copy()
        if k == "affine":
            return float(p[0]) * u + float(p[1])
        if k == "clamp":
            return np.clip(u, float(p[0]), float(p[1]))
        if k == "hinge":
            return np.maximum(0.0, u - float(p[0]))
        if k == "tanh":
            return np.tanh(float(p[0]) * u)
        return (u >= float(p[0])).astype(np.float64)

    def describe(self):
        names = {
            "constant": ("value",),
            "identity": (),
            "affine": ("slope", "intercept"),
            "clamp": ("lo", "hi"),
            "hinge": ("knot",),
            "tanh": ("scale",),
            "indicator": ("tau",),
        }[self.kind]
        parts = [self.kind] + [f"{n}={v!r}" for n, v in zip(names, self.params)]
        L = self.lipschitz
        parts.append("lipschitz=none" if L is None else f"lipschitz={L!r}")
        return " ".join(parts)

    def spot_check_lipschitz(self, lo, hi, n_grid=201):
        """Largest observed |g(u)-g(v)|/|u-v| on a grid over [lo, hi]."""
        grid = np.linspace(lo, hi, n_grid)
        vals = self(grid)
        du = np.abs(grid[:, None] - grid[None, :])
        dg = np.abs(vals[:, None] - vals[None, :])
        mask = du > 0
        return float(np.max(dg[mask] / du[mask])) if mask.any() else 0.0


@dataclass(frozen=True)
class FactorizedClass:
    h_maps: tuple
    g_maps: tuple
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "h_maps", tuple(self.h_maps))
        object.__setattr__(self, "g_maps", tuple(self.g_maps))
        if not self.h_maps or not self.g_maps:
            raise ContractError("a factorized class needs at least one feature map and one link map")

    @property
    def m(self):
        return len(self.h_maps)

    @property
    def k(self):
        return len(self.g_maps)

    @property
    def p(self):
        return self.m * self.k

    @property
    def is_lipschitz(self):
        return all(g.lipschitz is not None for g in self.g_maps)

    def eval_H(self, X):
        X = as_matrix(X, "X")
        H = np.column_stack([h(X) for h in self.h_maps])
        _check_finite(H, self.h_maps, "feature")
        return H

    def eval_G(self, f):
        f = as_vector(f, "f")
        G = np.column_stack([g(f) for g in self.g_maps])
        _check_finite(G, self.g_maps, "link")
        return G

    def column_labels(self):
        return [f"{h.describe()} | {g.describe()}" for h in self.h_maps for g in self.g_maps]


def _check_finite(M, maps, what):
    bad = ~np.isfinite(M)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ContractError(f"{what} map {maps[col].describe()!r} is non-finite at row {row}")


def eval_B(hclass, X, f):
    """Evaluation matrix B(f), n x p, rows ``kron(h(x_i), g(f_i))``."""
    X = as_matrix(X, "X")
    f = as_vector(f, "f")
    check_same_length(("X.rows", X), ("f", f))
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are reported by the map checks
        H = hclass.eval_H(X)
        G = hclass.eval_G(f)
    n = X.shape[0]
    if hclass.p > n:
        warnings.warn(
            f"hypothesis class has p={hclass.p} > n={n}; the projector may be (close to) the identity",
            stacklevel=2,
        )
    with np.errstate(over="ignore"):
        B = (H[:, :, None] * G[:, None, :]).reshape(n, hclass.p)
    if not np.all(np.isfinite(B)):
        row, col = np.argwhere(~np.isfinite(B))[0]
        raise ContractError(f"B(f) overflows at row {row}, column {col}")
    return B


def bound_LB(hclass, X):
    """Upper bound on the Lipschitz constant of f -> B(f) (spectral norm)."""
    if not hclass.is_lipschitz:
        bad = [g.describe() for g in hclass.g_maps if g.lipschitz is None]
        raise ContractError(f"link maps without a Lipschitz constant: {bad}")
    H = hclass.eval_H(X)
    max_h = float(np.max(np.linalg.norm(H, axis=1)))
    L_G = max(g.lipschitz for g in hclass.g_maps)
    return max_h * math.sqrt(hclass.k) * L_G


def bound_LA(L_B, delta, M):
    """Lipschitz bound for the projector A(f) given B's Lipschitz constant, sigma_min and norm."""
    if not delta > 0:
        raise ContractError(f"delta must be positive, got {delta}")
    if M < delta:
        raise ContractError(f"M={M} must be at least delta={delta}")
    if L_B < 0:
        raise ContractError(f"L_B must be nonnegative, got {L_B}")
    return (2.0 / delta) * (1.0 + GOLDEN * M * M / (delta * delta)) * L_B


def measured_lipschitz_A(hclass, X, u, v, rank_tol=numlin.DEFAULT_RANK_TOL):
    """``||A(u) - A(v)||_2 / ||u - v||_2`` for A(f) = B(f) B(f)^+."""
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    check_same_length(("u", u), ("v", v))
    d = float(np.linalg.norm(u - v))
    if d == 0.0:
        raise ContractError("u and v must differ")
    Qu = numlin.column_basis(eval_B(hclass, X, u), rank_tol)
    Qv = numlin.column_basis(eval_B(hclass, X, v), rank_tol)
    return numlin.projector_distance(Qu, Qv) / d


# --- built-in classes -------------------------------------------------------


def mean_class():
    """h = 1, g = 1: the projection is onto constants."""
    return FactorizedClass((FeatureMap("constant", (1.0,)),), (LinkMap("constant", (1.0,)),), name="mean")


def _feature_maps(X, n_thresholds, coordinates):
    X = as_matrix(X, "X")
    maps = [FeatureMap("constant", (1.0,))]
    cols = range(X.shape[1]) if coordinates is None else coordinates
    for j in cols:
        maps.append(FeatureMap("coordinate", (int(j),)))
        if n_thresholds:
            qs = np.quantile(X[:, j], np.linspace(0, 1, n_thresholds + 2)[1:-1])
            for tau in np.unique(qs):
                maps.append(FeatureMap("threshold", (int(j), float(tau))))
    return maps


def intercept_slope_class(X, n_thresholds=0, coordinates=None):
    """g in {1, u}; h in {1, coordinates, quantile threshold indicators}."""
    return FactorizedClass(
        _feature_maps(X, n_thresholds, coordinates),
        (LinkMap("constant", (1.0,)), LinkMap("identity")),
        name="intercept-slope",
    )


def clamped_link_class(X, f, n_knots=3, n_thresholds=0, coordinates=None):
    """g in {1, clamp pieces at prediction quantiles}: Lipschitz with constant 1."""
    f = as_vector(f, "f")
    knots = np.unique(np.quantile(f, np.linspace(0, 1, n_knots + 2)))
    links = [LinkMap("constant", (1.0,))]
    for lo, hi in zip(knots[:-1], knots[1:]):
        links.append(LinkMap("clamp", (float(lo), float(hi))))
    return FactorizedClass(_feature_maps(X, n_thresholds, coordinates), links, name="clamped")


# --- plain-text descriptors -------------------------------------------------

_H_PARAMS = {"constant": ("value",), "coordinate": ("j",), "threshold": ("j", "tau")}
_G_PARAMS = {
    "constant": ("value",),
    "identity": (),
    "affine": ("slope", "intercept"),
    "clamp": ("lo", "hi"),
    "hinge": ("knot",),
    "tanh": ("scale",),
    "indicator": ("tau",),
}


def _parse_descriptor(text, table):
    tokens = text.split()
    if not tokens:
        raise ContractError("empty map descriptor")
    kind, kv = tokens[0], {}
    for tok in tokens[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ContractError(f"malformed token {tok!r} in descriptor {text!r}")
        kv[key] = val
    if kind not in table:
        raise ContractError(f"unknown map kind {kind!r}")
    try:
        params = tuple(int(kv[n]) if n == "j" else float(kv[n]) for n in table[kind])
    except KeyError as exc:
        raise ContractError(f"descriptor {text!r} is missing parameter {exc.args[0]!r}") from None
    return kind, params, kv


def class_to_config(hclass, section="hypothesis_class"):
    cp = configparser.ConfigParser()
    cp[section] = {"name": hclass.name}
    for i, h in enumerate(hclass.h_maps):
        cp[section][f"h.{i}"] = h.describe()
    for j, g in enumerate(hclass.g_maps):
        cp[section][f"g.{j}"] = g.describe()
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def class_from_config(text, section="hypothesis_class"):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if section not in cp:
        raise ContractError(f"no [{section}] section in class descriptor")
    sec = cp[section]
    h_keys = sorted((k for k in sec if k.startswith("h.")), key=lambda k: int(k[2:]))
    g_keys = sorted((k for k in sec if k.startswith("g.")), key=lambda k: int(k[2:]))
    h_maps = []
    for k in h_keys:
        kind, params, _ = _parse_descriptor(sec[k], _H_PARAMS)
        h_maps.append(FeatureMap(kind, params))
    g_maps = []
    for k in g_keys:
        kind, params, kv = _parse_descriptor(sec[k], _G_PARAMS)
        link = LinkMap(kind, params)
        declared = kv.get("lipschitz")
        if declared is not None and declared != "none" and link.lipschitz is not None:
            if not math.isclose(float(declared), link.lipschitz, rel_tol=1e-12, abs_tol=1e-15):
                raise ContractError(f"declared lipschitz={declared} disagrees with {link.describe()!r}")
        g_maps.append(link)
    return FactorizedClass(h_maps, g_maps, name=sec.get("name", "custom"))
