"""Lifting dictionaries: ordered stacks of scalar observables.

A :class:`Dictionary` maps a state (or delay-embedded output) vector of length
``input_dim`` to a lifted vector of length ``N``.  Evaluation is vectorized
over samples: passing an array of shape ``(input_dim, K)`` returns
``(N, K)``, one sample per column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

KINDS = (
    "coordinate",
    "thin_plate_rbf",
    "gauss_rbf",
    "monomial",
    "elementwise_square",
    "shifted_product",
    "constant",
    "custom",
)


@dataclass(frozen=True)
class BasisFn:
    """One lifting function.

    Only the parameters relevant to ``kind`` are used:

    ``coordinate``          x[index]
    ``thin_plate_rbf``      r**2 log r with r = |x - center|, 0 at the center
    ``gauss_rbf``           exp(-(r / width)**2)
    ``monomial``            prod x**exponents
    ``elementwise_square``  x[index]**2
    ``shifted_product``     x[index] * x[(index + shift) mod n]
    ``constant``            1
    ``custom``              fn(x) for a user callable (not serializable)
    """

    kind: str
    index: int = 0
    center: Optional[tuple] = None
    width: float = 1.0
    exponents: Optional[tuple] = None
    shift: int = 1
    fn: Optional[Callable] = field(default=None, compare=False)
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis function kind {self.kind!r}")
        if self.kind in ("thin_plate_rbf", "gauss_rbf") and self.center is None:
            raise ValueError(f"{self.kind} requires a center")
        if self.kind == "gauss_rbf" and not self.width > 0:
            raise ValueError("gauss_rbf width must be positive")
        if self.kind == "monomial":
            if self.exponents is None or any(
                    int(e) != e or e < 0 for e in self.exponents):
                raise ValueError(
                    "monomial exponents must be nonnegative integers")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom basis function requires a callable")

    @classmethod
    def coordinate(cls, index):
        return cls("coordinate", index=int(index))

    @classmethod
    def thin_plate(cls, center):
        return cls("thin_plate_rbf",
                   center=tuple(float(c) for c in center))

    @classmethod
    def gauss(cls, center, width):
        return cls("gauss_rbf", center=tuple(float(c) for c in center),
                   width=float(width))

    @classmethod
    def monomial(cls, exponents):
        return cls("monomial", exponents=tuple(int(e) for e in exponents))

    @classmethod
    def square(cls, index):
        return cls("elementwise_square", index=int(index))

    @classmethod
    def shifted(cls, index, shift=1):
        return cls("shifted_product", index=int(index), shift=int(shift))

    @classmethod
    def const(cls):
        return cls("constant")

    @classmethod
    def custom(cls, fn, name=""):
        return cls("custom", fn=fn, name=name or getattr(fn, "__name__", ""))


def thin_plate(r2):
    """Thin-plate kernel in terms of the squared distance, 0 where r2 == 0."""
    r2 = np.asarray(r2, dtype=float)
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


def _sq_dist(centers, X):
    # centers (p, n), X (n, K) -> (p, K); direct differences keep r2 >= 0
    # exactly and exactly 0 at a center.
    r2 = np.zeros((centers.shape[0], X.shape[1]))
    for d in range(X.shape[0]):
        r2 += (centers[:, d, None] - X[d, None, :]) ** 2
    return r2


class Dictionary:
    """Immutable ordered list of :class:`BasisFn` over ``input_dim`` inputs.

    Parameters
    ----------
    input_dim : int
        Dimension of the vectors being lifted.
    functions : sequence of BasisFn
        Lifting functions, in output order.
    """

    def __init__(self, input_dim: int, functions: Sequence[BasisFn]):
        input_dim = int(input_dim)
        functions = tuple(functions)
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(functions) < 1:
            raise ValueError("a dictionary needs at least one function")
        for f in functions:
            if f.kind in ("coordinate", "elementwise_square",
                          "shifted_product") and not 0 <= f.index < input_dim:
                raise ValueError(f"index {f.index} out of range for {f.kind}")
            if f.center is not None and len(f.center) != input_dim:
                raise ValueError("center length must equal input_dim")
            if f.exponents is not None and len(f.exponents) != input_dim:
                raise ValueError("monomial length must equal input_dim")
        self._input_dim = input_dim
        self._functions = functions
        self._plan = self._compile()

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def functions(self) -> tuple:
        return self._functions

    @property
    def N(self) -> int:
        return len(self._functions)

    def __len__(self):
        return len(self._functions)

    @property
    def includes_state_prefix(self) -> bool:
        """True when the first ``input_dim`` outputs are the coordinates."""
        n = self._input_dim
        if len(self._functions) < n:
            return False
        return all(f.kind == "coordinate" and f.index == i
                   for i, f in enumerate(self._functions[:n]))

    @property
    def serializable(self) -> bool:
        return all(f.kind != "custom" for f in self._functions)

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return (self._input_dim == other._input_dim
                and self._functions == other._functions)

    def __repr__(self):
        return f"Dictionary(input_dim={self._input_dim}, N={self.N})"

    def _compile(self):
        groups = {}
        for row, f in enumerate(self._functions):
            groups.setdefault(f.kind, []).append((row, f))
        plan = []
        for kind, items in groups.items():
            rows = np.array([r for r, _ in items], dtype=int)
            fs = [f for _, f in items]
            if kind in ("coordinate", "elementwise_square"):
                plan.append((kind, rows, np.array([f.index for f in fs])))
            elif kind == "shifted_product":
                idx = np.array([f.index for f in fs])
                other = (idx + np.array([f.shift for f in fs])) % self._input_dim
                plan.append((kind, rows, (idx, other)))
            elif kind == "thin_plate_rbf":
                plan.append((kind, rows, np.array([f.center for f in fs])))
            elif kind == "gauss_rbf":
                plan.append((kind, rows, (np.array([f.center for f in fs]),
                                          np.array([f.width for f in fs]))))
            elif kind == "monomial":
                plan.append((kind, rows,
                             np.array([f.exponents for f in fs], dtype=int)))
            elif kind == "constant":
                plan.append((kind, rows, None))
            else:
                plan.append((kind, rows, [f.fn for f in fs]))
        return plan

    def __call__(self, x) -> np.ndarray:
        """Evaluate the stack on one vector ``(n,)`` or samples ``(n, K)``."""
        X = np.asarray(x, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] != self._input_dim:
            raise ValueError(
                f"expected input of dimension {self._input_dim}, "
                f"got shape {np.shape(x)}")
        if not np.all(np.isfinite(X)):
            raise ValueError("dictionary input must be finite")
        K = X.shape[1]
        out = np.empty((self.N, K))
        for kind, rows, p in self._plan:
            if kind == "coordinate":
                out[rows] = X[p]
            elif kind == "elementwise_square":
                out[rows] = X[p] ** 2
            elif kind == "shifted_product":
                out[rows] = X[p[0]] * X[p[1]]
            elif kind == "thin_plate_rbf":
                out[rows] = thin_plate(_sq_dist(p, X))
            elif kind == "gauss_rbf":
                out[rows] = np.exp(-_sq_dist(p[0], X) / p[1][:, None] ** 2)
            elif kind == "monomial":
                out[rows] = np.prod(X[None, :, :] ** p[:, :, None], axis=1)
            elif kind == "constant":
                out[rows] = 1.0
            else:
                for row, fn in zip(rows, p):
                    out[row] = [fn(X[:, j]) for j in range(K)]
        return out[:, 0] if single else out

    def extended(self, functions: Iterable[BasisFn],
                 prepend: bool = False) -> "Dictionary":
        """Return a new dictionary with ``functions`` added."""
        functions = tuple(functions)
        fs = functions + self._functions if prepend else \
            self._functions + functions
        return Dictionary(self._input_dim, fs)

    # -- serialization -------------------------------------------------

    def to_records(self) -> list:
        """One plain record per function; decimals at 17 significant digits."""
        if not self.serializable:
            raise ValueError("dictionaries with custom functions cannot be "
                             "serialized")
        recs = []
        for f in self._functions:
            rec = {"kind": f.kind}
            if f.kind in ("coordinate", "elementwise_square"):
                rec["index"] = f.index
            elif f.kind == "shifted_product":
                rec["index"] = f.index
                rec["shift"] = f.shift
            elif f.kind == "thin_plate_rbf":
                rec["center"] = format_decimals(f.center)
            elif f.kind == "gauss_rbf":
                rec["center"] = format_decimals(f.center)
                rec["width"] = format(f.width, ".17g")
            elif f.kind == "monomial":
                rec["exponents"] = ",".join(str(e) for e in f.exponents)
            recs.append(rec)
        return recs

    @classmethod
    def from_records(cls, input_dim: int, records: list) -> "Dictionary":
        fs = []
        for rec in records:
            kind = rec["kind"]
            if kind == "coordinate":
                fs.append(BasisFn.coordinate(rec["index"]))
            elif kind == "elementwise_square":
                fs.append(BasisFn.square(rec["index"]))
            elif kind == "shifted_product":
                fs.append(BasisFn.shifted(rec["index"], rec["shift"]))
            elif kind == "thin_plate_rbf":
                fs.append(BasisFn.thin_plate(parse_decimals(rec["center"])))
            elif kind == "gauss_rbf":
                fs.append(BasisFn.gauss(parse_decimals(rec["center"]),
                                        float(rec["width"])))
            elif kind == "monomial":
                fs.append(BasisFn.monomial(
                    int(e) for e in rec["exponents"].split(",")))
            elif kind == "constant":
                fs.append(BasisFn.const())
            else:
                raise ValueError(f"cannot deserialize basis kind {kind!r}")
        return cls(input_dim, fs)


def format_decimals(values) -> str:
    return ",".join(format(float(v), ".17g") for v in values)


def parse_decimals(text: str) -> tuple:
    return tuple(float(t) for t in text.split(","))


# -- constructors -------------------------------------------------------

def identity_dictionary(n: int) -> Dictionary:
    return Dictionary(n, [BasisFn.coordinate(i) for i in range(n)])


def sample_centers(box, count: int, seed: int) -> np.ndarray:
    """Uniform samples from an axis-aligned box, shape ``(count, n)``.

    Uses numpy's PCG64 generator seeded with ``seed`` so that centers are
    reproducible across runs and platforms.
    """
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("box must be a sequence of (low, high) pairs")
    lo, hi = box[:, 0], box[:, 1]
    if np.any(~(hi > lo)):
        raise ValueError("box is empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    return lo + (hi - lo) * rng.random((count, box.shape[0]))


def make_rbf_dictionary(n: int, count: int, box=None, seed: int = 0,
                        kind: str = "thin_plate_rbf",
                        width: float = 1.0) -> Dictionary:
    """Coordinates ``x_1..x_n`` followed by ``count`` random-center RBFs.

    Examples
    --------
    >>> make_rbf_dictionary(2, 100, [(-1, 1)] * 2, seed=0).N
    102
    """
    if box is None:
        box = [(-1.0, 1.0)] * n
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.shape[0] != n:
        raise ValueError("box must have one interval per dimension")
    if count < 0:
        raise ValueError("count must be nonnegative")
    fs = [BasisFn.coordinate(i) for i in range(n)]
    centers = sample_centers(box, count, seed)
    if kind == "thin_plate_rbf":
        fs += [BasisFn.thin_plate(c) for c in centers]
    elif kind == "gauss_rbf":
        fs += [BasisFn.gauss(c, width) for c in centers]
    else:
        raise ValueError(f"unsupported rbf kind {kind!r}")
    return Dictionary(n, fs)


def make_kdv_dictionary(n: int = 128) -> Dictionary:
    """State, elementwise squares, periodic neighbour products, constant."""
    if n < 2:
        raise ValueError("n must be at least 2")
    fs = [BasisFn.coordinate(i) for i in range(n)]
    fs += [BasisFn.square(i) for i in range(n)]
    fs += [BasisFn.shifted(i, 1) for i in range(n)]
    fs.append(BasisFn.const())
    return Dictionary(n, fs)


def make_polynomial_dictionary(n: int, degree: int) -> Dictionary:
    """Coordinates then all monomials of total degree 2..degree."""
    from itertools import combinations_with_replacement

    fs = [BasisFn.coordinate(i) for i in range(n)]
    for d in range(2, degree + 1):
        for combo in combinations_with_replacement(range(n), d):
            exps = [0] * n
            for i in combo:
                exps[i] += 1
            fs.append(BasisFn.monomial(exps))
    return Dictionary(n, fs)


# -- delay embedding ----------------------------------------------------

@dataclass(frozen=True)
class DelayVector:
    """Stacked output/input history ``[y_nd, u_nd-1, y_nd-1, ..., u_0, y_0]``."""

    n_d: int
    n_h: int
    m: int
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != delay_length(self.n_d, self.n_h, self.m):
            raise ValueError("delay vector length mismatch")

    def split(self):
        """Recover ``(y_history, u_history)``, newest first."""
        return split_delay(self.values, self.n_d, self.n_h, self.m)


def delay_length(n_d: int, n_h: int, m: int) -> int:
    return (n_d + 1) * n_h + n_d * m


def make_delay_vector(y_history, u_history) -> DelayVector:
    """Interleave newest-first output and input histories.

    ``y_history`` holds ``n_d + 1`` outputs and ``u_history`` ``n_d`` inputs.
    """
    ys = [np.atleast_1d(np.asarray(y, dtype=float)) for y in y_history]
    us = [np.atleast_1d(np.asarray(u, dtype=float)) for u in u_history]
    if len(ys) < 1 or len(us) != len(ys) - 1:
        raise ValueError("need n_d + 1 outputs and n_d inputs")
    n_h = ys[0].size
    m = us[0].size if us else 0
    if any(y.size != n_h for y in ys) or any(u.size != m for u in us):
        raise ValueError("inconsistent history entry sizes")
    parts = [ys[0]]
    for u, y in zip(us, ys[1:]):
        parts += [u, y]
    return DelayVector(len(us), n_h, m, np.concatenate(parts))


def split_delay(values, n_d: int, n_h: int, m: int):
    values = np.asarray(values, dtype=float)
    ys, us = [values[:n_h]], []
    pos = n_h
    for _ in range(n_d):
        us.append(values[pos:pos + m])
        ys.append(values[pos + m:pos + m + n_h])
        pos += m + n_h
    return ys, us
