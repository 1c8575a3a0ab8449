"""Exact frontdoor adjustment on small discrete structural causal models.

Graph: C -> X -> M -> Y <- C, with C unobserved.  The confounder can be given
directly or factored as D -> O -> X and D -> I -> Y; the factored form is
collapsed to a composite C = (D, O, I).

All quantities are exact sums over conditional probability tables, so these
functions serve as a ground-truth oracle rather than an estimator from
samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_DOMAIN = 4
MAX_ASSIGNMENTS = 10**6
ROW_TOL = 1e-12


class SCMError(ValueError):
    pass


class EstimationError(ValueError):
    pass


def _check_cpt(name, table, parents_shape, size):
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (*parents_shape, size):
        raise SCMError(f"{name}: shape {table.shape}, expected {(*parents_shape, size)}")
    if (table < 0).any():
        raise SCMError(f"{name}: negative entries")
    bad = np.abs(table.sum(axis=-1) - 1.0) > ROW_TOL
    if bad.any():
        raise SCMError(f"{name}: row {tuple(np.argwhere(bad)[0])} does not sum to 1")
    return table


@dataclass(frozen=True, eq=False)
class DiscreteSCM:
    p_c: np.ndarray  # (C,)
    p_x_given_c: np.ndarray  # (C, X)
    p_m_given_x: np.ndarray  # (X, M)
    p_y_given_mc: np.ndarray  # (M, C, Y)

    def __post_init__(self):
        nc = np.shape(self.p_c)[0]
        nx = np.shape(self.p_x_given_c)[-1]
        nm = np.shape(self.p_m_given_x)[-1]
        ny = np.shape(self.p_y_given_mc)[-1]
        for var, n in (("X", nx), ("M", nm), ("Y", ny)):
            if not 1 <= n <= MAX_DOMAIN:
                raise SCMError(f"domain of {var} has size {n}, allowed 1..{MAX_DOMAIN}")
        if not 1 <= nc <= MAX_DOMAIN**3:
            raise SCMError(f"confounder domain size {nc} out of range")
        if nc * nx * nm * ny > MAX_ASSIGNMENTS:
            raise SCMError("assignment space too large for exhaustive enumeration")
        object.__setattr__(self, "p_c", _check_cpt("P(C)", self.p_c, (), nc))
        object.__setattr__(self, "p_x_given_c", _check_cpt("P(X|C)", self.p_x_given_c, (nc,), nx))
        object.__setattr__(self, "p_m_given_x", _check_cpt("P(M|X)", self.p_m_given_x, (nx,), nm))
        object.__setattr__(self, "p_y_given_mc",
                           _check_cpt("P(Y|M,C)", self.p_y_given_mc, (nm, nc), ny))

    @property
    def sizes(self) -> dict[str, int]:
        return {"C": len(self.p_c), "X": self.p_x_given_c.shape[1],
                "M": self.p_m_given_x.shape[1], "Y": self.p_y_given_mc.shape[2]}


@dataclass(frozen=True, eq=False)
class FactoredSCM:
    """D -> O -> X -> M -> Y and D -> I -> Y."""

    p_d: np.ndarray  # (D,)
    p_o_given_d: np.ndarray  # (D, O)
    p_i_given_d: np.ndarray  # (D, I)
    p_x_given_o: np.ndarray  # (O, X)
    p_m_given_x: np.ndarray  # (X, M)
    p_y_given_mi: np.ndarray  # (M, I, Y)

    def __post_init__(self):
        nd = np.shape(self.p_d)[0]
        no = np.shape(self.p_o_given_d)[-1]
        ni = np.shape(self.p_i_given_d)[-1]
        nx = np.shape(self.p_x_given_o)[-1]
        nm = np.shape(self.p_m_given_x)[-1]
        ny = np.shape(self.p_y_given_mi)[-1]
        for var, n in zip("DOIXMY", (nd, no, ni, nx, nm, ny)):
            if not 1 <= n <= MAX_DOMAIN:
                raise SCMError(f"domain of {var} has size {n}, allowed 1..{MAX_DOMAIN}")
        for attr, name, parents, size in (
            ("p_d", "P(D)", (), nd), ("p_o_given_d", "P(O|D)", (nd,), no),
            ("p_i_given_d", "P(I|D)", (nd,), ni), ("p_x_given_o", "P(X|O)", (no,), nx),
            ("p_m_given_x", "P(M|X)", (nx,), nm), ("p_y_given_mi", "P(Y|M,I)", (nm, ni), ny),
        ):
            object.__setattr__(self, attr, _check_cpt(name, getattr(self, attr), parents, size))

    def to_monolithic(self) -> DiscreteSCM:
        nd, no = self.p_o_given_d.shape
        ni = self.p_i_given_d.shape[1]
        nc = nd * no * ni
        p_c = np.einsum("d,do,di->doi", self.p_d, self.p_o_given_d, self.p_i_given_d).reshape(nc)
        p_x_c = np.broadcast_to(self.p_x_given_o[None, :, None, :],
                                (nd, no, ni, self.p_x_given_o.shape[1])).reshape(nc, -1)
        nm, _, ny = self.p_y_given_mi.shape
        p_y_mc = np.broadcast_to(self.p_y_given_mi[:, None, None, :, :],
                                 (nm, nd, no, ni, ny)).reshape(nm, nc, ny)
        return DiscreteSCM(p_c, np.ascontiguousarray(p_x_c), self.p_m_given_x,
                           np.ascontiguousarray(p_y_mc))


def observational_joint(scm: DiscreteSCM) -> np.ndarray:
    """P(c, x, m, y) = P(c) P(x|c) P(m|x) P(y|m,c), shape (C, X, M, Y)."""
    return np.einsum("c,cx,xm,mcy->cxmy", scm.p_c, scm.p_x_given_c, scm.p_m_given_x,
                     scm.p_y_given_mc)


def _check_x(x0, nx):
    if not (isinstance(x0, (int, np.integer)) and 0 <= x0 < nx):
        raise ValueError(f"x0={x0!r} outside X's domain 0..{nx - 1}")


def interventional_truth(scm: DiscreteSCM, x0: int) -> np.ndarray:
    """P(y | do(x0)) = sum_{c,m} P(c) P(m|x0) P(y|m,c); the X mechanism is cut."""
    _check_x(x0, scm.p_x_given_c.shape[1])
    return np.einsum("c,m,mcy->y", scm.p_c, scm.p_m_given_x[x0], scm.p_y_given_mc)


def _xmy(joint) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim == 4:
        joint = joint.sum(axis=0)
    if joint.ndim != 3:
        raise ValueError(f"expected a joint over (X, M, Y) or (C, X, M, Y), got {joint.shape}")
    return joint


def frontdoor_estimate(joint, x0: int) -> np.ndarray:
    """sum_m P(m|x0) sum_x P(y|m,x) P(x), from the (X, M, Y) joint alone.

    A 4-d (C, X, M, Y) array is accepted and C is summed out first.
    """
    p = _xmy(joint)
    nx = p.shape[0]
    _check_x(x0, nx)
    p_xm = p.sum(axis=2)
    p_x = p_xm.sum(axis=1)
    if p_x[x0] <= 0:
        raise EstimationError(f"P(X={x0}) = 0")
    p_m_given_x0 = p_xm[x0] / p_x[x0]
    out = np.zeros(p.shape[2])
    for m in np.flatnonzero(p_m_given_x0 > 0):
        inner = np.zeros(p.shape[2])
        for x in range(nx):
            if p_x[x] <= 0:
                raise EstimationError(f"P(X={x}) = 0 in the adjustment sum")
            if p_xm[x, m] <= 0:
                raise EstimationError(f"P(X={x}, M={m}) = 0: P(Y|M={m},X={x}) undefined")
            inner += p[x, m] / p_xm[x, m] * p_x[x]
        out += p_m_given_x0[m] * inner
    return out


def naive_conditional(joint, x0: int) -> np.ndarray:
    """P(y | x0) by plain conditioning (biased under confounding)."""
    p = _xmy(joint)
    _check_x(x0, p.shape[0])
    p_y_x = p[x0].sum(axis=0)
    total = p_y_x.sum()
    if total <= 0:
        raise EstimationError(f"P(X={x0}) = 0")
    return p_y_x / total


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# constructors


def _random_rows(rng, shape, size, floor):
    if floor * size >= 1:
        raise SCMError(f"floor {floor} infeasible for domain size {size}")
    raw = rng.dirichlet(np.ones(size), size=shape)
    return floor + (1 - floor * size) * raw


def random_scm(rng: np.random.Generator, sizes=None, floor: float = 0.05) -> DiscreteSCM:
    """Random CPTs with every entry >= ``floor``; sizes default to random in {2, 3}."""
    if sizes is None:
        sizes = dict(zip("CXMY", rng.integers(2, 4, size=4)))
    nc, nx, nm, ny = (int(sizes[v]) for v in "CXMY")
    return DiscreteSCM(
        _random_rows(rng, (), nc, floor),
        _random_rows(rng, (nc,), nx, floor),
        _random_rows(rng, (nx,), nm, floor),
        _random_rows(rng, (nm, nc), ny, floor),
    )


def random_factored_scm(rng: np.random.Generator, sizes=None, floor: float = 0.05) -> FactoredSCM:
    if sizes is None:
        sizes = dict(zip("DOIXMY", rng.integers(2, 4, size=6)))
    nd, no, ni, nx, nm, ny = (int(sizes[v]) for v in "DOIXMY")
    return FactoredSCM(
        _random_rows(rng, (), nd, floor), _random_rows(rng, (nd,), no, floor),
        _random_rows(rng, (nd,), ni, floor), _random_rows(rng, (no,), nx, floor),
        _random_rows(rng, (nx,), nm, floor), _random_rows(rng, (nm, ni), ny, floor),
    )


def confounded_scm() -> DiscreteSCM:
    """Binary SCM where C drives both X and Y strongly, so P(y|x) != P(y|do(x))."""
    p_c = np.array([0.5, 0.5])
    p_x_c = np.array([[0.9, 0.1], [0.1, 0.9]])
    p_m_x = np.array([[0.8, 0.2], [0.2, 0.8]])
    # P(Y=1 | m, c) = 0.1 + 0.2 m + 0.6 c
    y1 = np.array([[0.1, 0.7], [0.3, 0.9]])
    p_y_mc = np.stack([1 - y1, y1], axis=-1)
    return DiscreteSCM(p_c, p_x_c, p_m_x, p_y_mc)


def compare(scm: DiscreteSCM) -> list[dict]:
    """Truth, frontdoor and naive distributions over Y for every x0."""
    joint = observational_joint(scm)
    rows = []
    for x0 in range(scm.sizes["X"]):
        truth = interventional_truth(scm, x0)
        fd = frontdoor_estimate(joint, x0)
        naive = naive_conditional(joint, x0)
        rows.append({"x0": x0, "truth": truth, "frontdoor": fd, "naive": naive,
                     "tv_frontdoor": total_variation(truth, fd),
                     "tv_naive": total_variation(truth, naive)})
    return rows


# ---------------------------------------------------------------------------
# file format


def load_scm(path) -> DiscreteSCM:
    """JSON with ``variables`` (domain sizes) and ``cpts``.

    Monolithic keys: "P(C)", "P(X|C)", "P(M|X)", "P(Y|M,C)".
    Factored keys: "P(D)", "P(O|D)", "P(I|D)", "P(X|O)", "P(M|X)", "P(Y|M,I)".
    """
    doc = json.loads(Path(path).read_text())
    cpts = doc["cpts"]
    if "P(D)" in cpts:
        f = FactoredSCM(cpts["P(D)"], cpts["P(O|D)"], cpts["P(I|D)"], cpts["P(X|O)"],
                        cpts["P(M|X)"], cpts["P(Y|M,I)"])
        scm = f.to_monolithic()
    else:
        scm = DiscreteSCM(cpts["P(C)"], cpts["P(X|C)"], cpts["P(M|X)"], cpts["P(Y|M,C)"])
    declared = doc.get("variables", {})
    for var, n in scm.sizes.items():
        if var in declared and var != "C" and declared[var] != n:
            raise SCMError(f"variable {var} declared with {declared[var]} values, CPTs use {n}")
    return scm


def save_scm(scm: DiscreteSCM | FactoredSCM, path) -> None:
    if isinstance(scm, FactoredSCM):
        cpts = {"P(D)": scm.p_d, "P(O|D)": scm.p_o_given_d, "P(I|D)": scm.p_i_given_d,
                "P(X|O)": scm.p_x_given_o, "P(M|X)": scm.p_m_given_x, "P(Y|M,I)": scm.p_y_given_mi}
        variables = dict(zip("DOIXMY", (scm.p_d.shape[0], scm.p_o_given_d.shape[1],
                                        scm.p_i_given_d.shape[1], scm.p_x_given_o.shape[1],
                                        scm.p_m_given_x.shape[1], scm.p_y_given_mi.shape[2])))
    else:
        cpts = {"P(C)": scm.p_c, "P(X|C)": scm.p_x_given_c, "P(M|X)": scm.p_m_given_x,
                "P(Y|M,C)": scm.p_y_given_mc}
        variables = scm.sizes
    doc = {"variables": {k: int(v) for k, v in variables.items()},
           "cpts": {k: np.asarray(v).tolist() for k, v in cpts.items()}}
    Path(path).write_text(json.dumps(doc, indent=2))
