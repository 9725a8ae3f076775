"""Chemical reaction networks with mass-action kinetics.

A network is defined by its reactant and product stoichiometric coefficient
matrices (A, B); the net stoichiometry S = (B - A)' is always derived, never
user-supplied. Hazards use the generalized falling-factorial binomial so the
same routine serves integer (jump process) and real (Langevin) states; any
negative hazard arising from a negative real state is clamped to zero before
drift/diffusion matrices are built, which keeps the diffusion matrix PSD.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np


class NetworkError(ValueError):
    """Raised for malformed network definitions or dimension mismatches."""


def falling_factorial_terms(x, a):
    """Value, first and second derivative of C(x, a) = x(x-1)...(x-a+1)/a!.

    Vectorized in x; a is a non-negative integer. For a <= 1 the second
    derivative is zero and the value reduces to 1 or x.
    """
    x = np.asarray(x, dtype=float)
    if a == 0:
        one = np.ones_like(x)
        return one, np.zeros_like(x), np.zeros_like(x)
    if a == 1:
        return x.copy(), np.ones_like(x), np.zeros_like(x)
    inv_fact = 1.0 / math.factorial(a)
    val = np.ones_like(x)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    # product rule over the a linear factors (x - q)
    for q in range(a):
        f = x - q
        d2 = d2 * f + 2.0 * d1
        d1 = d1 * f + val
        val = val * f
    return val * inv_fact, d1 * inv_fact, d2 * inv_fact


def _mass_action_parts(A, x, order):
    """Per-reaction mass-action factors g_i(x) = prod_j C(x_j, a_ij).

    Returns (g, dg, d2g) up to the requested derivative order, where
    dg has shape (r, s) and d2g has shape (r, s, s). Entries beyond
    `order` are None.
    """
    r, s = A.shape
    x = np.asarray(x, dtype=float)
    vals = np.empty((r, s))
    d1s = np.empty((r, s)) if order >= 1 else None
    d2s = np.empty((r, s)) if order >= 2 else None
    for i in range(r):
        for j in range(s):
            v, d1, d2 = falling_factorial_terms(x[j], int(A[i, j]))
            vals[i, j] = v
            if order >= 1:
                d1s[i, j] = d1
            if order >= 2:
                d2s[i, j] = d2
    g = np.prod(vals, axis=1)
    dg = None
    d2g = None
    if order >= 1:
        dg = np.empty((r, s))
        for i in range(r):
            for j in range(s):
                prod = 1.0
                for k in range(s):
                    if k != j:
                        prod *= vals[i, k]
                dg[i, j] = d1s[i, j] * prod
    if order >= 2:
        d2g = np.empty((r, s, s))
        for i in range(r):
            for j in range(s):
                for l in range(s):
                    if j == l:
                        prod = 1.0
                        for k in range(s):
                            if k != j:
                                prod *= vals[i, k]
                        d2g[i, j, j] = d2s[i, j] * prod
                    else:
                        prod = 1.0
                        for k in range(s):
                            if k != j and k != l:
                                prod *= vals[i, k]
                        d2g[i, j, l] = d1s[i, j] * d1s[i, l] * prod
    return g, dg, d2g


@dataclass(frozen=True)
class ReactionNetwork:
    """Reaction network (A, B) with derived stoichiometry S = (B - A)'.

    Attributes:
        species_names: length-s species labels.
        reactant_matrix: r x s non-negative integer coefficients A.
        product_matrix: r x s non-negative integer coefficients B.
        rate_names: length-r rate-constant labels (default c1..cr).
    """

    species_names: tuple
    reactant_matrix: np.ndarray
    product_matrix: np.ndarray
    rate_names: tuple = None
    stoichiometry: np.ndarray = field(init=False)

    def __post_init__(self):
        A = np.asarray(self.reactant_matrix, dtype=np.int64)
        B = np.asarray(self.product_matrix, dtype=np.int64)
        if A.ndim != 2 or B.shape != A.shape:
            raise NetworkError("reactant and product matrices must be r x s and equal shape")
        r, s = A.shape
        if r < 1 or s < 1:
            raise NetworkError("need at least one reaction and one species")
        if len(self.species_names) != s:
            raise NetworkError(f"{len(self.species_names)} species names for {s} species")
        if (A < 0).any() or (B < 0).any():
            raise NetworkError("stoichiometric coefficients must be non-negative")
        names = self.rate_names or tuple(f"c{i + 1}" for i in range(r))
        if len(names) != r:
            raise NetworkError(f"{len(names)} rate names for {r} reactions")
        S = (B - A).T.astype(np.int64)
        for arr in (A, B, S):
            arr.setflags(write=False)
        object.__setattr__(self, "reactant_matrix", A)
        object.__setattr__(self, "product_matrix", B)
        object.__setattr__(self, "species_names", tuple(self.species_names))
        object.__setattr__(self, "rate_names", tuple(names))
        object.__setattr__(self, "stoichiometry", S)
        # float copies used by the numeric kernels
        object.__setattr__(self, "_Sf", S.astype(float))
        object.__setattr__(self, "_Af", A.astype(float))
        self._Sf.setflags(write=False)
        self._Af.setflags(write=False)

    @property
    def n_species(self):
        return self.reactant_matrix.shape[1]

    @property
    def n_reactions(self):
        return self.reactant_matrix.shape[0]

    def _check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_species,):
            raise NetworkError(
                f"state has shape {x.shape}, expected ({self.n_species},)")
        return x

    def _check_rates(self, c):
        c = np.asarray(c, dtype=float)
        if c.shape != (self.n_reactions,):
            raise NetworkError(
                f"rate vector has shape {c.shape}, expected ({self.n_reactions},)")
        return c

    def hazard(self, c, x, clamp=True):
        """Mass-action hazard vector h_i(x) = c_i * prod_j C(x_j, a_ij)."""
        c = self._check_rates(c)
        x = self._check_state(x)
        g, _, _ = _mass_action_parts(self.reactant_matrix, x, 0)
        h = c * g
        if clamp:
            np.maximum(h, 0.0, out=h)
        return h

    def hazard_with_grad(self, c, x):
        """Hazard vector and its state gradient (r x s), clamped consistently.

        Clamped reactions (raw hazard < 0) get zero value and zero gradient.
        """
        c = self._check_rates(c)
        x = self._check_state(x)
        g, dg, _ = _mass_action_parts(self.reactant_matrix, x, 1)
        h = c * g
        grad = c[:, None] * dg
        neg = h < 0.0
        h[neg] = 0.0
        grad[neg, :] = 0.0
        return h, grad

    def hazard_all_derivs(self, c, x):
        """(h, grad, hess, g) with hess of shape (r, s, s); clamp-consistent."""
        c = self._check_rates(c)
        x = self._check_state(x)
        g, dg, d2g = _mass_action_parts(self.reactant_matrix, x, 2)
        h = c * g
        grad = c[:, None] * dg
        hess = c[:, None, None] * d2g
        neg = h < 0.0
        h[neg] = 0.0
        grad[neg, :] = 0.0
        hess[neg, :, :] = 0.0
        g = g.copy()
        g[neg] = 0.0
        return h, grad, hess, g

    def drift(self, c, x):
        """Deterministic drift S h(x)."""
        return self._Sf @ self.hazard(c, x)

    def jacobian_F(self, c, eta):
        """Jacobian of the drift: F_ij = d[S h(eta)]_i / d eta_j."""
        _, grad = self.hazard_with_grad(c, eta)
        return self._Sf @ grad

    def diffusion_beta(self, c, x):
        """Diffusion matrix beta(x) = S diag(h(x)) S'; symmetric PSD."""
        h = self.hazard(c, x)
        return (self._Sf * h) @ self._Sf.T


# ---------------------------------------------------------------------------
# built-in models

_BUILTINS = {}


def _register(model_id, net, c, x0):
    _BUILTINS[model_id] = (net, np.asarray(c, dtype=float), np.asarray(x0, dtype=float))


_register(
    "sir",
    ReactionNetwork(("X1", "X2"), [[1, 1], [0, 1]], [[0, 2], [0, 0]]),
    [0.019, 3.2],
    [254, 7],
)
_register(
    "aphid",
    ReactionNetwork(("X1", "X2"), [[1, 0], [1, 1]], [[2, 1], [0, 1]]),
    [1.75, 0.001],
    [5, 5],
)
_register(
    "lotka_volterra",
    ReactionNetwork(("X1", "X2"), [[1, 0], [1, 1], [0, 1]], [[2, 0], [0, 2], [0, 0]]),
    [0.5, 0.0025, 0.3],
    [100, 100],
)
_register(
    "immigration_death",
    ReactionNetwork(("X1",), [[0], [1]], [[1], [0]]),
    [2.0, 0.5],
    [10],
)


def builtin(model_id):
    """Return (network, default rate constants, default initial state)."""
    try:
        net, c, x0 = _BUILTINS[model_id]
    except KeyError:
        raise NetworkError(
            f"unknown built-in model {model_id!r}; "
            f"choose from {sorted(_BUILTINS)}") from None
    return net, c.copy(), x0.copy()


BUILTIN_IDS = tuple(sorted(_BUILTINS))


# ---------------------------------------------------------------------------
# plain-text model files

_REACTION_RE = re.compile(r"^(?P<lhs>[^-@>]*)->(?P<rhs>[^@]*)@\s*(?P<rate>\w+)\s*$")
_TERM_RE = re.compile(r"^(?:(\d+)\s+)?([A-Za-z_]\w*)$")


def _parse_side(text, species_index, line_no):
    counts = np.zeros(len(species_index), dtype=np.int64)
    text = text.strip()
    if text in ("", "0"):
        return counts
    for term in text.split("+"):
        m = _TERM_RE.match(term.strip())
        if not m:
            raise NetworkError(f"line {line_no}: cannot parse term {term.strip()!r}")
        mult = int(m.group(1) or 1)
        name = m.group(2)
        if name not in species_index:
            raise NetworkError(f"line {line_no}: unknown species {name!r}")
        counts[species_index[name]] += mult
    return counts


def parse_model_text(text):
    """Parse the plain-text model format.

    First non-comment line lists the species names (whitespace separated,
    optionally prefixed ``species:``); each following line is one reaction
    ``reactants -> products @ rate_name`` with integer multiplicities, e.g.
    ``X1 + X2 -> 2 X2 @ c1``. An empty side is written ``0``.
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise NetworkError("empty model definition")
    header = lines[0]
    if header.lower().startswith("species:"):
        header = header.split(":", 1)[1]
    species = tuple(header.split())
    if not species or any("->" in s for s in species):
        raise NetworkError("first line must list the species names")
    index = {name: j for j, name in enumerate(species)}
    if len(index) != len(species):
        raise NetworkError("duplicate species name")
    A_rows, B_rows, rate_names = [], [], []
    for k, ln in enumerate(lines[1:], start=2):
        m = _REACTION_RE.match(ln)
        if not m:
            raise NetworkError(f"line {k}: expected 'reactants -> products @ name'")
        A_rows.append(_parse_side(m.group("lhs"), index, k))
        B_rows.append(_parse_side(m.group("rhs"), index, k))
        rate_names.append(m.group("rate"))
    if len(set(rate_names)) != len(rate_names):
        raise NetworkError("duplicate rate-constant name")
    return ReactionNetwork(species, np.array(A_rows), np.array(B_rows),
                           tuple(rate_names))


def parse_model_file(path):
    with open(path) as fh:
        return parse_model_text(fh.read())


def format_model_text(net):
    """Inverse of parse_model_text for round-tripping."""
    out = ["species: " + " ".join(net.species_names)]
    for i in range(net.n_reactions):
        def side(mat):
            terms = []
            for j, name in enumerate(net.species_names):
                mlt = int(mat[i, j])
                if mlt == 1:
                    terms.append(name)
                elif mlt > 1:
                    terms.append(f"{mlt} {name}")
            return " + ".join(terms) if terms else "0"
        out.append(f"{side(net.reactant_matrix)} -> {side(net.product_matrix)}"
                   f" @ {net.rate_names[i]}")
    return "\n".join(out) + "\n"
