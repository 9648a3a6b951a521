"""Encoder-sharing planner and executor.

During sampling the encoder's self-condition feature z changes slowly
between adjacent steps, so most steps can reuse the z computed at an
earlier "anchor" step. A plan is an anchor set Phi (always containing
step 0); every step is served by the most recent anchor at or before it.

The planner chooses Phi to maximize

    U(Phi) = sum_k sum_{l=phi_k}^{phi_{k+1}-1} S[phi_k][l]

over the step-similarity matrix S. This is the minimal-sum-path problem
in negated form and is solved exactly by dynamic programming; a
brute-force enumerator over all anchor subsets doubles as its oracle.
Utility folds are evaluated right-to-left everywhere (matching the DP
recurrence's accumulation order) so the DP, the brute force, and
plan_utility agree bit-for-bit, not just within tolerance.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import FormatError
from .numcore import no_grad
from .samplers import (
    GuidanceSpec,
    TimeGrid,
    adams_sample,
    euler_sample,
    guided_velocity,
    SOLVER_ORDERS,
)

__all__ = [
    "SimilarityMatrix",
    "SharingPlan",
    "DPState",
    "probe_similarity",
    "segment_utility",
    "utility_table",
    "plan_utility",
    "plan_uniform",
    "plan_dp",
    "plan_bruteforce",
    "make_sharing_field",
    "sample_with_sharing",
    "write_similarity",
    "read_similarity",
    "similarity_checksum",
    "write_plan",
    "read_plan",
]

_SIM_TOL = 1e-9


@dataclass(frozen=True)
class SimilarityMatrix:
    S: np.ndarray

    @property
    def N(self) -> int:
        return self.S.shape[0]

    def __post_init__(self):
        s = np.asarray(self.S, dtype=np.float64)
        object.__setattr__(self, "S", s)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
            raise ValueError(f"similarity matrix must be square, got {s.shape}")
        if np.abs(s - s.T).max() > _SIM_TOL:
            raise ValueError("similarity matrix must be symmetric")
        if np.abs(np.diag(s) - 1.0).max() > _SIM_TOL:
            raise ValueError("similarity diagonal must be 1")
        if s.min() < -1.0 - _SIM_TOL or s.max() > 1.0 + _SIM_TOL:
            raise ValueError("similarity entries must lie in [-1, 1]")


def _as_matrix(S) -> np.ndarray:
    if isinstance(S, SimilarityMatrix):
        return S.S
    return SimilarityMatrix(np.asarray(S, dtype=np.float64)).S


@dataclass(frozen=True)
class SharingPlan:
    N: int
    anchors: tuple[int, ...]
    strategy: str = "dp"
    utility: float | None = None

    @property
    def K(self) -> int:
        return len(self.anchors)

    @property
    def sharing_ratio(self) -> float:
        return 1.0 - self.K / self.N

    def __post_init__(self):
        a = tuple(int(x) for x in self.anchors)
        object.__setattr__(self, "anchors", a)
        if not a or a[0] != 0:
            raise ValueError("anchor set must contain step 0")
        if list(a) != sorted(set(a)):
            raise ValueError("anchors must be sorted and unique")
        if a[-1] >= self.N:
            raise ValueError(f"anchor {a[-1]} out of range for N={self.N}")

    def assignment(self, i: int) -> int:
        """The anchor serving step i: max {phi in anchors : phi <= i}."""
        if not 0 <= i < self.N:
            raise ValueError(f"step {i} out of range for N={self.N}")
        return self.anchors[bisect_right(self.anchors, i) - 1]


@dataclass(frozen=True)
class DPState:
    """cost[k-1][i]: negated best utility covering steps i..N-1 with k
    anchors, the first at i (the minimal-sum-path orientation); path holds
    the successor anchor, -1 at the last level or where invalid."""
    cost: np.ndarray
    path: np.ndarray


# ---------------------------------------------------------------------------
# utilities over segments
# ---------------------------------------------------------------------------


def segment_utility(S, j: int, i: int) -> float:
    """W[j][i] = sum_{l=j}^{i} S[j][l]: how well anchor j serves steps j..i."""
    s = _as_matrix(S)
    if j > i:
        raise ValueError(f"segment start {j} exceeds end {i}")
    if not (0 <= j and i < s.shape[0]):
        raise ValueError(f"segment [{j},{i}] out of range for N={s.shape[0]}")
    return float(np.sum(s[j, j: i + 1]))


def utility_table(S) -> np.ndarray:
    """W[j][i] for all j <= i, 0 elsewhere; every planner reads this one
    table so their utilities are bitwise comparable."""
    s = _as_matrix(S)
    n = s.shape[0]
    w = np.zeros((n, n))
    for j in range(n):
        for i in range(j, n):
            w[j, i] = np.sum(s[j, j: i + 1])
    return w


def _fold_utility(w: np.ndarray, anchors: tuple[int, ...], n: int) -> float:
    """Right-to-left fold of segment utilities; identical association to
    the DP recurrence so equal plans produce bitwise equal utilities."""
    ends = list(anchors[1:]) + [n]
    u = 0.0
    for k in range(len(anchors) - 1, -1, -1):
        u = float(w[anchors[k], ends[k] - 1]) + u
    return u


def plan_utility(S, anchors) -> float:
    s = _as_matrix(S)
    anchors = tuple(int(a) for a in anchors)
    plan = SharingPlan(N=s.shape[0], anchors=anchors)
    return _fold_utility(utility_table(s), plan.anchors, s.shape[0])


# ---------------------------------------------------------------------------
# planners
# ---------------------------------------------------------------------------


def plan_uniform(N: int, K: int) -> SharingPlan:
    """Anchors every N/K steps: round(k*N/K), deduplicated, padded with the
    smallest unused steps if rounding collides."""
    if not 1 <= K <= N:
        raise ValueError(f"budget K={K} out of range [1, {N}]")
    anchors = sorted({min(int(round(k * N / K)), N - 1) for k in range(K)})
    cursor = 0
    while len(anchors) < K:
        if cursor not in anchors:
            anchors.append(cursor)
            anchors.sort()
        cursor += 1
    return SharingPlan(N=N, anchors=tuple(anchors), strategy="uniform")


def plan_dp(S, K: int, return_state: bool = False):
    """Exact maximizer of the plan utility; ties broken toward the
    lexicographically smallest anchor set (first argmax at each level)."""
    s = _as_matrix(S)
    n = s.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"budget K={K} out of range [1, {n}]")
    w = utility_table(s)
    # best[k-1][i]: max utility covering i..n-1 with k anchors, first at i
    best = np.full((K, n), -np.inf)
    path = np.full((K, n), -1, dtype=np.int64)
    best[0, :] = w[:, n - 1]
    for k in range(2, K + 1):
        for i in range(n - k + 1):
            js = np.arange(i + 1, n - k + 2)
            vals = w[i, js - 1] + best[k - 2, js]
            pick = int(np.argmax(vals))
            best[k - 1, i] = vals[pick]
            path[k - 1, i] = int(js[pick])
    anchors = [0]
    i = 0
    for k in range(K, 1, -1):
        i = int(path[k - 1, i])
        anchors.append(i)
    plan = SharingPlan(N=n, anchors=tuple(anchors), strategy="dp",
                       utility=_fold_utility(w, tuple(anchors), n))
    if return_state:
        return plan, DPState(cost=-best, path=path)
    return plan


def plan_bruteforce(S, K: int) -> SharingPlan:
    """Exhaustive oracle: every anchor set containing 0, same fold and the
    same tie-break as plan_dp. Guarded to small N."""
    s = _as_matrix(S)
    n = s.shape[0]
    if n > 20:
        raise ValueError(f"brute force limited to N <= 20, got {n}")
    if not 1 <= K <= n:
        raise ValueError(f"budget K={K} out of range [1, {n}]")
    w = utility_table(s)
    best_anchors: tuple[int, ...] | None = None
    best_utility = -np.inf
    for rest in combinations(range(1, n), K - 1):
        anchors = (0, *rest)
        u = _fold_utility(w, anchors, n)
        if u > best_utility:
            best_utility = u
            best_anchors = anchors
    return SharingPlan(N=n, anchors=best_anchors, strategy="bruteforce",
                       utility=best_utility)


# ---------------------------------------------------------------------------
# probing and shared sampling
# ---------------------------------------------------------------------------


def probe_similarity(model, probe_x0: np.ndarray, grid: TimeGrid, y,
                     guidance: GuidanceSpec | None = None,
                     solver: str = "euler") -> SimilarityMatrix:
    """Full (non-shared) sampling on the probe batch, recording z at every
    step; S[i][j] is the probe-averaged cosine between flattened z_i, z_j."""
    x0 = np.asarray(probe_x0, dtype=np.float64)
    if x0.ndim != 4 or x0.shape[0] < 1:
        raise ValueError("probe batch must be a non-empty [P,C,H,W] array")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    null = model.config.null_class
    zs: list[np.ndarray] = []

    def field(x, t):
        with no_grad():
            bundle_c, _ = model.encode(x, t, y)
            zs.append(bundle_c.z_t.data.reshape(x.shape[0], -1).copy())
            v_c = model.decode(x, t, bundle_c).data
            if guidance is None:
                return v_c
            bundle_u, _ = model.encode(x, t, np.full_like(y, null))
            v_u = model.decode(x, t, bundle_u).data
            return guided_velocity(v_c, v_u, guidance, t)

    if solver == "euler":
        euler_sample(field, x0, grid)
    else:
        adams_sample(field, x0, grid, order=SOLVER_ORDERS[solver])
    z = np.stack(zs)  # [N, P, D]
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    zn = np.divide(z, norms, out=np.zeros_like(z), where=norms > 0.0)
    s = np.einsum("ipd,jpd->ij", zn, zn) / z.shape[1]
    # a probe-averaged diagonal can sit a few ulps under 1; pin it
    np.fill_diagonal(s, 1.0)
    s = 0.5 * (s + s.T)
    return SimilarityMatrix(np.clip(s, -1.0, 1.0))


def make_sharing_field(model, grid: TimeGrid, plan: SharingPlan, y,
                       guidance: GuidanceSpec | None = None):
    """Velocity field that re-encodes only at anchor steps and reuses the
    cached z (per guidance branch) everywhere else."""
    if plan.N != grid.steps:
        raise ValueError(f"plan covers {plan.N} steps but grid has {grid.steps}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    null = model.config.null_class
    index_of = {float(t): i for i, t in enumerate(grid.nodes[:-1])}
    anchors = set(plan.anchors)
    cache: dict[str, object] = {}

    def field(x, t):
        i = index_of[float(t)]
        with no_grad():
            if i in anchors:
                cache["c"], _ = model.encode(x, t, y)
                if guidance is not None:
                    cache["u"], _ = model.encode(x, t, np.full_like(y, null))
            v_c = model.decode(x, t, cache["c"]).data
            if guidance is None:
                return v_c
            v_u = model.decode(x, t, cache["u"]).data
            return guided_velocity(v_c, v_u, guidance, t)

    return field


def sample_with_sharing(model, x_0: np.ndarray, grid: TimeGrid, plan: SharingPlan,
                        y, guidance: GuidanceSpec | None = None,
                        solver: str = "euler", recorder=None) -> np.ndarray:
    """Run the ODE with encoder sharing: encoder fires K times per guidance
    branch, decoder once per step per branch."""
    if solver not in SOLVER_ORDERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(SOLVER_ORDERS)}")
    field = make_sharing_field(model, grid, plan, y, guidance)
    if solver == "euler":
        return euler_sample(field, x_0, grid, recorder=recorder)
    return adams_sample(field, x_0, grid, order=SOLVER_ORDERS[solver],
                        recorder=recorder)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_SIM_MAGIC = "ddtlab-similarity v1"
_PLAN_MAGIC = "ddtlab-plan v1"


def similarity_checksum(S) -> str:
    s = _as_matrix(S)
    return hashlib.sha256(np.ascontiguousarray(s, dtype="<f8").tobytes()).hexdigest()


def write_similarity(path, S) -> None:
    """Textual: magic line, N=..., then N rows of N floats (full precision,
    so a round-trip is bit-exact)."""
    s = _as_matrix(S)
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"{_SIM_MAGIC}\n")
        fh.write(f"N={s.shape[0]}\n")
        for row in s:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    os.replace(tmp, path)


def read_similarity(path) -> SimilarityMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _SIM_MAGIC:
        raise FormatError(f"not a similarity file: {path}")
    if len(lines) < 2 or not lines[1].startswith("N="):
        raise FormatError("similarity file missing N header")
    try:
        n = int(lines[1][2:])
    except ValueError as exc:
        raise FormatError(f"bad N header: {lines[1]!r}") from exc
    values = " ".join(lines[2:]).split()
    if len(values) != n * n:
        raise FormatError(f"expected {n * n} entries, found {len(values)}")
    try:
        s = np.array([float(v) for v in values]).reshape(n, n)
    except ValueError as exc:
        raise FormatError(f"non-numeric similarity entry: {exc}") from exc
    try:
        return SimilarityMatrix(s)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_plan(path, plan: SharingPlan, checksum: str = "none") -> None:
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"{_PLAN_MAGIC}\n")
        fh.write(f"N={plan.N}\n")
        fh.write(f"K={plan.K}\n")
        fh.write(f"sharing_ratio={plan.sharing_ratio:.17g}\n")
        fh.write(f"strategy={plan.strategy}\n")
        fh.write(f"similarity_checksum={checksum}\n")
        utility = "none" if plan.utility is None else f"{plan.utility:.17g}"
        fh.write(f"utility={utility}\n")
        fh.write("anchors=" + ",".join(str(a) for a in plan.anchors) + "\n")
    os.replace(tmp, path)


def read_plan(path) -> tuple[SharingPlan, str]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _PLAN_MAGIC:
        raise FormatError(f"not a plan file: {path}")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if "=" not in line:
            raise FormatError(f"malformed plan line {line!r}")
        key, _, value = line.partition("=")
        fields[key] = value
    required = {"N", "K", "sharing_ratio", "strategy", "similarity_checksum", "anchors"}
    missing = required - fields.keys()
    if missing:
        raise FormatError(f"plan file missing fields {sorted(missing)}")
    try:
        n = int(fields["N"])
        k = int(fields["K"])
        anchors = tuple(int(a) for a in fields["anchors"].split(","))
    except ValueError as exc:
        raise FormatError(f"bad plan numbers: {exc}") from exc
    utility = None
    if fields.get("utility", "none") != "none":
        utility = float(fields["utility"])
    try:
        plan = SharingPlan(N=n, anchors=anchors, strategy=fields["strategy"],
                           utility=utility)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    if plan.K != k:
        raise FormatError(f"plan header K={k} but {plan.K} anchors listed")
    if abs(plan.sharing_ratio - float(fields["sharing_ratio"])) > 1e-9:
        raise FormatError("plan header sharing_ratio inconsistent with anchors")
    return plan, fields["similarity_checksum"]
