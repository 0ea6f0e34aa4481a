"""Weight-space similarity analyses over checkpoint tensors.

Everything here compares experts through their parameters alone: flattened
whole-matrix cosine, per-neuron averaging, optimal neuron reordering, gate-row
geometry, and low-dimensional projections of expert weights.  Behavioral
(forward-pass) comparisons live in ``dynamic_analysis``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .moe_core import Expert, load_expert
from .tensor_store import Checkpoint

WHICH_MATRICES = ("up", "act", "down")

REFERENCE_LABEL = "F"


def cosine_sim(u, v) -> float:
    """Cosine of two equal-length vectors; zero vectors are undefined."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError("undefined similarity: length mismatch")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("undefined similarity: zero vector")
    return float(np.dot(u, v) / (nu * nv))


@dataclass
class SimilarityMatrix:
    """Symmetric pairwise similarity with labeled rows/columns.

    ``values`` holds NaN for masked (undefined) cells.  The first
    ``n_experts`` labels are routed experts; shared experts and a reference
    entry may follow.  ``s_ee`` is the mean off-diagonal value among routed
    experts, ``s_ef`` the mean expert-vs-reference value when a reference
    entity is present.
    """

    labels: list[str]
    values: np.ndarray
    metric: str  # "cosine" or "angular"
    n_experts: int
    s_ee: float | None = None
    s_ef: float | None = None
    selected_labels: list[str] | None = None


def _pairwise_cosine(vectors: np.ndarray, allow_zero: bool) -> np.ndarray:
    """Full cosine matrix over row vectors; zero rows yield NaN rows/cols."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if not allow_zero and np.any(norms == 0.0):
        raise ValueError("undefined similarity: zero vector")
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = vectors / safe[:, None]
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    values[norms == 0.0, :] = np.nan
    values[:, norms == 0.0] = np.nan
    return values


def _summaries(values: np.ndarray, n_experts: int,
               has_reference: bool) -> tuple[float | None, float | None]:
    s_ee = None
    s_ef = None
    if n_experts >= 2:
        block = values[:n_experts, :n_experts]
        off = block[~np.eye(n_experts, dtype=bool)]
        if not np.all(np.isnan(off)):
            s_ee = float(np.nanmean(off))
    if has_reference and n_experts >= 1:
        col = values[:n_experts, -1]
        if not np.all(np.isnan(col)):
            s_ef = float(np.nanmean(col))
    return s_ee, s_ef


def build_similarity_matrix(vectors, labels: list[str], metric: str, n_experts: int,
                            has_reference: bool = False, allow_zero: bool = False,
                            selected_labels: list[str] | None = None) -> SimilarityMatrix:
    values = _pairwise_cosine(np.stack([np.ravel(v) for v in vectors]), allow_zero)
    if metric == "angular":
        with np.errstate(invalid="ignore"):
            values = 1.0 - np.arccos(values) / np.pi
    elif metric != "cosine":
        raise ValueError(f"unknown metric: {metric!r}")
    s_ee, s_ef = _summaries(values, n_experts, has_reference)
    return SimilarityMatrix(labels=list(labels), values=values, metric=metric,
                            n_experts=n_experts, s_ee=s_ee, s_ef=s_ef,
                            selected_labels=selected_labels)


def _expert_matrix(expert: Expert, which: str) -> np.ndarray:
    if which == "up":
        return np.asarray(expert.w_up, dtype=np.float64)
    if which == "act":
        return np.asarray(expert.w_act, dtype=np.float64)
    if which == "down":
        return np.asarray(expert.w_down, dtype=np.float64)
    raise ValueError(f"unknown matrix selector: {which!r}")


def _layer_entities(ckpt: Checkpoint, layer: int, which: str,
                    reference: Checkpoint | None) -> tuple[list[np.ndarray], list[str], int, bool]:
    """Expert matrices for one layer, reference FFN appended last when given."""
    config = ckpt.config
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer {layer} out of range")
    if config.is_dense(layer) and reference is None:
        raise ValueError(f"layer {layer} is dense; a reference checkpoint is required")

    if config.is_dense(layer):
        mats = [_expert_matrix(load_expert(ckpt, f"layers.{layer}.ffn"), which)]
        labels = ["0"]
    else:
        n = config.experts_per_layer[layer]
        mats = [_expert_matrix(load_expert(ckpt, f"layers.{layer}.experts.{e}"), which)
                for e in range(n)]
        labels = [str(e) for e in range(n)]
    n_experts = len(mats)

    if reference is not None:
        if not reference.config.is_dense(layer):
            raise ValueError(f"reference layer {layer} is not dense")
        ref_mat = _expert_matrix(load_expert(reference, f"layers.{layer}.ffn"), which)
        if ref_mat.shape != mats[0].shape:
            raise ValueError("cannot mix entities of different dimensions")
        mats.append(ref_mat)
        labels.append(REFERENCE_LABEL)
    return mats, labels, n_experts, reference is not None


def layer_expert_matrices(ckpt: Checkpoint, layer: int, which: str) -> list[np.ndarray]:
    """The chosen weight matrix of every routed expert in one gated layer."""
    config = ckpt.config
    if config.is_dense(layer):
        raise ValueError(f"layer {layer} is dense; no expert population")
    return [_expert_matrix(load_expert(ckpt, f"layers.{layer}.experts.{e}"), which)
            for e in range(config.experts_per_layer[layer])]


def matrix_level_sim(ckpt: Checkpoint, layer: int, which: str,
                     reference: Checkpoint | None = None) -> SimilarityMatrix:
    """Pairwise cosine over row-major flattened expert matrices."""
    mats, labels, n_experts, has_ref = _layer_entities(ckpt, layer, which, reference)
    flat = [m.ravel() for m in mats]
    return build_similarity_matrix(flat, labels, "cosine", n_experts, has_ref)


def neuron_average_sim(ckpt: Checkpoint, layer: int, which: str,
                       reference: Checkpoint | None = None) -> SimilarityMatrix:
    """Pairwise cosine over per-expert mean neuron vectors.

    A neuron's vector is a row of w_up/w_act or a column of w_down; averaging
    collapses each expert to one d_hid vector, which discards neuron identity
    and with it most of the signal that flattened comparison sees.
    """
    mats, labels, n_experts, has_ref = _layer_entities(ckpt, layer, which, reference)
    if which == "down":
        means = [m.mean(axis=1) for m in mats]
    else:
        means = [m.mean(axis=0) for m in mats]
    return build_similarity_matrix(means, labels, "cosine", n_experts, has_ref)


def solve_assignment(score: np.ndarray, maximize: bool = True) -> np.ndarray:
    """Optimal one-to-one assignment on a square score matrix.

    Returns ``perm`` with row ``i`` assigned to column ``perm[i]``.  Tie rule:
    whenever the identity assignment attains the optimal total, identity is
    returned.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError("score matrix must be square")
    if not np.all(np.isfinite(score)):
        raise ValueError("score matrix must be finite")
    n = score.shape[0]
    rows, cols = linear_sum_assignment(score, maximize=maximize)
    perm = cols[np.argsort(rows)]
    idx = np.arange(n)
    best = score[idx, perm].sum()
    ident = score[idx, idx].sum()
    if (ident >= best) if maximize else (ident <= best):
        return idx
    return perm


def kendall_tau(seq_a, seq_b) -> float:
    """Tie-free Kendall rank coefficient between two permutations of one set.

    Counts concordant minus discordant position pairs over n(n-1)/2.
    """
    a = list(seq_a)
    b = list(seq_b)
    n = len(a)
    if n != len(b):
        raise ValueError("sequences must have equal length")
    if n < 2:
        raise ValueError("need at least two elements")
    if len(set(a)) != n or sorted(a) != sorted(b):
        raise ValueError("inputs must be permutations of the same set")
    net = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            da = (a[i] > a[j]) - (a[i] < a[j])
            db = (b[i] > b[j]) - (b[i] < b[j])
            net += da * db
    return net / (n * (n - 1) // 2)


@dataclass
class ReorderReport:
    """Outcome of aligning expert_b's neurons against expert_a's."""

    which: str
    permutation: np.ndarray  # permutation[j] = a-neuron index matched to b-neuron j
    sim_before: float
    sim_after: float
    tau: float
    pair: tuple[str, str] | None = None


def _neuron_rows(expert: Expert, which: str) -> np.ndarray:
    mat = _expert_matrix(expert, which)
    return mat.T.copy() if which == "down" else mat


def neuron_pair_scores(expert_a: Expert, expert_b: Expert, which: str) -> np.ndarray:
    """Alignment score between every a-neuron and b-neuron.

    Scores are raw dot products: summed over an assignment they equal the
    flattened-matrix inner product, whose normalization is permutation
    invariant, so the assignment that maximizes this total maximizes the
    whole-matrix cosine exactly.  Per-neuron cosines lack that guarantee (the
    matching can then trade norm-weighted agreement away and end up below the
    unpermuted similarity).  Zero-norm neurons score 0 against everything.
    """
    a = _neuron_rows(expert_a, which)
    b = _neuron_rows(expert_b, which)
    if a.shape != b.shape:
        raise ValueError("experts have different neuron dimensions")
    return a @ b.T


def reorder_neurons(expert_a: Expert, expert_b: Expert, which: str,
                    pair: tuple[str, str] | None = None) -> ReorderReport:
    """Match b's neurons to a's so the flattened cosine is maximized.

    ``sim_before``/``sim_after`` are flattened-matrix cosines of the chosen
    matrix before and after applying the matching; ``tau`` is the Kendall
    coefficient of the recovered permutation against identity.  Because the
    assignment optimizes the same objective it is scored by, ``sim_after``
    can never fall below ``sim_before``.
    """
    scores = neuron_pair_scores(expert_a, expert_b, which)
    row_to_col = solve_assignment(scores, maximize=True)
    n = len(row_to_col)
    perm = np.empty(n, dtype=int)
    perm[row_to_col] = np.arange(n)  # b-neuron j -> a-neuron perm[j]

    a = _neuron_rows(expert_a, which)
    b = _neuron_rows(expert_b, which)
    aligned_b = b[row_to_col]
    sim_before = cosine_sim(a.ravel(), b.ravel())
    sim_after = cosine_sim(a.ravel(), aligned_b.ravel())
    tau = kendall_tau(perm.tolist(), list(range(n)))
    return ReorderReport(which=which, permutation=perm, sim_before=sim_before,
                         sim_after=sim_after, tau=tau, pair=pair)


def gate_embedding_sim(ckpt: Checkpoint, layer: int) -> SimilarityMatrix:
    """Pairwise cosine over the gate's per-expert rows."""
    config = ckpt.config
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer {layer} out of range")
    if config.is_dense(layer):
        raise ValueError(f"layer {layer} is dense and has no gate")
    rows = np.asarray(ckpt.get_tensor(f"layers.{layer}.gate.weight"), dtype=np.float64)
    labels = [str(e) for e in range(rows.shape[0])]
    return build_similarity_matrix(list(rows), labels, "cosine", rows.shape[0])


def pearson_r(xs, ys) -> float:
    """Pearson correlation; degenerate when either side has zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-d and equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    xd = x - x.mean()
    yd = y - y.mean()
    vx = np.dot(xd, xd)
    vy = np.dot(yd, yd)
    if vx == 0.0 or vy == 0.0:
        raise ValueError("degenerate regression: zero variance")
    return float(np.dot(xd, yd) / np.sqrt(vx * vy))


@dataclass
class RegressionReport:
    layer: int
    which: str
    n_pairs: int
    r: float
    r2: float
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)


def _upper_triangle(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    iu = np.triu_indices(n, k=1)
    return values[iu]


def gate_expert_regression(ckpt: Checkpoint, layer: int, which: str) -> RegressionReport:
    """Correlate gate-row similarities with neuron-averaged expert similarities.

    Both sides are the upper triangle (i < j) over routed expert pairs of one
    layer.  Needs at least three experts so the triangle has spread.
    """
    config = ckpt.config
    if config.is_dense(layer):
        raise ValueError(f"layer {layer} is dense and has no gate")
    if config.experts_per_layer[layer] < 3:
        raise ValueError("regression needs at least 3 experts")
    x = _upper_triangle(gate_embedding_sim(ckpt, layer).values)
    y = _upper_triangle(neuron_average_sim(ckpt, layer, which).values)
    r = pearson_r(x, y)
    return RegressionReport(layer=layer, which=which, n_pairs=x.size,
                            r=r, r2=r * r, x=x, y=y)


def aggregate_r2(reports: list[RegressionReport]) -> float:
    """Mean r-squared over per-layer regression reports."""
    if not reports:
        raise ValueError("no regression reports to aggregate")
    return float(np.mean([rep.r2 for rep in reports]))


@dataclass
class Projection:
    """PCA projection with enough context to reconstruct or replot."""

    points: list[tuple[str, np.ndarray]]
    explained_variance: np.ndarray
    outliers: list[str]
    components: np.ndarray  # [dims, n_kept_features]
    center: np.ndarray
    scale: np.ndarray | None
    kept_features: np.ndarray


def pca_project(vectors, dims: int = 2, standardize: bool = True,
                labels: list[str] | None = None) -> Projection:
    """Project equal-length vectors onto their leading principal components.

    With ``standardize``, features are shifted to zero mean and unit variance
    first and zero-variance features are dropped.  Component signs follow a
    fixed convention (largest-magnitude entry positive), so output is
    deterministic.
    """
    data = np.asarray([np.ravel(v) for v in vectors], dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("vectors must be equal-length")
    n, n_features = data.shape
    if labels is None:
        labels = [str(i) for i in range(n)]
    if len(labels) != n:
        raise ValueError("labels length must match vector count")
    if dims < 1:
        raise ValueError("dims must be positive")
    if n < dims + 1:
        raise ValueError("fewer samples than dims")

    center = data.mean(axis=0)
    kept = np.arange(n_features)
    scale = None
    if standardize:
        sd = data.std(axis=0)
        kept = np.flatnonzero(sd > 0.0)
        if kept.size == 0:
            raise ValueError("all features have zero variance")
        scale = sd[kept]
        work = (data[:, kept] - center[kept]) / scale
    else:
        work = data - center
    if work.shape[1] < dims:
        raise ValueError("fewer features than dims")

    _, singular, vt = np.linalg.svd(work, full_matrices=False)
    components = vt[:dims].copy()
    for row in components:
        lead = np.argmax(np.abs(row))
        if row[lead] < 0:
            row *= -1.0
    coords = work @ components.T
    explained = (singular[:dims] ** 2) / max(n - 1, 1)

    points = [(labels[i], coords[i]) for i in range(n)]
    return Projection(points=points, explained_variance=explained, outliers=[],
                      components=components, center=center, scale=scale,
                      kept_features=kept)


def reconstruct(projection: Projection) -> np.ndarray:
    """Map projected points back to the (kept-feature) input space."""
    coords = np.stack([c for _, c in projection.points])
    work = coords @ projection.components
    if projection.scale is not None:
        return work * projection.scale + projection.center[projection.kept_features]
    return work + projection.center


def dbscan_outliers(points, eps: float, min_pts: int = 2,
                    labels: list[str] | None = None) -> set:
    """Labels of density-noise points under Euclidean DBSCAN.

    A point is core when its eps-ball (itself included) holds at least
    ``min_pts`` points; anything not reachable from a core point is noise.
    With min_pts=1 every point is core, so nothing is ever flagged.
    """
    data = np.asarray([np.ravel(p) for p in points], dtype=np.float64)
    n = data.shape[0]
    if labels is None:
        labels = list(range(n))
    if len(labels) != n:
        raise ValueError("labels length must match point count")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")

    diff = data[:, None, :] - data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = [len(nb) >= min_pts for nb in neighbors]

    assignment = [-1] * n  # -1 noise until claimed by a cluster
    cluster = 0
    for start in range(n):
        if assignment[start] != -1 or not core[start]:
            continue
        cluster += 1
        queue = [start]
        assignment[start] = cluster
        while queue:
            p = queue.pop()
            if not core[p]:
                continue
            for q in neighbors[p]:
                if assignment[q] == -1:
                    assignment[q] = cluster
                    queue.append(q)
    return {labels[i] for i in range(n) if assignment[i] == -1}


def filter_outliers(projection: Projection, eps: float, min_pts: int = 2) -> Projection:
    """Drop DBSCAN-noise points from a projection, recording their labels."""
    labels = [lab for lab, _ in projection.points]
    coords = [c for _, c in projection.points]
    noise = dbscan_outliers(coords, eps=eps, min_pts=min_pts, labels=labels)
    kept_points = [(lab, c) for lab, c in projection.points if lab not in noise]
    removed = [lab for lab in labels if lab in noise]
    return Projection(points=kept_points, explained_variance=projection.explained_variance,
                      outliers=removed, components=projection.components,
                      center=projection.center, scale=projection.scale,
                      kept_features=projection.kept_features)


def pairwise_reorder_reports(ckpt: Checkpoint, layer: int, which: str) -> list[ReorderReport]:
    """Reorder reports for every routed expert pair (i < j) of one layer."""
    config = ckpt.config
    if config.is_dense(layer):
        raise ValueError(f"layer {layer} is dense; nothing to reorder")
    n = config.experts_per_layer[layer]
    experts = [load_expert(ckpt, f"layers.{layer}.experts.{e}") for e in range(n)]
    reports = []
    for i, j in itertools.combinations(range(n), 2):
        reports.append(reorder_neurons(experts[i], experts[j], which,
                                       pair=(str(i), str(j))))
    return reports
