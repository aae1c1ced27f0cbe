"""Quantile regression forest grown from scratch.

CART regression trees (variance-reduction splits) whose leaves keep every
training target routed to them. A query point gets a weight on each training
occurrence, ``1 / |leaf|`` per tree averaged over trees, and conditional
quantiles are read off the resulting weighted empirical CDF.
"""

from __future__ import annotations

import json
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numba as nb
import numpy as np

from .parallel import worker_count

FORMAT_VERSION = 1
FEATURE_NAMES = ("day_of_month", "month", "precipitation", "temperature")

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def tree_seed(root_seed: int, tree_index: int) -> int:
    """Per-tree seed, independent of training order and thread schedule."""
    return splitmix64((int(root_seed) + int(tree_index)) & _MASK64)


@dataclass(frozen=True)
class QrfConfig:
    n_trees: int = 1000
    min_samples_split: int = 10
    min_samples_leaf: int = 1
    max_features: object = "all"
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features != "all" and not (isinstance(self.max_features, int)
                                               and self.max_features >= 1):
            raise ValueError("max_features must be 'all' or a positive integer")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        worker_count(self.n_jobs)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# --- tree growth -------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _grow_tree(X, y, boot, order, min_split, min_leaf, n_try, rng_state):
    """Grow one tree on the bootstrap sample ``boot`` (positions -> original rows).

    ``order[f]`` lists bootstrap positions sorted by feature ``f``; it is
    partitioned in place as the tree grows.
    """
    n = boot.shape[0]
    n_feat = X.shape[1]
    cap = 2 * n + 1
    feat = np.full(cap, -1, np.int8)
    thr = np.zeros(cap, np.float64)
    # for a leaf, left/right hold the [start, end) range of its rows in leaf_rows
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    leaf_rows = np.empty(n, np.int32)

    yb = np.empty(n, np.float64)
    for p in range(n):
        yb[p] = y[boot[p]]
    goes_left = np.zeros(n, np.bool_)
    buf = np.empty(n, np.int64)
    feats = np.arange(n_feat)

    stack_node = np.empty(cap, np.int64)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    top = 1
    n_nodes = 1
    leaf_ptr = 0

    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        size = hi - lo

        best_f = -1
        best_pos = -1
        best_thr = 0.0
        if size >= min_split:
            total = 0.0
            ymin = yb[order[0, lo]]
            ymax = ymin
            for k in range(lo, hi):
                v = yb[order[0, k]]
                total += v
                if v < ymin:
                    ymin = v
                if v > ymax:
                    ymax = v
            if ymax > ymin:
                if n_try < n_feat:
                    # partial Fisher-Yates on the feature list, xorshift64*
                    for a in range(n_feat):
                        feats[a] = a
                    for a in range(n_try):
                        rng_state ^= rng_state >> np.uint64(12)
                        rng_state ^= rng_state << np.uint64(25)
                        rng_state ^= rng_state >> np.uint64(27)
                        r = (rng_state * np.uint64(2685821657736338717)) >> np.uint64(11)
                        b = a + np.int64(r % np.uint64(n_feat - a))
                        t = feats[a]
                        feats[a] = feats[b]
                        feats[b] = t
                    cand = np.sort(feats[:n_try])
                else:
                    cand = feats
                best = -np.inf
                for ci in range(cand.shape[0]):
                    f = cand[ci]
                    s_left = 0.0
                    for k in range(lo, hi - 1):
                        p = order[f, k]
                        s_left += yb[p]
                        n_left = k - lo + 1
                        n_right = size - n_left
                        if n_left < min_leaf:
                            continue
                        if n_right < min_leaf:
                            break
                        a_val = X[boot[p], f]
                        b_val = X[boot[order[f, k + 1]], f]
                        if a_val < b_val:
                            s_right = total - s_left
                            score = s_left * s_left / n_left + s_right * s_right / n_right
                            if score > best:
                                best = score
                                best_f = f
                                best_pos = k
                                mid = 0.5 * (a_val + b_val)
                                if mid >= b_val:
                                    mid = a_val
                                best_thr = mid

        if best_f < 0:
            left[node] = leaf_ptr
            for k in range(lo, hi):
                leaf_rows[leaf_ptr] = boot[order[0, k]]
                leaf_ptr += 1
            right[node] = leaf_ptr
            continue

        split = best_pos + 1
        for k in range(lo, hi):
            goes_left[order[best_f, k]] = k < split
        for f in range(n_feat):
            if f == best_f:
                continue
            a = lo
            b = 0
            for k in range(lo, hi):
                p = order[f, k]
                if goes_left[p]:
                    order[f, a] = p
                    a += 1
                else:
                    buf[b] = p
                    b += 1
            for k in range(b):
                order[f, a + k] = buf[k]

        feat[node] = best_f
        thr[node] = best_thr
        l_id = n_nodes
        r_id = n_nodes + 1
        n_nodes += 2
        left[node] = l_id
        right[node] = r_id
        stack_node[top] = r_id
        stack_lo[top] = split
        stack_hi[top] = hi
        top += 1
        stack_node[top] = l_id
        stack_lo[top] = lo
        stack_hi[top] = split
        top += 1

    return feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(), right[:n_nodes].copy(), leaf_rows


@nb.njit(cache=True, nogil=True)
def _bootstrap_order(sorted_rows, boot, n_rows):
    """Per-feature positions of ``boot`` sorted by feature, in O(n) per feature.

    ``sorted_rows[f]`` is the stable argsort of original rows by feature ``f``.
    """
    n = boot.shape[0]
    counts = np.zeros(n_rows + 1, np.int64)
    for p in range(n):
        counts[boot[p] + 1] += 1
    for i in range(n_rows):
        counts[i + 1] += counts[i]
    fill = counts[:-1].copy()
    by_row = np.empty(n, np.int64)
    for p in range(n):
        r = boot[p]
        by_row[fill[r]] = p
        fill[r] += 1
    n_feat = sorted_rows.shape[0]
    order = np.empty((n_feat, n), np.int64)
    for f in range(n_feat):
        k = 0
        for j in range(n_rows):
            r = sorted_rows[f, j]
            for q in range(counts[r], counts[r + 1]):
                order[f, k] = by_row[q]
                k += 1
    return order


# --- prediction kernels --------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _find_leaves(X, feat, thr, left, right, node_off):
    n = X.shape[0]
    n_trees = node_off.shape[0] - 1
    out = np.empty((n, n_trees), np.int64)
    for i in range(n):
        for t in range(n_trees):
            base = node_off[t]
            node = base
            while feat[node] >= 0:
                if X[i, feat[node]] <= thr[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[i, t] = node
    return out


@nb.njit(cache=True, nogil=True)
def _leaf_groups(feat, left, right, leaf_rows, vid):
    """Run-length form of every leaf: (distinct-target id, multiplicity), ids ascending.

    Constant-target leaves can hold thousands of rows; as groups they cost one entry.
    """
    n_nodes = feat.shape[0]
    g_lo = np.zeros(n_nodes, np.int32)
    g_hi = np.zeros(n_nodes, np.int32)
    g_vid = np.empty(leaf_rows.shape[0], np.int32)
    g_cnt = np.empty(leaf_rows.shape[0], np.int32)
    k = 0
    for node in range(n_nodes):
        if feat[node] >= 0:
            continue
        v = np.sort(vid[leaf_rows[left[node]:right[node]]])
        g_lo[node] = k
        j = 0
        while j < v.shape[0]:
            c = 1
            while j + c < v.shape[0] and v[j + c] == v[j]:
                c += 1
            g_vid[k] = v[j]
            g_cnt[k] = c
            k += 1
            j += c
        g_hi[node] = k
    return g_lo, g_hi, g_vid[:k].copy(), g_cnt[:k].copy()


@nb.njit(cache=True, nogil=True)
def _pooled_groups(leaves_i, left, right, g_lo, g_hi, g_vid, g_cnt):
    """Groups of one query, concatenated tree by tree, then stably sorted by target id.

    Returns ids, counts and the leaf size each count is relative to.
    """
    n_pairs = 0
    for t in range(leaves_i.shape[0]):
        n_pairs += g_hi[leaves_i[t]] - g_lo[leaves_i[t]]
    vids = np.empty(n_pairs, np.int64)
    cnts = np.empty(n_pairs, np.int64)
    sizes = np.empty(n_pairs, np.int64)
    k = 0
    for t in range(leaves_i.shape[0]):
        leaf = leaves_i[t]
        size = right[leaf] - left[leaf]
        for j in range(g_lo[leaf], g_hi[leaf]):
            vids[k] = g_vid[j]
            cnts[k] = g_cnt[j]
            sizes[k] = size
            k += 1
    perm = np.argsort(vids, kind="mergesort")
    return vids[perm], cnts[perm], sizes[perm]


_U = np.finfo(np.float64).eps / 2


@nb.njit(cache=True, nogil=True)
def _quantiles_kernel(leaves, left, right, g_lo, g_hi, g_vid, g_cnt, qs):
    """Target id of inf{y : F(y) >= q} per query and level, with a doubt flag.

    F is accumulated in floating point. A level is flagged when some examined
    CDF step lies within the rounding-error bound of ``q``; the caller then
    settles it in exact arithmetic.
    """
    n = leaves.shape[0]
    n_trees = leaves.shape[1]
    out = np.empty((n, qs.shape[0]), np.int64)
    doubt = np.zeros((n, qs.shape[0]), np.bool_)
    for i in range(n):
        vids, cnts, sizes = _pooled_groups(leaves[i], left, right, g_lo, g_hi, g_vid, g_cnt)
        m = vids.shape[0]
        # each weight carries <= 1 rounding, each addition <= 1: relative 2m u of F <= 1
        tol = 4.0 * (m + 1) * _U
        for a in range(qs.shape[0]):
            q = qs[a]
            cum = 0.0
            val = vids[m - 1]
            k = 0
            while k < m:
                v = vids[k]
                while k < m and vids[k] == v:
                    cum += cnts[k] / (sizes[k] * n_trees)
                    k += 1
                if abs(cum - q) <= tol:
                    doubt[i, a] = True
                if cum >= q:
                    val = v
                    break
            out[i, a] = val
    return out, doubt


@nb.njit(cache=True, nogil=True)
def _mean_kernel(leaves, left, right, g_lo, g_hi, g_vid, g_cnt, y_unique):
    n = leaves.shape[0]
    n_trees = leaves.shape[1]
    out = np.empty(n, np.float64)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            leaf = leaves[i, t]
            s = 0.0
            for j in range(g_lo[leaf], g_hi[leaf]):
                s += g_cnt[j] * y_unique[g_vid[j]]
            acc += s / (right[leaf] - left[leaf])
        out[i] = acc / n_trees
    return out


# --- model -------------------------------------------------------------------

class QrfModel:
    """A fitted forest, stored as flat node arrays over all trees.

    Tree ``t`` owns nodes ``node_offset[t]:node_offset[t + 1]`` and its root is
    the first of them. Child indices are tree-local. ``feature < 0`` marks a
    leaf, whose ``left``/``right`` slots hold the global ``[start, end)`` range
    of its training rows in ``leaf_rows``.
    """

    def __init__(self, config, y_train, feature, threshold, left, right, leaf_rows, node_offset):
        self.config = config
        self.y_train = np.asarray(y_train, np.float64)
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.leaf_rows = leaf_rows
        self.node_offset = node_offset
        # leaves as (distinct target, multiplicity) groups
        self._y_unique, vid = np.unique(self.y_train, return_inverse=True)
        self._groups = _leaf_groups(feature, left, right, leaf_rows, vid.astype(np.int32))

    @property
    def n_trees(self) -> int:
        return int(self.node_offset.shape[0] - 1)

    @property
    def n_train(self) -> int:
        return int(self.y_train.shape[0])

    def tree(self, t: int) -> dict:
        """Node arrays of tree ``t`` plus a leaf-row list (``None`` for internal nodes)."""
        a, b = self.node_offset[t], self.node_offset[t + 1]
        feat = self.feature[a:b]
        return {
            "feature": feat, "threshold": self.threshold[a:b],
            "left": self.left[a:b], "right": self.right[a:b],
            "leaf_rows": [self.leaf_rows[lo:hi].tolist() if f < 0 else None
                          for f, lo, hi in zip(feat, self.left[a:b], self.right[a:b])],
        }

    def apply(self, X) -> np.ndarray:
        """Global leaf node index per (query, tree)."""
        X = _check_matrix(X)
        return _find_leaves(X, self.feature, self.threshold, self.left, self.right, self.node_offset)

    def predict_quantiles(self, X, qs) -> np.ndarray:
        """``(n_queries, len(qs))`` array of inf{y : F(y | x) >= q}."""
        qs = np.atleast_1d(np.asarray(qs, np.float64))
        if np.any(~(qs > 0) | ~(qs < 1)):
            raise ValueError("quantile levels must lie strictly between 0 and 1")
        leaves = self.apply(X)
        ids, doubt = _quantiles_kernel(leaves, self.left, self.right, *self._groups, qs)
        for i, a in zip(*np.nonzero(doubt)):
            ids[i, a] = self._exact_quantile_id(leaves[i], qs[a])
        return self._y_unique[ids]

    def _exact_quantile_id(self, leaves_i, q: float) -> int:
        """Rational-arithmetic quantile, for levels too close to a CDF step to trust floats."""
        vids, cnts, sizes = _pooled_groups(leaves_i, self.left, self.right, *self._groups)
        T = self.n_trees
        qf = Fraction(q)
        cum = Fraction(0)
        k, m = 0, vids.shape[0]
        while k < m:
            v = vids[k]
            while k < m and vids[k] == v:
                cum += Fraction(int(cnts[k]), int(sizes[k]) * T)
                k += 1
            if cum >= qf:
                return int(v)
        return int(vids[-1])

    def predict_quantile(self, x, q: float) -> float:
        return float(self.predict_quantiles(np.atleast_2d(x), [q])[0, 0])

    def predict_mean(self, X) -> np.ndarray:
        leaves = self.apply(X)
        return _mean_kernel(leaves, self.left, self.right, *self._groups, self._y_unique)

    def weights(self, x) -> np.ndarray:
        """Weight of every training row for a single query ``x``."""
        leaves = self.apply(np.atleast_2d(x))[0]
        w = np.zeros(self.n_train)
        for leaf in leaves:
            rows = self.leaf_rows[self.left[leaf]:self.right[leaf]]
            np.add.at(w, rows, 1.0 / (rows.shape[0] * self.n_trees))
        return w

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez_compressed(
                fh, format_version=np.int64(FORMAT_VERSION), kind=np.array("qrf"),
                config=np.array(json.dumps(asdict(self.config))), y_train=self.y_train,
                feature=self.feature, threshold=self.threshold, left=self.left, right=self.right,
                leaf_rows=self.leaf_rows, node_offset=self.node_offset)

    @classmethod
    def load(cls, path) -> "QrfModel":
        with np.load(path, allow_pickle=False) as z:
            if str(z["kind"]) != "qrf" or int(z["format_version"]) != FORMAT_VERSION:
                raise ValueError(f"{path}: not a version-{FORMAT_VERSION} QRF model file")
            cfg = QrfConfig(**json.loads(str(z["config"])))
            return cls(cfg, z["y_train"], z["feature"], z["threshold"], z["left"], z["right"],
                       z["leaf_rows"], z["node_offset"])


def _check_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, np.float64)))
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    return X


def _fit_one(X, y, sorted_rows, cfg: QrfConfig, t: int):
    n = X.shape[0]
    seed = tree_seed(cfg.seed, t)
    if cfg.bootstrap:
        boot = np.random.default_rng(seed).integers(0, n, size=n).astype(np.int64)
        order = _bootstrap_order(sorted_rows, boot, n)
    else:
        boot = np.arange(n, dtype=np.int64)
        order = sorted_rows.copy()
    n_try = X.shape[1] if cfg.max_features == "all" else min(int(cfg.max_features), X.shape[1])
    rng_state = np.uint64(splitmix64(seed) | 1)
    return _grow_tree(X, y, boot, order, cfg.min_samples_split, cfg.min_samples_leaf, n_try,
                      rng_state)


def fit(X, y, cfg: QrfConfig | None = None) -> QrfModel:
    cfg = cfg or QrfConfig()
    X = _check_matrix(X)
    y = np.ascontiguousarray(np.asarray(y, np.float64).ravel())
    if X.shape[0] == 0:
        raise ValueError("cannot fit a forest on zero samples")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and targets have different lengths")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("features and targets must be finite")
    sorted_rows = np.ascontiguousarray(
        np.stack([np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]).astype(np.int64))

    def job(t):
        return _fit_one(X, y, sorted_rows, cfg, t)

    jobs = min(worker_count(cfg.n_jobs), cfg.n_trees)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(job, range(cfg.n_trees)))
    else:
        trees = [job(t) for t in range(cfg.n_trees)]

    node_offset = np.zeros(cfg.n_trees + 1, np.int64)
    node_offset[1:] = np.cumsum([tr[0].shape[0] for tr in trees])
    leaf_base = np.concatenate([[0], np.cumsum([tr[4].shape[0] for tr in trees])[:-1]])
    feature = np.concatenate([tr[0] for tr in trees])
    threshold = np.concatenate([tr[1] for tr in trees])
    left = np.concatenate([tr[2] for tr in trees])
    right = np.concatenate([tr[3] for tr in trees])
    base = np.repeat(leaf_base, np.diff(node_offset)).astype(np.int64)
    is_leaf = feature < 0
    if leaf_base[-1] + X.shape[0] >= 2 ** 31:
        raise ValueError("forest too large for 32-bit leaf indexing")
    left[is_leaf] += base[is_leaf].astype(np.int32)
    right[is_leaf] += base[is_leaf].astype(np.int32)
    leaf_rows = np.concatenate([tr[4] for tr in trees])
    return QrfModel(cfg, y, feature, threshold, left, right, leaf_rows, node_offset)


