"""Semantic IDs through balanced residual K-means."""
from collections import Counter, defaultdict, namedtuple

import numpy as np

from sessrec import constants
from .perf import running_time
from .utils import rng_stream, verbose_print

Codebook = namedtuple('Codebook', ('level', 'centroids'))
KMeansResult = namedtuple('KMeansResult', ('codebook', 'assignment', 'iterations', 'converged'))
ItemEmbedding = namedtuple('ItemEmbedding', ('item_id', 'vector'))


def _as_matrix(points):
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=float)
    return np.stack([np.asarray(p, dtype=float) for p in points])


def balanced_kmeans(points, K, max_iters=constants.KMEANS_MAX_ITERS, seed=0, item_ids=None,
                    level=1):
    """Balanced K-means: each cluster in turn claims its ``w`` nearest unassigned points.

    With ``|points| = q * K + r`` the last cluster absorbs the ``r`` extra points. Distance
    ties are broken by item id. Iterates until the assignment repeats or ``max_iters``.
    """
    points = _as_matrix(points)
    n = len(points)
    if K < 1 or K > n:
        raise ValueError('K must be in [1, {}], got {}'.format(n, K))
    if max_iters < 1:
        raise ValueError('max_iters must be positive, got {}'.format(max_iters))
    ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    w = n // K
    rng = rng_stream(seed, 'tokenizer-level-%d' % level)
    centroids = points[np.sort(rng.choice(n, size=K, replace=False))].copy()

    assignment = None
    converged = False
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        unassigned = np.ones(n, dtype=bool)
        current = np.empty(n, dtype=np.int64)
        for k in range(K):
            candidates = np.flatnonzero(unassigned)
            dist = ((points[candidates] - centroids[k]) ** 2).sum(axis=1)
            order = np.lexsort((ids[candidates], dist))
            size = w if k < K - 1 else len(candidates)
            taken = candidates[order[:size]]
            current[taken] = k
            centroids[k] = points[taken].mean(axis=0)
            unassigned[taken] = False
        if assignment is not None and np.array_equal(current, assignment):
            converged = True
            break
        assignment = current
    return KMeansResult(Codebook(level, centroids), current, iterations, converged)


def nearest_codes(residuals, centroids, chunk=1024):
    """Index of the closest centroid per row; ties go to the lowest index."""
    codes = np.empty(len(residuals), dtype=np.int64)
    for start in range(0, len(residuals), chunk):
        block = residuals[start:start + chunk]
        dist = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        codes[start:start + chunk] = np.argmin(dist, axis=1)
    return codes


class CodebookStack:
    def __init__(self, levels, seed=0, report=None):
        if not levels:
            raise ValueError('A codebook stack needs at least one level.')
        shapes = {cb.centroids.shape for cb in levels}
        if len(shapes) != 1:
            raise ValueError('All levels must share K and d, got {}'.format(sorted(shapes)))
        self.levels = list(levels)
        self.K, self.d = levels[0].centroids.shape
        self.L = len(levels)
        self.seed = seed
        self.report = report or {}

    def quantize_many(self, embeddings):
        residuals = _as_matrix(embeddings).copy()
        if residuals.shape[1] != self.d:
            raise ValueError('Embedding dimension {} != codebook dimension {}'.format(
                residuals.shape[1], self.d))
        codes = np.empty((len(residuals), self.L), dtype=np.int64)
        for j, cb in enumerate(self.levels):
            codes[:, j] = nearest_codes(residuals, cb.centroids)
            residuals -= cb.centroids[codes[:, j]]
        return codes, residuals

    def quantize(self, e):
        codes, _ = self.quantize_many(np.asarray(e, dtype=float)[None, :])
        return tuple(int(c) for c in codes[0])

    def reconstruct(self, codes):
        codes = tuple(codes)
        if len(codes) != self.L:
            raise ValueError('Expected {} codes, got {}'.format(self.L, len(codes)))
        out = np.zeros(self.d)
        for cb, c in zip(self.levels, codes):
            if c < 0 or c >= self.K:
                raise IndexError('code {} outside [0, {})'.format(c, self.K))
            out = out + cb.centroids[c]
        return out


def quantize_item(e, stack):
    return stack.quantize(e)


def reconstruct(codes, stack):
    return stack.reconstruct(codes)


def fit_residual_stack(embeddings, K, L, seed=0, max_iters=constants.KMEANS_MAX_ITERS,
                       item_ids=None):
    """Fit ``L`` balanced K-means codebooks, each on the residual left by the previous one.

    Residuals subtract the nearest centroid, the same rule ``quantize`` applies.
    """
    if isinstance(embeddings, (list, tuple)) and embeddings and \
            isinstance(embeddings[0], ItemEmbedding):
        item_ids = [e.item_id for e in embeddings]
        embeddings = [e.vector for e in embeddings]
    residuals = _as_matrix(embeddings).copy()
    if len(residuals) == 0:
        raise ValueError('Cannot fit a codebook on an empty catalog.')
    report = {
        'input_norm': float((residuals ** 2).sum(axis=1).mean()),
        'residual_norms': [],
        'iterations': [],
        'converged': [],
        'cluster_sizes': [],
    }
    levels = []
    for level in range(1, L + 1):
        with running_time('Balanced K-means level %d' % level):
            result = balanced_kmeans(residuals, K, max_iters=max_iters, seed=seed,
                                     item_ids=item_ids, level=level)
        codes = nearest_codes(residuals, result.codebook.centroids)
        residuals -= result.codebook.centroids[codes]
        levels.append(result.codebook)
        report['residual_norms'].append(float((residuals ** 2).sum(axis=1).mean()))
        report['iterations'].append(result.iterations)
        report['converged'].append(result.converged)
        report['cluster_sizes'].append(np.bincount(result.assignment, minlength=K).tolist())
        verbose_print('Level {}: {} iterations, mean squared residual {:.6f}'.format(
            level, result.iterations, report['residual_norms'][-1]))
    return CodebookStack(levels, seed=seed, report=report)


class ItemIndex:
    """Prefix trie from semantic-ID prefixes to catalog items."""

    def __init__(self, item_ids, codes, L):
        self.L = L
        self._items = defaultdict(set)
        self._children = defaultdict(set)
        self.codes_by_item = {}
        for item_id, code in zip(item_ids, codes):
            code = tuple(int(c) for c in code)
            if len(code) != L:
                raise ValueError('Item {} has {} codes, expected {}'.format(item_id, len(code), L))
            self.codes_by_item[item_id] = code
            for depth in range(L + 1):
                self._items[code[:depth]].add(item_id)
                if depth < L:
                    self._children[code[:depth]].add(code[depth])
        self._children = {k: sorted(v) for k, v in self._children.items()}
        self.full = {k: sorted(v) for k, v in self._items.items() if len(k) == L}

    def items(self, prefix=()):
        return self._items.get(tuple(prefix), set())

    def children(self, prefix=()):
        return self._children.get(tuple(prefix), [])

    def contains(self, code):
        return tuple(code) in self.full

    def resolve(self, code):
        items = self.full.get(tuple(code))
        if not items:
            return None
        return items[0]

    def allowed_mask(self, prefix, K):
        mask = np.zeros(K, dtype=bool)
        mask[self.children(prefix)] = True
        return mask

    def collision_report(self):
        sizes = Counter(len(v) for v in self.full.values())
        return {
            'codes': len(self.full),
            'items': sum(len(v) for v in self.full.values()),
            'shared_codes': sum(c for s, c in sizes.items() if s > 1),
            'max_collision': max(sizes) if sizes else 0,
        }


def build_item_index(item_ids, embeddings, stack):
    codes, _ = stack.quantize_many(embeddings)
    return ItemIndex(list(item_ids), codes, stack.L)


def cluster_purity(level1_codes, labels):
    """Share of items whose level-1 code group agrees with the group's majority label."""
    groups = defaultdict(list)
    for code, label in zip(level1_codes, labels):
        groups[int(code)].append(label)
    majority = sum(Counter(v).most_common(1)[0][1] for v in groups.values())
    return majority / float(len(labels))
