"""Connected-component labeling by iterated masked max-pooling, and the density
penalty on components flagged as disconnected."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

DEFAULT_THRESHOLD = 0.1
DEFAULT_MAX_ITERS = 2000


@dataclass
class ComponentLabels:
    """Result of labeling: equal values in q mark one 8-connected component.

    q is 0 on background. disconnected is filled by conn_loss once a size
    threshold is known; until then it is all False.
    """

    q: np.ndarray  # (h, w) int64
    counts: dict  # label -> cell count
    disconnected: np.ndarray  # (h, w) bool
    iterations: int
    converged: bool


def binarize(rho: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Hard mask M = (rho >= threshold). Carries no gradient."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return np.asarray(rho) >= threshold


def ccl_labels(mask: np.ndarray, max_iters: int = DEFAULT_MAX_ITERS) -> ComponentLabels:
    """Label the 8-connected components of a boolean mask.

    Labels start as row-major indices 1..h*w (zeroed on background) and each
    iteration takes a 3x3 max-pool re-masked by M, until a fixed point. Every
    component ends up labeled by the largest initial index it contains.
    """
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    q = np.arange(1, h * w + 1, dtype=np.int64).reshape(h, w)
    q[~mask] = 0

    iterations = 0
    converged = False
    for _ in range(max_iters):
        # zero padding at the border: background never wins a max
        nxt = maximum_filter(q, size=3, mode="constant", cval=0)
        nxt[~mask] = 0
        iterations += 1
        if np.array_equal(nxt, q):
            converged = True
            q = nxt
            break
        q = nxt
    if not converged:
        warnings.warn(f"component labeling hit the {max_iters}-iteration cap "
                      "before reaching a fixed point")

    labels, counts = np.unique(q[mask], return_counts=True)
    return ComponentLabels(
        q=q,
        counts={int(l): int(c) for l, c in zip(labels, counts)},
        disconnected=np.zeros((h, w), dtype=bool),
        iterations=iterations,
        converged=converged,
    )


def conn_loss(rho: np.ndarray, labels: ComponentLabels, delta: float):
    """Total density inside flagged components, and its gradient.

    Components holding fewer than delta*h*w cells are flagged, except the
    single largest component, which is always retained (ties broken toward the
    smaller label). The flag mask is treated as constant, so the gradient is
    its indicator. Updates labels.disconnected in place.
    """
    rho = np.asarray(rho, dtype=np.float64)
    h, w = labels.q.shape
    if rho.shape != (h, w):
        raise ValueError(f"density shape {rho.shape} != label shape {(h, w)}")
    flagged = np.zeros((h, w), dtype=bool)
    if labels.counts:
        cutoff = delta * h * w
        largest = max(labels.counts, key=lambda l: (labels.counts[l], -l))
        small = [l for l, c in labels.counts.items() if c < cutoff and l != largest]
        if small:
            flagged = np.isin(labels.q, small)
    labels.disconnected = flagged
    grad = flagged.astype(np.float64)
    return float(rho[flagged].sum()), grad


def labels_to_png(labels: ComponentLabels, path) -> None:
    """Debug dump: each component in a distinct color, background black."""
    from PIL import Image

    q = labels.q
    ids = {l: i + 1 for i, l in enumerate(sorted(labels.counts))}
    indexed = np.zeros(q.shape, dtype=np.int64)
    for l, i in ids.items():
        indexed[q == l] = i
    rng = np.random.default_rng(0)
    palette = np.vstack([[0, 0, 0], rng.integers(50, 256, size=(max(len(ids), 1), 3))])
    Image.fromarray(palette[indexed].astype(np.uint8), mode="RGB").save(path)
