"""Synthetic 10-class 16x16 grayscale task and the iid / Dirichlet splits."""
from __future__ import annotations

import numpy as np

from .errors import PreconditionError
from .nn import LabeledDataset

IMAGE = 16
CANVAS = 10
OFFSET = 5  # shapes live in rows/cols 4..15 after a +-1 jitter, clear of a top-left 5x5 stamp


def _templates():
    n = CANVAS
    r, c = np.mgrid[0:n, 0:n]
    masks = [
        (r >= 4) & (r <= 5),                          # horizontal bar
        (c >= 4) & (c <= 5),                          # vertical bar
        np.abs(r - c) <= 1,                           # diagonal
        np.abs(r + c - (n - 1)) <= 1,                 # anti-diagonal
        (r == 0) | (r == n - 1) | (c == 0) | (c == n - 1),  # square outline
        (r >= 3) & (r <= 6) & (c >= 3) & (c <= 6),    # filled block
        (np.abs(r - c) <= 0) | (np.abs(r + c - (n - 1)) <= 0),  # thin X
        np.abs(np.hypot(r - 4.5, c - 4.5) - 3.5) < 0.8,  # ring
        (r <= 1) | ((c >= 4) & (c <= 5)),             # T
        (c <= 1) | (r >= n - 2),                      # L
    ]
    return np.stack([m.astype(np.float64) for m in masks])


TEMPLATES = _templates()
NUM_CLASSES = len(TEMPLATES)


def synthetic_dataset(n, seed, noise=0.2, classes=None):
    """``n`` images, classes balanced round-robin then shuffled."""
    rng = np.random.default_rng(seed)
    classes = np.arange(NUM_CLASSES) if classes is None else np.asarray(classes)
    labels = classes[np.arange(n) % len(classes)]
    labels = labels[rng.permutation(n)]
    images = np.zeros((n, IMAGE, IMAGE))
    shifts = rng.integers(-1, 2, size=(n, 2))
    intensity = rng.uniform(0.6, 1.0, size=n)
    for i in range(n):
        r0, c0 = OFFSET + shifts[i, 0], OFFSET + shifts[i, 1]
        images[i, r0:r0 + CANVAS, c0:c0 + CANVAS] = TEMPLATES[labels[i]] * intensity[i]
    images += rng.normal(0.0, noise, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(images[..., None], labels)


def iid_split(data, k, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    return [data.subset(np.sort(part)) for part in np.array_split(order, k)]


def dirichlet_split(data, k, concentration, seed, min_size=1, max_tries=1000, return_shares=False):
    """Per class, share its samples among ``k`` parts by Dirichlet(concentration) proportions.

    Redraws (from the same seeded stream) until every part has ``min_size`` samples.
    """
    if concentration <= 0 or k < 1:
        raise PreconditionError("need concentration > 0 and k >= 1")
    rng = np.random.default_rng(seed)
    classes = np.unique(data.labels)
    for _ in range(max_tries):
        parts = [[] for _ in range(k)]
        shares = {}
        for cls in classes:
            idx = np.flatnonzero(data.labels == cls)
            idx = idx[rng.permutation(len(idx))]
            p = rng.dirichlet(np.full(k, float(concentration)))
            shares[int(cls)] = p
            cuts = (np.cumsum(p)[:-1] * len(idx)).astype(int)
            for j, piece in enumerate(np.split(idx, cuts)):
                parts[j].extend(piece.tolist())
        if min(len(p) for p in parts) >= min_size:
            out = [data.subset(np.sort(np.array(p, dtype=np.int64))) for p in parts]
            return (out, shares) if return_shares else out
    raise PreconditionError(f"no split with min_size={min_size} after {max_tries} draws")

