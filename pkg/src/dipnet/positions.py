"""Implicit positions: correlation-weighted centroids over the patch grid.

Each part feature is compared with every patch feature; inverse Euclidean
distances become a score map, a joint softmax over the whole grid turns the
map into weights, and the weighted sum of normalized patch locations gives
the part a coordinate in image space. All three steps are differentiable.
"""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_EPSILON = 1e-6

# floor added to squared distances before the root so the gradient stays
# finite when a part feature coincides with a patch feature
_SQ_FLOOR = 1e-20


def patch_grid(n_rows, n_cols, dtype=None):
    """Normalized locations l(i,j) = (i/N_H, j/N_W), flattened row-major.

    Returns an (N, 2) array; both coordinates lie in (0, 1], with the first
    coordinate indexed along the vertical (row) axis.
    """
    i = np.arange(1, n_rows + 1) / n_rows
    j = np.arange(1, n_cols + 1) / n_cols
    grid = np.stack(np.meshgrid(i, j, indexing="ij"), axis=-1).reshape(-1, 2)
    return grid.astype(dtype if dtype is not None else ad.default_dtype())


def correlation(dip_k, patch_features, epsilon=DEFAULT_EPSILON):
    """Inverse-distance scores between one part feature and all patches.

    ``patch_features`` is (N_H, N_W, D); the result is (N_H, N_W) with
    entries 1 / (||dip - f|| + epsilon).
    """
    pf = patch_features if isinstance(patch_features, Tensor) else Tensor(patch_features)
    dk = dip_k if isinstance(dip_k, Tensor) else Tensor(dip_k)
    if not np.all(np.isfinite(pf.data)) or not np.all(np.isfinite(dk.data)):
        raise ad.NonFiniteError("correlation: non-finite feature input")
    n_rows, n_cols, D = pf.shape
    flat = ad.reshape(pf, (n_rows * n_cols, D))
    diff = flat - ad.broadcast_to(ad.reshape(dk, (1, D)), (n_rows * n_cols, D))
    sq = ad.sum_(diff * diff, axis=1)
    dist = ad.sqrt(sq + _SQ_FLOOR)
    return ad.reshape(1.0 / (dist + epsilon), (n_rows, n_cols))


def position_weights(c_k):
    """Joint softmax over every grid cell (not per-row)."""
    ck = c_k if isinstance(c_k, Tensor) else Tensor(c_k)
    n_rows, n_cols = ck.shape
    flat = ad.softmax(ad.reshape(ck, (n_rows * n_cols,)), axis=-1)
    return ad.reshape(flat, (n_rows, n_cols))


def implicit_position(w_k, grid=None):
    """Weighted centroid of patch locations; returns a (2,) tensor."""
    wk = w_k if isinstance(w_k, Tensor) else Tensor(w_k)
    n_rows, n_cols = wk.shape
    if grid is None:
        grid = patch_grid(n_rows, n_cols, wk.dtype)
    g = grid if isinstance(grid, Tensor) else Tensor(grid)
    return ad.reshape(
        ad.matmul(ad.reshape(wk, (1, n_rows * n_cols)), g), (2,)
    )


def implicit_positions_batch(dips, patches, epsilon=DEFAULT_EPSILON):
    """Positions and score maps for a whole batch.

    ``dips`` is (B, M, D) and ``patches`` (B, N_H, N_W, D). Returns
    (positions, weights) shaped (B, M, 2) and (B, M, N) where N is the
    flattened grid size.
    """
    B, M, D = dips.shape
    _, n_rows, n_cols, _ = patches.shape
    N = n_rows * n_cols
    pf = ad.reshape(patches, (B, N, D))

    dot = ad.matmul(dips, ad.transpose(pf, (0, 2, 1)))  # (B, M, N)
    dn = ad.reshape(ad.sum_(dips * dips, axis=2), (B, M, 1))
    pn = ad.reshape(ad.sum_(pf * pf, axis=2), (B, 1, N))
    sq = ad.relu(
        ad.broadcast_to(dn, (B, M, N)) + ad.broadcast_to(pn, (B, M, N)) - 2.0 * dot
    )
    dist = ad.sqrt(sq + _SQ_FLOOR)
    corr = 1.0 / (dist + epsilon)
    weights = ad.softmax(corr, axis=-1)
    grid = Tensor(patch_grid(n_rows, n_cols, dips.dtype))
    positions = ad.matmul(weights, grid)  # (B, M, 2)
    return positions, weights


def write_score_map_pgm(path, w_k):
    """Serialize one weight matrix as an 8-bit binary portable graymap.

    Values are scaled so the largest weight maps to 255; row-major order.
    """
    w = np.asarray(w_k.data if isinstance(w_k, Tensor) else w_k, dtype=np.float64)
    top = w.max()
    scaled = np.zeros_like(w) if top <= 0 else w / top * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Read back a binary P5 graymap; returns a uint8 array."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM: {magic!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError("only 8-bit graymaps supported")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def write_positions_csv(path, rows):
    """Write per-part position rows: (k, p_x, p_y[, extra...])."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["k", "p_x", "p_y"]
        if rows and len(rows[0]) > 3:
            header += ["phat_x", "phat_y", "w"][: len(rows[0]) - 3]
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
