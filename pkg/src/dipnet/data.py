"""Synthetic identity dataset: procedural figures, disk layout, sampling.

Each identity is a procedurally drawn figure (head, torso, limbs, one
accessory) whose colors and proportions come from an identity-keyed stream;
per-image streams add pose/translation/scale/lighting jitter so images of
one identity vary while staying recognizable. Renders are deterministic
functions of (seed, identity, camera, index).

Disk layout: ``images/<id>_<idx>.ppm`` (binary P6) plus ``labels.csv`` with
``filename,identity,camera`` rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InsufficientDataError(ValueError):
    """Raised when a dataset cannot satisfy a sampling request."""


@dataclass
class DataSpec:
    """What to generate: counts, extents, occlusion."""

    num_ids: int = 16
    images_per_id: int = 8
    occlusion_rate: float = 0.0
    H: int = 64
    W: int = 32
    camera: int = 0


@dataclass
class SyntheticDataset:
    images: np.ndarray              # (n, H, W, 3) float32 in [0, 1]
    labels: np.ndarray              # (n,) int64
    cameras: np.ndarray             # (n,) int64
    masks: list = field(default_factory=list)  # per-image bool mask or None
    identity_params: list = field(default_factory=list)

    @property
    def num_ids(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.images)


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(key))


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def identity_params(seed, identity):
    """Generator parameters for one identity; stable across splits."""
    rng = _rng(seed, 0x1D, identity)
    shirt = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95))
    pants = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.5, 0.9), rng.uniform(0.35, 0.8))
    skin = (rng.uniform(0.6, 0.9), rng.uniform(0.45, 0.7), rng.uniform(0.3, 0.55))
    accessory = rng.choice(["hat", "backpack", "bag", "scarf"])
    return {
        "shirt": shirt,
        "pants": pants,
        "skin": skin,
        "torso_w": rng.uniform(10, 15),
        "torso_h": rng.uniform(16, 21),
        "leg_len": rng.uniform(14, 19),
        "leg_w": rng.uniform(2.5, 4.5),
        "head_r": rng.uniform(3.2, 5.2),
        "arm_w": rng.uniform(1.8, 3.0),
        "accessory": str(accessory),
        "acc_color": _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0)),
        "acc_side": int(rng.integers(0, 2)),
        "acc_size": rng.uniform(0.8, 1.3),
    }


def _fill_rect(img, r0, r1, c0, c1, color):
    H, W = img.shape[:2]
    r0, r1 = max(0, int(round(r0))), min(H, int(round(r1)))
    c0, c1 = max(0, int(round(c0))), min(W, int(round(c1)))
    if r0 < r1 and c0 < c1:
        img[r0:r1, c0:c1] = color
    return r0, r1, c0, c1


def _fill_ellipse(img, cr, cc, rr, rc, color):
    H, W = img.shape[:2]
    r = np.arange(H)[:, None]
    c = np.arange(W)[None, :]
    mask = ((r - cr) / rr) ** 2 + ((c - cc) / rc) ** 2 <= 1.0
    img[mask] = color


def render_identity(params, rng, H=64, W=32):
    """Draw one image of an identity with per-image jitter from ``rng``."""
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:] = rng.uniform(0.08, 0.35)
    img += rng.normal(0, 0.02, size=img.shape)

    s = rng.uniform(0.88, 1.12) * H / 64.0
    cx = W / 2 + rng.uniform(-3.5, 3.5) * W / 32.0
    top = rng.uniform(3, 8) * H / 64.0
    sway = rng.uniform(-2.0, 2.0)

    head_r = params["head_r"] * s
    torso_w = params["torso_w"] * s
    torso_h = params["torso_h"] * s
    leg_len = params["leg_len"] * s
    leg_w = params["leg_w"] * s
    arm_w = params["arm_w"] * s

    jitter = rng.uniform(-0.04, 0.04, size=3)

    def tint(color):
        return np.clip(np.asarray(color) + jitter, 0, 1)

    head_cy = top + head_r
    torso_top = head_cy + head_r * 0.9
    torso_bot = torso_top + torso_h
    leg_bot = torso_bot + leg_len

    # legs, slightly swayed
    gap = rng.uniform(0.5, 2.0) * s
    _fill_rect(img, torso_bot, leg_bot, cx - gap / 2 - leg_w + sway / 2,
               cx - gap / 2 + sway / 2, tint(params["pants"]))
    _fill_rect(img, torso_bot, leg_bot, cx + gap / 2 - sway / 2,
               cx + gap / 2 + leg_w - sway / 2, tint(params["pants"]))
    # torso and arms
    _fill_rect(img, torso_top, torso_bot, cx - torso_w / 2, cx + torso_w / 2,
               tint(params["shirt"]))
    arm_drop = rng.uniform(-1.5, 1.5)
    _fill_rect(img, torso_top + 1 + arm_drop, torso_bot - 2 + arm_drop,
               cx - torso_w / 2 - arm_w, cx - torso_w / 2, tint(params["shirt"]))
    _fill_rect(img, torso_top + 1 - arm_drop, torso_bot - 2 - arm_drop,
               cx + torso_w / 2, cx + torso_w / 2 + arm_w, tint(params["shirt"]))
    # head
    _fill_ellipse(img, head_cy, cx + sway / 2, head_r, head_r * 0.8, tint(params["skin"]))

    acc = tint(params["acc_color"])
    size = params["acc_size"] * s
    side = -1 if params["acc_side"] == 0 else 1
    kind = params["accessory"]
    if kind == "hat":
        _fill_rect(img, head_cy - head_r - 2.5 * size, head_cy - head_r * 0.55,
                   cx - head_r * size, cx + head_r * size, acc)
    elif kind == "backpack":
        _fill_rect(img, torso_top + 2, torso_top + 2 + 8 * size,
                   cx + side * (torso_w / 2 + arm_w),
                   cx + side * (torso_w / 2 + arm_w + 3.5 * size), acc)
    elif kind == "bag":
        _fill_rect(img, torso_bot - 5 * size, torso_bot + 2 * size,
                   cx + side * (torso_w / 2 + arm_w * 0.5),
                   cx + side * (torso_w / 2 + arm_w * 0.5 + 4 * size), acc)
    elif kind == "scarf":
        _fill_rect(img, torso_top - 1.5 * size, torso_top + 1.8 * size,
                   cx - torso_w / 2, cx + torso_w / 2, acc)

    img *= rng.uniform(0.85, 1.15)
    figure_box = (top, min(leg_bot, H), cx - torso_w / 2 - arm_w, cx + torso_w / 2 + arm_w)
    return np.clip(img, 0, 1).astype(np.float32), figure_box


def occlude(img, figure_box, rng):
    """Mask a contiguous block covering 20-50 percent of the figure box."""
    H, W = img.shape[:2]
    r0, r1, c0, c1 = figure_box
    r0, r1 = max(0, int(r0)), min(H, int(np.ceil(r1)))
    c0, c1 = max(0, int(c0)), min(W, int(np.ceil(c1)))
    bh, bw = r1 - r0, c1 - c0
    frac = rng.uniform(0.2, 0.5)
    aspect = rng.uniform(0.5, 2.0)
    oh = min(bh, max(1, int(round(np.sqrt(frac * bh * bw * aspect)))))
    ow = min(bw, max(1, int(round(frac * bh * bw / oh))))
    orow = int(rng.integers(r0, max(r0 + 1, r1 - oh + 1)))
    ocol = int(rng.integers(c0, max(c0 + 1, c1 - ow + 1)))
    out = img.copy()
    out[orow:orow + oh, ocol:ocol + ow] = rng.uniform(0.2, 0.8, size=3).astype(img.dtype)
    mask = np.zeros((H, W), dtype=bool)
    mask[orow:orow + oh, ocol:ocol + ow] = True
    return out, mask


def generate_dataset(spec: DataSpec, seed):
    """Render a full split; deterministic given (spec, seed)."""
    images, labels, cameras, masks, id_params = [], [], [], [], []
    for identity in range(spec.num_ids):
        params = identity_params(seed, identity)
        id_params.append(params)
        for idx in range(spec.images_per_id):
            rng = _rng(seed, 0x2E, identity, spec.camera, idx)
            img, box = render_identity(params, rng, spec.H, spec.W)
            mask = None
            if spec.occlusion_rate > 0 and rng.random() < spec.occlusion_rate:
                img, mask = occlude(img, box, rng)
            images.append(img)
            labels.append(identity)
            cameras.append(spec.camera)
            masks.append(mask)
    for a in range(spec.num_ids):
        for b in range(a + 1, spec.num_ids):
            if id_params[a] == id_params[b]:
                raise AssertionError(f"identities {a} and {b} collide")
    return SyntheticDataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        cameras=np.array(cameras, dtype=np.int64),
        masks=masks,
        identity_params=id_params,
    )


# -- PPM persistence -----------------------------------------------------


def write_ppm(path, image):
    """Binary P6, 8-bit; image is float in [0, 1] or uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    """Read binary P6; returns float32 in [0, 1]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float32) / maxval)


def save_dataset(ds: SyntheticDataset, root):
    """Write the images/ + labels.csv layout."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    counters = {}
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "identity", "camera"])
        for img, label, cam in zip(ds.images, ds.labels, ds.cameras):
            idx = counters.get(int(label), 0)
            counters[int(label)] = idx + 1
            name = f"{int(label)}_{idx}.ppm"
            write_ppm(img_dir / name, img)
            writer.writerow([name, int(label), int(cam)])


def load_dataset(root):
    """Read a dataset directory back into memory."""
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no labels.csv under {root}")
    images, labels, cameras = [], [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            images.append(read_ppm(root / "images" / row["filename"]))
            labels.append(int(row["identity"]))
            cameras.append(int(row["camera"]))
    return SyntheticDataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=np.int64),
        cameras=np.array(cameras, dtype=np.int64),
        masks=[None] * len(images),
    )


# -- batch sampling -------------------------------------------------------


def epoch_capacity(labels, p_ids, k_imgs):
    """Batches one epoch can supply without reusing an image."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return int((counts // k_imgs).sum()) // p_ids


def pk_batches(labels, p_ids, k_imgs, rng):
    """Identity-balanced batches: p_ids distinct identities, k_imgs each.

    Images are consumed without replacement across one epoch; identities
    with the most unconsumed images are preferred so the pool drains evenly.
    """
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < p_ids:
        raise InsufficientDataError(f"{len(ids)} identities < P={p_ids}")
    if (counts < k_imgs).any():
        raise InsufficientDataError(f"some identity has fewer than K={k_imgs} images")
    pools = {}
    for identity in ids:
        idxs = np.flatnonzero(labels == identity)
        pools[int(identity)] = list(rng.permutation(idxs))
    target = epoch_capacity(labels, p_ids, k_imgs)
    batches = []
    while len(batches) < target:
        avail = [i for i, pool in pools.items() if len(pool) >= k_imgs]
        if len(avail) < p_ids:
            break
        remaining = np.array([len(pools[i]) for i in avail])
        order = rng.permutation(len(avail))
        chosen = sorted(order, key=lambda o: -remaining[o])[:p_ids]
        batch = []
        for o in chosen:
            identity = avail[o]
            for _ in range(k_imgs):
                batch.append(int(pools[identity].pop()))
        batches.append(np.array(batch))
    return batches


# -- random erasing -------------------------------------------------------


@dataclass
class EraseConfig:
    prob: float = 0.5
    area: tuple = (0.02, 0.33)
    aspect: tuple = (0.3, 3.3)


def random_erase(image, rng, config: EraseConfig):
    """Fill one random rectangle with noise, with probability ``prob``."""
    if rng.random() >= config.prob:
        return image
    H, W = image.shape[:2]
    for _ in range(1000):
        area = rng.uniform(*config.area) * H * W
        aspect = rng.uniform(*config.aspect)
        eh = int(round(np.sqrt(area * aspect)))
        ew = int(round(np.sqrt(area / aspect)))
        if 0 < eh <= H and 0 < ew <= W:
            r = int(rng.integers(0, H - eh + 1))
            c = int(rng.integers(0, W - ew + 1))
            out = image.copy()
            out[r:r + eh, c:c + ew] = rng.random((eh, ew, image.shape[2])).astype(image.dtype)
            return out
    raise RuntimeError("random_erase could not place a rectangle")
