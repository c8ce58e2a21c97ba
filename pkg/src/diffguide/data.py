"""Bi-temporal datasets: synthetic generator, PNG folder I/O, perturbations, splitting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, ShapeError

SUBDIRS = ("A", "B", "label")


@dataclass
class BitemporalSample:
    pre: np.ndarray  # [3,H,W] float32 in [0,1]
    post: np.ndarray
    mask: np.ndarray  # [H,W] uint8 in {0,1}
    id: str


@dataclass
class Dataset:
    pre: np.ndarray  # [N,3,H,W]
    post: np.ndarray
    mask: np.ndarray  # [N,H,W]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        if self.pre.shape != self.post.shape or self.pre.shape[0] != n or self.mask.shape != (n, *self.pre.shape[2:]):
            raise ShapeError(
                f"inconsistent dataset arrays: pre {self.pre.shape}, post {self.post.shape}, "
                f"mask {self.mask.shape}, {n} ids"
            )

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> BitemporalSample:
        return BitemporalSample(self.pre[i], self.post[i], self.mask[i], self.ids[i])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.pre[idx], self.post[idx], self.mask[idx], [self.ids[i] for i in idx])

    def change_fraction(self) -> float:
        return float(self.mask.mean()) if len(self) else 0.0


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth multi-scale colour field, roughly in [0.2, 0.6]."""
    base = rng.uniform(0.25, 0.5, size=(3, 1, 1))
    img = np.repeat(base, size, axis=1).repeat(size, axis=2)
    for sigma, amp in ((size / 8, 0.12), (3.0, 0.05), (1.0, 0.03)):
        field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        field_ /= field_.std() + 1e-12
        tint = rng.uniform(0.6, 1.0, size=(3, 1, 1))
        img = img + amp * tint * field_
    return img


def _shape_mask(rng: np.random.Generator, size: int, min_side: int, max_side: int) -> np.ndarray:
    """Random rectangle (axis-aligned or rotated) or ellipse as a boolean mask."""
    a = rng.uniform(min_side, max_side) / 2
    b = rng.uniform(min_side, max_side) / 2
    margin = int(np.ceil(max(a, b))) + 1
    cy, cx = rng.uniform(margin, size - margin, size=2)
    kind = rng.integers(3)
    theta = 0.0 if kind == 0 else rng.uniform(0, np.pi)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    if kind == 2:
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _roof_colour(rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return rng.uniform(0.7, 0.95, size=3)  # bright concrete / metal
    c = rng.uniform(0.05, 0.25, size=3)
    c[rng.integers(3)] = rng.uniform(0.6, 0.9)  # saturated tile
    return c


def _paint(img: np.ndarray, mask: np.ndarray, colour: np.ndarray, rng: np.random.Generator) -> None:
    shade = colour[:, None] * rng.uniform(0.95, 1.05, size=(1, int(mask.sum())))
    img[:, mask] = shade


def synth_pair(rng: np.random.Generator, size: int, change_fraction: float = 0.1, static_objects: int = 6,
               illumination: float = 0.1, noise: float = 0.02) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One scene: returns ``pre [3,S,S]``, ``post [3,S,S]``, ``mask [S,S]``.

    Unchanged objects appear in both dates. Changed objects are added in the
    later image or removed from it until the changed area reaches roughly
    ``change_fraction``. The later image also receives a global gain/offset and
    pixel noise, neither of which is marked as change.
    """
    bg = _texture(rng, size)
    pre, post = bg.copy(), bg.copy()
    occupied = np.zeros((size, size), dtype=bool)
    mask = np.zeros((size, size), dtype=bool)
    min_side, max_side = max(4, size // 16), max(6, size // 5)

    def place():
        for _ in range(20):
            m = _shape_mask(rng, size, min_side, max_side)
            if not (ndimage.binary_dilation(m, iterations=2) & occupied).any():
                occupied[m] = True
                return m
        return None

    for _ in range(static_objects):
        m = place()
        if m is not None:
            colour = _roof_colour(rng)
            _paint(pre, m, colour, rng)
            post[:, m] = pre[:, m]
    target = change_fraction * size * size
    attempts = 0
    while mask.sum() < target and attempts < 50:
        attempts += 1
        m = place()
        if m is None:
            continue
        _paint(post if rng.random() < 0.6 else pre, m, _roof_colour(rng), rng)
        mask |= m
    gain = 1.0 + rng.uniform(-illumination, illumination, size=(3, 1, 1))
    offset = rng.uniform(-illumination / 2, illumination / 2, size=(3, 1, 1))
    post = post * gain + offset + noise * rng.standard_normal(post.shape)
    pre = pre + noise * rng.standard_normal(pre.shape)
    return (np.clip(pre, 0, 1).astype(np.float32), np.clip(post, 0, 1).astype(np.float32), mask.astype(np.uint8))


def synth_generate(n: int, size: int = 128, seed: int = 0, change_fraction: float = 0.1, **kwargs) -> Dataset:
    """Deterministic synthetic dataset; sample ``i`` depends only on ``(seed, i)``."""
    if size < 64:
        raise ContractError(f"synthetic images need size >= 64, got {size}")
    if not 0 <= change_fraction < 0.5:
        raise ContractError(f"change_fraction must lie in [0, 0.5), got {change_fraction}")
    pre = np.empty((n, 3, size, size), dtype=np.float32)
    post = np.empty_like(pre)
    mask = np.empty((n, size, size), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pre[i], post[i], mask[i] = synth_pair(rng, size, change_fraction, **kwargs)
    return Dataset(pre, post, mask, [f"synth_{seed}_{i:05d}" for i in range(n)])


# ---------------------------------------------------------------------------
# PNG folders (A/, B/, label/)
# ---------------------------------------------------------------------------

def read_rgb(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ContractError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise ContractError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def write_rgb(path: str | Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, "L").save(path)


def load_dataset(root: str | Path) -> Dataset:
    """Read ``A/*.png``, ``B/*.png`` and ``label/*.png`` with matching stems."""
    root = Path(root)
    stems = {}
    for sub in SUBDIRS:
        d = root / sub
        if not d.is_dir():
            raise ContractError(f"missing directory {d}")
        stems[sub] = {p.stem: p for p in d.glob("*.png")}
    all_ids = set().union(*stems.values())
    missing = {sub: sorted(all_ids - set(s)) for sub, s in stems.items()}
    if any(missing.values()):
        detail = "; ".join(f"{sub} lacks {', '.join(ids)}" for sub, ids in missing.items() if ids)
        raise ContractError(f"unmatched ids in {root}: {detail}")
    if not all_ids:
        raise ContractError(f"no PNG triples found under {root}")
    ids = sorted(all_ids)
    pre, post, mask = [], [], []
    for i in ids:
        a, b, m = read_rgb(stems["A"][i]), read_rgb(stems["B"][i]), read_mask(stems["label"][i])
        if a.shape != b.shape or a.shape[1:] != m.shape:
            raise ShapeError(f"id {i}: sizes differ (A {a.shape[1:]}, B {b.shape[1:]}, label {m.shape})")
        if pre and a.shape != pre[0].shape:
            raise ShapeError(f"id {i}: size {a.shape[1:]} differs from {pre[0].shape[1:]}")
        pre.append(a)
        post.append(b)
        mask.append(m)
    return Dataset(np.stack(pre), np.stack(post), np.stack(mask), ids)


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, name in enumerate(ds.ids):
        write_rgb(root / "A" / f"{name}.png", ds.pre[i])
        write_rgb(root / "B" / f"{name}.png", ds.post[i])
        write_mask(root / "label" / f"{name}.png", ds.mask[i])


# ---------------------------------------------------------------------------
# perturbations and splits
# ---------------------------------------------------------------------------

def gaussian_kernel3(sigma: float) -> np.ndarray:
    x = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    return np.outer(k, k)


def perturb(ds: Dataset, kind: str, sigma: float, seed: int = 0) -> Dataset:
    """Degrade both dates: ``gauss_noise`` (std ``sigma``, clamped) or 3x3 ``gauss_blur``."""
    if sigma < 0:
        raise ContractError(f"sigma must be non-negative, got {sigma}")
    if kind not in ("gauss_noise", "gauss_blur"):
        raise ContractError(f"unknown perturbation {kind!r}")
    if sigma == 0:
        return Dataset(ds.pre.copy(), ds.post.copy(), ds.mask.copy(), list(ds.ids))
    if kind == "gauss_noise":
        rng = np.random.default_rng(seed)

        def apply(x):
            noisy = x + rng.normal(0.0, sigma, size=x.shape)
            return np.clip(noisy, 0.0, 1.0).astype(x.dtype)
    else:
        kernel = gaussian_kernel3(sigma)[None, None]

        def apply(x):
            return ndimage.convolve(x, kernel.astype(x.dtype), mode="reflect")

    return Dataset(apply(ds.pre), apply(ds.post), ds.mask.copy(), list(ds.ids))


def split(ds: Dataset, val_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic train/val split: ids ranked by SHA-1, the last fraction is validation."""
    ranked = sorted(range(len(ds)), key=lambda i: hashlib.sha1(ds.ids[i].encode()).hexdigest())
    n_val = int(round(len(ds) * val_fraction))
    cut = len(ds) - n_val
    return ds.subset(sorted(ranked[:cut])), ds.subset(sorted(ranked[cut:]))
