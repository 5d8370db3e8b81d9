"""Procedural stand-ins for the restoration and style-transfer task suites.

``dfd_like``: 16x16 grayscale synthetic faces; each task restores one
distortion (mild blur, occlusion, strong blur, additive noise).

``gld_like``: 16x16 RGB landscapes; task ``i`` maps style ``i-1`` to style
``i`` of the same base image, so tasks form a chain of domains.

Images are ``[C, H, W]`` float64 in ``[0, 1]``. All randomness comes from
PCG64 streams keyed by ``(seed, suite, task, split)``, so train and test
sets never share a stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUITES = ("dfd_like", "gld_like")
SUITE_TASKS = {"dfd_like": 4, "gld_like": 3}
SUITE_METRIC = {"dfd_like": "psnr", "gld_like": "ssim"}
SIZE = 16

_SPLIT_CODE = {"train": 1, "test": 2}
_SUITE_CODE = {"dfd_like": 11, "gld_like": 22}
STREAMS = {"data": 1, "init": 2, "train": 3, "controller": 4}


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator seeded from an integer key via ``SeedSequence``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def stream_seed(seed: int, stream: str, *extra: int) -> int:
    """A 63-bit integer seed for a named stream of a run seed."""
    return int(make_rng(seed, STREAMS[stream], *extra).integers(2**63))


@dataclass(frozen=True)
class TaskSpec:
    suite: str
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int

    @property
    def metric(self) -> str:
        return SUITE_METRIC[self.suite]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.y_train.shape[1:]

    def train_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.x_train, self.y_train))


# ---------------------------------------------------------------------------
# faces


def _grid():
    return np.meshgrid(np.arange(SIZE, dtype=np.float64), np.arange(SIZE, dtype=np.float64))


def make_face(rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid()
    cx, cy = 7.5 + rng.uniform(-1.5, 1.5), 7.5 + rng.uniform(-1.0, 1.0)
    rx, ry = rng.uniform(4.5, 6.0), rng.uniform(5.5, 7.0)
    tone = rng.uniform(0.45, 0.75)
    light = rng.uniform(-0.2, 0.2)
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    head = np.clip((1.0 - d) / 0.15, 0.0, 1.0)
    img = rng.uniform(0.0, 0.08) + head * tone * (1.0 + light * (xx - cx) / rx)
    ex, ey = rng.uniform(1.8, 2.6), rng.uniform(1.2, 2.0)
    for sx in (-1.0, 1.0):
        r2 = (xx - cx - sx * ex) ** 2 + (yy - cy + ey) ** 2
        img = img - (img - 0.08) * np.exp(-r2 / (2 * 0.65 ** 2))
    my, half = cy + rng.uniform(2.2, 3.2), rng.uniform(1.0, 2.0)
    mouth = np.exp(-((yy - my) ** 2) / (2 * 0.45 ** 2)) * np.clip(half + 0.5 - np.abs(xx - cx), 0.0, 1.0)
    img = img - (img - 0.15) * mouth
    return np.clip(img, 0.0, 1.0)[None]


def gaussian_kernel(sigma: float, size: int = 5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    k1 = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(k1, k1)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Truncated 5x5 Gaussian blur with edge-replicated borders."""
    k = gaussian_kernel(sigma)
    p = k.shape[0] // 2
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        padded = np.pad(img[c], p, mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(padded, k.shape)
        out[c] = np.einsum("ijkl,kl->ij", windows, k)
    return np.clip(out, 0.0, 1.0)


def occlude(img: np.ndarray, rng: np.random.Generator, block: int = 6) -> np.ndarray:
    top, left = rng.integers(0, SIZE - block + 1, size=2)
    out = img.copy()
    out[:, top:top + block, left:left + block] = 0.0
    return out


def add_noise(img: np.ndarray, rng: np.random.Generator, amplitude: float = 0.25) -> np.ndarray:
    return np.clip(img + rng.uniform(-amplitude, amplitude, size=img.shape), 0.0, 1.0)


def distort(task_id: int, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if task_id == 1:
        return blur(img, 1.0)
    if task_id == 2:
        return occlude(img, rng)
    if task_id == 3:
        return blur(img, 2.0)
    if task_id == 4:
        return add_noise(img, rng)
    raise ValueError(f"dfd_like has tasks 1..4, got {task_id}")


def _dfd_split(task_id: int, n: int, seed: int, split: str) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed, _SUITE_CODE["dfd_like"], task_id, _SPLIT_CODE[split])
    ys = np.stack([make_face(rng) for _ in range(n)]) if n else np.zeros((0, 1, SIZE, SIZE))
    xs = np.stack([distort(task_id, y, rng) for y in ys]) if n else ys.copy()
    return xs, ys


def gen_dfd_like(task_id: int, n: int, seed: int, n_test: int = 50) -> TaskSpec:
    if task_id not in range(1, 5):
        raise ValueError(f"dfd_like has tasks 1..4, got {task_id}")
    x_tr, y_tr = _dfd_split(task_id, n, seed, "train")
    x_te, y_te = _dfd_split(task_id, n_test, seed, "test")
    return TaskSpec("dfd_like", task_id, x_tr, y_tr, x_te, y_te, seed)


# ---------------------------------------------------------------------------
# landscapes


def make_landscape(rng: np.random.Generator) -> np.ndarray:
    _, yy = _grid()
    horizon = rng.uniform(6.0, 10.0)
    top = np.array([0.15, 0.3, 0.75]) + rng.uniform(-0.08, 0.08, 3)
    low = np.array([0.65, 0.75, 0.9]) + rng.uniform(-0.08, 0.08, 3)
    t = np.clip(yy / horizon, 0.0, 1.0)
    sky = top[:, None, None] * (1 - t) + low[:, None, None] * t
    ground_tone = np.array([0.3, 0.45, 0.15]) + rng.uniform(-0.1, 0.1, 3)
    ground = ground_tone[:, None, None] * (1.0 + 0.6 * (yy - horizon) / SIZE)
    ground = ground + rng.normal(0.0, 0.06, size=(1, SIZE, SIZE))
    mask = np.clip(yy - horizon + 0.5, 0.0, 1.0)
    img = sky * (1 - mask) + ground * mask
    return np.clip(img, 0.0, 1.0)


def style(index: int, img: np.ndarray) -> np.ndarray:
    """Style ``index`` applied to a base image; style 0 is the identity."""
    if index == 0:
        return img.copy()
    if index == 1:
        return np.clip(img ** 0.5 * np.array([1.1, 1.0, 0.85])[:, None, None], 0.0, 1.0)
    if index == 2:
        return np.clip(img[[2, 1, 0]] ** 1.5, 0.0, 1.0)
    if index == 3:
        gray = img.mean(axis=0, keepdims=True)
        return np.clip((0.5 * img + 0.5 * gray - 0.5) * 1.4 + 0.5, 0.0, 1.0)
    raise ValueError(f"unknown style {index}")


def _gld_split(task_id: int, n: int, seed: int, split: str) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed, _SUITE_CODE["gld_like"], task_id, _SPLIT_CODE[split])
    if n == 0:
        empty = np.zeros((0, 3, SIZE, SIZE))
        return empty, empty.copy()
    base = [make_landscape(rng) for _ in range(n)]
    xs = np.stack([style(task_id - 1, b) for b in base])
    ys = np.stack([style(task_id, b) for b in base])
    return xs, ys


def gen_gld_like(task_id: int, n: int, seed: int, n_test: int = 50) -> TaskSpec:
    if task_id not in range(1, 4):
        raise ValueError(f"gld_like has tasks 1..3, got {task_id}")
    x_tr, y_tr = _gld_split(task_id, n, seed, "train")
    x_te, y_te = _gld_split(task_id, n_test, seed, "test")
    return TaskSpec("gld_like", task_id, x_tr, y_tr, x_te, y_te, seed)


def gen_task(suite: str, task_id: int, n: int, seed: int, n_test: int = 50) -> TaskSpec:
    if suite == "dfd_like":
        return gen_dfd_like(task_id, n, seed, n_test)
    if suite == "gld_like":
        return gen_gld_like(task_id, n, seed, n_test)
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
