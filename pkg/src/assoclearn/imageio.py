"""16-bit binary PGM/PPM images and the tab-separated task manifest."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TaskSpec

MAXVAL = 65535
MANIFEST_NAME = "manifest.tsv"


class ImageFormatError(ValueError):
    pass


def encode_image(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W] image, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("pixel values must lie in [0, 1]")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    samples = np.rint(img.transpose(1, 2, 0) * MAXVAL).astype(">u2")
    return magic + f"\n{w} {h}\n{MAXVAL}\n".encode("ascii") + samples.tobytes()


_HEADER = re.compile(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_image(blob: bytes) -> np.ndarray:
    if blob[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {blob[:2]!r} at byte offset 0; expected P5 or P6")
    m = _HEADER.match(blob)
    if m is None:
        raise ImageFormatError(f"malformed header starting at byte offset 2: {blob[:32]!r}")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != MAXVAL:
        raise ImageFormatError(f"unsupported maxval {maxval} at byte offset {m.start(4)}; expected {MAXVAL}")
    c = 1 if magic == b"P5" else 3
    start = m.end()
    need = 2 * w * h * c
    have = len(blob) - start
    if have < need:
        raise ImageFormatError(f"truncated payload: {have} of {need} bytes after byte offset {start}")
    if have > need:
        raise ImageFormatError(f"{have - need} trailing bytes at byte offset {start + need}")
    samples = np.frombuffer(blob, dtype=">u2", count=w * h * c, offset=start)
    return samples.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / MAXVAL


def save_image(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_image(img))


def load_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


@dataclass
class Manifest:
    suite: str
    task_id: int
    seed: int
    n_train: int
    n_test: int
    files: list[tuple[str, int, str, str]] = field(default_factory=list)  # split, index, x, y

    def to_text(self) -> str:
        lines = [f"suite\t{self.suite}", f"task_id\t{self.task_id}", f"seed\t{self.seed}",
                 f"n_train\t{self.n_train}", f"n_test\t{self.n_test}"]
        lines += [f"pair\t{split}\t{index}\t{x}\t{y}" for split, index, x, y in self.files]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Manifest":
        scalars: dict[str, str] = {}
        files = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if parts[0] == "pair":
                if len(parts) != 5:
                    raise ImageFormatError(f"manifest line {lineno}: pair record needs 5 fields")
                files.append((parts[1], int(parts[2]), parts[3], parts[4]))
            elif len(parts) == 2:
                scalars[parts[0]] = parts[1]
            else:
                raise ImageFormatError(f"manifest line {lineno}: cannot parse {line!r}")
        missing = {"suite", "task_id", "seed", "n_train", "n_test"} - scalars.keys()
        if missing:
            raise ImageFormatError(f"manifest missing keys: {sorted(missing)}")
        return cls(scalars["suite"], int(scalars["task_id"]), int(scalars["seed"]),
                   int(scalars["n_train"]), int(scalars["n_test"]), files)


def save_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(manifest.to_text(), encoding="utf-8")


def load_manifest(path) -> Manifest:
    return Manifest.from_text(Path(path).read_text(encoding="utf-8"))


def save_task(task: TaskSpec, directory) -> Manifest:
    """Write every pair of ``task`` as images plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if task.image_shape[0] == 1 else "ppm"
    manifest = Manifest(task.suite, task.task_id, task.seed, len(task.x_train), len(task.x_test))
    for split, xs, ys in (("train", task.x_train, task.y_train), ("test", task.x_test, task.y_test)):
        for i, (x, y) in enumerate(zip(xs, ys)):
            xn, yn = f"{split}_{i:05d}_x.{ext}", f"{split}_{i:05d}_y.{ext}"
            save_image(directory / xn, x)
            save_image(directory / yn, y)
            manifest.files.append((split, i, xn, yn))
    save_manifest(directory / MANIFEST_NAME, manifest)
    return manifest


def load_split(directory, split: str) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    manifest = load_manifest(directory / MANIFEST_NAME)
    rows = sorted((i, x, y) for s, i, x, y in manifest.files if s == split)
    xs = [load_image(directory / x) for _, x, _ in rows]
    ys = [load_image(directory / y) for _, _, y in rows]
    return np.stack(xs), np.stack(ys)


def load_task(directory) -> TaskSpec:
    directory = Path(directory)
    manifest = load_manifest(directory / MANIFEST_NAME)
    x_tr, y_tr = load_split(directory, "train")
    x_te, y_te = load_split(directory, "test")
    return TaskSpec(manifest.suite, manifest.task_id, x_tr, y_tr, x_te, y_te, manifest.seed)
