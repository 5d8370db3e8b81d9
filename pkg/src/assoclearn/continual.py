"""Fisher-weighted parameter anchoring and the combined generator objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .models import ArchSpec, discriminator_logit, generator_forward
from .params import ParamSet, decode_container, encode_container

TERMS = ("mse", "adv", "feature")


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1e-3
    lambda_prime: float = 5.0
    assoc_ratio: float = 0.0

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_prime < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.assoc_ratio <= 1.0:
            raise ValueError(f"association ratio must lie in [0, 1], got {self.assoc_ratio}")


@dataclass(frozen=True)
class FisherSnapshot:
    """Anchor point and diagonal Fisher of the previous task's generator.

    ``shapes`` keeps the parameter layout so the flat vectors can be matched
    against a live parameter mapping.
    """

    theta_star: np.ndarray
    fisher: np.ndarray
    sample_count: int
    source_task: int
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        if self.theta_star.shape != self.fisher.shape or self.theta_star.ndim != 1:
            raise ValueError("theta_star and fisher must be vectors of equal length")
        if np.any(self.fisher < 0):
            raise ValueError("Fisher diagonal must be non-negative")
        if sum(int(np.prod(s)) for _, s in self.shapes) != self.theta_star.size:
            raise ValueError("parameter layout does not match vector length")

    def merged_with(self, newer: "FisherSnapshot") -> "FisherSnapshot":
        """Anchor at ``newer`` with the Fisher summed over both tasks."""
        if newer.shapes != self.shapes:
            raise ValueError("cannot merge snapshots of different parameter layouts")
        return FisherSnapshot(newer.theta_star, self.fisher + newer.fisher, newer.sample_count,
                              newer.source_task, newer.shapes)

    def to_bytes(self) -> bytes:
        entries = [("__theta_star", self.theta_star), ("__fisher", self.fisher),
                   ("__meta", np.array([self.sample_count, self.source_task], dtype=np.float64))]
        # one dims vector per parameter tensor records the layout
        entries += [(f"__shape/{name}", np.array(shape, dtype=np.float64)) for name, shape in self.shapes]
        return encode_container(entries)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FisherSnapshot":
        entries = dict(decode_container(blob))
        shapes = tuple((name[len("__shape/"):], tuple(int(d) for d in value))
                       for name, value in entries.items() if name.startswith("__shape/"))
        meta = entries["__meta"]
        return cls(entries["__theta_star"], entries["__fisher"], int(meta[0]), int(meta[1]), shapes)


def _content_forward(spec: ArchSpec) -> Callable:
    return lambda params, x: generator_forward(params, x, spec)


def estimate_diag_fisher(params: ParamSet, pairs: Sequence[tuple[np.ndarray, np.ndarray]], m: int,
                         forward: Callable | None = None, spec: ArchSpec | None = None,
                         source_task: int = 0) -> FisherSnapshot:
    """Empirical diagonal Fisher: mean over ``m`` pairs of squared per-sample gradients.

    The per-sample negative log-likelihood is the Gaussian surrogate
    ``sum((forward(params, x) - y)**2)``. ``forward`` defaults to the
    generator for ``spec``. The first ``m`` pairs are used, in order.
    """
    if len(pairs) == 0:
        raise ValueError("cannot estimate Fisher information from an empty dataset")
    if not 1 <= m <= len(pairs):
        raise ValueError(f"sample count m={m} must be in [1, {len(pairs)}]")
    if forward is None:
        if spec is None:
            raise ValueError("either forward or spec is required")
        forward = _content_forward(spec)
    acc = np.zeros(params.num_values())
    for index in range(m):
        x, y = pairs[index]
        tape = ad.Tape()
        tracked = tape.watch_params(params)
        loss = ad.sum(ad.square(ad.sub(forward(tracked, x), y)))
        grads = ad.backward(tape, loss)
        flat = np.concatenate([grads[name].data.reshape(-1) for name in params])
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError(f"non-finite gradient for Fisher sample {index}")
        acc += flat * flat
    shapes = tuple((name, tuple(shape)) for name, shape in params.shapes().items())
    return FisherSnapshot(params.flatten(), acc / m, m, source_task, shapes)


def distill_penalty(current: Mapping, snap: FisherSnapshot):
    """``sum_j 0.5 * F_j * (theta_j - theta*_j)**2``.

    With plain arrays this returns a float; with tape-tracked tensors it
    returns a differentiable scalar tensor.
    """
    names = [name for name, _ in snap.shapes]
    if list(current) != names:
        raise ValueError("parameter names/order do not match the Fisher snapshot")
    total = sum(int(np.size(_data(current[n]))) for n in names)
    if total != snap.theta_star.size:
        raise ValueError(f"parameter count {total} != snapshot length {snap.theta_star.size}")
    tracked = any(isinstance(current[n], ad.Tensor) and current[n].tape is not None for n in names)
    pos = 0
    terms = []
    for name, shape in snap.shapes:
        size = int(np.prod(shape))
        center = snap.theta_star[pos:pos + size].reshape(shape)
        weight = 0.5 * snap.fisher[pos:pos + size].reshape(shape)
        pos += size
        value = current[name]
        if np.shape(_data(value)) != shape:
            raise ValueError(f"shape of {name!r} is {np.shape(_data(value))}, snapshot has {shape}")
        if tracked:
            terms.append(ad.sum(ad.mul(weight, ad.square(ad.sub(value, center)))))
        else:
            diff = np.asarray(value) - center
            terms.append(float(np.sum(weight * diff * diff)))
    if not tracked:
        return float(np.sum(terms))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def _data(v):
    return v.data if isinstance(v, ad.Tensor) else v


@dataclass(frozen=True)
class LossParts:
    total: ad.Tensor
    l_mse: float
    l_adv: float
    l_feature: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "l_mse": self.l_mse, "l_adv": self.l_adv,
                "l_feature": self.l_feature}


def total_loss(batch: tuple[np.ndarray, np.ndarray], gen_params: Mapping, disc_params: Mapping,
               snap: FisherSnapshot | None, w: LossWeights, spec: ArchSpec,
               terms: Sequence[str] = TERMS, fake: ad.Tensor | None = None) -> LossParts:
    """Content + adversarial + distillation objective for one batch.

    ``l_mse`` is the batch mean of per-pair squared L2 error, ``l_adv`` the
    batch mean of ``-log D(G(x))``; ``l_feature`` is zero without a
    snapshot. Only components named in ``terms`` enter ``total``; all three
    are always reported. ``fake`` reuses an already computed ``G(x)``.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    if fake is None:
        fake = generator_forward(gen_params, x, spec)
    per_pair = ad.sum(ad.square(ad.sub(fake, y)), axis=tuple(range(1, len(fake.shape))))
    l_mse = ad.mean(per_pair)
    l_adv = ad.mean(ad.softplus(ad.neg(discriminator_logit(disc_params, fake, spec))))
    l_feature = distill_penalty(gen_params, snap) if snap is not None else None

    parts = []
    if "mse" in terms:
        parts.append(l_mse)
    if "adv" in terms:
        parts.append(ad.mul(l_adv, w.lambda_adv))
    if "feature" in terms and l_feature is not None:
        parts.append(ad.mul(l_feature, w.lambda_prime))
    total = parts[0] if parts else ad.Tensor(0.0)
    for p in parts[1:]:
        total = ad.add(total, p)
    feat = 0.0 if l_feature is None else (l_feature.item() if isinstance(l_feature, ad.Tensor) else l_feature)
    return LossParts(total, l_mse.item(), l_adv.item(), feat)
