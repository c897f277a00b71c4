"""Random latent gains and artificial-mixture batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

APPLY_PROB = 0.8
DEAD_ZONE = 0.05


@dataclass
class BatchItem:
    waveform: np.ndarray
    kind: str = "single"              # "single" | "mixture"
    components: tuple | None = None   # (i, j) into the batch's singles, mixtures only
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in ("single", "mixture"):
            raise ValueError(f"unknown item kind {self.kind!r}")
        if (self.kind == "mixture") != (self.components is not None):
            raise ValueError("components must be given exactly for mixtures")
        if self.components is not None and self.components[0] == self.components[1]:
            raise ValueError("mixture components must be distinct")


def clip_gain(a: float, peak: float) -> float:
    """Dead-zone small gains to 0, then cap so ``a * peak <= 1``."""
    if abs(a) < DEAD_ZONE:
        return 0.0
    if peak > 0 and abs(a) * peak > 1.0:
        return float(np.sign(a)) / peak
    return float(a)


def sample_gain(rng, bounds: tuple[float, float], x: np.ndarray) -> float:
    """Uniform gain in ``bounds`` applied with probability 0.8, otherwise 1.

    Both random draws are always consumed so item streams stay aligned.
    """
    lo, hi = bounds
    if lo > hi:
        raise ValueError("need a_min <= a_max")
    apply = rng.random() < APPLY_PROB
    a = lo + (hi - lo) * rng.random()
    if not apply:
        return 1.0
    return clip_gain(a, float(np.max(np.abs(x))) if np.size(x) else 0.0)


def build_mixture_batch(batch) -> list[BatchItem]:
    """Originals followed by each item summed with its circular successor."""
    batch = [np.asarray(x, dtype=np.float64) for x in batch]
    B = len(batch)
    if B < 2:
        raise ValueError("mixture batches need at least two items")
    items = [BatchItem(x) for x in batch]
    for i in range(B):
        j = (i + 1) % B
        items.append(BatchItem(batch[i] + batch[j], "mixture", (i, j)))
    return items


def conditioning_latent(item: BatchItem, latents, index: int | None = None):
    """Latent the decoder is conditioned on: ``gain * (Z_x or Z_u + Z_v)``.

    ``latents`` holds the encodings of the batch singles; ``index`` selects the
    item's own latent when it is a single. Works on numpy arrays and tensors.
    """
    if item.kind == "single":
        if index is None or index >= len(latents) or latents[index] is None:
            raise RuntimeError("latent of the single item is missing")
        z = latents[index]
    else:
        i, j = item.components
        if max(i, j) >= len(latents) or latents[i] is None or latents[j] is None:
            raise RuntimeError("component latent missing")
        z = latents[i] + latents[j]
    return z * item.gain
