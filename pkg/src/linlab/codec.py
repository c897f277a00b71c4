"""Encoder/decoder pairs behind one interface: the trained CAE and two time-domain references."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import model as M


class Codec:
    """Maps ``(..., window)`` waveforms to latents and back.

    ``decode`` always accepts a noise seed; deterministic codecs ignore it.
    """

    name = "codec"
    params_group: str | None = None

    def __init__(self, window: int, sample_rate: int):
        self.window = int(window)
        self.sample_rate = int(sample_rate)

    @property
    def compression_factor(self) -> float:
        raise NotImplementedError

    def encode(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, z: np.ndarray, seed: int = 0) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"name": self.name, "compression_factor": self.compression_factor,
                "window": self.window, "sample_rate": self.sample_rate}

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.window:
            raise ValueError(f"{self.name}: expected {self.window}-sample windows, got {x.shape[-1]}")
        return x


class LinearReferenceCodec(Codec):
    """Block averaging down, linear interpolation up. Exactly linear both ways."""

    name = "linear-ref"

    def __init__(self, factor: int = 4, window: int = 960, sample_rate: int = 8000):
        super().__init__(window, sample_rate)
        if factor < 1 or window % factor:
            raise ValueError(f"factor {factor} must be positive and divide the window {window}")
        self.factor = int(factor)
        n = window // factor
        centers = (np.arange(n) + 0.5) * factor - 0.5
        # interpolation as an explicit matrix keeps decode a fixed linear map
        eye = np.eye(n)
        self._up = np.stack([np.interp(np.arange(window), centers, eye[i]) for i in range(n)])

    @property
    def compression_factor(self) -> float:
        return float(self.factor)

    def _encode_linear(self, x):
        x = self._check(x)
        return x.reshape(x.shape[:-1] + (-1, self.factor)).mean(axis=-1)

    def _decode_linear(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.window // self.factor:
            raise ValueError(f"{self.name}: latent length {z.shape[-1]} does not match the window")
        return z @ self._up

    def encode(self, x):
        return self._encode_linear(x)

    def decode(self, z, seed: int = 0):
        return self._decode_linear(z)


class NonlinearControlCodec(LinearReferenceCodec):
    """The reference codec with a ``tanh(3 z) / 3`` squash on both sides of the latent."""

    name = "nonlinear-ctl"

    @staticmethod
    def squash(z):
        return np.tanh(3.0 * z) / 3.0

    def encode(self, x):
        return self.squash(self._encode_linear(x))

    def decode(self, z, seed: int = 0):
        return self._decode_linear(self.squash(np.asarray(z, dtype=np.float64)))


class CaeCodec(Codec):
    """Trained consistency autoencoder; inference runs on the EMA weights."""

    name = "cae"
    params_group = "ema"

    def __init__(self, params: dict, cfg: M.ModelConfig, provenance: dict | None = None):
        super().__init__(cfg.window, cfg.sample_rate)
        self.params = params
        self.cfg = cfg
        self.provenance = provenance or {}

    @property
    def compression_factor(self) -> float:
        return M.compression_factor(self.cfg)

    def encode(self, x):
        return M.encode(self.params, self._check(x), self.cfg)

    def decode(self, z, seed: int = 0):
        return M.decode(self.params, z, self.cfg, seed)

    def descriptor(self) -> dict:
        d = super().descriptor()
        d["params"] = self.params_group
        d.update(self.provenance)
        return d


def linear_reference_codec(factor: int = 4, window: int = 960, sample_rate: int = 8000) -> Codec:
    return LinearReferenceCodec(factor, window, sample_rate)


def nonlinear_control_codec(factor: int = 4, window: int = 960, sample_rate: int = 8000) -> Codec:
    return NonlinearControlCodec(factor, window, sample_rate)


def cae_codec(checkpoint, window: int | None = None, sample_rate: int | None = None) -> Codec:
    """Load a training checkpoint and wrap its EMA parameters."""
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, groups = ckpt.read_container(path)
    cfg = M.ModelConfig.from_dict(header["config"]["model"])
    if window is not None and window != cfg.window:
        raise ValueError(f"checkpoint window {cfg.window} != requested {window}")
    if sample_rate is not None and sample_rate != cfg.sample_rate:
        raise ValueError(f"checkpoint sample rate {cfg.sample_rate} != corpus rate {sample_rate}")
    if "ema" not in groups:
        raise ValueError(f"{path}: checkpoint has no EMA parameters")
    prov = {"checkpoint_step": header.get("step"), "variant": header.get("variant"),
            "train_config": header["config"], "loss_reduction": header.get("loss_reduction"),
            "surrogates": header.get("surrogates")}
    return CaeCodec(groups["ema"], cfg, prov)
