"""Toy consistency autoencoder: encoder, latent-conditioned U-Net denoiser, one-step decoder.

Parameters live in a flat ``dict[str, np.ndarray]``; the forward functions take
the same dict with values wrapped as :class:`~linlab.autodiff.Tensor` so the
trainer can differentiate through them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import dsp
from .schedule import ConsistencyParams


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 32)
    latent_channels: int = 4
    emb_dim: int = 16
    emb_hidden: int = 32
    window: int = 960
    sample_rate: int = 8000
    fft_size: int = 256
    hop: int = 64
    alpha: float = dsp.ALPHA
    beta: float = dsp.BETA
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError("need at least one level with positive width")
        if self.latent_channels < 1 or self.emb_dim < 2 or self.emb_dim % 2:
            raise ValueError("latent_channels >= 1 and an even emb_dim >= 2 required")
        if self.window % self.hop:
            raise ValueError("window must be a multiple of hop")
        if self.window < self.fft_size:
            raise ValueError("window shorter than fft_size")
        if not self.stft.is_cola():
            raise ValueError("fft_size/hop do not form a perfect-reconstruction pair")
        self.consistency  # validates sigma settings

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def stft(self) -> dsp.StftParams:
        return dsp.StftParams(self.fft_size, self.hop)

    @property
    def consistency(self) -> ConsistencyParams:
        return ConsistencyParams(self.sigma_min, self.sigma_max, self.rho, self.sigma_data)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.fft_size // 2 + 1, self.window // self.hop + 1

    @property
    def padded_shape(self) -> tuple[int, int]:
        m = 2 ** self.levels
        return tuple(-(-n // m) * m for n in self.grid_shape)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        m = 2 ** self.levels
        h, w = self.padded_shape
        return self.latent_channels, h // m, w // m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def compression_factor(cfg: ModelConfig) -> float:
    """Spatial stride product times the input/latent channel ratio."""
    return (2 ** cfg.levels) ** 2 * 2 / cfg.latent_channels


def _shapes(cfg: ModelConfig) -> dict[str, tuple]:
    w, C, L = cfg.widths, cfg.latent_channels, cfg.levels
    hid = cfg.emb_hidden
    s = {}

    def conv(name, cout, cin, k=3):
        s[f"{name}.w"] = (cout, cin, k, k)
        s[f"{name}.b"] = (cout,)

    def tconv(name, cin, cout):
        # (in, out, 2, 2): transposed layout, fan-in is the leading axis
        s[f"{name}.w"] = (cin, cout, 2, 2)
        s[f"{name}.b"] = (cout,)

    conv("enc.in", w[0], 2)
    for l in range(1, L):
        conv(f"enc.mid{l}", w[l - 1], w[l - 1])
        conv(f"enc.down{l}", w[l], w[l - 1])
    conv("enc.out", C, w[-1], k=1)

    s["emb.w"] = (cfg.emb_dim, hid)
    s["emb.b"] = (hid,)
    for l in range(1, L + 1):
        conv(f"dn{l}.in", w[l - 1], 2 if l == 1 else w[l - 2])
        conv(f"dn{l}.mid", w[l - 1], w[l - 1])
        s[f"dn{l}.emb.w"] = (hid, w[l - 1])
        s[f"dn{l}.emb.b"] = (w[l - 1],)
    for l in range(L - 1, 0, -1):
        tconv(f"up{l}", w[l], w[l - 1])
        conv(f"up{l}.mid", w[l - 1], w[l - 1])
        s[f"up{l}.emb.w"] = (hid, w[l - 1])
        s[f"up{l}.emb.b"] = (w[l - 1],)
    tconv("out", w[0], 2)
    conv(f"zp{L}", w[L - 1], C)
    for l in range(L - 1, 0, -1):
        tconv(f"zp{l}", w[l], w[l - 1])
    return s


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for shape in _shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            if len(shape) == 4 and shape[2:] == (2, 2):
                fan_in = shape[0]
            elif len(shape) == 4:
                fan_in = math.prod(shape[1:])
            else:
                fan_in = shape[0]
            params[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
    return params


def as_tensors(params: dict, requires_grad: bool = False) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _conv(P, name, x, stride=1):
    return ad.conv2d(x, P[f"{name}.w"], P[f"{name}.b"], stride=stride)


def _tconv(P, name, x):
    return ad.conv_transpose2x2(x, P[f"{name}.w"], P[f"{name}.b"])


def _pad_grid(X, cfg):
    (F, N), (Fp, Np) = cfg.grid_shape, cfg.padded_shape
    if X.shape[-2:] != (F, N):
        raise ValueError(f"expected model grid {(F, N)}, got {X.shape[-2:]}")
    return ad.pad2d(X, (0, Fp - F), (0, Np - N))


def encoder_forward(P: dict, X, cfg: ModelConfig) -> ad.Tensor:
    """Model-space grid ``(n, 2, F, N)`` -> latent ``(n, C, F/2^L, N/2^L)``. Last layer linear."""
    h = ad.silu(_conv(P, "enc.in", _pad_grid(ad.as_tensor(X), cfg), stride=2))
    for l in range(1, cfg.levels):
        h = ad.silu(_conv(P, f"enc.mid{l}", h))
        h = ad.silu(_conv(P, f"enc.down{l}", h, stride=2))
    return _conv(P, "enc.out", h)


def sigma_embedding(sigma, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of log(sigma), shape ``(n, dim)``."""
    s = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    freqs = np.geomspace(0.25, 8.0, dim // 2)
    phase = np.log(s)[:, None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _emb_bias(P, name, e):
    b = ad.matmul(e, P[f"{name}.w"]) + P[f"{name}.b"]
    return ad.reshape(b, b.shape + (1, 1))


def denoiser_g(P: dict, X_sigma, sigma, z, cfg: ModelConfig) -> ad.Tensor:
    """Noise-prediction U-Net; latent enters every level through its own upsampling path."""
    X_sigma, z = ad.as_tensor(X_sigma), ad.as_tensor(z)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (X_sigma.shape[0],))
    n = X_sigma.shape[0]
    if z.shape != (n,) + cfg.latent_shape:
        raise ValueError(f"latent shape {z.shape} != {(n,) + cfg.latent_shape}")
    L = cfg.levels
    c_in = 1.0 / np.sqrt(sigma ** 2 + cfg.sigma_data ** 2)
    h = _pad_grid(ad.mul(X_sigma, c_in[:, None, None, None]), cfg)
    e = ad.silu(ad.matmul(sigma_embedding(sigma, cfg.emb_dim), P["emb.w"]) + P["emb.b"])

    zc = {L: _conv(P, f"zp{L}", z)}
    for l in range(L - 1, 0, -1):
        zc[l] = _tconv(P, f"zp{l}", ad.silu(zc[l + 1]))

    skips = {}
    for l in range(1, L + 1):
        h = _conv(P, f"dn{l}.in", h, stride=2) + _emb_bias(P, f"dn{l}.emb", e) + zc[l]
        h = ad.silu(_conv(P, f"dn{l}.mid", ad.silu(h)))
        skips[l] = h
    for l in range(L - 1, 0, -1):
        h = _tconv(P, f"up{l}", h) + skips[l] + _emb_bias(P, f"up{l}.emb", e) + zc[l]
        h = ad.silu(_conv(P, f"up{l}.mid", ad.silu(h)))
    out = _tconv(P, "out", h)
    F, N = cfg.grid_shape
    return out[:, :, :F, :N]


def skip_coefficients(sigma, cfg: ModelConfig):
    s = np.asarray(sigma, dtype=np.float64)
    sd, smin = cfg.sigma_data, cfg.sigma_min
    c_skip = sd ** 2 / ((s - smin) ** 2 + sd ** 2)
    c_out = sd * (s - smin) / np.sqrt(sd ** 2 + s ** 2)
    return c_skip, c_out


def consistency_f(P: dict, X_sigma, sigma, z, cfg: ModelConfig) -> ad.Tensor:
    """``c_skip(sigma) * X_sigma + c_out(sigma) * g(X_sigma, sigma, z)``; identity at sigma_min."""
    X_sigma = ad.as_tensor(X_sigma)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (X_sigma.shape[0],))
    if np.any(sigma < cfg.sigma_min) or np.any(sigma > cfg.sigma_max):
        raise ValueError("sigma outside [sigma_min, sigma_max]")
    c_skip, c_out = skip_coefficients(sigma, cfg)
    g = denoiser_g(P, X_sigma, sigma, z, cfg)
    return ad.mul(X_sigma, c_skip[:, None, None, None]) + ad.mul(g, c_out[:, None, None, None])


def _check_window(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.window:
        raise ValueError(f"expected {cfg.window}-sample windows, got {x.shape[-1]}")
    return x


def encode(params: dict, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Waveform window(s) ``(..., window)`` -> latent(s) ``(..., C, F_lat, N_lat)``."""
    if params is None:
        raise RuntimeError("no parameters loaded")
    x = _check_window(x, cfg)
    lead = x.shape[:-1]
    X = dsp.to_model_space(x.reshape(-1, cfg.window), cfg.stft, cfg.alpha, cfg.beta)
    with ad.no_grad():
        z = encoder_forward(as_tensors(params), X, cfg).data
    return z.reshape(lead + cfg.latent_shape)


def decode(params: dict, z: np.ndarray, cfg: ModelConfig, seed: int = 0) -> np.ndarray:
    """One denoising step from ``sigma_max`` noise conditioned on ``z``."""
    if params is None:
        raise RuntimeError("no parameters loaded")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-3:] != cfg.latent_shape:
        raise ValueError(f"latent shape {z.shape[-3:]} != {cfg.latent_shape}")
    lead = z.shape[:-3]
    zb = z.reshape((-1,) + cfg.latent_shape)
    eps = np.random.default_rng(seed).standard_normal((len(zb), 2) + cfg.grid_shape)
    with ad.no_grad():
        X = consistency_f(as_tensors(params), cfg.sigma_max * eps, cfg.sigma_max, zb, cfg).data
    y = dsp.from_model_space(X, cfg.stft, cfg.alpha, cfg.beta)
    return y.reshape(lead + (cfg.window,))
