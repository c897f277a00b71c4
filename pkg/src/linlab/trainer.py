"""Consistency training with implicit homogeneity/additivity conditioning."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import dsp
from . import model as M
from .augment import BatchItem, build_mixture_batch, conditioning_latent, sample_gain
from .schedule import (ScheduleConfig, delta_t, ema_step, gain_bounds, lambda_weight,
                       learning_rate, sigma_of_t)

log = logging.getLogger(__name__)

HUBER_C = 5.4e-4
# no wall-clock column: reruns must produce byte-identical reports
REPORT_FIELDS = ["step", "loss", "delta_t", "a_min", "a_max", "lr"]

# recorded in checkpoint headers so every downstream report carries them
LOSS_REDUCTION = "mean over T-F cells per item, then mean over items of lambda * d"
SURROGATES = ("sigma(t) Karras rho-schedule, c_skip/c_out with sigma_data, and c_in are "
              "desk-scale surrogates for inherited parameterizations")

# variant -> (gain applied on the latent side, mixtures conditioned on summed latents)
VARIANTS = {
    "lin": (True, True),
    "baseline": (False, False),
    "hom-only": (True, False),
    "add-only": (False, True),
}


class NumericalError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class CorpusSpec:
    use_mixes: bool = True
    use_sources: bool = True


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    batch_size: int = 8
    mixtures: bool = True
    gains: bool = True          # False pins the gain bounds to (1, 1)
    seed: int = 0
    huber_c: float = HUBER_C
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or (self.mixtures and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 with mixtures (>= 1 without)")
        if self.huber_c <= 0:
            raise ValueError("huber_c must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        _reject_unknown(d, cls, "train")
        if "schedule" in d:
            _reject_unknown(d["schedule"], ScheduleConfig, "schedule")
            d["schedule"] = ScheduleConfig(**d["schedule"])
        if "model" in d:
            d["model"] = M.ModelConfig.from_dict(d["model"])
        if "corpus" in d:
            _reject_unknown(d["corpus"], CorpusSpec, "corpus")
            d["corpus"] = CorpusSpec(**d["corpus"])
        return cls(**d)


def _reject_unknown(d: dict, cls, what: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {what} config keys: {sorted(unknown)}")


def load_config(path) -> TrainConfig:
    """Read a JSON config; ``LINLAB_SEED`` in the environment overrides ``seed``."""
    with open(path) as f:
        cfg = TrainConfig.from_dict(json.load(f))
    return apply_env(cfg)


def apply_env(cfg: TrainConfig) -> TrainConfig:
    env = os.environ.get("LINLAB_SEED")
    return replace(cfg, seed=int(env)) if env not in (None, "") else cfg


@dataclass
class TrainState:
    params: dict
    ema: dict
    m: dict
    v: dict
    step: int
    config: TrainConfig
    variant: str = "lin"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.step > self.config.schedule.total_steps:
            raise ValueError("step beyond total_steps")


def init_state(config: TrainConfig, variant: str = "lin") -> TrainState:
    params = M.init_params(config.model, config.seed)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(params, {k: v.copy() for k, v in params.items()},
                      zeros, {k: z.copy() for k, z in zeros.items()}, 0, config, variant)


def pseudo_huber(x, y, c: float = HUBER_C, axis=None) -> ad.Tensor:
    """Mean of ``sqrt((x - y)**2 + c**2) - c`` over ``axis`` (all cells by default)."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if c <= 0:
        raise ValueError("c must be positive")
    d = ad.sqrt(ad.square(x - y) + c * c) - c
    return ad.mean(d, axis=axis)


def radam_update(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
    """One RAdam step (``t`` counts from 1). Returns new ``(params, m, v)``."""
    b1, b2 = betas
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)
    rect = None
    if rho_t > 5.0:
        rect = np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        mt = b1 * m[name] + (1 - b1) * g
        vt = b2 * v[name] + (1 - b2) * g * g
        m_hat = mt / (1 - b1 ** t)
        if rect is None:
            step = m_hat
        else:
            step = rect * m_hat * np.sqrt(1 - b2 ** t) / (np.sqrt(vt) + eps)
        new_p[name] = p - lr * step
        new_m[name], new_v[name] = mt, vt
    return new_p, new_m, new_v


def item_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index])


def _encoder_plan(items, latent_gain: bool, latent_sum: bool):
    """Decide what the encoder sees and how each conditioning latent is formed.

    Returns the encoder input waveforms and, per item, a BatchItem view whose
    indices point at encoder rows and whose gain is the latent-side scale.
    """
    rows, keys = [], {}

    def row(key, wave):
        if key not in keys:
            keys[key] = len(rows)
            rows.append(wave)
        return keys[key]

    singles = [it for it in items if it.kind == "single"]
    views = []
    for i, item in enumerate(items):
        inner = 1.0 if latent_gain else item.gain
        outer = item.gain if latent_gain else 1.0
        if item.kind == "mixture" and latent_sum:
            u, v = item.components
            comps = (row(("s", u, inner), inner * singles[u].waveform),
                     row(("s", v, inner), inner * singles[v].waveform))
            views.append((BatchItem(item.waveform, "mixture", comps, outer), None))
        else:
            key = ("s", i, inner) if item.kind == "single" else ("m", i, inner)
            views.append((BatchItem(item.waveform, gain=outer), row(key, inner * item.waveform)))
    return np.stack(rows), views


def ct_loss(P: dict, items: list, step: int, config: TrainConfig, variant: str = "lin"):
    """Weighted consistency loss for one batch; returns ``(loss_tensor, info)``.

    Gains, time steps and the shared noise direction are drawn per item from
    streams keyed on ``(seed, step, item index)``, in the order: apply draw,
    gain draw, t1, noise. The gain never reaches the encoder or denoiser as an
    input: it only scales waveforms and latents.
    """
    latent_gain, latent_sum = VARIANTS[variant]
    mcfg, sched = config.model, config.schedule
    K = sched.total_steps
    bounds = gain_bounds(step, K, sched.gain_hold, sched.gain_release) if config.gains else (1.0, 1.0)
    dt = delta_t(step, K, sched.delta_t0, sched.e_k)

    n = len(items)
    t1 = np.empty(n)
    eps = np.empty((n, 2) + mcfg.grid_shape)
    for i, item in enumerate(items):
        rng = item_rng(config.seed, step, i)
        item.gain = sample_gain(rng, bounds, item.waveform)
        t1[i] = rng.random() * (1.0 - dt)
        eps[i] = rng.standard_normal((2,) + mcfg.grid_shape)
    t2 = t1 + dt
    cp = mcfg.consistency
    s1, s2 = sigma_of_t(t1, cp), sigma_of_t(np.minimum(t2, 1.0), cp)
    if not np.all(s1 < s2):
        raise AssertionError("teacher noise level must be below the student's")
    lam = lambda_weight(s1, s2)

    enc_in, views = _encoder_plan(items, latent_gain, latent_sum)
    Z = M.encoder_forward(P, dsp.to_model_space(enc_in, mcfg.stft, mcfg.alpha, mcfg.beta), mcfg)
    enc_rows = [Z[r] for r in range(Z.shape[0])]
    cond = ad.concat([ad.reshape(conditioning_latent(view, enc_rows, idx), (1,) + mcfg.latent_shape)
                      for view, idx in views], axis=0)

    target = np.stack([item.gain * item.waveform for item in items])
    X = dsp.to_model_space(target, mcfg.stft, mcfg.alpha, mcfg.beta)
    student = M.consistency_f(P, X + s2[:, None, None, None] * eps, s2, cond, mcfg)
    with ad.no_grad():
        teacher = M.consistency_f(P, X + s1[:, None, None, None] * eps, s1,
                                  ad.stop_gradient(cond), mcfg)
    teacher = ad.stop_gradient(teacher)
    per_item = pseudo_huber(student, teacher, config.huber_c, axis=(1, 2, 3))
    loss = ad.mean(ad.mul(per_item, lam))
    info = {"sigma1": s1, "sigma2": s2, "gains": np.array([it.gain for it in items]),
            "delta_t": dt, "bounds": bounds}
    return loss, info


def ct_step(items: list, state: TrainState):
    """Loss, backward, RAdam update and EMA tracking for step ``state.step``."""
    cfg = state.config
    k = state.step
    if k >= cfg.schedule.total_steps:
        raise ValueError("training already finished")
    P = M.as_tensors(state.params, requires_grad=True)
    loss, info = ct_loss(P, items, k, cfg, state.variant)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(
            f"non-finite loss at step {k}: sigma1={info['sigma1'].tolist()} "
            f"sigma2={info['sigma2'].tolist()} gains={info['gains'].tolist()}")
    ad.backward(loss)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in P.items()}
    lr = learning_rate(k, cfg.schedule)
    params, m, v = radam_update(state.params, grads, state.m, state.v, k + 1, lr)
    ema = ema_step(params, state.ema, k, cfg.schedule.ema_every, cfg.schedule.ema_decay)
    info["lr"] = lr
    new_state = TrainState(params, ema, m, v, k + 1, cfg, state.variant)
    return value, new_state, info


def make_items(batch: np.ndarray, mixtures: bool) -> list[BatchItem]:
    return build_mixture_batch(batch) if mixtures else [BatchItem(x) for x in batch]


def batch_for_step(clips: np.ndarray, step: int, batch_size: int, window: int, seed: int) -> np.ndarray:
    """Random ``window`` crops of clips drawn in per-epoch shuffled order."""
    n_clips, length = clips.shape
    if length < window:
        raise ValueError("clips shorter than the model window")
    out = np.empty((batch_size, window))
    for i in range(batch_size):
        pos = step * batch_size + i
        epoch, slot = divmod(pos, n_clips)
        perm = np.random.default_rng([seed, epoch, 0xDA7A]).permutation(n_clips)
        start = np.random.default_rng([seed, step, i, 1]).integers(0, length - window + 1)
        out[i] = clips[perm[slot], start:start + window]
    return out


def save_state(path, state: TrainState):
    header = {"config": state.config.to_dict(), "variant": state.variant, "step": state.step,
              "loss_reduction": LOSS_REDUCTION, "surrogates": SURROGATES}
    ckpt.write_container(path, header, {"theta": state.params, "ema": state.ema,
                                        "adam_m": state.m, "adam_v": state.v})


def load_state(path) -> TrainState:
    header, groups = ckpt.read_container(path)
    cfg = TrainConfig.from_dict(header["config"])
    return TrainState(groups["theta"], groups["ema"], groups["adam_m"], groups["adam_v"],
                      int(header["step"]), cfg, header["variant"])


def train(config: TrainConfig, clips: np.ndarray, out_dir, variant: str = "lin",
          resume=None, progress_every: int = 0) -> Path:
    """Run consistency training to ``total_steps``; returns the final checkpoint path.

    Writes ``report.csv`` (one row per step) and ``checkpoint.ckpt`` in
    ``out_dir``; periodic ``checkpoint_<step>.ckpt`` files when configured.
    """
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 2 or len(clips) == 0:
        raise ValueError("need a non-empty (n_clips, length) array")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_state(resume)
        if state.config != config or state.variant != variant:
            raise ValueError("resume checkpoint was written with a different config or variant")
    else:
        state = init_state(config, variant)
    K = config.schedule.total_steps
    report = out / "report.csv"
    mode = "a" if resume is not None and report.exists() else "w"
    if mode == "a":
        # drop rows logged after the checkpoint we resume from
        lines = report.read_bytes().splitlines(keepends=True)
        keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(b",", 1)[0]) < state.step]
        report.write_bytes(b"".join(keep))
    t0 = time.perf_counter()
    with open(report, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(REPORT_FIELDS)
        while state.step < K:
            k = state.step
            batch = batch_for_step(clips, k, config.batch_size, config.model.window, config.seed)
            loss, state, info = ct_step(make_items(batch, config.mixtures), state)
            a_min, a_max = info["bounds"]
            writer.writerow([k, repr(loss), repr(info["delta_t"]), repr(a_min), repr(a_max),
                             repr(info["lr"])])
            if progress_every and state.step % progress_every == 0:
                log.info("step %d/%d loss %.5f (%.1fs)", state.step, K, loss, time.perf_counter() - t0)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 and state.step < K:
                save_state(out / f"checkpoint_{state.step}.ckpt", state)
    final = out / "checkpoint.ckpt"
    save_state(final, state)
    return final
