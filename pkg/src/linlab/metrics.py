"""Reconstruction, linearity and latent-arithmetic separation metrics over any codec."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp

log = logging.getLogger(__name__)

CLAMP_DB = 100.0
# reported for a relative error whose denominator is zero while the numerator is not
SENTINEL = 1e6
MSS_RESOLUTIONS = ((512, 10.0), (1024, 25.0), (2048, 50.0))   # (fft_size, hop_ms)
MSS_MELS = 40
MSS_DISTANCE = "mean_abs_logmel"

TRACK_FIELDS = ["snr_db", "mss", "enc_hom_error", "dec_hom_snr", "dec_hom_mss",
                "enc_add_error", "dec_add_snr", "dec_add_mss"]


def _pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch {ref.shape} vs {est.shape}")
    return ref, est


def _ratio_db(num: float, den: float) -> float:
    if den == 0:
        return CLAMP_DB
    if num == 0:
        return -CLAMP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CLAMP_DB, CLAMP_DB))


def snr(ref, est) -> float:
    """Waveform SNR in dB, clamped to +-100."""
    ref, est = _pair(ref, est)
    return _ratio_db(float(np.sum(ref ** 2)), float(np.sum((ref - est) ** 2)))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, clamped to +-100."""
    ref, est = _pair(ref, est)
    energy = float(np.dot(ref, ref))
    if energy == 0:
        raise ValueError("si_sdr needs a non-silent reference")
    if not np.any(est):
        return -CLAMP_DB
    target = (np.dot(est, ref) / energy) * ref
    return _ratio_db(float(np.sum(target ** 2)), float(np.sum((est - target) ** 2)))


def mss(ref, est, sample_rate: int = 8000) -> float:
    """Mean absolute log-mel difference, averaged over three resolutions."""
    ref, est = _pair(ref, est)
    vals = []
    for fft_size, hop_ms in MSS_RESOLUTIONS:
        p = dsp.MelParams(n_mels=MSS_MELS, hop_ms=hop_ms, fft_size=fft_size)
        vals.append(np.mean(np.abs(dsp.log_mel(ref, p, sample_rate) - dsp.log_mel(est, p, sample_rate))))
    return float(np.mean(vals))


def relative_error(num: np.ndarray, den: np.ndarray) -> float:
    n, d = float(np.linalg.norm(num)), float(np.linalg.norm(den))
    if d == 0:
        return 0.0 if n == 0 else SENTINEL
    return n / d


# ------------------------------------------------------------- track plumbing

@dataclass(frozen=True)
class EvalConfig:
    overlap_seconds: float = 0.03
    seed: int = 0
    gains: tuple = (0.25, 0.5, 2.0)
    signed_gains: bool = False
    separation: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gains"] = list(self.gains)
        return d


class TrackCoder:
    """Chunked encode/decode of whole tracks with overlap-add reassembly."""

    def __init__(self, codec, overlap: int):
        if not 0 <= overlap < codec.window:
            raise ValueError("overlap must be shorter than the codec window")
        self.codec = codec
        self.overlap = overlap

    def encode(self, x) -> np.ndarray:
        return self.codec.encode(dsp.split_track(x, self.codec.window, self.overlap))

    def decode(self, z, length: int, seed: int) -> np.ndarray:
        chunks = self.codec.decode(z, seed)
        return dsp.overlap_add_track(list(chunks), self.overlap, length)


def _as_coder(codec, overlap):
    return codec if isinstance(codec, TrackCoder) else TrackCoder(codec, overlap)


def encoder_homogeneity_error(codec, x, a: float, overlap: int = 0) -> float:
    """``|E(a x) - a E(x)| / |a E(x)|`` over the flattened latent."""
    if a == 0:
        raise ValueError("gain must be non-zero")
    tc = _as_coder(codec, overlap)
    x = np.asarray(x, dtype=np.float64)
    az = a * tc.encode(x)
    return relative_error(tc.encode(a * x) - az, az)


def decoder_homogeneity(codec, x, a: float, seed: int = 0, overlap: int = 0) -> tuple[float, float]:
    """SNR and MSS between ``a D(Z)`` and ``D(a Z)`` with one shared noise seed."""
    tc = _as_coder(codec, overlap)
    x = np.asarray(x, dtype=np.float64)
    z = tc.encode(x)
    ref = a * tc.decode(z, len(x), seed)
    est = tc.decode(a * z, len(x), seed)
    return snr(ref, est), mss(ref, est, tc.codec.sample_rate)


def encoder_additivity_error(codec, sources, overlap: int = 0) -> float:
    """``|E(mix) - sum E(s_i)| / |E(mix)|`` with ``mix = sum s_i``."""
    tc = _as_coder(codec, overlap)
    sources = _check_sources(sources, minimum=1)
    zmix = tc.encode(np.sum(sources, axis=0))
    return relative_error(zmix - sum(tc.encode(s) for s in sources), zmix)


def decoder_additivity(codec, sources, seed: int = 0, overlap: int = 0) -> tuple[float, float]:
    """Compare ``D(sum E(s_i))`` with the autoencoded mixture ``D(E(mix))``."""
    tc = _as_coder(codec, overlap)
    sources = _check_sources(sources, minimum=1)
    mix = np.sum(sources, axis=0)
    n = len(mix)
    ref = tc.decode(tc.encode(mix), n, seed)
    est = tc.decode(sum(tc.encode(s) for s in sources), n, seed)
    return snr(ref, est), mss(ref, est, tc.codec.sample_rate)


def separate(codec, mix, accompaniments, seed: int = 0, overlap: int = 0) -> list[np.ndarray]:
    """Latent subtraction ``D(E(mix) - E(acc_i))`` for each accompaniment."""
    tc = _as_coder(codec, overlap)
    mix = np.asarray(mix, dtype=np.float64)
    zmix = tc.encode(mix)
    out = []
    for acc in accompaniments:
        acc = np.asarray(acc, dtype=np.float64)
        if acc.shape != mix.shape:
            raise ValueError("accompaniment and mix lengths differ")
        out.append(tc.decode(zmix - tc.encode(acc), len(mix), seed))
    return out


def score_separation(codec, estimates, sources, seed: int = 0, overlap: int = 0) -> list[dict]:
    """Score estimates against the autoencoded ground truth ``D(E(s_i))``."""
    tc = _as_coder(codec, overlap)
    scores = []
    for est, s in zip(estimates, sources):
        s = np.asarray(s, dtype=np.float64)
        ref = tc.decode(tc.encode(s), len(s), seed)
        scores.append({"si_sdr": si_sdr(ref, est), "mss": mss(ref, est, tc.codec.sample_rate)})
    return scores


def oracle_separation(codec, mix, sources, seed: int = 0, overlap: int = 0) -> list[dict]:
    """Per-source SI-SDR and MSS of ``D(E(mix) - E(mix - s_i))`` vs ``D(E(s_i))``."""
    sources = _check_sources(sources, minimum=1)
    mix = np.asarray(mix, dtype=np.float64)
    estimates = separate(codec, mix, [mix - s for s in sources], seed, overlap)
    return score_separation(codec, estimates, sources, seed, overlap)


def _check_sources(sources, minimum: int):
    sources = [np.asarray(s, dtype=np.float64) for s in sources]
    if len(sources) < minimum:
        raise ValueError(f"need at least {minimum} sources")
    if any(s.shape != sources[0].shape for s in sources):
        raise ValueError("sources must have equal lengths")
    return sources


# ------------------------------------------------------------------ the suite

def track_gain(cfg: EvalConfig, index: int) -> float:
    rng = np.random.default_rng([cfg.seed, index, 0x6A1])
    a = float(cfg.gains[rng.integers(len(cfg.gains))])
    sign = -1.0 if rng.random() < 0.5 else 1.0
    return a * sign if cfg.signed_gains else a


def evaluate_track(codec, track, index: int, cfg: EvalConfig, overlap: int) -> dict:
    tc = _as_coder(codec, overlap)
    sr = tc.codec.sample_rate
    mix = np.asarray(track.mix, dtype=np.float64)
    seed = cfg.seed + index
    a = track_gain(cfg, index)
    recon = tc.decode(tc.encode(mix), len(mix), seed)
    row = {"id": track.id, "gain": a, "seed": seed,
           "snr_db": snr(mix, recon), "mss": mss(mix, recon, sr),
           "enc_hom_error": encoder_homogeneity_error(tc, mix, a)}
    row["dec_hom_snr"], row["dec_hom_mss"] = decoder_homogeneity(tc, mix, a, seed)
    if len(track.sources) >= 2:
        row["enc_add_error"] = encoder_additivity_error(tc, track.sources)
        row["dec_add_snr"], row["dec_add_mss"] = decoder_additivity(tc, track.sources, seed)
    if cfg.separation and track.sources:
        seps = oracle_separation(tc, mix, track.sources, seed)
        for j, (s, kind) in enumerate(zip(seps, track.kinds)):
            s.update(source=j, kind=kind)
        row["separation"] = seps
    return row


def _aggregate(rows: list[dict]) -> dict:
    ok = [r for r in rows if "error" not in r]
    agg = {"n_tracks": len(rows), "n_failed": len(rows) - len(ok)}
    for name in TRACK_FIELDS:
        vals = [r[name] for r in ok if name in r]
        if vals:
            agg[name] = float(np.mean(vals))
    sdr = [s["si_sdr"] for r in ok for s in r.get("separation", [])]
    smss = [s["mss"] for r in ok for s in r.get("separation", [])]
    if sdr:
        agg["si_sdr"] = float(np.mean(sdr))
        agg["si_sdr_median"] = float(np.median(sdr))
        agg["sep_mss"] = float(np.mean(smss))
        by_kind = {}
        for r in ok:
            for s in r.get("separation", []):
                by_kind.setdefault(s["kind"], []).append(s["si_sdr"])
        agg["si_sdr_by_kind"] = {k: float(np.mean(v)) for k, v in sorted(by_kind.items())}
    return agg


def evaluate_suite(codec, corpus, cfg: EvalConfig = EvalConfig(), extra_meta: dict | None = None) -> dict:
    """Run every metric over every track; failures are recorded per track."""
    if not corpus.tracks:
        raise ValueError("empty corpus")
    if codec.params_group is not None and codec.params_group != "ema":
        raise RuntimeError("model codecs must be evaluated with EMA parameters")
    if corpus.sample_rate != codec.sample_rate:
        raise ValueError(f"corpus rate {corpus.sample_rate} != codec rate {codec.sample_rate}")
    overlap = dsp.seconds_to_samples(cfg.overlap_seconds, codec.sample_rate)
    tc = TrackCoder(codec, overlap)
    rows = []
    for i, track in enumerate(corpus.tracks):
        try:
            rows.append(evaluate_track(tc, track, i, cfg, overlap))
        except Exception as exc:   # noqa: BLE001 - one bad track must not sink the suite
            log.warning("track %s failed: %s", track.id, exc)
            rows.append({"id": track.id, "error": f"{type(exc).__name__}: {exc}"})
    meta = {"codec": codec.descriptor(), "eval_config": cfg.to_dict(), "overlap_samples": overlap,
            "mss": {"distance": MSS_DISTANCE, "n_mels": MSS_MELS,
                    "resolutions": [list(r) for r in MSS_RESOLUTIONS]},
            "gains": [r.get("gain") for r in rows], "clamp_db": CLAMP_DB, "sentinel": SENTINEL}
    meta.update(extra_meta or {})
    return {"meta": meta, "per_track": rows, "aggregate": _aggregate(rows)}


def write_report(report: dict, path) -> tuple[Path, Path]:
    """JSON report plus a flat per-track CSV next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    csv_path = path.with_suffix(".csv")
    n_src = max((len(r.get("separation", [])) for r in report["per_track"]), default=0)
    header = ["id", "gain"] + TRACK_FIELDS + [f"{k}_{j}" for j in range(n_src) for k in ("si_sdr", "sep_mss")]
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in report["per_track"]:
            line = [r["id"], r.get("gain", "")] + [r.get(k, "") for k in TRACK_FIELDS]
            for j in range(n_src):
                seps = r.get("separation", [])
                line += [seps[j]["si_sdr"], seps[j]["mss"]] if j < len(seps) else ["", ""]
            w.writerow(line)
    return path, csv_path


def compare_reports(a: dict, b: dict) -> dict:
    """Per-metric aggregate deltas ``a - b`` and ratios ``a / b``."""
    out = {}
    for k, va in a["aggregate"].items():
        vb = b["aggregate"].get(k)
        if isinstance(va, (int, float)) and isinstance(vb, (int, float)):
            out[k] = {"a": va, "b": vb, "delta": va - vb,
                      "ratio": va / vb if vb != 0 else None}
    return out
