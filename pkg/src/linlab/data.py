"""Synthetic multi-source corpus and mono WAV I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

KINDS = ("harmonic_tone", "chirp", "filtered_noise", "pulse_train")
MAX_PEAK = 0.5
# sources are rounded to this grid so that float32 sums of up to 4 sources stay exact
QUANT = 2.0 ** -20


class WavError(ValueError):
    pass


class UnsupportedFormat(WavError):
    pass


# --------------------------------------------------------------------------- WAV

def save_wav(path, x, sample_rate: int, fmt: str = "float32"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UnsupportedFormat("only mono signals can be written")
    if fmt == "float32":
        tag, bits, payload = 3, 32, x.astype("<f4").tobytes()
    elif fmt == "pcm16":
        q = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
        tag, bits, payload = 1, 16, q.tobytes()
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    block = bits // 8
    fmt_chunk = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * block, block, bits)
    chunks = [b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk]
    if tag == 3:
        chunks.append(b"fact" + struct.pack("<II", 4, len(x)))
    data = b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        data += b"\x00"
    body = b"WAVE" + b"".join(chunks) + data
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def load_wav(path, sample_rate: int | None = None) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 or float32 WAV; returns ``(samples, rate)``."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavError(f"{path}: missing RIFF/WAVE header at byte offset 0")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: chunk {cid!r} truncated at byte offset {pos}")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: fmt chunk too short at byte offset {pos}")
            tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == 0xFFFE and size >= 40:
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, bits, pos)
        elif cid == b"data":
            data = (body, pos)
        pos += 8 + size + (size % 2)
    if fmt is None:
        raise WavError(f"{path}: no fmt chunk found (scanned to byte offset {pos})")
    if data is None:
        raise WavError(f"{path}: no data chunk found (scanned to byte offset {pos})")
    tag, channels, rate, bits, fpos = fmt
    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels (only mono supported), fmt at byte offset {fpos}")
    if (tag, bits) == (3, 32):
        x = np.frombuffer(data[0], dtype="<f4").astype(np.float64)
    elif (tag, bits) == (1, 16):
        x = np.frombuffer(data[0], dtype="<i2").astype(np.float64) / 32767.0
    else:
        raise UnsupportedFormat(f"{path}: format tag {tag} with {bits} bits, fmt at byte offset {fpos}")
    if sample_rate is not None and rate != sample_rate:
        raise WavError(f"{path}: sample rate {rate} != expected {sample_rate} (resampling unsupported)")
    return x, rate


# ---------------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SourceSpec:
    kind: str
    amplitude: float = 0.4
    f0: float = 220.0
    n_partials: int = 3
    f_end: float = 880.0
    band: tuple = (300.0, 1200.0)
    rate: float = 4.0
    attack: float = 0.01
    decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "band", tuple(float(b) for b in self.band))
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not 0 <= self.amplitude <= MAX_PEAK:
            raise ValueError(f"amplitude must lie in [0, {MAX_PEAK}]")
        if self.f0 <= 0 or self.f_end <= 0 or self.n_partials < 1 or self.rate <= 0:
            raise ValueError("frequencies, rate and partial count must be positive")
        if not 0 <= self.band[0] < self.band[1]:
            raise ValueError("band must satisfy 0 <= low < high")
        if self.attack < 0 or self.decay <= 0:
            raise ValueError("attack must be >= 0 and decay > 0")


def _envelope(t, attack, decay):
    env = np.exp(-t / decay)
    if attack > 0:
        env = env * np.minimum(1.0, t / attack)
    return env


def synth_source(spec: SourceSpec, sample_rate: int, seconds: float) -> np.ndarray:
    """Render one source; peak is exactly ``spec.amplitude`` unless silent."""
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(spec.seed)
    nyq = sample_rate / 2.0
    if spec.kind == "harmonic_tone":
        x = np.zeros(n)
        for k in range(1, spec.n_partials + 1):
            if spec.f0 * k < nyq:
                x += np.sin(2 * np.pi * spec.f0 * k * t + rng.uniform(0, 2 * np.pi)) / k
        x *= _envelope(t, spec.attack, spec.decay)
    elif spec.kind == "chirp":
        sweep = spec.f0 * t + (spec.f_end - spec.f0) * t ** 2 / (2 * seconds)
        x = np.sin(2 * np.pi * sweep + rng.uniform(0, 2 * np.pi)) * _envelope(t, spec.attack, spec.decay)
    elif spec.kind == "filtered_noise":
        spec_ = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec_[(f < spec.band[0]) | (f > spec.band[1])] = 0.0
        x = np.fft.irfft(spec_, n) * _envelope(t, spec.attack, spec.decay)
    else:
        x = np.zeros(n)
        burst = rng.standard_normal(n)
        period = 1.0 / spec.rate
        for onset in np.arange(rng.uniform(0, period), seconds, period):
            i0 = int(onset * sample_rate)
            tt = t[i0:] - t[i0]
            x[i0:] += burst[:n - i0] * _envelope(tt, spec.attack, spec.decay) \
                + np.sin(2 * np.pi * spec.f0 * tt) * _envelope(tt, spec.attack, 2 * spec.decay)
    peak = np.max(np.abs(x)) if n else 0.0
    if spec.amplitude == 0 or peak == 0:
        return np.zeros(n)
    return x * (spec.amplitude / peak)


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / QUANT) * QUANT


# ------------------------------------------------------------------------ corpus

@dataclass
class CorpusManifest:
    sample_rate: int = 8000
    window_seconds: float = 2.0
    seed: int = 0
    tracks: list = field(default_factory=list)   # [{"id": str, "sources": [SourceSpec]}]

    def to_dict(self) -> dict:
        return {"sample_rate": self.sample_rate, "window_seconds": self.window_seconds,
                "seed": self.seed,
                "tracks": [{"id": t["id"], "sources": [asdict(s) for s in t["sources"]]}
                           for t in self.tracks]}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        tracks = []
        for t in d.get("tracks", []):
            srcs = [SourceSpec(**s) for s in t["sources"]]
            if not srcs:
                raise ValueError(f"track {t.get('id')} has no sources")
            tracks.append({"id": str(t["id"]), "sources": srcs})
        return cls(int(d.get("sample_rate", 8000)), float(d.get("window_seconds", 2.0)),
                   int(d.get("seed", 0)), tracks)


def generate_manifest(n_tracks: int = 64, n_sources: int = 2, seed: int = 0,
                      sample_rate: int = 8000, seconds: float = 2.0) -> CorpusManifest:
    """Random track list; each track mixes ``n_sources`` sources of distinct kinds."""
    if not 1 <= n_sources <= len(KINDS):
        raise ValueError(f"n_sources must be in [1, {len(KINDS)}]")
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n_tracks):
        kinds = rng.choice(len(KINDS), size=n_sources, replace=False)
        srcs = []
        for k in kinds:
            kind = KINDS[k]
            common = dict(amplitude=float(rng.uniform(0.25, MAX_PEAK)),
                          attack=float(rng.uniform(0.005, 0.05)),
                          seed=int(rng.integers(0, 2 ** 31)))
            if kind == "harmonic_tone":
                srcs.append(SourceSpec(kind, f0=float(np.exp(rng.uniform(np.log(110), np.log(440)))),
                                       n_partials=int(rng.integers(2, 6)),
                                       decay=float(rng.uniform(0.5, 2.0)), **common))
            elif kind == "chirp":
                srcs.append(SourceSpec(kind, f0=float(rng.uniform(200, 600)),
                                       f_end=float(rng.uniform(400, 1600)),
                                       decay=float(rng.uniform(0.8, 3.0)), **common))
            elif kind == "filtered_noise":
                lo = float(rng.uniform(200, 1500))
                srcs.append(SourceSpec(kind, band=(lo, lo + float(rng.uniform(200, 1200))),
                                       decay=float(rng.uniform(0.5, 2.0)), **common))
            else:
                srcs.append(SourceSpec(kind, f0=float(rng.uniform(60, 150)),
                                       rate=float(rng.uniform(2, 8)),
                                       decay=float(rng.uniform(0.02, 0.1)), **common))
        tracks.append({"id": f"track_{i:03d}", "sources": srcs})
    return CorpusManifest(sample_rate, seconds, seed, tracks)


def default_manifest() -> CorpusManifest:
    return generate_manifest(64, 2, seed=0)


def render_track(track: dict, manifest: CorpusManifest) -> tuple[np.ndarray, list[np.ndarray]]:
    sources = [quantize(synth_source(s, manifest.sample_rate, manifest.window_seconds))
               for s in track["sources"]]
    return np.sum(sources, axis=0), sources


def make_corpus(manifest: CorpusManifest, out_dir) -> Path:
    """Write per-source and mix WAVs (float32) plus ``index.json``; returns the index path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"manifest": manifest.to_dict(), "tracks": []}
    for track in manifest.tracks:
        mix, sources = render_track(track, manifest)
        tdir = out / "tracks" / track["id"]
        tdir.mkdir(parents=True, exist_ok=True)
        entry = {"id": track["id"], "mix": f"tracks/{track['id']}/mix.wav", "sources": []}
        save_wav(tdir / "mix.wav", mix, manifest.sample_rate)
        for j, (spec, x) in enumerate(zip(track["sources"], sources)):
            rel = f"tracks/{track['id']}/source_{j}.wav"
            save_wav(out / rel, x, manifest.sample_rate)
            entry["sources"].append({"path": rel, "kind": spec.kind, "seed": spec.seed})
        index["tracks"].append(entry)
    path = out / "index.json"
    path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


@dataclass
class Track:
    id: str
    mix: np.ndarray
    sources: list
    kinds: list


@dataclass
class Corpus:
    sample_rate: int
    tracks: list

    def clips(self, use_mixes: bool = True, use_sources: bool = True) -> np.ndarray:
        """Stack of equal-length training signals."""
        out = []
        for t in self.tracks:
            if use_mixes:
                out.append(t.mix)
            if use_sources:
                out.extend(t.sources)
        if not out:
            raise ValueError("no clips selected")
        return np.stack(out)


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    index_path = root / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no corpus index at {index_path}")
    index = json.loads(index_path.read_text())
    rate = int(index["manifest"]["sample_rate"])
    tracks = []
    for t in index["tracks"]:
        mix, _ = load_wav(root / t["mix"], rate)
        srcs = [load_wav(root / s["path"], rate)[0] for s in t["sources"]]
        tracks.append(Track(t["id"], mix, srcs, [s["kind"] for s in t["sources"]]))
    return Corpus(rate, tracks)
