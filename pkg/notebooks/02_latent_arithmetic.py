"""Latent arithmetic with a trained consistency autoencoder.

Pass a checkpoint from `linlab train`, or let the script train a short lin run
(a few hundred steps, about a minute) so it is self-contained:

    python3 notebooks/02_latent_arithmetic.py [checkpoint.ckpt]
"""
# %%
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from linlab import codec as C
from linlab import data as D
from linlab import metrics as Mt
from linlab import trainer as T

work = Path(tempfile.mkdtemp())
corpus_dir = work / "corpus"
D.make_corpus(D.generate_manifest(8, 2, seed=11, seconds=1.0), corpus_dir)
corpus = D.load_corpus(corpus_dir)

if len(sys.argv) > 1:
    ckpt = Path(sys.argv[1])
else:
    cfg = T.load_config(Path(__file__).parents[1] / "configs" / "desk.json")
    cfg = replace(cfg, schedule=replace(cfg.schedule, total_steps=300))
    ckpt = T.train(cfg, corpus.clips(), work / "run", "lin", progress_every=100)
codec = C.cae_codec(ckpt)
tc = Mt.TrackCoder(codec, 240)
print("checkpoint", ckpt, "step", codec.descriptor()["checkpoint_step"])

# %% scaling the latent versus scaling the audio
track = corpus.tracks[0]
mix = np.asarray(track.mix, dtype=np.float64)
z = tc.encode(mix)
for a in (0.25, 0.5, 2.0):
    scaled = tc.decode(a * z, len(mix), 0)
    print(f"a={a:4}: peak ratio {np.max(np.abs(scaled)) / np.max(np.abs(tc.decode(z, len(mix), 0))):.3f}"
          f"  enc_hom_error {Mt.encoder_homogeneity_error(tc, mix, a):.3f}")

# %% summing latents of two sources
srcs = [np.asarray(s, dtype=np.float64) for s in track.sources]
snr_add, mss_add = Mt.decoder_additivity(tc, srcs)
print(f"D(E(u)+E(v)) vs D(E(u+v)): snr {snr_add:.2f} dB, mss {mss_add:.3f}")

# %% separation by subtracting the accompaniment latent
for j, s in enumerate(Mt.oracle_separation(tc, mix, srcs)):
    print(f"source {j} ({track.kinds[j]}): si_sdr {s['si_sdr']:.2f} dB, mss {s['mss']:.3f}")
