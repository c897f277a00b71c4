"""Walk the metric suite over the two analytic codecs.

The linear reference codec is exactly linear, so every linearity error is zero
and latent subtraction recovers D(E(s)) exactly. The tanh control codec breaks
both properties. Runs in a few seconds, no training needed.

    python3 notebooks/01_metric_oracles.py
"""
# %%
import tempfile
from pathlib import Path

import numpy as np

from linlab import codec as C
from linlab import data as D
from linlab import metrics as Mt

root = Path(tempfile.mkdtemp()) / "corpus"
D.make_corpus(D.generate_manifest(4, 2, seed=7, seconds=1.0), root)
corpus = D.load_corpus(root)
print(len(corpus.tracks), "tracks,", corpus.sample_rate, "Hz")

# %% suite over both codecs
ref = C.linear_reference_codec(4)
ctl = C.nonlinear_control_codec(4)
keys = ["snr_db", "enc_hom_error", "enc_add_error", "dec_hom_mss", "dec_add_mss", "si_sdr"]
for codec in (ref, ctl):
    agg = Mt.evaluate_suite(codec, corpus)["aggregate"]
    print(f"{codec.name:14s}", "  ".join(f"{k} {agg[k]:8.3g}" for k in keys))

# %% latent subtraction by hand on one track
track = corpus.tracks[0]
tc = Mt.TrackCoder(ref, 240)
z_mix = tc.encode(track.mix)
z_acc = tc.encode(track.mix - track.sources[0])
est = tc.decode(z_mix - z_acc, len(track.mix), 0)
target = tc.decode(tc.encode(track.sources[0]), len(track.mix), 0)
print("max |D(E(mix) - E(acc)) - D(E(s))| =", np.max(np.abs(est - target)))

# %% control codec: homogeneity error shrinks with input level
x = np.asarray(track.sources[0], dtype=np.float64)
for level in (1.0, 0.1, 0.01):
    print(f"level {level:5}: enc_hom_error(a=2) = {Mt.encoder_homogeneity_error(ctl, level * x, 2.0, 240):.2e}")
