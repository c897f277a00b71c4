"""Directional A/B: the lin variant against the plain consistency baseline.

Trains both variants on the default 64-track corpus with the desk config and
evaluates them on a held-out 16-track corpus, one seed at a time. Each run
takes about four minutes on one CPU core. Ablations are included with --ablations.

    python3 notebooks/03_ab_walkthrough.py --out /tmp/ab --seeds 0 1 2 [--ablations]
"""
# %%
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from linlab import codec as C
from linlab import data as D
from linlab import metrics as Mt
from linlab import trainer as T

ap = argparse.ArgumentParser()
ap.add_argument("--out", type=Path, default=Path("ab_runs"))
ap.add_argument("--seeds", type=int, nargs="+", default=[0])
ap.add_argument("--ablations", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

# %% corpora: training tracks and a held-out evaluation set
train_dir, eval_dir = args.out / "corpus_train", args.out / "corpus_eval"
if not (train_dir / "index.json").exists():
    D.make_corpus(D.default_manifest(), train_dir)
if not (eval_dir / "index.json").exists():
    D.make_corpus(D.generate_manifest(16, 2, seed=1000), eval_dir)
train, held_out = D.load_corpus(train_dir), D.load_corpus(eval_dir)
cfg = T.load_config(Path(__file__).parents[1] / "configs" / "desk.json")

# %% train and evaluate every (variant, seed) pair
variants = ["lin", "baseline"] + (["hom-only", "add-only"] if args.ablations else [])
keys = ["mss", "snr_db", "enc_hom_error", "enc_add_error", "dec_hom_mss", "dec_add_mss", "si_sdr_median"]
results = {}
for seed in args.seeds:
    for v in variants:
        out = args.out / f"{v}_{seed}"
        ck = out / "checkpoint.ckpt"
        if not ck.exists():
            ck = T.train(replace(cfg, seed=seed), train.clips(), out, v, progress_every=500)
        rep = Mt.evaluate_suite(C.cae_codec(ck), held_out)
        Mt.write_report(rep, out / "eval.json")
        results[(v, seed)] = rep["aggregate"]

# %% medians over seeds, and the lin / baseline ratios
med = {v: {k: float(np.median([results[(v, s)][k] for s in args.seeds])) for k in keys} for v in variants}
print(f"{'metric':16s}" + "".join(f"{v:>12s}" for v in variants) + "   lin/baseline")
for k in keys:
    ratio = med["lin"][k] / med["baseline"][k] if med["baseline"][k] else float("nan")
    print(f"{k:16s}" + "".join(f"{med[v][k]:12.4f}" for v in variants) + f"   {ratio:8.3f}")
(args.out / "medians.json").write_text(json.dumps(med, indent=1, sort_keys=True))
