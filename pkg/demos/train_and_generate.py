"""Train a small model through the command line and look at what it generates.

    python demos/train_and_generate.py [out_dir] [config]

Default config is configs/smoke.toml (200 steps, well under a minute). With
configs/default.toml the run takes a few minutes and produces the model the
acceptance suite measures.
"""

# %% Setup
import csv
import sys
from pathlib import Path

import numpy as np

from arflow.cli import main

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")
config = sys.argv[2] if len(sys.argv) > 2 else str(Path(__file__).resolve().parent.parent / "configs" / "smoke.toml")


def run(*argv):
    print("$ arflow " + " ".join(argv))
    code = main(list(argv))
    if code:
        sys.exit(code)


# %% Corpora: 1,000 training instances and 100 held-out ones.
run("make-corpus", "--out", str(root / "corpus"), "--n", "1000", "--seed", "0", "--force")
run("make-corpus", "--out", str(root / "held"), "--n", "100", "--seed", "1", "--force")

# %% Train. The metric CSV holds every logged step of the three losses.
run("train", "--config", config, "--corpus", str(root / "corpus"), "--out", str(root / "run"))
with open(root / "run" / "metrics.csv") as fh:
    rows = list(csv.DictReader(fh))
print(f"logged {len(rows)} steps; condition loss {float(rows[0]['loss_cond']):.3f} -> "
      f"{float(rows[-1]['loss_cond']):.3f}, flow loss {float(rows[0]['loss_c2f']):.3f} -> "
      f"{float(rows[-1]['loss_c2f']):.3f}")

# %% Generate the first four held-out instances in both settings.
ck = str(root / "run" / "final.ckpt")
for setting in ("continuation", "cross"):
    run("generate", "--checkpoint", ck, "--corpus", str(root / "held"), "--ids", "0-3",
        "--setting", setting, "--out", str(root / f"gen_{setting}"))
frames = np.loadtxt(root / "gen_continuation" / "utt0000.csv", delimiter=",", ndmin=2)
print(f"first continuation: {frames.shape[0]} frames of {frames.shape[1]} features (see the .pgm next to it)")

# %% Score the held-out corpus against the oracle.
run("eval", "--checkpoint", ck, "--corpus", str(root / "held"), "--out", str(root / "eval"))

# %% Every command left a run_manifest.json; replay reruns one and compares hashes.
run("replay", str(root / "gen_cross" / "run_manifest.json"), "--out", str(root / "gen_cross_replay"))
