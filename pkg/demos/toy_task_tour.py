"""A tour of the synthetic task the models are trained on.

    python demos/toy_task_tour.py [out_dir]

Writes a few PGM images of rendered instances into ``out_dir`` (default
``demo_out/tour``) and prints the properties that make the task useful.
"""

# %% Setup
import sys
from pathlib import Path

import numpy as np

from arflow.c2f import decompose
from arflow.generation import write_pgm
from arflow.tasks import TaskSpec, make_corpus, make_examples, oracle_metrics

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/tour")
out.mkdir(parents=True, exist_ok=True)
spec = TaskSpec()
print(spec)

# %% Each symbol is a two-bump envelope over 16 feature bins.
# The second bump has two equally likely positions, so a regression model
# that predicts the mean would smear it across both.
for symbol in range(spec.vocab_size):
    a = spec.envelope(symbol, 0, 0)
    b = spec.envelope(symbol, 0, 1)
    print(f"symbol {symbol}: peaks at bins {np.argsort(a)[-2:][::-1]} or {np.argsort(b)[-2:][::-1]}")

# %% A corpus: every instance is a symbol string rendered in one of four styles.
corpus = make_corpus(spec, 200, seed=0)
inst = corpus[0]
print(f"\ninstance 0: symbols {inst.symbols.tolist()}, style {inst.style}, modes {inst.modes.tolist()}, "
      f"{inst.length} frames")
for i, x in enumerate(corpus[:4]):
    write_pgm(out / f"instance{i}.pgm", x.frames)

# %% Neighbouring frames are strongly correlated, which is what an informative
# prior centred on the previous frame exploits.
corr = [np.corrcoef(x.frames[j], x.frames[j + 1])[0, 1] for x in corpus for j in range(x.length - 1)]
print(f"mean adjacent-frame correlation: {np.mean(corr):.3f}")

# %% The coarse part keeps the even bins, the fine residual the odd ones.
coarse, fine = decompose(inst.frames)
print(f"coarse part {coarse.shape}, fine residual {fine.shape}, fine even bins all zero: {np.all(fine[:, 0::2] == 0)}")

# %% Models see examples: the text, a prompt (the first symbol's frames of the same
# instance, or of another instance in the same style) and the frames to produce.
cont = make_examples(spec, corpus, "continuation")[0]
cross = make_examples(spec, corpus, "cross")[0]
print(f"\ncontinuation: text {cont.text.tolist()}, prompt {cont.prompt.shape}, target {cont.target.shape}")
print(f"cross-style:  text {cross.text.tolist()}, prompt {cross.prompt.shape}, target {cross.target.shape}")

# %% The oracle scores a generated sequence against the target.
perfect = oracle_metrics(cont.target, cont, spec)
shuffled = oracle_metrics(np.random.default_rng(0).permutation(cont.target), cont, spec)
print(f"\ntarget itself:   mse {perfect.mse:.4f} corr {perfect.corr:.3f} mode_acc {perfect.mode_acc:.2f}")
print(f"shuffled frames: mse {shuffled.mse:.4f} corr {shuffled.corr:.3f} mode_acc {shuffled.mode_acc:.2f}")
print(f"\nimages in {out}")
