"""Reference run for the 2-D transport check.

Flow matching moves N(0, I) onto eight Gaussians (std 0.1) spaced on a circle
of radius 3. A sample counts as placed when it lands within 0.5 of a mode
centre. Two samplers are measured:

* the exact marginal field, integrated with Euler steps: the ceiling that any
  learned field can approach;
* a VectorFieldNet trained for a range of step counts.

The results go to tests/data/transport_reference.json, which the acceptance
suite reads to check that its 90% threshold sits below what a trained field
reaches within the step budget.

    python demos/transport_reference.py
"""

import json
import time
from pathlib import Path

import numpy as np

from arflow.transport import Ring, fraction_near_modes, sample_exact, sample_trained, train_field

N_SAMPLES = 4096
OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "transport_reference.json"


def main():
    ring = Ring()
    report = {"ring": {"n_modes": ring.n_modes, "radius": ring.radius, "std": ring.std},
              "n_samples": N_SAMPLES, "tolerance": 0.5, "exact_field": {}, "trained": []}
    for nfe in (1, 3, 10, 100, 1000):
        frac = fraction_near_modes(ring, sample_exact(ring, N_SAMPLES, nfe, np.random.default_rng(1)))
        report["exact_field"][str(nfe)] = frac
        print(f"exact field   nfe={nfe:<5d} placed {frac:.4f}")
    for steps in (1000, 2500, 5000, 10000):
        t0 = time.perf_counter()
        net = train_field(ring, steps, seed=0)
        sec = time.perf_counter() - t0
        row = {"steps": steps, "train_sec": round(sec, 1)}
        for nfe in (10, 100):
            row[f"nfe{nfe}"] = fraction_near_modes(ring, sample_trained(net, N_SAMPLES, nfe, np.random.default_rng(1)))
        report["trained"].append(row)
        print(f"trained {steps:6d} steps ({sec:5.0f}s)  nfe=10 {row['nfe10']:.4f}  nfe=100 {row['nfe100']:.4f}")
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(report, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
