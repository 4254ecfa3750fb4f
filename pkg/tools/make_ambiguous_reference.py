"""Regenerate tests/data/ambiguous_reference.json.

Runs the quadrature reference posterior for the frozen two-mode benchmark
sounding at high resolution and stores its 16-bin histogram plus shape
metrics. The test suite recomputes the marginal at lower resolution and
compares against these numbers, so any drift in the scene constants or the
quadrature shows up as a diff here.
"""
import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from xco2diff import scenegen
from xco2diff.refposterior import bin_pmf, reference_marginal


def strict_modes(x, p):
    floor = 0.05 * p.max()
    return [
        float(x[i])
        for i in range(1, len(p) - 1)
        if p[i] > p[i - 1] and p[i] > p[i + 1] and p[i] > floor
    ]


def main():
    cfg = scenegen.SceneConfig()
    cov, scene = scenegen.ambiguous_sounding(cfg)
    post = reference_marginal(cov, cfg, nx=481, n_aerosol=1601, aerosol_max=0.3,
                              n_nodes=48)
    hist = bin_pmf(post, *cfg.xco2_range, 16)
    modes = strict_modes(post.x, post.pmf)
    out = {
        "scene": {
            "xco2": scene.xco2,
            "albedo": list(scene.albedo),
            "aerosol": scene.aerosol,
            "sza_deg": scene.sza_deg,
            "psurf": scene.psurf,
        },
        "noise_stream": [scenegen.AMBIGUOUS_MASTER_SEED, "noise",
                         scenegen.AMBIGUOUS_NOISE_INDEX],
        "histogram_bins": 16,
        "histogram_range": list(cfg.xco2_range),
        "histogram": [round(float(v), 6) for v in hist],
        "modes": [round(m, 3) for m in modes],
        "posterior_mean": round(post.mean(), 3),
        "interval_90": [round(v, 3) for v in post.interval(0.9)],
        "resolution": {"nx": 481, "n_aerosol": 1601, "aerosol_max": 0.3,
                       "n_nodes": 48},
    }
    dest = pathlib.Path(__file__).resolve().parents[1] / "tests" / "data"
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / "ambiguous_reference.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(f"wrote {path}")
    print(f"modes={modes} mean={post.mean():.2f}")


if __name__ == "__main__":
    main()
