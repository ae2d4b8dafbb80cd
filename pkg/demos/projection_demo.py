"""Project a few points onto a total-variation ball and check the result
against Dykstra's alternating projections."""

import numpy as np

from drfo.projection import dykstra_tv_ball, project_tv_ball, tv

center = np.array([0.5, 0.5, 0.0, 0.0])
rng = np.random.default_rng(0)
for radius in (0.1, 0.3, 0.6):
    q = center + rng.normal(scale=0.5, size=4)
    w = project_tv_ball(q, center, radius)
    d = dykstra_tv_ball(q, center, radius, max_iter=20000)
    print(f"radius {radius:.1f}: w = {np.round(w, 4)}  tv = {tv(w, center):.4f}  "
          f"|w - dykstra| = {np.abs(w - d).max():.1e}")
