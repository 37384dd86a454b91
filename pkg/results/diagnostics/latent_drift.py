"""Diagnostic for the model-error trend: latent norm per episode, stale vs re-encoded model inputs.

    python3 latent_drift.py {stale|reencode} OUT.json
"""
import json
import sys

import numpy as np

from cmc.config import RunConfig
from cmc.controller import MetaController, tune_allocator

mode, out = sys.argv[1], sys.argv[2]
tune_allocator()
mc = MetaController(RunConfig(env="reacher", reward="sparse", algo="cacla", cmc=True, seed=0,
                              reencode=(mode == "reencode")))
log = []


def record(m):
    b = mc.buffer
    idx = (b.head - np.arange(1, m.steps + 1)) % b.capacity
    log.append({"episode": m.episode, "mean_e_prd": m.mean_e_prd,
                "mean_latent_norm": float(np.linalg.norm(b.phi[idx], axis=1).mean()),
                "return_ext": m.return_ext})


mc.run(on_episode=record)
json.dump({"mode": mode, "cpu_seconds": mc.result.cpu_seconds, "episodes": log}, open(out, "w"))
