"""Desk-scale experiment drivers shared by the acceptance tests and the README recipes."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import SampleConfig, make_sample
from .gca import GCACompleter
from .lidarsim import beam_preset, scan
from .metrics import tmd, tsdf_fuse, visibility_mask
from .voxgrid import iou

log = logging.getLogger(__name__)

__all__ = ["SuiteData", "load_suite", "SuiteResult", "run_completion_suite"]

TRAIN_SEEDS = range(0, 64)
TEST_SEEDS = range(110000, 110016)


@dataclass
class SuiteData:
    X: list
    y: list
    test_inputs: list
    test_gt: list
    test_masks: list


def load_suite(train_seeds=TRAIN_SEEDS, test_seeds=TEST_SEEDS, cfg: SampleConfig | None = None) -> SuiteData:
    """Voxelized training pairs plus held-out inputs, ground truth and visibility masks."""
    cfg = cfg or SampleConfig()
    X, y = [], []
    for s in train_seeds:
        smp = make_sample(s, cfg)
        X.append(smp.input_grid())
        y.append(smp.gt_grid())
    ti, tg, tm = [], [], []
    for s in test_seeds:
        smp = make_sample(s, cfg)
        ti.append(smp.input_grid())
        tg.append(smp.gt_grid())
        images = [scan(smp.scene.mesh, p, beam_preset(cfg.beams))[0] for p in smp.tsdf_poses]
        tm.append(visibility_mask(tsdf_fuse(images, smp.fine_volume)))
    return SuiteData(X, y, ti, tg, tm)


@dataclass
class SuiteResult:
    use_planner: bool
    seed: int
    input_iou: float
    completion_iou: float
    tmd: float
    train_seconds: float
    per_scene: list = field(default_factory=list)

    @property
    def gain(self):
        return self.completion_iou - self.input_iou


def run_completion_suite(data: SuiteData, seed, use_planner=True, n_steps=600, k=3, **params) -> SuiteResult:
    """Train one coarse model and score ``k`` completions of every held-out scene.

    IoU is taken inside the visibility mask and averaged over the ``k``
    completions; TMD uses the completions' cell centers (meters).
    """
    t0 = time.time()
    est = GCACompleter(use_planner=use_planner, n_steps=n_steps, seed=seed, **params).fit(data.X, data.y)
    train_s = time.time() - t0
    rows = []
    for j, (x, g, m) in enumerate(zip(data.test_inputs, data.test_gt, data.test_masks)):
        comps = est.sample([x], k=k, seed=seed * 100 + j)[0]
        ious = [iou(c, g, m) for c in comps]
        pts = [c.centers() if len(c) else x.centers() for c in comps]
        rows.append({"input_iou": iou(x, g, m), "iou": float(np.mean(ious)), "tmd": tmd([pts])})
    res = SuiteResult(use_planner, seed, float(np.mean([r["input_iou"] for r in rows])),
                      float(np.mean([r["iou"] for r in rows])), float(np.mean([r["tmd"] for r in rows])),
                      train_s, rows)
    log.info("planner=%s seed=%d iou %.3f (input %.3f) tmd %.4f", use_planner, seed, res.completion_iou,
             res.input_iou, res.tmd)
    return res
