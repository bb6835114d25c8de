"""Phantom-scale ablation: supervised, + boundary loss, + semi-supervised.

Trains the three loss settings on a phantom suite with partial (trunk-only)
labels and measures how much of the unannotated fine-vessel tree each one
recovers, plus the surface error against the complete ground truth.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import NetworkConfig
from .losses import LossConfig
from .metrics import evaluate_case
from .phantom import PhantomSpec, phantom_suite
from .preprocess import PreparedCase, case_from_manifest
from .trainer import (
    PatchSets,
    TrainerConfig,
    fit_patches,
    inference_choice,
    make_state,
    patch_sets,
    sliding_window_probabilities,
)

log = logging.getLogger(__name__)

LOSS_VARIANTS = {
    "supervised": LossConfig(sup_weight=1.0, semi_weight=0.0, use_boundary=False),
    "boundary": LossConfig(sup_weight=1.0, semi_weight=0.0, use_boundary=True),
    "semi": LossConfig(),
}


@dataclass(frozen=True)
class AblationSettings:
    n_cases: int = 16
    grid_size: int = 64
    phantom_seed: int = 2024
    epochs: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    patch_size: int = 16
    stride: int = 4
    steps_per_epoch: int = 60
    base_channels: int = 8
    depth: int = 2
    learning_rate: float = 1e-3
    lr_step_epochs: int = 10
    ema_base_decay: float = 0.999
    inference_stride: int = 8
    variants: tuple[str, ...] = ("supervised", "boundary", "semi")
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def trainer_config(self, variant: str, seed: int) -> TrainerConfig:
        return TrainerConfig(
            epochs=self.epochs, batch_size=1, patch_size=self.patch_size, stride=self.stride,
            learning_rate=self.learning_rate, lr_step_epochs=self.lr_step_epochs, lr_factor=0.1,
            ema_base_decay=self.ema_base_decay, seed=seed, loss=LOSS_VARIANTS[variant],
            network=NetworkConfig("conv_unet", self.patch_size, self.base_channels, self.depth),
            steps_per_epoch=self.steps_per_epoch, spacing=self.phantom.spacing,
        )


@dataclass
class RunResult:
    variant: str
    seed: int
    fine_sensitivity: float  # mean over test cases
    surface_error: float  # median over test cases, mm, against the complete mask
    log: list[dict]
    per_case: list[dict]
    seconds: float


def train_and_score(settings: AblationSettings, variant: str, seed: int, data: PatchSets,
                    test_cases: list[PreparedCase], out_dir=None) -> RunResult:
    t0 = time.perf_counter()
    cfg = settings.trainer_config(variant, seed)
    state = make_state(cfg)
    records = fit_patches(state, data, cfg, out_dir=out_dir, resume=False)
    net, vessel_like = inference_choice(state, cfg)
    per_case = []
    for case in test_cases:
        src = case.vessel_like.data if vessel_like else case.image.data
        prob = sliding_window_probabilities(net, src, cfg.patch_size, settings.inference_stride)
        pred = prob > 0.5
        fine = case.full_mask.data.astype(bool) & ~case.mask.data.astype(bool)
        fine_sens = float((pred & fine).sum() / max(int(fine.sum()), 1))
        row = evaluate_case(pred, case.full_mask.data, None, case.image.spacing, case.case_id)
        per_case.append({"case": case.case_id, "fine_sensitivity": fine_sens, **row.as_dict()})
    se = np.array([r["surface_error"] for r in per_case], dtype=np.float64)
    return RunResult(
        variant=variant, seed=seed,
        fine_sensitivity=float(np.mean([r["fine_sensitivity"] for r in per_case])),
        surface_error=float(np.nanmedian(se)) if np.isfinite(se).any() else float("nan"),
        log=[{k: v for k, v in r.items() if k != "wall_time"} for r in records],
        per_case=per_case, seconds=time.perf_counter() - t0,
    )


@dataclass
class AblationResult:
    runs: list[RunResult]

    def get(self, variant: str, seed: int) -> RunResult:
        for r in self.runs:
            if r.variant == variant and r.seed == seed:
                return r
        raise KeyError((variant, seed))

    def median_fine_sensitivity(self, variant: str) -> float:
        return float(np.median([r.fine_sensitivity for r in self.runs if r.variant == variant]))

    def surface_order_holds(self, seed: int) -> bool:
        a, b, c = (self.get(v, seed).surface_error for v in ("supervised", "boundary", "semi"))
        return c <= b <= a

    def summary(self) -> dict:
        seeds = sorted({r.seed for r in self.runs})
        return {
            "median_fine_sensitivity": {v: self.median_fine_sensitivity(v) for v in LOSS_VARIANTS
                                        if any(r.variant == v for r in self.runs)},
            "surface_error": {f"{r.variant}/{r.seed}": r.surface_error for r in self.runs},
            "fine_sensitivity": {f"{r.variant}/{r.seed}": r.fine_sensitivity for r in self.runs},
            "surface_order_seeds": [s for s in seeds if all(any(r.variant == v and r.seed == s for r in self.runs)
                                                            for v in LOSS_VARIANTS) and self.surface_order_holds(s)],
            "seconds": {f"{r.variant}/{r.seed}": r.seconds for r in self.runs},
        }


def run_ablation(settings: AblationSettings, out_dir) -> AblationResult:
    torch.set_num_threads(1)
    out = Path(out_dir)
    spec = dataclasses.replace(settings.phantom, grid_size=settings.grid_size)
    manifest = phantom_suite(settings.n_cases, spec, settings.phantom_seed, out / "phantoms")
    # patch extraction does not depend on the loss variant or seed
    data = patch_sets(manifest, settings.trainer_config("semi", 0))
    test = [case_from_manifest(manifest, rec, spec.spacing) for rec in manifest.split("test")]
    log.info("%d labeled / %d unlabeled training patches", len(data.labeled), len(data.unlabeled))

    runs = []
    for seed in settings.seeds:
        for variant in settings.variants:
            res = train_and_score(settings, variant, seed, data, test, out / f"{variant}_seed{seed}")
            log.info("%s seed %d: fine sensitivity %.4f surface error %.4f (%.0fs)", variant, seed,
                     res.fine_sensitivity, res.surface_error, res.seconds)
            runs.append(res)
    result = AblationResult(runs)
    with open(out / "ablation.json", "w") as f:
        json.dump({"summary": result.summary(),
                   "runs": [dataclasses.asdict(r) for r in runs]}, f, indent=1)
    return result
