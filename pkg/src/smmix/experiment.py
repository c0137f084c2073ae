"""Desk-scale SMMix vs CutMix comparison on the synthetic shape set."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import analysis
from .data import load_arrays, synth_generate
from .train import TrainConfig, Trainer, evaluate
from .vit import ModelConfig

log = logging.getLogger(__name__)

# sized so three seeds of both arms fit in well under an hour on one core
EXPERIMENT_MODEL = ModelConfig(embed_dim=48, depth=3, num_heads=4)
DATA_SEED = 2024
SEEDS = (0, 1, 2)

ARMS: dict[str, dict[str, Any]] = {
    "smmix": {"mix_mode": "smmix", "loss_fine": True, "loss_con": True},
    # plain CutMix baseline: one forward and one backward per step
    "cutmix": {"mix_mode": "cutmix", "loss_fine": False, "loss_con": False},
}


def arm_config(arm: str, seed: int, epochs: int = 30, model: ModelConfig = EXPERIMENT_MODEL,
               **overrides) -> TrainConfig:
    values = dict(ARMS[arm], model=model, seed=seed, epochs=epochs, eval_every=epochs)
    values.update(overrides)
    return TrainConfig(**values)


def run_arm(arm: str, seed: int, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
            epochs: int = 30, model: ModelConfig = EXPERIMENT_MODEL, **overrides) -> dict[str, Any]:
    cfg = arm_config(arm, seed, epochs, model, **overrides)
    t0 = time.perf_counter()
    trainer = Trainer(cfg, *train, *val)
    trainer.run()
    metrics = evaluate(trainer.model, *val)
    mixed = analysis.build_mixed_set(trainer.model, val[0], val[1], ARMS[arm]["mix_mode"], seed=seed)
    topk = analysis.mixed_top_k_accuracy(trainer.model, mixed)
    out = {"arm": arm, "seed": seed, "val_top1": metrics["top1"], "val_ce": metrics["mean_ce"],
           "mixed_top1": topk["top1"], "mixed_top2": topk["top2"],
           "final_loss": trainer.history[-1]["l_total"], "seconds": time.perf_counter() - t0}
    log.info("%s", out)
    return out


def run_directional(work_dir: str | Path, seeds=SEEDS, epochs: int = 30, n_images: int = 5000,
                    model: ModelConfig = EXPERIMENT_MODEL, **overrides) -> dict[str, Any]:
    """Train both arms per seed and summarise the seed-averaged metrics."""
    work_dir = Path(work_dir)
    data_dir = synth_generate(n_images, work_dir / "data", seed=DATA_SEED)
    train = load_arrays(data_dir, "train")
    val = load_arrays(data_dir, "val")
    t0 = time.perf_counter()
    runs = [run_arm(arm, s, train, val, epochs, model, **overrides) for s in seeds for arm in ARMS]
    summary: dict[str, Any] = {"runs": runs, "model": dataclasses.asdict(model), "epochs": epochs,
                               "n_train": len(train[1]), "n_val": len(val[1])}
    for arm in ARMS:
        mine = [r for r in runs if r["arm"] == arm]
        for key in ("val_top1", "mixed_top1", "mixed_top2"):
            summary[f"{arm}_{key}"] = float(np.mean([r[key] for r in mine]))
    summary["seconds"] = time.perf_counter() - t0
    (work_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
