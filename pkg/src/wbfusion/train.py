"""Training and evaluation orchestration: L2 loss on encoded sRGB, Adam with
cosine learning rate, checkpoint selection by validation mean dE2000."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .metrics import compute_report, image_delta_e
from .model import (
    PRESET_NAMES,
    ModelConfig,
    forward,
    forward_graph,
    init_params,
    save_checkpoint,
)
from .synth import load_split

# ablation subsets from the preset-count study: 1 = daylight only, 3 = DST
DEFAULT_PRESET_SUBSETS = {
    1: ("daylight",),
    3: ("daylight", "shade", "tungsten"),
    5: PRESET_NAMES,
}


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    data_dir: str
    checkpoint_path: str
    total_steps: int = 5000
    batch_size: int = 4
    seed: int = 0
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    val_interval: int = 100
    presets: tuple = PRESET_NAMES
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.presets = tuple(self.presets)
        unknown = [p for p in self.presets if p not in PRESET_NAMES]
        if unknown:
            raise ValueError(f"unknown presets {unknown}; valid names are {PRESET_NAMES}")
        if len(self.presets) != self.model.preset_count:
            raise ValueError(
                f"{len(self.presets)} presets selected but model expects "
                f"{self.model.preset_count}"
            )

    def to_dict(self):
        d = asdict(self)
        d["presets"] = list(self.presets)
        return d


@dataclass
class RunManifest:
    """Training record: config snapshot, per-interval validation, selection."""

    config: dict
    version: str
    validation: list
    selected_step: int
    selected_de2000: float

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def selection_is_argmin(self):
        best = min(self.validation, key=lambda r: r["mean_de2000"])
        return (
            self.selected_step == best["step"]
            and self.selected_de2000 == best["mean_de2000"]
        )


def _preset_indices(names):
    return [PRESET_NAMES.index(n) for n in names]


def _load_arrays(data_dir, split, preset_idx):
    scenes = load_split(data_dir, split)
    inputs = [np.float32(s[1].concat(preset_idx)) for s in scenes]
    gts = [np.float32(s[2]) for s in scenes]
    ids = [s[0] for s in scenes]
    return ids, inputs, gts


def _validation_de(params, config, inputs, gts):
    values = []
    for x, gt in zip(inputs, gts):
        pred = forward(x, params, config)
        values.append(image_delta_e(pred, gt))
    return float(np.mean(values))


def train(config, log=None):
    """Run the full training loop; returns (params, RunManifest).

    Per step: sample a batch, forward, L2 loss between the unclamped output
    and ground truth in encoded sRGB, backward, Adam step at the cosine rate.
    The checkpoint written at the end is the parameter snapshot with the
    lowest validation mean dE2000.
    """
    from .optim import AdamState, CosineSchedule, adam_step, cosine_lr

    preset_idx = _preset_indices(config.presets)
    _, train_x, train_gt = _load_arrays(config.data_dir, "train", preset_idx)
    _, val_x, val_gt = _load_arrays(config.data_dir, "val", preset_idx)
    if not train_x:
        raise ValueError(f"{config.data_dir}: train split is empty")
    if not val_x:
        raise ValueError(f"{config.data_dir}: validation split is empty")

    params = init_params(config.model, seed=config.seed)
    tensors = params.tensor_list()
    adam = AdamState()
    schedule = CosineSchedule(config.lr_start, config.lr_end, config.total_steps)
    batch_rng = np.random.default_rng([config.seed, 1])

    best_de = np.inf
    best_step = -1
    best_arrays = params.snapshot()
    validation = []

    for step in range(1, config.total_steps + 1):
        lr = cosine_lr(schedule, step - 1)
        idx = batch_rng.integers(0, len(train_x), size=config.batch_size)
        x = np.stack([train_x[i] for i in idx])
        gt = np.stack([train_gt[i] for i in idx])

        params.zero_grad()
        pred = forward_graph(Tensor(x), params, config.model)
        diff = engine.sub(pred, Tensor(gt))
        loss = engine.mean_all(engine.mul(diff, diff))
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:.3e})")
        engine.backward(loss)
        adam_step(tensors, [t.grad for t in tensors], adam, lr)

        if step % config.val_interval == 0 or step == config.total_steps:
            val_de = _validation_de(params, config.model, val_x, val_gt)
            validation.append({"step": step, "mean_de2000": val_de})
            if val_de < best_de:
                best_de = val_de
                best_step = step
                best_arrays = params.snapshot()
            if log:
                log(f"step {step:>6}  loss {loss.item():.6f}  lr {lr:.2e}  val dE2000 {val_de:.4f}")

    params.restore(best_arrays)
    save_checkpoint(config.checkpoint_path, params)
    from . import __version__

    manifest = RunManifest(
        config=config.to_dict(),
        version=__version__,
        validation=validation,
        selected_step=best_step,
        selected_de2000=best_de,
    )
    manifest.save(config.checkpoint_path + ".manifest.json")
    return params, manifest


def evaluate_split(data_dir, split, params=None, config=None, presets=PRESET_NAMES, baseline=None, threads=1):
    """MetricsReport for a split, predicting with the model or a fixed image.

    baseline: None (use the model), a preset name, "awb", or "gt".
    """
    scenes = load_split(data_dir, split)
    if not scenes:
        raise ValueError(f"{data_dir}: split {split!r} is empty")
    if baseline is None and (params is None or config is None):
        raise ValueError("evaluate_split: need a model (params+config) or a baseline")
    preset_idx = _preset_indices(presets)

    def predict(item):
        sid, stack, gt, awb = item
        if baseline is None:
            pred = forward(np.float32(stack.concat(preset_idx)), params, config)
        elif baseline == "gt":
            pred = gt
        elif baseline == "awb":
            pred = awb
        elif baseline in PRESET_NAMES:
            pred = stack.images[PRESET_NAMES.index(baseline)]
        else:
            raise ValueError(f"unknown baseline {baseline!r}")
        return sid, pred, gt

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(predict, scenes))
    else:
        pairs = [predict(s) for s in scenes]
    return compute_report(pairs)


def write_report(report, out_dir, split):
    """Write the aligned table and the structured records for a split."""
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, f"report_{split}.txt")
    with open(table_path, "w") as fh:
        fh.write(report.to_table(title=f"split {split}"))
        fh.write("\n")
    json_path = os.path.join(out_dir, f"report_{split}.json")
    with open(json_path, "w") as fh:
        fh.write(report.to_json(split))
        fh.write("\n")
    return table_path, json_path
