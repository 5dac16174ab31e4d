"""Training loop: Adam, slice-level batches, early stopping, and the
three-stage gradual fine-tuning controller.

An epoch is one pass over all training slices, pooled across patients
and reshuffled each epoch by a seeded generator.  The validation focal
Tversky loss is monitored after every epoch; a checkpoint is written on
every strict improvement and the best one (not the last) is returned.

Gradual fine-tuning starts with every encoder frozen; each time the
validation loss plateaus for ``patience`` consecutive epochs the
controller unfreezes the deeper half of the encoder blocks, then all of
them, and finally stops.  Frozen/Unfrozen modes stop at the first
plateau.  Adam moment state is created lazily, so parameters unfrozen
mid-run start with zero moments while existing state is retained.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ctpseg.data import PatientStudy, SeverityGroup
from ctpseg.loss import LossSpec, focal_tversky_loss, one_hot
from ctpseg.model import (
    FreezeMode,
    FreezeStage,
    ModelGraph,
    initial_stage,
    save_checkpoint,
    set_freeze_stage,
)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch_index: int):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}"
        )


@dataclass
class AdamParams:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    batch_size: int = 2
    patience: int = 25
    optimizer: AdamParams = field(default_factory=AdamParams)
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    checkpoint_dir: Path | str = "checkpoints"

    def __post_init__(self):
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        self.checkpoint_dir = Path(self.checkpoint_dir)

    def to_dict(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "optimizer": asdict(self.optimizer),
            "loss": self.loss.to_dict(),
            "seed": self.seed,
            "checkpoint_dir": str(self.checkpoint_dir),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(
            max_epochs=raw.get("max_epochs", 1000),
            batch_size=raw.get("batch_size", 2),
            patience=raw.get("patience", 25),
            optimizer=AdamParams(**raw.get("optimizer", {})),
            loss=LossSpec.from_dict(raw.get("loss", {})),
            seed=raw.get("seed", 0),
            checkpoint_dir=raw.get("checkpoint_dir", "checkpoints"),
        )


# ---------------------------------------------------------------------------
# Fine-tuning controller
# ---------------------------------------------------------------------------


class ActionKind(Enum):
    CONTINUE = "Continue"
    ADVANCE_STAGE = "AdvanceStage"
    STOP = "Stop"


@dataclass
class ControllerAction:
    kind: ActionKind
    stage: FreezeStage | None = None  # target stage for ADVANCE_STAGE


@dataclass
class FineTuneController:
    patience: int
    stage: FreezeStage
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0

    @classmethod
    def for_mode(cls, mode: FreezeMode, patience: int) -> "FineTuneController":
        return cls(patience=patience, stage=initial_stage(mode))


def controller_step(
    ctrl: FineTuneController, val_loss: float, mode: FreezeMode
) -> ControllerAction:
    """Advance the early-stopping / gradual-unfreezing state machine by
    one validation measurement.  Improvement means a strict decrease."""
    if val_loss < ctrl.best_val_loss:
        ctrl.best_val_loss = val_loss
        ctrl.epochs_since_improvement = 0
        return ControllerAction(ActionKind.CONTINUE)
    ctrl.epochs_since_improvement += 1
    if ctrl.epochs_since_improvement < ctrl.patience:
        return ControllerAction(ActionKind.CONTINUE)
    if mode is FreezeMode.GRADUAL and ctrl.stage is not FreezeStage.ALL_UNFROZEN:
        next_stage = (
            FreezeStage.BOTTOM_HALF_UNFROZEN
            if ctrl.stage is FreezeStage.ALL_FROZEN
            else FreezeStage.ALL_UNFROZEN
        )
        ctrl.stage = next_stage
        ctrl.epochs_since_improvement = 0
        return ControllerAction(ActionKind.ADVANCE_STAGE, stage=next_stage)
    return ControllerAction(ActionKind.STOP)


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------


class StoppingReason(Enum):
    EARLY_STOP = "EarlyStop"
    MAX_EPOCHS = "MaxEpochs"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    stage: FreezeStage
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopping_reason: StoppingReason | None = None

    def best(self) -> EpochRecord:
        return min(self.records, key=lambda r: r.val_loss)

    def stages(self) -> list[FreezeStage]:
        seen = []
        for r in self.records:
            if not seen or seen[-1] is not r.stage:
                seen.append(r.stage)
        return seen

    def save_jsonl(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {
                            "epoch": r.epoch,
                            "train_loss": r.train_loss,
                            "val_loss": r.val_loss,
                            "stage": r.stage.value,
                            "wall_time": r.wall_time,
                        }
                    )
                    + "\n"
                )
            if self.stopping_reason is not None:
                fh.write(
                    json.dumps({"stopping_reason": self.stopping_reason.value}) + "\n"
                )


# ---------------------------------------------------------------------------
# Slice pools
# ---------------------------------------------------------------------------


@dataclass
class SlicePool:
    """All slices of a patient set, pooled for slice-level batching."""

    images: dict[str, np.ndarray]  # per map: (N, H, W, 3); 'mip': (N, H, W)
    labels: np.ndarray  # (N, H, W) int
    groups: list[SeverityGroup]
    nihss: list[int | None]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def batch(self, idxs: Sequence[int], model: ModelGraph) -> dict:
        out: dict = {name: self.images[name][idxs] for name in ("cbf", "cbv", "ttp", "tmax")}
        if "mip" in model.config.image_inputs:
            out["mip"] = self.images["mip"][idxs]
        if model.config.uses_nihss:
            out["nihss"] = [self.nihss[i] for i in idxs]
        return out


def build_slice_pool(studies: list[PatientStudy]) -> SlicePool:
    if not studies:
        raise ValueError("cannot build a slice pool from zero patients")
    images = {name: [] for name in ("cbf", "cbv", "ttp", "tmax", "mip")}
    labels, groups, nihss = [], [], []
    for study in studies:
        if study.ground_truth is None:
            raise ValueError(f"patient {study.patient_id!r} has no ground truth")
        for name, stack in study.maps.as_dict().items():
            images[name].append(stack)
        images["mip"].append(study.mip.data)
        labels.append(study.ground_truth.labels)
        groups.extend([study.group] * study.n_slices)
        nihss.extend([study.nihss] * study.n_slices)
    return SlicePool(
        images={k: np.concatenate(v, axis=0) for k, v in images.items()},
        labels=np.concatenate(labels, axis=0),
        groups=groups,
        nihss=nihss,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_val_loss: float
    best_epoch: int
    history: TrainHistory


def _batch_indices(n: int, batch_size: int) -> list[list[int]]:
    return [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]


def _evaluate_pool(model: ModelGraph, pool: SlicePool, config: TrainConfig) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for idxs in _batch_indices(len(pool), config.batch_size):
            probs = model(pool.batch(idxs, model))
            target = one_hot(pool.labels[idxs])
            groups = [pool.groups[i] for i in idxs]
            losses.append(float(focal_tversky_loss(probs, target, config.loss, groups)))
    return float(np.mean(losses))


def train(
    model: ModelGraph,
    train_set: list[PatientStudy] | SlicePool,
    val_set: list[PatientStudy] | SlicePool,
    config: TrainConfig,
) -> TrainResult:
    """Optimize ``model`` and return the best checkpoint plus history.

    Raises TrainingDivergedError (with epoch and batch index) on a
    non-finite training loss.
    """
    train_pool = train_set if isinstance(train_set, SlicePool) else build_slice_pool(train_set)
    val_pool = val_set if isinstance(val_set, SlicePool) else build_slice_pool(val_set)
    if len(train_pool) == 0 or len(val_pool) == 0:
        raise ValueError("training and validation sets must be nonempty")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    mode = model.config.freeze_mode
    stage = initial_stage(mode)
    set_freeze_stage(model, stage)
    ctrl = FineTuneController.for_mode(mode, config.patience)

    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.optimizer.learning_rate,
        betas=(config.optimizer.beta1, config.optimizer.beta2),
        eps=config.optimizer.epsilon,
    )

    checkpoint_path = Path(config.checkpoint_dir) / "best.pt"
    history = TrainHistory()
    best_val = float("inf")
    best_epoch = -1

    for epoch in range(1, config.max_epochs + 1):
        epoch_start = time.perf_counter()
        model.train()
        perm = rng.permutation(len(train_pool))
        batch_losses = []
        for batch_index, idxs in enumerate(_batch_indices(len(perm), config.batch_size)):
            chosen = [int(perm[i]) for i in idxs]
            probs = model(train_pool.batch(chosen, model))
            target = one_hot(train_pool.labels[chosen])
            groups = [train_pool.groups[i] for i in chosen]
            loss = focal_tversky_loss(probs, target, config.loss, groups)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))

        val_loss = _evaluate_pool(model, val_pool, config)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                stage=stage,
                wall_time=time.perf_counter() - epoch_start,
            )
        )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            save_checkpoint(model, checkpoint_path, epoch=epoch, val_loss=val_loss)

        action = controller_step(ctrl, val_loss, mode)
        if action.kind is ActionKind.ADVANCE_STAGE:
            stage = action.stage
            set_freeze_stage(model, stage)
        elif action.kind is ActionKind.STOP:
            history.stopping_reason = StoppingReason.EARLY_STOP
            break
    else:
        history.stopping_reason = StoppingReason.MAX_EPOCHS

    # leave the caller holding the best weights, not the last
    payload = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    model.load_state_dict(payload["state_dict"])
    return TrainResult(
        checkpoint_path=checkpoint_path,
        best_val_loss=best_val,
        best_epoch=best_epoch,
        history=history,
    )
