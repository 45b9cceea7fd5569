"""
Loss, optimisation loop and the two-stage transfer procedure.

Stage one trains the whole network from scratch on a salient-object
corpus and tags its checkpoint ``sod-pretrained``.  Stage two builds a
fresh model, loads that checkpoint into every parameter and fine-tunes
on a defocus-blur corpus (``dbd-finetuned``).  Training directly on the
defocus corpus without stage one is the ``scratch`` baseline.

Each stage writes, into its own output directory:

* ``loss.csv``: one ``epoch,iteration,loss`` row per optimiser step,
  rewritten after every epoch;
* ``state.pt``: parameters, Adam moments, counters and loss history,
  enough to resume the stage;
* ``<stage>.ckpt``: the final checkpoint with lineage metadata.

Batch order is a permutation drawn from ``(seed, epoch)`` and every
sample's augmentation from ``(seed, epoch, index)``, so a run is
reproducible from its seed.  ``state.pt`` also records how many batches of
an unfinished epoch have run, so a stage stopped by ``max_iterations`` resumes
with the next batch and logs the same rows an uninterrupted run would.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, Field, PositiveFloat, PositiveInt
from torch.utils.data import DataLoader

from data import AugmentConfig, Sample, SegmentationDataset
from network import STAGE_TAGS, AFIUConfig, CheckpointMetadata, LineageEntry, build_model, load_checkpoint, save_checkpoint
from store import write_loss_log

logger = logging.getLogger(__name__)

EPS = 1e-7
SHUFFLE_STREAM = 2 ** 31 - 1

LossRow = Tuple[int, int, float]


class TrainingError(RuntimeError):
    """Raised for empty corpora and non-finite losses."""


class OptimConfig(BaseModel):
    algorithm: Literal["adam"] = "adam"
    lr: PositiveFloat = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.0, ge=0.0)
    batch_size: PositiveInt = 8
    pretrain_epochs: PositiveInt = 150
    finetune_epochs: PositiveInt = 200
    max_iterations: Optional[PositiveInt] = None
    reduction: Literal["mean", "sum"] = "mean"
    seed: int = 0
    num_workers: int = Field(0, ge=0)
    deterministic: bool = True

    @classmethod
    def tiny(cls) -> "OptimConfig":
        return cls(lr=1e-3, pretrain_epochs=20, finetune_epochs=40)

    def epochs_for(self, stage: str) -> int:
        return self.pretrain_epochs if stage == "sod-pretrained" else self.finetune_epochs


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    batch: int = 0  # batches already run in the unfinished epoch
    iteration: int = 0
    losses: List[LossRow] = field(default_factory=list)

    def save(self, path: str, model: nn.Module, optimizer: torch.optim.Optimizer, seed: int) -> None:
        tmp = path + ".tmp"
        torch.save(
            {
                "epoch": self.epoch,
                "batch": self.batch,
                "iteration": self.iteration,
                "losses": list(self.losses),
                "seed": seed,
                "model": model.state_dict(),
                "optimizer": optimizer.state_dict(),
            },
            tmp,
        )
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str, model: nn.Module, optimizer: torch.optim.Optimizer) -> "TrainState":
        payload = torch.load(path, map_location="cpu", weights_only=False)
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        batch = payload.get("batch", 0)
        logger.info(
            "resuming from %s at epoch %d (batch %d), iteration %d", path, payload["epoch"], batch, payload["iteration"]
        )
        return cls(
            epoch=payload["epoch"],
            batch=batch,
            iteration=payload["iteration"],
            losses=[tuple(r) for r in payload["losses"]],
        )


@dataclass
class StageResult:
    stage: str
    checkpoint: str
    metadata: CheckpointMetadata
    losses: List[LossRow]
    loss_log: str


@dataclass
class TransferResult:
    pretrain: StageResult
    finetune: StageResult


def bce_loss(pred: torch.Tensor, gt: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy over every pixel, predictions clamped to [EPS, 1 - EPS].

    ``reduction="sum"`` is the plain pixel sum; ``"mean"`` divides it by
    N*H*W.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ in shape")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must only contain 0 and 1")
    p = pred.clamp(EPS, 1.0 - EPS)
    total = -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).sum()
    if reduction == "sum":
        return total
    return total / pred.numel()


def epoch_batches(count: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    """Shuffled index batches for one epoch; the last one may be short."""
    order = np.random.default_rng([seed, epoch, SHUFFLE_STREAM]).permutation(count).tolist()
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def configure_determinism(optim: OptimConfig) -> None:
    if optim.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


def iterations_to_reach(losses: Sequence[LossRow], target: float) -> Optional[int]:
    """Iteration at which the loss first drops to ``target`` or below."""
    for _, iteration, loss in losses:
        if loss <= target:
            return iteration
    return None


def train_stage(
    corpus: Sequence[Sample],
    model: nn.Module,
    optim: OptimConfig,
    stage_tag: str,
    out_dir: str,
    aug: Optional[AugmentConfig] = None,
    init: Optional[str] = None,
    resume: Optional[str] = None,
    epochs: Optional[int] = None,
    config_digest: str = "",
) -> StageResult:
    """Train ``model`` on ``corpus`` and write the stage's checkpoint and logs."""
    if stage_tag not in STAGE_TAGS:
        raise ValueError(f"unknown stage tag {stage_tag!r}; expected one of {', '.join(STAGE_TAGS)}")
    if not corpus:
        raise TrainingError(f"{stage_tag}: training corpus is empty")
    epochs = epochs or optim.epochs_for(stage_tag)
    if aug is None:
        aug = AugmentConfig(target_size=tuple(model.config.input_size))
    os.makedirs(out_dir, exist_ok=True)
    configure_determinism(optim)

    lineage: List[LineageEntry] = []
    if init is not None:
        init_meta = load_checkpoint(init, model)
        lineage = list(init_meta.lineage)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=optim.lr, betas=tuple(optim.betas), weight_decay=optim.weight_decay
    )
    state = TrainState.load(resume, model, optimizer) if resume else TrainState()

    dtype = next(model.parameters()).dtype
    dataset = SegmentationDataset(corpus, aug, seed=optim.seed)
    workers = 0 if optim.deterministic else optim.num_workers
    loss_log = os.path.join(out_dir, "loss.csv")
    state_path = os.path.join(out_dir, "state.pt")

    model.train()
    capped = optim.max_iterations is not None and state.iteration >= optim.max_iterations
    while state.epoch < epochs and not capped:
        current = state.epoch + 1
        dataset.set_epoch(state.epoch)
        plan = epoch_batches(len(dataset), optim.batch_size, optim.seed, state.epoch)
        # a resumed epoch skips the batches it already ran
        loader = DataLoader(dataset, batch_sampler=plan[state.batch:], num_workers=workers)
        for images, masks in loader:
            images = images.to(dtype)
            masks = masks.to(dtype)
            loss = bce_loss(model(images), masks, optim.reduction)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"{stage_tag}: non-finite loss {loss.item()} at epoch {current}, iteration {state.iteration + 1}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            state.iteration += 1
            state.batch += 1
            state.losses.append((current, state.iteration, float(loss.item())))
            if optim.max_iterations is not None and state.iteration >= optim.max_iterations:
                capped = True
                break
        # a cap that lands on the last batch still completes the epoch
        if state.batch == len(plan):
            state.epoch = current
            state.batch = 0
        write_loss_log(loss_log, state.losses)
        state.save(state_path, model, optimizer, optim.seed)
        epoch_losses = [row[2] for row in state.losses if row[0] == current]
        logger.info(
            "%s epoch %d/%d iteration %d mean loss %.6f",
            stage_tag,
            current,
            epochs,
            state.iteration,
            float(np.mean(epoch_losses)) if epoch_losses else math.nan,
        )

    checkpoint = os.path.join(out_dir, f"{stage_tag}.ckpt")
    metadata = CheckpointMetadata(
        stage=stage_tag,
        epochs=state.epoch,
        iterations=state.iteration,
        seed=optim.seed,
        config_digest=config_digest,
        init_from=init,
        lineage=lineage + [LineageEntry(stage=stage_tag, epochs=state.epoch, checkpoint=checkpoint)],
        model=model.config,
    )
    save_checkpoint(model, checkpoint, metadata)
    return StageResult(stage=stage_tag, checkpoint=checkpoint, metadata=metadata, losses=list(state.losses), loss_log=loss_log)


def train_scratch(
    corpus: Sequence[Sample],
    model_config: AFIUConfig,
    optim: OptimConfig,
    out_dir: str,
    aug: Optional[AugmentConfig] = None,
    config_digest: str = "",
) -> StageResult:
    """The baseline: train directly on the target corpus without stage one."""
    model = build_model(model_config, seed=optim.seed)
    return train_stage(
        corpus, model, optim, "scratch", out_dir, aug=aug, epochs=optim.finetune_epochs, config_digest=config_digest
    )


def two_stage_transfer(
    sod_corpus: Sequence[Sample],
    dbd_corpus: Sequence[Sample],
    model_config: AFIUConfig,
    optim: OptimConfig,
    out_dir: str,
    aug: Optional[AugmentConfig] = None,
    config_digest: str = "",
) -> TransferResult:
    """Pretrain on the SOD corpus, then fine-tune the whole network on the DBD corpus."""
    pretrain = train_stage(
        sod_corpus,
        build_model(model_config, seed=optim.seed),
        optim,
        "sod-pretrained",
        os.path.join(out_dir, "pretrain"),
        aug=aug,
        config_digest=config_digest,
    )
    finetune = train_stage(
        dbd_corpus,
        build_model(model_config, seed=optim.seed),
        optim,
        "dbd-finetuned",
        os.path.join(out_dir, "finetune"),
        aug=aug,
        init=pretrain.checkpoint,
        config_digest=config_digest,
    )
    return TransferResult(pretrain=pretrain, finetune=finetune)
