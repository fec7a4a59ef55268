"""
Staged domain-adversarial training.

Phase "seg" trains the segmenter alone, phase "disc" trains the discriminator on frozen segmenter
features, and phase "joint" runs, per iteration, a segmentation step, a discriminator step and a
gradient-ascent step on the segmenter's convolutions scaled by the ramped alpha. Baseline mode runs
the same schedule without the discriminator.
"""
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from dannseg.augmentation import AugmentPolicy
from dannseg.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dannseg.dataset import Dataset
from dannseg.error import DannSegError, ErrorCode, NumericalError
from dannseg.functional import cross_entropy, soft_dice_loss
from dannseg.loader import Batch, TrainingData
from dannseg.metrics import dice
from dannseg.networks import (
    SEG_CONV,
    DiscriminatorConfig,
    NetworkParameters,
    UNetConfig,
    discriminator_forward,
    discriminator_for,
    domain_probabilities,
    init_parameters,
    unet_forward,
)
from dannseg.optimizer import build_optimizer
from dannseg.phantom import CLASS_NAMES
from dannseg.preprocessing import PreprocessConfig
from dannseg.tensor import Tape, Tensor
from dannseg.training_log import EarlyStopSelection, EpochRecord, TrainingLog, early_stop_select
from dannseg.util import derive_seed

logger = logging.getLogger(__name__)

ADVERSARIAL = "adversarial"
BASELINE = "baseline"
MODES = (ADVERSARIAL, BASELINE)

SEGMENTER_INIT_STREAM = 10
DISCRIMINATOR_INIT_STREAM = 11

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainerConfig:
    """
    Args:
        mode: "adversarial" or "baseline"
        phase_epochs: epochs of the segmenter-only, discriminator-only and joint phases
        alpha_ramp: epochs over which alpha rises linearly to alpha_max in the joint phase
        alpha_max: final adversarial strength, in [0, 1]
        seg_lr: segmenter learning rate in the first and in the joint phase
        disc_lr: discriminator learning rate in the second and in the joint phase
        optimizer: "adam" or "sgd" for the descent steps
        adversarial_optimizer: "sgd" (scaled gradient ascent) or "adam" with its own moments
        disc_steps: run discriminator steps at all (adversarial mode)
        plateau_window, plateau_tolerance: early-stopping plateau criterion
        precision: "float32" or "float64"
    """

    mode: str = ADVERSARIAL
    phase_epochs: Tuple[int, int, int] = (150, 150, 150)
    alpha_ramp: int = 150
    alpha_max: float = 1.0
    seg_lr: Tuple[float, float] = (1e-4, 1e-3)
    disc_lr: Tuple[float, float] = (1e-3, 1e-4)
    seg_batch_size: int = 16
    disc_batch_size: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"
    adversarial_optimizer: str = "sgd"
    disc_steps: bool = True
    plateau_window: int = 10
    plateau_tolerance: float = 0.005
    precision: str = "float32"

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if len(self.phase_epochs) != 3 or any(p < 1 for p in self.phase_epochs):
            problems.append("every phase needs at least one epoch")
        if not 1 <= self.alpha_ramp <= self.phase_epochs[-1]:
            problems.append("alpha ramp must lie in [1, joint-phase length]")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise DannSegError(ErrorCode.ALPHA_OUT_OF_RANGE, f"alpha_max {self.alpha_max} is outside [0, 1]")
        if any(lr <= 0 for lr in (*self.seg_lr, *self.disc_lr)):
            problems.append("learning rates must be positive")
        if self.seg_batch_size < 1 or self.disc_batch_size < 2:
            problems.append("seg batch size must be >= 1 and disc batch size >= 2")
        if self.optimizer not in ("adam", "sgd") or self.adversarial_optimizer not in ("adam", "sgd"):
            problems.append("optimizers must be 'adam' or 'sgd'")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {tuple(PRECISIONS)}")
        if self.plateau_window < 1 or self.plateau_tolerance < 0:
            problems.append("plateau window must be >= 1 and tolerance >= 0")
        if problems:
            raise DannSegError(ErrorCode.INVALID_CONFIG, "; ".join(problems))

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def total_epochs(self) -> int:
        return sum(self.phase_epochs)

    @property
    def joint_start(self) -> int:
        return self.phase_epochs[0] + self.phase_epochs[1]

    def phase(self, epoch: int) -> str:
        if epoch < self.phase_epochs[0]:
            return "seg"
        if epoch < self.joint_start:
            return "disc"
        return "joint"

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("phase_epochs", "seg_lr", "disc_lr"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        data = dict(data)
        for key in ("phase_epochs", "seg_lr", "disc_lr"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def alpha(epoch: int, config: TrainerConfig) -> float:
    """0 before the joint phase, then clamp((epoch - start) / ramp, 0, 1) scaled by alpha_max."""
    if epoch < config.joint_start:
        return 0.0
    ramp = min(max((epoch - config.joint_start) / config.alpha_ramp, 0.0), 1.0)
    return ramp * config.alpha_max


def check_domain_contract(dataset: Dataset, mode: str) -> Tuple[List[str], List[str]]:
    """
    Returns:
        tuple: (labelled training domains, unlabelled training domains)
    """
    train = dataset.select(split="train")
    labelled = sorted({s.domain_id for s in train if s.has_mask})
    unlabelled = sorted({s.domain_id for s in train} - set(labelled))
    if mode == ADVERSARIAL and (len(labelled) < 2 or len(unlabelled) < 1):
        raise DannSegError(
            ErrorCode.DOMAIN_CONTRACT,
            f"adversarial training needs >= 2 labelled and >= 1 unlabelled training domains, "
            f"got labelled={labelled}, unlabelled={unlabelled}",
        )
    if mode == BASELINE and not labelled:
        raise DannSegError(ErrorCode.DOMAIN_CONTRACT, "baseline training needs at least one labelled training domain")
    return labelled, unlabelled


def _all_finite(params: Optional[NetworkParameters]) -> bool:
    if params is None:
        return True
    return all(np.all(np.isfinite(t.data)) for _, t in params.items())


class DomainAdversarialTrainer:
    def __init__(
        self,
        config: TrainerConfig,
        unet_config: UNetConfig,
        disc_config: DiscriminatorConfig,
        data: TrainingData,
        seed: int,
        output_dir: Optional[str] = None,
        run_config: Optional[dict] = None,
    ):
        config.validate()
        self.config = config
        self.data = data
        self.seed = seed
        self.output_dir = output_dir
        self.dtype = config.dtype
        self.num_domains = data.num_domains

        self.segmenter = init_parameters(unet_config, derive_seed(seed, SEGMENTER_INIT_STREAM), self.dtype)
        self.discriminator: Optional[NetworkParameters] = None
        if config.mode == ADVERSARIAL:
            bound = discriminator_for(unet_config, disc_config)
            bound.num_domains = self.num_domains
            self.discriminator = init_parameters(bound, derive_seed(seed, DISCRIMINATOR_INIT_STREAM), self.dtype)

        opt = (config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.optimizers = {"segmenter": build_optimizer(config.optimizer, *opt)}
        if self.discriminator is not None:
            self.optimizers["discriminator"] = build_optimizer(config.optimizer, *opt)
            self.optimizers["adversarial"] = build_optimizer(config.adversarial_optimizer, *opt)

        self.log = TrainingLog(run_config)
        self.start_epoch = 0
        self._position = {}

    def seg_step(self, batch: Batch, lr: float) -> float:
        """One descent step on all segmenter parameters with L_S = soft Dice loss + cross-entropy."""
        if batch.targets is None:
            raise DannSegError(ErrorCode.UNLABELLED_SAMPLE, f"segmentation batch {batch.sample_ids} has no masks")
        self.segmenter.zero_grad()
        with Tape() as tape:
            out = unet_forward(self.segmenter, batch.images, mode="train", update_stats=True)
            target = Tensor(batch.targets, dtype=self.dtype)
            loss = soft_dice_loss(out.probs, target) + cross_entropy(out.probs, target)
        tape.backward(loss)
        self._watch(loss, "seg_step", batch)
        self.optimizers["segmenter"].step(self.segmenter.items(), lr)
        self._watch_params("seg_step", batch)
        return loss.item()

    def _domain_targets(self, batch: Batch) -> Tensor:
        if batch.domain_labels.size and (batch.domain_labels.min() < 0 or batch.domain_labels.max() >= self.num_domains):
            raise DannSegError(
                ErrorCode.UNKNOWN_DOMAIN,
                f"domain labels {sorted(set(batch.domain_labels.tolist()))} outside [0, {self.num_domains})",
            )
        return Tensor(batch.domain_targets(self.num_domains, self.dtype), dtype=self.dtype)

    def disc_step(self, batch: Batch, lr: float) -> Tuple[float, float]:
        """
        One descent step on the discriminator; segmenter taps are computed off the tape so no
        gradient reaches the segmenter.

        Returns:
            tuple: (loss, accuracy of the batch before the update)
        """
        self._require_discriminator()
        targets = self._domain_targets(batch)
        seg_out = unet_forward(self.segmenter, batch.images, mode="train", update_stats=False)
        taps = {name: tap.detach() for name, tap in seg_out.taps.items()}

        self.discriminator.zero_grad()
        with Tape() as tape:
            logits = discriminator_forward(self.discriminator, taps, mode="train", update_stats=True)
            loss = cross_entropy(domain_probabilities(logits), targets)
        tape.backward(loss)
        self._watch(loss, "disc_step", batch)
        accuracy = float(np.mean(np.argmax(logits.data, axis=1) == batch.domain_labels))
        self.optimizers["discriminator"].step(self.discriminator.items(), lr)
        self._watch_params("disc_step", batch)
        return loss.item(), accuracy

    def adversarial_step(self, batch: Batch, alpha_value: float, lr: float) -> Optional[float]:
        """
        Gradient ascent of L_D on the segmenter's convolutional partition with step alpha * lr.
        The discriminator is used with frozen values and statistics; alpha == 0 is a no-op.
        """
        self._require_discriminator()
        if not 0.0 <= alpha_value <= 1.0:
            raise DannSegError(ErrorCode.ALPHA_OUT_OF_RANGE, f"alpha {alpha_value} is outside [0, 1]")
        if alpha_value == 0.0:
            return None
        targets = self._domain_targets(batch)

        self.segmenter.zero_grad()
        with Tape() as tape:
            seg_out = unet_forward(self.segmenter, batch.images, mode="train", update_stats=False)
            logits = discriminator_forward(self.discriminator, seg_out.taps, mode="train", update_stats=False)
            loss = cross_entropy(domain_probabilities(logits), targets)
        tape.backward(loss)
        self._watch(loss, "adversarial_step", batch)
        self.optimizers["adversarial"].step(self.segmenter.items(SEG_CONV), alpha_value * lr, maximize=True)
        self._watch_params("adversarial_step", batch)
        return loss.item()

    def _require_discriminator(self) -> None:
        if self.discriminator is None:
            raise DannSegError(ErrorCode.INVALID_CONFIG, "baseline mode has no discriminator")

    def _watch(self, loss: Tensor, step: str, batch: Batch) -> None:
        if not np.all(np.isfinite(loss.data)):
            self._numerical_failure(step, batch, f"non-finite loss {loss.item()} in {step}")

    def _watch_params(self, step: str, batch: Batch) -> None:
        if not (_all_finite(self.segmenter) and _all_finite(self.discriminator)):
            self._numerical_failure(step, batch, f"non-finite parameters after {step}")

    def _numerical_failure(self, step: str, batch: Batch, message: str) -> None:
        context = dict(self._position, step=step, sample_ids=list(batch.sample_ids))
        if self.output_dir:
            path = os.path.join(self.output_dir, "nan_dump.json")
            with open(path, "w") as f:
                json.dump(context, f, indent=2)
            logger.error(f"Wrote numerical failure context to {path}")
        raise NumericalError(message, context)

    def run_epoch(self, epoch: int) -> EpochRecord:
        cfg = self.config
        phase = cfg.phase(epoch)
        a = alpha(epoch, cfg)
        seg_losses, disc_losses, accuracies = [], [], []
        adversarial = self.discriminator is not None and cfg.disc_steps

        seg_batches = self.data.seg_batches(epoch, cfg.seg_batch_size) if phase != "disc" else []
        iterations = self.data.iterations_per_epoch(cfg.seg_batch_size)
        for iteration in range(iterations):
            self._position = {"epoch": epoch, "phase": phase, "iteration": iteration}
            if phase == "seg":
                seg_losses.append(self.seg_step(seg_batches[iteration], cfg.seg_lr[0]))
            elif phase == "disc":
                if adversarial:
                    loss, acc = self.disc_step(self.data.disc_batch(epoch, iteration, cfg.disc_batch_size), cfg.disc_lr[0])
                    disc_losses.append(loss)
                    accuracies.append(acc)
            else:
                seg_losses.append(self.seg_step(seg_batches[iteration], cfg.seg_lr[1]))
                if adversarial:
                    disc_batch = self.data.disc_batch(epoch, iteration, cfg.disc_batch_size)
                    loss, acc = self.disc_step(disc_batch, cfg.disc_lr[1])
                    disc_losses.append(loss)
                    accuracies.append(acc)
                    self.adversarial_step(disc_batch, a, cfg.seg_lr[1])

        record = EpochRecord(
            epoch=epoch,
            phase=phase,
            alpha=a,
            seg_loss=float(np.mean(seg_losses)) if seg_losses else None,
            disc_loss=float(np.mean(disc_losses)) if disc_losses else None,
            disc_acc=float(np.mean(accuracies)) if accuracies else None,
            dice=self.validation_dice(),
        )
        logger.info(
            f"epoch={epoch} phase={phase} alpha={a:.3f} seg_loss={record.seg_loss} "
            f"disc_loss={record.disc_loss} disc_acc={record.disc_acc} val_dice={record.mean_dice}"
        )
        return record

    def validation_dice(self) -> Dict[str, float]:
        """Mean per-class Dice of eval-mode argmax predictions over the validation pool."""
        scores: Dict[str, List[float]] = {name: [] for name in CLASS_NAMES.values()}
        for batch in self.data.validation_batches(self.config.seg_batch_size):
            probs = unet_forward(self.segmenter, batch.images, mode="eval").probs.data
            predicted = np.argmax(probs, axis=1)
            truth = np.argmax(batch.targets, axis=1)
            for pred_mask, true_mask in zip(predicted, truth):
                for label, name in CLASS_NAMES.items():
                    scores[name].append(dice(pred_mask, true_mask, label))
        return {name: float(np.mean(values)) for name, values in scores.items() if values}

    def checkpoint(self, epoch: int) -> Checkpoint:
        return Checkpoint(
            self.segmenter,
            self.discriminator,
            {key: opt.state for key, opt in self.optimizers.items()},
            epoch=epoch,
            seed=self.seed,
            extra={
                "run_config": self.log.config,
                "trainer": self.config.to_dict(),
                "records": [r.to_dict() for r in self.log],
            },
        )

    def save(self, path: str, epoch: int) -> str:
        return save_checkpoint(path, self.checkpoint(epoch))

    def resume(self, path: str) -> None:
        """Restore networks, optimizer moments and the log so training continues after the saved epoch."""
        ckpt = load_checkpoint(path)
        if ckpt.seed != self.seed:
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"checkpoint seed {ckpt.seed} differs from run seed {self.seed}")
        if (ckpt.discriminator is None) != (self.discriminator is None):
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"checkpoint does not match {self.config.mode} mode")
        if ckpt.segmenter.config != self.segmenter.config:
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, "checkpoint segmenter config differs from the run config")
        if np.dtype(ckpt.segmenter.dtype) != np.dtype(self.dtype):
            raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, f"checkpoint precision {ckpt.segmenter.dtype} differs from {self.config.precision}")
        self.segmenter = ckpt.segmenter
        self.discriminator = ckpt.discriminator
        for key, optimizer in self.optimizers.items():
            if key in ckpt.optimizers:
                optimizer.state = ckpt.optimizers[key]
        self.log = TrainingLog(self.log.config, [EpochRecord.from_dict(r) for r in ckpt.extra.get("records", [])])
        self.log.truncate(ckpt.epoch)
        self.start_epoch = ckpt.epoch + 1
        logger.info(f"Resuming from {path} at epoch {self.start_epoch}")

    def fit(self, last_epoch: Optional[int] = None) -> TrainingLog:
        """Run epochs from start_epoch through last_epoch (default: the end of the schedule)."""
        end = self.config.total_epochs - 1 if last_epoch is None else last_epoch
        checkpoint_dir = os.path.join(self.output_dir, "checkpoints") if self.output_dir else None
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
        for epoch in range(self.start_epoch, end + 1):
            record = self.run_epoch(epoch)
            if checkpoint_dir:
                record.checkpoint_path = os.path.join("checkpoints", f"epoch_{epoch:04d}.ckpt")
            self.log.append(record)
            if checkpoint_dir:
                self.save(os.path.join(self.output_dir, record.checkpoint_path), epoch)
                self.log.save(
                    os.path.join(self.output_dir, "training_log.csv"),
                    os.path.join(self.output_dir, "training_log.json"),
                )
            self.start_epoch = epoch + 1
        return self.log


class TrainingResult:
    def __init__(self, log: TrainingLog, selection: EarlyStopSelection, model_path: Optional[str]):
        self.log = log
        self.selection = selection
        self.model_path = model_path


def select_model(log: TrainingLog, config: TrainerConfig, num_domains: int) -> EarlyStopSelection:
    """Early stopping on discriminator accuracy in adversarial mode, best validation Dice in baseline mode."""
    if config.mode == ADVERSARIAL and config.disc_steps:
        joint = log.phase("joint")
        if not joint.records:
            logger.warning("Training stopped before the joint phase; selecting the last epoch")
            return EarlyStopSelection(log.records[-1].epoch, None, True)
        return early_stop_select(joint, num_domains, config.plateau_window, config.plateau_tolerance)
    scored = [r for r in log if r.mean_dice is not None]
    if not scored:
        logger.warning("No validation Dice recorded; selecting the last epoch")
        return EarlyStopSelection(log.records[-1].epoch, None, True)
    best = max(scored, key=lambda r: (r.mean_dice, -r.epoch))
    return EarlyStopSelection(best.epoch, None, False)


def train(
    config: TrainerConfig,
    unet_config: UNetConfig,
    disc_config: DiscriminatorConfig,
    preprocess: PreprocessConfig,
    policy: AugmentPolicy,
    dataset: Dataset,
    seed: int,
    output_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
    run_config: Optional[dict] = None,
) -> TrainingResult:
    """
    Check the domain contract, train through all phases with a checkpoint per epoch and copy the
    selected epoch's checkpoint to `model.ckpt`.
    """
    config.validate()
    labelled, unlabelled = check_domain_contract(dataset, config.mode)
    if preprocess.crop_size != unet_config.input_size:
        raise DannSegError(
            ErrorCode.INVALID_CONFIG,
            f"crop size {preprocess.crop_size} must equal the U-Net input size {unet_config.input_size}",
        )
    logger.info(f"Training {config.mode}: labelled={labelled}, unlabelled={unlabelled}, seed={seed}")

    data = TrainingData(dataset, preprocess, policy, unet_config.num_classes, seed, config.dtype,
                        labelled_domains=labelled)
    if not data.validation:
        logger.warning("No labelled validation samples; model selection falls back to the last epoch")
    trainer = DomainAdversarialTrainer(config, unet_config, disc_config, data, seed, output_dir, run_config)
    if resume_from:
        trainer.resume(resume_from)
    log = trainer.fit()

    selection = select_model(log, config, data.num_domains)
    model_path = None
    if output_dir:
        source = os.path.join(output_dir, log.record_for(selection.epoch).checkpoint_path)
        model_path = os.path.join(output_dir, "model.ckpt")
        shutil.copyfile(source, model_path)
        with open(os.path.join(output_dir, "selection.json"), "w") as f:
            json.dump(selection.to_dict(), f, indent=2)
        logger.info(f"Selected epoch {selection.epoch} -> {model_path}")
    return TrainingResult(log, selection, model_path)
