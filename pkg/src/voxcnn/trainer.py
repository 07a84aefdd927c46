"""The full training protocol, plus evaluate/predict entry points.

Per epoch: seeded shuffle, per-sample augmentation (training split only),
batched forward/backward, optimizer step; then a full inference pass over
the validation split, macro F1, the early-stop check, and finally the
plateau-scheduler update (always in that order). Training ends on the
stop signal or the epoch cap; the best-validation weights are restored
before the checkpoint is written.

Every random decision draws from a labeled child stream of the run seed
(shuffle, per-sample augmentation, per-batch dropout), so reruns are
bit-identical and augmentation can be toggled without shifting any other
stream.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import optim
from .augment import AugmentConfig, apply_pipeline
from .checkpoint import model_from_checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import class_weights_from_counts, onehot, weighted_cce
from .metrics import EvalReport, confusion_matrix, macro_f1
from .model import Model
from .rng import Rng
from .volume import (DETECTION_LABELS, SEVERITY_LABELS, DatasetIndex,
                     load_sample, read_index, resample_volume)

EVAL_BATCH = 5
_CACHE_BUDGET_BYTES = 512 << 20


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_macro_f1: float
    val_loss: float
    val_macro_f1: float
    lr: float
    wall_time_s: float


class RunLog:
    """Per-epoch training records, persisted as tab-separated UTF-8."""

    COLUMNS = ("epoch", "train_loss", "train_macro_f1", "val_loss",
               "val_macro_f1", "lr", "wall_time_s")

    def __init__(self):
        self.records: List[EpochRecord] = []
        self.best_epoch = 0
        self.best_metric = 0.0

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must strictly increase")
        self.records.append(rec)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.records:
            lines.append("\t".join((
                str(r.epoch),
                f"{r.train_loss:.17g}",
                f"{r.train_macro_f1:.17g}",
                f"{r.val_loss:.17g}",
                f"{r.val_macro_f1:.17g}",
                f"{r.lr:.17g}",
                f"{r.wall_time_s:.3f}",
            )))
        lines.append(f"# best_epoch = {self.best_epoch}")
        lines.append(f"# best_val_macro_f1 = {self.best_metric:.17g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


class _VolumeStore:
    """Loads samples at the network dims, caching under a byte budget."""

    def __init__(self, index: DatasetIndex, target_dims: Tuple[int, int, int]):
        self.paths = [p for p, _ in index.samples]
        self.target = tuple(target_dims)
        self._cache = {}
        self._bytes = 0

    def get(self, i: int) -> np.ndarray:
        """Raw 0..255 voxels of sample ``i``, shaped to the target dims."""
        cached = self._cache.get(i)
        if cached is not None:
            return cached
        vol = load_sample(self.paths[i])
        if vol.dims != self.target:
            vol = resample_volume(vol, self.target)
        vox = vol.voxels
        if self._bytes + vox.nbytes <= _CACHE_BUDGET_BYTES:
            self._cache[i] = vox
            self._bytes += vox.nbytes
        return vox


def _space_for_task(task: str) -> Tuple[str, ...]:
    return DETECTION_LABELS if task == "detection" else SEVERITY_LABELS


def _check_space(index: DatasetIndex, expected: Tuple[str, ...], what: str) -> None:
    if index.label_space != expected:
        raise ValueError(f"{what}: dataset labels {index.label_space} do not match "
                         f"the expected classes {expected}")


def _inference_pass(model: Model, store: _VolumeStore, labels: np.ndarray,
                    weights: np.ndarray, batch: int = EVAL_BATCH):
    """Full inference sweep: (mean weighted CCE, confusion matrix)."""
    k = model.spec.output_classes
    n = len(labels)
    loss_sum = 0.0
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch):
        idx = range(start, min(start + batch, n))
        x = np.stack([store.get(i) for i in idx])[:, None] / np.float32(255.0)
        probs = model.forward(x, training=False)
        y = labels[list(idx)]
        cce, _ = weighted_cce(probs, onehot(y, k), weights)
        loss_sum += cce * len(y)
        preds[list(idx)] = probs.argmax(axis=1)
    return loss_sum / n, confusion_matrix(labels, preds, k)


@dataclass
class TrainResult:
    checkpoint_path: Path
    runlog_path: Path
    curves_path: Optional[Path]
    runlog: RunLog
    model: Model


def train(cfg: TrainConfig, data_dir, out_dir, render_figures: bool = True) -> TrainResult:
    """Run the training protocol on indexed data; writes all artifacts.

    ``data_dir`` must contain ``train.tsv`` and ``validation.tsv`` index
    files. Artifacts in ``out_dir``: ``model.miac`` (best weights),
    ``runlog.tsv``, and ``curves.png`` unless figures are disabled.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_idx = read_index(data_dir / "train.tsv", "train")
    val_idx = read_index(data_dir / "validation.tsv", "validation")
    space = _space_for_task(cfg.task)
    _check_space(train_idx, space, "train split")
    _check_space(val_idx, space, "validation split")

    spec = cfg.model_spec()
    rng = Rng(cfg.seed)
    model = Model(spec, rng.child("model"))
    k = spec.output_classes
    if cfg.class_weights == "balanced":
        weights = class_weights_from_counts(train_idx.class_counts())
    else:
        weights = np.ones(k, dtype=np.float64)

    params = model.parameters()
    if cfg.optimizer == "radam":
        optimizer = optim.RAdam(params, lr=cfg.initial_lr)
    else:
        optimizer = optim.SgdMomentum(params, lr=cfg.initial_lr, momentum=0.9)
    scheduler = optim.PlateauScheduler(cfg.initial_lr, cfg.scheduler_factor,
                                       cfg.scheduler_patience)
    stopper = optim.EarlyStopper(cfg.early_stop_patience, cfg.max_epochs)
    aug_cfg = AugmentConfig(gate_rate=cfg.aug_gate_rate,
                            gate_geometry=cfg.aug_gate_geometry)

    train_store = _VolumeStore(train_idx, spec.input_dims)
    val_store = _VolumeStore(val_idx, spec.input_dims)
    train_labels = train_idx.label_ints()
    val_labels = val_idx.label_ints()
    n_train = len(train_labels)

    log = RunLog()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        erng = rng.child(f"epoch{epoch}")
        order = erng.child("shuffle").permutation(n_train)
        loss_sum = 0.0
        seen_true = np.empty(n_train, dtype=np.int64)
        seen_pred = np.empty(n_train, dtype=np.int64)
        pos = 0
        for b, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            vols = []
            for ds_i in idx:
                vox = train_store.get(int(ds_i))
                if cfg.augment:
                    vox = apply_pipeline(vox, erng.child(f"aug{int(ds_i)}"), aug_cfg)
                vols.append(vox)
            x = np.stack(vols)[:, None] / np.float32(255.0)
            y = train_labels[idx]
            probs = model.forward(x, training=True, rng=erng.child(f"dropout{b}"))
            cce, grad_logits = weighted_cce(probs, onehot(y, k), weights)
            total = cce + model.l2_penalty()
            grads = model.backward(grad_logits)
            optimizer.step(grads)
            loss_sum += total * len(idx)
            seen_true[pos:pos + len(idx)] = y
            seen_pred[pos:pos + len(idx)] = probs.argmax(axis=1)
            pos += len(idx)
        train_loss = loss_sum / n_train
        train_f1 = macro_f1(confusion_matrix(seen_true, seen_pred, k))

        val_loss, val_cm = _inference_pass(model, val_store, val_labels, weights)
        val_f1 = macro_f1(val_cm)

        stop = stopper.update(val_f1, model.snapshot())
        lr_now = scheduler.update(val_f1)
        optimizer.lr = lr_now
        log.append(EpochRecord(epoch, train_loss, train_f1, val_loss, val_f1,
                               lr_now, time.perf_counter() - t0))
        if stop:
            break

    if stopper.best_weights is not None:
        model.restore(stopper.best_weights)
    log.best_epoch = stopper.best_epoch
    log.best_metric = stopper.best if stopper.best is not None else 0.0

    checkpoint_path = out_dir / "model.miac"
    save_checkpoint(checkpoint_path, model)
    runlog_path = out_dir / "runlog.tsv"
    log.write(runlog_path)
    curves_path = None
    if render_figures:
        from . import report
        curves_path = out_dir / "curves.png"
        report.save_training_curves(log, curves_path)
    return TrainResult(checkpoint_path, runlog_path, curves_path, log, model)


def evaluate(checkpoint_path, data_dir, split: str,
             out_dir=None) -> EvalReport:
    """Inference over one indexed split; optionally writes report artifacts.

    The report loss is plain (unit-weight) cross-entropy: a standalone
    evaluation has no training class-weight context.
    """
    if split not in ("train", "validation"):
        raise ValueError(f"split must be 'train' or 'validation', got {split!r}")
    model, _ = model_from_checkpoint(checkpoint_path)
    index = read_index(Path(data_dir) / f"{split}.tsv", split)
    space = _space_for_task(model.spec.variant)
    if len(index.label_space) != model.spec.output_classes:
        raise ValueError(
            f"label-space mismatch: checkpoint expects {model.spec.output_classes} "
            f"classes, dataset has {len(index.label_space)}")
    _check_space(index, space, f"{split} split")
    store = _VolumeStore(index, model.spec.input_dims)
    labels = index.label_ints()
    weights = np.ones(model.spec.output_classes, dtype=np.float64)
    loss, cm = _inference_pass(model, store, labels, weights)
    rep = EvalReport(space, cm, loss)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"report_{split}.txt").write_text(rep.to_text(), encoding="utf-8")
        from . import report
        report.save_confusion_matrix(rep, out_dir / f"confusion_{split}.png")
    return rep


def predict(checkpoint_path, input_path) -> Tuple[str, np.ndarray]:
    """Classify one volume (MIAV file or slice directory).

    Returns (label, probabilities); argmax ties resolve to the lower
    class index.
    """
    model, _ = model_from_checkpoint(checkpoint_path)
    vol = load_sample(input_path)
    if vol.dims != tuple(model.spec.input_dims):
        vol = resample_volume(vol, model.spec.input_dims)
    x = vol.normalized().voxels[None, None]
    probs = model.forward(x, training=False)[0]
    space = _space_for_task(model.spec.variant)
    return space[int(probs.argmax())], probs
