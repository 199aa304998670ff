"""Training loop, evaluation and prediction over an on-disk dataset."""

from __future__ import annotations

import contextlib
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import unet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import N_CLASSES, load_split, read_manifest, write_bytes_atomic
from .metrics import ConfusionMatrix, bce_loss, class_assign, one_hot
from .optim import AdamState, adam_step
from .rng import DROPOUT, SHUFFLE, make_rng

log = logging.getLogger(__name__)

EVAL_BATCH = 16
LOG_COLUMNS = ("epoch", "train_loss", "train_accuracy", "val_macro_dice", "val_accuracy")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    dataset_root: str = "data"
    depth: int = 3
    base_filters: int = 16
    in_channels: int = 4
    n_classes: int = N_CLASSES
    dropout_rate: float = 0.07
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 12
    seed: int = 0
    deterministic: bool = True
    use_height: bool = True
    checkpoint_out: str = "runs/default"

    def validate(self) -> None:
        expect = 4 if self.use_height else 3
        if self.in_channels != expect:
            raise ValueError(
                f"in_channels must be {expect} when use_height is {self.use_height}, "
                f"got {self.in_channels}"
            )
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES} for landform masks")
        for name in ("batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not self.learning_rate > 0 or not self.epsilon > 0:
            raise ValueError("learning_rate and epsilon must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        unet.UNetConfig(self.depth, self.base_filters, self.in_channels, self.n_classes,
                        self.dropout_rate, True, 2**self.depth)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw, key)
        return cls(**kwargs)


def _coerce(type_name, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if type_name == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalReport:
    per_class_dice: list[float]
    macro_dice: float
    accuracy: float
    n_tiles: int


def predict(model: unet.UNetModel, inputs: np.ndarray) -> np.ndarray:
    """Eval-mode class-id masks for an N x C x H x W batch, in fixed-size chunks."""
    out = []
    for i in range(0, len(inputs), EVAL_BATCH):
        probs, _ = unet.forward(model, inputs[i : i + EVAL_BATCH], "eval")
        out.append(class_assign(probs))
    return np.concatenate(out)


def evaluate(model: unet.UNetModel, inputs: np.ndarray, masks: np.ndarray) -> EvalReport:
    """Per-class Dice, macro Dice and pixel accuracy pooled over all pixels of the set."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate an empty set")
    cm = ConfusionMatrix(model.config.n_classes)
    cm.update(predict(model, inputs), masks)
    return EvalReport(cm.per_class_dice(), cm.macro_dice(), cm.accuracy(), len(inputs))


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: unet.UNetModel
    adam: AdamState
    history: list[dict]
    best_val_dice: float
    out_dir: Path


def _format_row(row: dict) -> str:
    return ",".join(str(row["epoch"]) if k == "epoch" else repr(float(row[k])) for k in LOG_COLUMNS)


def _write_log(path: Path, history: list[dict]) -> str:
    text = ",".join(LOG_COLUMNS) + "\n" + "".join(_format_row(r) + "\n" for r in history)
    write_bytes_atomic(path, text.encode())
    return text


def read_metrics_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in zip(header, vals)})
    return rows


def train_step(model, state: AdamState, xb: np.ndarray, tb: np.ndarray, seed: int):
    """One forward/backward/Adam update; dropout masks are keyed by the step number."""
    probs, ctx = unet.forward(model, xb, "train", make_rng(seed, DROPOUT, state.t))
    loss, grad = bce_loss(probs, tb)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at step {state.t + 1}")
    grads = unet.backward(model, ctx, grad)
    adam_step(model.params, grads, state)
    return loss, probs


def fit(model, state, x, y, steps: int, batch_size: int, seed: int, epoch_offset: int = 0):
    """Run ``steps`` Adam updates over ``(x, y)`` with per-epoch seeded shuffles.

    A small helper for in-memory training (used for overfit runs); the
    dataset-level loop is :func:`train`.
    """
    targets = one_hot(y, model.config.n_classes, model.dtype)
    done, epoch = 0, epoch_offset
    losses = []
    while done < steps:
        perm = make_rng(seed, SHUFFLE, epoch).permutation(len(x))
        for i in range(0, len(x), batch_size):
            if done == steps:
                break
            idx = np.sort(perm[i : i + batch_size])
            loss, _ = train_step(model, state, x[idx], targets[idx], seed)
            losses.append(loss)
            done += 1
        epoch += 1
    return losses


def train(cfg: TrainConfig, resume: str | Path | None = None) -> TrainResult:
    """Train on ``cfg.dataset_root``; writes ``best.ckpt``, ``final.ckpt`` and ``metrics.csv``.

    Each epoch visits the train ids in a permutation drawn from the
    ``(seed, SHUFFLE, epoch)`` stream, keeping the last partial batch. The
    checkpoint with the best validation macro Dice is kept as ``best.ckpt``.
    """
    cfg.validate()
    root = Path(cfg.dataset_root)
    manifest = read_manifest(root)
    size = manifest["generator"]["size"]
    _, x_tr, y_tr = load_split(root, "train", cfg.use_height)
    _, x_val, y_val = load_split(root, "val", cfg.use_height)
    ucfg = unet.UNetConfig(cfg.depth, cfg.base_filters, cfg.in_channels, cfg.n_classes,
                           cfg.dropout_rate, True, size)
    out_dir = Path(cfg.checkpoint_out)
    out_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best = -1.0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model.config != ucfg:
            raise ValueError("resume checkpoint config does not match the training config")
        if ck.adam is None:
            raise ValueError("resume checkpoint has no optimizer state")
        model, state = ck.model, ck.adam
        start_epoch = int(ck.metadata.get("epoch", 0))
        log_path = out_dir / "metrics.csv"
        if log_path.exists():
            history = [r for r in read_metrics_log(log_path) if r["epoch"] <= start_epoch]
        best = max((r["val_macro_dice"] for r in history), default=-1.0)
    else:
        model = unet.build_unet(ucfg, cfg.seed)
        state = AdamState.for_params(model.params, alpha=cfg.learning_rate, beta1=cfg.beta1,
                                     beta2=cfg.beta2, epsilon=cfg.epsilon)
        start_epoch = 0

    targets = one_hot(y_tr, cfg.n_classes, model.dtype)
    n = len(x_tr)
    # paths are left out so identical runs give identical checkpoint bytes
    run_config = {k: v for k, v in asdict(cfg).items() if k not in ("dataset_root", "checkpoint_out")}
    with deterministic_threads(cfg.deterministic):
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            perm = make_rng(cfg.seed, SHUFFLE, epoch).permutation(n)
            loss_sum, correct = 0.0, 0
            for i in range(0, n, cfg.batch_size):
                idx = np.sort(perm[i : i + cfg.batch_size])
                try:
                    loss, probs = train_step(model, state, x_tr[idx], targets[idx], cfg.seed)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
                loss_sum += loss * len(idx)
                correct += int(np.count_nonzero(class_assign(probs) == y_tr[idx]))
            rep = evaluate(model, x_val, y_val)
            row = dict(epoch=epoch, train_loss=loss_sum / n,
                       train_accuracy=correct / y_tr.size,
                       val_macro_dice=rep.macro_dice, val_accuracy=rep.accuracy)
            history.append(row)
            text = _write_log(out_dir / "metrics.csv", history)
            log.info("epoch %d  loss %.4f  train acc %.4f  val dice %.4f  val acc %.4f",
                     epoch, row["train_loss"], row["train_accuracy"], rep.macro_dice, rep.accuracy)
            meta = dict(epoch=epoch, seed=cfg.seed, train_config=run_config,
                        metrics_digest=hashlib.sha256(text.encode()).hexdigest())
            if rep.macro_dice > best:
                best = rep.macro_dice
                save_checkpoint(out_dir / "best.ckpt", Checkpoint(model, state, meta))
            save_checkpoint(out_dir / "final.ckpt", Checkpoint(model, state, meta))
    return TrainResult(model, state, history, best, out_dir)
