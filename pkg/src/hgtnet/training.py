"""Losses, the Adam optimizer, and the training/evaluation loops.

The trainer is deterministic by construction: every random decision comes
from streams derived as (seed, purpose, epoch, sample-id/step), so a run
can be stopped, checkpointed, and resumed with bitwise-identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import (DatasetStats, ImageSample, apply_policy, normalize,
                   resize_bilinear, rotation_pretext_sample, train_policy)
from .errors import CheckpointError, ConfigError, ContractError, DataError, ShapeError
from .metrics import PredictionRecord
from .model import ModelConfig, init_params, model_forward
from .rng import RngStream
from .tensor import OpRecord, Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 20
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if self.adam_eps <= 0:
            raise ConfigError(f"adam_eps must be > 0, got {self.adam_eps}")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x K logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    lse = m[:, 0] + np.log(ez.sum(axis=1))
    out = Tensor((lse - z[np.arange(b), labels]).mean())
    if logits.requires_grad or logits.op_record is not None:
        probs = ez / ez.sum(axis=1, keepdims=True)

        def backward(g):
            gz = probs.copy()
            gz[np.arange(b), labels] -= 1.0
            return (gz * (g / b),)

        out.requires_grad = True
        out.op_record = OpRecord("cross_entropy", (logits,), backward)
    return out


def combined_loss(class_logits: Tensor, labels, rot_logits: Tensor | None,
                  rot_labels, rotation_weight: float) -> Tensor:
    """Classification CE plus ``rotation_weight`` times the rotation CE.

    A zero weight skips the rotation term entirely, so training degenerates
    to plain classification exactly.
    """
    if rotation_weight < 0:
        raise ConfigError(f"rotation weight must be >= 0, got {rotation_weight}")
    class_term = cross_entropy(class_logits, labels)
    if rotation_weight == 0.0:
        return class_term
    if rot_logits is None:
        raise ContractError("rotation logits required when the rotation weight is positive")
    return class_term + cross_entropy(rot_logits, rot_labels) * rotation_weight


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={n: np.zeros_like(p.data) for n, p in params.items()},
                     v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: dict[str, Tensor], moments: AdamState, t: int,
              cfg: TrainConfig) -> None:
    """Standard bias-corrected update; a missing gradient counts as zero."""
    if t < 1:
        raise ContractError(f"Adam step index must be >= 1, got {t}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter "
                                f"{name} of shape {p.data.shape}")
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# epoch loops
# ---------------------------------------------------------------------------

def prepare_batch(samples: list[ImageSample], policy, stats: DatasetStats,
                  model_cfg: ModelConfig, root_rng: RngStream,
                  epoch: int) -> tuple[Tensor, np.ndarray, np.ndarray | None]:
    """Augment and normalize a batch.  With a positive rotation weight the
    returned tensor stacks the B augmented views followed by B rotated
    copies; labels cover the originals, rotation labels the copies."""
    xs, labels, rot_xs, rot_labels = [], [], [], []
    use_rotation = model_cfg.rotation_loss_weight > 0
    for s in samples:
        aug = apply_policy(s, policy, root_rng.derive("aug", epoch, s.id))
        xs.append(normalize(aug, stats).data)
        labels.append(s.label)
        if use_rotation:
            rot, rlab = rotation_pretext_sample(aug, root_rng.derive("rot", epoch, s.id))
            rot_xs.append(normalize(rot, stats).data)
            rot_labels.append(rlab)
    x = Tensor(np.stack(xs + rot_xs))
    return (x, np.asarray(labels, dtype=np.int64),
            np.asarray(rot_labels, dtype=np.int64) if use_rotation else None)


def train_epoch(params: dict[str, Tensor], model_cfg: ModelConfig,
                train_cfg: TrainConfig, samples: list[ImageSample],
                stats: DatasetStats, policy, adam: AdamState,
                epoch: int) -> tuple[float, float]:
    """One pass over a seeded shuffle of the data; returns the per-sample
    mean combined loss and the classification accuracy."""
    if not samples:
        raise DataError("cannot train on an empty dataset")
    root = RngStream(seed=train_cfg.seed)
    order = root.derive("shuffle", epoch).shuffle(list(range(len(samples))))
    lam = model_cfg.rotation_loss_weight
    total_loss = 0.0
    correct = 0
    for step, start in enumerate(range(0, len(order), train_cfg.batch_size)):
        batch = [samples[i] for i in order[start:start + train_cfg.batch_size]]
        x, labels, rot_labels = prepare_batch(batch, policy, stats, model_cfg, root, epoch)
        b = len(batch)
        drop_rng = root.derive("drop", epoch, step)
        cls_all, rot_all = model_forward(x, model_cfg, params, training=True, rng=drop_rng)
        if rot_labels is None:
            cls = cls_all
            loss = combined_loss(cls, labels, None, None, 0.0)
        else:
            cls = T.take_rows(cls_all, 0, b)
            rot = T.take_rows(rot_all, b, 2 * b)
            loss = combined_loss(cls, labels, rot, rot_labels, lam)
        for p in params.values():
            p.zero_grad()
        T.backward(loss)
        adam.t += 1
        adam_step(params, adam, adam.t, train_cfg)
        total_loss += loss.item() * b
        correct += int((np.argmax(cls.data, axis=1) == labels).sum())
    return total_loss / len(samples), correct / len(samples)


def _eval_one_batch(params, model_cfg, stats, batch):
    size = model_cfg.image_size
    x = Tensor(np.stack([
        normalize(resize_bilinear(s, size, size), stats).data for s in batch]))
    cls, _ = model_forward(x, model_cfg, params, training=False)
    z = cls.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    probs = ez / ez.sum(axis=1, keepdims=True)
    labels = np.array([s.label for s in batch])
    lse = m[:, 0] + np.log(ez.sum(axis=1))
    losses = lse - z[np.arange(len(batch)), labels]
    records = [PredictionRecord(sample_id=s.id, true_label=s.label,
                                scores=tuple(float(v) for v in probs[i]))
               for i, s in enumerate(batch)]
    hits = int((np.argmax(probs, axis=1) == labels).sum())
    return float(losses.sum()), hits, records


def evaluate(params: dict[str, Tensor], model_cfg: ModelConfig,
             samples: list[ImageSample], stats: DatasetStats,
             batch_size: int = 16,
             num_threads: int = 1) -> tuple[float, float, list[PredictionRecord]]:
    """Deterministic pass with resize + normalize only (no augmentation, no
    dropout); emits softmax scores per sample.  Batches may be evaluated on
    worker threads since parameters are read-only here."""
    if not samples:
        raise DataError("cannot evaluate an empty dataset")
    batches = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]
    run = lambda b: _eval_one_batch(params, model_cfg, stats, b)
    if num_threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]
    total_loss = sum(r[0] for r in results)
    hits = sum(r[1] for r in results)
    records = [rec for r in results for rec in r[2]]
    return total_loss / len(samples), hits / len(samples), records


def early_stopping_check(test_losses: list[float], patience: int) -> bool:
    """True ("stop") once the running minimum has gone ``patience``
    consecutive epochs without a strict improvement."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    best = math.inf
    bad = 0
    for loss in test_losses:
        if loss < best:
            best = loss
            bad = 0
        else:
            bad += 1
    return bad >= patience


# ---------------------------------------------------------------------------
# trainer state and persistence
# ---------------------------------------------------------------------------

@dataclass
class TrainerState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict[str, Tensor]
    adam: AdamState
    stats: DatasetStats
    class_names: list[str]
    epoch: int = 0                      # completed epochs
    best_test_loss: float = math.inf
    best_epoch: int = 0                 # 1-based; 0 = none yet
    bad_epochs: int = 0


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig, stats: DatasetStats,
               class_names: list[str]) -> TrainerState:
    params = init_params(model_cfg, RngStream(seed=train_cfg.seed))
    return TrainerState(model_cfg=model_cfg, train_cfg=train_cfg, params=params,
                        adam=init_adam(params), stats=stats,
                        class_names=list(class_names))


def model_config_to_kv(cfg: ModelConfig) -> dict[str, str]:
    return {
        "model.image_size": str(cfg.image_size),
        "model.patch_size": str(cfg.patch_size),
        "model.embed_dim": str(cfg.embed_dim),
        "model.num_heads": str(cfg.num_heads),
        "model.num_encoder_layers": str(cfg.num_encoder_layers),
        "model.mlp_ratio": repr(cfg.mlp_ratio),
        "model.cnn_channels": ",".join(str(c) for c in cfg.cnn_channels),
        "model.dropout_p": repr(cfg.dropout_p),
        "model.graph_connectivity": cfg.graph_connectivity,
        "model.gat_leaky_slope": repr(cfg.gat_leaky_slope),
        "model.num_classes": str(cfg.num_classes),
        "model.num_rotations": str(cfg.num_rotations),
        "model.rotation_loss_weight": repr(cfg.rotation_loss_weight),
    }


def model_config_from_kv(kv: dict[str, str]) -> ModelConfig:
    from .kvtext import get_float, get_int, get_ints
    base = ModelConfig()
    def pick(key, getter, fallback):
        return getter(kv, key) if key in kv else fallback
    return ModelConfig(
        image_size=pick("model.image_size", get_int, base.image_size),
        patch_size=pick("model.patch_size", get_int, base.patch_size),
        embed_dim=pick("model.embed_dim", get_int, base.embed_dim),
        num_heads=pick("model.num_heads", get_int, base.num_heads),
        num_encoder_layers=pick("model.num_encoder_layers", get_int, base.num_encoder_layers),
        mlp_ratio=pick("model.mlp_ratio", get_float, base.mlp_ratio),
        cnn_channels=pick("model.cnn_channels", get_ints, base.cnn_channels),
        dropout_p=pick("model.dropout_p", get_float, base.dropout_p),
        graph_connectivity=kv.get("model.graph_connectivity", base.graph_connectivity),
        gat_leaky_slope=pick("model.gat_leaky_slope", get_float, base.gat_leaky_slope),
        num_classes=pick("model.num_classes", get_int, base.num_classes),
        num_rotations=pick("model.num_rotations", get_int, base.num_rotations),
        rotation_loss_weight=pick("model.rotation_loss_weight", get_float,
                                  base.rotation_loss_weight),
    )


def train_config_to_kv(cfg: TrainConfig) -> dict[str, str]:
    return {
        "train.learning_rate": repr(cfg.learning_rate),
        "train.batch_size": str(cfg.batch_size),
        "train.max_epochs": str(cfg.max_epochs),
        "train.patience": str(cfg.patience),
        "train.adam_beta1": repr(cfg.adam_beta1),
        "train.adam_beta2": repr(cfg.adam_beta2),
        "train.adam_eps": repr(cfg.adam_eps),
        "train.seed": str(cfg.seed),
    }


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    from .kvtext import get_float, get_int
    base = TrainConfig()
    def pick(key, getter, fallback):
        return getter(kv, key) if key in kv else fallback
    return TrainConfig(
        learning_rate=pick("train.learning_rate", get_float, base.learning_rate),
        batch_size=pick("train.batch_size", get_int, base.batch_size),
        max_epochs=pick("train.max_epochs", get_int, base.max_epochs),
        patience=pick("train.patience", get_int, base.patience),
        adam_beta1=pick("train.adam_beta1", get_float, base.adam_beta1),
        adam_beta2=pick("train.adam_beta2", get_float, base.adam_beta2),
        adam_eps=pick("train.adam_eps", get_float, base.adam_eps),
        seed=pick("train.seed", get_int, base.seed),
    )


def save_state(state: TrainerState, path) -> None:
    metadata = {}
    metadata.update(model_config_to_kv(state.model_cfg))
    metadata.update(train_config_to_kv(state.train_cfg))
    metadata["trainer.epoch"] = str(state.epoch)
    metadata["trainer.adam_t"] = str(state.adam.t)
    metadata["trainer.best_test_loss"] = repr(state.best_test_loss)
    metadata["trainer.best_epoch"] = str(state.best_epoch)
    metadata["trainer.bad_epochs"] = str(state.bad_epochs)
    metadata["stats.mean"] = ",".join(repr(float(v)) for v in state.stats.mean)
    metadata["stats.std"] = ",".join(repr(float(v)) for v in state.stats.std)
    metadata["data.class_names"] = ",".join(state.class_names)
    params = {n: p.data for n, p in state.params.items()}
    moments = {f"m.{n}": state.adam.m[n] for n in state.params}
    moments.update({f"v.{n}": state.adam.v[n] for n in state.params})
    ckpt.save_checkpoint(path, metadata, params, moments)


def load_state(path) -> TrainerState:
    snap = ckpt.load_checkpoint(path)
    kv = snap.metadata
    from .kvtext import get_float, get_floats, get_int
    model_cfg = model_config_from_kv(kv)
    train_cfg = train_config_from_kv(kv)
    params = {n: Tensor(arr, requires_grad=True) for n, arr in snap.params.items()}
    m, v = {}, {}
    for name in params:
        if f"m.{name}" not in snap.moments or f"v.{name}" not in snap.moments:
            raise CheckpointError(f"{path}: missing optimizer moments for {name!r}")
        m[name] = snap.moments[f"m.{name}"].copy()
        v[name] = snap.moments[f"v.{name}"].copy()
    adam = AdamState(m=m, v=v, t=get_int(kv, "trainer.adam_t"))
    stats = DatasetStats(mean=np.array(get_floats(kv, "stats.mean")),
                         std=np.array(get_floats(kv, "stats.std")))
    return TrainerState(
        model_cfg=model_cfg, train_cfg=train_cfg, params=params, adam=adam,
        stats=stats, class_names=kv.get("data.class_names", "").split(","),
        epoch=get_int(kv, "trainer.epoch"),
        best_test_loss=get_float(kv, "trainer.best_test_loss"),
        best_epoch=get_int(kv, "trainer.best_epoch"),
        bad_epochs=get_int(kv, "trainer.bad_epochs"))


# ---------------------------------------------------------------------------
# the fit loop
# ---------------------------------------------------------------------------

def fit(state: TrainerState, train_samples: list[ImageSample],
        test_samples: list[ImageSample], policy=None, out_dir=None,
        max_epochs: int | None = None, eval_threads: int = 1,
        log=None) -> list[EpochRecord]:
    """Run epochs until the budget or the patience counter is exhausted.

    Saves ``best.ckpt`` on every strict test-loss improvement and
    ``last.ckpt`` after every epoch when ``out_dir`` is given.  Returns the
    records for the epochs executed by this call (resume runs return only
    their continuation).
    """
    import os

    if policy is None:
        policy = train_policy(state.model_cfg.image_size)
    target = state.train_cfg.max_epochs if max_epochs is None else max_epochs
    history: list[EpochRecord] = []
    while state.epoch < target:
        epoch = state.epoch
        train_loss, train_acc = train_epoch(
            state.params, state.model_cfg, state.train_cfg, train_samples,
            state.stats, policy, state.adam, epoch)
        test_loss, test_acc, _ = evaluate(
            state.params, state.model_cfg, test_samples, state.stats,
            batch_size=state.train_cfg.batch_size, num_threads=eval_threads)
        state.epoch += 1
        record = EpochRecord(epoch=state.epoch, train_loss=train_loss,
                             train_acc=train_acc, test_loss=test_loss,
                             test_acc=test_acc)
        history.append(record)
        if test_loss < state.best_test_loss:
            state.best_test_loss = test_loss
            state.best_epoch = state.epoch
            state.bad_epochs = 0
            if out_dir is not None:
                save_state(state, os.path.join(out_dir, "best.ckpt"))
        else:
            state.bad_epochs += 1
        if out_dir is not None:
            save_state(state, os.path.join(out_dir, "last.ckpt"))
        if log is not None:
            log(f"epoch {record.epoch}: train loss {record.train_loss:.4f} "
                f"acc {record.train_acc:.3f} | test loss {record.test_loss:.4f} "
                f"acc {record.test_acc:.3f}")
        if state.bad_epochs >= state.train_cfg.patience:
            if log is not None:
                log(f"early stop: no improvement for {state.bad_epochs} epochs "
                    f"(best epoch {state.best_epoch})")
            break
    return history


# ---------------------------------------------------------------------------
# history CSV
# ---------------------------------------------------------------------------

HISTORY_HEADER = "epoch,train_loss,train_acc,test_loss,test_acc"


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},"
                     f"{r.test_loss!r},{r.test_acc!r}\n")


def read_history(path) -> list[EpochRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != HISTORY_HEADER:
        raise DataError(f"{path}: not a history file")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}: line {lineno}: expected 5 fields")
        out.append(EpochRecord(epoch=int(parts[0]), train_loss=float(parts[1]),
                               train_acc=float(parts[2]), test_loss=float(parts[3]),
                               test_acc=float(parts[4])))
    return out
