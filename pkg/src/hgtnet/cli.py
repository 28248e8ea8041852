"""Command-line entry point.

Commands: train, eval, metrics, gradcheck, synth, augment.  Every command
is deterministic given (flags, config file, seed), artifacts are written
atomically (temp file + rename), and failures exit with a one-line
diagnostic and a code identifying the failure class:

    0  success
    1  gradient check failed
    2  configuration error
    3  data error (malformed dataset tree or CSV contents)
    4  I/O error (unreadable/unwritable paths)
    5  checkpoint missing or malformed
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time

import numpy as np

from . import data
from . import tensor as T
from . import training as tr
from .config import RunConfig, default_run_config, load_run_config, render_run_config
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     HgtnetError, ShapeError)
from .gradcheck import check_gradients
from .metrics import (build_report, read_predictions, render_report,
                      write_predictions, write_roc)
from .model import init_params, model_forward, tiny_config
from .ppm import from_unit, read_ppm, to_unit, write_ppm
from .rng import RngStream
from .tensor import OpRecord, Tensor

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_CHECKPOINT = 5


def _atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_via(path, write_fn) -> None:
    """Run ``write_fn(tmp_path)`` then rename tmp over ``path``."""
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_confusion(path, confusion, class_names) -> None:
    lines = ["actual\\predicted," + ",".join(class_names)]
    for name, row in zip(class_names, confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    _atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# config assembly from flags
# ---------------------------------------------------------------------------

_TINY_PRESET = {
    "model.patch_size": "16",
    "model.embed_dim": "8",
    "model.num_heads": "2",
    "model.num_encoder_layers": "1",
    "model.mlp_ratio": "2.0",
    "model.cnn_channels": "4",
    "model.dropout_p": "0.0",
}


def _overrides_from_args(args) -> dict[str, str]:
    out: dict[str, str] = {}
    if getattr(args, "tiny", False):
        out.update(_TINY_PRESET)
    mapping = [
        ("seed", "train.seed"),
        ("data", "run.data_root"),
        ("out", "run.out_dir"),
        ("checkpoint", "run.checkpoint"),
        ("image_size", "model.image_size"),
        ("encoder_layers", "model.num_encoder_layers"),
        ("epochs", "train.max_epochs"),
        ("batch_size", "train.batch_size"),
        ("lr", "train.learning_rate"),
        ("patience", "train.patience"),
    ]
    for attr, key in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args) -> RunConfig:
    return load_run_config(getattr(args, "config", None), _overrides_from_args(args))


def _maybe_print_config(args, cfg: RunConfig) -> bool:
    if getattr(args, "print_config", False):
        sys.stdout.write(render_run_config(cfg))
        return True
    return False


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _load_training_data(cfg: RunConfig, args):
    if getattr(args, "synth", False):
        per_class = args.per_class or 40
        samples = data.synth_dataset(num_per_class=per_class,
                                     size=cfg.model.image_size,
                                     rng=RngStream(seed=cfg.seed))
        names = sorted({s.id.split("_")[0] for s in samples})
    else:
        if cfg.data_root is None:
            raise ConfigError("no dataset: pass --data DIR or --synth")
        samples = data.load_dataset(cfg.data_root)
        names = data.class_names(cfg.data_root)
    if len(names) != cfg.model.num_classes:
        raise ConfigError(f"model expects {cfg.model.num_classes} classes but the "
                          f"dataset has {len(names)}")
    split_rng = RngStream(seed=cfg.seed).derive("split")
    train_samples, test_samples = data.stratified_split(samples, 0.1, split_rng)
    return train_samples, test_samples, names


def _emit_eval_artifacts(out_dir, records, class_names) -> None:
    report = build_report(records, len(class_names), class_names=class_names)
    _atomic_write_via(os.path.join(out_dir, "predictions.csv"),
                      lambda p: write_predictions(p, records))
    _atomic_write_text(os.path.join(out_dir, "report.txt"), render_report(report))
    _write_confusion(os.path.join(out_dir, "confusion.csv"), report.confusion,
                     class_names)
    for k, curve in enumerate(report.roc):
        if curve is not None:
            _atomic_write_via(os.path.join(out_dir, f"roc_class{k}.csv"),
                              lambda p, c=curve: write_roc(p, c))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_samples, test_samples, names = _load_training_data(cfg, args)
    stats = data.compute_stats(train_samples)
    state = tr.init_state(cfg.model, cfg.train, stats, names)
    history = tr.fit(state, train_samples, test_samples, policy=cfg.train_aug,
                     out_dir=cfg.out_dir, eval_threads=args.eval_threads,
                     log=lambda msg: print(msg))
    _atomic_write_via(os.path.join(cfg.out_dir, "history.csv"),
                      lambda p: tr.write_history(p, history))
    # final artifacts come from the best checkpoint so that a later
    # `eval --checkpoint best.ckpt` reproduces them bitwise
    best = tr.load_state(os.path.join(cfg.out_dir, "best.ckpt"))
    _, _, records = tr.evaluate(best.params, best.model_cfg, test_samples,
                                best.stats, batch_size=cfg.train.batch_size,
                                num_threads=args.eval_threads)
    _emit_eval_artifacts(cfg.out_dir, records, names)
    print(f"done: best epoch {best.best_epoch} "
          f"(test loss {best.best_test_loss:.6f}); artifacts in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    if cfg.checkpoint is None:
        raise ConfigError("eval needs --checkpoint PATH")
    if not os.path.exists(cfg.checkpoint):
        raise CheckpointError(f"{cfg.checkpoint}: checkpoint not found")
    state = tr.load_state(cfg.checkpoint)
    if getattr(args, "synth", False):
        per_class = args.per_class or 40
        samples = data.synth_dataset(num_per_class=per_class,
                                     size=state.model_cfg.image_size,
                                     rng=RngStream(seed=state.train_cfg.seed))
        split_rng = RngStream(seed=state.train_cfg.seed).derive("split")
        _, samples = data.stratified_split(samples, 0.1, split_rng)
    else:
        if cfg.data_root is None:
            raise ConfigError("no dataset: pass --data DIR or --synth")
        samples = data.load_dataset(cfg.data_root)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _, accuracy, records = tr.evaluate(state.params, state.model_cfg, samples,
                                       state.stats, num_threads=args.eval_threads)
    _emit_eval_artifacts(cfg.out_dir, records, state.class_names)
    print(f"evaluated {len(records)} samples, accuracy {accuracy:.4f}; "
          f"artifacts in {cfg.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def cmd_metrics(args) -> int:
    records = read_predictions(args.predictions)
    k = len(records[0].scores)
    names = args.names.split(",") if args.names else None
    if names is not None and len(names) != k:
        raise ConfigError(f"--names lists {len(names)} classes, records have {k}")
    report = build_report(records, k, class_names=names)
    sys.stdout.write(render_report(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_confusion(os.path.join(args.out, "confusion.csv"),
                         report.confusion, report.class_names)
        for idx, curve in enumerate(report.roc):
            if curve is not None:
                _atomic_write_via(os.path.join(args.out, f"roc_class{idx}.csv"),
                                  lambda p, c=curve: write_roc(p, c))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_battery(seed: int):
    """(name, build, params, tolerance) for each op plus the tiny model."""
    rng = RngStream(seed=seed)

    def randn(*shape, stream):
        import numpy as _np
        n = int(_np.prod(shape))
        return Tensor(stream.normal(n).reshape(shape), requires_grad=True)

    checks = []

    a = randn(3, 4, stream=rng.derive("matmul", 0))
    b = randn(4, 2, stream=rng.derive("matmul", 1))
    checks.append(("matmul", lambda ps: T.tsum(T.matmul(a, b) * T.matmul(a, b)),
                   [a, b], 1e-4))

    x = randn(2, 5, stream=rng.derive("softmax"))
    w = Tensor(rng.derive("softmax-w").normal(10).reshape(2, 5))
    checks.append(("softmax", lambda ps: T.tsum(T.softmax(x) * w), [x], 1e-4))

    ln_x = randn(3, 6, stream=rng.derive("ln"))
    gamma = randn(6, stream=rng.derive("ln-g"))
    beta = randn(6, stream=rng.derive("ln-b"))
    ln_w = Tensor(rng.derive("ln-w").normal(18).reshape(3, 6))
    checks.append(("layer_norm",
                   lambda ps: T.tsum(T.layer_norm(ln_x, gamma, beta) * ln_w),
                   [ln_x, gamma, beta], 1e-4))

    g_x = randn(4, 7, stream=rng.derive("gelu"))
    g_w = Tensor(rng.derive("gelu-w").normal(28).reshape(4, 7))
    checks.append(("gelu", lambda ps: T.tsum(T.gelu(g_x) * g_w), [g_x], 1e-4))

    c_x = randn(1, 2, 6, 6, stream=rng.derive("conv-x"))
    c_w = randn(3, 2, 3, 3, stream=rng.derive("conv-w"))
    c_b = randn(3, stream=rng.derive("conv-b"))
    checks.append(("conv2d",
                   lambda ps: T.tsum(T.conv2d(c_x, c_w, c_b, stride=1, padding=1)
                                     * Tensor(np.ones((1, 3, 6, 6)))),
                   [c_x, c_w, c_b], 1e-4))

    p_x = Tensor(rng.derive("pool").normal(32).reshape(1, 2, 4, 4) * 3, requires_grad=True)
    p_w = Tensor(rng.derive("pool-w").normal(8).reshape(1, 2, 2, 2))
    checks.append(("max_pool2d",
                   lambda ps: T.tsum(T.max_pool2d(p_x, 2, 2) * p_w),
                   [p_x], 1e-4))

    model_cfg = tiny_config(32)
    params = init_params(model_cfg, rng.derive("model"))
    batch = Tensor(rng.derive("model-x").normal(2 * 3 * 32 * 32).reshape(2, 3, 32, 32) * 0.3)
    labels = np.array([1, 3])
    rot_labels = np.array([0, 2])

    def model_loss(ps):
        cls, rot = model_forward(batch, model_cfg, params, training=False)
        return tr.combined_loss(cls, labels, rot, rot_labels,
                                model_cfg.rotation_loss_weight)

    checks.append(("model", model_loss, list(params.values()), 1e-3))
    return checks


def _corrupt_op(name: str) -> None:
    """Test hook: scale one op's backward by 1.01 so gradcheck must fail."""
    if name == "gelu":
        original = T.activation

        def tampered(x, kind, **kw):
            out = original(x, kind, **kw)
            if kind == "gelu" and out.op_record is not None:
                rec = out.op_record
                out.op_record = OpRecord(rec.name, rec.parents,
                                         lambda g, _b=rec.backward:
                                         tuple(1.01 * gi for gi in _b(g)))
            return out

        T.activation = tampered
        T.gelu = lambda t: T.activation(t, "gelu")
    elif name == "matmul":
        original_mm = T.matmul

        def tampered_mm(a, b):
            out = original_mm(a, b)
            if out.op_record is not None:
                rec = out.op_record
                out.op_record = OpRecord(rec.name, rec.parents,
                                         lambda g, _b=rec.backward:
                                         tuple(1.01 * gi for gi in _b(g)))
            return out

        T.matmul = tampered_mm
    else:
        raise ConfigError(f"unknown corruption target {name!r}")


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.corrupt:
        _corrupt_op(args.corrupt)
    start = time.time()
    failures = []
    for name, build, params, tol in _gradcheck_battery(seed):
        sample = 3 if name == "model" else None
        err = check_gradients(build, params, sample_per_param=sample,
                              rng=RngStream(seed=seed).derive("probe", name))
        status = "pass" if err < tol else "FAIL"
        print(f"{name}: worst relative error {err:.3e} (tolerance {tol:.0e}) {status}")
        if err >= tol:
            failures.append(name)
    print(f"gradcheck finished in {time.time() - start:.1f}s")
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / augment
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = args.out or "synth_data"
    per_class = args.per_class or 10
    size = args.image_size or 64
    seed = args.seed if args.seed is not None else 0
    samples = data.synth_dataset(num_per_class=per_class, size=size,
                                 rng=RngStream(seed=seed))
    for s in samples:
        class_dir, _, stem = s.id.partition("_")
        directory = os.path.join(out, class_dir)
        os.makedirs(directory, exist_ok=True)
        _atomic_write_via(os.path.join(directory, f"{stem}.ppm"),
                          lambda p, px=s.pixels: write_ppm(p, from_unit(px)))
    print(f"wrote {len(samples)} images under {out}")
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    if _maybe_print_config(args, cfg):
        return EXIT_OK
    size = cfg.model.image_size
    pixels = to_unit(read_ppm(args.input))
    sample = data.ImageSample(id=os.path.basename(args.input), pixels=pixels, label=0)
    resized = data.apply_policy(sample, cfg.train_aug, rng=None)
    if args.no_random:
        augmented = resized
    else:
        rng = RngStream(seed=cfg.seed).derive("aug", 0, sample.id)
        augmented = data.apply_policy(sample, cfg.train_aug, rng=rng)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    _atomic_write_via(os.path.join(out, "before.ppm"),
                      lambda p: write_ppm(p, from_unit(resized.pixels)))
    _atomic_write_via(os.path.join(out, "after.ppm"),
                      lambda p: write_ppm(p, from_unit(augmented.pixels)))
    print(f"wrote before.ppm and after.ppm ({size}x{size}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--data", default=None, help="dataset root (class dirs of .ppm)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key directly")
    p.add_argument("--print-config", action="store_true",
                   help="print the merged config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgtnet",
        description="hybrid CNN/transformer/graph-attention image classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write run artifacts")
    _add_shared(p)
    p.add_argument("--synth", action="store_true",
                   help="train on the built-in synthetic texture dataset")
    p.add_argument("--per-class", type=int, default=None,
                   help="synthetic samples per class (with --synth)")
    p.add_argument("--tiny", action="store_true",
                   help="desk-scale preset: 1 encoder layer, 8-dim embeddings")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--encoder-layers", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--eval-threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write reports")
    _add_shared(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--synth", action="store_true",
                   help="evaluate on the synthetic test split")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--eval-threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="render a report from a prediction CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--names", default=None, help="comma-separated class names")
    p.add_argument("--out", default=None, help="also dump confusion/ROC CSVs here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt", choices=["gelu", "matmul"], default=None,
                   help="deliberately break one backward (self-test hook)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic dataset as PPM files")
    p.add_argument("--out", default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("augment", help="apply the train-time policy to one image")
    _add_shared(p)
    p.add_argument("--input", required=True, help="input PPM image")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--no-random", action="store_true",
                   help="zero all randomness: output equals the resized input")
    p.set_defaults(func=cmd_augment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeError, ContractError, HgtnetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
