"""Training loop, cross-validation and the positional-encoding ablation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .datapipe import EncodedInstance, Fold, kfold_split, restrict_to_vocab, train_token_ids
from .model import (
    BernoulliNB,
    DegenerateFoldError,
    LogisticRegression,
    ModelConfig,
    ParameterStore,
    init_params,
    make_batch,
    model_logits,
    one_hot,
    predict_instances,
    save_checkpoint,
)

log = logging.getLogger(__name__)

NEURAL_MODES = ("both", "rope_only", "spe_only", "none", "bigru")
BAG_MODES = ("logreg", "bnb")
ALL_MODES = NEURAL_MODES + BAG_MODES
ABLATION_MODES = ("both", "rope_only", "spe_only", "bigru", "logreg", "bnb")


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


class FoldFailed(RuntimeError):
    def __init__(self, fold: int, cause: BaseException):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.cause = cause


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent RNG stream for a named purpose ('init', 'shuffle', 'dropout', ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, keys)])


@dataclass
class TrainConfig:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    clip_norm: float = 1.0
    seed: int = 0
    precision: str = "f32"
    stopping: str = "per_fold"  # or "cv_mean": shared epoch count from fold-averaged val loss

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.stopping not in ("per_fold", "cv_mean"):
            raise ValueError(f"unknown stopping mode {self.stopping!r}")
        self.betas = tuple(self.betas)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    train_auroc: float | None
    val_loss: float
    val_acc: float
    val_auroc: float | None


@dataclass
class RunLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_epoch: int = 0
    wall_time: float = 0.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "train_auroc", "val_loss", "val_acc", "val_auroc"])
            for e in self.epochs:
                w.writerow([e.epoch] + [_fmt(getattr(e, k)) for k in
                                        ("train_loss", "train_acc", "train_auroc", "val_loss", "val_acc", "val_auroc")])

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.epochs]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# loss and optimizer


def bce_loss(logits, labels) -> nx.Tensor:
    """Mean binary cross-entropy from logits: mean(softplus(z) - y z)."""
    z = nx.as_tensor(logits)
    y = nx.Tensor(np.asarray(labels), dtype=z.dtype)
    return nx.mean(nx.sub(nx.softplus(z), nx.mul(z, y)))


def bce_from_proba(p, y, eps: float = 1e-12) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


class Adam:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: ParameterStore, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, t in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and t.data.ndim >= 2:
                upd = upd + self.wd * t.data
            t.data -= (self.lr * upd).astype(t.data.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# --------------------------------------------------------------------------
# one fold


def _snapshot(params: ParameterStore) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: ParameterStore, snap: dict[str, np.ndarray]) -> None:
    for k, t in params.items():
        t.data = snap[k].copy()


def _safe_auroc(scores, labels):
    try:
        return metrics.auroc(scores, labels)
    except metrics.UndefinedMetricError:
        return None


def epoch_batches(lengths, batch_size: int, rng: np.random.Generator, pool: int = 16) -> list[np.ndarray]:
    """Shuffled batches with similar lengths grouped to cut padding.

    A random permutation is cut into pools of ``pool`` batches, each pool is
    sorted by length and sliced into batches, and the batch order is shuffled.
    """
    lengths = np.asarray(lengths)
    order = rng.permutation(len(lengths))
    batches = []
    step = batch_size * pool
    for s in range(0, len(order), step):
        chunk = order[s:s + step]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train_step(batch, params: ParameterStore, cfg: ModelConfig, opt: Adam | None, rng, clip_norm: float):
    """Forward + backward + update on one batch. Returns (loss, logits)."""
    names = {id(t): k for k, t in params.items()}
    # overflow surfaces as NumericError from the op checks, so numpy's warnings are redundant
    with np.errstate(over="ignore", invalid="ignore"), nx.Graph() as g:
        z = model_logits(batch, params, cfg, train=True, rng=rng)
        loss = bce_loss(z, batch.labels)
    raw = g.backward(loss)
    grads = {names[id(t)]: v for t, v in raw.items() if id(t) in names}
    clip_by_global_norm(grads, clip_norm)
    if opt is not None:
        opt.step(grads)
    return loss.item(), z.data.astype(np.float64)


def train_fold(
    train: Sequence[EncodedInstance],
    val: Sequence[EncodedInstance],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    arch: str = "bipete",
    fold: int = 0,
    fixed_epochs: int | None = None,
) -> tuple[ParameterStore, RunLog]:
    """Train one model; returns the parameters of the best-validation-loss epoch.

    With ``fixed_epochs`` early stopping is off and the final parameters
    after exactly that many epochs are returned.
    """
    t0 = time.perf_counter()
    with nx.precision(train_cfg.precision):
        params = init_params(model_cfg, seed=int(substream(train_cfg.seed, "init", fold).integers(2**31)), arch=arch)
        opt = Adam(params, train_cfg.lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
        runlog = RunLog()
        best_loss, best_snap, since_best = math.inf, _snapshot(params), 0
        val_y = np.array([x.label for x in val])
        lengths = np.array([len(x.token_ids) for x in train])
        n_epochs = fixed_epochs or train_cfg.max_epochs
        for epoch in range(1, n_epochs + 1):
            batches = epoch_batches(lengths, train_cfg.batch_size, substream(train_cfg.seed, "shuffle", fold, epoch))
            drop_rng = substream(train_cfg.seed, "dropout", fold, epoch)
            losses, scores, ys = [], [], []
            for b, idx in enumerate(batches):
                items = [train[i] for i in idx]
                batch = make_batch(items)
                try:
                    loss, z = train_step(batch, params, model_cfg, opt, drop_rng, train_cfg.clip_norm)
                except nx.NumericError as err:
                    raise TrainingDiverged(epoch, b, str(err)) from err
                if not math.isfinite(loss):
                    raise TrainingDiverged(epoch, b)
                losses.append(loss * len(items))
                scores.append(z)
                ys.append(batch.labels)
            z_all = np.concatenate(scores)
            y_all = np.concatenate(ys)
            val_p = predict_instances(val, params, model_cfg)
            rec = EpochRecord(
                epoch=epoch,
                train_loss=float(np.sum(losses) / len(train)),
                train_acc=float(np.mean((z_all >= 0) == (y_all == 1))),
                train_auroc=_safe_auroc(z_all, y_all),
                val_loss=bce_from_proba(val_p, val_y),
                val_acc=float(np.mean((val_p >= 0.5) == (val_y == 1))),
                val_auroc=_safe_auroc(val_p, val_y),
            )
            runlog.epochs.append(rec)
            log.info("fold %d epoch %d train_loss %.4f val_loss %.4f val_auroc %s",
                     fold, epoch, rec.train_loss, rec.val_loss, rec.val_auroc)
            if fixed_epochs is None:
                if rec.val_loss < best_loss:
                    best_loss, best_snap, since_best = rec.val_loss, _snapshot(params), 0
                    runlog.best_epoch = epoch
                else:
                    since_best += 1
                    if since_best >= train_cfg.patience:
                        break
        runlog.stop_epoch = len(runlog.epochs)
        if fixed_epochs is None:
            _restore(params, best_snap)
        else:
            runlog.best_epoch = runlog.stop_epoch
    runlog.wall_time = time.perf_counter() - t0
    return params, runlog


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    mode: str
    metrics: dict
    test_ids: list[str]
    test_labels: np.ndarray
    test_scores: np.ndarray
    runlog: RunLog | None = None
    params: ParameterStore | None = None


@dataclass
class CVResult:
    mode: str
    folds: list[FoldResult]

    def summary(self) -> dict:
        return aggregate([f.metrics for f in self.folds])


def aggregate(per_fold: Sequence[dict]) -> dict:
    """Mean and sample std of every metric over folds (undefined values skipped)."""
    out = {}
    for key in per_fold[0]:
        vals = [m[key] for m in per_fold if m.get(key) is not None]
        if not vals:
            out[key] = {"mean": None, "std": None, "n": 0}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0, "n": len(arr)}
    return out


def fold_data(instances: Sequence[EncodedInstance], fold: Fold):
    """Materialize a fold; tokens unseen in its training split become UNK."""
    train = [instances[i] for i in fold.train]
    known = train_token_ids(train)
    val = restrict_to_vocab([instances[i] for i in fold.val], known)
    test = restrict_to_vocab([instances[i] for i in fold.test], known)
    return train, val, test


def _mode_setup(mode: str, model_cfg: ModelConfig) -> tuple[str, ModelConfig]:
    if mode == "bigru":
        return "bigru", model_cfg
    return "bipete", replace(model_cfg, positional_mode=mode)


def _neural_fold(args):
    instances, fold, mode, model_cfg, train_cfg, fixed_epochs, keep_params = args
    try:
        train, val, test = fold_data(instances, fold)
        arch, cfg = _mode_setup(mode, model_cfg)
        params, runlog = train_fold(train, val, cfg, train_cfg, arch=arch, fold=fold.index, fixed_epochs=fixed_epochs)
        with nx.precision(train_cfg.precision):
            scores = predict_instances(test, params, cfg)
    except Exception as err:  # noqa: BLE001 - re-raised with fold id
        raise FoldFailed(fold.index, err) from err
    labels = np.array([x.label for x in test])
    return FoldResult(fold.index, mode, metrics.summarize(scores, labels), [x.patient_id for x in test],
                      labels, scores, runlog, params if keep_params else None)


def _bag_fold(instances, fold: Fold, mode: str, vocab_size: int) -> FoldResult:
    train, _, test = fold_data(instances, fold)
    Xtr, Xte = one_hot(train, vocab_size), one_hot(test, vocab_size)
    ytr = np.array([x.label for x in train])
    clf = LogisticRegression() if mode == "logreg" else BernoulliNB()
    try:
        clf.fit(Xtr, ytr, fold=fold.index)
    except DegenerateFoldError as err:
        raise FoldFailed(fold.index, err) from err
    scores = clf.predict_proba(Xte)
    labels = np.array([x.label for x in test])
    return FoldResult(fold.index, mode, metrics.summarize(scores, labels), [x.patient_id for x in test], labels, scores)


def run_cv(
    instances: Sequence[EncodedInstance],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    mode: str = "both",
    k: int = 5,
    folds: list[Fold] | None = None,
    jobs: int = 1,
    keep_params: bool = True,
) -> CVResult:
    """Train and test one model per fold for ``mode`` (a positional mode, 'bigru', 'logreg' or 'bnb')."""
    if mode not in ALL_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ALL_MODES}")
    if folds is None:
        folds = kfold_split([x.label for x in instances], k=k, seed=train_cfg.seed)
    if mode in BAG_MODES:
        return CVResult(mode, [_bag_fold(instances, f, mode, model_cfg.vocab_size) for f in folds])

    fixed = None
    if train_cfg.stopping == "cv_mean":
        probe = _map(jobs, [(instances, f, mode, model_cfg, train_cfg, train_cfg.max_epochs, False) for f in folds])
        curves = np.array([r.runlog.column("val_loss") for r in probe])
        fixed = int(np.argmin(curves.mean(axis=0))) + 1
        log.info("mode %s: fold-averaged val loss is lowest at epoch %d", mode, fixed)
    results = _map(jobs, [(instances, f, mode, model_cfg, train_cfg, fixed, keep_params) for f in folds])
    return CVResult(mode, results)


def _map(jobs: int, tasks: list) -> list[FoldResult]:
    if jobs <= 1:
        return [_neural_fold(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_neural_fold, tasks))


def run_ablation(
    instances: Sequence[EncodedInstance],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    modes: Sequence[str] = ABLATION_MODES,
    k: int = 5,
    jobs: int = 1,
    keep_params: bool = True,
) -> dict[str, CVResult]:
    """Every mode on the same folds with the same seeds."""
    folds = kfold_split([x.label for x in instances], k=k, seed=train_cfg.seed)
    return {m: run_cv(instances, model_cfg, train_cfg, mode=m, folds=folds, jobs=jobs, keep_params=keep_params)
            for m in modes}


# --------------------------------------------------------------------------
# reports


ARTIFACT_CHOICES = (
    "optimizer Adam(0.9, 0.999, eps 1e-8) with decoupled weight decay, gradient clipping at global norm 1.0, "
    "early stopping on validation loss; optimizer, learning rate, batch size and patience are artifact defaults"
)


def summary_document(results: dict[str, CVResult], model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {
        "model_config": model_cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "artifact_choices": ARTIFACT_CHOICES,
        "modes": {m: {"summary": r.summary(), "per_fold": [f.metrics for f in r.folds],
                      "stop_epochs": [f.runlog.stop_epoch for f in r.folds if f.runlog]}
                  for m, r in results.items()},
    }


def write_cv_outputs(results: dict[str, CVResult], model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir: str | Path) -> list[Path]:
    """summary.json, metrics.csv, and per-fold runlog.csv / checkpoint / predictions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for mode, res in results.items():
        for f in res.folds:
            d = out / mode / f"fold{f.fold}"
            d.mkdir(parents=True, exist_ok=True)
            if f.runlog is not None:
                f.runlog.to_csv(d / "runlog.csv")
                written.append(d / "runlog.csv")
            if f.params is not None:
                arch, cfg = _mode_setup(mode, model_cfg)
                ck = save_checkpoint(d / "checkpoint.json", f.params, cfg, extra={"fold": f.fold, "mode": mode})
                written += [ck, ck.with_name(ck.name + ".bin")]
            with open(d / "test_predictions.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["patient_id", "label", "score"])
                for pid, y, s in zip(f.test_ids, f.test_labels, f.test_scores):
                    w.writerow([pid, int(y), repr(float(s))])
            written.append(d / "test_predictions.csv")
    summary = out / "summary.json"
    summary.write_text(json.dumps(summary_document(results, model_cfg, train_cfg), indent=2, sort_keys=True) + "\n")
    written.append(summary)
    mpath = out / "metrics.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "fold", "metric", "threshold", "value"])
        for mode, res in results.items():
            for f in res.folds:
                for key, v in f.metrics.items():
                    name, _, thr = key.partition("@")
                    w.writerow([mode, f.fold, name, thr, _fmt(v)])
    written.append(mpath)
    return written
