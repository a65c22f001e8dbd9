"""Integrated gradients over token embeddings and relative-contribution tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import PAD_ID, EncodedBatch, ModelConfig, ParameterStore, make_batch, model_logits, stable_sigmoid
from .numerics import Tensor

TARGETS = ("prob", "logit")
DECISION_THRESHOLD = 0.5


class EmptyGroupError(ValueError):
    """No true positives or no true negatives to aggregate over."""


@dataclass
class IGConfig:
    steps: int = 64
    target: str = "prob"  # sigmoid output; "logit" attributes the pre-sigmoid score
    chunk: int = 64  # interpolation points per forward pass

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError(f"steps must be >= 2, got {self.steps}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass
class TokenAttribution:
    instance_id: str
    token_ids: np.ndarray
    visit_idx: np.ndarray
    values: np.ndarray  # one scalar per token: per-dim IG summed over the embedding axis
    f_input: float
    f_baseline: float

    @property
    def gap(self) -> float:
        """Completeness gap |sum(a) - (F(x) - F(x'))|."""
        return abs(float(np.sum(self.values)) - (self.f_input - self.f_baseline))


def frozen(params: ParameterStore, dtype=None) -> ParameterStore:
    """Constant copy of ``params`` (no parameter gradients are computed)."""
    dtype = dtype or next(iter(params.tensors.values())).dtype
    return ParameterStore({k: Tensor(v.data.astype(dtype), name=k, dtype=dtype) for k, v in params.items()},
                          arch=params.arch, seed=params.seed)


def _repeat(batch: EncodedBatch, n: int) -> EncodedBatch:
    rep = lambda a: np.repeat(a, n, axis=0)  # noqa: E731
    return EncodedBatch(rep(batch.token_ids), rep(batch.visit_idx), rep(batch.days_ago),
                        rep(batch.attention_mask), rep(batch.labels))


def _target(z: Tensor, target: str) -> Tensor:
    return nx.sigmoid(z) if target == "prob" else z


def integrated_gradients(instance, params: ParameterStore, model_cfg: ModelConfig, cfg: IGConfig | None = None) -> TokenAttribution:
    """Integrated gradients of F with respect to token embeddings.

    The baseline puts the PAD embedding at every position but keeps the
    instance's visit and days-ago indices, so positional signals are the
    same at both ends of the path. The path integral is a right Riemann
    sum over alpha = k/m, k = 1..m. ``params`` should be ``frozen`` for speed.
    """
    cfg = cfg or IGConfig()
    if any(t.requires_grad for _, t in params.items()):
        params = frozen(params)
    dtype = params["tok_emb"].dtype
    batch = make_batch([instance])
    table = params["tok_emb"].data
    e = table[batch.token_ids[0]]  # [L, d]
    e0 = np.broadcast_to(table[PAD_ID], e.shape)
    delta = (e - e0).astype(np.float64)
    m = cfg.steps

    try:
        with nx.no_record():
            ends = np.stack([e0, e]).astype(dtype)
            z_ends = model_logits(_repeat(batch, 2), params, model_cfg, embeddings=Tensor(ends, dtype=dtype)).data
    except nx.NumericError as err:
        raise nx.NumericError(f"interpolation endpoints (steps 0 and {m}): {err}") from err
    f_ends = stable_sigmoid(z_ends) if cfg.target == "prob" else z_ends.astype(np.float64)

    grad_sum = np.zeros_like(delta)
    for start in range(1, m + 1, cfg.chunk):
        ks = np.arange(start, min(start + cfg.chunk, m + 1))
        alphas = (ks / m).astype(np.float64)[:, None, None]
        pts = Tensor((e0 + alphas * delta).astype(dtype), requires_grad=True, dtype=dtype)
        try:
            with nx.Graph() as g:
                z = model_logits(_repeat(batch, len(ks)), params, model_cfg, embeddings=pts)
                out = nx.sum(_target(z, cfg.target))
            grads = g.backward(out, wrt=[pts])[pts]
        except nx.NumericError as err:
            raise nx.NumericError(f"interpolation step {ks[0]}" + (f"..{ks[-1]}" if len(ks) > 1 else "") + f": {err}") from err
        if not np.all(np.isfinite(grads)):
            bad = ks[np.flatnonzero(~np.isfinite(grads).all(axis=(1, 2)))[0]]
            raise nx.NumericError(f"non-finite gradient at interpolation step {bad}")
        grad_sum += grads.astype(np.float64).sum(axis=0)

    values = (delta * (grad_sum / m)).sum(axis=-1)
    return TokenAttribution(
        instance_id=instance.patient_id,
        token_ids=np.asarray(instance.token_ids),
        visit_idx=np.asarray(instance.visit_idx),
        values=values,
        f_input=float(f_ends[1]),
        f_baseline=float(f_ends[0]),
    )


def attribute_all(instances: Sequence, params: ParameterStore, model_cfg: ModelConfig, cfg: IGConfig | None = None, jobs: int = 1) -> list[TokenAttribution]:
    fp = frozen(params)
    if jobs <= 1:
        return [integrated_gradients(x, fp, model_cfg, cfg) for x in instances]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_ig_task, [(x, fp, model_cfg, cfg) for x in instances]))


def _ig_task(args):
    return integrated_gradients(*args)


# --------------------------------------------------------------------------
# relative contribution


@dataclass
class RCRow:
    token_id: int
    token: str
    source: str
    a_tp: float
    a_tn: float
    rc: float | None
    n_case: int
    n_ctrl: int
    flags: list[str] = field(default_factory=list)


@dataclass
class RCTable:
    rows: list[RCRow]  # kept tokens, sorted by RC descending
    sign_mismatch: list[RCRow]  # excluded for opposite signs; reported with a flag
    n_frequency_excluded: int
    n_tp: int
    n_tn: int
    min_freq: float

    def get(self, token: str) -> RCRow | None:
        for r in self.rows + self.sign_mismatch:
            if r.token == token:
                return r
        return None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "source", "A_TP", "A_TN", "RC", "n_case", "n_ctrl", "flags"])
            for r in self.rows + self.sign_mismatch:
                w.writerow([r.token, r.source, repr(r.a_tp), repr(r.a_tn), "" if r.rc is None else repr(r.rc),
                            r.n_case, r.n_ctrl, ";".join(r.flags)])


def _per_instance_means(attr: TokenAttribution) -> dict[int, float]:
    """Repeated occurrences of a token within one instance are averaged."""
    ids = attr.token_ids
    keep = ids != PAD_ID
    uniq, inv = np.unique(ids[keep], return_inverse=True)
    sums = np.bincount(inv, weights=attr.values[keep], minlength=len(uniq))
    counts = np.bincount(inv, minlength=len(uniq))
    return dict(zip(uniq.tolist(), (sums / counts).tolist()))


def relative_contribution(
    attributions: Sequence[TokenAttribution],
    probs,
    labels,
    *,
    min_freq: float = 0.01,
    vocab=None,
    threshold: float = DECISION_THRESHOLD,
) -> RCTable:
    """RC(t) = A_TP(t) / A_TN(t) over correctly classified instances.

    Tokens present in fewer than ``min_freq`` of either group's instances
    are dropped; tokens whose group means have opposite signs get no RC
    and are listed with a ``sign_mismatch`` flag.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if not (len(attributions) == len(probs) == len(labels)):
        raise ValueError("attributions, probs and labels differ in length")
    pred = probs >= threshold
    groups = {"TP": [], "TN": []}
    for a, p, y in zip(attributions, pred, labels):
        if p and y == 1:
            groups["TP"].append(_per_instance_means(a))
        elif not p and y == 0:
            groups["TN"].append(_per_instance_means(a))
    for name, members in groups.items():
        if not members:
            raise EmptyGroupError(f"no {name} instances to aggregate over")

    def collect(members):
        acc: dict[int, list[float]] = {}
        for d in members:
            for t, v in d.items():
                acc.setdefault(t, []).append(v)
        return acc

    tp, tn = collect(groups["TP"]), collect(groups["TN"])
    n_tp, n_tn = len(groups["TP"]), len(groups["TN"])
    rows, mismatched, n_freq = [], [], 0
    for t in sorted(set(tp) | set(tn)):
        c_tp, c_tn = len(tp.get(t, ())), len(tn.get(t, ()))
        if c_tp < min_freq * n_tp or c_tn < min_freq * n_tn or c_tp == 0 or c_tn == 0:
            n_freq += 1
            continue
        a_tp, a_tn = float(np.mean(tp[t])), float(np.mean(tn[t]))
        token = vocab.token(t) if vocab is not None else str(t)
        source = vocab.source(token) if vocab is not None else ""
        row = RCRow(t, token, source, a_tp, a_tn, None, c_tp, c_tn)
        if a_tn == 0 or math.copysign(1, a_tp) != math.copysign(1, a_tn):
            row.flags.append("sign_mismatch")
            mismatched.append(row)
            continue
        row.rc = a_tp / a_tn
        rows.append(row)
    rows.sort(key=lambda r: -r.rc)
    return RCTable(rows, mismatched, n_freq, n_tp, n_tn, min_freq)


def write_attributions(attrs: Sequence[TokenAttribution], path: str | Path, vocab=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "token", "visit_idx", "value"])
        for a in attrs:
            for t, v, val in zip(a.token_ids, a.visit_idx, a.values):
                w.writerow([a.instance_id, vocab.token(int(t)) if vocab is not None else int(t), int(v), repr(float(val))])


def completeness_report(attrs: Sequence[TokenAttribution], steps: int) -> dict:
    gaps = np.array([a.gap for a in attrs]) if attrs else np.zeros(0)
    diffs = np.array([abs(a.f_input - a.f_baseline) for a in attrs]) if attrs else np.zeros(0)
    return {
        "steps": steps,
        "n_instances": len(attrs),
        "max_gap": float(gaps.max(initial=0.0)),
        "mean_gap": float(gaps.mean()) if len(gaps) else 0.0,
        "max_relative_gap": float(np.max(gaps / np.maximum(diffs, 1e-12), initial=0.0)),
    }
