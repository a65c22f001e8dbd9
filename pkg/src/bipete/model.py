"""BiPETE encoder classifier, the BiGRU baseline, and the bag-of-codes baselines."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .posenc import MAX_VISIT_POS, add_visit_embedding, rope_rotate

PAD_ID = 0
EMPTY_VISIT_ID = 1
UNK_ID = 2
N_RESERVED = 3

POSITIONAL_MODES = ("both", "rope_only", "spe_only", "none")
MASK_FILL = -1e9


class ConfigError(ValueError):
    pass


class DegenerateFoldError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 72
    n_heads: int = 9
    n_layers: int = 6
    d_ff: int = 288
    gru_hidden: int = 72
    dropout: float = 0.1
    max_seq_len: int = 256
    positional_mode: str = "both"
    rope_base: float = 10000.0
    spe_base: float = 10000.0

    def __post_init__(self):
        if self.positional_mode not in POSITIONAL_MODES:
            raise ConfigError(f"positional_mode must be one of {POSITIONAL_MODES}, got {self.positional_mode!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError(f"per-head dim {self.d_model // self.n_heads} must be even for rotary pairs")
        if self.d_model % 2:
            raise ConfigError("d_model must be even")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < N_RESERVED:
            raise ConfigError(f"vocab_size must cover the {N_RESERVED} reserved tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def use_rope(self) -> bool:
        return self.positional_mode in ("both", "rope_only")

    @property
    def use_spe(self) -> bool:
        return self.positional_mode in ("both", "spe_only")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named parameter tensors plus the architecture tag they belong to."""

    def __init__(self, tensors: dict[str, Tensor], arch: str = "bipete", seed: int | None = None):
        self.tensors = dict(tensors)
        self.arch = arch
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype) for k, v in self.tensors.items()},
            arch=self.arch,
            seed=self.seed,
        )

    def copy(self) -> "ParameterStore":
        return self.astype(next(iter(self.tensors.values())).dtype)

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _normal(rng, shape, dtype, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(dtype)


def _gru_params(rng, d_in, H, prefix, dtype) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w_ih": _normal(rng, (d_in, 3 * H), dtype),
        f"{prefix}.w_hh": _normal(rng, (H, 3 * H), dtype),
        f"{prefix}.b_ih": np.zeros(3 * H, dtype),
        f"{prefix}.b_hh": np.zeros(3 * H, dtype),
    }


def init_params(cfg: ModelConfig, seed: int, arch: str = "bipete") -> ParameterStore:
    """Normal(0, 0.02) weights, zero biases/shifts, unit layer-norm scales.

    The PAD embedding row is zero so an all-padding input embeds to the
    origin (the attribution baseline relies on this).
    """
    if arch not in ("bipete", "bigru"):
        raise ConfigError(f"unknown architecture {arch!r}")
    dtype = nx.get_dtype()
    rng = np.random.default_rng(seed)
    d, H, F = cfg.d_model, cfg.gru_hidden, cfg.d_ff
    arrs: dict[str, np.ndarray] = {}
    emb = _normal(rng, (cfg.vocab_size, d), dtype)
    emb[PAD_ID] = 0.0
    arrs["tok_emb"] = emb
    if arch == "bipete":
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            arrs[p + "ln1.gamma"] = np.ones(d, dtype)
            arrs[p + "ln1.beta"] = np.zeros(d, dtype)
            for nm in ("q", "k", "v", "o"):
                arrs[p + f"attn.w_{nm}"] = _normal(rng, (d, d), dtype)
                arrs[p + f"attn.b_{nm}"] = np.zeros(d, dtype)
            arrs[p + "ln2.gamma"] = np.ones(d, dtype)
            arrs[p + "ln2.beta"] = np.zeros(d, dtype)
            arrs[p + "ffn.w1"] = _normal(rng, (d, F), dtype)
            arrs[p + "ffn.b1"] = np.zeros(F, dtype)
            arrs[p + "ffn.w2"] = _normal(rng, (F, d), dtype)
            arrs[p + "ffn.b2"] = np.zeros(d, dtype)
        arrs["final_ln.gamma"] = np.ones(d, dtype)
        arrs["final_ln.beta"] = np.zeros(d, dtype)
    arrs.update(_gru_params(rng, d, H, "gru.fwd", dtype))
    arrs.update(_gru_params(rng, d, H, "gru.bwd", dtype))
    arrs["out.w"] = _normal(rng, (2 * H, 1), dtype)
    arrs["out.b"] = np.zeros(1, dtype)
    tensors = {k: Tensor(v, requires_grad=True, name=k, dtype=dtype) for k, v in arrs.items()}
    return ParameterStore(tensors, arch=arch, seed=seed)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ParameterStore, cfg: ModelConfig, extra: dict | None = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float32 payload)."""
    path = Path(path)
    payload = path.with_name(path.name + ".bin")
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "bipete-checkpoint/1",
        "arch": params.arch,
        "seed": params.seed,
        "config": cfg.to_dict(),
        "payload": payload.name,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    payload.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, ModelConfig, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    blob = (path.parent / manifest["payload"]).read_bytes()
    dtype = nx.get_dtype()
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = Tensor(arr.astype(dtype), requires_grad=True, name=e["name"], dtype=dtype)
    params = ParameterStore(tensors, arch=manifest["arch"], seed=manifest.get("seed"))
    return params, ModelConfig.from_dict(manifest["config"]), manifest


# --------------------------------------------------------------------------
# batches


@dataclass
class EncodedBatch:
    token_ids: np.ndarray
    visit_idx: np.ndarray
    days_ago: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def length(self) -> int:
        return self.token_ids.shape[1]


def make_batch(instances: Sequence, pad_to: int | None = None) -> EncodedBatch:
    """Right-pad instances (objects with token_ids/visit_idx/days_ago/label) into arrays."""
    L = max((len(x.token_ids) for x in instances), default=0)
    if pad_to is not None:
        L = max(L, pad_to)
    B = len(instances)
    tok = np.full((B, L), PAD_ID, dtype=np.int64)
    vis = np.zeros((B, L), dtype=np.int64)
    days = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.int64)
    labels = np.zeros(B, dtype=np.int64)
    for i, x in enumerate(instances):
        n = len(x.token_ids)
        tok[i, :n] = x.token_ids
        vis[i, :n] = x.visit_idx
        days[i, :n] = x.days_ago
        mask[i, :n] = 1
        labels[i] = x.label
    return EncodedBatch(tok, vis, days, mask, labels)


# --------------------------------------------------------------------------
# network pieces


def _linear(x, params, w: str, b: str) -> Tensor:
    return nx.add(nx.matmul(x, params[w]), params[b])


def _attention(h, params, p: str, cfg: ModelConfig, batch: EncodedBatch, train: bool, rng):
    B, L, d = h.shape
    nh, dh = cfg.n_heads, cfg.d_head

    def heads(t):
        return nx.transpose(nx.reshape(t, (B, L, nh, dh)), (0, 2, 1, 3))

    q = heads(_linear(h, params, p + "attn.w_q", p + "attn.b_q"))
    k = heads(_linear(h, params, p + "attn.w_k", p + "attn.b_k"))
    v = heads(_linear(h, params, p + "attn.w_v", p + "attn.b_v"))
    if cfg.use_rope:
        pos = batch.days_ago[:, None, :]
        q = rope_rotate(q, pos, cfg.rope_base)
        k = rope_rotate(k, pos, cfg.rope_base)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    key_pad = (batch.attention_mask == 0)[:, None, None, :]
    scores = nx.masked_fill(scores, key_pad, MASK_FILL)
    probs = nx.softmax(scores)
    attn = nx.dropout(probs, cfg.dropout, rng) if train else probs
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    return _linear(ctx, params, p + "attn.w_o", p + "attn.b_o"), probs


def _ffn(h, params, p: str, cfg: ModelConfig, train: bool, rng):
    a = nx.gelu(_linear(h, params, p + "ffn.w1", p + "ffn.b1"))
    if train:
        a = nx.dropout(a, cfg.dropout, rng)
    return _linear(a, params, p + "ffn.w2", p + "ffn.b2")


def bigru_readout(h, mask: np.ndarray, params: ParameterStore, prefix: str = "gru") -> Tensor:
    """Run a bidirectional GRU over real tokens and return [B, 2H].

    Padded steps leave the state unchanged, so the forward state after the
    sweep is the state at the last real token and the backward sweep state
    ends at position 0.
    """
    B, L, _ = h.shape
    out = []
    for direction in ("fwd", "bwd"):
        gp = params.sub(f"{prefix}.{direction}.")
        H = gp["w_hh"].shape[0]
        xp = nx.transpose(nx.add(nx.matmul(h, gp["w_ih"]), gp["b_ih"]), (1, 0, 2))  # [L, B, 3H]
        state = Tensor(np.zeros((B, H), dtype=h.dtype), dtype=h.dtype)
        lengths = mask.sum(axis=1)
        longest = int(lengths.max()) if B else 0
        steps = range(longest) if direction == "fwd" else range(longest - 1, -1, -1)
        for t in steps:
            m = mask[:, t]
            state = nx.gru_cell(None, state, gp, x_proj=nx.slice(xp, (t,)), gate=None if m.all() else m)
        out.append(state)
    return nx.concat(out, axis=-1)


def _logit(pooled, params) -> Tensor:
    z = _linear(pooled, params, "out.w", "out.b")
    return nx.reshape(z, (z.shape[0],))


def _check_batch(batch: EncodedBatch, cfg: ModelConfig):
    if batch.length > cfg.max_seq_len:
        raise IndexError(f"sequence length {batch.length} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.size and batch.visit_idx.max(initial=0) >= MAX_VISIT_POS:
        raise IndexError(f"visit index exceeds {MAX_VISIT_POS - 1}")


def embed_tokens(batch: EncodedBatch, params: ParameterStore) -> Tensor:
    return nx.embedding(params["tok_emb"], batch.token_ids)


def forward(
    batch: EncodedBatch,
    params: ParameterStore,
    cfg: ModelConfig,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
    embeddings: Tensor | None = None,
):
    """Logits [B] (and optionally attention maps [B, n_layers, n_heads, L, L]).

    ``embeddings`` replaces the token-embedding lookup (integrated gradients
    feeds interpolated embeddings through here); visit and days-ago
    encodings are still taken from ``batch``.
    """
    _check_batch(batch, cfg)
    rng = rng if train else None
    h = embed_tokens(batch, params) if embeddings is None else embeddings
    if cfg.use_spe:
        h = add_visit_embedding(h, batch.visit_idx, base=cfg.spe_base)
    if train:
        h = nx.dropout(h, cfg.dropout, rng)
    maps = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        a, probs = _attention(nx.layer_norm(h, params[p + "ln1.gamma"], params[p + "ln1.beta"]), params, p, cfg, batch, train, rng)
        h = nx.add(h, a)
        h = nx.add(h, _ffn(nx.layer_norm(h, params[p + "ln2.gamma"], params[p + "ln2.beta"]), params, p, cfg, train, rng))
        if return_attention:
            maps.append(probs.data)
    h = nx.layer_norm(h, params["final_ln.gamma"], params["final_ln.beta"])
    logits = _logit(bigru_readout(h, batch.attention_mask, params), params)
    if return_attention:
        return logits, np.stack(maps, axis=1)
    return logits, None


def baseline_bigru_forward(
    batch: EncodedBatch,
    params: ParameterStore,
    cfg: ModelConfig | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    embeddings: Tensor | None = None,
) -> Tensor:
    """Token embeddings straight into the BiGRU head; no visit or days-ago signal."""
    if cfg is not None:
        _check_batch(batch, cfg)
    h = embed_tokens(batch, params) if embeddings is None else embeddings
    if train and cfg is not None:
        h = nx.dropout(h, cfg.dropout, rng)
    return _logit(bigru_readout(h, batch.attention_mask, params), params)


def model_logits(batch, params: ParameterStore, cfg: ModelConfig, **kw) -> Tensor:
    """Dispatch on ``params.arch``."""
    if params.arch == "bigru":
        kw.pop("return_attention", None)
        return baseline_bigru_forward(batch, params, cfg, **kw)
    return forward(batch, params, cfg, **kw)[0]


def stable_sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_proba(batch: EncodedBatch, params: ParameterStore, cfg: ModelConfig) -> np.ndarray:
    with nx.no_record():
        return stable_sigmoid(model_logits(batch, params, cfg).data)


def predict_instances(instances: Sequence, params: ParameterStore, cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for a list of instances (length-sorted batching)."""
    order = np.argsort([len(x.token_ids) for x in instances], kind="stable")
    probs = np.empty(len(instances), dtype=np.float64)
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        probs[idx] = predict_proba(make_batch([instances[i] for i in idx]), params, cfg)
    return probs


# --------------------------------------------------------------------------
# bag-of-codes baselines


def one_hot(instances: Sequence, vocab_size: int) -> np.ndarray:
    """Binary presence matrix [n, vocab_size]; reserved ids are left at zero."""
    X = np.zeros((len(instances), vocab_size), dtype=np.float64)
    for i, x in enumerate(instances):
        ids = np.asarray(x.token_ids)
        X[i, ids[ids >= N_RESERVED]] = 1.0
    return X


def _require_two_classes(y, fold):
    y = np.asarray(y)
    if y.size == 0 or y.min() == y.max():
        where = f" in fold {fold}" if fold is not None else ""
        raise DegenerateFoldError(f"training labels are single-class{where}")


@dataclass
class LogisticRegression:
    """Full-batch gradient descent on mean BCE + (l2/2)||w||^2."""

    l2: float = 1e-3
    lr: float = 0.5
    steps: int = 500
    w: np.ndarray | None = field(default=None, repr=False)
    b: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray, fold: int | None = None) -> "LogisticRegression":
        _require_two_classes(y, fold)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n, d = X.shape
        w = np.zeros(d)
        b = 0.0
        for _ in range(self.steps):
            p = stable_sigmoid(X @ w + b)
            r = p - y
            w -= self.lr * (X.T @ r / n + self.l2 * w)
            b -= self.lr * r.mean()
        self.w, self.b = w, b
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def predict_proba(self, X) -> np.ndarray:
        return stable_sigmoid(self.decision_function(X))


@dataclass
class BernoulliNB:
    """Bernoulli naive Bayes with Laplace smoothing; scores are posterior log-odds."""

    alpha: float = 1.0
    feature_prob: np.ndarray | None = field(default=None, repr=False)  # [2, d] = P(x=1 | y)
    class_log_prior: np.ndarray | None = field(default=None, repr=False)

    def fit(self, X: np.ndarray, y: np.ndarray, fold: int | None = None) -> "BernoulliNB":
        _require_two_classes(y, fold)
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        probs, priors = [], []
        for c in (0, 1):
            Xc = X[y == c]
            probs.append((Xc.sum(axis=0) + self.alpha) / (len(Xc) + 2 * self.alpha))
            priors.append(len(Xc) / len(X))
        self.feature_prob = np.vstack(probs)
        self.class_log_prior = np.log(priors)
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        lp = np.log(self.feature_prob)
        lq = np.log1p(-self.feature_prob)
        joint = X @ lp.T + (1 - X) @ lq.T + self.class_log_prior
        return joint[:, 1] - joint[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        return stable_sigmoid(self.decision_function(X))
