"""Byte-sequence CNN with gated convolution and temporal max-pooling.

The network reads a fixed number of tokens (byte values 0..255 plus a
distinguished padding token), embeds each token, runs two parallel 1-d
convolutions over the embedded sequence (a linear "main" branch multiplied
elementwise by the sigmoid of a "gate" branch), takes the per-filter maximum
over all window positions, and classifies through a small fully connected
head ending in a sigmoid. Scores above 0.5 mean predicted malware.

Everything here is plain numpy with hand-written backpropagation so that
input-space gradients are analytic and training is bit-reproducible for a
fixed seed on one platform. Parameters are stored as float32 (the checkpoint
precision); all arithmetic runs in float64.
"""

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DivergenceError, EmptyDatasetError, ShapeError
from .validation import (
    as_byte_string,
    check_binary_labels,
    check_embedding_matrix,
    check_tokens,
)

VOCAB_SIZE = 257
PADDING_TOKEN = 256
MALWARE_THRESHOLD = 0.5
BENIGN = 0
MALWARE = 1

_INIT_SCALE = 0.05
_LABEL_NAMES = {"benign": BENIGN, "malware": MALWARE}


@dataclass(frozen=True)
class Hyperparams:
    """Architecture configuration.

    Defaults are desk-scale so a model trains in seconds; the full-scale
    MalConv dimensions (max_len=2_097_152, kernel_size=stride=500,
    num_filters=128, hidden_units=128) are equally legal values. ``stride``
    defaults to ``kernel_size`` (non-overlapping windows). ``vocab_size`` is
    always 257: byte values 0..255 plus the padding token 256.
    """

    max_len: int = 4096
    embed_dim: int = 8
    kernel_size: int = 50
    stride: int | None = None
    num_filters: int = 32
    hidden_units: int = 32
    vocab_size: int = VOCAB_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.kernel_size)
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size is fixed at {VOCAB_SIZE}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride > self.kernel_size:
            raise ValueError("stride must not exceed kernel_size")
        if self.num_filters < 1:
            raise ValueError("num_filters must be >= 1")
        if self.hidden_units < 0:
            raise ValueError("hidden_units must be >= 0")

    @property
    def num_windows(self) -> int:
        """Window count: ceil(max_len / stride); the last window may be partial."""
        return -(-self.max_len // self.stride)

    @property
    def padded_len(self) -> int:
        """Row count after zero-padding the embedded sequence for the last window."""
        return (self.num_windows - 1) * self.stride + self.kernel_size

    def architecture(self) -> tuple:
        """Shape-determining fields, i.e. everything except the init seed."""
        return (
            self.max_len,
            self.embed_dim,
            self.kernel_size,
            self.stride,
            self.num_filters,
            self.hidden_units,
            self.vocab_size,
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay: float = 0.98
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.decay > 0:
            raise ValueError("decay must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    learning_rate: float


# Parameter names in checkpoint serialization order.
PARAM_ORDER = (
    "embedding",
    "conv_main_w",
    "conv_main_b",
    "conv_gate_w",
    "conv_gate_b",
    "fc_hidden_w",
    "fc_hidden_b",
    "fc_out_w",
    "fc_out_b",
)


def param_shapes(hyper: Hyperparams) -> dict[str, tuple[int, ...]]:
    """Shapes of every parameter array, keyed by name in PARAM_ORDER."""
    f, k, d, h = hyper.num_filters, hyper.kernel_size, hyper.embed_dim, hyper.hidden_units
    out_in = h if h > 0 else f
    return {
        "embedding": (hyper.vocab_size, d),
        "conv_main_w": (f, k, d),
        "conv_main_b": (f,),
        "conv_gate_w": (f, k, d),
        "conv_gate_b": (f,),
        "fc_hidden_w": (f, h),
        "fc_hidden_b": (h,),
        "fc_out_w": (out_in, 1),
        "fc_out_b": (1,),
    }


class MalConvModel:
    """Container for the network parameters.

    Constructing from a ``Hyperparams`` alone draws every parameter uniformly
    from [-0.05, 0.05] using the seeded generator, in PARAM_ORDER, so a given
    seed always produces the same initial model.
    """

    def __init__(self, hyper: Hyperparams, arrays: dict[str, np.ndarray] | None = None):
        self.hyper = hyper
        shapes = param_shapes(hyper)
        if arrays is None:
            rng = np.random.default_rng(hyper.seed)
            arrays = {
                name: rng.uniform(-_INIT_SCALE, _INIT_SCALE, shapes[name]).astype(np.float32)
                for name in PARAM_ORDER
            }
        for name in PARAM_ORDER:
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != shapes[name]:
                raise ShapeError(
                    f"parameter {name} must have shape {shapes[name]}, got {arr.shape}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} contains non-finite values")
            setattr(self, name, arr)

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def copy(self) -> "MalConvModel":
        return MalConvModel(self.hyper, {n: a.copy() for n, a in self.parameters()})

    def parameter_bytes(self) -> bytes:
        """All parameters as little-endian float32, in PARAM_ORDER."""
        return b"".join(a.astype("<f4").tobytes() for _, a in self.parameters())

    def digest(self) -> str:
        """Short content hash of the parameters, used as a model id."""
        return hashlib.sha256(self.parameter_bytes()).hexdigest()[:12]

    def __repr__(self):  # pragma: no cover
        return f"MalConvModel(hyper={self.hyper!r}, digest={self.digest()})"


@lru_cache(maxsize=16)
def _window_rows(max_len: int, stride: int, kernel_size: int) -> np.ndarray:
    """Row-index table mapping (window, position-in-window) to padded-row index."""
    num_windows = -(-max_len // stride)
    starts = np.arange(num_windows, dtype=np.int64) * stride
    return starts[:, None] + np.arange(kernel_size, dtype=np.int64)[None, :]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tokenize(data, hyper: Hyperparams) -> np.ndarray:
    """Map a byte string to a fixed-length token sequence.

    Bytes beyond ``max_len`` are dropped; positions past the end of the data
    are filled with the padding token.
    """
    data = as_byte_string(data)
    tokens = np.full(hyper.max_len, PADDING_TOKEN, dtype=np.int32)
    head = np.frombuffer(data[: hyper.max_len], dtype=np.uint8)
    tokens[: head.size] = head
    return tokens


def embed(tokens, model: MalConvModel) -> np.ndarray:
    """Look up the embedding row of every token.

    Returns a float64 copy; callers (attacks) may move rows off the lattice
    of real byte embeddings without touching the model.
    """
    idx = check_tokens(tokens, model.hyper.vocab_size)
    return model.embedding.astype(np.float64)[idx]


class _ForwardState:
    __slots__ = ("win_flat", "z_main", "gate", "pooled", "argmax", "pre_h", "hidden", "logit", "score")


def _head_weights(model: MalConvModel):
    wh = model.fc_hidden_w.astype(np.float64)
    bh = model.fc_hidden_b.astype(np.float64)
    wo = model.fc_out_w.astype(np.float64)
    bo = model.fc_out_b.astype(np.float64)
    return wh, bh, wo, bo


def _conv_weights(model: MalConvModel):
    h = model.hyper
    kd = h.kernel_size * h.embed_dim
    wm = model.conv_main_w.astype(np.float64).reshape(h.num_filters, kd).T
    wg = model.conv_gate_w.astype(np.float64).reshape(h.num_filters, kd).T
    bm = model.conv_main_b.astype(np.float64)
    bg = model.conv_gate_b.astype(np.float64)
    return wm, bm, wg, bg


def _forward_state(e: np.ndarray, model: MalConvModel) -> _ForwardState:
    h = model.hyper
    e = check_embedding_matrix(e, h.max_len, h.embed_dim)
    rows = _window_rows(h.max_len, h.stride, h.kernel_size)
    padded = np.zeros((h.padded_len, h.embed_dim))
    padded[: h.max_len] = e
    win_flat = padded[rows].reshape(h.num_windows, -1)

    wm, bm, wg, bg = _conv_weights(model)
    st = _ForwardState()
    st.win_flat = win_flat
    st.z_main = win_flat @ wm + bm
    st.gate = _sigmoid(win_flat @ wg + bg)
    act = st.z_main * st.gate
    st.argmax = act.argmax(axis=0)  # first occurrence, i.e. lowest window index
    st.pooled = act[st.argmax, np.arange(h.num_filters)]

    wh, bh, wo, bo = _head_weights(model)
    if h.hidden_units > 0:
        st.pre_h = st.pooled @ wh + bh
        st.hidden = np.maximum(st.pre_h, 0.0)
        st.logit = float(st.hidden @ wo[:, 0] + bo[0])
    else:
        st.pre_h = st.hidden = None
        st.logit = float(st.pooled @ wo[:, 0] + bo[0])
    st.score = float(_sigmoid(np.array([st.logit]))[0])
    return st


def forward(e, model: MalConvModel) -> float:
    """Classification score in [0, 1] for an embedded sequence."""
    return _forward_state(e, model).score


def maxpool_argmax(e, model: MalConvModel) -> np.ndarray:
    """Per-filter index of the window winning the temporal max-pool.

    Ties resolve to the lowest window index. The set of distinct indices can
    never exceed num_filters, which is what makes pooled activations sparse
    relative to the window count.
    """
    return _forward_state(e, model).argmax.copy()


def _target_value(target_label) -> float:
    if isinstance(target_label, str):
        try:
            return float(_LABEL_NAMES[target_label])
        except KeyError:
            raise ValueError(f"unknown target label {target_label!r}") from None
    if target_label in (BENIGN, MALWARE):
        return float(target_label)
    raise ValueError(f"target label must be 0/1 or 'benign'/'malware', got {target_label!r}")


def classification_loss(e, target_label, model: MalConvModel) -> float:
    """Binary cross-entropy between forward(e) and the target label."""
    st = _forward_state(e, model)
    y = _target_value(target_label)
    return float(np.logaddexp(0.0, st.logit) - y * st.logit)


def input_gradient(e, target_label, model: MalConvModel) -> np.ndarray:
    """Gradient of the classification loss with respect to every cell of e.

    Rows feeding only windows that lost every per-filter max-pool election
    come back exactly zero, because the pooling routes gradient solely to the
    argmax window of each filter.
    """
    h = model.hyper
    st = _forward_state(e, model)
    y = _target_value(target_label)
    dlogit = st.score - y

    wh, _, wo, _ = _head_weights(model)
    if h.hidden_units > 0:
        dpre = wo[:, 0] * dlogit
        dpre[st.pre_h <= 0] = 0.0
        dpooled = wh @ dpre
    else:
        dpooled = wo[:, 0] * dlogit

    dact = np.zeros((h.num_windows, h.num_filters))
    dact[st.argmax, np.arange(h.num_filters)] = dpooled
    dz_main = dact * st.gate
    dz_gate = dact * st.z_main * st.gate * (1.0 - st.gate)

    wm, _, wg, _ = _conv_weights(model)
    dwin = dz_main @ wm.T + dz_gate @ wg.T
    dwin = dwin.reshape(h.num_windows, h.kernel_size, h.embed_dim)

    dpadded = np.zeros((h.padded_len, h.embed_dim))
    if h.stride == h.kernel_size:
        dpadded[:] = dwin.reshape(h.padded_len, h.embed_dim)
    else:
        np.add.at(dpadded, _window_rows(h.max_len, h.stride, h.kernel_size), dwin)
    return dpadded[: h.max_len]


def predict_score(model: MalConvModel, data) -> float:
    """Score a raw byte string (tokenize, embed, forward)."""
    return forward(embed(tokenize(data, model.hyper), model), model)


def predict_scores(model: MalConvModel, samples: Sequence, batch_size: int = 128) -> np.ndarray:
    """Score many byte strings with batched forward passes."""
    scores = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        tokens = np.stack([tokenize(s, model.hyper) for s in chunk])
        scores[start : start + len(chunk)] = _batch_forward(tokens, model)[0]
    return scores


def _batch_embed_windows(tokens: np.ndarray, model: MalConvModel) -> np.ndarray:
    h = model.hyper
    emb = model.embedding.astype(np.float64)[tokens]  # (B, L, d)
    b = tokens.shape[0]
    padded = np.zeros((b, h.padded_len, h.embed_dim))
    padded[:, : h.max_len] = emb
    rows = _window_rows(h.max_len, h.stride, h.kernel_size)
    return padded[:, rows].reshape(b, h.num_windows, -1)


def _batch_forward(tokens: np.ndarray, model: MalConvModel, need_cache: bool = False):
    h = model.hyper
    b = tokens.shape[0]
    win = _batch_embed_windows(tokens, model)  # (B, W, K*d)
    wm, bm, wg, bg = _conv_weights(model)
    flat = win.reshape(b * h.num_windows, -1)
    z_main = (flat @ wm).reshape(b, h.num_windows, h.num_filters) + bm
    gate = _sigmoid((flat @ wg).reshape(b, h.num_windows, h.num_filters) + bg)
    act = z_main * gate
    argmax = act.argmax(axis=1)  # (B, F)
    pooled = np.take_along_axis(act, argmax[:, None, :], axis=1)[:, 0, :]

    wh, bh, wo, bo = _head_weights(model)
    if h.hidden_units > 0:
        pre_h = pooled @ wh + bh
        hidden = np.maximum(pre_h, 0.0)
        logits = hidden @ wo[:, 0] + bo[0]
    else:
        pre_h = hidden = None
        logits = pooled @ wo[:, 0] + bo[0]
    scores = _sigmoid(logits)
    if not need_cache:
        return scores, logits, None
    cache = (win, z_main, gate, argmax, pooled, pre_h, hidden)
    return scores, logits, cache


def _batch_gradients(tokens, y, model: MalConvModel):
    """Forward + backward over a batch; returns (mean loss, scores, grads).

    Gradients are of the sum of per-sample losses: each sample contributes
    its full gradient, so the effective step size scales with batch size.
    The returned loss is the per-sample mean, for logging.
    """
    h = model.hyper
    b = tokens.shape[0]
    scores, logits, cache = _batch_forward(tokens, model, need_cache=True)
    win, z_main, gate, argmax, pooled, pre_h, hidden = cache
    losses = np.logaddexp(0.0, logits) - y * logits
    loss = float(losses.mean())

    dlogit = scores - y  # (B,)
    wh, _, wo, _ = _head_weights(model)
    grads = {}
    if h.hidden_units > 0:
        grads["fc_out_w"] = (hidden * dlogit[:, None]).sum(axis=0)[:, None]
        grads["fc_out_b"] = np.array([dlogit.sum()])
        dpre = np.outer(dlogit, wo[:, 0])
        dpre[pre_h <= 0] = 0.0
        grads["fc_hidden_w"] = pooled.T @ dpre
        grads["fc_hidden_b"] = dpre.sum(axis=0)
        dpooled = dpre @ wh.T
    else:
        grads["fc_out_w"] = (pooled * dlogit[:, None]).sum(axis=0)[:, None]
        grads["fc_out_b"] = np.array([dlogit.sum()])
        grads["fc_hidden_w"] = np.zeros((h.num_filters, 0))
        grads["fc_hidden_b"] = np.zeros(0)
        dpooled = np.outer(dlogit, wo[:, 0])

    dact = np.zeros((b, h.num_windows, h.num_filters))
    np.put_along_axis(dact, argmax[:, None, :], dpooled[:, None, :], axis=1)
    dz_main = dact * gate
    dz_gate = dact * z_main * gate * (1.0 - gate)

    wm, _, wg, _ = _conv_weights(model)
    flat = win.reshape(b * h.num_windows, -1)
    dzm_flat = dz_main.reshape(b * h.num_windows, h.num_filters)
    dzg_flat = dz_gate.reshape(b * h.num_windows, h.num_filters)
    kd = h.kernel_size * h.embed_dim
    grads["conv_main_w"] = (flat.T @ dzm_flat).T.reshape(h.num_filters, h.kernel_size, h.embed_dim)
    grads["conv_main_b"] = dzm_flat.sum(axis=0)
    grads["conv_gate_w"] = (flat.T @ dzg_flat).T.reshape(h.num_filters, h.kernel_size, h.embed_dim)
    grads["conv_gate_b"] = dzg_flat.sum(axis=0)

    dwin = (dzm_flat @ wm.T + dzg_flat @ wg.T).reshape(b, h.num_windows, h.kernel_size, h.embed_dim)
    dpadded = np.zeros((b, h.padded_len, h.embed_dim))
    if h.stride == h.kernel_size:
        dpadded[:] = dwin.reshape(b, h.padded_len, h.embed_dim)
    else:
        rows = _window_rows(h.max_len, h.stride, h.kernel_size)
        np.add.at(dpadded, (np.arange(b)[:, None, None], rows[None]), dwin)
    demb = np.zeros((h.vocab_size, h.embed_dim))
    np.add.at(demb, tokens.ravel(), dpadded[:, : h.max_len].reshape(-1, h.embed_dim))
    grads["embedding"] = demb
    return loss, scores, grads


def train(
    model: MalConvModel,
    samples: Sequence,
    labels,
    cfg: TrainConfig,
) -> list[EpochStats]:
    """Momentum SGD on binary cross-entropy; updates the model in place.

    The learning rate is multiplied by ``cfg.decay`` after every epoch.
    Batch order comes from a generator seeded with ``cfg.seed``, so a fixed
    (model seed, train seed, data) triple gives a bit-identical parameter
    trajectory on one platform. Accuracy in the returned log is measured on
    each batch just before its update.
    """
    y_all = check_binary_labels(labels)
    if len(samples) != y_all.size:
        raise ValueError("samples and labels must have equal length")
    if y_all.size == 0:
        raise EmptyDatasetError("training split is empty")
    for cls in (BENIGN, MALWARE):
        if not (y_all == cls).any():
            raise EmptyDatasetError(f"training split has no samples of class {cls}")

    tokens_all = np.stack([tokenize(s, model.hyper) for s in samples])
    n = y_all.size
    velocity = {name: np.zeros(arr.shape) for name, arr in model.parameters()}
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.decay**epoch
        perm = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for bnum, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            loss, scores, grads = _batch_gradients(tokens_all[idx], y_all[idx].astype(np.float64), model)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, bnum)
            for name, arr in model.parameters():
                v = velocity[name]
                v *= cfg.momentum
                v += grads[name]
                arr[:] = (arr.astype(np.float64) - lr * v).astype(np.float32)
            total_loss += loss * idx.size
            correct += int(((scores > MALWARE_THRESHOLD).astype(np.int64) == y_all[idx]).sum())
        history.append(EpochStats(epoch, total_loss / n, correct / n, lr))
    return history
