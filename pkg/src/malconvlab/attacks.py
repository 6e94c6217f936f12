"""Evasion attacks against the byte-sequence CNN.

Four attacks append bytes after the end of the file (the loader ignores
them, so program behavior is untouched); the fifth rewrites slack bytes
inside section allocations. An attack evades when the modified file's
score drops below the malware threshold.

Gradient attacks operate in embedding space and discretize back to real
bytes with ``embedding_mapping``, the L2-nearest row of the embedding
table over byte values 0..255. The padding token is never a legal output
because no file byte can produce it.

Every attack is a pure function of (model, bytes, config, rng), so a
harness may run them concurrently across candidates with per-candidate
generator streams.
"""

from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import NoDonorError, NoSlackError, NotAttackableError
from .pe import parse_pe, slack_indices

ATTACK_KINDS = (
    "random_append",
    "benign_append",
    "fgm_append",
    "gradient_append",
    "slack_fgm",
)
_APPEND_KINDS = ("random_append", "benign_append", "fgm_append", "gradient_append")


@dataclass(frozen=True)
class AttackConfig:
    """Attack selection plus its knobs.

    ``num_bytes`` is the appended-byte budget (append kinds only).
    ``num_iter`` caps the iterative append attack. ``eps_step`` is the
    embedding-space step size; None derives it from the model's embedding
    scale at run time. ``eps_ball`` caps the per-byte L2 displacement the
    slack attack accepts; None accepts every row. ``seed`` feeds the
    attack's generator when the caller does not provide one.
    """

    kind: str
    num_bytes: int = 0
    num_iter: int = 10
    eps_step: float | None = None
    eps_ball: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(
                f"unknown attack kind {self.kind!r}; expected one of {', '.join(ATTACK_KINDS)}"
            )
        if self.kind in _APPEND_KINDS and self.num_bytes < 1:
            raise ValueError(f"{self.kind} requires num_bytes >= 1")
        if self.kind == "gradient_append" and self.num_iter < 1:
            raise ValueError("gradient_append requires num_iter >= 1")
        if self.eps_step is not None and not self.eps_step > 0:
            raise ValueError("eps_step must be > 0")
        if self.eps_ball is not None and self.eps_ball < 0:
            raise ValueError("eps_ball must be >= 0")


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    """Result of one attack run.

    ``modified_indices`` is sorted; for append kinds it is exactly the
    appended range [len(x0), len(x0) + budget), for the slack attack the
    file offsets whose byte value actually changed. ``clipped`` flags an
    append budget reduced to the room left under max_len. For the
    iterative attack, ``byte_history`` holds every appended-tail state
    (index 0 is the initial random padding) and ``oscillation_period`` is
    the detected cycle length at the end of that history, 0 if none.
    """

    kind: str
    adversarial_bytes: bytes
    modified_indices: np.ndarray
    score_before: float
    score_after: float
    evaded: bool
    gradient_evals: int
    iterations: int = 0
    clipped: bool = False
    byte_history: tuple = ()
    oscillation_period: int = 0


def embedding_mapping(vector, embedding) -> int:
    """L2-nearest byte value for an embedding-space row.

    Scans byte values 0..255 only; the padding row takes no part. Ties go
    to the lowest byte value. A vector equal to a byte's own embedding maps
    to that byte.
    """
    emb = np.asarray(embedding, dtype=np.float64)[:256]
    v = np.asarray(vector, dtype=np.float64)
    distances = ((emb - v) ** 2).sum(axis=1)
    return int(np.argmin(distances))


def default_eps_step(model: M.MalConvModel) -> float:
    """Standard deviation of the embedding table's entries.

    After training the table spreads out; stepping each coordinate by one
    table-wide standard deviation moves a row far enough that the nearest
    byte is chosen by direction rather than staying put.
    """
    return float(model.embedding.astype(np.float64).std())


def oscillation_period(history) -> int:
    """Cycle length at the tail of a byte-state history, 0 if none.

    ``history`` is a sequence of byte strings (snapshots of the appended
    region, oldest first). If the final state occurred earlier, the
    distance to its most recent previous occurrence is the period: a trace
    ending ...a, b, a, b, a reports 2; a trace with a unique tail reports 0.
    """
    states = list(history)
    if len(states) < 2:
        return 0
    last = states[-1]
    for back in range(len(states) - 2, -1, -1):
        if states[back] == last:
            return len(states) - 1 - back
    return 0


def _resolve_budget(model: M.MalConvModel, size: int, num_bytes: int):
    """Effective append budget and whether it was clipped to the room left."""
    max_len = model.hyper.max_len
    if size >= max_len:
        raise NotAttackableError(
            f"file of {size} bytes already fills the model's {max_len}-byte input"
        )
    room = max_len - size
    if num_bytes <= room:
        return num_bytes, False
    return room, True


def _eps(cfg: AttackConfig, model: M.MalConvModel) -> float:
    return cfg.eps_step if cfg.eps_step is not None else default_eps_step(model)


def _score(model: M.MalConvModel, data: bytes) -> float:
    return M.predict_score(model, data)


def _append_outcome(
    kind, model, x0, tail: bytes, before: float, gradient_evals: int, clipped: bool, **kw
) -> AttackOutcome:
    data = x0 + tail
    after = _score(model, data)
    return AttackOutcome(
        kind=kind,
        adversarial_bytes=data,
        modified_indices=np.arange(len(x0), len(data), dtype=np.int64),
        score_before=before,
        score_after=after,
        evaded=after < M.MALWARE_THRESHOLD,
        gradient_evals=gradient_evals,
        clipped=clipped,
        **kw,
    )


def random_append(
    model: M.MalConvModel, x0: bytes, cfg: AttackConfig, rng: np.random.Generator
) -> AttackOutcome:
    """Append uniformly random bytes."""
    budget, clipped = _resolve_budget(model, len(x0), cfg.num_bytes)
    before = _score(model, x0)
    tail = rng.integers(0, 256, size=budget, dtype=np.int64).astype(np.uint8).tobytes()
    return _append_outcome(
        "random_append", model, x0, tail, before, gradient_evals=0, clipped=clipped, iterations=1
    )


def benign_append(
    model: M.MalConvModel,
    x0: bytes,
    benign_pool,
    cfg: AttackConfig,
    rng: np.random.Generator,
) -> AttackOutcome:
    """Append the leading bytes of a benign donor file.

    The donor is drawn uniformly from pool files long enough to supply the
    budget; callers are expected to stock the pool with benign files the
    victim model classifies correctly.
    """
    budget, clipped = _resolve_budget(model, len(x0), cfg.num_bytes)
    eligible = [d for d in benign_pool if len(d) >= budget]
    if not eligible:
        raise NoDonorError(
            f"no donor of at least {budget} bytes among {len(benign_pool)} pool files"
        )
    before = _score(model, x0)
    donor = eligible[int(rng.integers(len(eligible)))]
    return _append_outcome(
        "benign_append", model, x0, donor[:budget], before, gradient_evals=0,
        clipped=clipped, iterations=1,
    )


def fgm_append(
    model: M.MalConvModel, x0: bytes, cfg: AttackConfig, rng: np.random.Generator
) -> AttackOutcome:
    """One-shot gradient attack on appended bytes.

    Pads the file with random bytes, takes a single loss gradient toward
    the benign label in embedding space, steps every appended row against
    the gradient sign, and maps each stepped row back to its nearest byte.
    Rows before the original end of file are never copied, so the prefix
    survives byte-identically. Exactly one gradient evaluation regardless
    of budget.
    """
    size = len(x0)
    budget, clipped = _resolve_budget(model, size, cfg.num_bytes)
    before = _score(model, x0)
    pad = rng.integers(0, 256, size=budget, dtype=np.int64).astype(np.uint8).tobytes()
    tokens = M.tokenize(x0 + pad, model.hyper)
    e = M.embed(tokens, model)
    grad = M.input_gradient(e, M.BENIGN, model)
    stepped = e - _eps(cfg, model) * np.sign(grad)
    tail = bytes(
        embedding_mapping(stepped[pos], model.embedding) for pos in range(size, size + budget)
    )
    return _append_outcome(
        "fgm_append", model, x0, tail, before, gradient_evals=1, clipped=clipped, iterations=1
    )


def _descend_byte(e_row, grad_row, emb256, eps: float, current: int) -> int:
    """One discretized descent step for a single appended byte.

    Moves distance ``eps`` against the normalized gradient and picks, among
    bytes whose embeddings lie strictly forward of the current row along
    that direction, the one closest to the stepped point. Zero gradient or
    an empty forward set keeps the current byte.
    """
    norm = float(np.sqrt((grad_row**2).sum()))
    if norm == 0.0:
        return current
    direction = -grad_row / norm
    forward = (emb256 - e_row) @ direction > 0
    if not forward.any():
        return current
    target = e_row + eps * direction
    distances = ((emb256 - target) ** 2).sum(axis=1)
    distances[~forward] = np.inf
    return int(np.argmin(distances))


def gradient_append(
    model: M.MalConvModel, x0: bytes, cfg: AttackConfig, rng: np.random.Generator
) -> AttackOutcome:
    """Iterative gradient attack on appended bytes.

    Starts from random padding; each iteration costs one gradient
    evaluation and re-chooses every appended byte with a discretized
    descent step. Stops on evasion or after ``num_iter`` iterations. The
    appended-region snapshots are kept so byte-value oscillation (the
    failure mode this discretization is prone to) can be reported.
    """
    size = len(x0)
    budget, clipped = _resolve_budget(model, size, cfg.num_bytes)
    before = _score(model, x0)
    eps = _eps(cfg, model)
    emb256 = model.embedding.astype(np.float64)[:256]

    tail = bytearray(rng.integers(0, 256, size=budget, dtype=np.int64).astype(np.uint8).tobytes())
    history = [bytes(tail)]
    evals = 0
    iterations = 0
    for it in range(1, cfg.num_iter + 1):
        tokens = M.tokenize(x0 + bytes(tail), model.hyper)
        e = M.embed(tokens, model)
        grad = M.input_gradient(e, M.BENIGN, model)
        evals += 1
        iterations = it
        for pos in range(size, size + budget):
            tail[pos - size] = _descend_byte(e[pos], grad[pos], emb256, eps, tail[pos - size])
        history.append(bytes(tail))
        if _score(model, x0 + bytes(tail)) < M.MALWARE_THRESHOLD:
            break
    return _append_outcome(
        "gradient_append",
        model,
        x0,
        bytes(tail),
        before,
        gradient_evals=evals,
        clipped=clipped,
        iterations=iterations,
        byte_history=tuple(history),
        oscillation_period=oscillation_period(history),
    )


def slack_fgm(
    model: M.MalConvModel, x0: bytes, cfg: AttackConfig, rng: np.random.Generator
) -> AttackOutcome:
    """One-shot gradient attack on slack bytes inside the file.

    Parses the section table, collects slack offsets visible to the model,
    takes one gradient toward the benign label, and steps each slack row
    against the gradient sign. A row is rewritten only when its embedding
    displacement stays within ``eps_ball``; accepted rows are mapped back
    to bytes in place. File length, non-slack bytes and the section table
    are untouched.
    """
    pe = parse_pe(x0)
    idx = slack_indices(pe, limit=model.hyper.max_len)
    if idx.size == 0:
        raise NoSlackError("no slack bytes within the model's input window")
    before = _score(model, x0)
    tokens = M.tokenize(x0, model.hyper)
    e = M.embed(tokens, model)
    grad = M.input_gradient(e, M.BENIGN, model)
    stepped = e[idx] - _eps(cfg, model) * np.sign(grad[idx])
    displacement = np.sqrt(((stepped - e[idx]) ** 2).sum(axis=1))

    buf = bytearray(x0)
    modified = []
    for row, pos in enumerate(idx):
        if cfg.eps_ball is not None and displacement[row] > cfg.eps_ball:
            continue
        new_byte = embedding_mapping(stepped[row], model.embedding)
        if new_byte != buf[pos]:
            buf[pos] = new_byte
            modified.append(int(pos))
    data = bytes(buf)
    after = _score(model, data)
    return AttackOutcome(
        kind="slack_fgm",
        adversarial_bytes=data,
        modified_indices=np.array(modified, dtype=np.int64),
        score_before=before,
        score_after=after,
        evaded=after < M.MALWARE_THRESHOLD,
        gradient_evals=1,
        iterations=1,
    )


def run_attack(
    model: M.MalConvModel,
    x0: bytes,
    cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    benign_pool=None,
) -> AttackOutcome:
    """Dispatch one attack run by ``cfg.kind``; seeds a generator from
    ``cfg.seed`` when the caller does not pass one."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "random_append":
        return random_append(model, x0, cfg, rng)
    if cfg.kind == "benign_append":
        if not benign_pool:
            raise NoDonorError("benign_append requires a donor pool")
        return benign_append(model, x0, benign_pool, cfg, rng)
    if cfg.kind == "fgm_append":
        return fgm_append(model, x0, cfg, rng)
    if cfg.kind == "gradient_append":
        return gradient_append(model, x0, cfg, rng)
    return slack_fgm(model, x0, cfg, rng)
