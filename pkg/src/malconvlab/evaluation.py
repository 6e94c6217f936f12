"""Evaluation protocol: candidate selection, attack grids, pooling, transfer.

A suite run takes a trained model, a corpus, a fixed candidate set of
correctly-classified malware, and a grid of attack configurations, and
produces one summary row per grid cell plus one flat record per
(cell, candidate) pair. Every task draws its randomness from a generator
seeded by (suite seed, cell index, candidate index), so results do not
depend on execution order and a thread pool gives bit-identical output.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from .attacks import AttackConfig, AttackOutcome, default_eps_step, run_attack
from .errors import (
    EmptyCandidatesError,
    EmptyDatasetError,
    IncompatibleModelsError,
    NoDonorError,
    NoSlackError,
    NotAttackableError,
    PEParseError,
)
from .store import bytes_digest

# Candidates must leave room for appended content: only files smaller than
# this fraction of the input length are attacked.
CANDIDATE_SIZE_FRAC = 0.472

EXCLUSION_REASONS = ("too-large", "no-slack", "parse-error")

_GRADIENT_KINDS = ("fgm_append", "gradient_append", "slack_fgm")


def candidate_size_limit(max_len: int) -> int:
    return math.floor(CANDIDATE_SIZE_FRAC * max_len)


@dataclass(frozen=True)
class Candidate:
    manifest_index: int
    path: str
    size: int
    score: float


@dataclass(frozen=True)
class CandidateSet:
    """Chosen attack targets plus the selection parameters that produced them."""

    candidates: tuple
    n_test_malware: int
    n_eligible: int
    max_file_size: int
    count: int
    seed: int

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


def select_candidates(
    model: M.MalConvModel,
    samples,
    entries,
    count: int,
    seed: int = 0,
    max_file_size: int | None = None,
) -> CandidateSet:
    """Pick attack targets from the test split.

    Eligible files are test-split malware smaller than ``max_file_size``
    (default: the standard fraction of the model's input length) that the
    model already classifies as malware. ``count`` of them are sampled
    without replacement and returned sorted by manifest index; if fewer are
    eligible, all of them are returned.
    """
    limit = max_file_size if max_file_size is not None else candidate_size_limit(model.hyper.max_len)
    test_malware = [
        i
        for i, e in enumerate(entries)
        if e.split == "test" and e.label == M.MALWARE
    ]
    small = [i for i in test_malware if entries[i].size < limit]
    if small:
        scores = M.predict_scores(model, [samples[i] for i in small])
        eligible = [i for i, s in zip(small, scores) if s > M.MALWARE_THRESHOLD]
        score_of = dict(zip(small, scores))
    else:
        eligible = []
        score_of = {}
    if not eligible:
        raise EmptyCandidatesError(
            f"no test-split malware under {limit} bytes is classified as malware"
        )
    if len(eligible) > count:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(eligible), size=count, replace=False)
        chosen = sorted(eligible[int(j)] for j in picked)
    else:
        chosen = eligible
    candidates = tuple(
        Candidate(i, entries[i].path, entries[i].size, float(score_of[i])) for i in chosen
    )
    return CandidateSet(
        candidates=candidates,
        n_test_malware=len(test_malware),
        n_eligible=len(eligible),
        max_file_size=limit,
        count=count,
        seed=seed,
    )


def benign_donor_pool(model: M.MalConvModel, samples, entries) -> list:
    """Test-split benign files the model classifies correctly."""
    picked = [
        samples[i]
        for i, e in enumerate(entries)
        if e.split == "test" and e.label == M.BENIGN
    ]
    if not picked:
        return []
    scores = M.predict_scores(model, picked)
    return [d for d, s in zip(picked, scores) if s <= M.MALWARE_THRESHOLD]


def success_rate(outcomes) -> float:
    """Fraction of evading outcomes (AttackOutcomes or plain booleans)."""
    flags = [o.evaded if isinstance(o, AttackOutcome) else bool(o) for o in outcomes]
    if not flags:
        raise EmptyCandidatesError("success rate of an empty outcome list is undefined")
    return sum(flags) / len(flags)


def default_grid(
    model: M.MalConvModel,
    budgets=(50, 200, 500, 1000),
    gradient_budget: int = 200,
    num_iter: int = 10,
    ball_fractions=(0.25, 0.5, 0.75, 1.0),
    eps_step: float | None = None,
) -> list:
    """Standard 17-cell grid.

    Random, benign and one-shot gradient appends at every byte budget, the
    iterative append attack at one budget, and the slack attack at a sweep
    of displacement caps expressed as fractions of the largest possible
    per-row step (eps_step times the square root of the embedding width).
    """
    step = eps_step if eps_step is not None else default_eps_step(model)
    full_step = step * math.sqrt(model.hyper.embed_dim)
    grid = [
        AttackConfig(kind, num_bytes=b, eps_step=eps_step)
        for kind in ("random_append", "benign_append", "fgm_append")
        for b in budgets
    ]
    grid.append(
        AttackConfig(
            "gradient_append", num_bytes=gradient_budget, num_iter=num_iter, eps_step=eps_step
        )
    )
    grid.extend(
        AttackConfig("slack_fgm", eps_ball=f * full_step, eps_step=eps_step)
        for f in ball_fractions
    )
    return grid


@dataclass(frozen=True)
class OutcomeRecord:
    """Flat per-(cell, candidate) row; exclusions carry a reason and no scores."""

    cell: int
    attack: str
    budget: int
    eps_step: float | None
    eps_ball: float | None
    candidate_index: int
    path: str
    status: str
    evaded: bool | None = None
    score_before: float | None = None
    score_after: float | None = None
    gradient_evals: int | None = None
    iterations: int | None = None
    modified_bytes: int | None = None
    clipped: bool | None = None
    oscillation_period: int | None = None
    output_digest: str | None = None

    CSV_HEADER = (
        "cell,attack,budget,eps_step,eps_ball,candidate_index,path,status,evaded,"
        "score_before,score_after,gradient_evals,iterations,modified_bytes,"
        "clipped,oscillation_period,output_digest"
    ).split(",")

    def csv_row(self) -> list:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return int(v)
            if isinstance(v, float):
                return repr(v)
            return v

        return [fmt(getattr(self, name)) for name in self.CSV_HEADER]


@dataclass(frozen=True)
class ReportRow:
    """Per-cell summary over the candidates the attack actually ran on."""

    cell: int
    attack: str
    budget: int
    eps_step: float | None
    eps_ball: float | None
    n_candidates: int
    n_success: int
    success_rate: float
    mean_modified_bytes: float
    mean_gradient_evals: float
    model_id: str
    seed: int
    n_excluded: int


@dataclass
class EvalReport:
    """Everything a suite run produced.

    ``rows`` summarize each grid cell that attacked at least one candidate;
    ``records`` and ``outcomes`` hold the per-(cell, candidate) detail in a
    fixed order; ``exclusions`` tallies skipped candidates by reason.
    """

    grid: list
    rows: list
    records: list
    outcomes: list  # AttackOutcome or None, aligned with records
    exclusions: dict
    model_id: str
    seed: int


def _row_eps_step(cfg: AttackConfig, model: M.MalConvModel) -> float | None:
    if cfg.kind not in _GRADIENT_KINDS:
        return None
    return cfg.eps_step if cfg.eps_step is not None else default_eps_step(model)


def run_attack_suite(
    model: M.MalConvModel,
    samples,
    entries,
    candidates: CandidateSet,
    grid,
    seed: int = 0,
    jobs: int = 1,
) -> EvalReport:
    """Run every grid cell against every candidate.

    Rows are emitted only for cells where at least one candidate was
    attackable; exclusions are tallied per reason either way. The donor
    pool for benign appends is the correctly-classified benign test split.
    ``jobs`` selects thread-pool width and never changes the result.
    """
    if len(candidates) == 0:
        raise EmptyCandidatesError("attack suite needs at least one candidate")
    donor_pool = benign_donor_pool(model, samples, entries)
    if any(cfg.kind == "benign_append" for cfg in grid) and not donor_pool:
        raise NoDonorError(
            "grid includes benign_append but no benign test file is classified correctly"
        )

    tasks = [
        (cell, cfg, cand)
        for cell, cfg in enumerate(grid)
        for cand in candidates
    ]

    def run_one(task):
        cell, cfg, cand = task
        rng = np.random.default_rng((seed, cell, cand.manifest_index))
        data = samples[cand.manifest_index]
        base = dict(
            cell=cell,
            attack=cfg.kind,
            budget=cfg.num_bytes,
            eps_step=_row_eps_step(cfg, model),
            eps_ball=cfg.eps_ball,
            candidate_index=cand.manifest_index,
            path=cand.path,
        )
        try:
            out = run_attack(model, data, cfg, rng, benign_pool=donor_pool)
        except NotAttackableError:
            return OutcomeRecord(status="too-large", **base), None
        except NoSlackError:
            return OutcomeRecord(status="no-slack", **base), None
        except PEParseError:
            return OutcomeRecord(status="parse-error", **base), None
        record = OutcomeRecord(
            status="ok",
            evaded=out.evaded,
            score_before=out.score_before,
            score_after=out.score_after,
            gradient_evals=out.gradient_evals,
            iterations=out.iterations,
            modified_bytes=int(out.modified_indices.size),
            clipped=out.clipped,
            oscillation_period=out.oscillation_period,
            output_digest=bytes_digest(out.adversarial_bytes),
            **base,
        )
        return record, out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(t) for t in tasks]

    order = sorted(range(len(tasks)), key=lambda i: (tasks[i][0], tasks[i][2].manifest_index))
    records = [results[i][0] for i in order]
    outcomes = [results[i][1] for i in order]

    model_id = model.digest()
    rows = []
    exclusions = {reason: 0 for reason in EXCLUSION_REASONS}
    for cell, cfg in enumerate(grid):
        cell_records = [r for r in records if r.cell == cell]
        ok = [r for r in cell_records if r.status == "ok"]
        for r in cell_records:
            if r.status != "ok":
                exclusions[r.status] += 1
        if not ok:
            continue
        n_success = sum(r.evaded for r in ok)
        rows.append(
            ReportRow(
                cell=cell,
                attack=cfg.kind,
                budget=cfg.num_bytes,
                eps_step=_row_eps_step(cfg, model),
                eps_ball=cfg.eps_ball,
                n_candidates=len(ok),
                n_success=n_success,
                success_rate=n_success / len(ok),
                mean_modified_bytes=float(np.mean([r.modified_bytes for r in ok])),
                mean_gradient_evals=float(np.mean([r.gradient_evals for r in ok])),
                model_id=model_id,
                seed=seed,
                n_excluded=len(cell_records) - len(ok),
            )
        )
    return EvalReport(
        grid=list(grid),
        rows=rows,
        records=records,
        outcomes=outcomes,
        exclusions=exclusions,
        model_id=model_id,
        seed=seed,
    )


@dataclass(frozen=True)
class PoolingReport:
    """Where per-filter maxima land relative to where file content lives."""

    num_windows: int
    num_filters: int
    n_files: int
    argmax_cdf: np.ndarray
    size_cdf: np.ndarray
    mean_distinct_windows: float
    max_distinct_windows: int
    quarter_prefix_argmax: float
    quarter_prefix_size: float


def pooling_cdf(model: M.MalConvModel, samples) -> PoolingReport:
    """CDFs over window positions of (a) per-filter argmax locations across
    all files and filters, and (b) the window where each file's content ends.

    The gap between the two at a fixed prefix measures how much the pooled
    representation concentrates on early input relative to raw file length.
    """
    if len(samples) < 2:
        raise EmptyDatasetError("pooling analysis needs at least two samples")
    h = model.hyper
    argmax_counts = np.zeros(h.num_windows, dtype=np.int64)
    size_counts = np.zeros(h.num_windows, dtype=np.int64)
    distinct = []
    for data in samples:
        tokens = M.tokenize(data, h)
        idx = M.maxpool_argmax(M.embed(tokens, model), model)
        np.add.at(argmax_counts, idx, 1)
        distinct.append(len(set(idx.tolist())))
        end_window = min(-(-min(len(data), h.max_len) // h.stride), h.num_windows) - 1
        size_counts[max(end_window, 0)] += 1
    argmax_cdf = np.cumsum(argmax_counts) / argmax_counts.sum()
    size_cdf = np.cumsum(size_counts) / size_counts.sum()
    quarter = max(0, -(-h.num_windows // 4) - 1)
    return PoolingReport(
        num_windows=h.num_windows,
        num_filters=h.num_filters,
        n_files=len(samples),
        argmax_cdf=argmax_cdf,
        size_cdf=size_cdf,
        mean_distinct_windows=float(np.mean(distinct)),
        max_distinct_windows=int(np.max(distinct)),
        quarter_prefix_argmax=float(argmax_cdf[quarter]),
        quarter_prefix_size=float(size_cdf[quarter]),
    )


@dataclass(frozen=True)
class TransferReport:
    """Cross-model evasion outcome counts.

    Eligible candidates are those whose adversarial version evades the
    source model while the target model classifies the original correctly;
    ``rate`` is the evasion fraction among them, None when none qualify.
    """

    n_candidates: int
    n_attacked: int
    n_eligible: int
    n_transferred: int
    rate: float | None


def transfer_eval(
    source: M.MalConvModel,
    target: M.MalConvModel,
    cfg: AttackConfig,
    candidates: CandidateSet,
    samples,
    entries,
    seed: int = 0,
) -> TransferReport:
    """Build adversarial versions against one model and score them on another.

    The attack runs once per candidate against the source model with a
    per-candidate generator stream. Models must share an architecture; only
    the init seed may differ. Candidates the attack cannot run on (no room,
    no slack, unparseable) are dropped from the attacked count.
    """
    if source.hyper.architecture() != target.hyper.architecture():
        raise IncompatibleModelsError(
            "transfer evaluation needs models with identical architecture"
        )
    donor_pool = benign_donor_pool(source, samples, entries) if entries is not None else []
    if cfg.kind == "benign_append" and not donor_pool:
        raise NoDonorError(
            "benign_append transfer needs a correctly-classified benign test split"
        )
    n_attacked = 0
    n_eligible = 0
    n_transferred = 0
    for cand in candidates:
        data = samples[cand.manifest_index]
        rng = np.random.default_rng((seed, cand.manifest_index))
        try:
            out = run_attack(source, data, cfg, rng, benign_pool=donor_pool)
        except (NotAttackableError, NoSlackError, PEParseError):
            continue
        n_attacked += 1
        target_correct = M.predict_score(target, data) > M.MALWARE_THRESHOLD
        if not (out.evaded and target_correct):
            continue
        n_eligible += 1
        if M.predict_score(target, out.adversarial_bytes) < M.MALWARE_THRESHOLD:
            n_transferred += 1
    rate = n_transferred / n_eligible if n_eligible else None
    return TransferReport(
        n_candidates=len(candidates),
        n_attacked=n_attacked,
        n_eligible=n_eligible,
        n_transferred=n_transferred,
        rate=rate,
    )
