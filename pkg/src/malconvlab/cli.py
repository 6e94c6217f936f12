"""Command line interface.

Subcommands cover the whole workflow: generate a corpus, train a model,
run an attack over a budget grid, analyze pooling locations, and measure
transfer between two models. Every run writes an effective-config record
next to its artifacts capturing all resolved values, so a result can be
traced back to exact settings and reproduced.

Common flags: ``--seed`` feeds every random stream, ``--config FILE``
overrides configuration defaults from a key=value file (one pair per
line), ``--out`` names the primary artifact, resolved against
``--out-dir``. Supplementary artifacts sit next to the primary one under
derived names.

Exit codes: 0 success, 1 usage error, 2 data or file error, 3 internal
error.
"""

import argparse
import dataclasses
import sys
import types
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import model as M
from .attacks import ATTACK_KINDS, AttackConfig
from .corpus import SynthConfig, generate_corpus
from .errors import MalconvLabError
from .store import (
    load_checkpoint,
    load_sample,
    load_split,
    read_manifest,
    save_checkpoint,
    write_csv_table,
    write_keyvalues,
    write_report,
)

_RESERVED_KEYS = ("seed", "vocab_size")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


@dataclass(frozen=True)
class _AttackSpec:
    """Attack-run knobs; config-file keys use these names, flags override."""

    attack: str = "fgm_append"
    budgets: tuple[int, ...] = (50, 200, 500, 1000)
    eps_step: float | None = None
    eps_ball: float | None = None
    num_iter: int = 10
    candidates: int = 400
    jobs: int = 1


@dataclass(frozen=True)
class _PoolingSpec:
    samples: int = 200


@dataclass(frozen=True)
class _TransferSpec:
    attack: str = "fgm_append"
    budget: int = 1000
    eps_step: float | None = None
    eps_ball: float | None = None
    num_iter: int = 10
    candidates: int = 100


def _coerce(value: str, ftype):
    origin = typing.get_origin(ftype)
    if origin in (types.UnionType, typing.Union):
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if value.lower() in ("none", "null"):
            return None
        return _coerce(value, args[0])
    if origin is tuple:
        elem = typing.get_args(ftype)[0]
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if not parts:
            raise _UsageError(f"expected comma-separated values, got {value!r}")
        return tuple(_coerce(p, elem) for p in parts)
    try:
        if ftype is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is bytes:
            return bytes.fromhex(value)
    except ValueError:
        raise _UsageError(f"cannot parse {value!r} as {ftype.__name__}") from None
    if ftype is str:
        return value
    raise _UsageError(f"unsupported option type {ftype!r}")


def _read_config(path) -> dict:
    """Parse a key=value file: one pair per line, blank lines and # comments
    allowed. Values stay strings until matched to a config field."""
    if path is None:
        return {}
    overrides = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise _UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
        if key in overrides:
            raise _UsageError(f"{path}:{line_no}: key {key!r} given twice")
        overrides[key] = value
    return overrides


def _apply(instance, overrides: dict):
    """Consume overrides matching the dataclass's fields; return a copy."""
    fields = {f.name: f.type for f in dataclasses.fields(instance)}
    updates = {}
    for key in list(overrides):
        if key in _RESERVED_KEYS:
            raise _UsageError(f"config key {key!r} is fixed; use --seed for seeding")
        if key in fields:
            updates[key] = _coerce(overrides.pop(key), fields[key])
    try:
        return dataclasses.replace(instance, **updates)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None


def _reject_leftovers(overrides: dict, *configs, extra=()):
    if overrides:
        allowed = sorted(
            set(extra)
            | {
                f.name
                for cfg in configs
                for f in dataclasses.fields(cfg)
                if f.name not in _RESERVED_KEYS
            }
        )
        unknown = ", ".join(sorted(overrides))
        raise _UsageError(f"unknown config keys: {unknown}; allowed: {', '.join(allowed)}")


def _override_flags(spec, args, names):
    """Explicitly passed flags win over config-file values."""
    updates = {
        name: getattr(args, name) for name in names if getattr(args, name) is not None
    }
    try:
        return dataclasses.replace(spec, **updates)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None


def _record_value(value):
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, tuple):
        return list(value)
    return value


def _config_record(command: str, seed: int, **sections) -> dict:
    record = {"command": command, "seed": seed}
    for prefix, obj in sections.items():
        if dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                if f.name == "seed":
                    continue
                record[f"{prefix}_{f.name}"] = _record_value(getattr(obj, f.name))
        else:
            record[prefix] = _record_value(obj)
    return record


def _resolve_out(args) -> Path:
    out = Path(args.out)
    if not out.is_absolute():
        out = Path(args.out_dir) / out
    return out


def _sibling(out: Path, suffix: str) -> Path:
    """Derived artifact path: report.txt -> report.<suffix> in the same dir."""
    return out.parent / f"{out.stem}.{suffix}"


def _load_corpus(manifest_path):
    root = Path(manifest_path).parent
    entries = read_manifest(manifest_path)
    samples = [load_sample(root, e) for e in entries]
    return root, entries, samples


def _accuracy(model, samples, labels) -> float:
    predicted = (M.predict_scores(model, samples) > M.MALWARE_THRESHOLD).astype(np.int64)
    return float((predicted == labels).mean())


def _attack_config(kind, *, num_bytes=0, num_iter=10, eps_step=None, eps_ball=None):
    try:
        return AttackConfig(
            kind, num_bytes=num_bytes, num_iter=num_iter, eps_step=eps_step, eps_ball=eps_ball
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from None


def _cmd_gen_corpus(args):
    overrides = _read_config(args.config)
    test_frac = _coerce(overrides.pop("test_frac", "0.2"), float)
    cfg = _apply(SynthConfig(seed=args.seed), overrides)
    _reject_leftovers(overrides, cfg, extra=("test_frac",))
    if args.count < 1:
        raise _UsageError("--count must be >= 1")
    if not 0 <= args.malware_frac <= 1:
        raise _UsageError("--malware-frac must be in [0, 1]")
    out_dir = _resolve_out(args)
    entries = generate_corpus(
        cfg, out_dir, args.count, malware_frac=args.malware_frac, test_frac=test_frac
    )
    record = _config_record(
        "gen-corpus",
        args.seed,
        corpus=cfg,
        count=args.count,
        malware_frac=args.malware_frac,
        test_frac=test_frac,
        out=str(args.out),
    )
    write_keyvalues(record, out_dir / "gen_corpus_config.txt")
    n_test = sum(e.split == "test" for e in entries)
    n_malware = sum(e.label == M.MALWARE for e in entries)
    print(
        f"wrote {len(entries)} samples ({n_malware} malware, {n_test} test) "
        f"and manifest.csv to {out_dir}"
    )
    return 0


def _cmd_train(args):
    shared = _read_config(args.config)
    hyper = _apply(M.Hyperparams(seed=args.seed), shared)
    train_cfg = _apply(M.TrainConfig(seed=args.seed + 1), shared)
    _reject_leftovers(shared, hyper, train_cfg)
    hyper_over = _read_config(args.hyper)
    hyper = _apply(hyper, hyper_over)
    _reject_leftovers(hyper_over, hyper)
    tc_over = _read_config(args.train_cfg)
    train_cfg = _apply(train_cfg, tc_over)
    _reject_leftovers(tc_over, train_cfg)

    root, entries, _ = _load_corpus(args.manifest)
    train_x, train_y, _ = load_split(root, entries, "train")
    test_x, test_y, _ = load_split(root, entries, "test")

    model = M.MalConvModel(hyper)
    history = M.train(model, train_x, train_y, train_cfg)
    out = _resolve_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    write_keyvalues(
        _config_record(
            "train",
            args.seed,
            hyper=hyper,
            train=train_cfg,
            manifest=str(args.manifest),
            out=str(args.out),
        ),
        _sibling(out, "config.txt"),
    )

    log = {"model_id": model.digest(), "n_train": len(train_x), "n_test": len(test_x)}
    for s in history:
        log[f"epoch{s.epoch:02d}_loss"] = s.loss
        log[f"epoch{s.epoch:02d}_accuracy"] = s.accuracy
    log["train_accuracy"] = _accuracy(model, train_x, train_y)
    log["test_accuracy"] = _accuracy(model, test_x, test_y) if len(test_x) else None
    write_keyvalues(log, _sibling(out, "log.txt"))
    test_s = "n/a" if log["test_accuracy"] is None else f"{log['test_accuracy']:.3f}"
    print(
        f"model {model.digest()} -> {out} "
        f"(train acc {log['train_accuracy']:.3f}, test acc {test_s})"
    )
    return 0


def _write_adversarial(out: Path, report) -> int:
    adv_dir = _sibling(out, "adversarial")
    adv_dir.mkdir(parents=True, exist_ok=True)
    index_rows = []
    written = 0
    for record, outcome in zip(report.records, report.outcomes):
        if outcome is None:
            continue
        name = f"{Path(record.path).stem}_cell{record.cell:02d}.bin"
        (adv_dir / name).write_bytes(outcome.adversarial_bytes)
        index_rows.append(
            [record.cell, record.attack, record.candidate_index, record.path, name,
             int(record.evaded)]
        )
        written += 1
    write_csv_table(
        adv_dir / "index.csv",
        ["cell", "attack", "candidate_index", "original_path", "adversarial_path", "evaded"],
        index_rows,
    )
    return written


def _cmd_attack(args):
    overrides = _read_config(args.config)
    spec = _apply(_AttackSpec(), overrides)
    _reject_leftovers(overrides, spec)
    spec = _override_flags(
        spec, args, ("attack", "budgets", "eps_step", "eps_ball", "num_iter", "candidates", "jobs")
    )
    if spec.candidates < 1:
        raise _UsageError("--candidates must be >= 1")
    if spec.jobs < 1:
        raise _UsageError("--jobs must be >= 1")

    if spec.attack == "slack_fgm":
        grid = [_attack_config("slack_fgm", eps_step=spec.eps_step, eps_ball=spec.eps_ball)]
    else:
        grid = [
            _attack_config(
                spec.attack, num_bytes=b, num_iter=spec.num_iter, eps_step=spec.eps_step
            )
            for b in spec.budgets
        ]

    model = load_checkpoint(args.ckpt)
    root, entries, samples = _load_corpus(args.manifest)
    candidates = E.select_candidates(model, samples, entries, spec.candidates, seed=args.seed)
    report = E.run_attack_suite(
        model, samples, entries, candidates, grid, seed=args.seed, jobs=spec.jobs
    )

    out = _resolve_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    write_keyvalues(
        _config_record(
            "attack",
            args.seed,
            spec=spec,
            ckpt=str(args.ckpt),
            manifest=str(args.manifest),
            out=str(args.out),
            model_id=report.model_id,
        ),
        _sibling(out, "config.txt"),
    )
    write_csv_table(
        _sibling(out, "candidates.csv"),
        ["manifest_index", "path", "size", "score"],
        [[c.manifest_index, c.path, c.size, repr(c.score)] for c in candidates],
    )
    write_csv_table(
        _sibling(out, "outcomes.csv"),
        E.OutcomeRecord.CSV_HEADER,
        [r.csv_row() for r in report.records],
    )
    n_files = _write_adversarial(out, report)

    for row in report.rows:
        knob = (
            f"budget={row.budget}"
            if row.attack != "slack_fgm"
            else f"eps_ball={'none' if row.eps_ball is None else format(row.eps_ball, '.4g')}"
        )
        print(
            f"{row.attack:16s} {knob:16s} evaded {row.n_success:4d}/{row.n_candidates:<4d} "
            f"({row.success_rate:.1%})"
        )
    excluded = sum(report.exclusions.values())
    print(f"report -> {out} ({n_files} adversarial files, {excluded} exclusions)")
    return 0


def _cmd_analyze_pooling(args):
    overrides = _read_config(args.config)
    spec = _apply(_PoolingSpec(), overrides)
    _reject_leftovers(overrides, spec)
    spec = _override_flags(spec, args, ("samples",))
    if spec.samples < 2:
        raise _UsageError("--samples must be >= 2")
    model = load_checkpoint(args.ckpt)
    root, entries, samples = _load_corpus(args.manifest)
    malware = [i for i, e in enumerate(entries) if e.split == "test" and e.label == M.MALWARE]
    if len(malware) > spec.samples:
        rng = np.random.default_rng(args.seed)
        malware = sorted(
            int(malware[j]) for j in rng.choice(len(malware), spec.samples, replace=False)
        )
    picked = [samples[i] for i in malware]
    report = E.pooling_cdf(model, picked)

    out = _resolve_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv_table(
        out,
        ["window", "argmax_cdf", "size_cdf"],
        [
            [w, repr(float(report.argmax_cdf[w])), repr(float(report.size_cdf[w]))]
            for w in range(report.num_windows)
        ],
    )
    write_keyvalues(
        _config_record(
            "analyze-pooling",
            args.seed,
            spec=spec,
            ckpt=str(args.ckpt),
            manifest=str(args.manifest),
            out=str(args.out),
        ),
        _sibling(out, "config.txt"),
    )
    write_keyvalues(
        {
            "model_id": model.digest(),
            "n_files": report.n_files,
            "num_windows": report.num_windows,
            "num_filters": report.num_filters,
            "mean_distinct_windows": report.mean_distinct_windows,
            "max_distinct_windows": report.max_distinct_windows,
            "quarter_prefix_argmax": report.quarter_prefix_argmax,
            "quarter_prefix_size": report.quarter_prefix_size,
        },
        _sibling(out, "stats.txt"),
    )
    print(
        f"{report.n_files} files, {report.num_windows} windows: "
        f"quarter-prefix argmax mass {report.quarter_prefix_argmax:.1%} "
        f"vs size mass {report.quarter_prefix_size:.1%}"
    )
    return 0


def _cmd_transfer(args):
    overrides = _read_config(args.config)
    spec = _apply(_TransferSpec(), overrides)
    _reject_leftovers(overrides, spec)
    spec = _override_flags(
        spec, args, ("attack", "budget", "eps_step", "eps_ball", "num_iter", "candidates")
    )
    cfg = _attack_config(
        spec.attack,
        num_bytes=spec.budget,
        num_iter=spec.num_iter,
        eps_step=spec.eps_step,
        eps_ball=spec.eps_ball,
    )
    source = load_checkpoint(args.source_ckpt)
    target = load_checkpoint(args.target_ckpt)
    root, entries, samples = _load_corpus(args.manifest)
    candidates = E.select_candidates(source, samples, entries, spec.candidates, seed=args.seed)
    report = E.transfer_eval(source, target, cfg, candidates, samples, entries, seed=args.seed)

    out = _resolve_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_keyvalues(
        _config_record(
            "transfer",
            args.seed,
            spec=spec,
            source_ckpt=str(args.source_ckpt),
            target_ckpt=str(args.target_ckpt),
            manifest=str(args.manifest),
            out=str(args.out),
        ),
        _sibling(out, "config.txt"),
    )
    write_keyvalues(
        {
            "source_id": source.digest(),
            "target_id": target.digest(),
            "attack": cfg.kind,
            "budget": cfg.num_bytes,
            "n_candidates": report.n_candidates,
            "n_attacked": report.n_attacked,
            "n_eligible": report.n_eligible,
            "n_transferred": report.n_transferred,
            "transfer_rate": report.rate,
        },
        out,
    )
    rate = "n/a" if report.rate is None else f"{report.rate:.1%}"
    print(
        f"transfer {source.digest()} -> {target.digest()}: "
        f"{report.n_transferred}/{report.n_eligible} eligible candidates evade the target ({rate})"
    )
    return 0


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0, help="base random seed")
    sub.add_argument("--config", metavar="FILE", help="key=value file overriding defaults")
    sub.add_argument(
        "--out-dir", default=".", help="directory relative --out paths resolve against"
    )


def _budgets_flag(value: str):
    return _coerce(value, tuple[int, ...])


def _build_parser() -> _Parser:
    parser = _Parser(prog="malconvlab", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-corpus", help="generate a synthetic PE corpus")
    gen.add_argument("--count", type=int, required=True, help="number of files")
    gen.add_argument("--malware-frac", type=float, default=0.5)
    gen.add_argument("--out", required=True, help="corpus directory")
    _add_common(gen)
    gen.set_defaults(func=_cmd_gen_corpus)

    train = commands.add_parser("train", help="train a model on a corpus")
    train.add_argument("--manifest", required=True, help="corpus manifest.csv")
    train.add_argument("--hyper", metavar="FILE", help="key=value file of architecture fields")
    train.add_argument("--train-cfg", metavar="FILE", help="key=value file of training fields")
    train.add_argument("--out", required=True, help="checkpoint path")
    _add_common(train)
    train.set_defaults(func=_cmd_train)

    attack = commands.add_parser("attack", help="run one attack kind over a budget grid")
    attack.add_argument("--ckpt", required=True, help="model checkpoint")
    attack.add_argument("--manifest", required=True, help="corpus manifest.csv")
    attack.add_argument("--attack", choices=ATTACK_KINDS, default=None)
    attack.add_argument("--budgets", type=_budgets_flag, default=None, metavar="N,N,...")
    attack.add_argument("--eps-step", type=float, default=None)
    attack.add_argument("--eps-ball", type=float, default=None)
    attack.add_argument("--num-iter", type=int, default=None)
    attack.add_argument("--candidates", type=int, default=None)
    attack.add_argument("--jobs", type=int, default=None, help="worker threads")
    attack.add_argument("--out", required=True, help="evaluation report path")
    _add_common(attack)
    attack.set_defaults(func=_cmd_attack)

    pool = commands.add_parser("analyze-pooling", help="locate max-pool winners vs file sizes")
    pool.add_argument("--ckpt", required=True, help="model checkpoint")
    pool.add_argument("--manifest", required=True, help="corpus manifest.csv")
    pool.add_argument("--samples", type=int, default=None, help="malware sample count")
    pool.add_argument("--out", required=True, help="CDF table path")
    _add_common(pool)
    pool.set_defaults(func=_cmd_analyze_pooling)

    transfer = commands.add_parser("transfer", help="attack one model, score another")
    transfer.add_argument("--source-ckpt", required=True)
    transfer.add_argument("--target-ckpt", required=True)
    transfer.add_argument("--manifest", required=True, help="corpus manifest.csv")
    transfer.add_argument("--attack", choices=ATTACK_KINDS, default=None)
    transfer.add_argument("--budget", type=int, default=None)
    transfer.add_argument("--eps-step", type=float, default=None)
    transfer.add_argument("--eps-ball", type=float, default=None)
    transfer.add_argument("--num-iter", type=int, default=None)
    transfer.add_argument("--candidates", type=int, default=None)
    transfer.add_argument("--out", required=True, help="transfer report path")
    _add_common(transfer)
    transfer.set_defaults(func=_cmd_transfer)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (MalconvLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())
