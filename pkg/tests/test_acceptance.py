"""End-to-end acceptance gate over the full pipeline.

Ten numbered checks: gradient fidelity, byte-space mapping, slack ground
truth, output integrity, attack effectiveness versus the random baseline,
gradient-call accounting, pooling geometry, bit-exact reproducibility and
cross-model transfer. Each check appends one "criterion NN name: PASS/FAIL"
line that conftest echoes in the terminal summary.

The pipeline (corpus, two sibling models, candidate set, 17-cell suite) is
built once per session. The corpus plants benign evidence only, so a model
must learn to lower its score on benign motifs; that is the pathway the
append and slack attacks exploit. The gradient step is four embedding
standard deviations: one standard deviation lands back on the nearest
original byte after remapping, so single-step attacks need the extra reach.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import pytest

import conftest
import malconvlab as ml

CORPUS_CFG = ml.SynthConfig(malicious_density=0.0, seed=11)
CORPUS_COUNT = 5000
TEST_FRAC = 0.5
TRAIN_CFG = ml.TrainConfig(learning_rate=0.003, epochs=10, seed=1)
CAND_COUNT = 400
CAND_SEED = 5
SUITE_SEED = 7
SUITE_JOBS = 4
TRANSFER_BUDGET = 1000
TRANSFER_COUNT = 100
TRANSFER_SEED = 9
EPS_FACTOR = 4.0

APPEND_KINDS = ("random_append", "benign_append", "fgm_append", "gradient_append")


def _verdict(num: int, name: str, status: str) -> None:
    line = f"criterion {num:02d} {name}: {status}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


@contextmanager
def criterion(num: int, name: str):
    try:
        yield
    except BaseException:
        _verdict(num, name, "FAIL")
        raise
    _verdict(num, name, "PASS")


def train_split(entries, samples):
    idx = [i for i, e in enumerate(entries) if e.split == "train"]
    return [samples[i] for i in idx], [entries[i].label for i in idx]


def accuracy(model, samples, labels):
    scores = ml.predict_scores(model, samples)
    return float(np.mean((scores > ml.MALWARE_THRESHOLD) == np.asarray(labels, dtype=bool)))


@pytest.fixture(scope="session")
def acc(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")

    t0 = time.monotonic()
    entries = ml.generate_corpus(CORPUS_CFG, root / "corpus", CORPUS_COUNT, test_frac=TEST_FRAC)
    samples = [ml.load_sample(root / "corpus", e) for e in entries]
    t_corpus = time.monotonic() - t0

    tr_samples, tr_labels = train_split(entries, samples)
    t0 = time.monotonic()
    model_a = ml.MalConvModel(ml.Hyperparams(seed=0))
    ml.train(model_a, tr_samples, tr_labels, TRAIN_CFG)
    t_train = time.monotonic() - t0
    model_b = ml.MalConvModel(ml.Hyperparams(seed=3))
    ml.train(model_b, tr_samples, tr_labels, TRAIN_CFG)

    eps_step = EPS_FACTOR * ml.default_eps_step(model_a)
    candidates = ml.select_candidates(model_a, samples, entries, count=CAND_COUNT, seed=CAND_SEED)
    grid = ml.default_grid(model_a, eps_step=eps_step)
    t0 = time.monotonic()
    report = ml.run_attack_suite(
        model_a, samples, entries, candidates, grid, seed=SUITE_SEED, jobs=SUITE_JOBS
    )
    t_suite = time.monotonic() - t0

    return SimpleNamespace(
        root=root,
        entries=entries,
        samples=samples,
        model_a=model_a,
        model_b=model_b,
        eps_step=eps_step,
        candidates=candidates,
        grid=grid,
        report=report,
        t_corpus=t_corpus,
        t_train=t_train,
        t_suite=t_suite,
    )


def rows_by_attack(report, kind):
    return sorted((r for r in report.rows if r.attack == kind), key=lambda r: r.budget)


class TestCriteria:
    def test_c01_gradient_matches_finite_differences(self):
        # The loss is only piecewise differentiable: identical all-padding
        # windows tie in the max-pool, and a finite bump flips the election,
        # so the two-sided difference is checked only at cells where the
        # election stays put under the probe step.
        with criterion(1, "gradient fidelity"):
            t0 = time.monotonic()
            h = 1e-3
            worst = 0.0
            checked = 0
            for seed in range(5):
                hyper = ml.Hyperparams(
                    max_len=260, embed_dim=5, kernel_size=20, num_filters=9,
                    hidden_units=6, seed=seed,
                )
                model = ml.MalConvModel(hyper)
                rng = np.random.default_rng(100 + seed)
                data = rng.integers(0, 256, size=int(rng.integers(120, 261)), dtype=np.uint8)
                e = ml.embed(ml.tokenize(data.tobytes(), hyper), model)
                label = seed % 2
                grad = ml.input_gradient(e, label, model)
                winners = ml.maxpool_argmax(e, model)
                pos = rng.integers(0, e.shape[0], size=50)
                dim = rng.integers(0, e.shape[1], size=50)
                for p, d in zip(pos, dim):
                    bumped = e.copy()
                    bumped[p, d] += h
                    up = ml.classification_loss(bumped, label, model)
                    stable = np.array_equal(ml.maxpool_argmax(bumped, model), winners)
                    bumped[p, d] -= 2 * h
                    down = ml.classification_loss(bumped, label, model)
                    stable &= np.array_equal(ml.maxpool_argmax(bumped, model), winners)
                    if not stable:
                        continue
                    fd = (up - down) / (2 * h)
                    a = grad[p, d]
                    scale = max(abs(a), abs(fd))
                    checked += 1
                    if scale < 1e-9:
                        # both sides at the finite-difference noise floor
                        continue
                    worst = max(worst, abs(a - fd) / scale)
            assert checked >= 240, f"only {checked} of 250 cells were smooth"
            assert worst <= 1e-4, f"worst relative error {worst:.3e}"
            assert time.monotonic() - t0 < 60

    def test_c02_byte_mapping_matches_exhaustive_scan(self):
        with criterion(2, "byte-space mapping"):
            t0 = time.monotonic()
            model = ml.MalConvModel(ml.Hyperparams(seed=7))
            emb = model.embedding.astype(np.float64)
            rng = np.random.default_rng(200)
            vectors = rng.normal(0.0, 0.05, size=(1000, emb.shape[1]))
            mapped = [ml.embedding_mapping(v, emb) for v in vectors]
            dists = ((vectors[:, None, :] - emb[None, :256, :]) ** 2).sum(axis=2)
            assert np.array_equal(mapped, dists.argmin(axis=1))
            for byte in range(256):
                assert ml.embedding_mapping(emb[byte], emb) == byte
            assert 0 <= ml.embedding_mapping(emb[ml.PADDING_TOKEN], emb) <= 255
            assert all(0 <= b <= 255 for b in mapped)
            assert time.monotonic() - t0 < 60

    def test_c03_slack_matches_generator_ground_truth(self):
        with criterion(3, "slack ground truth"):
            t0 = time.monotonic()
            cfg = ml.SynthConfig()
            for i in range(1000):
                rng = np.random.default_rng(3000 + i)
                data, truth = ml.generate_synthetic_pe(cfg, i % 2, rng)
                got = [
                    {"section": r.section, "start": r.start, "length": r.length}
                    for r in ml.slack_regions(ml.parse_pe(data))
                ]
                assert got == truth.slack
                for sec, region in zip(
                    (s for s in truth.sections if s["raw_size"] > s["virtual_size"]), got
                ):
                    assert region["start"] == sec["raw_address"] + sec["virtual_size"]
                    assert region["length"] == sec["raw_size"] - sec["virtual_size"]
            assert time.monotonic() - t0 < 60

    def test_c04_outputs_keep_structure_intact(self, acc):
        with criterion(4, "output integrity"):
            checked = 0
            violations = []
            for rec, out in zip(acc.report.records, acc.report.outcomes):
                if rec.status != "ok":
                    continue
                checked += 1
                original = acc.samples[rec.candidate_index]
                adv = out.adversarial_bytes
                try:
                    adv_pe = ml.parse_pe(adv)
                except ml.PEParseError:
                    violations.append((rec.cell, rec.path, "unparseable output"))
                    continue
                if rec.attack in APPEND_KINDS:
                    if adv[: len(original)] != original:
                        violations.append((rec.cell, rec.path, "prefix changed"))
                    if len(adv) != len(original) + len(out.modified_indices):
                        violations.append((rec.cell, rec.path, "length off"))
                else:
                    orig_pe = ml.parse_pe(original)
                    diff = np.flatnonzero(
                        np.frombuffer(original, dtype=np.uint8)
                        != np.frombuffer(adv, dtype=np.uint8)
                    )
                    allowed = ml.slack_indices(orig_pe)
                    if not np.isin(diff, allowed).all():
                        violations.append((rec.cell, rec.path, "edit outside slack"))
                    if adv_pe.section_table_bytes() != orig_pe.section_table_bytes():
                        violations.append((rec.cell, rec.path, "section table changed"))
            assert checked >= 4000
            assert violations == [], violations[:5]

    def test_c05_random_baseline_stays_flat(self, acc):
        with criterion(5, "random-append baseline"):
            assert len(acc.entries) >= 2000
            tr_samples, tr_labels = train_split(acc.entries, acc.samples)
            assert accuracy(acc.model_a, tr_samples, tr_labels) >= 0.95
            random_rows = rows_by_attack(acc.report, "random_append")
            assert [r.budget for r in random_rows] == [50, 200, 500, 1000]
            assert len(acc.candidates) == CAND_COUNT
            for row in random_rows:
                assert row.success_rate <= 0.02, (row.budget, row.success_rate)
            assert acc.t_corpus + acc.t_train + acc.t_suite < 600

    def test_c06_gradient_append_beats_random(self, acc):
        with criterion(6, "gradient append vs random"):
            fgm_rows = rows_by_attack(acc.report, "fgm_append")
            random_rows = rows_by_attack(acc.report, "random_append")
            assert [r.budget for r in fgm_rows] == [50, 200, 500, 1000]
            gap = fgm_rows[-1].success_rate - random_rows[-1].success_rate
            assert gap >= 0.20, f"gap at 1000 bytes only {gap:.3f}"
            rates = [r.success_rate for r in fgm_rows]
            for lo, hi in zip(rates, rates[1:]):
                assert hi >= lo - 0.05, f"rate dropped {lo:.3f} -> {hi:.3f}"
            assert acc.t_corpus + acc.t_train + acc.t_suite < 900

    def test_c07_gradient_call_accounting(self, acc):
        with criterion(7, "gradient-call accounting"):
            for rec in acc.report.records:
                if rec.status != "ok":
                    continue
                if rec.attack in ("fgm_append", "slack_fgm"):
                    assert rec.gradient_evals == 1, (rec.attack, rec.gradient_evals)
                elif rec.attack == "gradient_append":
                    cfg = acc.grid[rec.cell]
                    assert rec.gradient_evals <= cfg.num_bytes * cfg.num_iter
                    assert rec.gradient_evals == rec.iterations
                else:
                    assert rec.gradient_evals == 0, (rec.attack, rec.gradient_evals)

    def test_c08_pooling_geometry(self, acc):
        with criterion(8, "pooling geometry"):
            malware = [
                acc.samples[i]
                for i, e in enumerate(acc.entries)
                if e.split == "test" and e.label == ml.MALWARE
            ][:200]
            assert len(malware) == 200
            rep = ml.pooling_cdf(acc.model_a, malware)
            assert rep.max_distinct_windows <= acc.model_a.hyper.num_filters
            for cdf in (rep.argmax_cdf, rep.size_cdf):
                assert np.all(np.diff(cdf) >= -1e-12)
                assert cdf[-1] == pytest.approx(1.0)

    def test_c09_pipeline_reproducibility(self, acc):
        with criterion(9, "bit-exact reruns"):
            root = acc.root
            ml.generate_corpus(CORPUS_CFG, root / "corpus2", CORPUS_COUNT, test_frac=TEST_FRAC)
            first = (root / "corpus" / "manifest.csv").read_bytes()
            second = (root / "corpus2" / "manifest.csv").read_bytes()
            assert first == second

            tr_samples, tr_labels = train_split(acc.entries, acc.samples)
            retrained = ml.MalConvModel(ml.Hyperparams(seed=0))
            ml.train(retrained, tr_samples, tr_labels, TRAIN_CFG)
            ml.save_checkpoint(acc.model_a, root / "a.ckpt")
            ml.save_checkpoint(retrained, root / "a2.ckpt")
            assert (root / "a.ckpt").read_bytes() == (root / "a2.ckpt").read_bytes()

            rerun = ml.run_attack_suite(
                acc.model_a, acc.samples, acc.entries, acc.candidates, acc.grid,
                seed=SUITE_SEED, jobs=SUITE_JOBS,
            )
            ml.write_report(acc.report, root / "report.csv")
            ml.write_report(rerun, root / "report2.csv")
            assert (root / "report.csv").read_bytes() == (root / "report2.csv").read_bytes()
            assert [r.output_digest for r in rerun.records] == [
                r.output_digest for r in acc.report.records
            ]

    def test_c10_transfer(self, acc):
        with criterion(10, "cross-model transfer"):
            cfg = ml.AttackConfig(
                "fgm_append", num_bytes=TRANSFER_BUDGET, eps_step=acc.eps_step
            )
            cands = ml.select_candidates(
                acc.model_a, acc.samples, acc.entries, count=TRANSFER_COUNT, seed=TRANSFER_SEED
            )
            self_rep = ml.transfer_eval(
                acc.model_a, acc.model_a, cfg, cands, acc.samples, acc.entries,
                seed=TRANSFER_SEED,
            )
            assert self_rep.n_eligible > 0
            assert self_rep.rate == 1.0

            blind = ml.MalConvModel(ml.Hyperparams(seed=0))
            blind.fc_out_w[:] = 0.0
            blind.fc_out_b[:] = -3.0
            blind_rep = ml.transfer_eval(
                acc.model_a, blind, cfg, cands, acc.samples, acc.entries, seed=TRANSFER_SEED
            )
            assert blind_rep.n_eligible == 0
            assert blind_rep.rate is None

            cross = ml.transfer_eval(
                acc.model_a, acc.model_b, cfg, cands, acc.samples, acc.entries,
                seed=TRANSFER_SEED,
            )
            assert 0 <= cross.n_transferred <= cross.n_eligible <= cross.n_attacked
            assert cross.n_attacked <= cross.n_candidates == len(cands)
            out = acc.root / "transfer.txt"
            ml.write_keyvalues(
                {
                    "source_id": acc.model_a.digest(),
                    "target_id": acc.model_b.digest(),
                    "n_candidates": cross.n_candidates,
                    "n_attacked": cross.n_attacked,
                    "n_eligible": cross.n_eligible,
                    "n_transferred": cross.n_transferred,
                    "transfer_rate": cross.rate,
                },
                out,
            )
            back = ml.read_keyvalues(out)
            assert back["n_eligible"] == cross.n_eligible
            assert back["source_id"] != back["target_id"]
