"""Acceptance gate: one test per shipping criterion, each printing a
single pass/fail line. The heavyweight training fixtures are session
scoped and built lazily, so running a single criterion only pays for
what it needs."""

import json
import math
import time
from itertools import product

import numpy as np
import pytest
from scipy.stats import binom

from conftest import ev_lab, ev_med_start, ev_med_stop, ev_stage, window
from tnli.cli import main as cli_main
from tnli.cohort import (
    DIAGNOSIS_STAGE,
    LAB_OBSERVATION,
    MEDICATION_START,
    MEDICATION_STOP,
    CohortConfig,
    generate_cohort,
)
from tnli.evaluation import (
    classification_metrics,
    ece_by_gap,
    evaluate,
    encode_records,
    expected_calibration_error,
)
from tnli.model import Encoder, ModelConfig, rope_angles, rope_rotate
from tnli.objective import (
    TrainConfig,
    batch_loss,
    lr_at,
    order_violation,
    smoothed_cross_entropy,
    train,
)
from tnli.ontology import HIGHER_HEALTHIER, lab_band
from tnli.supervision import (
    EntailmentLabel,
    PairConfig,
    build_dataset,
    label_pair,
    read_pair_file,
)
from tnli.textizer import Vocab, encode_pair, pad_batch


def check(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d} ({name}): {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared fixtures


@pytest.fixture(scope="session")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def smoke_data(work, ont):
    """2000-patient corpus with the default pair build, plus the vocab."""
    corpus = generate_cohort(CohortConfig(n_patients=2000, seed=42), ont)
    base = work / "smoke_base"
    build_dataset(corpus, PairConfig(), ont, {"train": 0.8, "valid": 0.1, "test": 0.1}, base)
    records = {
        name: read_pair_file(base / f"{name}.pairs.jsonl")
        for name in ("train", "valid", "test")
    }
    vocab = Vocab.build(
        [r.earlier_text for r in records["train"]]
        + [r.later_text for r in records["train"]]
    )
    return {"corpus": corpus, "records": records, "vocab": vocab, "dir": base}


def _fit(data, train_records, out_dir, train_cfg, model_overrides=None):
    vocab = data["vocab"]
    mcfg = ModelConfig.from_dict(
        {"vocab_size": len(vocab), **(model_overrides or {})}
    )
    tr_seqs, tr_labels = encode_records(train_records, vocab, mcfg.max_len)
    va_seqs, va_labels = encode_records(data["records"]["valid"], vocab, mcfg.max_len)
    encoder = Encoder.init(mcfg, seed=train_cfg.seed)
    t0 = time.monotonic()
    result = train(
        encoder, tr_seqs, tr_labels, va_seqs, va_labels, train_cfg, out_dir
    )
    return result, time.monotonic() - t0


@pytest.fixture(scope="session")
def smoke_run(work, smoke_data):
    """Default-config training on the smoke corpus (also the density-10
    arm of the ablation comparison)."""
    return _fit(smoke_data, smoke_data["records"]["train"], work / "smoke_run",
                TrainConfig())


@pytest.fixture(scope="session")
def density_accuracies(work, ont, smoke_data, smoke_run):
    """Validation accuracy per pairs_per_patient, all scored on the same
    base validation pairs with the same vocab."""
    result, _ = smoke_run
    accs = {10: result.final_valid["accuracy"]}
    vocab = smoke_data["vocab"]
    max_len = ModelConfig(vocab_size=len(vocab)).max_len
    va_seqs, va_labels = encode_records(
        smoke_data["records"]["valid"], vocab, max_len
    )
    for k in (1, 5):
        d = work / f"density_{k}"
        build_dataset(
            smoke_data["corpus"], PairConfig(pairs_per_patient=k), ont,
            {"train": 0.8, "valid": 0.1, "test": 0.1}, d,
        )
        train_records = read_pair_file(d / "train.pairs.jsonl")
        res, _ = _fit(smoke_data, train_records, d / "run", TrainConfig())
        rep = evaluate(res.encoder, va_seqs, va_labels)
        accs[k] = rep.metrics["accuracy"]
    return accs


@pytest.fixture(scope="session")
def order_twins(work, ont):
    """Two runs identical in every seed and schedule, differing only in
    the order-loss weight. The longer schedule gives the order term time
    to push entail pairs into full coordinate dominance."""
    corpus = generate_cohort(CohortConfig(n_patients=400, seed=11), ont)
    d = work / "twins_data"
    build_dataset(corpus, PairConfig(seed=11), ont,
                  {"train": 0.8, "valid": 0.1, "test": 0.1}, d)
    train_records = read_pair_file(d / "train.pairs.jsonl")
    valid_records = read_pair_file(d / "valid.pairs.jsonl")
    vocab = Vocab.build(
        [r.earlier_text for r in train_records]
        + [r.later_text for r in train_records]
    )
    results = {}
    for lam in (0.1, 0.0):
        mcfg = ModelConfig(vocab_size=len(vocab))
        tr_seqs, tr_labels = encode_records(train_records, vocab, mcfg.max_len)
        va_seqs, va_labels = encode_records(valid_records, vocab, mcfg.max_len)
        tcfg = TrainConfig(
            order_weight=lam, total_steps=6000, warmup_steps=100,
            log_every=200, eval_every=1000, checkpoint_every=100000, seed=0,
        )
        encoder = Encoder.init(mcfg, seed=0)
        results[lam] = train(
            encoder, tr_seqs, tr_labels, va_seqs, va_labels, tcfg,
            work / f"twin_{lam}",
        )
    return results


# ---------------------------------------------------------------------------
# Criteria


def test_criterion_01_gradient_fidelity(work):
    out = work / "gradcheck"
    t0 = time.monotonic()
    code = cli_main(["gradcheck", "--out", str(out), "--quiet"])
    elapsed = time.monotonic() - t0
    report = json.loads((out / "gradcheck_report.json").read_text())
    ok = (
        code == 0
        and report["passed"]
        and report["order_loss_active"]
        and report["max_rel_error"] < 1e-4
        and elapsed < 60.0
    )
    check(1, "gradient fidelity", ok,
          f"max rel err {report['max_rel_error']:.2e}, {elapsed:.1f}s")


def test_criterion_02_rope_algebra():
    rng = np.random.default_rng(0)
    N, dh = 10_000, 16
    q = rng.normal(size=(N, 1, 1, dh))
    k = rng.normal(size=(N, 1, 1, dh))
    m = rng.uniform(0.0, 100.0, size=(N, 1))
    n = rng.uniform(0.0, 100.0, size=(N, 1))
    s = rng.uniform(0.0, 200.0, size=(N, 1))

    def score(qp, kp):
        rq = rope_rotate(q, rope_angles(qp, dh, 10000.0))
        rk = rope_rotate(k, rope_angles(kp, dh, 10000.0))
        return (rq * rk).sum(axis=-1).ravel()

    shift_err = float(np.abs(score(m, n) - score(m + s, n + s)).max())
    rot = rope_rotate(q, rope_angles(m, dh, 10000.0))
    norm_err = float(
        np.abs(np.linalg.norm(rot, axis=-1) - np.linalg.norm(q, axis=-1)).max()
    )
    at_zero = rope_rotate(q, rope_angles(np.zeros((N, 1)), dh, 10000.0))
    identity_exact = bool(np.array_equal(at_zero, q))
    ok = shift_err < 1e-9 and norm_err < 1e-9 and identity_exact
    check(2, "rotary position algebra", ok,
          f"shift err {shift_err:.1e}, norm err {norm_err:.1e}, "
          f"pos-0 identity exact={identity_exact} over {N} samples")


def _rule_table_verdict(e_events, l_events, ont):
    """Independent brute-force rule table over window event lists."""
    def stage_ranks(events):
        out = []
        for e in events:
            if e.kind == DIAGNOSIS_STAGE:
                st = ont.stage(e.stage)
                out.append((st.condition, st.rank))
        return out

    def closing_bands(events):
        bands = {}
        for e in events:
            if e.kind == LAB_OBSERVATION:
                bands[e.lab[0]] = lab_band(ont.lab(e.lab[0]), e.lab[1])
        return bands

    ranks_e, ranks_l = stage_ranks(e_events), stage_ranks(l_events)
    bands_e, bands_l = closing_bands(e_events), closing_bands(l_events)

    reversal = any(
        rb < ra for ca, ra in ranks_e for cb, rb in ranks_l if ca == cb
    )
    progression = any(
        rb > ra for ca, ra in ranks_e for cb, rb in ranks_l if ca == cb
    )
    normalization = False
    worsening = False
    staged_conditions_e = {c for c, _ in ranks_e}
    for lab_id, bl in bands_l.items():
        if lab_id not in bands_e:
            continue
        be = bands_e[lab_id]
        lab = ont.lab(lab_id)
        if be != lab.normal_band and bl == lab.normal_band:
            normalization = True
        sicker = -1 if lab.direction == HIGHER_HEALTHIER else 1
        if lab.condition in staged_conditions_e and (bl - be) * sicker >= 1:
            worsening = True
    started = {e.medication for e in e_events if e.kind == MEDICATION_START}
    stopped = {e.medication for e in l_events if e.kind == MEDICATION_STOP}
    resolves = any(
        e.kind == DIAGNOSIS_STAGE and ont.stage(e.stage).resolves
        for e in l_events
    )
    med_resolution = bool(started & stopped) and resolves

    if reversal or normalization or med_resolution:
        return EntailmentLabel.CONTRADICT
    if progression or worsening:
        return EntailmentLabel.ENTAIL
    return EntailmentLabel.NEUTRAL


def test_criterion_03_labeler_oracle(ont):
    cases = []  # (earlier events, later events, expected or None)
    E, C, N = (EntailmentLabel.ENTAIL, EntailmentLabel.CONTRADICT,
               EntailmentLabel.NEUTRAL)

    # every ordered same-condition stage pair
    for cond in ont.conditions.values():
        for sa, sb in product(cond.stages, cond.stages):
            ra, rb = ont.stage(sa).rank, ont.stage(sb).rank
            expected = E if rb > ra else C if rb < ra else N
            cases.append(([ev_stage(0.0, sa)], [ev_stage(14.0, sb)], expected))

    # every lab band transition, bare and with the condition staged
    band_values = [10.0, 20.0, 45.0, 75.0, 95.0]
    gfr = ont.lab("gfr")
    for va, vb in product(band_values, band_values):
        ba, bb = lab_band(gfr, va), lab_band(gfr, vb)
        for staged in (False, True):
            earlier = [ev_lab(0.0, "gfr", va)]
            if staged:
                earlier.append(ev_stage(1.0, "ckd-2"))
            if ba != gfr.normal_band and bb == gfr.normal_band:
                expected = C
            elif staged and bb < ba:  # lower gfr band is sicker
                expected = E
            else:
                expected = N
            cases.append((earlier, [ev_lab(14.0, "gfr", vb)], expected))

    # every cross-condition stage pair (all cross-system in this ontology)
    for sa, sb in product(ont.stages.values(), ont.stages.values()):
        if sa.condition == sb.condition:
            continue
        cases.append(([ev_stage(0.0, sa.id)], [ev_stage(14.0, sb.id)], N))

    # the four narrative fixtures
    cases += [
        ([ev_stage(0.0, "ckd-2")], [ev_stage(14.0, "ckd-3")], E),
        (
            [ev_stage(0.0, "sepsis-active"), ev_med_start(1.0, "antibiotics")],
            [ev_med_stop(14.0, "antibiotics"), ev_stage(15.0, "sepsis-resolved")],
            C,
        ),
        ([ev_lab(0.0, "gfr", 25.0)], [ev_lab(14.0, "gfr", 95.0)], C),
        ([ev_stage(0.0, "dermatitis-1")], [ev_stage(14.0, "neuropathy-1")], N),
    ]

    mismatches = []
    for earlier_events, later_events, expected in cases:
        w_e = window(0.0, 7.0, earlier_events)
        w_l = window(14.0, 21.0, later_events)
        got, _ = label_pair(w_e, w_l, ont)
        oracle = _rule_table_verdict(earlier_events, later_events, ont)
        if got != oracle or got != expected:
            mismatches.append((earlier_events, later_events, expected, oracle, got))
    ok = not mismatches
    check(3, "labeler vs rule-table oracle", ok,
          f"{len(cases)} enumerated cases, {len(mismatches)} mismatches")


def test_criterion_04_pair_constraints(work, ont):
    corpus = generate_cohort(CohortConfig(n_patients=1000, seed=3), ont)
    cfg = PairConfig()
    d = work / "constraints"
    manifest = build_dataset(corpus, cfg, ont,
                             {"train": 0.8, "valid": 0.1, "test": 0.1}, d)
    patients = {}
    n_pairs = 0
    violations = 0
    for name in ("train", "valid", "test"):
        records = read_pair_file(d / f"{name}.pairs.jsonl")
        patients[name] = {r.patient_id for r in records}
        n_pairs += len(records)
        violations += sum(
            1 for r in records if not cfg.delta_min < r.gap_days < cfg.delta_max
        )
    disjoint = (
        not patients["train"] & patients["valid"]
        and not patients["train"] & patients["test"]
        and not patients["valid"] & patients["test"]
    )
    n_split_patients = sum(
        s["n_patients"] for s in manifest["splits"].values()
    )
    ok = violations == 0 and disjoint and n_split_patients == 1000 and n_pairs > 0
    check(4, "pair gap bounds and split disjointness", ok,
          f"{n_pairs} pairs, {violations} gap violations, disjoint={disjoint}")


def test_criterion_05_determinism(work):
    root = work / "determinism"
    cohort_dir, data_dir = root / "cohort", root / "data"
    train_dir, eval_dir = root / "train", root / "eval"
    cfg_dir = root / "cfg"
    cfg_dir.mkdir(parents=True)
    ccfg = cfg_dir / "cohort.json"
    ccfg.write_text(json.dumps({"n_patients": 20, "seed": 4}))
    tcfg = cfg_dir / "train.json"
    tcfg.write_text(json.dumps({
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ffn": 32,
                  "max_len": 128},
        "train": {"total_steps": 30, "warmup_steps": 3, "batch_size": 8,
                  "log_every": 10, "eval_every": 15, "checkpoint_every": 15,
                  "peak_lr": 1e-3},
    }))

    def digests(out_dir):
        return json.loads((out_dir / "run_manifest.json").read_text())["outputs"]

    mismatched = []
    commands = [
        ("cohort-gen", ["cohort-gen", "--config", str(ccfg),
                        "--out", str(cohort_dir), "--quiet"], cohort_dir),
        ("pairs-build", ["pairs-build", "--corpus", str(cohort_dir / "corpus.jsonl"),
                         "--out", str(data_dir), "--quiet"], data_dir),
        ("train", ["train", "--config", str(tcfg), "--data", str(data_dir),
                   "--out", str(train_dir), "--quiet"], train_dir),
        ("eval", ["eval", "--checkpoint", str(train_dir / "checkpoint_final.bin"),
                  "--data", str(data_dir), "--split", "test",
                  "--out", str(eval_dir), "--quiet"], eval_dir),
    ]
    for name, argv, out_dir in commands:
        assert cli_main(list(argv)) == 0, f"{name} first run failed"
        first = digests(out_dir)
        assert cli_main(list(argv)) == 0, f"{name} rerun failed"
        if digests(out_dir) != first:
            mismatched.append(name)
    ok = not mismatched
    check(5, "rerun determinism", ok,
          "all four command reruns byte-identical" if ok
          else f"digest drift in: {mismatched}")


def test_criterion_06_loss_hand_cases():
    failures = []

    def expect(tag, got, want, tol):
        if abs(got - want) > tol:
            failures.append(f"{tag}: {got!r} != {want!r}")

    # uniform logits cost ln 3 regardless of smoothing
    for eps in (0.0, 0.1, 0.37):
        loss, _ = smoothed_cross_entropy(np.zeros((1, 3)), np.array([1]), eps)
        expect(f"uniform eps={eps}", loss, math.log(3.0), 1e-9)

    # known distribution, no smoothing
    logits = np.log(np.array([[0.7, 0.2, 0.1]]))
    loss, _ = smoothed_cross_entropy(logits, np.array([0]), 0.0)
    expect("p=0.7 case", loss, -math.log(0.7), 1e-9)

    # zero smoothing must equal plain cross-entropy
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 3))
    y = rng.integers(0, 3, size=8)
    loss, _ = smoothed_cross_entropy(z, y, 0.0)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expect("plain CE equality", loss, float(-logp[np.arange(8), y].mean()), 1e-12)

    # order penalty per-pair cases
    def order_one(u_e, u_l):
        loss, _, _, _ = order_violation(
            np.array([u_e]), np.array([u_l]), np.array([True])
        )
        return loss

    expect("dominated pair", order_one([0.2, 0.5], [0.3, 0.7]), 0.0, 1e-12)
    expect("unit violation", order_one([1.0, 0.0], [0.0, 1.0]), 1.0, 1e-9)
    expect("boundary equality", order_one([0.4, 0.4], [0.4, 0.4]), 0.0, 1e-12)

    # composition gates: lambda 0, dominated entail, and contradict label
    vocab = Vocab.build(["a b c d"])
    seqs = [encode_pair("a b", "c d", 5.0, vocab, 16)]
    ids, marks, gaps = pad_batch(seqs, 16)
    enc = Encoder.init(
        ModelConfig(vocab_size=len(vocab), n_layers=1, d_model=8, n_heads=2,
                    d_ffn=16, max_len=16),
        seed=0,
    )
    res = batch_loss(enc, ids, marks, gaps, np.array([0]),
                     TrainConfig(order_weight=0.0), want_grads=False)
    expect("lambda=0 equals base", res.total_loss, res.ce_loss, 1e-12)
    res = batch_loss(enc, ids, marks, gaps, np.array([1]),
                     TrainConfig(order_weight=5.0), want_grads=False)
    expect("contradict gated off", res.total_loss, res.ce_loss, 1e-12)

    # schedule endpoints
    expect("lr at step 0", lr_at(0, 3e-3, 100, 2000), 0.0, 1e-12)
    expect("lr at warmup", lr_at(100, 3e-3, 100, 2000), 3e-3, 1e-12)
    expect("lr at end", lr_at(2000, 3e-3, 100, 2000), 0.0, 1e-12)

    ok = not failures
    check(6, "loss and schedule hand cases", ok,
          "all tagged examples reproduced" if ok else "; ".join(failures))


def test_criterion_07_training_smoke(smoke_run):
    result, elapsed = smoke_run
    acc = result.final_valid["accuracy"]
    ok = acc >= 0.90 and result.final_step <= 2000 and elapsed < 600.0
    check(7, "training smoke", ok,
          f"valid accuracy {acc:.4f} at step {result.final_step} "
          f"in {elapsed / 60:.1f} min")


def test_criterion_08_order_loss_effect(order_twins):
    rate_on = order_twins[0.1].final_valid["violation_rate"]
    rate_off = order_twins[0.0].final_valid["violation_rate"]
    ok = (
        rate_on is not None and rate_off is not None and rate_on < rate_off
    )
    check(8, "order-loss violation effect", ok,
          f"violation rate {rate_on} with order loss vs {rate_off} without")


def test_criterion_09_ablation_directionality(density_accuracies):
    a1, a5, a10 = (density_accuracies[k] for k in (1, 5, 10))
    ok = a1 <= a5 <= a10
    check(9, "pair-density directionality", ok,
          f"valid accuracy {a1:.4f} <= {a5:.4f} <= {a10:.4f} "
          "for 1/5/10 pairs per patient" if ok else
          f"valid accuracy not monotone: {a1:.4f}, {a5:.4f}, {a10:.4f}")


def test_criterion_10_ece_oracle():
    failures = []

    # two-sample hand fixture
    got = expected_calibration_error(np.array([0.9, 0.6]), np.array([1.0, 0.0]))
    if abs(got - 0.35) > 1e-12:
        failures.append(f"hand fixture {got!r}")

    # 100-sample randomized fixture against a linear-scan brute force
    rng = np.random.default_rng(12345)
    conf = rng.uniform(1 / 3, 1.0, size=100)
    correct = (rng.random(100) < conf).astype(float)

    brute = 0.0
    for b in range(10):
        lo, hi = b / 10, (b + 1) / 10
        if b < 9:
            members = [i for i in range(100) if lo <= conf[i] < hi]
        else:
            members = [i for i in range(100) if lo <= conf[i] <= 1.0]
        if members:
            acc = sum(correct[i] for i in members) / len(members)
            avg = sum(conf[i] for i in members) / len(members)
            brute += (len(members) / 100) * abs(acc - avg)
    got = expected_calibration_error(conf, correct)
    if abs(got - brute) > 1e-12:
        failures.append(f"randomized {got!r} vs brute {brute!r}")

    # bucket counts partition the sample
    gaps = np.concatenate([rng.uniform(0.0, 40.0, size=100),
                           np.array([1.0, 3.0, 7.0, 14.0, 30.0])])
    conf2 = rng.uniform(1 / 3, 1.0, size=len(gaps))
    correct2 = (rng.random(len(gaps)) < conf2).astype(float)
    buckets = ece_by_gap(conf2, correct2, gaps)
    if sum(v["n"] for v in buckets.values()) != len(gaps):
        failures.append("bucket counts do not sum to n")

    ok = not failures
    check(10, "calibration oracle", ok,
          "hand fixture 0.35, brute-force match, buckets partition" if ok
          else "; ".join(failures))


def test_criterion_11_metric_oracle(smoke_data):
    failures = []

    # 9-sample fixture against plain-loop precision/recall and a
    # centered-indicator covariance MCC
    y_true = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    y_pred = [0, 1, 0, 1, 2, 2, 2, 0, 2]
    m = classification_metrics(np.array(y_true), np.array(y_pred))
    f1s = []
    for c in range(3):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    macro = sum(f1s) / 3
    X = np.eye(3)[y_pred]
    Y = np.eye(3)[y_true]

    def cov(A, B):
        return sum(
            float((A[:, j] - A[:, j].mean()) @ (B[:, j] - B[:, j].mean()))
            for j in range(3)
        )

    mcc = cov(X, Y) / math.sqrt(cov(X, X) * cov(Y, Y))
    if abs(m["macro_f1"] - macro) > 1e-12:
        failures.append(f"macro_f1 {m['macro_f1']!r} vs {macro!r}")
    if abs(m["mcc"] - mcc) > 1e-12:
        failures.append(f"mcc {m['mcc']!r} vs {mcc!r}")

    # untrained model on a balanced set stays near chance
    per_class = 100
    records = []
    for label in EntailmentLabel:
        pool = [r for r in smoke_data["records"]["train"] if r.label == label]
        records.extend(pool[:per_class])
    assert len(records) == 3 * per_class
    vocab = smoke_data["vocab"]
    mcfg = ModelConfig(vocab_size=len(vocab))
    enc = Encoder.init(mcfg, seed=999)
    seqs, labels = encode_records(records, vocab, mcfg.max_len)
    rep = evaluate(enc, seqs, labels)
    hits = int(round(rep.metrics["accuracy"] * len(records)))
    lo, hi = binom.interval(0.99, len(records), 1 / 3)
    if not lo <= hits <= hi:
        failures.append(
            f"untrained hits {hits} outside binomial 99% interval [{lo}, {hi}]"
        )

    ok = not failures
    detail = (
        f"fixture metrics to 1e-12; untrained accuracy "
        f"{rep.metrics['accuracy']:.3f} within [{lo / len(records):.3f}, "
        f"{hi / len(records):.3f}]"
    )
    check(11, "metric oracle and chance floor", ok,
          detail if ok else "; ".join(failures))
