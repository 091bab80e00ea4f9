"""Command-line entry points.

Subcommands cover the full pipeline: ontology validation, synthetic
cohort generation, pair building, training, evaluation, the gradient
check, and the ablation sweep. Every run that writes files also writes a
``run_manifest.json`` recording the resolved configuration, input
digests, and output digests.

Exit codes: 0 success; 1 configuration or validation problem; 2 missing
or malformed files; 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .cohort import (
    CohortConfig,
    generate_cohort,
    read_corpus,
    validate_against_ontology,
    write_corpus,
)
from .errors import (
    CheckpointError,
    ConfigError,
    CorpusError,
    NumericalError,
    OntologyError,
    TnliError,
)
from .evaluation import encode_records, evaluate, run_ablation
from .model import Encoder, ModelConfig, load_checkpoint
from .objective import AdamW, TrainConfig, gradient_check, train
from .ontology import load_ontology, load_seed_ontology
from .supervision import PairConfig, build_dataset, read_pair_file
from .textizer import Vocab

_DEFAULT_SPLITS = {"train": 0.8, "valid": 0.1, "test": 0.1}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return d


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("TNLI_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set TNLI_OUT")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _ontology(args):
    if getattr(args, "ontology", None):
        return load_ontology(args.ontology)
    return load_seed_ontology()


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    seed: int | None,
    inputs: dict[str, Path],
    outputs: list[Path],
    started: str,
) -> None:
    manifest = {
        "tool": "tnli",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {name: _sha256(p) for name, p in inputs.items() if p.exists()},
        "outputs": {
            p.name: _sha256(p) for p in sorted(outputs, key=lambda q: q.name) if p.exists()
        },
        "started_at": started,
        "finished_at": _now(),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_ontology_validate(args) -> int:
    ont = _ontology(args)
    if not args.quiet:
        print(f"ontology {ont.version}: "
              f"{len(ont.organ_systems)} systems, {len(ont.conditions)} conditions, "
              f"{len(ont.stages)} stages, {len(ont.labs)} labs")
        print("ok")
    return 0


def _cmd_cohort_gen(args) -> int:
    started = _now()
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = CohortConfig.from_dict(raw)
    ont = _ontology(args)
    out_dir = _out_dir(args)
    corpus = generate_cohort(cfg, ont)
    for tl in corpus:
        validate_against_ontology(tl, ont)
    corpus_path = out_dir / "corpus.jsonl"
    write_corpus(corpus, corpus_path)
    _write_manifest(
        out_dir, "cohort-gen", cfg.to_dict(), cfg.seed,
        inputs={"ontology": Path(args.ontology)} if args.ontology else {},
        outputs=[corpus_path], started=started,
    )
    if not args.quiet:
        n_events = sum(len(tl.events) for tl in corpus)
        print(f"wrote {len(corpus)} patients ({n_events} events) to {corpus_path}")
    return 0


def _cmd_pairs_build(args) -> int:
    started = _now()
    raw = _load_config(args.config)
    splits = raw.pop("splits", None) or dict(_DEFAULT_SPLITS)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = PairConfig.from_dict(raw)
    ont = _ontology(args)
    out_dir = _out_dir(args)
    corpus = read_corpus(args.corpus)
    manifest = build_dataset(corpus, cfg, ont, splits, out_dir)
    train_records = read_pair_file(out_dir / "train.pairs.jsonl")
    vocab = Vocab.build(
        [r.earlier_text for r in train_records] + [r.later_text for r in train_records]
    )
    vocab_path = out_dir / "vocab.txt"
    vocab.save(vocab_path)
    outputs = [out_dir / f"{s}.pairs.jsonl" for s in ("train", "valid", "test")]
    outputs += [out_dir / "dataset_manifest.json", vocab_path]
    _write_manifest(
        out_dir, "pairs-build", {**cfg.to_dict(), "splits": splits}, cfg.seed,
        inputs={"corpus": Path(args.corpus)}, outputs=outputs, started=started,
    )
    n_total = sum(st["n_pairs"] for st in manifest["splits"].values())
    if n_total == 0:
        print(
            "warning: gap bounds excluded every candidate pair; "
            "pair files are empty",
            file=sys.stderr,
        )
    if not args.quiet:
        for name, st in manifest["splits"].items():
            print(f"{name}: {st['n_pairs']} pairs over {st['n_patients']} patients "
                  f"{st['class_histogram']}")
        print(f"vocab: {len(vocab)} tokens")
    return 0


def _cmd_train(args) -> int:
    started = _now()
    raw = _load_config(args.config)
    model_raw = raw.get("model", {})
    train_raw = raw.get("train", {})
    if args.seed is not None:
        train_raw["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_raw)
    out_dir = _out_dir(args)
    data_dir = Path(args.data)

    vocab = Vocab.load(data_dir / "vocab.txt")
    train_records = read_pair_file(data_dir / "train.pairs.jsonl")
    valid_path = data_dir / "valid.pairs.jsonl"
    valid_records = read_pair_file(valid_path) if valid_path.exists() else []

    opt = None
    start_step = 0
    if args.resume:
        ckpt = out_dir / "checkpoint_last.bin"
        mcfg, params, extra = load_checkpoint(ckpt)
        encoder = Encoder(mcfg, params)
        opt = AdamW(params, tcfg)
        opt.load_state(extra)
        start_step = int(extra["train_step"])
        if not args.quiet:
            print(f"resuming from {ckpt} at step {start_step}")
    else:
        mcfg = ModelConfig.from_dict({**model_raw, "vocab_size": len(vocab)})
        encoder = Encoder.init(mcfg, seed=tcfg.seed)

    tr_seqs, tr_labels = encode_records(train_records, vocab, encoder.cfg.max_len)
    va_seqs, va_labels = encode_records(valid_records, vocab, encoder.cfg.max_len)
    result = train(
        encoder, tr_seqs, tr_labels, va_seqs, va_labels, tcfg, out_dir,
        opt=opt, start_step=start_step, quiet=args.quiet,
    )
    outputs = sorted(out_dir.glob("checkpoint_*.bin")) + [result.log_path]
    _write_manifest(
        out_dir, "train",
        {"model": encoder.cfg.to_dict(), "train": tcfg.to_dict()}, tcfg.seed,
        inputs={
            "train_pairs": data_dir / "train.pairs.jsonl",
            "valid_pairs": valid_path,
            "vocab": data_dir / "vocab.txt",
        },
        outputs=outputs, started=started,
    )
    if not args.quiet:
        msg = ", ".join(
            f"{k} {v:.4f}" for k, v in result.final_valid.items() if v is not None
        )
        print(f"finished at step {result.final_step}: {msg}")
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    started = _now()
    out_dir = _out_dir(args)
    data_dir = Path(args.data)
    mcfg, params, _ = load_checkpoint(args.checkpoint)
    encoder = Encoder(mcfg, params)
    vocab = Vocab.load(data_dir / "vocab.txt")
    if len(vocab) != mcfg.vocab_size:
        raise ConfigError(
            f"vocab of {len(vocab)} tokens does not match checkpoint "
            f"vocab_size {mcfg.vocab_size}"
        )
    pair_path = data_dir / f"{args.split}.pairs.jsonl"
    records = read_pair_file(pair_path)
    seqs, labels = encode_records(records, vocab, mcfg.max_len)
    report = evaluate(
        encoder, seqs, labels, meta={"split": args.split, "checkpoint": str(args.checkpoint)}
    )
    json_path = out_dir / "eval_report.json"
    csv_path = out_dir / "eval_report.csv"
    report.save_json(json_path)
    report.save_csv(csv_path)
    _write_manifest(
        out_dir, "eval", {"split": args.split}, None,
        inputs={
            "checkpoint": Path(args.checkpoint),
            "pairs": pair_path,
            "vocab": data_dir / "vocab.txt",
        },
        outputs=[json_path, csv_path], started=started,
    )
    if not args.quiet:
        m = report.metrics
        print(f"{args.split}: n={report.n_pairs} acc={m['accuracy']:.4f} "
              f"macro_f1={m['macro_f1']:.4f} mcc={m['mcc']:.4f} ece={report.ece:.4f}")
        if report.violation_rate is not None:
            print(f"order violation rate: {report.violation_rate:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed if args.seed is not None else 0)
    if not args.quiet:
        for name in sorted(report.per_tensor):
            print(f"{name:28s} max rel err {report.per_tensor[name]:.3e}")
        print(f"overall: {report.max_rel_error:.3e} over "
              f"{report.n_coordinates} coordinates "
              f"({'PASS' if report.passed else 'FAIL'} at {report.threshold:.0e})")
    if args.out or os.environ.get("TNLI_OUT"):
        out_dir = _out_dir(args)
        (out_dir / "gradcheck_report.json").write_text(
            json.dumps(
                {
                    "max_rel_error": report.max_rel_error,
                    "per_tensor": report.per_tensor,
                    "n_coordinates": report.n_coordinates,
                    "threshold": report.threshold,
                    "order_loss_active": report.order_loss_active,
                    "passed": report.passed,
                },
                indent=2, sort_keys=True,
            ) + "\n",
            encoding="utf-8",
        )
    if not report.passed:
        raise NumericalError(
            f"gradient check failed: max rel error {report.max_rel_error:.3e}"
        )
    return 0


def _cmd_ablate(args) -> int:
    started = _now()
    raw = _load_config(args.config)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    out_dir = _out_dir(args)
    ont = _ontology(args)

    if args.corpus:
        corpus = read_corpus(args.corpus)
    else:
        ccfg = CohortConfig.from_dict({"seed": seed, **raw.get("cohort", {})})
        corpus = generate_cohort(ccfg, ont)
    pair_cfg = PairConfig.from_dict({"seed": seed, **raw.get("pairs", {})})
    train_cfg = TrainConfig.from_dict({"seed": seed, **raw.get("train", {})})
    model_cfg = ModelConfig.from_dict({"vocab_size": 5, **raw.get("model", {})})
    splits = raw.get("splits", dict(_DEFAULT_SPLITS))
    factors = tuple(raw.get("factors", ("rope", "contradiction-rules", "pair-density")))
    densities = tuple(raw.get("densities", (1, 5, 10)))

    reports = run_ablation(
        corpus, ont, pair_cfg, model_cfg, train_cfg, splits, out_dir,
        factors=factors, densities=densities,
    )
    outputs = [out_dir / "ablation_summary.csv"]
    _write_manifest(
        out_dir, "ablate",
        {
            "pairs": pair_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "splits": splits,
            "factors": list(factors),
            "densities": list(densities),
        },
        seed,
        inputs={"corpus": Path(args.corpus)} if args.corpus else {},
        outputs=outputs, started=started,
    )
    if not args.quiet:
        for name, rep in reports.items():
            m = rep.metrics
            print(f"{name:24s} acc={m['accuracy']:.4f} macro_f1={m['macro_f1']:.4f} "
                  f"ece={rep.ece:.4f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tnli",
        description="Temporal entailment pretraining over synthetic clinical timelines.",
    )
    parser.add_argument("--version", action="version", version=f"tnli {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, ontology: bool = True) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: $TNLI_OUT)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        if ontology:
            p.add_argument("--ontology", help="ontology file (default: built-in seed)")

    p = sub.add_parser("ontology-validate", help="parse and validate an ontology")
    common(p)
    p.set_defaults(fn=_cmd_ontology_validate)

    p = sub.add_parser("cohort-gen", help="generate a synthetic patient corpus")
    common(p)
    p.set_defaults(fn=_cmd_cohort_gen)

    p = sub.add_parser("pairs-build", help="label, sample, and split entailment pairs")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus.jsonl from cohort-gen")
    p.set_defaults(fn=_cmd_pairs_build)

    p = sub.add_parser("train", help="train the encoder")
    common(p, ontology=False)
    p.add_argument("--data", required=True, help="directory from pairs-build")
    p.add_argument("--resume", action="store_true",
                   help="continue from checkpoint_last.bin in the output directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a pair split")
    common(p, ontology=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory from pairs-build")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p, ontology=False)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare ablation arms")
    common(p)
    p.add_argument("--corpus", help="reuse an existing corpus.jsonl")
    p.set_defaults(fn=_cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, OntologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TnliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
