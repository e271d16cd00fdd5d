"""Command-line entry point: data generation, training, evaluation and oracle checks.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
Every successful command writes a ``run_manifest.json`` next to its output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4
ORACLE_TOL = 1e-9
FD_STEPS = (1e-3, 1e-4, 1e-5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    checksums: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def write(self, path: str | Path) -> Path:
        """Checksum every output and write atomically; missing outputs are an error."""
        path = Path(path)
        for name in self.outputs:
            self.checksums[name] = checksum(name)
        self.finished = _now()
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def checksum(path: str | Path) -> str:
    """sha256 of a file, or of every file under a directory in sorted order."""
    path = Path(path)
    digest = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    if not files or not all(f.exists() for f in files):
        raise FileNotFoundError(f"manifest output {path} does not exist")
    for f in files:
        if path.is_dir():
            digest.update(str(f.relative_to(path)).encode() + b"\0")
        digest.update(f.read_bytes())
    return digest.hexdigest()


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _override(config: dict, **flags) -> dict:
    config = dict(config)
    config.update({k: v for k, v in flags.items() if v is not None})
    return config


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .synthdata import SynthConfig, generate_dataset, write_dataset

    raw = _load_json(args.config)
    num_sessions = int(raw.pop("num_sessions", 100))
    first_seed = int(raw.pop("first_seed", 0))
    num_sessions = args.sessions if args.sessions is not None else num_sessions
    config = SynthConfig.from_dict(_override(raw, seed=args.seed))
    config.validate()
    manifest = RunManifest("gen-data", {**config.to_dict(), "num_sessions": num_sessions, "first_seed": first_seed},
                           config.seed, [args.config] if args.config else [], [args.out], started=_now())
    sessions = generate_dataset(config, num_sessions, first_seed)
    write_dataset(sessions, args.out, config.feature_dim, config.vocab_size, config.frame_ms)
    manifest.write(Path(args.out).with_name(Path(args.out).name + ".manifest.json"))
    print(f"wrote {num_sessions} sessions ({sum(len(s) for s in sessions)} utterances) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synthdata import read_dataset
    from .training import TrainConfig, train

    raw = _load_json(args.config)
    config = TrainConfig.from_dict(_override(raw, mode=args.mode, P=args.past, F=args.future, beta=args.beta,
                                             seed=args.seed, phase1_iters=args.phase1_iters,
                                             phase2_iters=args.phase2_iters))
    header, sessions = read_dataset(args.data)
    config.model.feature_dim, config.model.vocab_size = header.feature_dim, header.vocab_size
    config.validate()
    inputs = [args.data] + ([args.config] if args.config else []) + ([args.warm_start] if args.warm_start else [])
    manifest = RunManifest("train", config.to_dict(), config.seed, inputs, started=_now())
    best = train(config, sessions, args.out, warm_start=args.warm_start)
    out = Path(args.out)
    manifest.outputs = [str(best), str(out / "log.jsonl"), str(out / "config.json")]
    manifest.write(out / "run_manifest.json")
    print(f"best checkpoint: {best}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, write_report
    from .network import Mode, load_checkpoint
    from .synthdata import read_dataset

    if args.mode == Mode.STREAMING.value and args.future > 0:
        raise UsageError("student cannot see future utterances: streaming mode requires --future 0")
    model = load_checkpoint(args.ckpt)
    header, sessions = read_dataset(args.data)
    if header.feature_dim != model.config.feature_dim:
        raise UsageError(f"dataset feature_dim {header.feature_dim} does not match checkpoint {model.config.feature_dim}")
    config = {"mode": args.mode, "past": args.past, "future": args.future, "max_symbols_per_frame": args.max_symbols,
              "frame_ms": header.frame_ms}
    manifest = RunManifest("eval", config, None, [args.ckpt, args.data], [args.report], started=_now())
    report = evaluate(model, sessions, args.mode, args.past, args.future, header.frame_ms, args.max_symbols,
                      run_id=args.run_id or Path(args.ckpt).name, checkpoint=str(args.ckpt))
    write_report(report, args.report, args.details)
    if args.details:
        manifest.outputs.append(args.details)
    manifest.write(Path(args.report).with_name(Path(args.report).name + ".manifest.json"))
    print(f"wer {report.wer:.4f}  ael_ms {report.ael_ms:.2f}  segments {len(report.rows)}  "
          f"empty {report.empty_hypotheses}")
    return EXIT_OK


def tiny_model_config():
    from .network import EncoderConfig, ModelConfig

    return ModelConfig(feature_dim=3, vocab_size=3, embed_dim=3, pred_dim=4, joint_dim=5,
                       encoder=EncoderConfig(num_blocks=1, model_dim=4, num_heads=2, feedforward_dim=6,
                                             use_depthwise_conv=True, conv_kernel=3))


def gradient_checks(seed: int) -> dict[str, float]:
    """Max relative finite-difference error of the transducer and dual-mode gradients."""
    from .autodiff import finite_difference_check
    from .context import Segment, Session, Utterance, build_context_window
    from .lattice import LatticeTensor, rnnt_grad, rnnt_loss
    from .network import Transducer
    from .training import dual_mode_loss

    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3, 4))
    labels = [1, 3]
    lattice = LatticeTensor.from_logits(logits, labels)
    analytic = rnnt_grad(lattice)
    numeric = np.zeros_like(logits)
    h = 1e-5
    for idx in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[idx] += h
        up = rnnt_loss(LatticeTensor.from_logits(bumped, labels))[0]
        bumped[idx] -= 2 * h
        down = rnnt_loss(LatticeTensor.from_logits(bumped, labels))[0]
        numeric[idx] = (up - down) / (2 * h)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)

    model = Transducer.initialise(tiny_model_config(), seed)
    utts = [Utterance("g", i, rng.normal(size=(n, 3)), [Segment(1, n, tuple(rng.integers(1, 4, size=2)))])
            for i, n in enumerate((4, 5, 4))]
    session = Session("g", utts)
    teacher = build_context_window(session, 1, 1, 1)
    student = build_context_window(session, 1, 1, 0)

    # the distillation target is a constant, so differentiate with it frozen
    frozen = dual_mode_loss(model, teacher, student, utts[1].segments, model.constants(), 0.5)[1].teacher_logits

    def total(params):
        return dual_mode_loss(model, teacher, student, utts[1].segments, params, 0.5, frozen_teacher=frozen)[0]

    dual = finite_difference_check(total, model.store, step=FD_STEPS, points=4)
    return {"rnnt_grad": float(rel.max()), "dual_mode_loss": float(dual),
            "vocab_sum": float(np.abs(analytic.sum(axis=-1)).max()),
            "parameters": float(model.store.num_parameters())}


def cmd_gradcheck(args) -> int:
    checks = gradient_checks(args.seed)
    worst = max(checks["rnnt_grad"], checks["dual_mode_loss"])
    print(f"rnnt_grad max relative error {checks['rnnt_grad']:.3e}")
    print(f"dual_mode_loss max relative error {checks['dual_mode_loss']:.3e} "
          f"({int(checks['parameters'])} parameters)")
    print(f"max |sum over vocabulary of node gradient| {checks['vocab_sum']:.3e}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst <= GRADCHECK_TOL and checks["vocab_sum"] <= 1e-10 else EXIT_VERIFY


def oracle_trials(trials: int, seed: int, max_T: int = 6, max_U: int = 4, max_V: int = 5):
    """Yield ``(T, U, V, |dp - brute force|)`` for random lattices."""
    from .lattice import LatticeTensor, rnnt_loss, rnnt_loss_bruteforce

    rng = np.random.default_rng(seed)
    for _ in range(trials):
        T = int(rng.integers(1, max_T + 1))
        U = int(rng.integers(0, max_U + 1))
        V = int(rng.integers(2, max_V + 1))
        labels = rng.integers(1, V, size=U)
        lattice = LatticeTensor.from_logits(rng.normal(0.0, 2.0, size=(T, U + 1, V)), labels)
        yield T, U, V, abs(rnnt_loss(lattice)[0] - rnnt_loss_bruteforce(lattice))


def cmd_oracle_check(args) -> int:
    worst = 0.0
    for i, (T, U, V, err) in enumerate(oracle_trials(args.trials, args.seed)):
        worst = max(worst, err)
        print(f"trial {i:4d}  T={T} U={U} V={V}  |dp - brute| = {err:.3e}")
    print(f"max |dp - brute| {worst:.3e} over {args.trials} trials (tolerance {ORACLE_TOL:g})")
    return EXIT_OK if worst <= ORACLE_TOL else EXIT_VERIFY


def cmd_compare(args) -> int:
    from .evaluation import compare_reports

    result = compare_reports(args.baseline, args.candidate)
    print(f"{result['candidate']} vs {result['baseline']}: rWERR {result['rwerr_pct']:+.2f}%  "
          f"rAELR {result['raelr_ms']:+.2f} ms")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import load_preset, run_experiment

    preset = load_preset(args.preset)
    if args.seeds:
        preset.seeds = [int(s) for s in args.seeds.split(",")]
    manifest = RunManifest("experiment", preset.to_dict(), None, [args.preset], started=_now())
    summary = run_experiment(preset, args.out, sweep=not args.no_sweep)
    out = Path(args.out)
    (out / "summary.json").write_text(json.dumps([asdict(r) for r in summary.seeds], indent=1, default=str) + "\n")
    for r in summary.seeds:
        print(f"seed {r.seed}: context rWERR {r.rwerr_context_pct:+.2f}%  "
              + "  ".join(f"beta {b:g} rAELR {v:+.2f} ms" for b, v in sorted(r.raelr_dual_ms.items())))
    for row in summary.sweep_table():
        print(f"beta {row['beta']:g}: mean rAELR {row['raelr_ms']:+.2f} ms  student WER {row['student_wer']:.4f}")
    manifest.outputs = [str(out / "summary.json")]
    manifest.write(out / "run_manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxtransducer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic session dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-phase training")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start")
    p.add_argument("--mode", choices=["streaming", "nonstreaming", "dual"])
    p.add_argument("--past", type=int)
    p.add_argument("--future", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--phase1-iters", type=int)
    p.add_argument("--phase2-iters", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a dataset and write a report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["streaming", "nonstreaming"], required=True)
    p.add_argument("--past", type=int, default=0)
    p.add_argument("--future", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--details")
    p.add_argument("--run-id")
    p.add_argument("--max-symbols", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="dynamic programme against path enumeration")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("compare", help="rWERR and rAELR between two reports")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidate", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="multi-seed context and latency experiment")
    p.add_argument("--preset", default="context")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds")
    p.add_argument("--no-sweep", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    from .autodiff import ShapeError
    from .context import ContextError
    from .evaluation import EvaluationError
    from .network import CheckpointError, ConfigError
    from .synthdata import DatasetFormatError, SynthConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, SynthConfigError, DatasetFormatError, CheckpointError, EvaluationError,
            ContextError, ShapeError, TypeError, FileNotFoundError) as exc:
        print(f"ctxtransducer {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    # progress of long training runs goes to the error stream
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
