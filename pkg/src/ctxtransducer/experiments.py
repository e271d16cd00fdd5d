"""Direction-of-effect experiments on synthetic contextual sessions.

Per seed the protocol trains, all warm-started from context-free checkpoints:

* ``stream_base``  streaming, P=F=0, phase-1 iterations plus phase-2 iterations
* ``stream_ctx``   streaming, P=1, warm-started from the phase-1 checkpoint
* ``dual_ctx``     dual-mode, P=1 F=1, one run per beta, warm-started from a
  dual-mode phase-1 checkpoint

and decodes a held-out test set.  Context gain is ``stream_base`` ->
``stream_ctx``; latency gain is ``stream_ctx`` -> ``dual_ctx`` (student decode).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .evaluation import EvalReport, evaluate, relative_metrics, write_report
from .network import ModelConfig, load_checkpoint
from .synthdata import SynthConfig, generate_dataset
from .training import BETA_SWEEP, TrainConfig, train

log = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).with_name("presets")


@dataclass
class ExperimentPreset:
    name: str = "context"
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_sessions: int = 200
    test_sessions: int = 40
    test_first_seed: int = 100_000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    beta: float = 5e-4
    beta_sweep: list[float] = field(default_factory=lambda: list(BETA_SWEEP))
    past: int = 1
    future: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentPreset":
        data = dict(data)
        synth = SynthConfig.from_dict(data.pop("data", {}))
        tcfg = dict(data.pop("train", {}))
        model = ModelConfig.from_dict(tcfg.pop("model", {}))
        model.feature_dim, model.vocab_size = synth.feature_dim, synth.vocab_size
        return cls(data=synth, train=TrainConfig(model=model, **tcfg), **data)


def load_preset(name_or_path: str | Path) -> ExperimentPreset:
    path = Path(name_or_path)
    if not path.suffix:
        path = PRESET_DIR / f"{name_or_path}.json"
    return ExperimentPreset.from_dict(json.loads(path.read_text()))


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, dict]
    rwerr_context_pct: float
    raelr_dual_ms: dict[float, float]
    rwerr_dual_pct: dict[float, float]
    seconds: float
    run_seconds: dict[str, float] = field(default_factory=dict)

    def context_seconds(self) -> float:
        """Wall time of the runs the context comparison needs."""
        return sum(self.run_seconds.get(k, 0.0) for k in ("stream_pre", "stream_base", "stream_ctx"))


def _summary(report: EvalReport) -> dict:
    return {"wer": report.wer, "ael_ms": report.ael_ms, "segments": len(report.rows),
            "empty": report.empty_hypotheses}


def _config(preset: ExperimentPreset, seed: int, **overrides) -> TrainConfig:
    base = preset.train.to_dict()
    base.update(seed=seed, **overrides)
    return TrainConfig.from_dict(base)


def run_seed(preset: ExperimentPreset, seed: int, out_dir: str | Path, betas: Sequence[float] | None = None) -> SeedResult:
    out = Path(out_dir) / f"seed{seed}"
    t0 = time.time()
    sessions = generate_dataset(preset.data, preset.train_sessions)
    test = generate_dataset(preset.data, preset.test_sessions, first_seed=preset.test_first_seed)
    n1, n2 = preset.train.phase1_iters, preset.train.phase2_iters
    P, F = preset.past, preset.future
    betas = [preset.beta] if betas is None else list(betas)
    timings: dict[str, float] = {}

    def run(name, warm=None, **kw):
        log.info("seed %d: training %s", seed, name)
        start = time.time()
        ckpt = train(_config(preset, seed, **kw), sessions, out / name, warm_start=warm)
        timings[name] = time.time() - start
        return ckpt

    def score(name, ckpt, mode, past, future, beta=0.0):
        rep = evaluate(load_checkpoint(ckpt), test, mode, past, future, preset.data.frame_ms,
                       preset.train.max_symbols_per_frame, preset.train.separator_frames, run_id=name,
                       checkpoint=str(ckpt), beta=beta)
        write_report(rep, out / "reports" / f"{name}.csv")
        return rep

    pre = run("stream_pre", mode="streaming", P=0, F=0, phase1_iters=n1, phase2_iters=0)
    base_ckpt = run("stream_base", warm=pre, mode="streaming", P=0, F=0, phase2_iters=n2)
    ctx_ckpt = run("stream_ctx", warm=pre, mode="streaming", P=P, F=0, phase2_iters=n2)
    reports = {"stream_base": score("stream_base", base_ckpt, "streaming", 0, 0),
               "stream_ctx": score("stream_ctx", ctx_ckpt, "streaming", P, 0)}
    dual_pre = run("dual_pre", mode="dual", P=0, F=0, beta=preset.beta, phase1_iters=n1, phase2_iters=0)
    raelr, rwerr_dual = {}, {}
    for beta in betas:
        ckpt = run(f"dual_ctx_b{beta:g}", warm=dual_pre, mode="dual", P=P, F=F, beta=beta, phase2_iters=n2)
        student = score(f"dual_ctx_b{beta:g}_student", ckpt, "streaming", P, 0, beta)
        reports[f"dual_ctx_b{beta:g}_student"] = student
        reports[f"dual_ctx_b{beta:g}_teacher"] = score(f"dual_ctx_b{beta:g}_teacher", ckpt, "nonstreaming", P, F, beta)
        rwerr_dual[beta], raelr[beta] = relative_metrics(reports["stream_ctx"], student)
    rwerr_ctx, _ = relative_metrics(reports["stream_base"], reports["stream_ctx"])
    result = SeedResult(seed, {k: _summary(v) for k, v in reports.items()}, rwerr_ctx, raelr, rwerr_dual,
                        time.time() - t0, timings)
    (out / "result.json").write_text(json.dumps(asdict(result), indent=1, default=str) + "\n")
    return result


@dataclass
class ExperimentSummary:
    seeds: list[SeedResult]

    def context_gains(self) -> list[float]:
        return [r.rwerr_context_pct for r in self.seeds]

    def latency_gains(self, beta: float) -> list[float]:
        return [r.raelr_dual_ms[beta] for r in self.seeds if beta in r.raelr_dual_ms]

    def mean_wer(self, key: str) -> float:
        values = [r.reports[key]["wer"] for r in self.seeds if key in r.reports]
        return math.fsum(values) / len(values) if values else float("nan")

    def sweep_table(self) -> list[dict]:
        betas = sorted({b for r in self.seeds for b in r.raelr_dual_ms}, reverse=True)
        rows = []
        for beta in betas:
            gains = self.latency_gains(beta)
            rows.append({"beta": beta, "raelr_ms": math.fsum(gains) / len(gains),
                         "student_wer": self.mean_wer(f"dual_ctx_b{beta:g}_student")})
        return rows


def run_experiment(preset: ExperimentPreset, out_dir: str | Path, sweep: bool = True) -> ExperimentSummary:
    betas = sorted(set(preset.beta_sweep) | {preset.beta}, reverse=True) if sweep else [preset.beta]
    results = [run_seed(preset, seed, out_dir, betas) for seed in preset.seeds]
    return ExperimentSummary(results)
