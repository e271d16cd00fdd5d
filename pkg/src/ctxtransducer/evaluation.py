"""Greedy transducer decoding, WER, last-token emission latency, rWERR and rAELR."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .context import ContextWindow, ContextError, Segment, Session, build_context_window, segment_frame_range
from .network import Mode, Transducer

REPORT_FIELDS = ["run_id", "mode", "past", "future", "beta", "checkpoint", "segments", "wer", "ael_ms"]
COMPARE_FIELDS = ["baseline", "candidate", "rwerr_pct", "raelr_ms"]
LATENCY_REFERENCE = "labelled segment end frame"


class EvaluationError(ValueError):
    pass


class FutureContextError(EvaluationError):
    def __init__(self):
        super().__init__("student cannot see future utterances: streaming mode requires future=0")


@dataclass
class DecodeResult:
    tokens: list[int]
    emission_frames: list[int]
    mode: Mode
    segment: Segment
    segment_end_frame: int

    def __post_init__(self):
        if len(self.tokens) != len(self.emission_frames):
            raise EvaluationError("tokens and emission frames differ in length")
        if any(b < a for a, b in zip(self.emission_frames, self.emission_frames[1:])):
            raise EvaluationError("emission frames must be non-decreasing")


def greedy_decode(model: Transducer, window: ContextWindow, segment: Segment, mode: Mode | str,
                  max_symbols_per_frame: int = 10, encodings: Tensor | None = None) -> DecodeResult:
    """Frame-synchronous greedy search over the segment's encoder frames.

    Emission frames are indices into the window's encoder output.
    """
    mode = Mode(mode)
    if max_symbols_per_frame < 1:
        raise EvaluationError("max_symbols_per_frame must be >= 1")
    if mode is Mode.STREAMING and window.future_used > 0:
        raise FutureContextError()
    params = model.constants()
    if encodings is None:
        encodings = model.encode(window.features, mode, params)
    d = model.config.encoder.downsample_factor
    first, last = segment_frame_range(window, segment, d)
    state = model.start_state(params)
    tokens: list[int] = []
    frames: list[int] = []
    for t in range(first, last + 1):
        enc_t = encodings[t]
        for _ in range(max_symbols_per_frame):
            logits = model.join(enc_t, state[0], params).data
            k = int(np.argmax(logits))
            if k == 0:
                break
            tokens.append(k)
            frames.append(t)
            state = model.predict_step(k, state, params)
    return DecodeResult(tokens, frames, mode, segment, last)


def word_error_rate(hypothesis: Sequence, reference: Sequence) -> tuple[float, int, int, int]:
    """Return ``(wer, substitutions, deletions, insertions)``.

    Among minimum-edit alignments the one with most substitutions is chosen;
    that makes the split unique, and swapping the operands swaps D and I.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise EvaluationError("word error rate is undefined for an empty reference")
    n, m = len(ref), len(hyp)
    # cost[i][j] = (edits, -substitutions) to turn ref[:i] into hyp[:j]
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, 0)
    for j in range(1, m + 1):
        cost[0][j] = (j, 0)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            e, s = cost[i - 1][j - 1]
            diag = (e, s) if ref[i - 1] == hyp[j - 1] else (e + 1, s - 1)
            up = (cost[i - 1][j][0] + 1, cost[i - 1][j][1])
            left = (cost[i][j - 1][0] + 1, cost[i][j - 1][1])
            cost[i][j] = min(diag, up, left)
    edits, neg_subs = cost[n][m]
    subs = -neg_subs
    # D + I = edits - S and D - I = n - m
    dels = (edits - subs + n - m) // 2
    ins = edits - subs - dels
    return edits / n, subs, dels, ins


def last_token_latency(result: DecodeResult, frame_ms: float, downsample_factor: int,
                       segment_end_frame: int | None = None) -> float:
    """Signed ms between the last emission and the segment's final encoder frame."""
    if not result.tokens:
        raise EvaluationError("latency undefined for an empty hypothesis")
    end = result.segment_end_frame if segment_end_frame is None else segment_end_frame
    return (result.emission_frames[-1] - end) * frame_ms * downsample_factor


@dataclass
class SegmentRow:
    key: str
    reference: list[int]
    hypothesis: list[int]
    errors: int
    latency_ms: float | None


@dataclass
class EvalReport:
    rows: list[SegmentRow]
    run_id: str = "run"
    mode: str = "streaming"
    past: int = 0
    future: int = 0
    beta: float = 0.0
    checkpoint: str = ""
    latency_reference: str = LATENCY_REFERENCE
    wer: float = field(init=False)
    ael_ms: float = field(init=False)
    empty_hypotheses: int = field(init=False)

    def __post_init__(self):
        ref_tokens = sum(len(r.reference) for r in self.rows)
        self.wer = sum(r.errors for r in self.rows) / ref_tokens if ref_tokens else float("nan")
        lat = [r.latency_ms for r in self.rows if r.latency_ms is not None]
        self.ael_ms = float(np.mean(lat)) if lat else float("nan")
        self.empty_hypotheses = len(self.rows) - len(lat)

    @property
    def segment_keys(self) -> list[str]:
        return [r.key for r in self.rows]

    def summary(self) -> dict:
        return {"run_id": self.run_id, "mode": self.mode, "past": self.past, "future": self.future,
                "beta": self.beta, "checkpoint": self.checkpoint, "segments": len(self.rows),
                "wer": self.wer, "ael_ms": self.ael_ms}


def evaluate(model: Transducer, sessions: Iterable[Session], mode: Mode | str, past: int, future: int,
             frame_ms: float = 10.0, max_symbols_per_frame: int = 10, separator_frames: int = 0, **meta) -> EvalReport:
    """Decode every labelled segment of every utterance with the given context."""
    mode = Mode(mode)
    if mode is Mode.STREAMING and future > 0:
        raise FutureContextError()
    d = model.config.encoder.downsample_factor
    params = model.constants()
    rows = []
    for session in sessions:
        for index, utt in enumerate(session.utterances):
            if not utt.segments:
                continue
            window = build_context_window(session, index, past, future, separator_frames)
            encodings = model.encode(window.features, mode, params)
            for s_index, seg in enumerate(utt.segments):
                result = greedy_decode(model, window, seg, mode, max_symbols_per_frame, encodings)
                _, S, D, I = word_error_rate(result.tokens, seg.labels)
                latency = last_token_latency(result, frame_ms, d) if result.tokens else None
                rows.append(SegmentRow(f"{session.session_id}/{utt.index}/{s_index}", list(seg.labels),
                                       result.tokens, S + D + I, latency))
    return EvalReport(rows, mode=mode.value, past=past, future=future, **meta)


def relative_metrics(baseline: EvalReport, candidate: EvalReport) -> tuple[float, float]:
    """``(rWERR %, rAELR ms)``; positive values mean the candidate improved."""
    if baseline.segment_keys != candidate.segment_keys:
        raise EvaluationError("reports cover different segment sets")
    return relative_from_aggregates(baseline.wer, baseline.ael_ms, candidate.wer, candidate.ael_ms)


def relative_from_aggregates(base_wer: float, base_ael: float, cand_wer: float, cand_ael: float) -> tuple[float, float]:
    if base_wer == 0:
        raise EvaluationError("rWERR undefined: baseline WER is zero")
    return 100.0 * (base_wer - cand_wer) / base_wer, base_ael - cand_ael


# ---------------------------------------------------------------------------
# files


def write_report(report: EvalReport, path: str | Path, details: str | Path | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# latency reference: {report.latency_reference}\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerow({k: _fmt(v) for k, v in report.summary().items()})
    if details is not None:
        with Path(details).open("w") as fh:
            for row in report.rows:
                fh.write(json.dumps({"segment": row.key, "reference": row.reference, "hypothesis": row.hypothesis,
                                     "errors": row.errors, "last_emission_ms": row.latency_ms}) + "\n")


def _fmt(value):
    return repr(value) if isinstance(value, float) else value


def read_report(path: str | Path) -> dict:
    with Path(path).open(newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = list(csv.DictReader(lines))
    if len(rows) != 1 or set(rows[0]) != set(REPORT_FIELDS):
        raise EvaluationError(f"{path}: not an evaluation report")
    row = rows[0]
    return {**row, "past": int(row["past"]), "future": int(row["future"]), "beta": float(row["beta"]),
            "segments": int(row["segments"]), "wer": float(row["wer"]), "ael_ms": float(row["ael_ms"])}


def compare_reports(baseline_path: str | Path, candidate_path: str | Path) -> dict:
    base, cand = read_report(baseline_path), read_report(candidate_path)
    if base["segments"] != cand["segments"]:
        raise EvaluationError(f"reports cover different segment counts ({base['segments']} vs {cand['segments']})")
    rwerr, raelr = relative_from_aggregates(base["wer"], base["ael_ms"], cand["wer"], cand["ael_ms"])
    return {"baseline": base["run_id"], "candidate": cand["run_id"], "rwerr_pct": rwerr, "raelr_ms": raelr}
