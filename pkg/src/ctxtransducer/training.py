"""Loss assembly, optimiser, bucketing and the two-phase training driver."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericOverflowError, ParameterStore, Tensor
from .context import ContextWindow, Segment, Session, build_context_window, slice_segment_encodings, student_window
from .evaluation import evaluate
from .lattice import distillation_loss, transducer_loss
from .network import ConfigError, Mode, ModelConfig, Transducer, load_checkpoint, save_checkpoint
from .rng import substream

log = logging.getLogger(__name__)

TRAIN_MODES = ("streaming", "nonstreaming", "dual")
BETA_SWEEP = (5e-3, 1e-3, 5e-4, 1e-4)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dual"
    P: int = 1
    F: int = 0
    beta: float = 5e-4
    peak_lr: float = 3e-3
    warmup_iters: int = 100
    decay_rate: float = 0.999
    phase1_iters: int = 300
    phase2_iters: int = 300
    bucket_boundaries: list[int] = field(default_factory=lambda: [60, 120, 180])
    bucket_batch_frames: list[int] = field(default_factory=lambda: [240, 240, 240, 180])
    eval_every: int = 100
    seed: int = 0
    distill_mode: str = "collapsed3"
    phase1_mode: str | None = None
    max_grad_norm: float = 10.0
    valid_sessions: int = 20
    max_symbols_per_frame: int = 10
    separator_frames: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.phase1_mode is not None and self.phase1_mode not in TRAIN_MODES:
            raise ConfigError(f"phase1_mode must be one of {TRAIN_MODES}")
        if self.mode == "streaming" and self.F > 0:
            raise ConfigError("student cannot see future utterances: streaming mode requires F=0")
        if self.P < 0 or self.F < 0:
            raise ConfigError("context counts must be non-negative")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if len(self.bucket_batch_frames) != len(self.bucket_boundaries) + 1:
            raise ConfigError("bucket_batch_frames needs one more entry than bucket_boundaries")
        if list(self.bucket_boundaries) != sorted(self.bucket_boundaries):
            raise ConfigError("bucket_boundaries must be ascending")
        if any(b <= 0 for b in self.bucket_batch_frames):
            raise ConfigError("bucket budgets must be positive")
        if self.warmup_iters < 0 or self.eval_every < 1:
            raise ConfigError("warmup_iters must be >= 0 and eval_every >= 1")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields {sorted(unknown)}")
        return cls(model=model, **data)


# ---------------------------------------------------------------------------
# losses


def segment_logits(model: Transducer, encodings: Tensor, window: ContextWindow, segment: Segment, params) -> Tensor:
    enc = slice_segment_encodings(encodings, window, segment, model.config.encoder.downsample_factor)
    return model.joint_lattice(enc, model.predict(segment.labels, params), params)


def single_mode_loss(model: Transducer, window: ContextWindow, segments: Sequence[Segment], params, mode: Mode | str) -> Tensor:
    """Sum of per-segment transducer losses over one shared encoder pass."""
    mode = Mode(mode)
    if mode is Mode.STREAMING and window.future_used > 0:
        raise ConfigError("student cannot see future utterances: streaming mode requires a window with F=0")
    encodings = model.encode(window.features, mode, params)
    return ad.add_n([transducer_loss(segment_logits(model, encodings, window, seg, params), seg.labels) for seg in segments])


@dataclass
class DualModeLossBreakdown:
    teacher: list[float]
    student: list[float]
    distill: list[float]
    beta: float
    teacher_logits: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return len(self.teacher)

    @property
    def teacher_total(self) -> float:
        return math.fsum(self.teacher)

    @property
    def student_total(self) -> float:
        return math.fsum(self.student)

    @property
    def distill_total(self) -> float:
        return math.fsum(self.distill)

    @property
    def total(self) -> float:
        return math.fsum(t + s + self.beta * d for t, s, d in zip(self.teacher, self.student, self.distill))


def dual_mode_loss(model: Transducer, teacher_window: ContextWindow, student_win: ContextWindow,
                   segments: Sequence[Segment], params, beta: float, distill_mode: str = "collapsed3",
                   frozen_teacher: Sequence[np.ndarray] | None = None):
    """Teacher, student and distillation losses summed over the segments.

    Returns ``(total_tensor, breakdown)``.  The distillation term treats the
    teacher lattice as a constant.  ``frozen_teacher`` substitutes fixed
    teacher logits (one array per segment) in that term only, which turns the
    loss into an ordinary function of the parameters for finite differences.
    """
    if student_win.future_used > 0:
        raise ConfigError("student cannot see future utterances: student window has F>0")
    if (student_win.current is not teacher_window.current or student_win.current_offset != teacher_window.current_offset
            or student_win.past_used != teacher_window.past_used
            or not np.array_equal(student_win.features, teacher_window.features[:student_win.total_frames])):
        raise ConfigError("student window must be the teacher window without future utterances")
    if not segments:
        raise ConfigError("dual-mode loss needs at least one segment")
    t_enc = model.encode(teacher_window.features, Mode.NONSTREAMING, params)
    s_enc = model.encode(student_win.features, Mode.STREAMING, params)
    terms = []
    breakdown = DualModeLossBreakdown([], [], [], beta)
    if frozen_teacher is not None and len(frozen_teacher) != len(segments):
        raise ConfigError("frozen_teacher needs one logit array per segment")
    for i, seg in enumerate(segments):
        t_logits = segment_logits(model, t_enc, teacher_window, seg, params)
        s_logits = segment_logits(model, s_enc, student_win, seg, params)
        lt = transducer_loss(t_logits, seg.labels)
        ls = transducer_loss(s_logits, seg.labels)
        target = t_logits.data if frozen_teacher is None else frozen_teacher[i]
        ld = distillation_loss(target, s_logits, seg.labels, distill_mode)
        breakdown.teacher_logits.append(t_logits.data)
        breakdown.teacher.append(lt.item())
        breakdown.student.append(ls.item())
        breakdown.distill.append(ld.item())
        terms += [lt, ls, ad.mul(ld, beta)]
    return ad.add_n(terms), breakdown


# ---------------------------------------------------------------------------
# schedule and optimiser


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then exponential decay per iteration."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration <= config.warmup_iters:
        return config.peak_lr * (iteration / config.warmup_iters) if config.warmup_iters else config.peak_lr
    return config.peak_lr * config.decay_rate ** (iteration - config.warmup_iters)


class Adam:
    def __init__(self, store: ParameterStore, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {n: np.zeros_like(a) for n, a in store.items()}
        self.v = {n: np.zeros_like(a) for n, a in store.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        updates = {}
        for name, g in grads.items():
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            updates[name] = self.store[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.store.update(updates)
        self.store.step += 1


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    bucket: int
    items: tuple
    frames: int


def bucket_index(frames: int, boundaries: Sequence[int]) -> int:
    for i, bound in enumerate(boundaries):
        if frames <= bound:
            return i
    return len(boundaries)


def bucket_batches(items: Sequence, boundaries: Sequence[int], batch_frame_budgets: Sequence[int], seed,
                   frames_of=lambda item: item[1]) -> list[Batch]:
    """Group items into frame-budgeted batches per length bucket.

    ``frames_of(item)`` gives the item's window length.  Items are shuffled
    with ``seed`` before filling, and the finished batches are shuffled again.
    """
    if len(batch_frame_budgets) != len(boundaries) + 1:
        raise ConfigError("need one more budget than boundaries")
    if any(b <= 0 for b in batch_frame_budgets):
        raise ConfigError("bucket budgets must be positive")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    open_batches: dict[int, list] = {}
    open_frames: dict[int, int] = {}
    done: list[Batch] = []
    for i in order:
        item = items[i]
        n = int(frames_of(item))
        b = bucket_index(n, boundaries)
        budget = batch_frame_budgets[b]
        if n > budget:
            warnings.warn(f"window of {n} frames exceeds bucket budget {budget}; emitted as a batch of one")
            done.append(Batch(b, (item,), n))
            continue
        if open_frames.get(b, 0) + n > budget:
            done.append(Batch(b, tuple(open_batches[b]), open_frames[b]))
            open_batches[b], open_frames[b] = [], 0
        open_batches.setdefault(b, []).append(item)
        open_frames[b] = open_frames.get(b, 0) + n
    for b in sorted(open_batches):
        if open_batches[b]:
            done.append(Batch(b, tuple(open_batches[b]), open_frames[b]))
    return [done[i] for i in rng.permutation(len(done))]


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainItem:
    session: Session
    index: int
    teacher: ContextWindow | None
    student: ContextWindow | None

    @property
    def frames(self) -> int:
        return max(w.total_frames for w in (self.teacher, self.student) if w is not None)

    @property
    def segments(self):
        return (self.teacher or self.student).current.segments


def make_items(sessions: Sequence[Session], mode: str, P: int, F: int, separator_frames: int = 0) -> list[TrainItem]:
    items = []
    for session in sessions:
        for index, utt in enumerate(session.utterances):
            if not utt.segments:
                continue
            teacher = build_context_window(session, index, P, F, separator_frames) if mode in ("nonstreaming", "dual") else None
            student = student_window(session, index, P, separator_frames) if mode in ("streaming", "dual") else None
            items.append(TrainItem(session, index, teacher, student))
    return items


def item_loss(model: Transducer, item: TrainItem, params, mode: str, beta: float, distill_mode: str):
    """Returns ``(loss_tensor, (teacher, student, distill))`` for one window."""
    if mode == "dual":
        total, br = dual_mode_loss(model, item.teacher, item.student, item.segments, params, beta, distill_mode)
        return total, (br.teacher_total, br.student_total, br.distill_total)
    if mode == "nonstreaming":
        loss = single_mode_loss(model, item.teacher, item.segments, params, Mode.NONSTREAMING)
        return loss, (loss.item(), None, None)
    loss = single_mode_loss(model, item.student, item.segments, params, Mode.STREAMING)
    return loss, (None, loss.item(), None)


def eval_mode(mode: str) -> Mode:
    return Mode.NONSTREAMING if mode == "nonstreaming" else Mode.STREAMING


def validation_wer(model: Transducer, sessions: Sequence[Session], mode: str, P: int, F: int, config: TrainConfig) -> float:
    m = eval_mode(mode)
    report = evaluate(model, sessions, m, P, 0 if m is Mode.STREAMING else F,
                      max_symbols_per_frame=config.max_symbols_per_frame, separator_frames=config.separator_frames)
    return report.wer


@dataclass
class PhaseResult:
    best_store: dict[str, np.ndarray]
    best_wer: float
    best_iter: int
    log: list[dict]


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def run_phase(model: Transducer, config: TrainConfig, phase: int, train_sessions, valid_sessions,
              mode: str, P: int, F: int, iterations: int, log_fh=None) -> PhaseResult:
    items = make_items(train_sessions, mode, P, F, config.separator_frames)
    if not items:
        raise TrainingError("no labelled segments in the training data")
    optimiser = Adam(model.store, config.adam_b1, config.adam_b2, config.adam_eps)
    records: list[dict] = []
    pending: list[tuple] = []

    def flush(it: int):
        wer = validation_wer(model, valid_sessions, mode, P, F, config)
        rec = {"iter": it, "phase": phase,
               "loss_teacher": _mean([p[0] for p in pending]),
               "loss_student": _mean([p[1] for p in pending]),
               "loss_distill": _mean([p[2] for p in pending]),
               "lr": lr_schedule(it, config), "val_wer": wer}
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        log.info("phase %d iter %d val_wer %.4f", phase, it, wer)
        pending.clear()
        return wer

    def batches(epoch: int):
        return bucket_batches(items, config.bucket_boundaries, config.bucket_batch_frames,
                              substream(config.seed, "shuffle", phase, epoch), frames_of=lambda it: it.frames)

    epoch, queue = 0, []
    best_wer, best_iter = math.inf, 0
    best_store = {n: a for n, a in model.store.items()}
    for it in range(iterations + 1):
        if it % config.eval_every == 0 or it == iterations:
            if it == 0:
                # starting-point losses on the first batch, before any update
                if not queue:
                    queue = batches(epoch)
                pending.extend(_batch_losses(model, queue[0], config, mode))
            wer = flush(it)
            if wer < best_wer:
                best_wer, best_iter = wer, it
                best_store = {n: a for n, a in model.store.items()}
        if it == iterations:
            break
        if not queue:
            epoch += 1
            queue = batches(epoch)
        batch = queue.pop(0)
        params = model.store.leaves()
        terms, parts = [], []
        try:
            for item in batch.items:
                loss, part = item_loss(model, item, params, mode, config.beta, config.distill_mode)
                terms.append(loss)
                parts.append(part)
            total = ad.add_n(terms)
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite loss at phase {phase} iteration {it} (batch {batch_id(batch)})")
            ad.backward(total)
        except NumericOverflowError as exc:
            raise TrainingError(f"non-finite value at phase {phase} iteration {it} (batch {batch_id(batch)}): {exc}") from exc
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}
        clip_gradients(grads, config.max_grad_norm)
        optimiser.step(grads, lr_schedule(it + 1, config))
        pending.extend(parts)
    return PhaseResult(best_store, best_wer, best_iter, records)


def _batch_losses(model: Transducer, batch: Batch, config: TrainConfig, mode: str) -> list[tuple]:
    params = model.constants()
    return [item_loss(model, item, params, mode, config.beta, config.distill_mode)[1] for item in batch.items]


def batch_id(batch: Batch) -> str:
    return ",".join(f"{it.session.session_id}/{it.index}" for it in batch.items)


def split_validation(sessions: Sequence[Session], count: int) -> tuple[list[Session], list[Session]]:
    if count <= 0 or count >= len(sessions):
        raise ConfigError(f"cannot hold out {count} of {len(sessions)} sessions for validation")
    return list(sessions[:-count]), list(sessions[-count:])


def train(config: TrainConfig, sessions: Sequence[Session], out_dir: str | Path, warm_start: str | Path | None = None,
          valid: Sequence[Session] | None = None) -> Path:
    """Two-phase training; returns the directory of the best checkpoint.

    Phase 1 trains without context unless ``warm_start`` is given.  Phase 2
    trains with the configured context.  Both phases select their best
    checkpoint on validation WER under their own context configuration.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if valid is None:
        train_sessions, valid = split_validation(sessions, config.valid_sessions)
    else:
        train_sessions = list(sessions)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")

    if warm_start is not None:
        model = load_checkpoint(warm_start)
        if model.config.to_dict() != config.model.to_dict():
            raise ConfigError("warm-start checkpoint was trained with a different model config")
    else:
        model = Transducer.initialise(config.model, seed=int(substream(config.seed, "init").integers(2**31)))

    with (out_dir / "log.jsonl").open("w") as log_fh:
        if warm_start is None and config.phase1_iters > 0:
            mode1 = config.phase1_mode or config.mode
            result = run_phase(model, config, 1, train_sessions, valid, mode1, 0, 0, config.phase1_iters, log_fh)
            model.store.update(result.best_store)
            save_checkpoint(model, model.store.step, out_dir / "phase1", {"val_wer": result.best_wer, "iter": result.best_iter})
        result = run_phase(model, config, 2, train_sessions, valid, config.mode, config.P, config.F, config.phase2_iters, log_fh)
    model.store.update(result.best_store)
    return save_checkpoint(model, model.store.step, out_dir / "best", {"val_wer": result.best_wer, "iter": result.best_iter})


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
