"""Contextual-utterance windows and per-segment encoder slicing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """Labelled span ``[start_frame, end_frame)`` of an utterance."""

    start_frame: int
    end_frame: int
    labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if not 0 <= self.start_frame < self.end_frame:
            raise ContextError(f"invalid segment span [{self.start_frame}, {self.end_frame})")


@dataclass
class Utterance:
    session_id: str
    index: int
    features: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContextError(f"utterance features must be a non-empty (T, D) matrix, got {self.features.shape}")
        for seg in self.segments:
            if seg.end_frame > self.num_frames:
                raise ContextError(f"segment [{seg.start_frame}, {seg.end_frame}) exceeds utterance length {self.num_frames}")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.session_id == other.session_id and self.index == other.index
                and self.segments == other.segments
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Session:
    session_id: str
    utterances: list[Utterance]
    latent: int | None = None

    def __len__(self) -> int:
        return len(self.utterances)

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return self.session_id == other.session_id and self.utterances == other.utterances


@dataclass(frozen=True)
class ContextWindow:
    features: np.ndarray
    current_offset: int
    current_length: int
    past_used: int
    future_used: int
    current: Utterance

    @property
    def total_frames(self) -> int:
        return self.features.shape[0]

    @property
    def counts_used(self) -> tuple[int, int]:
        return self.past_used, self.future_used

    def current_features(self) -> np.ndarray:
        return self.features[self.current_offset:self.current_offset + self.current_length]


def build_context_window(session: Session | Sequence[Utterance], index: int, past: int, future: int,
                         separator_frames: int = 0) -> ContextWindow:
    """Concatenate up to ``past`` predecessors, the utterance, and up to ``future`` successors.

    Missing neighbours are clamped, never padded.  ``separator_frames`` zero
    frames go between consecutive utterances.
    """
    utts = session.utterances if isinstance(session, Session) else list(session)
    if not 0 <= index < len(utts):
        raise ContextError(f"utterance index {index} outside session of size {len(utts)}")
    if past < 0 or future < 0:
        raise ContextError("context counts must be non-negative")
    lo = max(0, index - past)
    hi = min(len(utts), index + 1 + future)
    dim = utts[index].features.shape[1]
    gap = np.zeros((separator_frames, dim))
    pieces = []
    offset = 0
    for i in range(lo, hi):
        if pieces and separator_frames:
            pieces.append(gap)
            if i <= index:
                offset += separator_frames
        if i < index:
            offset += utts[i].num_frames
        pieces.append(utts[i].features)
    return ContextWindow(np.concatenate(pieces, axis=0), offset, utts[index].num_frames,
                         index - lo, hi - index - 1, utts[index])


def student_window(session: Session | Sequence[Utterance], index: int, past: int, separator_frames: int = 0) -> ContextWindow:
    """Window for the streaming (student) encoder: past context and the current utterance only."""
    return build_context_window(session, index, past, 0, separator_frames)


def segment_frame_range(window: ContextWindow, segment: Segment, downsample_factor: int) -> tuple[int, int]:
    """Inclusive encoder-frame range ``(first, last)`` covered by ``segment``."""
    if segment.end_frame > window.current_length:
        raise ContextError(f"segment [{segment.start_frame}, {segment.end_frame}) lies outside the current utterance "
                           f"of length {window.current_length}")
    first = (window.current_offset + segment.start_frame) // downsample_factor
    last = (window.current_offset + segment.end_frame - 1) // downsample_factor
    return first, last


def slice_segment_encodings(encodings: Tensor, window: ContextWindow, segment: Segment, downsample_factor: int) -> Tensor:
    first, last = segment_frame_range(window, segment, downsample_factor)
    if last >= encodings.shape[0]:
        raise ContextError(f"encoder output has {encodings.shape[0]} frames, segment needs frame {last}")
    return encodings[first:last + 1]
