"""Synthetic contextual sessions with a hidden session latent.

Token ids ``1..V-K`` form a *chain*: their prototypes sit on a line,
``base + j * spacing * direction``, and latent ``k`` shifts every frame by
``k * spacing * direction``.  Under latent ``k`` only chain positions
``j`` with ``K-1 <= j+k <= J-1`` are used, so each noise-free chain frame is
explained equally well by exactly ``K`` (token, latent) pairs.  The last ``K``
ids are anchors; anchor ``k`` is only spoken in sessions with latent ``k`` and
is the one place the latent becomes observable.  Anchors land in randomly
chosen utterances, so a wider context window is more likely to contain one.

Each spoken token is an onset (frames shared by every token, carrying neither
token nor latent information) followed by identity frames
``prototype(token) + bias(latent) + N(0, noise_std^2)``.  A causal model
therefore cannot name a token before its identity frames arrive, while a
model that sees ahead can.  Silence and onset frames carry no bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .context import Segment, Session, Utterance
from .rng import substream

DATASET_SCHEMA = 1
SILENCE = 0
ONSET = -1


class SynthConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class SynthConfig:
    vocab_size: int = 12
    feature_dim: int = 16
    num_latents: int = 4
    chain_spacing: float = 1.0
    prototype_scale: float = 3.0
    onset_frames: tuple[int, int] = (2, 3)
    token_frames: tuple[int, int] = (2, 3)
    noise_std: float = 0.2
    utterances_per_session: tuple[int, int] = (3, 5)
    segments_per_utterance: tuple[int, int] = (1, 2)
    tokens_per_segment: tuple[int, int] = (2, 4)
    lead_silence: tuple[int, int] = (1, 3)
    segment_margin: tuple[int, int] = (1, 2)
    trailing_silence: tuple[int, int] = (2, 4)
    anchor_probability: float = 0.35
    anchor_token_policy: str = "random_utterances"
    frame_ms: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("onset_frames", "token_frames", "utterances_per_session", "segments_per_utterance", "tokens_per_segment",
                     "lead_silence", "segment_margin", "trailing_silence"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def chain_length(self) -> int:
        return self.vocab_size - self.num_latents

    def anchor_token(self, latent: int) -> int:
        return self.chain_length + 1 + latent

    def chain_tokens(self, latent: int) -> list[int]:
        """Token ids usable under ``latent`` (1-based)."""
        K, J = self.num_latents, self.chain_length
        return [j + 1 for j in range(J) if K - 1 <= j + latent <= J - 1]

    def validate(self) -> None:
        if self.num_latents < 2:
            raise SynthConfigError("need at least two latents for planned ambiguity")
        if self.chain_length < self.num_latents:
            raise SynthConfigError(f"{self.num_latents} latents need at least {self.num_latents} chain tokens, "
                                   f"vocabulary leaves {self.chain_length}")
        if self.feature_dim < 2:
            raise SynthConfigError("feature_dim must be >= 2")
        if self.anchor_token_policy not in ("random_utterances",):
            raise SynthConfigError(f"unknown anchor_token_policy {self.anchor_token_policy!r}")
        for name in ("onset_frames", "token_frames", "utterances_per_session", "segments_per_utterance", "tokens_per_segment",
                     "lead_silence", "segment_margin", "trailing_silence"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise SynthConfigError(f"{name} range ({lo}, {hi}) is invalid")
        if self.token_frames[0] < 1 or self.tokens_per_segment[0] < 1 or self.segments_per_utterance[0] < 1:
            raise SynthConfigError("tokens need frames and segments need tokens")
        if not 0.0 <= self.anchor_probability <= 1.0:
            raise SynthConfigError("anchor_probability must be in [0, 1]")
        if self.noise_std < 0:
            raise SynthConfigError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "SynthConfig":
        return cls(**data)


@dataclass(frozen=True)
class Acoustics:
    """Noise-free geometry derived from the config seed."""

    direction: np.ndarray
    prototypes: np.ndarray  # (V + 1, D); row 0 is silence
    biases: np.ndarray  # (K, D)
    onset: np.ndarray  # (D,)

    def mean(self, token: int, latent: int) -> np.ndarray:
        if token == SILENCE:
            return self.prototypes[0]
        if token == ONSET:
            return self.onset
        return self.prototypes[token] + self.biases[latent]


def build_acoustics(config: SynthConfig) -> Acoustics:
    config.validate()
    rng = substream(config.seed, "acoustics")
    D, V, K = config.feature_dim, config.vocab_size, config.num_latents
    direction = rng.normal(size=D)
    direction /= np.linalg.norm(direction)

    def away_from_direction():
        v = rng.normal(size=D)
        v -= v.dot(direction) * direction
        return config.prototype_scale * v / np.linalg.norm(v)

    base = away_from_direction()
    # centre the chain so that observed positions straddle the base point
    centre = (config.chain_length - 1) / 2.0
    protos = np.zeros((V + 1, D))
    for j in range(config.chain_length):
        protos[j + 1] = base + (j - centre) * config.chain_spacing * direction
    for k in range(K):
        protos[config.anchor_token(k)] = away_from_direction()
    biases = np.array([k * config.chain_spacing * direction for k in range(K)])
    return Acoustics(direction, protos, biases, away_from_direction())


def _randint(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _draw_session(config: SynthConfig, session_seed: int, acoustics: Acoustics) -> tuple[Session, list[list[int]]]:
    rng = substream(config.seed, "sessions", session_seed)
    latent = int(rng.integers(config.num_latents))
    vocab = config.chain_tokens(latent)
    anchor = config.anchor_token(latent)
    n_utts = _randint(rng, config.utterances_per_session)
    has_anchor = rng.random(n_utts) < config.anchor_probability
    if not has_anchor.any():
        has_anchor[rng.integers(n_utts)] = True

    utterances = []
    frame_ids = []
    for u_index in range(n_utts):
        n_segments = _randint(rng, config.segments_per_utterance)
        token_lists = [[int(t) for t in rng.choice(vocab, size=_randint(rng, config.tokens_per_segment))]
                       for _ in range(n_segments)]
        if has_anchor[u_index]:
            seg = int(rng.integers(n_segments))
            pos = int(rng.integers(len(token_lists[seg])))
            token_lists[seg][pos] = anchor

        frame_tokens: list[int] = [0] * _randint(rng, config.lead_silence)
        segments = []
        for tokens in token_lists:
            start = len(frame_tokens)
            frame_tokens += [0] * _randint(rng, config.segment_margin)
            for tok in tokens:
                frame_tokens += [ONSET] * _randint(rng, config.onset_frames)
                frame_tokens += [tok] * _randint(rng, config.token_frames)
            frame_tokens += [0] * _randint(rng, config.trailing_silence)
            segments.append(Segment(start, len(frame_tokens), tuple(tokens)))
        frame_tokens += [0] * _randint(rng, config.lead_silence)

        means = np.array([acoustics.mean(tok, latent) for tok in frame_tokens])
        frames = means + config.noise_std * rng.normal(size=means.shape)
        utterances.append(Utterance(f"s{session_seed}", u_index, frames, segments))
        frame_ids.append(frame_tokens)
    return Session(f"s{session_seed}", utterances, latent), frame_ids


def generate_session(config: SynthConfig, session_seed: int, acoustics: Acoustics | None = None) -> Session:
    """Deterministic in ``(config.seed, session_seed)``."""
    return _draw_session(config, session_seed, acoustics or build_acoustics(config))[0]


def generate_dataset(config: SynthConfig, num_sessions: int, first_seed: int = 0) -> list[Session]:
    acoustics = build_acoustics(config)
    return [generate_session(config, first_seed + i, acoustics) for i in range(num_sessions)]


def frame_token_ids(config: SynthConfig, session_seed: int) -> list[list[int]]:
    """Ground-truth token id per frame for each utterance (``SILENCE``/``ONSET`` for non-token frames)."""
    return _draw_session(config, session_seed, build_acoustics(config))[1]


# ---------------------------------------------------------------------------
# Bayes oracle


def designed_collision_rate(config: SynthConfig) -> float:
    """Fraction of chain token identities lost when the latent is unknown.

    ``1 - (#distinct noise-free chain means) / (#chain tokens)``.
    """
    acoustics = build_acoustics(config)
    means = {tuple(np.round(acoustics.mean(t, k), 9)) for k in range(config.num_latents) for t in config.chain_tokens(k)}
    return 1.0 - len(means) / config.chain_length


def bayes_frame_accuracy(config: SynthConfig, sessions: Sequence[Session], seeds: Sequence[int], with_context: bool) -> float:
    """Per-frame maximum-a-posteriori token accuracy on chain-token frames.

    With context the session latent is known (as if an anchor had been seen);
    without context it is marginalised under a uniform prior.  Exact ties
    are credited fractionally.
    """
    acoustics = build_acoustics(config)
    K = config.num_latents
    combos = [(t, k) for k in range(K) for t in config.chain_tokens(k)]
    means = np.array([acoustics.mean(t, k) for t, k in combos])
    prior = np.array([1.0 / (K * len(config.chain_tokens(k))) for _, k in combos])
    tokens = np.array([t for t, _ in combos])
    latents = np.array([k for _, k in combos])
    var = max(config.noise_std, 1e-12) ** 2
    credit = 0.0
    count = 0
    for session, seed in zip(sessions, seeds):
        for utt, ids in zip(session.utterances, frame_token_ids(config, seed)):
            for frame, true_tok in zip(utt.features, ids):
                if not 1 <= true_tok <= config.chain_length:
                    continue
                loglik = -np.sum((means - frame) ** 2, axis=1) / (2 * var) + np.log(prior)
                if with_context:
                    loglik = np.where(latents == session.latent, loglik, -np.inf)
                scores = {}
                for tok in np.unique(tokens):
                    sel = loglik[tokens == tok]
                    peak = sel.max()
                    scores[int(tok)] = -np.inf if not np.isfinite(peak) else peak + math.log(np.exp(sel - peak).sum())
                best = max(scores.values())
                winners = [t for t, s in scores.items() if s >= best - 1e-9 * max(1.0, abs(best))]
                credit += (true_tok in winners) / len(winners)
                count += 1
    return credit / count if count else float("nan")


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(sessions: Iterable[Session], path: str | Path, feature_dim: int, vocab_size: int, frame_ms: float = 10.0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        header = {"schema": DATASET_SCHEMA, "feature_dim": feature_dim, "frame_ms": frame_ms, "vocab_size": vocab_size}
        fh.write(json.dumps(header) + "\n")
        for session in sessions:
            for utt in sorted(session.utterances, key=lambda u: u.index):
                record = {
                    "session_id": session.session_id,
                    "index": utt.index,
                    "frames": utt.features.tolist(),
                    "segments": [{"start": s.start_frame, "end": s.end_frame, "labels": list(s.labels)} for s in utt.segments],
                }
                if session.latent is not None:
                    record["latent"] = session.latent
                fh.write(json.dumps(record) + "\n")


@dataclass
class DatasetHeader:
    feature_dim: int
    frame_ms: float
    vocab_size: int


def read_dataset(path: str | Path) -> tuple[DatasetHeader, list[Session]]:
    sessions: list[Session] = []
    header = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(lineno, f"invalid JSON ({exc.msg})") from exc
            if lineno == 1:
                if not isinstance(obj, dict) or obj.get("schema") != DATASET_SCHEMA or "feature_dim" not in obj:
                    raise DatasetFormatError(1, "missing or invalid header object")
                try:
                    header = DatasetHeader(int(obj["feature_dim"]), float(obj["frame_ms"]), int(obj["vocab_size"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetFormatError(1, f"incomplete header ({exc})") from exc
                continue
            try:
                frames = np.array(obj["frames"], dtype=np.float64)
                segments = [Segment(int(s["start"]), int(s["end"]), tuple(int(y) for y in s["labels"])) for s in obj["segments"]]
                utt = Utterance(str(obj["session_id"]), int(obj["index"]), frames, segments)
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(lineno, f"malformed utterance record ({exc})") from exc
            if utt.features.shape[1] != header.feature_dim:
                raise DatasetFormatError(lineno, f"frames have dimension {utt.features.shape[1]}, header says {header.feature_dim}")
            if sessions and sessions[-1].session_id == utt.session_id:
                if utt.index != sessions[-1].utterances[-1].index + 1:
                    raise DatasetFormatError(lineno, f"utterance index {utt.index} out of order")
                sessions[-1].utterances.append(utt)
            else:
                sessions.append(Session(utt.session_id, [utt], obj.get("latent")))
    if header is None:
        raise DatasetFormatError(1, "empty file: header missing")
    return header, sessions
