"""Synthetic acoustic-frame corpus with a broad-class / sub-class hierarchy.

Each utterance is a first-order Markov chain over sub-classes that emits
Gaussian frames.  Sub-class means sit on spheres around one centroid per
broad class; ``overlap`` pulls the centroids together.  Every broad class
has its own within-class covariance shape (a random rotation of a fixed
anisotropic spectrum), so the best linear transform differs by region.

Random streams: the class geometry uses ``seed``; the train, cv and test
splits use ``seed + 1``, ``seed + 2`` and ``seed + 3``.
"""
from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_labels
from .linalg import make_rng

__all__ = [
    "ClassHierarchy",
    "SynthConfig",
    "FrameDataset",
    "SynthModel",
    "build_synth_model",
    "generate",
    "derive_broad_labels",
    "stationary_distribution",
    "FRAMES_MAGIC",
]

FRAMES_MAGIC = b"MIXNET-FRAMES v1"
SPLITS = ("train", "cv", "test")


@dataclass(frozen=True)
class ClassHierarchy:
    """Sub-classes grouped into broad classes, numbered broad class by broad class."""

    counts: tuple = (17, 27, 1)
    names: tuple = ("voiced", "unvoiced", "silence")

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        if len(self.counts) != len(self.names):
            raise ValueError("one name per broad class is required")
        if not self.counts or min(self.counts) < 1:
            raise ValueError("every broad class needs at least one sub-class")

    @property
    def n_broad(self) -> int:
        return len(self.counts)

    @property
    def n_sub(self) -> int:
        return sum(self.counts)

    @property
    def sub_to_broad(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_broad), self.counts)

    def to_dict(self):
        return {"counts": list(self.counts), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["counts"]), tuple(d["names"]))


def derive_broad_labels(subclass_labels, hierarchy: ClassHierarchy) -> np.ndarray:
    sub = np.asarray(subclass_labels)
    if sub.size and (sub.min() < 0 or sub.max() >= hierarchy.n_sub):
        bad = sub[(sub < 0) | (sub >= hierarchy.n_sub)][0]
        raise ValueError(f"sub-class {bad} is not mapped by the hierarchy")
    return hierarchy.sub_to_broad[sub.astype(np.int64)]


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 26
    centroid_radius: float = 5.0
    subclass_spread: float = 3.0
    within_scale: float = 1.0
    anisotropy: float = 30.0
    overlap: float = 0.5
    self_transition: float = 0.85
    within_broad_transition: float = 0.6
    frames_per_utterance: int = 150
    n_train: int = 400
    n_cv: int = 40
    n_test: int = 40
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        for name in ("self_transition", "within_broad_transition"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        for name in ("dim", "frames_per_utterance", "n_train", "n_cv", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.within_scale < 0 or self.anisotropy < 1:
            raise ValueError("within_scale must be >= 0 and anisotropy >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class FrameDataset:
    """Frames in utterance order with sub-class and broad-class labels."""

    frames: np.ndarray
    subclass: np.ndarray
    broad: np.ndarray
    lengths: np.ndarray
    utterance_ids: np.ndarray
    hierarchy: ClassHierarchy = field(default_factory=ClassHierarchy)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        n = self.frames.shape[0]
        self.subclass = check_labels(self.subclass, n, self.hierarchy.n_sub, "subclass labels")
        self.broad = check_labels(self.broad, n, self.hierarchy.n_broad, "broad labels")
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.utterance_ids = np.asarray(self.utterance_ids, dtype=np.int64)
        if self.lengths.sum() != n or self.lengths.shape != self.utterance_ids.shape:
            raise ValueError("utterance lengths/ids do not match the frame count")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def utterance_index(self) -> np.ndarray:
        """Per-frame utterance id."""
        return np.repeat(self.utterance_ids, self.lengths)

    def select_utterances(self, k: int) -> "FrameDataset":
        """First ``k`` utterances."""
        n = int(self.lengths[:k].sum())
        return FrameDataset(self.frames[:n], self.subclass[:n], self.broad[:n],
                            self.lengths[:k], self.utterance_ids[:k], self.hierarchy, dict(self.meta))

    def to_bytes(self) -> bytes:
        manifest = {
            "dim": self.dim,
            "n_frames": self.n_frames,
            "lengths": self.lengths.tolist(),
            "utterance_ids": self.utterance_ids.tolist(),
            "hierarchy": self.hierarchy.to_dict(),
            "meta": self.meta,
        }
        buf = io.BytesIO()
        buf.write(FRAMES_MAGIC + b"\n")
        buf.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        buf.write(self.frames.astype("<f8").tobytes())
        buf.write(self.subclass.astype("<i4").tobytes())
        buf.write(self.broad.astype("<i4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FrameDataset":
        magic, rest = raw.split(b"\n", 1)
        if magic != FRAMES_MAGIC:
            raise ValueError(f"not a {FRAMES_MAGIC.decode()} file")
        header, body = rest.split(b"\n", 1)
        m = json.loads(header)
        n, d = m["n_frames"], m["dim"]
        expected = n * d * 8 + 2 * n * 4
        if len(body) != expected:
            raise ValueError(f"frame payload has {len(body)} bytes, expected {expected}")
        frames = np.frombuffer(body, "<f8", n * d).reshape(n, d).astype(np.float64)
        sub = np.frombuffer(body, "<i4", n, offset=n * d * 8).astype(np.int64)
        broad = np.frombuffer(body, "<i4", n, offset=n * d * 8 + n * 4).astype(np.int64)
        return cls(frames, sub, broad, m["lengths"], m["utterance_ids"],
                   ClassHierarchy.from_dict(m["hierarchy"]), m.get("meta", {}))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FrameDataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class SynthModel:
    """Generative parameters drawn from the geometry seed."""

    means: np.ndarray          # (n_sub, dim)
    centroids: np.ndarray      # (n_broad, dim)
    cov_factors: np.ndarray    # (n_broad, dim, dim); frame noise = factor @ z
    transition: np.ndarray     # (n_sub, n_sub)
    hierarchy: ClassHierarchy

    @property
    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.transition)


def _unit_vectors(rng, k, d):
    v = rng.standard_normal((k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def transition_matrix(hierarchy: ClassHierarchy, p_self: float, p_within: float) -> np.ndarray:
    """Sub-class transitions: stay with ``p_self``; of the remainder a
    ``p_within`` share moves within the broad class (when possible)."""
    S = hierarchy.n_sub
    broad = hierarchy.sub_to_broad
    T = np.zeros((S, S))
    for s in range(S):
        same = np.flatnonzero((broad == broad[s]) & (np.arange(S) != s))
        other = np.flatnonzero(broad != broad[s])
        move = 1.0 - p_self
        share_in = p_within if same.size and other.size else (1.0 if same.size else 0.0)
        T[s, s] = p_self
        if same.size:
            T[s, same] += move * share_in / same.size
        if other.size:
            T[s, other] += move * (1.0 - share_in) / other.size
        if not same.size and not other.size:
            T[s, s] = 1.0
    return T


def stationary_distribution(T) -> np.ndarray:
    """Left eigenvector of ``T`` for eigenvalue 1, normalized to sum to 1."""
    T = np.asarray(T, dtype=np.float64)
    n = T.shape[0]
    # solve pi (T - I) = 0 with sum(pi) = 1
    A = np.vstack([(T - np.eye(n)).T, np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def build_synth_model(cfg: SynthConfig, hierarchy: ClassHierarchy | None = None) -> SynthModel:
    hierarchy = hierarchy or ClassHierarchy()
    rng = make_rng(cfg.seed)
    d = cfg.dim
    centroids = cfg.centroid_radius * (1.0 - cfg.overlap) * _unit_vectors(rng, hierarchy.n_broad, d)
    broad = hierarchy.sub_to_broad
    means = centroids[broad] + cfg.subclass_spread * _unit_vectors(rng, hierarchy.n_sub, d)
    spectrum = np.geomspace(1.0 / np.sqrt(cfg.anisotropy), np.sqrt(cfg.anisotropy), d)
    factors = np.empty((hierarchy.n_broad, d, d))
    for b in range(hierarchy.n_broad):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q *= np.sign(np.diag(r))
        factors[b] = cfg.within_scale * q * spectrum[None, :]
    T = transition_matrix(hierarchy, cfg.self_transition, cfg.within_broad_transition)
    return SynthModel(means, centroids, factors, T, hierarchy)


def _generate_split(model: SynthModel, cfg: SynthConfig, n_utt: int, rng, first_id: int, split: str):
    S = model.hierarchy.n_sub
    L = cfg.frames_per_utterance
    cum = np.cumsum(model.transition, axis=1)
    cum[:, -1] = 1.0
    pi_cum = np.cumsum(model.stationary)
    pi_cum[-1] = 1.0
    labels = np.empty(n_utt * L, dtype=np.int64)
    frames = np.empty((n_utt * L, cfg.dim))
    broad_of = model.hierarchy.sub_to_broad
    for u in range(n_utt):
        draws = rng.random(L)
        s = min(int(np.searchsorted(pi_cum, draws[0], side="right")), S - 1)
        seq = labels[u * L:(u + 1) * L]
        seq[0] = s
        for t in range(1, L):
            s = min(int(np.searchsorted(cum[s], draws[t], side="right")), S - 1)
            seq[t] = s
        z = rng.standard_normal((L, cfg.dim))
        noise = np.einsum("tij,tj->ti", model.cov_factors[broad_of[seq]], z)
        frames[u * L:(u + 1) * L] = model.means[seq] + noise
    return FrameDataset(
        frames, labels, broad_of[labels], np.full(n_utt, L),
        np.arange(first_id, first_id + n_utt), model.hierarchy,
        {"split": split, "seed": cfg.seed},
    )


def generate(cfg: SynthConfig, hierarchy: ClassHierarchy | None = None):
    """Return ``(train, cv, test)`` datasets with disjoint utterance ids."""
    model = build_synth_model(cfg, hierarchy)
    counts = (cfg.n_train, cfg.n_cv, cfg.n_test)
    out, first = [], 0
    for k, (split, n_utt) in enumerate(zip(SPLITS, counts)):
        out.append(_generate_split(model, cfg, n_utt, make_rng(cfg.seed + k + 1), first, split))
        first += n_utt
    return tuple(out)
