"""Spatial-aware replay: an online Poisson-disk buffer over pose space.

Samples are accepted only if they lie at least ``radius`` away (hybrid pose
distance) from everything already stored. When the buffer is full, the
sample sitting in the densest neighbourhood is evicted to make room.
A classic reservoir-sampling insert is provided as a baseline.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any, Hashable, Iterable, TextIO

import numpy as np

from .errors import EmptyBufferError, InsufficientSamplesError, InvalidInputError
from .geometry import Pose, hybrid_distance_array
from .seeding import as_rng


@dataclass(frozen=True)
class ReplaySample:
    sample_id: Hashable
    scene_id: int
    pose: Pose
    payload_ref: Any = None


@dataclass(frozen=True)
class SarsConfig:
    capacity: int = 1
    radius: float = 0.5
    lam: float = 1.0
    # "global": spacing enforced across all scenes; "scene": only within a scene.
    radius_scope: str = "global"

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidInputError(f"capacity must be >= 1, got {self.capacity}")
        if not self.radius >= 0:
            raise InvalidInputError(f"radius must be >= 0, got {self.radius}")
        if not self.lam >= 0:
            raise InvalidInputError(f"lambda must be >= 0, got {self.lam}")
        if self.radius_scope not in ("global", "scene"):
            raise InvalidInputError(f"unknown radius_scope {self.radius_scope!r}")


class Outcome(enum.Enum):
    ACCEPTED_NEW = "accepted_new"
    REJECTED_REDUNDANT = "rejected_redundant"
    ACCEPTED_WITH_EVICTION = "accepted_with_eviction"


@dataclass(frozen=True)
class InsertOutcome:
    kind: Outcome
    evicted_id: Hashable = None

    @property
    def accepted(self) -> bool:
        return self.kind is not Outcome.REJECTED_REDUNDANT


class ReplayBuffer:
    """Capacity-bounded store of pose-tagged samples.

    Positions and quaternions are mirrored into contiguous arrays so that
    distance queries are a single vectorised scan.
    """

    def __init__(self, config: SarsConfig):
        self.config = config
        self.samples: list[ReplaySample] = []
        self.insertion_index: list[int] = []
        self._next_index = 0
        self._scenes: set[int] = set()
        self._pos = np.empty((0, 3))
        self._quat = np.empty((0, 4))
        self._scene_ids = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def capacity(self) -> int:
        return self.config.capacity

    @property
    def scenes(self) -> frozenset[int]:
        return frozenset(self._scenes)

    def register_scene(self, scene_id: int) -> None:
        self._scenes.add(int(scene_id))

    def grow(self, extra: int) -> None:
        """Raise the capacity by ``extra`` slots."""
        if extra < 0:
            raise InvalidInputError("capacity can only grow")
        c = self.config
        self.config = SarsConfig(c.capacity + int(extra), c.radius, c.lam, c.radius_scope)

    def ids(self) -> list[Hashable]:
        return [s.sample_id for s in self.samples]

    # internal mutation -----------------------------------------------------

    def _check(self, s: ReplaySample) -> None:
        if s.scene_id not in self._scenes:
            raise InvalidInputError(f"scene {s.scene_id} is not registered with the buffer")

    def _append(self, s: ReplaySample, index: int | None = None) -> None:
        if index is None:
            index = self._next_index
        self._next_index = max(self._next_index, index + 1)
        self.samples.append(s)
        self.insertion_index.append(index)
        self._pos = np.vstack([self._pos, s.pose.position[None]])
        self._quat = np.vstack([self._quat, s.pose.orientation.as_array()[None]])
        self._scene_ids = np.append(self._scene_ids, s.scene_id)

    def _remove_at(self, i: int) -> ReplaySample:
        s = self.samples.pop(i)
        self.insertion_index.pop(i)
        self._pos = np.delete(self._pos, i, axis=0)
        self._quat = np.delete(self._quat, i, axis=0)
        self._scene_ids = np.delete(self._scene_ids, i)
        return s

    def _replace_at(self, i: int, s: ReplaySample) -> ReplaySample:
        old = self.samples[i]
        self.samples[i] = s
        self.insertion_index[i] = self._next_index
        self._next_index += 1
        self._pos[i] = s.pose.position
        self._quat[i] = s.pose.orientation.as_array()
        self._scene_ids[i] = s.scene_id
        return old

    # queries -------------------------------------------------------------------

    def distances_to(self, s: ReplaySample) -> np.ndarray:
        return hybrid_distance_array(
            self._pos, self._quat, s.pose.position, s.pose.orientation.as_array(), self.config.lam
        )

    def pairwise_distances(self) -> np.ndarray:
        """Symmetric distance matrix with ``inf`` on the diagonal and, for
        scene-scoped radii, between samples of different scenes."""
        D = hybrid_distance_array(
            self._pos[:, None, :], self._quat[:, None, :], self._pos[None, :, :], self._quat[None, :, :], self.config.lam
        )
        np.fill_diagonal(D, np.inf)
        if self.config.radius_scope == "scene":
            D[self._scene_ids[:, None] != self._scene_ids[None, :]] = np.inf
        return D

    def snapshot(self) -> list[ReplaySample]:
        return list(self.samples)

    # serialisation -----------------------------------------------------------

    def dump(self, fh: TextIO) -> None:
        """Write the buffer as JSON lines: one header, then one record per sample."""
        c = self.config
        header = {
            "type": "header",
            "capacity": c.capacity,
            "radius": c.radius,
            "lambda": c.lam,
            "radius_scope": c.radius_scope,
            "next_index": self._next_index,
            "scenes": sorted(self._scenes),
        }
        fh.write(json.dumps(header) + "\n")
        for s, idx in zip(self.samples, self.insertion_index):
            rec = {
                "type": "sample",
                "sample_id": s.sample_id,
                "scene_id": s.scene_id,
                "pose": s.pose.to_row(),
                "insertion_index": idx,
                "payload_ref": s.payload_ref,
            }
            fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, lines: Iterable[str]) -> ReplayBuffer:
        it = (json.loads(line) for line in lines if line.strip())
        header = next(it)
        if header.get("type") != "header":
            raise InvalidInputError("buffer dump must start with a header record")
        buf = cls(SarsConfig(header["capacity"], header["radius"], header["lambda"], header["radius_scope"]))
        for sid in header["scenes"]:
            buf.register_scene(sid)
        for rec in it:
            ref = rec.get("payload_ref")
            if isinstance(ref, list):
                ref = tuple(ref)
            sid = rec["sample_id"]
            if isinstance(sid, list):
                sid = tuple(sid)
            s = ReplaySample(sid, rec["scene_id"], Pose.from_row(rec["pose"]), ref)
            buf._append(s, rec["insertion_index"])
        buf._next_index = header["next_index"]
        return buf


def _neighbour_mask(buffer: ReplayBuffer, s: ReplaySample) -> np.ndarray:
    if buffer.config.radius_scope == "scene":
        return buffer._scene_ids == s.scene_id
    return np.ones(len(buffer), dtype=bool)


def min_distance_to_buffer(buffer: ReplayBuffer, s: ReplaySample) -> float:
    """Smallest hybrid distance from ``s`` to any stored sample in its scope."""
    if len(buffer) == 0:
        raise EmptyBufferError("buffer is empty")
    d = buffer.distances_to(s)[_neighbour_mask(buffer, s)]
    if d.size == 0:
        return float("inf")
    return float(d.min())


def select_dense_sample(buffer: ReplayBuffer) -> Hashable:
    """Id of the sample with the smallest nearest-neighbour distance.

    The closest pair always ties on that key, so ties are broken by the
    smaller second-nearest-neighbour distance and then by the earlier
    insertion index.
    """
    return buffer.samples[_dense_position(buffer)].sample_id


def _dense_position(buffer: ReplayBuffer) -> int:
    n = len(buffer)
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    D = buffer.pairwise_distances()
    part = np.sort(D, axis=1)
    nn1 = part[:, 0]
    nn2 = part[:, 1] if n > 2 else np.full(n, np.inf)
    order = np.lexsort((np.asarray(buffer.insertion_index), nn2, nn1))
    return int(order[0])


def try_insert(buffer: ReplayBuffer, s: ReplaySample) -> InsertOutcome:
    """One SARS update step; mutates ``buffer`` unless the sample is rejected."""
    buffer._check(s)
    if len(buffer) == 0:
        buffer._append(s)
        return InsertOutcome(Outcome.ACCEPTED_NEW)
    if min_distance_to_buffer(buffer, s) < buffer.config.radius:
        return InsertOutcome(Outcome.REJECTED_REDUNDANT)
    if len(buffer) < buffer.capacity:
        buffer._append(s)
        return InsertOutcome(Outcome.ACCEPTED_NEW)
    # A full single-slot buffer has no density ranking; its one sample goes.
    evicted = buffer._remove_at(_dense_position(buffer) if len(buffer) > 1 else 0)
    buffer._append(s)
    return InsertOutcome(Outcome.ACCEPTED_WITH_EVICTION, evicted.sample_id)


def reservoir_insert(
    buffer: ReplayBuffer, s: ReplaySample, stream_index: int, rng_seed: int | np.random.Generator | None = None
) -> InsertOutcome:
    """Classic reservoir sampling; no spacing test.

    ``stream_index`` is the 0-based count of samples seen before ``s``. A
    declined sample is reported as ``REJECTED_REDUNDANT``.
    """
    buffer._check(s)
    if len(buffer) < buffer.capacity:
        buffer._append(s)
        return InsertOutcome(Outcome.ACCEPTED_NEW)
    rng = as_rng(rng_seed)
    j = int(rng.integers(0, stream_index + 1))
    if j < buffer.capacity:
        old = buffer._replace_at(j, s)
        return InsertOutcome(Outcome.ACCEPTED_WITH_EVICTION, old.sample_id)
    return InsertOutcome(Outcome.REJECTED_REDUNDANT)


def sample_replay_batch(
    buffer: ReplayBuffer, batch_size: int, rng_seed: int | np.random.Generator | None = None
) -> list[ReplaySample]:
    """Uniform draw without replacement; the whole buffer if it is smaller."""
    n = len(buffer)
    if n == 0:
        raise EmptyBufferError("cannot draw a replay batch from an empty buffer")
    rng = as_rng(rng_seed)
    k = min(int(batch_size), n)
    idx = rng.permutation(n)[:k] if k == n else rng.choice(n, size=k, replace=False)
    return [buffer.samples[i] for i in idx]


def dispersion_stats(buffer: ReplayBuffer) -> tuple[float, float]:
    """``(min pairwise distance, mean nearest-neighbour distance)``."""
    if len(buffer) < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {len(buffer)}")
    D = buffer.pairwise_distances()
    nn = D.min(axis=1)
    finite = nn[np.isfinite(nn)]
    if finite.size == 0:
        return float("inf"), float("inf")
    return float(finite.min()), float(finite.mean())
