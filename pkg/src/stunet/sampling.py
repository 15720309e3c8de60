"""Spatial pooling and unpooling over a coarsening hierarchy.

Pooling reduces node signals one level at a time with a per-supernode max or
mean, so a mean round trip through direct-copy unpooling reproduces
within-supernode-constant features exactly (each level merges at most two
nodes and (v+v)/2 is exact in binary floating point; a one-shot mean over
four equal values is not). Unpooling lifts coarse signals back level by
level with one of three strategies: plain copy, a learned per-slot linear
(slot order given by finer-graph degree), or the slot output concatenated
with member structure statistics and linearly mixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .partition import PartitionMap
from .tensor import Tensor

UNPOOL_MODES = ("direct_copy", "ordered_deconv", "weighted_deconv")

MAX_GROUP = 2  # matching contraction merges at most two nodes per level
STRUCT_FEATURES = 3  # per-member structure statistics fed to weighted_deconv


@dataclass
class UnpoolStrategy:
    """One unpooling site: mode plus its parameters, reused at every level.

    ordered_deconv holds one (C, C) matrix per slot; weighted_deconv holds
    the slot matrices plus a (C + 3, C) mixing matrix applied to the slot
    output concatenated with structure statistics.
    """

    mode: str
    slot_w: list | None = None
    mix_w: Tensor | None = None

    def params(self) -> list:
        out = []
        if self.slot_w is not None:
            out.extend(self.slot_w)
        if self.mix_w is not None:
            out.append(self.mix_w)
        return out


def init_unpool(rng: np.random.Generator, mode: str, channels: int) -> UnpoolStrategy:
    """Create unpooling parameters; draws nothing for direct_copy."""
    if mode not in UNPOOL_MODES:
        raise UsageError(f"unknown unpooling strategy {mode!r}")
    if mode == "direct_copy":
        return UnpoolStrategy(mode)
    slots = [T.glorot_from(rng, (channels, channels)) for _ in range(MAX_GROUP)]
    if mode == "ordered_deconv":
        return UnpoolStrategy(mode, slot_w=slots)
    mix = T.glorot_from(rng, (channels + STRUCT_FEATURES, channels))
    return UnpoolStrategy(mode, slot_w=slots, mix_w=mix)


def pool_one(x: Tensor, pm: PartitionMap, level: int, mode: str) -> Tensor:
    """Pool one level: node extent graphs[level].n down to graphs[level+1].n."""
    _check_level(pm, level)
    _check_nodes(x, pm.graphs[level].n)
    return T.segment_reduce(x, pm.parents[level], mode)


def g_pooling(
    x: Tensor,
    pm: PartitionMap,
    mode: str,
    from_level: int = 0,
    to_level: int | None = None,
) -> Tensor:
    """Pool level by level from ``from_level`` to ``to_level`` (coarser)."""
    if to_level is None:
        to_level = pm.levels
    if not 0 <= from_level <= to_level <= pm.levels:
        raise UsageError(f"bad pooling range {from_level}..{to_level}")
    for k in range(from_level, to_level):
        x = pool_one(x, pm, k, mode)
    return x


def st_pool_spatial(seq: Tensor, pm: PartitionMap, mode: str, from_level: int = 0,
                    to_level: int | None = None) -> Tensor:
    """Pool a whole sequence with the single shared map (time-invariant)."""
    if seq.data.ndim < 3:
        raise DimensionError("st_pool_spatial expects a stacked sequence")
    return g_pooling(seq, pm, mode, from_level, to_level)


def _slot_assignment(pm: PartitionMap, level: int) -> np.ndarray:
    """Slot of each finer node within its supernode.

    Members are ranked by finer-graph weighted degree, heaviest first, ties to
    the lower node id.
    """
    deg = pm.graphs[level].degrees()
    slot = np.zeros(pm.graphs[level].n, dtype=np.int64)
    for members in pm.members(level):
        ranked = sorted(members, key=lambda v: (-deg[v], v))
        for r, v in enumerate(ranked):
            slot[v] = r
    return slot


def _member_stats(pm: PartitionMap, level: int) -> np.ndarray:
    """Per-finer-node structure vector: degree over the level's max degree,
    raw incident-weight sum, and member count of its supernode."""
    deg = pm.graphs[level].degrees()
    max_deg = deg.max(initial=0.0)
    n = pm.graphs[level].n
    stats = np.zeros((n, STRUCT_FEATURES))
    for members in pm.members(level):
        for v in members:
            stats[v, 0] = deg[v] / max_deg if max_deg > 0 else 0.0
            stats[v, 1] = deg[v]
            stats[v, 2] = float(len(members))
    return stats


def unpool_one(x: Tensor, pm: PartitionMap, level: int, strategy: UnpoolStrategy) -> Tensor:
    """Lift one level: node extent graphs[level+1].n up to graphs[level].n."""
    _check_level(pm, level)
    _check_nodes(x, pm.graphs[level + 1].n)
    if strategy.mode not in UNPOOL_MODES:
        raise UsageError(f"unknown unpooling strategy {strategy.mode!r}")
    parent = pm.parents[level]
    copied = T.gather_rows(x, parent)
    if strategy.mode == "direct_copy":
        return copied
    slot = _slot_assignment(pm, level)
    lifted = None
    for r, w in enumerate(strategy.slot_w):
        mask = (slot == r).astype(np.float64)[:, None]
        term = T.mul_const(T.matmul(copied, w), mask)
        lifted = term if lifted is None else T.add(lifted, term)
    if strategy.mode == "ordered_deconv":
        return lifted
    stats = _member_stats(pm, level)
    wide = np.ascontiguousarray(
        np.broadcast_to(stats, lifted.data.shape[:-1] + (STRUCT_FEATURES,))
    )
    cat = T.concat_channels(lifted, Tensor(wide))
    return T.matmul(cat, strategy.mix_w)


def unpool(
    x: Tensor,
    pm: PartitionMap,
    strategy: UnpoolStrategy,
    from_level: int | None = None,
    to_level: int = 0,
) -> Tensor:
    """Unpool level by level from ``from_level`` (default coarsest) down to
    ``to_level``, reusing the same strategy weights at every level."""
    if from_level is None:
        from_level = pm.levels
    if not 0 <= to_level <= from_level <= pm.levels:
        raise UsageError(f"bad unpooling range {from_level}..{to_level}")
    for k in range(from_level - 1, to_level - 1, -1):
        x = unpool_one(x, pm, k, strategy)
    return x


def skip_concat(upsampled: Tensor, encoder_features: Tensor) -> Tensor:
    """Join decoder-path features with same-level encoder features, encoder
    features last."""
    if upsampled.data.shape[:-1] != encoder_features.data.shape[:-1]:
        raise DimensionError(
            f"skip_concat extents differ: {upsampled.data.shape} vs "
            f"{encoder_features.data.shape}"
        )
    return T.concat_channels(upsampled, encoder_features)


def _check_level(pm: PartitionMap, level: int) -> None:
    if not 0 <= level < pm.levels:
        raise UsageError(f"level {level} outside hierarchy with {pm.levels} levels")


def _check_nodes(x: Tensor, n: int) -> None:
    if x.data.ndim < 2 or x.data.shape[-2] != n:
        raise DimensionError(f"node extent {x.data.shape} does not match graph n={n}")
