"""Lattice geometry and reproducible disorder.

Sites of the box ``{0, ..., n-1}^d`` are indexed in row-major (C) order, so
site ``i`` has coordinates ``np.unravel_index(i, (n,) * d)``.

Disorder signs come from numpy's Philox4x64 counter-based generator
(numpy >= 1.17, Random123 Philox4x64-10).  The sign of site ``i`` is the top
bit of output word ``i % 4`` of the block at counter ``i // 4`` under key
``seed``.  Because each site's bits depend only on ``(seed, i)``, any subset of
sites can be regenerated in any order.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

from . import FORMAT_VERSION
from ._formats import check_format_version

RNG_ALGORITHM = "numpy.random.Philox(key=seed) 4x64-10, sign = top bit of word i"


@dataclass(frozen=True)
class BoxSpec:
    """The box ``Lambda_n = {0, ..., n-1}^d``."""

    d: int
    n: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d}")
        if int(self.n) != self.n or self.n < 0:
            raise ValueError(f"side length must be a non-negative integer, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def num_sites(self) -> int:
        return self.n**self.d

    def coords(self, index):
        """Row-major coordinates of one or many site indices, shape (..., d)."""
        return np.stack(np.unravel_index(np.asarray(index), self.shape), axis=-1)

    def index(self, coords) -> np.ndarray | int:
        coords = np.asarray(coords)
        idx = np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.shape)
        return int(idx) if np.ndim(idx) == 0 else idx

    @cached_property
    def all_coords(self) -> np.ndarray:
        return self.coords(np.arange(self.num_sites))

    def center(self) -> int:
        """Index of the (lower) central site."""
        return self.index([(self.n - 1) // 2] * self.d)

    def distance_to_exterior(self) -> np.ndarray:
        """Per-site number of lattice steps needed to leave the box."""
        c = self.all_coords
        return np.min(np.minimum(c + 1, self.n - c), axis=1)

    def outer_neighbor_count(self) -> np.ndarray:
        """Per-site number of nearest neighbours lying outside the box."""
        c = self.all_coords
        return np.sum(c == 0, axis=1) + np.sum(c == self.n - 1, axis=1)


@dataclass(frozen=True)
class EdgeSet:
    """Nearest-neighbour edges meeting the box.

    ``interior`` holds index pairs ``(i, j)`` with ``i < j``; ``boundary`` holds
    pairs of an interior site index and the outer site coordinates.
    """

    interior: np.ndarray
    boundary_sites: np.ndarray
    boundary_outer: np.ndarray

    @property
    def num_interior(self) -> int:
        return len(self.interior)

    @property
    def num_boundary(self) -> int:
        return len(self.boundary_sites)

    def __len__(self):
        return self.num_interior + self.num_boundary


def enumerate_edges(box: BoxSpec) -> EdgeSet:
    d, n = box.d, box.n
    if box.num_sites == 0:
        return EdgeSet(
            np.empty((0, 2), dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, d), dtype=np.int64),
        )
    idx = np.arange(box.num_sites).reshape(box.shape)
    interior = []
    bsites, bouter = [], []
    for axis in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        interior.append(np.stack([idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()], axis=1))
        for face, step in ((0, -1), (n - 1, 1)):
            sl = [slice(None)] * d
            sl[axis] = face
            sites = idx[tuple(sl)].ravel()
            outer = box.coords(sites)
            outer[:, axis] += step
            bsites.append(sites)
            bouter.append(outer)
    return EdgeSet(
        np.concatenate(interior).astype(np.int64),
        np.concatenate(bsites).astype(np.int64),
        np.concatenate(bouter).astype(np.int64),
    )


def inner_boundary(box: BoxSpec) -> list[int]:
    """Sites of the box with at least one neighbour in the complement."""
    if box.num_sites == 0:
        return []
    return np.flatnonzero(box.outer_neighbor_count() > 0).tolist()


def neighbors(box: BoxSpec, i: int) -> list[int]:
    """Neighbours of site ``i`` that lie inside the box."""
    c = box.coords(i)
    out = []
    for axis, step in product(range(box.d), (-1, 1)):
        y = c.copy()
        y[axis] += step
        if 0 <= y[axis] < box.n:
            out.append(box.index(y))
    return out


@dataclass(frozen=True, eq=False)
class Environment:
    """Signs ``e_x`` in {-1, +1} together with intensity ``b`` and mean ``h``."""

    box: BoxSpec
    b: float
    h: float
    signs: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        signs = np.asarray(self.signs, dtype=np.int8)
        if signs.shape != (self.box.num_sites,):
            raise ValueError(f"expected {self.box.num_sites} signs, got shape {signs.shape}")
        if not np.all(np.abs(signs) == 1):
            raise ValueError("signs must be +1 or -1")
        signs.setflags(write=False)
        object.__setattr__(self, "signs", signs)

    @property
    def potential(self) -> np.ndarray:
        """Site potential ``v_x = b * e_x + h``."""
        return self.b * self.signs.astype(float) + self.h

    def __eq__(self, other):
        if not isinstance(other, Environment):
            return NotImplemented
        return (
            self.box == other.box
            and self.b == other.b
            and self.h == other.h
            and self.seed == other.seed
            and np.array_equal(self.signs, other.signs)
        )

    def to_json(self) -> str:
        bits = np.packbits(self.signs > 0, bitorder="little")
        return json.dumps(
            {
                "d": self.box.d,
                "n": self.box.n,
                "b": self.b,
                "h": self.h,
                "seed": self.seed,
                "signs": base64.b64encode(bits.tobytes()).decode("ascii"),
                "format_version": FORMAT_VERSION,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        obj = json.loads(text)
        check_format_version(obj.get("format_version"))
        box = BoxSpec(int(obj["d"]), int(obj["n"]))
        bits = np.frombuffer(base64.b64decode(obj["signs"]), dtype=np.uint8)
        plus = np.unpackbits(bits, bitorder="little", count=box.num_sites).astype(bool)
        return cls(box, float(obj["b"]), float(obj["h"]), np.where(plus, 1, -1), int(obj["seed"]))


def _philox_words(seed: int, sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    out = np.empty(sites.shape, dtype=np.uint64)
    if sites.size == 0:
        return out
    lo, hi = int(sites.min()), int(sites.max())
    first = lo // 4
    gen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=first)
    block = gen.random_raw(4 * (hi // 4 - first + 1))
    return block[sites - 4 * first]


def site_signs(seed: int, sites) -> np.ndarray:
    """Signs at the given site indices; independent of which other sites are asked for."""
    words = _philox_words(seed, np.atleast_1d(sites))
    return np.where(words >> np.uint64(63), 1, -1).astype(np.int8)


def sample_environment(box: BoxSpec, b: float, h: float, seed: int) -> Environment:
    signs = site_signs(seed, np.arange(box.num_sites))
    return Environment(box, float(b), float(h), signs, int(seed))


def homogeneous_environment(box: BoxSpec, value: float) -> Environment:
    """Environment with ``v_x == value`` everywhere (b = 0)."""
    return Environment(box, 0.0, float(value), np.ones(box.num_sites, dtype=np.int8), 0)
