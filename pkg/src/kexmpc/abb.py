"""Arithmetic black box: 3-party replicated secret sharing over Z_2^k.

A secret x is split as x = x0 + x1 + x2 (mod 2^k); peer i holds the
component pair (x_i, x_{i+1}).  Addition and scaling by public values are
local; multiplication costs one communication round per batch, using
zero-sharings derived from pairwise PRG keys established at session start.

All values travel as uint64 numpy arrays; a ring narrower than 64 bits is
reduced by masking, which is exact because 2^k divides 2^64.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np

from .transport import DesyncError

logger = logging.getLogger("kexmpc.abb")

U64 = np.uint64
_FULL = 0xFFFFFFFFFFFFFFFF


class AbbError(Exception):
    pass


class ConfigMismatchError(AbbError):
    """The three peers were started with inconsistent session parameters."""


@dataclass(frozen=True)
class RingConfig:
    """Width of the ring Z_2^k.  Protocol values stay far below 2^(k-2)."""

    bits: int = 64

    def __post_init__(self):
        if not 32 <= self.bits <= 64:
            raise ValueError("ring width must be between 32 and 64 bits")

    @property
    def mask(self) -> np.uint64:
        return U64(_FULL if self.bits == 64 else (1 << self.bits) - 1)


class ShareArray:
    """One peer's replicated components of an array of secret ring elements.

    Supports the local operations: negation, addition and subtraction of
    shares, and multiplication by public integers.  Anything interactive
    (multiplication of two secrets, opening) goes through the session.
    """

    __slots__ = ("c0", "c1")

    def __init__(self, c0: np.ndarray, c1: np.ndarray):
        self.c0 = c0
        self.c1 = c1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.c0.shape

    def __len__(self) -> int:
        return len(self.c0)

    def __add__(self, other: "ShareArray") -> "ShareArray":
        return ShareArray(self.c0 + other.c0, self.c1 + other.c1)

    def __sub__(self, other: "ShareArray") -> "ShareArray":
        return ShareArray(self.c0 - other.c0, self.c1 - other.c1)

    def __neg__(self) -> "ShareArray":
        zero = U64(0)
        return ShareArray(zero - self.c0, zero - self.c1)

    def scale(self, factor) -> "ShareArray":
        """Multiply by a public integer or uint64 array (local)."""
        f = _public(factor)
        return ShareArray(self.c0 * f, self.c1 * f)

    def __getitem__(self, key) -> "ShareArray":
        return ShareArray(self.c0[key], self.c1[key])

    def __setitem__(self, key, value: "ShareArray") -> None:
        self.c0[key] = value.c0
        self.c1[key] = value.c1

    def reshape(self, *shape) -> "ShareArray":
        return ShareArray(self.c0.reshape(*shape), self.c1.reshape(*shape))

    def take(self, indices, axis=None) -> "ShareArray":
        return ShareArray(
            np.take(self.c0, indices, axis=axis), np.take(self.c1, indices, axis=axis)
        )

    def copy(self) -> "ShareArray":
        return ShareArray(self.c0.copy(), self.c1.copy())

    def ravel(self) -> "ShareArray":
        return ShareArray(self.c0.ravel(), self.c1.ravel())

    def sum(self, axis=None) -> "ShareArray":
        # np.asarray keeps 0-d results as arrays: scalar uint64 would warn on wrap
        return ShareArray(
            np.asarray(self.c0.sum(axis=axis, dtype=U64)),
            np.asarray(self.c1.sum(axis=axis, dtype=U64)),
        )

    @classmethod
    def concat(cls, parts: list["ShareArray"]) -> "ShareArray":
        return cls(
            np.concatenate([p.c0.ravel() for p in parts]),
            np.concatenate([p.c1.ravel() for p in parts]),
        )

    @classmethod
    def stack(cls, parts: list["ShareArray"], axis: int = -1) -> "ShareArray":
        return cls(
            np.stack([p.c0 for p in parts], axis=axis),
            np.stack([p.c1 for p in parts], axis=axis),
        )


def _public(value) -> np.ndarray | np.uint64:
    """Coerce a public operand to uint64, reducing Python ints mod 2^64."""
    if isinstance(value, np.ndarray):
        return value if value.dtype == U64 else value.astype(U64)
    return U64(int(value) & _FULL)


class KeyedStream:
    """Deterministic uint64 stream from a 128-bit key, shared by two peers.

    Both holders must draw identical block sizes in identical order; the
    data-oblivious protocol flow guarantees this.
    """

    def __init__(self, key: bytes):
        if len(key) != 16:
            raise ValueError("key must be 16 bytes")
        self.key = key
        words = np.frombuffer(key, dtype=U64)
        self._gen = np.random.Generator(np.random.Philox(key=words))

    def draw(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 1 << 64, size=n, dtype=U64)

    def draw_key(self) -> bytes:
        return self.draw(2).tobytes()


def derive_key(seed: int, label: str) -> bytes:
    return hashlib.sha256(f"{seed}:{label}".encode()).digest()[:16]


class AbbSession:
    """Per-peer handle on a running three-party computation.

    Establishes the pairwise PRG keys in a setup round: peer i draws key
    k_i and sends it to peer i-1, ending with peer i holding (k_i, k_{i+1}),
    mirroring the share-component layout.  `setup_seed` makes the keys (and
    hence every internal coin) reproducible; leave it None in production.
    """

    def __init__(self, endpoint, ring: RingConfig = RingConfig(), setup_seed: int | None = None,
                 config_digest: bytes | None = None):
        self.endpoint = endpoint
        self.ring = ring
        self.peer = endpoint.peer_id
        self.stats: dict[str, int] = {
            "mul_elements": 0,
            "opened_elements": 0,
            "rand_bits": 0,
            "max_weight_set_calls": 0,
        }
        prev_peer = (self.peer - 1) % 3
        next_peer = (self.peer + 1) % 3
        if setup_seed is None:
            own_key = os.urandom(16)
        else:
            own_key = derive_key(setup_seed, f"pairkey:{self.peer}")
        digest = config_digest or b"\x00" * 8
        hello = own_key + digest
        incoming = endpoint.exchange_round({prev_peer: hello, next_peer: digest})
        next_key = incoming[next_peer][:16]
        for frm, payload in incoming.items():
            if payload[-8:] != digest:
                raise ConfigMismatchError(
                    f"peer {frm} runs a different session configuration"
                )
        # low stream: key k_peer (shared with previous peer);
        # high stream: key k_{peer+1} (shared with next peer).
        self.low = KeyedStream(own_key)
        self.high = KeyedStream(next_key)

    # -- local helpers ----------------------------------------------------

    def _mask(self, arr: np.ndarray) -> np.ndarray:
        return arr & self.ring.mask

    def const(self, values) -> ShareArray:
        """Share of a public constant: components (v, 0, 0)."""
        v = np.asarray(values)
        v = self._mask(v.astype(U64) if v.dtype != U64 else v)
        zero = np.zeros(v.shape, dtype=U64)
        if self.peer == 0:
            return ShareArray(v.copy(), zero)
        if self.peer == 2:
            return ShareArray(zero, v.copy())
        return ShareArray(zero, zero.copy())

    def zeros(self, shape) -> ShareArray:
        return ShareArray(np.zeros(shape, dtype=U64), np.zeros(shape, dtype=U64))

    def add_public(self, x: ShareArray, values) -> ShareArray:
        """x + public constant; the constant is absorbed by component 0."""
        v = _public(values)
        if self.peer == 0:
            return ShareArray(x.c0 + v, x.c1.copy())
        if self.peer == 2:
            return ShareArray(x.c0.copy(), x.c1 + v)
        return x.copy()

    # -- interactive primitives -------------------------------------------

    def _round(self, to_prev: np.ndarray) -> np.ndarray:
        """Send an array to the previous peer, receive one from the next."""
        prev_peer = (self.peer - 1) % 3
        next_peer = (self.peer + 1) % 3
        incoming = self.endpoint.exchange_round({prev_peer: to_prev.tobytes()})
        try:
            blob = incoming[next_peer]
        except KeyError:
            raise DesyncError("missing resharing message") from None
        return np.frombuffer(blob, dtype=U64).reshape(to_prev.shape)

    def mul(self, x: ShareArray, y: ShareArray) -> ShareArray:
        return self.mul_batch([(x, y)])[0]

    def mul_batch(self, pairs: list[tuple[ShareArray, ShareArray]]) -> list[ShareArray]:
        """Element-wise products, one communication round for the whole batch."""
        if not pairs:
            raise ValueError("empty multiplication batch")
        flats = []
        shapes = []
        for x, y in pairs:
            if x.shape != y.shape:
                raise ValueError("operand shapes differ")
            shapes.append(x.shape)
            z = x.c0 * y.c0 + x.c0 * y.c1 + x.c1 * y.c0
            flats.append(z.ravel())
        z_all = np.concatenate(flats) if len(flats) > 1 else flats[0]
        n = z_all.size
        alpha = self.low.draw(n) - self.high.draw(n)
        z_all = self._mask(z_all + alpha)
        self.stats["mul_elements"] += n
        z_next = self._round(z_all)
        out = []
        offset = 0
        for shape in shapes:
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            sl = slice(offset, offset + size)
            out.append(ShareArray(z_all[sl].reshape(shape), z_next[sl].reshape(shape)))
            offset += size
        return out

    def open(self, x: ShareArray) -> np.ndarray:
        """Reconstruct x at all peers (each reveals one component)."""
        next_peer = (self.peer + 1) % 3
        incoming = self.endpoint.exchange_round({next_peer: x.c0.tobytes()})
        prev_peer = (self.peer - 1) % 3
        missing = np.frombuffer(incoming[prev_peer], dtype=U64).reshape(x.shape)
        self.stats["opened_elements"] += x.c0.size
        return self._mask(x.c0 + x.c1 + missing)

    def open_to(self, x: ShareArray, target: int) -> np.ndarray | None:
        """Reconstruct x at one designated peer only."""
        sender = (target + 2) % 3
        if self.peer == sender:
            self.endpoint.exchange_round({target: x.c0.tobytes()})
            return None
        incoming = self.endpoint.exchange_round({})
        if self.peer != target:
            return None
        blob = incoming[sender]
        missing = np.frombuffer(blob, dtype=U64).reshape(x.shape)
        return self._mask(x.c0 + x.c1 + missing)

    def prss_uniform(self, shape) -> ShareArray:
        """Uniformly random shared ring element, zero communication."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        c0 = self.low.draw(n).reshape(shape)
        c1 = self.high.draw(n).reshape(shape)
        return ShareArray(c0, c1)

    def rand_bits(self, shape) -> ShareArray:
        """Shared uniform bits, unknown to any single peer.

        Each pairwise key contributes one locally-known bit; the secret bit
        is their XOR, folded in with two multiplication rounds.
        """
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        own = self.low.draw(n) & U64(1)
        nxt = self.high.draw(n) & U64(1)
        zero = np.zeros(n, dtype=U64)

        def component_value(j: int) -> ShareArray:
            c0 = own if self.peer == j else zero
            c1 = nxt if (self.peer + 1) % 3 == j else zero
            return ShareArray(c0.copy(), c1.copy())

        b0, b1, b2 = component_value(0), component_value(1), component_value(2)
        t = b0 + b1 - self.mul(b0, b1).scale(2)
        out = t + b2 - self.mul(t, b2).scale(2)
        self.stats["rand_bits"] += n
        return out.reshape(shape)


# -- dealing and reconstruction (client side) ------------------------------


def as_ring(values, ring: RingConfig) -> np.ndarray:
    """Coerce plaintext integers (possibly negative or huge) into Z_2^k."""
    if isinstance(values, np.ndarray):
        if values.dtype == U64:
            return values & ring.mask
        if np.issubdtype(values.dtype, np.integer):
            # signed ints wrap into the ring via int64 -> uint64 view
            return values.astype(np.int64).view(U64) & ring.mask
    # Python ints can exceed both int64 and float64 precision: reduce exactly.
    v = np.asarray(values, dtype=object)
    flat = np.array([int(x) & _FULL for x in np.ravel(v)], dtype=U64)
    return flat.reshape(v.shape) & ring.mask


def deal(values, ring: RingConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split plaintext values into the three peers' component pairs."""
    v = as_ring(values, ring)
    x0 = rng.integers(0, 1 << 64, size=v.shape, dtype=U64) & ring.mask
    x1 = rng.integers(0, 1 << 64, size=v.shape, dtype=U64) & ring.mask
    x2 = (v - x0 - x1) & ring.mask
    return [(x0, x1), (x1, x2), (x2, x0)]


def reconstruct(components: dict[int, tuple[np.ndarray, np.ndarray]], ring: RingConfig) -> np.ndarray:
    """Rebuild values from any two (or three) peers' component pairs.

    With all three peers present, each component is seen twice; disagreeing
    replicas signal corruption and raise.
    """
    parts: dict[int, np.ndarray] = {}
    for peer, (c0, c1) in components.items():
        for idx, comp in ((peer % 3, np.asarray(c0, dtype=U64)),
                          (((peer + 1) % 3), np.asarray(c1, dtype=U64))):
            if idx in parts and not np.array_equal(parts[idx], comp):
                raise AbbError(f"inconsistent replicas of component {idx}")
            parts[idx] = comp
    if len(parts) < 3:
        raise ValueError("need components from at least two distinct peers")
    return (parts[0] + parts[1] + parts[2]) & ring.mask
