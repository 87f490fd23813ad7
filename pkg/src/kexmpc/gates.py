"""Composite gates built on the shared-arithmetic layer.

Everything here is data oblivious: the sequence of rounds and message sizes
depends only on public sizes (vector lengths, bit widths), never on secret
values.  Comparisons are parameterized by a public bit width derived from
the caller's value bounds, so cheap inputs (small weights) get cheap
circuits without changing any contract.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .abb import AbbSession, ShareArray, U64, derive_key

logger = logging.getLogger("kexmpc.gates")


def _expand(x: ShareArray, shape) -> ShareArray:
    return ShareArray(np.broadcast_to(x.c0, shape), np.broadcast_to(x.c1, shape))


def _align(z: ShareArray, target: tuple[int, ...]) -> ShareArray:
    """Broadcast a condition bit over the trailing axes of its operands."""
    if z.shape == target:
        return z
    return _expand(z.reshape(z.shape + (1,) * (len(target) - len(z.shape))), target)


def select(abb: AbbSession, z: ShareArray, x: ShareArray, y: ShareArray) -> ShareArray:
    """z ? x : y  ==  z * (x - y) + y, one multiplication."""
    return abb.mul(_align(z, x.shape), x - y) + y


def select_many(abb: AbbSession, triples: list[tuple[ShareArray, ShareArray, ShareArray]]) -> list[ShareArray]:
    """Batched selects sharing one multiplication round."""
    pairs = [(_align(z, x.shape), x - y) for z, x, y in triples]
    prods = abb.mul_batch(pairs)
    return [p + y for p, (_, _, y) in zip(prods, triples)]


def dot_product(abb: AbbSession, a: ShareArray, b: ShareArray) -> ShareArray:
    """Dot product along the last axis; n multiplications, one round."""
    if a.shape != b.shape:
        raise ValueError("vector lengths differ")
    return abb.mul(a, b).sum(axis=-1)


def xor(abb: AbbSession, a: ShareArray, b: ShareArray) -> ShareArray:
    return a + b - abb.mul(a, b).scale(2)


def xor_public(abb: AbbSession, a: ShareArray, bit: np.ndarray) -> ShareArray:
    """a XOR public bit = a * (1 - 2*bit) + bit, local."""
    return abb.add_public(a.scale(U64(1) - U64(2) * bit.astype(U64)), bit.astype(U64))


def _bit_lt_public(abb: AbbSession, c_bits: np.ndarray, r: ShareArray) -> ShareArray:
    """[c < r] for a public value c and shared bits r, both m bits wide.

    Standard borrow circuit: scan from the top bit, the first differing
    position decides.  Suffix products of the equality indicators are built
    by doubling, giving ceil(log2 m) rounds.
    """
    m = r.shape[-1]
    if m == 0:
        return abb.zeros(r.shape[:-1])
    flip = U64(1) - U64(2) * c_bits  # 1 - 2c, wraps for c=1
    e = abb.add_public(r.scale(flip), c_bits)  # r XOR c
    sp = abb.add_public(-e, 1)  # 1 where bits agree
    step = 1
    while step < m:
        keep = m - step
        head = abb.mul(sp[..., :keep], sp[..., step:])
        sp = _concat_last(head, sp[..., keep:])
        step *= 2
    # f_i = product of agreements above bit i; top bit has empty product 1.
    if m > 1:
        rf = _concat_last(abb.mul(r[..., : m - 1], sp[..., 1:]), r[..., m - 1 :])
    else:
        rf = r
    return rf.scale(U64(1) - c_bits).sum(axis=-1)


def _concat_last(a: ShareArray, b: ShareArray) -> ShareArray:
    return ShareArray(
        np.concatenate([a.c0, b.c0], axis=-1), np.concatenate([a.c1, b.c1], axis=-1)
    )


def _pow2(bits: int) -> np.ndarray:
    return U64(1) << np.arange(bits, dtype=U64)


def msb(abb: AbbSession, v: ShareArray, bits: int) -> ShareArray:
    """Top bit of v, where v is guaranteed to open into [0, 2^bits).

    Mask-and-open: draw `bits` shared random bits r (plus a uniform filler
    for the high ring bits), open c = v + r, then recover the top bit from
    the public bits of c, the shared top bit of r, and the borrow of the
    low-bit subtraction.
    """
    k = abb.ring.bits
    if not 2 <= bits <= k:
        raise ValueError("bit width out of range")
    shape = v.shape
    r = abb.rand_bits(shape + (bits,))
    rval = r.scale(_pow2(bits)).sum(axis=-1)
    masked = v + rval
    if bits < k:
        masked = masked + abb.prss_uniform(shape).scale(1 << bits)
    c = abb.open(masked)
    c_low = c & U64((1 << (bits - 1)) - 1)
    c_msb = (c >> U64(bits - 1)) & U64(1)
    c_low_bits = ((c_low[..., None] >> np.arange(bits - 1, dtype=U64)) & U64(1)).astype(U64)
    borrow = _bit_lt_public(abb, c_low_bits, r[..., : bits - 1])
    t = xor_public(abb, r[..., bits - 1], c_msb)
    return xor(abb, t, borrow)


def gt(abb: AbbSession, x: ShareArray, y: ShareArray, bits: int | None = None) -> ShareArray:
    """Strict comparison [x > y] as a shared bit.

    Requires |x - y| <= 2^(bits-2) when interpreting both as bounded
    non-negative integers (possibly after subtraction, so signed-in-ring
    differences are fine).
    """
    bits = bits if bits is not None else abb.ring.bits
    v = abb.add_public(x - y, (1 << (bits - 1)) - 1)  # x - y - 1 + 2^(bits-1)
    return msb(abb, v, bits)


def eq(abb: AbbSession, x: ShareArray, y: ShareArray, bits: int) -> ShareArray:
    """[x == y] via two comparisons sharing their rounds."""
    xx = ShareArray.concat([x, y])
    yy = ShareArray.concat([y, x])
    g = gt(abb, xx, yy, bits)
    n = int(np.prod(x.shape)) if x.shape else 1
    g1 = abb.add_public(-g[:n], 1).reshape(x.shape)
    g2 = abb.add_public(-g[n:], 1).reshape(x.shape)
    return abb.mul(g1, g2)


# -- demultiplexing ---------------------------------------------------------


def _bit_indicator(abb: AbbSession, bits: ShareArray) -> ShareArray:
    """Turn shared bits (..., m) into the one-hot vector (..., 2^m)."""
    m = bits.shape[-1]
    blocks = []
    for i in range(m):
        b = bits[..., i]
        blocks.append(ShareArray.stack([abb.add_public(-b, 1), b], axis=-1))
    while len(blocks) > 1:
        nxt = []
        pairs = []
        merges = []
        for j in range(0, len(blocks) - 1, 2):
            lo, hi = blocks[j], blocks[j + 1]
            a, b = lo.shape[-1], hi.shape[-1]
            lo_e = _expand(lo[..., None, :], lo.shape[:-1] + (b, a))
            hi_e = _expand(hi[..., :, None], hi.shape[:-1] + (b, a))
            pairs.append((lo_e, hi_e))
            merges.append((lo.shape[:-1], a * b))
        prods = abb.mul_batch(pairs)
        for prod, (lead, size) in zip(prods, merges):
            nxt.append(prod.reshape(lead + (size,)))
        if len(blocks) % 2:
            nxt.append(blocks[-1])
        blocks = nxt
    return blocks[0]


def demux(abb: AbbSession, x: ShareArray, n: int) -> ShareArray:
    """Indicator vector of x over [0, n): entry i opens to [x == i].

    x may open to any value in [0, n]; values >= n (the dummy convention)
    yield the all-zero vector.  Width is ceil(log2(n+1)) bits.
    """
    if n < 1:
        raise ValueError("demux range must be positive")
    m = int(n).bit_length()
    shape = x.shape
    r = abb.rand_bits(shape + (m,))
    rval = r.scale(_pow2(m)).sum(axis=-1)
    masked = x + rval
    if m < abb.ring.bits:
        masked = masked + abb.prss_uniform(shape).scale(1 << m)
    c = abb.open(masked) & U64((1 << m) - 1)
    onehot = _bit_indicator(abb, r)  # (..., 2^m), one-hot of r's value
    # x == i  <=>  r == (c - i) mod 2^m
    idx = ((c[..., None] - np.arange(n, dtype=U64)) & U64((1 << m) - 1)).astype(np.int64)
    c0 = np.take_along_axis(onehot.c0, idx, axis=-1)
    c1 = np.take_along_axis(onehot.c1, idx, axis=-1)
    return ShareArray(c0, c1)


# -- first maximal-weight subset (tree reduction) ---------------------------


def max_weight_set(
    abb: AbbSession,
    indices: ShareArray,
    nodes: ShareArray,
    weights: ShareArray,
    dummy_index: int,
    dummy_node: int,
    weight_bits: int,
) -> tuple[ShareArray, ShareArray]:
    """Index and nodes of the first subset whose weight is maximal and > 0.

    Pairwise tree reduction; each level compares weights(2i)+1 > weights(2i+1)
    so the earlier subset wins ties, which makes the result the minimal index
    among the argmax.  If every weight is zero the dummy subset
    (dummy_node x3, dummy_index) comes back.  O(log n * log k) rounds.
    """
    abb.stats["max_weight_set_calls"] += 1
    idx, nds, wts = indices, nodes, weights
    n = idx.shape[0]
    while n > 1:
        half = n // 2
        even = slice(0, 2 * half, 2)
        odd = slice(1, 2 * half, 2)
        first = gt(abb, abb.add_public(wts[even], 1), wts[odd], weight_bits)
        new_wts, new_idx, new_nds = select_many(
            abb,
            [
                (first, wts[even], wts[odd]),
                (first, idx[even], idx[odd]),
                (first, nds[even], nds[odd]),
            ],
        )
        if n % 2:  # odd tail rides along untouched
            new_wts = ShareArray.concat([new_wts, wts[n - 1 :]])
            new_idx = ShareArray.concat([new_idx, idx[n - 1 :]])
            new_nds = ShareArray(
                np.concatenate([new_nds.c0, nds.c0[n - 1 :]]),
                np.concatenate([new_nds.c1, nds.c1[n - 1 :]]),
            )
        idx, nds, wts = new_idx, new_nds, new_wts
        n = idx.shape[0]
    valid = gt(abb, wts, abb.zeros((1,)), weight_bits)
    index, subset = select_many(
        abb,
        [
            (valid, idx, abb.const([dummy_index])),
            (valid, nds, abb.const([[dummy_node] * 3])),
        ],
    )
    return index.reshape(()), subset.reshape((3,))


# -- oblivious node shuffle -------------------------------------------------


@dataclass
class ShuffleHandle:
    """Per-peer fragment of a composed node relabeling.

    Each of the three passes applies a permutation known to one peer pair;
    no single peer knows the composition.  `pass_perms[g]` holds this peer's
    copy for the passes it took part in, None otherwise.
    """

    size: int
    mode: str
    pass_perms: list[np.ndarray | None]


def _pass_perm(abb: AbbSession, g: int, n: int, mode: str, seed) -> np.ndarray | None:
    """Permutation for pass g, derived only by the two pass members."""
    p, q = g, (g + 1) % 3
    member = abb.peer in (p, q)
    if mode == "identity":
        return np.arange(n) if member else None
    if mode == "seeded":
        if not member:
            return None
        rng = np.random.Generator(
            np.random.Philox(key=np.frombuffer(derive_key(seed, f"shuffle:{g}"), dtype=U64))
        )
        return rng.permutation(n)
    if mode == "random":
        if not member:
            return None
        stream = abb.high if abb.peer == p else abb.low  # the pair's common key
        rng = np.random.Generator(np.random.Philox(key=stream.draw(2)))
        return rng.permutation(n)
    raise ValueError(f"unknown shuffle mode {mode!r}")


def seeded_pass_perms(seed, n: int) -> list[np.ndarray]:
    """Reconstruct the pass permutations of seeded mode (test support)."""
    perms = []
    for g in range(3):
        rng = np.random.Generator(
            np.random.Philox(key=np.frombuffer(derive_key(seed, f"shuffle:{g}"), dtype=U64))
        )
        perms.append(rng.permutation(n))
    return perms


def composed_permutation(perms: list[np.ndarray]) -> np.ndarray:
    """Node relabeling of the full shuffle: i -> p2(p1(p0(i)))."""
    out = np.arange(len(perms[0]))
    for p in perms:
        out = p[out]
    return out


def _relabel(mat: np.ndarray, perm: np.ndarray, inverse: bool) -> np.ndarray:
    """Apply new[perm[i], perm[j]] = old[i, j] (or its inverse) to rows+cols."""
    if inverse:
        return mat[np.ix_(perm, perm)]
    inv = np.argsort(perm)
    return mat[np.ix_(inv, inv)]


def _apply_pass(
    abb: AbbSession,
    g: int,
    mats: list[ShareArray],
    perm: np.ndarray | None,
    inverse: bool,
) -> list[ShareArray]:
    """One resharing pass: the pair (g, g+1) relabels, everyone refreshes.

    The pair converts to a two-way additive sharing, permutes locally, and
    the three fresh components come from the pairwise PRG keys, so the third
    peer receives nothing and learns nothing about the permutation.
    """
    p, q, t = g, (g + 1) % 3, (g + 2) % 3
    mask = abb.ring.mask
    shapes = [m.shape for m in mats]
    total = sum(m.c0.size for m in mats)

    def split(flat: np.ndarray, other: np.ndarray) -> list[ShareArray]:
        out = []
        offset = 0
        for shape in shapes:
            size = int(np.prod(shape))
            sl = slice(offset, offset + size)
            out.append(ShareArray(flat[sl].reshape(shape), other[sl].reshape(shape)))
            offset += size
        return out

    if abb.peer == p:
        own = [(m.c0 + m.c1) & mask for m in mats]
        own = [_relabel(x, perm, inverse) for x in own]
        y_first = abb.low.draw(total)  # key k_g, mirrored by peer t
        msg = (np.concatenate([x.ravel() for x in own]) - y_first) & mask
        incoming = abb.endpoint.exchange_round({q: msg.tobytes()})
        y_mid = (msg + np.frombuffer(incoming[q], dtype=U64)) & mask
        return split(y_first & mask, y_mid)
    if abb.peer == q:
        own = [_relabel(m.c1 & mask, perm, inverse) for m in mats]
        y_last = abb.high.draw(total)  # key k_{g+2}, mirrored by peer t
        msg = (np.concatenate([x.ravel() for x in own]) - y_last) & mask
        incoming = abb.endpoint.exchange_round({p: msg.tobytes()})
        y_mid = (np.frombuffer(incoming[p], dtype=U64) + msg) & mask
        return split(y_mid, y_last & mask)
    # third peer: fresh components from the two keys it holds
    abb.endpoint.exchange_round({})
    y_last = abb.low.draw(total) & mask  # key k_{g+2}
    y_first = abb.high.draw(total) & mask  # key k_g
    return split(y_last, y_first)


def shuffle_nodes(
    abb: AbbSession,
    mats: list[ShareArray],
    mode: str = "random",
    seed=None,
) -> tuple[list[ShareArray], ShuffleHandle]:
    """Relabel graph nodes by a secret uniform permutation.

    The same permutation hits rows and columns of every matrix in `mats`.
    Three sequential passes, one per peer pair; each costs one round.
    """
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ValueError("expected square matrices of equal size")
    perms: list[np.ndarray | None] = []
    out = mats
    for g in range(3):
        perm = _pass_perm(abb, g, n, mode, seed)
        out = _apply_pass(abb, g, out, perm, inverse=False)
        perms.append(perm)
    return out, ShuffleHandle(n, mode, perms)


def rev_shuffle(abb: AbbSession, mat: ShareArray, handle: ShuffleHandle) -> ShareArray:
    """Invert a shuffle: inverse pass permutations in reverse order."""
    if mat.shape != (handle.size, handle.size):
        raise ValueError("matrix size does not match the shuffle handle")
    out = [mat]
    for g in (2, 1, 0):
        out = _apply_pass(abb, g, out, handle.pass_perms[g], inverse=True)
    return out[0]
