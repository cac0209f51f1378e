"""Counter-based Gaussian streams.

Every draw is a pure function of ``(seed, path_index, step, lane)``, computed
with the Philox4x32-10 bijection.  Nothing is carried between calls, so any
partition of paths over workers reproduces the same numbers bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

TAG_NORMAL = 0
TAG_UNIFORM = 1
TAG_DERIVE = 2



@nb.njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def _unit(a, b):
    # 53 random bits, offset by half an ulp so the result lies in (0, 1)
    return ((a >> np.uint64(5)) * 67108864.0 + (b >> np.uint64(6)) + 0.5) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True)
def philox4x32(counter, key):
    """Raw Philox4x32-10 block; exposed for known-answer tests."""
    c = np.empty(4, np.uint64)
    r = _philox(np.uint64(counter[0]), np.uint64(counter[1]), np.uint64(counter[2]),
                np.uint64(counter[3]), np.uint64(key[0]), np.uint64(key[1]))
    c[0], c[1], c[2], c[3] = r
    return c


def _ziggurat_tables():
    # 256-layer ziggurat for the standard normal (Marsaglia & Tsang), 52-bit mantissa
    m1 = 2.0**52
    dn = 3.6541528853610087963519472518
    tn = dn
    vn = 0.0049286732339746519
    ki = np.zeros(256, np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    q = vn / np.exp(-0.5 * dn * dn)
    ki[0] = np.uint64(dn / q * m1)
    ki[1] = 0
    wi[0] = q / m1
    wi[255] = dn / m1
    fi[0] = 1.0
    fi[255] = np.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = np.sqrt(-2.0 * np.log(vn / dn + np.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64(dn / tn * m1)
        tn = dn
        fi[i] = np.exp(-0.5 * dn * dn)
        wi[i] = dn / m1
    return ki, wi, fi


_KI, _WI, _FI = _ziggurat_tables()
_ZIG_R = 3.6541528853610088
_MAX_LANES = 4096


@nb.njit(cache=True, inline="always")
def _word(hi, lo):
    return (hi << _S32) | lo


@nb.njit(cache=True)
def _zig_slow(r, p0, p1, s0, lane, k0, k1, ki, wi, fi):
    # rare branch (~1% of draws); extra bits come from tag-3 counters
    attempt = 0
    while True:
        idx = np.intp(r & np.uint64(0xFF))
        rb = r >> np.uint64(8)
        rabs = (rb >> np.uint64(1)) & np.uint64(0x000FFFFFFFFFFFFF)
        x = float(rabs) * wi[idx]
        neg = (rb & np.uint64(1)) != 0
        if neg:
            x = -x
        if attempt > 0 and rabs < ki[idx]:
            return x
        attempt += 1
        if attempt >= _MAX_LANES:
            return np.nan
        c3 = (np.uint64(3) << np.uint64(24)) | (np.uint64(attempt) << np.uint64(12)) | np.uint64(lane)
        a0, a1, a2, a3 = _philox(p0, p1, s0, c3, k0, k1)
        u = _unit(a0, a1)
        v = _unit(a2, a3)
        if idx == 0:
            # tail beyond the base strip: rejection-sample it without redrawing the layer
            while True:
                xx = -np.log(u) / _ZIG_R
                yy = -np.log(v)
                if yy + yy > xx * xx:
                    return -(_ZIG_R + xx) if neg else _ZIG_R + xx
                attempt += 1
                if attempt >= _MAX_LANES:
                    return np.nan
                c3 = ((np.uint64(3) << np.uint64(24)) | (np.uint64(attempt) << np.uint64(12))
                      | np.uint64(lane))
                a0, a1, a2, a3 = _philox(p0, p1, s0, c3, k0, k1)
                u = _unit(a0, a1)
                v = _unit(a2, a3)
        if (fi[idx - 1] - fi[idx]) * u + fi[idx] < np.exp(-0.5 * x * x):
            return x
        # redraw from a counter of its own; reusing a0..a3 would correlate with u
        attempt += 1
        if attempt >= _MAX_LANES:
            return np.nan
        c3 = (np.uint64(3) << np.uint64(24)) | (np.uint64(attempt) << np.uint64(12)) | np.uint64(lane)
        a0, a1, a2, a3 = _philox(p0, p1, s0, c3, k0, k1)
        r = _word(a0, a1)


@nb.njit(cache=True)
def _normals_kernel(k0, k1, ids, flip, step, n, out, ki, wi, fi):
    s0 = np.uint64(step) & _MASK
    for i in range(ids.shape[0]):
        pid = np.uint64(ids[i])
        p0 = pid & _MASK
        p1 = pid >> _S32
        for lane in range(n):
            j = lane >> 1
            r0, r1, r2, r3 = _philox(p0, p1, s0, np.uint64(j), k0, k1)
            r = _word(r0, r1) if (lane & 1) == 0 else _word(r2, r3)
            # ziggurat fast path, hand-inlined (numba inlining costs ~4x here)
            idx = np.intp(r & np.uint64(0xFF))
            rb = r >> np.uint64(8)
            rabs = (rb >> np.uint64(1)) & np.uint64(0x000FFFFFFFFFFFFF)
            if rabs < ki[idx]:
                z = float(rabs) * wi[idx]
                if (rb & np.uint64(1)) != 0:
                    z = -z
            else:
                z = _zig_slow(r, p0, p1, s0, lane, k0, k1, ki, wi, fi)
            out[i, lane] = -z if flip[i] else z


@nb.njit(cache=True)
def uniform_at(k0, k1, path_id, step):
    """First lane of ``uniform_block``, callable from compiled kernels."""
    pid = np.uint64(path_id)
    r0, r1, r2, r3 = _philox(pid & _MASK, pid >> _S32, np.uint64(step) & _MASK,
                             np.uint64(1) << np.uint64(24), k0, k1)
    return _unit(r0, r1)


@nb.njit(cache=True)
def _uniforms_kernel(k0, k1, ids, step, n, out):
    s0 = np.uint64(step) & _MASK
    tag = np.uint64(1) << np.uint64(24)
    for i in range(ids.shape[0]):
        pid = np.uint64(ids[i])
        p0 = pid & _MASK
        p1 = pid >> _S32
        for j in range((n + 1) // 2):
            r0, r1, r2, r3 = _philox(p0, p1, s0, tag | np.uint64(j), k0, k1)
            out[i, 2 * j] = _unit(r0, r1)
            if 2 * j + 1 < n:
                out[i, 2 * j + 1] = _unit(r2, r3)


def key_words(seed: int) -> tuple[np.uint64, np.uint64]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def _check(step: int, n: int) -> None:
    if not 0 <= step < 2**32:
        raise ValueError(f"step index {step} outside [0, 2**32)")
    if not 0 < n <= _MAX_LANES:
        raise ValueError(f"lane count {n} out of range")


def normal_block(seed: int, path_ids: np.ndarray, step: int, n: int,
                 antithetic: bool = False) -> np.ndarray:
    """Standard normals of shape ``(len(path_ids), n)`` for one time step.

    With ``antithetic`` set, path ``2j+1`` reuses the draws of path ``2j``
    with the sign flipped.
    """
    _check(step, n)
    ids = np.ascontiguousarray(path_ids, dtype=np.int64)
    if antithetic:
        flip = (ids & 1).astype(np.bool_)
        ids = ids >> 1
    else:
        flip = np.zeros(ids.shape[0], np.bool_)
    out = np.empty((ids.shape[0], n))
    k0, k1 = key_words(seed)
    _normals_kernel(k0, k1, ids, flip, step, n, out, _KI, _WI, _FI)
    return out


def uniform_block(seed: int, path_ids: np.ndarray, step: int, n: int = 1) -> np.ndarray:
    """Uniforms on (0, 1), shape ``(len(path_ids), n)``, independent of the normals."""
    _check(step, n)
    ids = np.ascontiguousarray(path_ids, dtype=np.int64)
    out = np.empty((ids.shape[0], n))
    k0, k1 = key_words(seed)
    _uniforms_kernel(k0, k1, ids, step, n, out)
    return out


def derive_seed(seed: int, *labels: int) -> int:
    """Child seed for a labelled sub-experiment (nested estimators, control runs)."""
    out = int(seed) & 0xFFFFFFFFFFFFFFFF
    for label in labels:
        k0, k1 = key_words(out)
        label = int(label) & 0xFFFFFFFFFFFFFFFF
        r = philox4x32(np.array([label & 0xFFFFFFFF, label >> 32, 0xFFFFFFFF, TAG_DERIVE << 24],
                                dtype=np.uint64),
                       np.array([k0, k1], dtype=np.uint64))
        out = (int(r[0]) << 32) | int(r[1])
    return out


@dataclass(frozen=True)
class NoiseStream:
    """Handle on the Gaussian stream of one path."""

    seed: int
    path_index: int
    counter: int = 0

    def at(self, step: int) -> "NoiseStream":
        return NoiseStream(self.seed, self.path_index, step)


def gaussian_increments(stream: NoiseStream, step: int, n: int) -> np.ndarray:
    """``n`` standard normals for ``stream`` at ``step``; the caller scales by sqrt(dt)."""
    return normal_block(stream.seed, np.array([stream.path_index]), step, n)[0]
