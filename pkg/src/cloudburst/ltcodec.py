"""LT-code encoder and incremental GF(2) decoder.

Original parts and symbol payloads are handled internally as Python ints so
that XOR over a whole part is a single big-int operation. Index sets are int
bitmasks: bit ``i`` set means original part ``i`` is combined in the symbol.
"""

from __future__ import annotations

import bisect
import enum
import math
import random
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

N_MAX = 64
DEFAULT_PART_LEN = 1460


class CodecError(ValueError):
    pass


class OversizeMessage(CodecError):
    pass


class HeaderMismatch(CodecError):
    pass


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def mask_indices(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def indices_mask(indices) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << i
    return mask


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class MessagePayload:
    """A message split into ``k`` equal parts, the last one zero-padded."""

    data: bytes
    part_len: int
    parts: tuple[bytes, ...]
    ints: tuple[int, ...] = field(repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.parts)

    @property
    def size(self) -> int:
        return len(self.data)


def packetize(data: bytes, part_len: int = DEFAULT_PART_LEN, n_max: int = N_MAX) -> MessagePayload:
    if part_len <= 0:
        raise ValueError("part_len must be positive")
    if not 0 < len(data) <= n_max * part_len:
        raise OversizeMessage(
            f"message of {len(data)} bytes does not fit in {n_max} parts of {part_len} bytes"
        )
    k = -(-len(data) // part_len)
    padded = bytes(data) + bytes(k * part_len - len(data))
    parts = tuple(padded[i * part_len:(i + 1) * part_len] for i in range(k))
    ints = tuple(int.from_bytes(p, "big") for p in parts)
    return MessagePayload(bytes(data), part_len, parts, ints)


# -- degree distributions -------------------------------------------------------


@dataclass(frozen=True)
class FixedDegree:
    d: int = 5

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("degree must be >= 1")

    def sample(self, k: int, rng: random.Random) -> int:
        return min(self.d, k)

    def pmf(self, k: int) -> list[float]:
        out = [0.0] * (k + 1)
        out[min(self.d, k)] = 1.0
        return out


class RobustSoliton:
    """Robust soliton distribution, truncated to degrees ``1..k``."""

    def __init__(self, c: float = 0.1, delta: float = 0.5):
        if c <= 0 or not 0 < delta < 1:
            raise ValueError("need c > 0 and 0 < delta < 1")
        self.c = c
        self.delta = delta
        self._cdf_cache: dict[int, list[float]] = {}

    def __repr__(self):
        return f"RobustSoliton(c={self.c}, delta={self.delta})"

    def __eq__(self, other):
        return isinstance(other, RobustSoliton) and (self.c, self.delta) == (other.c, other.delta)

    def __hash__(self):
        return hash((self.c, self.delta))

    def pmf(self, k: int) -> list[float]:
        """Probability of each degree; index 0 is unused and always 0."""
        rho = [0.0] * (k + 1)
        rho[1] = 1.0 / k
        for i in range(2, k + 1):
            rho[i] = 1.0 / (i * (i - 1))
        R = self.c * math.log(k / self.delta) * math.sqrt(k)
        tau = [0.0] * (k + 1)
        spike = int(math.floor(k / R)) if R > 0 else k + 1
        for i in range(1, k + 1):
            if i < spike:
                tau[i] = R / (i * k)
            elif i == spike:
                tau[i] = R * math.log(R / self.delta) / k
        mu = [rho[i] + max(tau[i], 0.0) for i in range(k + 1)]
        total = sum(mu)
        return [m / total for m in mu]

    def _cdf(self, k: int) -> list[float]:
        cdf = self._cdf_cache.get(k)
        if cdf is None:
            cdf, acc = [], 0.0
            for p in self.pmf(k)[1:]:
                acc += p
                cdf.append(acc)
            cdf[-1] = 1.0
            self._cdf_cache[k] = cdf
        return cdf

    def sample(self, k: int, rng: random.Random) -> int:
        return bisect.bisect_left(self._cdf(k), rng.random()) + 1


DegreeDistribution = Union[FixedDegree, RobustSoliton]


def sample_degree(dist: DegreeDistribution, k: int, rng: random.Random) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return dist.sample(k, rng)


# -- encoding -----------------------------------------------------------------


@dataclass(frozen=True)
class EncodedSymbol:
    message_id: int
    n: int
    message_size: int
    index_set: int
    payload: bytes

    @property
    def degree(self) -> int:
        return popcount(self.index_set)

    @property
    def indices(self) -> list[int]:
        return mask_indices(self.index_set)


def _floyd(pool: list[int], d: int, uniform) -> list[int]:
    """d distinct elements of ``pool``, every subset equally likely (Floyd)."""
    n = len(pool)
    picked: set[int] = set()
    for j in range(n - d, n):
        t = int(uniform() * (j + 1))
        picked.add(j if t in picked else t)
    return [pool[i] for i in picked]


class LtEncoder:
    """Endless stream of encoded symbols for one message.

    ``restrict`` narrows index selection to a residual set (used after the
    receiver reports which parts it already holds).
    """

    def __init__(self, msg: MessagePayload, dist: DegreeDistribution, rng: random.Random):
        self.msg = msg
        self.dist = dist
        self.rng = rng
        self.xor_ops = 0
        self.symbols = 0
        self._pool = list(range(msg.k))

    def restrict(self, residual_mask: Optional[int]) -> None:
        full = (1 << self.msg.k) - 1
        residual = full if residual_mask is None else residual_mask & full
        # stale feedback (everything decoded): keep the full pool
        self._pool = mask_indices(residual) if residual else list(range(self.msg.k))

    def _dense(self, pool: list[int]) -> list[int]:
        # A fixed degree clamped to the pool size would emit the same
        # all-parts symbol forever (rank 1). Use uniform non-empty subsets.
        rng = self.rng
        while True:
            chosen = [i for i in pool if rng.getrandbits(1)]
            if chosen:
                return chosen

    def next_raw(self) -> tuple[int, int]:
        pool = self._pool
        n = len(pool)
        d = self.dist.sample(n, self.rng)
        if d == n > 1 and isinstance(self.dist, FixedDegree):
            chosen = self._dense(pool)
            d = len(chosen)
        else:
            chosen = _floyd(pool, d, self.rng.random)
        ints = self.msg.ints
        value = 0
        mask = 0
        for i in chosen:
            value ^= ints[i]
            mask |= 1 << i
        self.xor_ops += d - 1
        self.symbols += 1
        return mask, value

    def next_symbol(self, message_id: int = 0) -> EncodedSymbol:
        mask, value = self.next_raw()
        return EncodedSymbol(
            message_id, self.msg.k, self.msg.size, mask, value.to_bytes(self.msg.part_len, "big")
        )


def encode_symbol(msg: MessagePayload, dist: DegreeDistribution, message_id: int,
                  rng: random.Random) -> EncodedSymbol:
    return LtEncoder(msg, dist, rng).next_symbol(message_id)


# -- decoding -----------------------------------------------------------------


class DecodeStatus(enum.Enum):
    PROGRESS = "progress"
    REDUNDANT = "redundant"
    COMPLETE = "complete"


class PushResult(NamedTuple):
    status: DecodeStatus
    data: Optional[bytes] = None


class DecoderState:
    """Incremental Gaussian elimination with a peeling cascade.

    Stored rows are kept keyed by pivot, the lowest set bit of their mask, and
    never contain decoded parts or have degree one; a row reaching degree one
    is decoded immediately and substituted into the others.
    """

    def __init__(self, n: int, message_size: int, part_len: int):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.message_size = message_size
        self.part_len = part_len
        self.rows: dict[int, list[int]] = {}
        self.decoded = 0
        self.recovered: list[Optional[int]] = [None] * n
        self.symbols_consumed = 0
        self.xor_ops = 0
        self.completed = False
        self._full = (1 << n) - 1

    @property
    def decoded_count(self) -> int:
        return popcount(self.decoded)

    @property
    def rank(self) -> int:
        return self.decoded_count + len(self.rows)

    def push(self, symbol: EncodedSymbol) -> PushResult:
        if symbol.n != self.n or symbol.message_size != self.message_size:
            raise HeaderMismatch(
                f"symbol (n={symbol.n}, size={symbol.message_size}) does not match "
                f"decoder (n={self.n}, size={self.message_size})"
            )
        return self.push_raw(symbol.index_set, int.from_bytes(symbol.payload, "big"))

    def push_raw(self, mask: int, value: int) -> PushResult:
        if mask == 0 or mask & ~self._full:
            raise HeaderMismatch("index set empty or outside [0, n)")
        if self.completed:
            return PushResult(DecodeStatus.REDUNDANT)
        self.symbols_consumed += 1
        recovered = self.recovered
        hit = mask & self.decoded
        if hit:
            mask ^= hit
            for i in mask_indices(hit):
                value ^= recovered[i]
                self.xor_ops += 1
        rows = self.rows
        while mask:
            pivot = (mask & -mask).bit_length() - 1
            row = rows.get(pivot)
            if row is None:
                break
            mask ^= row[0]
            value ^= row[1]
            self.xor_ops += 1
        if not mask:
            return PushResult(DecodeStatus.REDUNDANT)
        if mask & (mask - 1):
            rows[pivot] = [mask, value]
        else:
            self._peel(pivot, value)
        if self.decoded == self._full:
            self.completed = True
            return PushResult(DecodeStatus.COMPLETE, self.message())
        return PushResult(DecodeStatus.PROGRESS)

    def _peel(self, index: int, value: int) -> None:
        pending = [(index, value)]
        rows = self.rows
        while pending:
            index, value = pending.pop()
            bit = 1 << index
            self.decoded |= bit
            self.recovered[index] = value
            for pivot in list(rows):
                row = rows[pivot]
                if not row[0] & bit:
                    continue
                row[0] ^= bit
                row[1] ^= value
                self.xor_ops += 1
                if not row[0] & (row[0] - 1):
                    del rows[pivot]
                    pending.append((pivot, row[1]))

    def message(self) -> bytes:
        if self.decoded != self._full:
            raise RuntimeError("message not fully decoded")
        blob = b"".join(v.to_bytes(self.part_len, "big") for v in self.recovered)
        return blob[:self.message_size]


def decoder_new(n: int, message_size: int, part_len: int = DEFAULT_PART_LEN) -> DecoderState:
    return DecoderState(n, message_size, part_len)


def decoder_push(state: DecoderState, symbol: EncodedSymbol) -> PushResult:
    return state.push(symbol)


def coding_rate(state: DecoderState) -> float:
    """Symbols consumed per original part; defined once decoding completed."""
    if not state.completed:
        raise RuntimeError("coding rate is only defined for a completed decoder")
    return state.symbols_consumed / state.n


# -- experiments over the codec alone ---------------------------------------------


@dataclass
class CodecTrial:
    symbols: int
    completed: bool
    encode_xors: int
    decode_xors: int


def run_lossless_trial(k: int, dist: DegreeDistribution, rng: random.Random,
                       max_symbols: Optional[int] = None, part_len: int = 16,
                       loss: float = 0.0) -> CodecTrial:
    """Feed one random message through encoder and decoder in order.

    Only index masks matter for the completion point, so a short ``part_len``
    keeps this cheap. ``loss`` drops each symbol independently before decode.
    """
    limit = max_symbols if max_symbols is not None else 20 * k + 100
    data = rng.randbytes(k * part_len)
    msg = packetize(data, part_len, n_max=max(k, N_MAX))
    enc = LtEncoder(msg, dist, rng)
    dec = DecoderState(k, len(data), part_len)
    while dec.symbols_consumed < limit:
        mask, value = enc.next_raw()
        if loss and rng.random() < loss:
            continue
        if dec.push_raw(mask, value).status is DecodeStatus.COMPLETE:
            if dec.message() != data:
                raise AssertionError("decoder produced wrong bytes")
            return CodecTrial(dec.symbols_consumed, True, enc.xor_ops, dec.xor_ops)
    return CodecTrial(dec.symbols_consumed, False, enc.xor_ops, dec.xor_ops)


def overhead_curve(n: int, degrees: Sequence[int], trials: int, seed: int = 0,
                   max_factor: int = 10) -> dict[int, dict[str, float]]:
    """Mean coding overhead and XOR count per fixed degree.

    Trials that hit ``max_factor * n`` symbols without decoding count at that
    cap; a fixed even degree never decodes because all its symbols have even
    weight and span at most an (n-1)-dimensional subspace.
    """
    out = {}
    for d in degrees:
        rng = random.Random((seed << 16) ^ (n << 8) ^ d)
        rates, xors, fails = [], [], 0
        for _ in range(trials):
            t = run_lossless_trial(n, FixedDegree(d), rng, max_symbols=max_factor * n)
            fails += not t.completed
            rates.append(t.symbols / n)
            xors.append(t.encode_xors + t.decode_xors)
        out[d] = {
            "overhead": sum(rates) / trials,
            "xor_ops": sum(xors) / trials,
            "failures": fails,
        }
    return out
