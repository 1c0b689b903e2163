"""Dense float64 tensor helpers and a splittable deterministic RNG.

Tensors throughout the package are C-contiguous float64 ``numpy`` arrays;
the helpers here add the shape/finiteness validation the rest of the code
relies on. Randomness flows exclusively through :class:`RngStream`, a thin
wrapper over the counter-based Philox generator keyed by a 64-bit seed.
Child streams are derived from a parent seed and a byte label, never by
consuming parent state, so two call sites that derive the same label from
the same parent always see identical draws regardless of ordering.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DataError, ShapeError

# Annotation alias: every numeric payload in the package is a float64 ndarray.
Tensor = np.ndarray

_MASK64 = (1 << 64) - 1


def as_tensor(values, shape: tuple[int, ...] | None = None) -> Tensor:
    """Coerce ``values`` to a C-contiguous float64 array, checking finiteness.

    If ``shape`` is given the result is reshaped to it (the element count
    must match).
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(
                f"cannot view {arr.size} elements as shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    check_finite(arr, "as_tensor")
    return arr


def check_finite(arr: Tensor, context: str) -> None:
    """Raise :class:`DataError` if ``arr`` contains NaN or infinity."""
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{context}: non-finite values encountered")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors with float64 accumulation."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects rank-2 operands, got {a.ndim}-d and {b.ndim}-d"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    out = a @ b
    check_finite(out, "matmul")
    return out


def batch_stats(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-feature mean and biased variance of a (batch, features) tensor.

    Variance divides by the batch size and is computed from centered
    squares, so it is nonnegative by construction.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_stats expects rank-2 input, got {x.ndim}-d")
    if x.shape[0] == 0:
        raise DataError("batch_stats: empty batch")
    mean = x.mean(axis=0)
    var = np.mean((x - mean) ** 2, axis=0)
    return mean, var


def _derive_seed(parent_seed: int, label: bytes) -> int:
    h = hashlib.sha256()
    h.update(label)
    h.update(int(parent_seed).to_bytes(8, "little"))
    return int.from_bytes(h.digest()[:8], "little")


class RngStream:
    """Deterministic random stream with label-based splitting.

    The stream is a Philox counter generator keyed by ``seed`` and advanced
    to ``counter`` 256-bit blocks. Identical ``(seed, counter)`` pairs
    reproduce identical draw sequences. A stream is single-owner mutable
    state; share work across owners by deriving children, not by handing
    out the same stream twice.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        bitgen = np.random.Philox(key=self.seed)
        if counter:
            bitgen.advance(int(counter))  # advance() counts 256-bit blocks
        self._bitgen = bitgen
        self._gen = np.random.Generator(bitgen)

    @property
    def counter(self) -> int:
        """Low word of the Philox block counter.

        Block-level position only: draws buffered inside a partially
        consumed block are not represented, so this is for diagnostics and
        seeding fresh streams, not for splicing a live stream mid-draw.
        """
        return int(self._bitgen.state["state"]["counter"][0])

    def child(self, label: str | bytes) -> "RngStream":
        """Derive an independent stream from this stream's seed and a label.

        Pure function of ``(self.seed, label)``: it does not consume or
        observe this stream's position.
        """
        raw = label.encode("utf-8") if isinstance(label, str) else bytes(label)
        return RngStream(_derive_seed(self.seed, raw))

    # Draw helpers; all return float64 (or int64 for index draws).

    def standard_normal(self, shape=()) -> Tensor:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape=()) -> Tensor:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, shape=()) -> Tensor:
        return self._gen.random(size=shape)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed:#018x}, counter={self.counter})"


def derive_stream(parent: RngStream, label: str | bytes) -> RngStream:
    """Module-level alias for :meth:`RngStream.child`."""
    return parent.child(label)
