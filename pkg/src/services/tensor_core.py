"""
Dense float64 tensor arithmetic and the counter-based random streams that every
stochastic layer draws from.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every public
operation returns a read-only array so results can be shared between threads.
"""
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from infrastructure.errors import DimensionError, DomainError

Tensor = np.ndarray

MASK64 = 0xFFFFFFFFFFFFFFFF


def _frozen(arr) -> Tensor:
    # np.array keeps 0-d shapes; ascontiguousarray would promote them to (1,)
    out = np.array(arr, dtype=np.float64, order="C", copy=True)
    out.flags.writeable = False
    return out


def as_tensor(data) -> Tensor:
    """Copies `data` into a read-only float64 tensor, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"Tensor contains non-finite values (shape {arr.shape})")
    return _frozen(arr)


def _check_finite(arr, op_tag):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"'{op_tag}' produced non-finite values")
    return arr


# ----------------------------------
# RANDOM STREAMS
# ----------------------------------
def splitmix64(x: int) -> int:
    """One SplitMix64 mixing round over a 64-bit integer."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def label_to_u64(label) -> int:
    """Maps an int or str label to a stable 64-bit integer (independent of PYTHONHASHSEED)."""
    if isinstance(label, (int, np.integer)):
        return int(label) & MASK64
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """
    Counter-based random stream on top of numpy's Philox bit generator.

    The Philox key is (seed, stream_id); the counter is placed in the second
    64-bit word of Philox's 256-bit block counter, so the values drawn from
    a given (seed, stream_id, counter) never depend on earlier calls.
    A stream is single-owner: use `split` to hand randomness to another worker.
    """
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            value = int(getattr(self, name))
            if not 0 <= value <= MASK64:
                raise DomainError(f"RngStream.{name} must fit in 64 unsigned bits, got {value}")
            setattr(self, name, value)

    def generator(self) -> np.random.Generator:
        key = (self.stream_id << 64) | self.seed
        bitgen = np.random.Philox(key=key, counter=self.counter << 64)
        return np.random.Generator(bitgen)

    def advance(self, n: int) -> None:
        self.counter = (self.counter + int(n)) & MASK64

    def split(self, label) -> "RngStream":
        """Child stream keyed on (this stream, label); this stream is left untouched."""
        child_id = splitmix64(self.stream_id ^ splitmix64(label_to_u64(label)))
        return RngStream(self.seed, child_id, 0)

    def copy(self) -> "RngStream":
        return replace(self)

    @classmethod
    def for_sample(cls, seed: int, salt, sample_id: int) -> "RngStream":
        """Stream used for a fixed per-sample mask: a pure function of (seed, salt, sample_id)."""
        return cls(seed, splitmix64(label_to_u64(salt) ^ splitmix64(label_to_u64(sample_id))), 0)


def _size(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def draw_uniform(stream: RngStream, shape) -> Tensor:
    """U[0,1) draws; advances the stream counter by the element count."""
    out = stream.generator().random(shape)
    stream.advance(_size(shape))
    return _frozen(out)


def draw_normal(stream: RngStream, mean: float, std: float, shape) -> Tensor:
    """N(mean, std²) draws; advances the stream counter by the element count."""
    if std < 0 or not np.isfinite(std):
        raise DomainError(f"Normal std must be a finite non-negative number, got {std}")
    out = stream.generator().normal(mean, std, size=shape)
    stream.advance(_size(shape))
    return _frozen(out)


def draw_permutation(stream: RngStream, n: int) -> np.ndarray:
    """Random permutation of range(n); advances the counter by n."""
    perm = stream.generator().permutation(n)
    stream.advance(n)
    return perm


# ----------------------------------
# ARITHMETIC
# ----------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _frozen(a @ b)


def masked_contract(x: np.ndarray, w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Σ_i (x_bi · M_bij) · W_ij for a node mask (B×Din, broadcast along Dout)
    or a connection mask (B×Din×Dout). Both granularities go through the same
    product-then-reduce kernel, so a connection mask constant along Dout gives
    bit-identical results to the node mask it collapses to.
    """
    mask3 = mask[:, :, None] if mask.ndim == 2 else mask
    return ((x[:, :, None] * mask3) * w[None, :, :]).sum(axis=1)


def batched_masked_matmul(x: Tensor, w: Tensor, mask: Tensor) -> Tensor:
    """Row k of the result is (x_k ⊙ mask_k)·w (node) or x_k·(w ⊙ mask_k) (connection)."""
    x, w, mask = (np.asarray(t, dtype=np.float64) for t in (x, w, mask))
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"batched_masked_matmul: input {x.shape} does not fit weight {w.shape}")
    node_shape = x.shape
    connection_shape = (x.shape[0], w.shape[0], w.shape[1])
    if mask.shape not in (node_shape, connection_shape):
        raise DimensionError(
            f"batched_masked_matmul: mask {mask.shape} is neither node-granular {node_shape} "
            f"nor connection-granular {connection_shape}"
        )
    return _frozen(masked_contract(x, w, mask))


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "compare": lambda a, b: (a > b).astype(np.float64),
}

_UNARY_OPS = {
    "relu": lambda a: np.maximum(a, 0.0),
    "exp": np.exp,
    "log": np.log,
}


def elementwise(op_tag: str, a: Tensor, b=None) -> Tensor:
    """
    Elementwise add/sub/mul/div/compare (b: same shape or scalar) and
    relu/exp/log (b ignored). `compare` yields 1.0 where a > b, else 0.0.
    """
    a = np.asarray(a, dtype=np.float64)

    if op_tag in _UNARY_OPS:
        if op_tag == "log" and np.any(a <= 0):
            raise DomainError("log of a non-positive value")
        with np.errstate(all="ignore"):
            return _frozen(_check_finite(_UNARY_OPS[op_tag](a), op_tag))

    if op_tag not in _BINARY_OPS:
        raise DomainError(f"Unknown elementwise op '{op_tag}'")
    if b is None:
        raise DomainError(f"'{op_tag}' needs a second operand")

    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 0 and b.shape != a.shape:
        raise DimensionError(f"elementwise '{op_tag}': shapes {a.shape} and {b.shape} differ")
    if op_tag == "div" and np.any(b == 0):
        raise DomainError("division by zero")

    with np.errstate(all="ignore"):
        return _frozen(_check_finite(_BINARY_OPS[op_tag](a, b), op_tag))
