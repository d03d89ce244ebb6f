"""
Dense float64 tensors with a reverse-mode tape.

Only the primitives that the encoder, the training losses and the
gradient-based explainers need are provided.  Every primitive checks its
input shapes, refuses to produce non-finite values, and (when any input lives
on a :py:class:`Tape`) records a backward closure over the activations it
needs.
"""
import logging
import typing

import numpy as np

from semloc.exceptions import DetachedTensor, NumericFault, ShapeMismatch, \
    with_context

__all__ = [
    'BN_EPSILON',
    'BN_MOMENTUM',
    'ELU_ALPHA',
    'LEAKY_SLOPE',
    'Record',
    'Tape',
    'Tensor',
    'add',
    'as_tensor',
    'backward',
    'batch_norm',
    'concat',
    'dot',
    'elu',
    'gather_rows',
    'gradcheck',
    'l2_normalize',
    'leaky_relu',
    'ln',
    'matmul',
    'mean',
    'mul',
    'relu',
    'reshape',
    'scale',
    'softmax_over_segments',
    'sqrt',
    'square',
    'sub',
    'sum_all',
    'sum_segments',
    'tanh',
]

log = logging.getLogger(__name__)

ELU_ALPHA = 1.0
LEAKY_SLOPE = 0.2
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

BackwardFn = typing.Callable[
    [np.ndarray],
    typing.Sequence[typing.Optional[np.ndarray]],
]


class Tensor:
    """
    An immutable float64 array, optionally recorded on a tape.

    Tensors without a tape are constants: primitives applied only to
    constants compute values but record nothing.
    """
    __slots__ = ('value', 'tape', 'node_id')

    # Makes ``ndarray <op> Tensor`` dispatch to the reflected Tensor operator.
    __array_ufunc__ = None

    def __init__(self,
            value: typing.Any,
            tape: typing.Optional['Tape'] = None,
            node_id: typing.Optional[int] = None,
    ) -> None:
        array = np.array(value, dtype=np.float64)
        array.setflags(write=False)

        self.value: np.ndarray = array
        self.tape = tape
        self.node_id = node_id

    def __repr__(self) -> str:
        return f'Tensor(shape={self.shape}, node={self.node_id})'

    @property
    def shape(self) -> typing.Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    @property
    def values(self) -> typing.List[float]:
        """
        Row-major flattened values.
        """
        return self.value.ravel().tolist()

    def item(self) -> float:
        if self.size != 1:
            raise with_context(
                ShapeMismatch('Only single-element tensors convert to float.'),
                context={'shape': self.shape},
            )
        return float(self.value.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Record(typing.NamedTuple):
    """
    One primitive application on a tape.
    """
    op: str
    inputs: typing.Tuple[typing.Optional[int], ...]
    output: int
    backward: BackwardFn


class Tape:
    """
    Ordered record of primitive applications.

    Records are appended as primitives execute, so the list is always in
    topological order and the backward pass visits each one exactly once.
    """

    def __init__(self, strict: bool = False) -> None:
        """
        :param strict:
            If ``True``, :py:func:`l2_normalize` raises
            :py:class:`NumericFault` on zero rows instead of passing them
            through.
        """
        super(Tape, self).__init__()

        self.strict = strict
        self.records: typing.List[Record] = []

        self.leaves: typing.Dict[int, typing.Tuple[str, typing.Tuple]] = {}
        """
        Watched leaves (parameters and inputs): node id -> (name, shape).
        """

        self._next_id = 0

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, value: typing.Any, name: typing.Optional[str] = None) \
            -> Tensor:
        """
        Registers a leaf whose gradient :py:func:`backward` will report.
        """
        node_id = self._allocate()
        tensor = Tensor(value, self, node_id)
        self.leaves[node_id] = (name or f'leaf{node_id}', tensor.shape)
        return tensor

    def record(self,
            op: str,
            inputs: typing.Sequence[Tensor],
            value: np.ndarray,
            backward_fn: BackwardFn,
    ) -> Tensor:
        node_id = self._allocate()
        self.records.append(
            Record(
                op=op,
                inputs=tuple(t.node_id for t in inputs),
                output=node_id,
                backward=backward_fn,
            ),
        )
        return Tensor(value, self, node_id)

    def _allocate(self) -> int:
        node_id = self._next_id
        self._next_id += 1
        return node_id


def as_tensor(value: typing.Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _shapes(inputs: typing.Sequence[Tensor]) -> typing.List[typing.Tuple]:
    return [t.shape for t in inputs]


def _apply(
        op: str,
        inputs: typing.Sequence[Tensor],
        value: np.ndarray,
        backward_fn: BackwardFn,
) -> Tensor:
    """
    Validates a primitive's output and records it on the inputs' tape.
    """
    if not np.all(np.isfinite(value)):
        raise with_context(
            NumericFault(f'{op} produced non-finite values.'),

            context={
                'op': op,
                'shapes': _shapes(inputs),
                'nonFinite': int(np.size(value) - np.isfinite(value).sum()),
            },
        )

    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(value)

    if len(tapes) > 1:
        raise with_context(
            DetachedTensor(f'{op} received tensors from different tapes.'),
            context={'op': op},
        )

    tape, = tapes.values()
    return tape.record(op, inputs, value, backward_fn)


def _mismatch(op: str, inputs: typing.Sequence[Tensor], reason: str) \
        -> ShapeMismatch:
    return with_context(
        ShapeMismatch(f'{op}: {reason}'),
        context={'op': op, 'shapes': _shapes(inputs)},
    )


def _unbroadcast(grad: np.ndarray, shape: typing.Tuple[int, ...]) \
        -> np.ndarray:
    """
    Sums a broadcast gradient back down to ``shape``.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> typing.Tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _mismatch(op, (a, b), 'operands do not broadcast') from None


def _check_segments(
        op: str,
        inputs: typing.Sequence[Tensor],
        segments: np.ndarray,
        rows: int,
        num_segments: int,
) -> np.ndarray:
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (rows,):
        raise _mismatch(op, inputs, 'one segment id per row is required')
    if rows and (segments.min() < 0 or segments.max() >= num_segments):
        raise with_context(
            ShapeMismatch(f'{op}: segment id out of range.'),

            context={
                'op': op,
                'numSegments': num_segments,
                'range': [int(segments.min()), int(segments.max())],
            },
        )
    return segments


def _segment_sum(x: np.ndarray, segments: np.ndarray, num_segments: int) \
        -> np.ndarray:
    out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, segments, x)
    return out


# Elementwise and linear primitives.

def add(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)
    sa, sb = a.shape, b.shape
    return _apply(
        'add', (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)
    sa, sb = a.shape, b.shape
    return _apply(
        'sub', (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)
    va, vb = a.value, b.value
    return _apply(
        'mul', (a, b), va * vb,
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _apply('scale', (a,), a.value * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _mismatch('matmul', (a, b), 'expected (n, k) @ (k, m)')
    va, vb = a.value, b.value
    return _apply('matmul', (a, b), va @ vb, lambda g: (g @ vb.T, va.T @ g))


def concat(tensors: typing.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise _mismatch('concat', tensors, 'nothing to concatenate')
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise _mismatch('concat', tensors, f'incompatible along axis {axis}') \
            from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _apply(
        'concat', tensors, value,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def reshape(a: Tensor, shape: typing.Sequence[int]) -> Tensor:
    original = a.shape
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError:
        raise _mismatch('reshape', (a,), f'cannot reshape to {tuple(shape)}') \
            from None
    return _apply('reshape', (a,), value, lambda g: (g.reshape(original),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """
    Dot product along the last axis.

    Vectors give a scalar; ``(n, d)`` matrices give an ``(n, 1)`` column of
    row-wise dot products.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.value.ndim not in (1, 2):
        raise _mismatch('dot', (a, b), 'operands must share a 1-D or 2-D shape')
    va, vb = a.value, b.value
    value = (va * vb).sum(axis=-1, keepdims=va.ndim == 2)
    return _apply(
        'dot', (a, b), value,
        lambda g: (np.asarray(g)[..., None] * vb if va.ndim == 1 else g * vb,
                   np.asarray(g)[..., None] * va if va.ndim == 1 else g * va),
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _apply(
        'sum', (a,), np.asarray(a.value.sum()),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.size, 1))


def square(a: Tensor) -> Tensor:
    va = a.value
    return _apply('square', (a,), va * va, lambda g: (2.0 * va * g,))


def sqrt(a: Tensor) -> Tensor:
    """
    Square root; the derivative at exactly zero is taken as zero.
    """
    with np.errstate(invalid='ignore'):
        value = np.sqrt(a.value)

    def backward_fn(g):
        safe = np.where(value > 0.0, value, 1.0)
        return (np.where(value > 0.0, g / (2.0 * safe), 0.0),)

    return _apply('sqrt', (a,), value, backward_fn)


def ln(a: Tensor) -> Tensor:
    """
    Natural logarithm.
    """
    va = a.value
    with np.errstate(divide='ignore', invalid='ignore'):
        value = np.log(va)
    return _apply('ln', (a,), value, lambda g: (g / va,))


# Activations.

def elu(a: Tensor, alpha: float = ELU_ALPHA) -> Tensor:
    va = a.value
    negative = alpha * np.expm1(np.minimum(va, 0.0))
    value = np.where(va > 0.0, va, negative)
    return _apply(
        'elu', (a,), value,
        lambda g: (g * np.where(va > 0.0, 1.0, negative + alpha),),
    )


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.value)
    return _apply('tanh', (a,), value, lambda g: (g * (1.0 - value * value),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    va = a.value
    factor = np.where(va > 0.0, 1.0, slope)
    return _apply('leaky_relu', (a,), va * factor, lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    va = a.value
    mask = (va > 0.0).astype(np.float64)
    return _apply('relu', (a,), va * mask, lambda g: (g * mask,))


# Graph primitives.

def gather_rows(a: Tensor, index: typing.Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    rows = a.shape[0] if a.value.ndim else 0
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= rows)):
        raise _mismatch('gather_rows', (a,), 'row index out of range')
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, index, g)
        return (out,)

    return _apply('gather_rows', (a,), a.value[index], backward_fn)


def sum_segments(
        a: Tensor,
        segments: typing.Sequence[int],
        num_segments: int,
) -> Tensor:
    """
    Sums the rows of ``a`` that share a segment id (empty segments give zero
    rows).
    """
    if a.value.ndim != 2:
        raise _mismatch('sum_segments', (a,), 'expected a 2-D tensor')
    segments = _check_segments(
        'sum_segments', (a,), segments, a.shape[0], num_segments,
    )
    return _apply(
        'sum_segments', (a,),
        _segment_sum(a.value, segments, num_segments),
        lambda g: (g[segments],),
    )


def softmax_over_segments(
        scores: Tensor,
        segments: typing.Sequence[int],
        num_segments: int,
) -> Tensor:
    """
    Softmax of ``(n, 1)`` scores within each segment.
    """
    if scores.value.ndim != 2 or scores.shape[1] != 1:
        raise _mismatch('softmax_over_segments', (scores,), 'expected (n, 1)')
    segments = _check_segments(
        'softmax_over_segments', (scores,), segments, scores.shape[0],
        num_segments,
    )
    v = scores.value[:, 0]
    peak = np.full(num_segments, -np.inf)
    np.maximum.at(peak, segments, v)
    e = np.exp(v - peak[segments])
    total = np.zeros(num_segments)
    np.add.at(total, segments, e)
    y = (e / total[segments])[:, None]

    def backward_fn(g):
        weighted = np.zeros(num_segments)
        np.add.at(weighted, segments, (g * y)[:, 0])
        return (y * (g - weighted[segments][:, None]),)

    return _apply('softmax_over_segments', (scores,), y, backward_fn)


def batch_norm(
        a: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: np.ndarray,
        running_var: np.ndarray,
        training: bool,
        segments: typing.Optional[typing.Sequence[int]] = None,
        num_segments: int = 1,
        momentum: float = BN_MOMENTUM,
        epsilon: float = BN_EPSILON,
) -> Tensor:
    """
    Batch normalisation over rows.

    In training mode, statistics are computed per segment (one segment per
    graph in a batch) and the running statistics are updated in place with
    their node-weighted averages.  In inference mode the running statistics
    are used.
    """
    if a.value.ndim != 2 or gamma.shape != (a.shape[1],) \
            or beta.shape != (a.shape[1],):
        raise _mismatch('batch_norm', (a, gamma, beta), 'expected (n, d), (d,), (d,)')

    x = a.value
    g_val = gamma.value

    if not training:
        inv = 1.0 / np.sqrt(running_var + epsilon)
        xhat = (x - running_mean) * inv
        return _apply(
            'batch_norm', (a, gamma, beta), xhat * g_val + beta.value,
            lambda g: (g * g_val * inv, (g * xhat).sum(axis=0), g.sum(axis=0)),
        )

    n = x.shape[0]
    if segments is None:
        segments = np.zeros(n, dtype=np.int64)
        num_segments = 1
    segments = _check_segments('batch_norm', (a,), segments, n, num_segments)

    counts = np.maximum(np.bincount(segments, minlength=num_segments), 1)[:, None]
    seg_mean = _segment_sum(x, segments, num_segments) / counts
    centred = x - seg_mean[segments]
    seg_var = _segment_sum(centred * centred, segments, num_segments) / counts
    inv = 1.0 / np.sqrt(seg_var + epsilon)
    xhat = centred * inv[segments]

    unbiased = seg_var * counts / np.maximum(counts - 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * seg_mean[segments].mean(axis=0)
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased[segments].mean(axis=0)

    def backward_fn(g):
        dxhat = g * g_val
        mean_d = _segment_sum(dxhat, segments, num_segments) / counts
        mean_dx = _segment_sum(dxhat * xhat, segments, num_segments) / counts
        dx = inv[segments] * (dxhat - mean_d[segments] - xhat * mean_dx[segments])
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _apply('batch_norm', (a, gamma, beta), xhat * g_val + beta.value,
        backward_fn)


def l2_normalize(a: Tensor, strict: typing.Optional[bool] = None) -> Tensor:
    """
    Scales each row (or a lone vector) to unit Euclidean norm.

    Zero rows are returned unchanged with zero gradient; in strict mode they
    raise :py:class:`NumericFault` instead.
    """
    va = a.value
    norms = np.sqrt((va * va).sum(axis=-1, keepdims=True))
    zero = norms == 0.0

    if zero.any():
        if strict is None:
            strict = a.tape.strict if a.tape is not None else False
        if strict:
            raise with_context(
                NumericFault('l2_normalize received a zero vector.'),
                context={'op': 'l2_normalize', 'zeroRows': int(zero.sum())},
            )
        log.debug('l2_normalize passed %d zero row(s) through.', int(zero.sum()))

    safe = np.where(zero, 1.0, norms)
    y = va / safe

    def backward_fn(g):
        projected = g - y * (g * y).sum(axis=-1, keepdims=True)
        return (np.where(zero, 0.0, projected / safe),)

    return _apply('l2_normalize', (a,), y, backward_fn)


# Differentiation.

def backward(
        tape: Tape,
        output: Tensor,
        sources: typing.Optional[typing.Sequence[Tensor]] = None,
) -> typing.Union[typing.Dict[str, np.ndarray], typing.List[np.ndarray]]:
    """
    Reverse pass from a single-element ``output``.

    :param sources:
        Leaves to report.  If omitted, returns a dict of gradients for every
        watched leaf, keyed by the name it was watched under.

    :raise:
        - :py:class:`ShapeMismatch` if ``output`` has more than one element.
        - :py:class:`DetachedTensor` if ``output`` or a source is not on the
          tape.
    """
    if output.size != 1:
        raise with_context(
            ShapeMismatch('backward requires a scalar output.'),
            context={'shape': output.shape},
        )

    if output.tape is not tape:
        raise with_context(
            DetachedTensor('Output is not recorded on this tape.'),
            context={'nodeId': output.node_id},
        )

    for source in sources or ():
        if source.tape is not tape or source.node_id not in tape.leaves:
            raise with_context(
                DetachedTensor('Gradient requested for a detached leaf.'),
                context={'nodeId': source.node_id},
            )

    grads: typing.Dict[int, np.ndarray] = {
        output.node_id: np.ones(output.shape, dtype=np.float64),
    }

    for record in reversed(tape.records):
        g = grads.pop(record.output, None)
        if g is None:
            continue

        for node_id, input_grad in zip(record.inputs, record.backward(g)):
            if node_id is None or input_grad is None:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + input_grad
            else:
                grads[node_id] = np.asarray(input_grad, dtype=np.float64)

    def leaf_grad(node_id: int) -> np.ndarray:
        _, shape = tape.leaves[node_id]
        return grads.get(node_id, np.zeros(shape, dtype=np.float64)) \
            .reshape(shape)

    if sources is not None:
        return [leaf_grad(s.node_id) for s in sources]

    return {name: leaf_grad(node_id) for node_id, (name, _) in tape.leaves.items()}


def gradcheck(
        f: typing.Callable[[Tensor], Tensor],
        x: typing.Any,
        h: float = 1e-5,
) -> float:
    """
    Compares the tape gradient of scalar ``f`` at ``x`` with central
    differences.

    :return:
        ``max |analytic - numeric| / max(1, |analytic|)`` over coordinates, or
        ``inf`` if either evaluation hits a numeric fault.
    """
    x = np.array(x, dtype=np.float64)

    try:
        tape = Tape()
        leaf = tape.watch(x, 'x')
        out = f(leaf)
        if out.tape is None:
            analytic = np.zeros_like(x)
        else:
            analytic, = backward(tape, out, [leaf])

        numeric = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            numeric[i] = (f(Tensor(up)).item() - f(Tensor(down)).item()) / (2.0 * h)
    except NumericFault:
        return float('inf')

    if not x.size:
        return 0.0

    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
