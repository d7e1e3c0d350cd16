"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient; outside a tape they are plain numpy computations.
"""
import hashlib
import io
import json
import zipfile
from collections import OrderedDict, namedtuple
from contextlib import contextmanager

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from sessrec import constants
from .perf import count_macs

PRECISIONS = {'64': np.float64, '32': np.float32}

_state = {
    'dtype': PRECISIONS[constants.DEFAULT_PRECISION],
    'debug': constants.DEBUG_NUMERICS,
}


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericsError(FloatingPointError):
    pass


class IntegrityError(Exception):
    def __init__(self, fname, reason):
        self.fname = fname
        self.reason = reason

    def __str__(self):
        return 'Integrity check of %s failed: %s' % (self.fname, self.reason)


def set_precision(bits):
    bits = str(bits)
    if bits not in PRECISIONS:
        raise ValueError('Unsupported precision: {}. Options: {}'.format(bits, list(PRECISIONS)))
    _state['dtype'] = PRECISIONS[bits]


def precision_name(dtype=None):
    dtype = np.dtype(dtype or _state['dtype'])
    return '64' if dtype == np.float64 else '32'


@contextmanager
def debug_mode(enabled=True):
    previous = _state['debug']
    _state['debug'] = enabled
    try:
        yield
    finally:
        _state['debug'] = previous


class Tape:
    """Ordered record of the differentiable operations executed inside ``with Tape()``."""
    _stack = []

    def __init__(self):
        self.records = []

    @classmethod
    def active(cls):
        return cls._stack[-1] if cls._stack else None

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.remove(self)
        return False

    def record(self, out):
        self.records.append(out)

    def backward(self, loss):
        if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.data.ndim > 1:
            raise ContractError('backward needs a scalar loss, got shape {}'.format(
                getattr(loss, 'shape', None)))
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for out in reversed(self.records):
            if out.grad is None:
                continue
            grads = out._backward(out.grad)
            for parent, grad in zip(out._parents, grads):
                if grad is not None and parent.requires_grad:
                    parent._accumulate(grad)
        for out in self.records:
            out.grad = None


def backward(tape, loss):
    tape.backward(loss)


def _check_finite(data):
    if not np.all(np.isfinite(data)):
        raise NumericsError('non-finite value produced ({} NaN, {} Inf)'.format(
            int(np.isnan(data).sum()), int(np.isinf(data).sum())))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _state['debug']:
        _check_finite(out.data)
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype != _state['dtype']:
            data = data.astype(_state['dtype'])
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def __repr__(self):
        return 'Tensor(shape={}, requires_grad={})'.format(self.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """Trainable tensor carrying its gradient and Adam state."""

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=_state['dtype']), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def _accumulate(self, grad):
        self.grad += grad

    def zero_grad(self):
        self.grad[...] = 0

    @property
    def gradient(self):
        return self.grad

    def __repr__(self):
        return 'Parameter({}, shape={})'.format(self.name, self.shape)


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    ))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    return _make(log_expit(a.data), (a,), lambda g: (g * expit(-a.data),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, (a,), backward_fn)


# reductions and shape

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), backward_fn)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _has_advanced_index(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(a, key):
    out = a.data[key]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        if _has_advanced_index(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(out, (a,), backward_fn)


def index_add(num_rows, index, src):
    """Rows of ``src`` summed into a zero tensor of ``num_rows`` rows at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(out, index, src.data)
    return _make(out, (src,), lambda g: (g[index],))


def concatenate(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError('matmul needs operands with at least 2 dimensions, got {} and {}'
                             .format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul inner dimensions differ: {} x {}'.format(a.shape, b.shape))
    out = np.matmul(a.data, b.data)
    count_macs(out.size * a.shape[-1])
    return _make(out, (a, b), lambda g: (
        _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
        _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape),
    ))


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    out = x.data - logsumexp(x.data, axis=axis, keepdims=True)

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward_fn)


def cross_entropy_from_logits(logits, targets, mask=None):
    """Mean over unmasked rows of ``-log softmax(logits)[target]``; logits are [T, V]."""
    if logits.ndim != 2:
        raise DimensionError('logits must be [T, V], got {}'.format(logits.shape))
    rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.ones(rows, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if len(targets) != rows or len(mask) != rows:
        raise DimensionError('targets/mask length must equal {} rows'.format(rows))
    live = targets[mask]
    if np.any(live < 0) or np.any(live >= vocab):
        raise IndexError('target outside vocabulary of size {}'.format(vocab))
    count = int(mask.sum())
    if count == 0:
        raise ContractError('cross entropy over zero unmasked positions')
    safe = np.where(mask, targets, 0)
    log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    picked = log_probs[np.arange(rows), safe]
    loss = -(picked * mask).sum() / count

    def backward_fn(g):
        grad = np.exp(log_probs)
        grad[np.arange(rows), safe] -= 1.0
        grad *= mask[:, None] / count
        return (grad * g,)

    return _make(np.asarray(loss), (logits,), backward_fn)


def layer_norm(x, gamma, beta, eps=constants.LAYER_NORM_EPS):
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5) * gamma + beta


def binary_cross_entropy(probs, labels):
    labels = as_tensor(labels)
    return -(labels * log(probs) + (1.0 - labels) * log(1.0 - probs))


# modules

def _named(value, prefix):
    if isinstance(value, Parameter):
        yield prefix, value
    elif isinstance(value, Module):
        for name, param in value.named_parameters(prefix + '.'):
            yield name, param
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            for item in _named(v, '{}.{}'.format(prefix, i)):
                yield item
    elif isinstance(value, dict):
        for k, v in value.items():
            for item in _named(v, '{}.{}'.format(prefix, k)):
                yield item


class Module:
    def named_parameters(self, prefix=''):
        for name, value in self.__dict__.items():
            if name.startswith('_'):
                continue
            for item in _named(value, prefix + name):
                yield item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state):
        params = OrderedDict(self.named_parameters())
        if set(params) != set(state):
            raise ContractError('parameter names differ: missing {}, unexpected {}'.format(
                sorted(set(params) - set(state)), sorted(set(state) - set(params))))
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError('{}: shape {} != {}'.format(name, value.shape, p.shape))
            p.data = value.astype(p.data.dtype).copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def init_normal(rng, shape, fan_in=None):
    scale = 1.0 / np.sqrt(fan_in) if fan_in else constants.INIT_SCALE
    return rng.normal(0.0, scale, size=shape)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, name='linear'):
        self.weight = Parameter(init_normal(rng, (in_features, out_features), in_features),
                                name=name + '.weight')
        self.bias = Parameter(np.zeros(out_features), name=name + '.bias') if bias else None

    def forward(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Embedding(Module):
    def __init__(self, num, dim, rng, name='embedding'):
        self.weight = Parameter(init_normal(rng, (num, dim)), name=name + '.weight')

    def forward(self, ids):
        return self.weight[np.asarray(ids, dtype=np.int64)]


class LayerNorm(Module):
    def __init__(self, dim, name='norm'):
        self.gamma = Parameter(np.ones(dim), name=name + '.gamma')
        self.beta = Parameter(np.zeros(dim), name=name + '.beta')

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


# optimisation

class Adam:
    def __init__(self, params, learning_rate=constants.ADAM_LEARNING_RATE,
                 beta1=constants.ADAM_BETA1, beta2=constants.ADAM_BETA2, eps=constants.ADAM_EPS):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        adam_step(self.params, self.learning_rate, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(params, learning_rate=constants.ADAM_LEARNING_RATE, beta1=constants.ADAM_BETA1,
              beta2=constants.ADAM_BETA2, eps=constants.ADAM_EPS):
    for p in params:
        g = p.grad
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data = p.data - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return params


FiniteDiffReport = namedtuple(
    'FiniteDiffReport', ('passed', 'max_rel_error', 'max_abs_error', 'checked', 'worst'))


def finite_diff_check(fn, params, tolerance=1e-6, h=constants.FD_STEP, max_coords=None,
                      rng=None):
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    ``max_coords`` limits the number of coordinates checked per parameter (sampled with
    ``rng``); relative errors use ``max(|analytic|, |numeric|, FD_FLOOR)`` as denominator.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_rel = max_abs = 0.0
    worst = None
    checked = 0
    for p, grad in zip(params, analytic):
        coords = list(np.ndindex(*p.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        for idx in coords:
            orig = p.data[idx]
            p.data[idx] = orig + h
            plus = float(fn().data)
            p.data[idx] = orig - h
            minus = float(fn().data)
            p.data[idx] = orig
            numeric = (plus - minus) / (2 * h)
            err = abs(grad[idx] - numeric)
            rel = err / max(abs(grad[idx]), abs(numeric), constants.FD_FLOOR)
            checked += 1
            max_abs = max(max_abs, err)
            if rel > max_rel:
                max_rel = rel
                worst = (p.name, idx, float(grad[idx]), numeric)
    return FiniteDiffReport(max_rel < tolerance, max_rel, max_abs, checked, worst)


# checkpoint container

HEADER_KEY = '__header__'


def _checksum(arrays):
    digest = hashlib.sha256()
    for name, value in arrays.items():
        value = np.ascontiguousarray(value)
        digest.update(name.encode('utf-8'))
        digest.update(str(value.shape).encode('utf-8'))
        digest.update(value.dtype.str.encode('utf-8'))
        digest.update(value.tobytes())
    return digest.hexdigest()


def save_container(fname, arrays, header=None):
    """Write named arrays plus a JSON header (shapes, precision, checksum) to ``fname``."""
    arrays = OrderedDict(arrays)
    header = dict(header or {})
    header.update({
        'format_version': constants.FORMAT_VERSION,
        'names': list(arrays),
        'shapes': {k: list(np.shape(v)) for k, v in arrays.items()},
        'dtypes': {k: np.asarray(v).dtype.str for k, v in arrays.items()},
        'checksum': _checksum(arrays),
    })
    payload = dict(arrays)
    payload[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode('utf-8'),
                                        dtype=np.uint8)
    with open(fname, 'wb') as f:
        np.savez(f, **payload)
    return header


def load_container(fname):
    with open(fname, 'rb') as f:
        raw = f.read()
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as data:
            header = json.loads(bytes(data[HEADER_KEY]).decode('utf-8'))
            arrays = OrderedDict((name, data[name]) for name in header['names'])
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as e:
        raise IntegrityError(fname, 'unreadable container ({})'.format(e))
    if _checksum(arrays) != header.get('checksum'):
        raise IntegrityError(fname, 'checksum mismatch')
    return arrays, header
