"""
Dense float64 arrays with tape-based reverse-mode differentiation, sized for the
small recurrent networks of the autoencoder and the critic.
"""
import threading
import zipfile
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from TrepPlatform import ContractError, DataError, NumericalError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_state = threading.local()


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "param_name", "__weakref__")

    def __init__(self, value, parents: Tuple['Tensor', ...] = (), backward_fn: Optional[Callable] = None,
                 param_name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __len__(self):
        return self.value.shape[0]

    def __repr__(self):
        name = f" {self.param_name}" if self.param_name else ""
        return f"Tensor{name}(shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.value.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records the operations of one forward pass. Use as a context manager."""

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def current() -> Optional['Tape']:
        stack = getattr(_state, "tapes", None)
        return stack[-1] if stack else None


def constant(value) -> Tensor:
    return Tensor(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_tracked(t: Tensor) -> bool:
    return t.param_name is not None or t.backward_fn is not None


def _record(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, what: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite values produced by {what}")
    tape = Tape.current()
    if tape is None or not any(_is_tracked(p) for p in parents):
        return Tensor(value)
    out = Tensor(value, tuple(parents), backward_fn)
    tape.nodes.append(out)
    return out


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        # only the bias pattern (n, m) + (m,) broadcasts
        if not (a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]):
            raise ContractError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return _record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    return _record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, k: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.value * k, (a,), lambda g: (g * k,), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as e:
        raise ContractError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(value, tensors, backward, "concat")


def stack(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    value = np.stack([t.value for t in tensors])
    return _record(value, tensors, lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def slice_(a, start: int, stop: int) -> Tensor:
    """a[start:stop] along the last axis."""
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ContractError(f"slice {start}:{stop} outside last axis of size {a.shape[-1]}")
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(a.value[..., start:stop], (a,), backward, "slice")


def take(a, index) -> Tensor:
    """Gather along the first axis; index is an int or an integer array."""
    a = as_tensor(a)
    idx = np.asarray(index)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"take: index outside first axis of size {a.shape[0]}")
    shape = a.value.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.value[idx], (a,), backward, "take")


def expand(a, n: int) -> Tensor:
    """Repeat a scalar into a length-n vector."""
    a = as_tensor(a)
    if a.value.size != 1:
        raise ContractError(f"expand needs a scalar, got shape {a.shape}")
    shape = a.value.shape
    return _record(np.full(n, a.value.reshape(())), (a,), lambda g: (np.full(shape, g.sum()),), "expand")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.value.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: {e}")
    return _record(value, (a,), lambda g: (g.reshape(original),), "reshape")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _record(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    if np.any(av <= 0):
        raise NumericalError("log of a non-positive value")
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def sum_(a) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    return _record(np.sum(a.value), (a,), lambda g: (np.full(shape, g),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape
    n = a.value.size
    return _record(np.mean(a.value), (a,), lambda g: (np.full(shape, g / n),), "mean")


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def masked_softmax(logits, mask) -> Tensor:
    """
    exp(logits) * mask normalized by its L1 norm; exactly zero off the mask.
    The maximum over the support is subtracted first, which leaves the result unchanged.
    """
    logits = as_tensor(logits)
    m = np.asarray(mask.value if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape != logits.shape:
        raise ContractError(f"masked_softmax: mask shape {m.shape} vs logits {logits.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ContractError("masked_softmax: mask must be binary")
    if not np.any(m):
        raise ContractError("masked_softmax: mask has no legal entry")
    support = m > 0
    shifted = np.where(support, logits.value - logits.value[support].max(), 0.0)
    e = np.exp(shifted) * m
    p = e / e.sum()

    def backward(g):
        return (p * (g - np.dot(g, p)),)

    return _record(p, (logits,), backward, "masked_softmax")


def softmax(logits) -> Tensor:
    return masked_softmax(logits, np.ones(as_tensor(logits).shape))


def dot(a, b) -> Tensor:
    return sum_(mul(a, b))


def backward(tape: Tape, loss: Tensor, store: Optional['ParameterStore'] = None) -> Dict[str, np.ndarray]:
    """
    Reverse pass over the tape. Gradients of named parameters are accumulated
    into store (when given) and returned by name.
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    param_grads: Dict[str, np.ndarray] = {}

    def accumulate(node: Tensor, g: np.ndarray):
        if node.param_name is not None:
            if node.param_name in param_grads:
                param_grads[node.param_name] = param_grads[node.param_name] + g
            else:
                param_grads[node.param_name] = np.array(g, dtype=np.float64)
        elif node.backward_fn is not None:
            key = id(node)
            grads[key] = grads[key] + g if key in grads else g

    if loss.param_name is not None:
        accumulate(loss, np.ones(()))
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if _is_tracked(parent):
                accumulate(parent, pg)

    for name, g in param_grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        if store is not None:
            store.grads[name] += g
    return param_grads


class ParameterStore:
    """Named trainable arrays with gradient buffers and Adam state."""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> List[str]:
        return list(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name} already exists")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"parameter {name} has non-finite values")
        tensor = Tensor(value, param_name=name)
        self.params[name] = tensor
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)
        return tensor

    def add_uniform(self, name: str, shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        k = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-k, k, size=shape))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def copy(self) -> 'ParameterStore':
        clone = ParameterStore()
        for name, tensor in self.params.items():
            clone.add(name, tensor.value.copy())
        return clone

    def values(self) -> Dict[str, np.ndarray]:
        return {name: t.value for name, t in self.params.items()}

    def assign(self, name: str, value: np.ndarray):
        if self.params[name].shape != np.shape(value):
            raise ContractError(f"assign {name}: shape {np.shape(value)} vs {self.params[name].shape}")
        self.params[name].value = np.array(value, dtype=np.float64)

    def equals(self, other: 'ParameterStore') -> bool:
        return self.names() == other.names() and \
            all(np.array_equal(self.params[n].value, other.params[n].value) for n in self.params)


def clip_gradients(store: ParameterStore, max_norm: float) -> float:
    norm = store.grad_norm()
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for g in store.grads.values():
            g *= factor
    return norm


def optimizer_step(store: ParameterStore, learning_rate: float, clip_norm: Optional[float] = None):
    """One Adam step from the accumulated gradients, which are then zeroed."""
    if clip_norm:
        clip_gradients(store, clip_norm)
    store.step_count += 1
    t = store.step_count
    for name, tensor in store.params.items():
        g = store.grads[name]
        m = store.adam_m[name] = ADAM_BETA1 * store.adam_m[name] + (1.0 - ADAM_BETA1) * g
        v = store.adam_v[name] = ADAM_BETA2 * store.adam_v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        updated = tensor.value - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if not np.all(np.isfinite(updated)):
            raise NumericalError(f"optimizer step produced non-finite values in {name}")
        tensor.value = updated
    store.zero_grad()


def soft_update(target: ParameterStore, online: ParameterStore, rate: float):
    """target <- rate * online + (1 - rate) * target, for every parameter."""
    if target.names() != online.names():
        raise ContractError("soft_update: parameter names differ")
    for name in target.names():
        t, o = target.params[name], online.params[name]
        if t.shape != o.shape:
            raise ContractError(f"soft_update: shape mismatch for {name}")
        if rate == 1.0:
            t.value = o.value.copy()
        elif rate != 0.0:
            t.value = rate * o.value + (1.0 - rate) * t.value


def write_npz(path: str, arrays: Dict[str, np.ndarray]):
    """np.savez layout with fixed member timestamps so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for key, array in arrays.items():
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with archive.open(info, "w", force_zip64=True) as member:
                np.lib.format.write_array(member, np.asanyarray(array), allow_pickle=False)


def save_checkpoint(path: str, stores: Dict[str, ParameterStore], metadata: Optional[Dict[str, str]] = None):
    """
    Write parameter stores into one .npz archive. Each array is keyed
    '<store>/<kind>/<name>' with kind in value|adam_m|adam_v; step counters and
    string metadata are stored as 0-d arrays.
    """
    arrays = {}
    for store_name, store in stores.items():
        arrays[f"{store_name}/__step__"] = np.array(store.step_count, dtype=np.int64)
        arrays[f"{store_name}/__order__"] = np.array(store.names())
        for name in store.names():
            arrays[f"{store_name}/value/{name}"] = store.params[name].value
            arrays[f"{store_name}/adam_m/{name}"] = store.adam_m[name]
            arrays[f"{store_name}/adam_v/{name}"] = store.adam_v[name]
    for key, value in (metadata or {}).items():
        arrays[f"__meta__/{key}"] = np.array(str(value))
    write_npz(path, arrays)


def load_checkpoint(path: str, only: Optional[Iterable[str]] = None
                    ) -> Tuple[Dict[str, ParameterStore], Dict[str, str]]:
    """Read a checkpoint; `only` restricts loading to the named stores, which must be present."""
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}")
    stores: Dict[str, ParameterStore] = {}
    metadata: Dict[str, str] = {}
    with archive:
        for key in archive.files:
            if key.startswith("__meta__/"):
                metadata[key.split("/", 1)[1]] = str(archive[key])
        store_names = sorted({key.split("/", 1)[0] for key in archive.files if key.endswith("/__order__")})
        if only is not None:
            wanted = sorted(set(only))
            missing = [name for name in wanted if name not in store_names]
            if missing:
                raise DataError(f"checkpoint {path} holds no {', '.join(missing)} parameters")
            store_names = wanted
        for store_name in store_names:
            store = ParameterStore()
            for name in archive[f"{store_name}/__order__"]:
                name = str(name)
                store.add(name, archive[f"{store_name}/value/{name}"])
                store.adam_m[name] = np.array(archive[f"{store_name}/adam_m/{name}"])
                store.adam_v[name] = np.array(archive[f"{store_name}/adam_v/{name}"])
            store.step_count = int(archive[f"{store_name}/__step__"])
            stores[store_name] = store
    return stores, metadata


def gradient_check(loss_fn: Callable[[], Tensor], store: ParameterStore, step: float = 1e-5,
                   names: Optional[Iterable[str]] = None) -> float:
    """
    Largest relative error between the tape gradient and central finite differences
    of loss_fn over the named parameters.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    analytic = backward(tape, loss)
    worst = 0.0
    for name in (names or store.names()):
        value = store.params[name].value
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            original = value[idx]
            value[idx] = original + step
            plus = loss_fn().item()
            value[idx] = original - step
            minus = loss_fn().item()
            value[idx] = original
            numeric[idx] = (plus - minus) / (2 * step)
        grad = analytic.get(name, np.zeros_like(value))
        denom = max(np.linalg.norm(grad) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(grad - numeric) / denom))
    return worst
