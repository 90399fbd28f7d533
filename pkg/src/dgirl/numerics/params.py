"""Named parameter storage with seeded initialisation."""

import numpy as np

from ..errors import ContractViolation
from .tensor import Tensor

INIT_SCALE = 0.08


class Param(Tensor):
    """A leaf tensor whose gradient buffer always matches its value's shape."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Mapping ``name -> Param``; iteration is always in sorted name order.

    Values are drawn uniformly from ``[-0.08, 0.08]`` by a generator seeded
    with ``rng_seed``, in creation order, so two stores built by the same code
    with the same seed are bit-identical.
    """

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._entries = {}

    def add(self, name, shape, init="uniform", scale=INIT_SCALE):
        if name in self._entries:
            raise ContractViolation(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            value = self._rng.uniform(-scale, scale, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ContractViolation(f"unknown initialiser {init!r}")
        p = Param(value, name)
        self._entries[name] = p
        return p

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self.names())

    def names(self):
        return sorted(self._entries)

    def items(self):
        return [(n, self._entries[n]) for n in self.names()]

    def view(self, prefix, grad=True):
        """Parameters under ``prefix`` with the prefix stripped.

        ``grad=True`` yields the :class:`Param` tensors (ops are recorded);
        ``grad=False`` yields their raw arrays.
        """
        out = {}
        for name, p in self._entries.items():
            if name.startswith(prefix):
                out[name[len(prefix):]] = p if grad else p.value
        return out

    def size(self):
        return int(sum(p.value.size for p in self._entries.values()))

    def zero_grad(self):
        for p in self._entries.values():
            p.grad[...] = 0.0

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in self.items())))

    def all_finite(self):
        return all(np.all(np.isfinite(p.value)) for p in self._entries.values())

    def snapshot(self):
        return {n: p.value.copy() for n, p in self._entries.items()}

    def restore(self, snap):
        for n, v in snap.items():
            self.assign(n, v)

    def assign(self, name, value):
        p = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.value.shape:
            raise ContractViolation(
                f"shape mismatch for {name!r}: {value.shape} vs {p.value.shape}")
        p.value[...] = value

    def copy(self):
        other = ParamStore(self.rng_seed)
        for n, p in self.items():
            other._entries[n] = Param(p.value.copy(), n)
        return other
