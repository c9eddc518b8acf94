"""Tape, parameters and switch recording shared by every layer.

Forward ops push a backward closure onto an optional :class:`Tape`; running
``tape.backward`` walks them in reverse and accumulates input gradients by
array identity. Parameter gradients accumulate into ``Param.grad``.

Piecewise-linear ops (ReLU, max pooling, element-wise max, ROI max pooling)
route their selection through :func:`switch`, which lets the gradient checker
record the selections of a base pass and replay them during the perturbed
passes.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Tape:
    """Records backward closures of forward ops for one pass."""

    def __init__(self):
        self._records = []
        self.grads = {}

    def push(self, out, inputs, backward):
        self._records.append((out, inputs, backward))
        return out

    def backward(self, seeds):
        """Propagate ``[(array, grad), ...]`` seeds; returns grads of leaf inputs by id."""
        grads = {}
        for arr, g in seeds:
            _accumulate(grads, arr, g)
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for x, gx in zip(inputs, backward(g)):
                if gx is not None:
                    _accumulate(grads, x, gx)
        self.grads = grads
        return grads

    def grad_of(self, arr):
        return self.grads.get(id(arr))


def _accumulate(grads, arr, g):
    key = id(arr)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


class Probe:
    """Shape-only stand-in for a tensor; ops append ``(name, shape)`` to ``log``."""

    def __init__(self, shape, log=None):
        self.shape = tuple(shape)
        self.log = [] if log is None else log

    def derive(self, name, shape):
        shape = tuple(int(s) for s in shape)
        if name:
            self.log.append((name, shape))
        return Probe(shape, self.log)


class _Switches:
    mode = None
    store: list = []
    pos = 0


_SW = _Switches()


def switch(selection: np.ndarray) -> np.ndarray:
    """Return ``selection``, or the recorded one when replaying."""
    if _SW.mode == "record":
        _SW.store.append(selection)
    elif _SW.mode == "replay":
        selection = _SW.store[_SW.pos]
        _SW.pos += 1
    return selection


@contextmanager
def record_switches():
    prev = (_SW.mode, _SW.store, _SW.pos)
    _SW.mode, _SW.store, _SW.pos = "record", [], 0
    try:
        yield _SW.store
    finally:
        _SW.mode, _SW.store, _SW.pos = prev


@contextmanager
def replay_switches(store):
    prev = (_SW.mode, _SW.store, _SW.pos)
    _SW.mode, _SW.store, _SW.pos = "replay", store, 0
    try:
        yield
        if _SW.pos != len(store):
            raise RuntimeError("replayed pass consumed a different number of switches")
    finally:
        _SW.mode, _SW.store, _SW.pos = prev


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64, gain=1.0):
    limit = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
