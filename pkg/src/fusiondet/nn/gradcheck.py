"""Central finite-difference verification of tape backward passes."""

from __future__ import annotations

import numpy as np

from .core import Tape, record_switches, replay_switches


def check_gradients(forward, params=(), inputs=(), n_samples=6, step=1e-4, rng=None,
                    freeze_switches=True):
    """Max relative error between finite-difference and backprop gradients.

    ``forward(tape)`` runs the fragment and returns ``(loss, seeds)``, where
    ``seeds`` is the ``[(array, grad), ...]`` list handed to
    ``tape.backward``; it is called with ``tape=None`` for the perturbed
    evaluations. ``params`` are :class:`Param` objects and ``inputs`` leaf
    arrays; both are perturbed in place at up to ``n_samples`` random
    coordinates each.

    With ``freeze_switches`` the perturbed passes reuse the ReLU/max selections
    of the base pass, so the finite difference is taken on the same linear
    piece that backprop differentiates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    tape = Tape()
    with record_switches() as store:
        _, seeds = forward(tape)
    tape.backward(seeds)

    targets = [(p.value, p.grad.copy()) for p in params]
    for x in inputs:
        g = tape.grad_of(x)
        targets.append((x, np.zeros_like(x) if g is None else g))

    def evaluate():
        if freeze_switches:
            with replay_switches(store):
                return forward(None)[0]
        return forward(None)[0]

    worst = 0.0
    for arr, analytic in targets:
        if not arr.flags.c_contiguous:
            raise ValueError("perturbed arrays must be C-contiguous")
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            lp = evaluate()
            flat[i] = orig - step
            lm = evaluate()
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            bp = analytic.reshape(-1)[i]
            err = abs(fd - bp) / max(1e-8, abs(fd) + abs(bp))
            worst = max(worst, float(err))
    return worst
