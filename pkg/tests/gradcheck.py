"""Central finite-difference gradient checking for the tape engine."""
import numpy as np

from torquevla.nn import backward, no_grad


def analytic_grads(loss_fn, params):
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    return [p.grad.copy() for p in params]


def numeric_grads(loss_fn, params, h=1e-5):
    out = []
    with no_grad():
        for p in params:
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = float(loss_fn().data)
                flat[i] = old - h
                down = float(loss_fn().data)
                flat[i] = old
                g.reshape(-1)[i] = (up - down) / (2 * h)
            out.append(g)
    return out


def max_relative_error(loss_fn, params, h=1e-5, floor=1e-6):
    """Largest per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).

    ``floor`` sits above the round-off of a central difference at step ``h``,
    so gradients that are exactly zero (attention key biases) compare as equal.
    """
    worst = 0.0
    for a, n in zip(analytic_grads(loss_fn, params), numeric_grads(loss_fn, params, h)):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
