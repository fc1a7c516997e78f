"""Independent reference computations shared by the test modules."""

import numpy as np

from aflkd import nn


def fd_gradient(spec, params, batch, loss, h=1e-5):
    """Central finite differences of the loss w.r.t. every parameter."""
    out = np.zeros_like(params.values)
    for i in range(len(params)):
        p1 = params.copy()
        p1.values[i] += h
        p2 = params.copy()
        p2.values[i] -= h
        l1, _ = loss.value_and_grad(nn.forward_cache(spec, p1, batch)[0])
        l2, _ = loss.value_and_grad(nn.forward_cache(spec, p2, batch)[0])
        out[i] = (l1 - l2) / (2 * h)
    return out


def random_spec(rng, max_layers=3, max_width=8, classes=None):
    """A random small MLP spec with mixed activations."""
    depth = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(2, max_width + 1)) for _ in range(depth + 1)]
    if classes is not None:
        dims[-1] = classes
    else:
        dims[-1] = max(dims[-1], 2)
    layers = []
    for i in range(depth):
        last = i == depth - 1
        act = "identity" if last else ("relu", "tanh")[int(rng.integers(0, 2))]
        layers.append(nn.LayerSpec(dims[i], dims[i + 1], act, track_stats=not last))
    return nn.ModelSpec(tuple(layers))


def scalar_kl(p_logits, q_logits, temperature=1.0):
    """Direct per-row sum p*log(p/q), averaged; no shared code with nn."""
    import math
    total = 0.0
    rows = len(p_logits)
    for pr, qr in zip(p_logits, q_logits):
        pe = [math.exp(v / temperature) for v in pr]
        qe = [math.exp(v / temperature) for v in qr]
        ps = sum(pe)
        qs = sum(qe)
        total += sum((a / ps) * (math.log(a / ps) - math.log(b / qs))
                     for a, b in zip(pe, qe))
    return total / rows
