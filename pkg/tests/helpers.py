import numpy as np

from satlab.tensor import randn


def rand(rng, *shape, scale=1.0, dtype=np.float64):
    return (randn(rng, shape, np.float64) * scale).astype(dtype)


def finite_difference_errors(weights, x0, ids, t, eps, sched, per_tensor=20, h=1e-3, seed=0):
    """Worst relative error between analytic and central-difference gradients, per tensor.

    ``weights`` must be float64. Coordinates are picked with a fixed seed.
    """
    from satlab.tensor import Rng
    from satlab.train import loss_and_grad

    _, grads = loss_and_grad(weights, x0, ids, t, eps, sched)
    rng = Rng(seed, stream=0xFD)
    worst = {}
    for name in weights.names():
        flat = weights.params[name].reshape(-1)
        picks = []
        while len(picks) < min(per_tensor, flat.size):
            i = rng.randint(flat.size)
            if i not in picks:
                picks.append(i)
        errs = []
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_and_grad(weights, x0, ids, t, eps, sched, want_grad=False)
            flat[i] = old - h
            lm, _ = loss_and_grad(weights, x0, ids, t, eps, sched, want_grad=False)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            an = float(grads[name].reshape(-1)[i])
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        worst[name] = max(errs)
    return worst


def perturbed_weights(config, seed=3, scale=0.05):
    """Float64 init with every tensor nudged off its structured starting value."""
    from satlab.denoiser import DenoiserWeights
    from satlab.tensor import Rng

    w = DenoiserWeights.init(config, seed=seed, dtype=np.float64)
    rng = Rng(seed, stream=0xAB)
    for name in w.names():
        w.params[name] = w.params[name] + scale * randn(rng, w.params[name].shape, np.float64)
    return w
