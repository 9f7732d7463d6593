"""Central finite-difference checks of the analytic backward pass."""

import numpy as np

from sixdgs.render import backward, loss, render_view

STEP = 1e-4
MIN_GRAD = 1e-6
# central differences at h and h/10 disagreeing by more than this (relative)
# mark a step that straddles a compositing threshold (alpha skip, early stop);
# the smaller step is then used. The analytic value plays no part in this.
CONVERGED = 1e-5


def fd_probes(scene, cams, targets, options, rng, n_probes, lambda_ssim=0.2, sh_all=False):
    """Compare analytic and central-difference gradients on random raw entries.

    Returns ``(relative_errors, probe_labels)`` for probes whose analytic
    gradient exceeds ``MIN_GRAD`` in magnitude. Labels of probes whose step
    had to be shrunk to avoid a discontinuity end in ``"*"``.
    """
    value, grads = backward(scene, cams, targets, options, lambda_ssim)

    def f(s):
        total = 0.0
        for cam, t in zip(cams, targets):
            total += loss(render_view(s, cam, options, renderer="reference").rgb, t, lambda_ssim)
        return total / len(cams)

    candidates = []
    for name in scene.GROUPS:
        g = getattr(grads, name)
        for idx in np.ndindex(g.shape):
            if abs(g[idx]) > MIN_GRAD:
                candidates.append((name, idx))
    pick = rng.permutation(len(candidates))[:n_probes]
    errors, labels = [], []
    def central(name, idx, step):
        plus, minus = scene.copy(), scene.copy()
        getattr(plus, name)[idx] += step
        getattr(minus, name)[idx] -= step
        return (f(plus) - f(minus)) / (2 * step)

    for k in pick:
        name, idx = candidates[k]
        a = getattr(grads, name)[idx]
        step, mark = STEP, ""
        fd = central(name, idx, step)
        for _ in range(2):
            finer = central(name, idx, step / 10)
            if abs(finer - fd) <= CONVERGED * max(abs(fd), abs(finer)):
                break
            step, fd, mark = step / 10, finer, "*"
        errors.append(abs(a - fd) / max(abs(a), abs(fd)))
        labels.append(f"{name}{list(idx)}{mark}")
    return np.array(errors), labels
