"""Central finite-difference gradient checking used across test modules.

Checks run in 64-bit: callers upcast tensors before probing. The stencil
is the 5-point central difference at h=1e-3, whose O(h^4) truncation is
far below the 1e-4 relative-error budget even for small partials.
"""

import numpy as np

H = 1e-3


def central_diff(f, x: np.ndarray, index: int, h: float = H) -> float:
    """5-point central difference of scalar f along one coordinate."""
    flat = x.reshape(-1)
    orig = flat[index]
    vals = []
    for delta in (2 * h, h, -h, -2 * h):
        flat[index] = orig + delta
        vals.append(f(x))
    flat[index] = orig
    f2p, f1p, f1m, f2m = vals
    return (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h)


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Full central-difference gradient of scalar f at x."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    gflat = g.reshape(-1)
    for i in range(x.size):
        gflat[i] = central_diff(f, x, i, h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def probe_relative_error(fd: float, g: float) -> float:
    """Per-coordinate relative error with a floor for dead coordinates."""
    return abs(fd - g) / max(abs(fd), abs(g), 1e-8)


def smooth_central_diff(f, x: np.ndarray, index: int, h: float = H):
    """Central difference, or None when FD is untrustworthy at this point.

    A coordinate is certifiable only where the estimate is scale-stable:
    at a smooth point shrinking h leaves the 5-point stencil unchanged to
    ~h^4, while relu/maxpool kinks inside the window (or dense kink
    clusters around the point) shift it between scales and get rejected.
    """
    estimates = [central_diff(f, x, index, h * s) for s in (1.0, 0.5, 0.125)]
    for a in estimates:
        for b in estimates:
            if probe_relative_error(a, b) > 1e-5:
                return None
    return estimates[-1]


def upcast_params(params):
    """Promote Tensor parameters to float64 in place (for FD checks)."""
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = None
