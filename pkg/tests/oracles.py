"""Independent reference implementations shared by the test suite.

Everything here is deliberately slow and literal (nested loops, finite
differences) so it cannot share a bug with the vectorized library paths.
"""

import numpy as np

from flashpip.tensor import GradTape


def conv2d_loops(x, w, b=None, padding=None):
    """Nested-loop cross-correlation, float64 accumulate, float32 result."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    p = (kh - 1) // 2 if padding is None else padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=np.float64)
    for bb in range(B):
        for co in range(Cout):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for ci in range(Cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy, ix = oy + ky - p, ox + kx - p
                                if 0 <= iy < H and 0 <= ix < W:
                                    acc += float(x[bb, ci, iy, ix]) * float(w[co, ci, ky, kx])
                    out[bb, co, oy, ox] = acc + (float(b[co]) if b is not None else 0.0)
    return out.astype(np.float32)


def gru_step_loops(params, hidden, x):
    """Per-pixel scalar evaluation of the gated update equations."""
    def conv(w, b, planes):
        return conv2d_loops(planes, w, b)

    h, xx = hidden.astype(np.float32), x.astype(np.float32)
    hx = np.concatenate([h, xx], axis=1)
    u = 1.0 / (1.0 + np.exp(-conv(params.wu.data, params.bu.data, hx).astype(np.float64)))
    r = 1.0 / (1.0 + np.exp(-conv(params.wr.data, params.br.data, hx).astype(np.float64)))
    rhx = np.concatenate([(r.astype(np.float32) * h), xx], axis=1)
    c = np.tanh(conv(params.wc.data, params.bc.data, rhx).astype(np.float64))
    return ((1.0 - u) * h + u * c).astype(np.float32)


def fd_gradient(make_loss, param, h=1e-3):
    """Central finite differences of a scalar-valued closure w.r.t. one tensor.

    `make_loss()` must rebuild the forward pass from current parameter data
    and return a float.
    """
    g = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = make_loss()
        flat[i] = orig - h
        lm = make_loss()
        flat[i] = orig
        g.reshape(-1)[i] = (lp - lm) / (2 * h)
    return g


def grads_close(got, want, rtol=1e-4, floor=1e-6):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    tol = np.maximum(rtol * np.maximum(np.abs(got), np.abs(want)), floor)
    return bool(np.all(np.abs(got - want) <= tol))


def check_gradients(build_loss, params, h=1e-3, rtol=1e-4, floor=1e-6):
    """Autodiff-vs-finite-difference check for every tensor in `params`.

    `build_loss()` runs the forward pass and returns the scalar loss Tensor.
    Returns the worst offending (name, max abs deviation beyond tolerance),
    or None if everything matches.
    """
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        loss = build_loss()
        tape.backward(loss)
    for name, p in params.items():
        fd = fd_gradient(lambda: build_loss().item(), p, h=h)
        got = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not grads_close(got, fd, rtol=rtol, floor=floor):
            err = np.max(np.abs(np.asarray(got, dtype=np.float64) - fd))
            return name, float(err)
    return None
