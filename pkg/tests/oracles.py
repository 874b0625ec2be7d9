"""Independent reference implementations used as test oracles.

Nothing here shares code with latkit's im2col/numba forward pass: the network is
evaluated pixel by pixel with explicit loops in float64.
"""

import math

import numpy as np

from latkit import tensor_core as tc


def _conv_same(x, w, b):
    h, wd, cin = x.shape
    k, _, _, cout = w.shape
    p = k // 2
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            acc = b.astype(np.float64).copy()
            for di in range(k):
                for dj in range(k):
                    ii, jj = i + di - p, j + dj - p
                    if 0 <= ii < h and 0 <= jj < wd:
                        acc += x[ii, jj, :] @ w[di, dj]  # (cin,) @ (cin, cout)
            out[i, j] = acc
    return out


def _pool(y):
    h, w, c = y.shape
    out = np.zeros((h // 2, w // 2, c))
    arg = np.zeros((h // 2, w // 2, c), dtype=int)
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                vals = [y[2 * i, 2 * j, ch], y[2 * i, 2 * j + 1, ch],
                        y[2 * i + 1, 2 * j, ch], y[2 * i + 1, 2 * j + 1, ch]]
                best = 0
                for a in range(1, 4):
                    if vals[a] > vals[best]:
                        best = a
                out[i, j, ch] = vals[best]
                arg[i, j, ch] = best
    return out, arg


def loop_forward(params, image, pattern=False):
    """float64 logits for one (H, W, C) image; optionally the kink pattern too."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    x = np.asarray(image, dtype=np.float64)
    z1 = _conv_same(x, p["conv1_w"], p["conv1_b"])
    p1, a1 = _pool(np.maximum(z1, 0))
    z2 = _conv_same(p1, p["conv2_w"], p["conv2_b"])
    p2, a2 = _pool(np.maximum(z2, 0))
    flat = p2.reshape(-1)
    z3 = np.array([p["dense_b"][u] + flat @ p["dense_w"][:, u] for u in range(p["dense_b"].shape[0])])
    r3 = np.maximum(z3, 0)
    logits = np.array([p["out_b"][c] + r3 @ p["out_w"][:, c] for c in range(p["out_b"].shape[0])])
    if not pattern:
        return logits
    # ReLU on/off states plus pool winners; the loss is smooth while this is constant
    kinks = (tuple((z1 > 0).ravel()), tuple(a1.ravel()), tuple((z2 > 0).ravel()),
             tuple(a2.ravel()), tuple((z3 > 0).ravel()))
    return logits, kinks


def ce_extended(logits, label):
    """-log softmax[label] evaluated with mpmath-free extended care (math.fsum, float64)."""
    m = max(logits)
    s = math.fsum(math.exp(v - m) for v in logits)
    return -(logits[label] - m - math.log(s))


def toy_arch(h=8, w=8, c=1):
    return tc.Architecture((h, w, c), num_classes=10, conv1_kernel=3, conv1_filters=2,
                           conv2_kernel=3, conv2_filters=3, dense_units=4)


def toy_model(seed, arch=None, stddev=0.5, bias=0.1):
    arch = arch or toy_arch()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = bias + 0.1 * rng.standard_normal(shape)
        else:
            params[name] = stddev * rng.standard_normal(shape)
    return tc.Model(arch, params)


def central_difference(f, x, h=1e-3):
    """Central differences of scalar f over every component of array x (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def fd_agrees(analytic, numeric, rtol=1e-3, atol=1e-6):
    """Elementwise: relative error <= rtol, or absolute error <= atol."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - b)
    return (diff <= atol) | (diff <= rtol * np.maximum(np.abs(a), np.abs(b)))


def _losses64(model, images, labels):
    logits = tc.forward_batch(model, images).astype(np.float64)
    return np.array([ce_extended(list(row), int(y)) for row, y in zip(logits, labels)])


def input_fd(model64, image, label, h=1e-3):
    """Central differences of the loss w.r.t. every pixel, all probes in one batch."""
    x = np.asarray(image, dtype=np.float64)
    n = x.size
    probes = np.repeat(x[None], 2 * n, axis=0).reshape(2 * n, -1)
    probes[np.arange(n), np.arange(n)] += h
    probes[n + np.arange(n), np.arange(n)] -= h
    losses = _losses64(model64, probes.reshape((2 * n,) + x.shape), [label] * (2 * n))
    return ((losses[:n] - losses[n:]) / (2 * h)).reshape(x.shape)


def param_fd(model64, image, label, name, h=1e-3):
    """Central differences of the loss w.r.t. every entry of one parameter tensor."""
    base = np.array(model64.params[name], dtype=np.float64)
    x = np.asarray(image, dtype=np.float64)[None]
    out = np.zeros_like(base)
    flat, g = base.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        vals = []
        for d in (h, -h):
            w = flat.copy()
            w[i] += d
            vals.append(_losses64(model64.replace(**{name: w.reshape(base.shape)}), x, [label])[0])
        g[i] = (vals[0] - vals[1]) / (2 * h)
    return out


def straddles_kink(params, image, h, where):
    """True when moving coordinate ``where`` by +/-h changes the ReLU/pool pattern.

    ``where`` is ("input", flat_index) or (param_name, flat_index). The central
    difference is not a derivative oracle across such a kink.
    """
    kind, i = where
    pats = []
    for d in (0.0, h, -h):
        p = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        x = np.array(image, dtype=np.float64)
        target = x if kind == "input" else p[kind]
        target.reshape(-1)[i] += d
        pats.append(loop_forward(p, x, pattern=True)[1])
    return not (pats[0] == pats[1] == pats[2])


def check_gradients(model, image, label, h=1e-3):
    """Compare analytic input and parameter gradients with central differences.

    Returns (checked, failures, kinks): the number of compared components, the
    mismatches on smooth probes, and the mismatches excused because the probe
    crossed a kink.
    """
    m64 = model.astype(np.float64)
    checks = [("input", tc.input_gradient(m64, image, label), input_fd(m64, image, label, h))]
    grads = tc.param_gradients(m64, image, label)
    for name in tc.PARAM_NAMES:
        checks.append((name, grads[name], param_fd(m64, image, label, name, h)))
    checked, failures, kinks = 0, [], []
    for name, analytic, numeric in checks:
        ok = fd_agrees(analytic, numeric).reshape(-1)
        checked += ok.size
        for i in np.flatnonzero(~ok):
            i = int(i)
            a, num = float(analytic.reshape(-1)[i]), float(numeric.reshape(-1)[i])
            if not straddles_kink(m64.params, image, h, (name, i)):
                failures.append((name, i, a, num))
                continue
            # retry with a step small enough to stay on one side of the kink
            small = h * 1e-3
            if straddles_kink(m64.params, image, small, (name, i)):
                kinks.append((name, i, a, num))
            else:
                num = _single_fd(m64, image, label, name, i, small)
                if not fd_agrees(a, num):
                    failures.append((name, i, a, num))
    return checked, failures, kinks


def _single_fd(model64, image, label, name, i, h):
    vals = []
    for d in (h, -h):
        x = np.array(image, dtype=np.float64)
        m = model64
        if name == "input":
            x.reshape(-1)[i] += d
        else:
            w = np.array(model64.params[name], dtype=np.float64)
            w.reshape(-1)[i] += d
            m = model64.replace(**{name: w})
        vals.append(_losses64(m, x[None], [label])[0])
    return (vals[0] - vals[1]) / (2 * h)


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def linear_toy(seed):
    rng = np.random.default_rng(seed)
    model = tc.LinearModel(rng.normal(0, 2, (2, 3)), rng.normal(0, 1, 3), (1, 2, 1))
    x = rng.uniform(0, 1, (1, 2, 1))
    return model, x, int(rng.integers(3))


def grid_optimum(model, x, label, eps, resolution=0.01):
    """Largest loss over a grid covering the budget box intersected with [0, 1]."""
    axes = []
    for v in x.ravel():
        lo, hi = max(0.0, v - eps), min(1.0, v + eps)
        axes.append(np.append(np.arange(lo, hi, resolution), hi))  # both box edges included
    a, b = np.meshgrid(*axes)
    points = np.stack([a.ravel(), b.ravel()], axis=1).reshape(-1, 1, 2, 1)
    return float(tc.batch_losses(model, points, [label] * len(points)).max())
