"""Finite-difference cases for every differentiable op (five shapes each)."""
from __future__ import annotations

import torch

from . import numcore as nc
from .prompt import fuse_addition, fuse_concatenation, fuse_gated


def _bn(x, w, b):
    rm = torch.zeros(x.shape[1], dtype=x.dtype)
    rv = torch.ones(x.shape[1], dtype=x.dtype)
    return nc.batchnorm2d(x, rm, rv, w, b, training=True)


def _mha(heads):
    # the key bias shifts every score in a row equally, so its true gradient is
    # exactly zero and a relative-error check only sees FD noise; hold it at zero
    def fn(x, wq, b_qv, wo, bo):
        d = x.shape[-1]
        bq = torch.cat([b_qv[:d], torch.zeros(d, dtype=b_qv.dtype), b_qv[d:]])
        return nc.multi_head_attention(x, wq, bq, wo, bo, heads)
    return fn


def _ce(labels):
    return lambda z: nc.cross_entropy(z, labels)


def _bilinear(h, w):
    return lambda x: nc.bilinear_resize(x, h, w)


def cases():
    """Yields ``(op_name, fn, input_shapes)``."""
    for n, cin, cout, hw, k, s, p in [(1, 2, 3, 5, 3, 1, 1), (2, 1, 2, 4, 3, 1, 0), (1, 3, 2, 6, 3, 2, 1),
                                      (1, 2, 2, 5, 1, 1, 0), (2, 2, 1, 4, 2, 2, 0)]:
        yield "conv2d", (lambda x, w, b, s=s, p=p: nc.conv2d(x, w, b, s, p)), [(n, cin, hw, hw), (cout, cin, k, k), (cout,)]
    for c, h, w, oh, ow in [(1, 3, 3, 7, 7), (2, 1, 1, 4, 4), (1, 4, 4, 8, 8), (3, 2, 3, 5, 4), (1, 5, 5, 3, 3)]:
        yield "bilinear_resize", _bilinear(oh, ow), [(c, h, w)]
    for shape in [(4, 2, 3, 3), (3, 3, 2, 2), (5, 1, 2, 2), (2, 2, 4, 4), (6, 2, 1, 2)]:
        yield "batchnorm2d", _bn, [shape, (shape[1],), (shape[1],)]
    for shape in [(10,), (3, 4), (2, 3, 5), (1, 2, 3, 3), (7, 7)]:
        yield "relu", nc.relu, [shape]
    for shape in [(1, 1, 4, 4), (2, 2, 4, 4), (1, 3, 6, 6), (1, 1, 5, 5), (2, 1, 2, 8)]:
        yield "maxpool2d", nc.maxpool2d, [shape]
    for shape in [(1, 1, 3, 3), (2, 3, 2, 2), (1, 2, 5, 4), (3, 1, 1, 1), (2, 2, 3, 3)]:
        yield "adaptive_avg_pool", nc.adaptive_avg_pool, [shape]
    for n, i, o in [(2, 3, 4), (1, 5, 2), (4, 2, 2), (3, 6, 1), (2, 4, 5)]:
        yield "linear", nc.linear, [(n, i), (o, i), (o,)]
    for shape in [(2, 4), (3, 5), (1, 2, 6), (2, 3, 3), (4, 8)]:
        yield "layer_norm", nc.layer_norm, [shape, (shape[-1],), (shape[-1],)]
    for shape in [(10,), (3, 4), (2, 2, 5), (6, 6), (1, 20)]:
        yield "gelu", nc.gelu, [shape]
    for shape in [(5,), (3, 4), (2, 3, 4), (1, 10), (4, 2)]:
        yield "softmax", nc.softmax, [shape]
    for n, t, d, h in [(1, 3, 4, 2), (2, 2, 6, 3), (1, 4, 4, 1), (1, 1, 6, 2), (2, 3, 2, 2)]:
        yield "multi_head_attention", _mha(h), [(n, t, d), (3 * d, d), (2 * d,), (d, d), (d,)]
    for n, k in [(4, 10), (2, 3), (1, 5), (6, 4), (3, 2)]:
        labels = torch.arange(n) % k
        yield "cross_entropy", _ce(labels), [(n, k)]
    for c, hw, sizes in [(1, 4, (1, 2, 3)), (3, 5, (1, 2)), (2, 6, (1,)), (1, 3, (1, 3)), (2, 4, (2, 4))]:
        shapes = [(1, c, hw, hw)] + [(c, s, s) for s in sizes]
        yield "fuse_addition", (lambda x, *ps: fuse_addition(x, list(ps))), shapes
        yield "fuse_gated", (lambda x, g, *ps: fuse_gated(x, list(ps), g)), [shapes[0], (c,)] + shapes[1:]
        k = len(sizes)
        yield ("fuse_concatenation", (lambda x, w, b, *ps: fuse_concatenation(x, list(ps), w, b)),
               [shapes[0], (c, (1 + k) * c), (c,)] + shapes[1:])


def run_all(tolerance: float = 1e-4, eps: float = 1e-5):
    """Returns ``[(op_name, shapes, GradCheckReport)]``."""
    results = []
    for i, (name, fn, shapes) in enumerate(cases()):
        rep = nc.grad_check(fn, shapes, tolerance=tolerance, eps=eps, seed=1000 + i)
        results.append((name, shapes, rep))
    return results
