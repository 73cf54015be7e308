"""Time the compiled row kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Shapes follow the student model: attention rows are [batch*heads*seq, seq],
layer-norm rows are [batch*seq, width].
"""
import argparse
import timeit

import numpy as np

from caspl.autodiff import _pykernels

try:
    from caspl.autodiff import _ckernels
except ImportError:
    _ckernels = None

SHAPES = {"attention": (32 * 4 * 26, 26), "tokens": (32 * 26, 32), "logits": (256, 10)}


def cases(impl, rng):
    out = {}
    for tag, shape in SHAPES.items():
        x = rng.normal(size=shape)
        g = rng.normal(size=shape)
        gamma, beta = rng.normal(size=shape[1]), rng.normal(size=shape[1])
        y = impl.softmax_rows(x, 1.0)
        _, xhat, rstd = impl.layer_norm_rows(x, gamma, beta, 1e-5)
        _, t = impl.gelu(x)
        out[f"softmax {tag}"] = lambda x=x: impl.softmax_rows(x, 1.0)
        out[f"softmax_bwd {tag}"] = lambda y=y, g=g: impl.softmax_rows_backward(y, g, 1.0)
        out[f"log_softmax {tag}"] = lambda x=x: impl.log_softmax_rows(x, 1.0)
        out[f"layer_norm {tag}"] = lambda x=x, a=gamma, b=beta: impl.layer_norm_rows(x, a, b, 1e-5)
        out[f"layer_norm_bwd {tag}"] = (
            lambda g=g, xh=xhat, r=rstd, a=gamma: impl.layer_norm_rows_backward(g, xh, r, a))
        out[f"gelu {tag}"] = lambda x=x: impl.gelu(x)
        out[f"gelu_bwd {tag}"] = lambda x=x, t=t, g=g: impl.gelu_backward(x, t, g)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    impls = {"numpy": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy kernels only")
    timings = {}
    for name, impl in impls.items():
        for case, fn in cases(impl, np.random.default_rng(0)).items():
            timings.setdefault(case, {})[name] = min(timeit.repeat(fn, number=args.repeat,
                                                                   repeat=3)) / args.repeat
    print(f"{'kernel':<28}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for case, t in timings.items():
        py = t["numpy"] * 1e6
        if "cython" in t:
            cy = t["cython"] * 1e6
            print(f"{case:<28}{py:>12.1f}{cy:>12.1f}{py / cy:>9.2f}x")
        else:
            print(f"{case:<28}{py:>12.1f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
