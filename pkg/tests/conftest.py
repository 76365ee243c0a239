import numpy as np
import pytest

from skatdnn.tensor import Tensor

SEEDS = list(range(20))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def conv2d_oracle(x, w, bias=None, stride=(1, 1), dilation=(1, 1)):
    """Nested-loop 'same' cross-correlation, reading zeros outside the map."""
    b, cin, h, wd = x.shape
    cout, _, kf, kt = w.shape
    sf, st = stride
    df, dt = dilation
    pf, pt = df * (kf - 1) // 2, dt * (kt - 1) // 2
    fo = (h + 2 * pf - df * (kf - 1) - 1) // sf + 1
    to = (wd + 2 * pt - dt * (kt - 1) - 1) // st + 1
    out = np.zeros((b, cout, fo, to))
    for n in range(b):
        for o in range(cout):
            for i in range(fo):
                for j in range(to):
                    acc = 0.0 if bias is None else bias[o]
                    for c in range(cin):
                        for u in range(kf):
                            for v in range(kt):
                                r = i * sf + u * df - pf
                                q = j * st + v * dt - pt
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += w[o, c, u, v] * x[n, c, r, q]
                    out[n, o, i, j] = acc
    return out
