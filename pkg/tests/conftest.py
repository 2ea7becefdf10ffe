import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aquaseg import tensor as T

settings.register_profile(
    "aquaseg",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("aquaseg")

# filled by tests/test_acceptance.py; echoed after the test summary so the
# per-criterion verdicts are visible in a plain `pytest` run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line("  " + line)


@pytest.fixture(autouse=True)
def fresh_graph():
    T.reset_graph()
    yield
    T.reset_graph()


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference normalized by the larger gradient magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def rand_t4(rng: np.random.Generator, shape, requires_grad=False, dtype=np.float64) -> T.Tensor4:
    return T.Tensor4(rng.standard_normal(shape), requires_grad=requires_grad, dtype=dtype)


def gradcheck(build_loss, tensors: dict, eps: float = 1e-4, tol: float = 1e-4) -> None:
    """Compare backward() against central finite differences for every
    requires-grad tensor in ``tensors``. ``build_loss`` must rebuild the
    scalar loss from scratch each call (it is re-run inside the FD oracle)."""
    T.reset_graph()
    loss = build_loss()
    T.backward(loss)
    for name, t in tensors.items():
        if not t.requires_grad:
            continue
        assert t.grad is not None, f"{name}: backward left no grad"
        fd = T.finite_difference_grad(lambda _x: build_loss(), t, eps=eps)
        err = rel_error(t.grad, fd.data)
        assert err < tol, f"{name}: rel error {err} >= {tol}"
        t.grad = None
    T.reset_graph()


# ---------------------------------------------------------------------------
# naive oracles: deliberately dumb loops, independent of the library's
# vectorized implementations

def naive_conv2d(x, w, bias=None, stride=1, padding=1):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(ic):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[b, ci, i * stride + a, j * stride + bb] * w[o, ci, a, bb]
                    if bias is not None:
                        acc += bias[o]
                    out[b, o, i, j] = acc
    return out


def naive_maxpool(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    out[b, ci, i, j] = x[b, ci, i * k:(i + 1) * k, j * k:(j + 1) * k].max()
    return out


def naive_block_mean(x, f):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // f, w // f), dtype=np.float64)
    for b in range(n):
        for ci in range(c):
            for i in range(h // f):
                for j in range(w // f):
                    out[b, ci, i, j] = x[b, ci, i * f:(i + 1) * f, j * f:(j + 1) * f].mean()
    return out


def naive_upsample(x, f):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * f, w * f), dtype=x.dtype)
    for i in range(h * f):
        for j in range(w * f):
            out[:, :, i, j] = x[:, :, i // f, j // f]
    return out
