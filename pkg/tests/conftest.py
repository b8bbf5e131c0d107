import numpy as np
import pytest

from rotrelu import tensor as T
from rotrelu.data import data_dir, load_mnist


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grads(fn, arrays, h):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every array, in the arrays' dtype."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            hi = float(flat[i])
            up = float(fn(*arrays))
            flat[i] = old - h
            lo = float(flat[i])
            down = float(fn(*arrays))
            flat[i] = old
            # divide by the step actually taken after rounding to the array dtype
            gflat[i] = (up - down) / (hi - lo)
        grads.append(g)
    return grads


def autodiff_grads(build, arrays):
    """Gradients from ``backward`` of ``build(*leaves)`` with fresh leaves."""
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    return T.backward(loss, leaves)


def mnist_available():
    try:
        load_mnist(data_dir(), "test")
    except FileNotFoundError:
        return False
    return True


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found under RRELU_DATA_DIR")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def trained_like(model, seed=0, spread=1.5):
    """Randomize BN state and slopes so surgery is tested on a non-trivial network."""
    rng = np.random.default_rng(seed)
    for k, v in model.params.items():
        if k.endswith(".slope"):
            model.params[k] = (rng.uniform(-spread, spread, v.shape)).astype(v.dtype)
        elif ".bn" in k or k.startswith("bn"):
            base = 1.0 if k.endswith(".weight") else 0.0
            model.params[k] = (base + 0.3 * rng.standard_normal(v.shape)).astype(v.dtype)
        elif k.endswith(".bias"):
            model.params[k] = (0.1 * rng.standard_normal(v.shape)).astype(v.dtype)
    for k, v in model.buffers.items():
        if k.endswith("running_var"):
            model.buffers[k] = rng.uniform(0.5, 2.0, v.shape).astype(v.dtype)
        else:
            model.buffers[k] = (0.3 * rng.standard_normal(v.shape)).astype(v.dtype)
    return model


def random_mask(model, rng, p_full=0.3):
    """A random mask that respects the survival rule.

    Channels are masked independently; each RReLU layer feeding a residual
    join is fully masked with probability ``p_full`` (removing the branch).
    """
    from rotrelu.errors import StructuralError
    from rotrelu.pruning import PruneMask, channel_links, check_survival

    links = channel_links(model.spec)
    layers = {}
    for name, s in model.slopes().items():
        p = rng.choice([0.0, 0.3, 0.7])
        m = rng.random(s.size) < p
        if links[name].fork is not None and rng.random() < p_full:
            m[:] = True
        layers[name] = m
    mask = PruneMask(float("nan"), layers)
    while True:
        try:
            check_survival(model.spec, mask)
            return mask
        except StructuralError:
            # give back one channel of a fully masked layer and retry
            full = [n for n, m in layers.items() if m.all()]
            n = full[int(rng.integers(len(full)))]
            layers[n][int(rng.integers(layers[n].size))] = False


# acceptance verdicts, printed once at the end of the session
VERDICTS = {}


def record_verdict(number, title, ok, detail=""):
    VERDICTS[number] = (title, bool(ok), detail)
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
                                    + (f" ({detail})" if detail else ""))
