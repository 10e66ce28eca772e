"""Shared test utilities: finite-difference oracles, naive reference
implementations of the sensor, small model factories, and the acceptance
summary hook."""

import numpy as np
import pytest

from dram import model as M
from dram import tensor as T
from dram.config import parse_config
from dram.sensor import round_half_up
from dram.tensor import Tape, Tensor

# ---------------------------------------------------------------------------
# finite differences

RTOL = 1e-4
ATOL = 1e-8


def fd_gradient(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every element of arr.

    f must read arr by reference (mutations visible inside f).
    """
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f()
        flat[i] = keep - eps
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray,
                       rtol: float = RTOL, atol: float = ATOL, label: str = ""):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - b) - (atol + rtol * np.maximum(np.abs(a), np.abs(b)))
    worst = float(err.max())
    assert worst <= 0.0, (
        f"gradient mismatch{' for ' + label if label else ''}: "
        f"worst margin {worst:.3e}, analytic {a.ravel()[err.argmax()]:+.6e} "
        f"vs numeric {b.ravel()[err.argmax()]:+.6e}"
    )


def check_op_gradient(build, tensors, eps: float = 1e-5, rtol: float = RTOL):
    """FD-check `build(*tensors) -> scalar Tensor` against the tape.

    Every entry of `tensors` is a leaf with requires_grad set. `build` is
    re-invoked for each probe, so it must not capture stale outputs.
    """
    with Tape() as tape:
        out = build(*tensors)
    tape.backward(out)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    T.zero_grad(tensors)
    for t, g in zip(tensors, grads):
        num = fd_gradient(lambda: build(*tensors).data.item(), t.data, eps)
        assert_grads_close(g, num, rtol=rtol)


def away_from_kinks(rng: np.random.Generator, shape, margin: float = 1e-3) -> np.ndarray:
    """Uniform values in [-1, 1] excluding a band around 0 (ReLU kink)."""
    v = rng.uniform(-1.0, 1.0, size=shape)
    v = np.where(np.abs(v) < margin, margin * np.sign(v) + (v == 0) * margin, v)
    return v


# ---------------------------------------------------------------------------
# naive sensor references (independent double-loop implementations)


def naive_extract_patch(image: np.ndarray, center_rc, size: int) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    rc = int(round_half_up(center_rc[0])), int(round_half_up(center_rc[1]))
    out = np.zeros((c, size, size), dtype=img.dtype)
    for ch in range(c):
        for i in range(size):
            for j in range(size):
                r = rc[0] - size // 2 + i
                cc = rc[1] - size // 2 + j
                if 0 <= r < h and 0 <= cc < w:
                    out[ch, i, j] = img[ch, r, cc]
    return out if np.asarray(image).ndim == 3 else out[0]


def naive_block_mean(patch: np.ndarray, out_hw) -> np.ndarray:
    img = np.asarray(patch, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    oh, ow = out_hw
    fh, fw = h // oh, w // ow
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = img[ch, i * fh:(i + 1) * fh, j * fw:(j + 1) * fw].mean()
    return out if np.asarray(patch).ndim == 3 else out[0]


# ---------------------------------------------------------------------------
# model factories


def tiny_config(task: str = "pairs", **overrides):
    """Small config for fast structural tests."""
    base = {
        "lstm_units": 16, "glimpse_dim": 16, "glimpse_hidden": 16,
        "emission_hidden": 8, "classifier_hidden": 12, "baseline_hidden": 8,
        "context_size": 16, "patch_size": 8,
    }
    base.update(overrides)
    return parse_config(task=task, overrides=tuple(f"{k}={v}" for k, v in base.items()))


def tiny_model(task: str = "pairs", seed: int = 0, **overrides):
    cfg = tiny_config(task, **overrides)
    params = M.init_params(cfg.model, cfg.sensor, np.random.default_rng(seed))
    return cfg, params


# ---------------------------------------------------------------------------
# acceptance summary


def pytest_configure(config):
    config._criterion_lines = []


@pytest.fixture
def criterion(request):
    """Record one acceptance-criterion verdict and assert it."""

    def record(num: int, name: str, ok: bool, detail: str = ""):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {name}" + (
            f"  [{detail}]" if detail else "")
        request.config._criterion_lines.append((num, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
