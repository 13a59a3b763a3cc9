"""Independent brute-force oracles shared across the test modules."""
import math
import subprocess
import sys
import time

import numpy as np
import pytest


def conv_oracle(x, k, b=None, stride=1, pad=0, groups=1):
    """Nested-loop cross-correlation, written without any vectorization."""
    n, c, h, w = x.shape
    o, cg, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[bi, g * cg + ci, i * stride + di, j * stride + dj] * k[oc, ci, di, dj]
                    out[bi, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def pool_oracle(x, window, stride, reduce):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for bi in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    vals = [x[bi, ci, i * stride + a, j * stride + b]
                            for a in range(window) for b in range(window)]
                    out[bi, ci, i, j] = max(vals) if reduce == "max" else sum(vals) / len(vals)
    return out


def matmul_oracle(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def erf_series(x, terms=60):
    """Maclaurin series of erf, accurate for moderate |x|."""
    s = 0.0
    for n in range(terms):
        s += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * s


def rank_auc_oracle(scores, positive):
    """P(s+ > s-) + 0.5 P(s+ == s-) by enumerating every pair."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def counting_metrics(counts):
    """Per-class (tp, fp, fn, tn, sen, pre) written with plain loops."""
    k = len(counts)
    total = sum(sum(r) for r in counts)
    rows = []
    for c in range(k):
        tp = counts[c][c]
        fn = sum(counts[c][j] for j in range(k) if j != c)
        fp = sum(counts[i][c] for i in range(k) if i != c)
        tn = total - tp - fn - fp
        sen = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        pre = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        rows.append((tp, fp, fn, tn, sen, pre))
    acc = 100.0 * sum(counts[c][c] for c in range(k)) / total
    return rows, acc


def sym3_eigvals(a):
    """Eigenvalues of a symmetric 3x3 matrix from its characteristic cubic
    (trigonometric solution), largest first."""
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6.0)
    bm = (a - q * np.eye(3)) / p
    r = min(max(np.linalg.det(bm) / 2.0, -1.0), 1.0)
    phi = math.acos(r) / 3.0
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    return np.array([e1, 3 * q - e1 - e3, e3])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- shared CLI runs

DESK_TRAIN_ARGS = ["train", "--preset", "desk", "--synthetic", "100", "--epochs", "20",
                   "--seed", "7"]


def run_cli(args, timeout=1800):
    """Run the command-line tool in a fresh interpreter; returns (proc, seconds)."""
    started = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "fmehscmt.cli", *map(str, args)],
                          capture_output=True, text=True, timeout=timeout)
    return proc, time.perf_counter() - started


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The desk-scale training run, executed twice with identical flags."""
    runs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"desk_{tag}")
        proc, seconds = run_cli(DESK_TRAIN_ARGS + ["--out", out, "--force"])
        runs.append({"out": out, "proc": proc, "seconds": seconds})
    return runs


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
