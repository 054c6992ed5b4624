import math

import numpy as np
import pytest

from kvlink import ModelConfig, init_random


@pytest.fixture(scope="session")
def desk():
    """Default desk-scale model, seed 42."""
    return init_random(ModelConfig(), 42)


@pytest.fixture(scope="session")
def small():
    """Two-layer model for cheap end-to-end checks."""
    return init_random(ModelConfig(n_layers=2, n_heads=2, n_kv_heads=1, head_dim=8, ffn_dim=32, max_pos=512), 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ordinary_tokens(rng, w, n):
    return rng.integers(0, w.special.first_reserved, n).tolist()


# ---------------------------------------------------------------- reference model
# Straight-line float64 transformer written from the math, loops over rows and
# heads, no shared code with the package. Used as an independent oracle.


def _rms(x, g, eps):
    return x / math.sqrt(float(np.mean(x * x)) + eps) * g


def _rot(vec, pos, theta):
    out = vec.copy()
    hd = vec.shape[0]
    for i in range(hd // 2):
        ang = pos * theta ** (-2.0 * i / hd)
        c, s = math.cos(ang), math.sin(ang)
        a, b = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = a * c - b * s
        out[2 * i + 1] = a * s + b * c
    return out


def reference_forward(w, tokens, positions, allow):
    cfg = w.config
    t = {k: np.asarray(v, dtype=np.float64) for k, v in w.tensors.items()}
    hd, nh, nkv = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads
    n = len(tokens)
    x = np.stack([t["tok_embed"][tok] for tok in tokens])
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        xn = np.stack([_rms(r, t[p + "attn_norm"], cfg.norm_eps) for r in x])
        q = xn @ t[p + "wq"]
        k = xn @ t[p + "wk"]
        v = xn @ t[p + "wv"]
        attn = np.zeros((n, nh * hd))
        for head in range(nh):
            g = head // (nh // nkv)
            qs = [_rot(q[i, head * hd:(head + 1) * hd], positions[i], cfg.theta_base) for i in range(n)]
            ks = [_rot(k[j, g * hd:(g + 1) * hd], positions[j], cfg.theta_base) for j in range(n)]
            for i in range(n):
                cols = [j for j in range(n) if allow[i][j]]
                s = np.array([qs[i] @ ks[j] / math.sqrt(hd) for j in cols])
                e = np.exp(s - s.max())
                pr = e / e.sum()
                attn[i, head * hd:(head + 1) * hd] = sum(pj * v[j, g * hd:(g + 1) * hd] for pj, j in zip(pr, cols))
        h = x + attn @ t[p + "wo"]
        hn = np.stack([_rms(r, t[p + "ffn_norm"], cfg.norm_eps) for r in h])
        gate = hn @ t[p + "w_gate"]
        x = h + ((gate / (1 + np.exp(-gate))) * (hn @ t[p + "w_up"])) @ t[p + "w_down"]
    xn = np.stack([_rms(r, t["final_norm"], cfg.norm_eps) for r in x])
    return xn @ t["lm_head"]


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
