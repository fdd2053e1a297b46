import numpy as np
import pytest

from attnatlas.encoder import ModelConfig, TokenSequence, init_params, loss_and_grads
from attnatlas.tasks import SyntheticGrammar


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=16, max_len=12)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=3)


@pytest.fixture
def pair_seq():
    return TokenSequence((0, 5, 9, 12, 1, 7, 8, 1), (0, 0, 0, 0, 0, 1, 1, 1))


@pytest.fixture
def grammar():
    return SyntheticGrammar(seed=0)


def rel_err(a, n, floor=1e-6):
    """Relative error with a denominator floor, so exactly-zero gradients compare on absolute scale."""
    a, n = np.asarray(a), np.asarray(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(config, params, seq, kind, target, name, h=1e-5):
    """Central differences of the loss with respect to every entry of ``params[name]``."""
    out = np.zeros_like(params[name])
    flat = params[name].reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_and_grads(config, params, seq, kind, target)[0]
        flat[i] = old - h
        down = loss_and_grads(config, params, seq, kind, target)[0]
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
