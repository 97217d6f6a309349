import dataclasses

import pytest
import torch

from shrink.calibration import build_calibration_set
from shrink.data import make_synthetic_corpus
from shrink.model import ModelConfig, init_model

TINY = ModelConfig(d_model=16, n_layers=5, n_heads=2, d_ff=32, max_seq_len=48)

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def zero_block(model, pos):
    """Copy of ``model`` whose block at ``pos`` has all-zero o and down projections."""
    blk = model.blocks[pos]
    return model.with_tensors(
        {f"blocks.{pos}.o": torch.zeros_like(blk.o), f"blocks.{pos}.down": torch.zeros_like(blk.down)}
    )


def scaled(model, factor):
    """Scale every linear weight so that random blocks visibly change the output."""
    return model.with_tensors({n: w * factor for n, w in model.linear_layers()})


@pytest.fixture(scope="session")
def corpus():
    return make_synthetic_corpus(0, n_train=400, n_heldout=40, n_calibration=40, n_prompts=8)


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(TINY, seed=0)


@pytest.fixture(scope="session")
def lively_model():
    """Random tiny model with enlarged weights; removing any block changes its generations."""
    return scaled(init_model(TINY, seed=1), 8.0)


@pytest.fixture(scope="session")
def tiny_cal(corpus):
    return build_calibration_set(corpus.calibration, n=4, max_len=24, seed=0)


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def replace_config(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


GRAD_CONFIG = ModelConfig(vocab_size=16, d_model=8, n_layers=3, n_heads=2, d_ff=16, max_seq_len=8)


def finite_difference_check(step=1e-4, seed=0):
    """Largest elementwise relative error between autograd and central differences.

    Runs in float64 on a model of under 10k parameters, with every adapter
    ``B`` set to random nonzero values so that gradients reach ``A`` too.
    Returns ``(max_rel_error, n_checked, n_params)``.
    """
    from shrink.finetune import AdapterConfig, attach_adapters, next_token_loss

    g = torch.Generator().manual_seed(seed)
    base = init_model(GRAD_CONFIG, seed).to_dtype(torch.float64)
    base = base.with_tensors({n: w * 10 for n, w in base.linear_layers()})
    adapted = attach_adapters(base, dataclasses.replace(_adapter_cfg(), seed=seed))
    with torch.no_grad():
        for ad in adapted.adapters.values():
            ad.B.copy_(torch.randn(ad.B.shape, generator=g, dtype=torch.float64) * 0.5)
    batch = torch.randint(0, GRAD_CONFIG.vocab_size, (3, GRAD_CONFIG.max_seq_len), generator=g)
    params = adapted.parameters()
    loss = next_token_loss(base, batch, adapted.adapters)
    loss.backward()
    worst, count = 0.0, 0
    with torch.no_grad():
        for p in params:
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                up = float(next_token_loss(base, batch, adapted.adapters))
                flat[i] = orig - step
                down = float(next_token_loss(base, batch, adapted.adapters))
                flat[i] = orig
                fd, an = (up - down) / (2 * step), float(grad[i])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-12))
                count += 1
    n_params = base.n_params() + sum(p.numel() for p in params)
    return worst, count, n_params


def _adapter_cfg():
    from shrink.finetune import AdapterConfig

    return AdapterConfig(rank=2, alpha=4.0)
