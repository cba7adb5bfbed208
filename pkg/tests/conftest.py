import numpy as np
import pytest
import torch

from catair.backbone import ModelConfig


def finite_difference_error(module, loss_fn, fraction=1.0, step=1e-5, seed=0, params=None):
    """Largest per-tensor relative error between autograd and central differences.

    The error for one parameter tensor is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)``
    over the checked entries (Euclidean norms). ``fraction`` < 1 checks a random subset
    of entries in every tensor, at least one each.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if params is not None:
        named = [(n, p) for n, p in named if n in params]
    module.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, None
    for name, p in named:
        auto = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
        n = p.numel()
        idx = np.arange(n) if fraction >= 1 else rng.choice(n, max(1, int(round(fraction * n))), replace=False)
        fd = torch.zeros(len(idx), dtype=p.dtype)
        flat = p.data.view(-1)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * step)
        a = auto[torch.as_tensor(idx)]
        scale = max(a.norm().item(), fd.norm().item())
        err = 0.0 if scale < 1e-12 else (a - fd).norm().item() / scale
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


@pytest.fixture
def tiny_config():
    return ModelConfig(channels=4, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=2, tau=1.5,
                       prompt_size=4, global_channels=2)


@pytest.fixture
def small_config():
    return ModelConfig(channels=8, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=4, tau=1.5)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
