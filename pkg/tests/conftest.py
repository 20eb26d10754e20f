import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowdistill.numerics import NetConfig, VelocityNet, stream

settings.register_profile(
    "repo", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def random_net(seed=0, in_dim=6, cond_dim=2, width=16, blocks=2, scale=1.0) -> VelocityNet:
    """A net with every parameter (including the output layer) randomly set."""
    net = VelocityNet.create(NetConfig(in_dim, cond_dim, width, blocks), stream(seed, "test-net"), zero_output=False)
    rng = stream(seed, "test-bias")
    for k, v in net.params.items():
        if k.endswith("b") or k.endswith("b1") or k.endswith("b2"):
            v[...] = 0.1 * rng.standard_normal(v.shape)
        v *= scale
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def net():
    return random_net()


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def fd_param_grad(loss_fn, params, h=1e-6, max_per_param=6, rng=None):
    """Central differences of ``loss_fn()`` for a few entries of every parameter.

    Returns ``{name: (indices, numeric)}``; ``loss_fn`` must read ``params`` live.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = {}
    for name, p in params.items():
        if p.size == 0:
            continue
        idx = rng.choice(p.size, size=min(max_per_param, p.size), replace=False)
        vals = []
        for i in idx:
            old = p.flat[i]
            p.flat[i] = old + h
            lp = loss_fn()
            p.flat[i] = old - h
            lm = loss_fn()
            p.flat[i] = old
            vals.append((lp - lm) / (2 * h))
        out[name] = (idx, np.array(vals))
    return out


def assert_grads_match(analytic, numeric, tol=1e-4):
    worst = 0.0
    for name, (idx, num) in numeric.items():
        ana = analytic[name].ravel()[idx]
        scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ana - num)) / scale))
    assert worst < tol, f"worst relative gradient error {worst:.3e}"
    return worst


def tiny_config(out_dir, seed=0):
    """A config small enough to run every stage in a second or two."""
    from flowdistill import config

    cfg = config.ExperimentConfig(seed=seed, output_dir=str(out_dir), train_size=512)
    cfg.dataset.frames, cfg.dataset.dim = 3, 2
    cfg.net.width = 16
    cfg.teacher.iters = 40
    cfg.ccd.total_iters, cfg.ccd.warmup_H, cfg.ccd.batch = 12, 6, 8
    cfg.da.n_warmup, cfg.da.features, cfg.da.head_hidden = 6, 8, 8
    cfg.ta.iters, cfg.ta.dataset_size, cfg.ta.batch = 5, 32, 8
    cfg.eval.n_eval, cfg.eval.steps_list, cfg.eval.ref_steps = 64, [1, 2, 4], 32
    cfg.validate()
    return cfg


# -- acceptance verdicts -------------------------------------------------------

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; lines are echoed at the end of the run."""

    def record(code: str, ok: bool, detail: str = "") -> bool:
        line = f"{code} {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
