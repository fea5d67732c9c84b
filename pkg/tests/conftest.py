import numpy as np
import pytest

from rankfsl.data import LabeledFeatureSet, SyntheticSpec, generate_synthetic


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f(x)
        flat[k] = old - h
        down = f(x)
        flat[k] = old
        g[k] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-6) -> float:
    """Max-norm error relative to the larger gradient.

    ``floor`` keeps near-zero gradients (saturated tanh) from being judged
    against central-difference round-off, which is about 1e-10 here.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def gapped_vector(rng: np.random.Generator, n: int, gap: float) -> np.ndarray:
    """Tie-free vector whose sorted neighbours are at least ``gap`` apart."""
    steps = gap + rng.exponential(0.05, size=n)
    return rng.permutation(np.cumsum(steps) - steps.sum() / 2)


def blob_dataset(n_classes: int, per_class: int, dim: int, spread: float, seed: int) -> LabeledFeatureSet:
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((n_classes, dim)) * 3
    rows, labels = [], []
    for c in range(n_classes):
        rows.append(centres[c] + spread * rng.standard_normal((per_class, dim)))
        labels += [f"c{c:02d}"] * per_class
    return LabeledFeatureSet(tuple(labels), np.concatenate(rows))


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticSpec(class_count=12, novel_class_count=8, samples_per_class=20, dim=48,
                         core_channels_per_class=3, latent_dim=6)
    return generate_synthetic(spec, 5)


@pytest.fixture(scope="session")
def benchmark():
    """The default synthetic benchmark (64 base / 20 novel classes, 640 channels)."""
    return generate_synthetic(SyntheticSpec(), 0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, from the actual test outcomes."""
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        return
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            number = int(nodeid.split("test_criterion_")[1][:2])
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            if rep.when == "call" or status != "passed":
                outcomes[number] = ("PASS" if status == "passed" else "FAIL", detail)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        verdict, detail = outcomes.get(number, ("NOT RUN", ""))
        line = f"{verdict} criterion {number:2d}: {CRITERIA[number]}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
