import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedlora.model import AdaptationMode, ModelConfig, build_model
from fedlora.partition import synth_dataset

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return ModelConfig(d_feat=6, dim=5, image_blocks=2, text_blocks=2, num_classes=3, tau=0.01)


@pytest.fixture
def tiny_data():
    return synth_dataset(3, 6, 20, 5.0, seed=3)


def tiny_model(kind="flora", seed=0, config=None, **mode_kw):
    config = config or ModelConfig(d_feat=6, dim=5, image_blocks=2, text_blocks=2, num_classes=3, tau=0.01)
    return build_model(config, AdaptationMode(kind, **mode_kw), seed)


def perturb_lora(model, seed=0, std=0.1):
    """Give B matrices nonzero values so adapter gradients are not trivially zero."""
    rng = np.random.default_rng(seed)
    for name in model.lora_names():
        if name.endswith(".B"):
            model.params[name] = rng.normal(0.0, std, model.params[name].shape)
    return model


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
