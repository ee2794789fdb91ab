import json

import pytest

from dynskip.planted import PlantedSpec, gen_dataset, gen_pretrained

TINY = dict(n=4, margin=2.0, redundant=[1], d=16, d_ff=64, h_adapt=2, h_skip=4, classes=3, input_dim=6,
            train_size=256, val_size=128, test_size=128, seed=3)


@pytest.fixture(scope="session")
def tiny_spec():
    return PlantedSpec(**TINY)


@pytest.fixture(scope="session")
def tiny_bench(tiny_spec):
    splits = gen_dataset(tiny_spec)
    return gen_pretrained(tiny_spec, splits), splits


@pytest.fixture
def tiny_spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY))
    return path


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
