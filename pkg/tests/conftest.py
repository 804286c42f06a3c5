import dataclasses

import pytest

from stmf.classical import default_config, gen_dataset


def tiny_config(kind: str, res: int, **params):
    cfg = default_config(kind, res)
    return dataclasses.replace(cfg, params={**cfg.params, **params})


@pytest.fixture(scope="session")
def tiny_burgers():
    return gen_dataset(tiny_config("burgers", 32, n_save=17, solver_res=128), 10, seed=1)


@pytest.fixture(scope="session")
def tiny_darcy():
    return gen_dataset(default_config("darcy", 16), 10, seed=2)


TINY = dict(width=4, depth=1, modes=2, proj_width=4, fourier_features=0, global_pool=False, time_embed=0)


CRITERIA: list[str] = []


def record(number: int, name: str, ok: bool, detail: str) -> bool:
    CRITERIA.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
