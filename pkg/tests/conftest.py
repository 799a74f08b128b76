import pytest

from attnlab.data_model import DataModelParams, generate_dataset
from attnlab.model import Dims, InitConfig, init_model
from attnlab.numerics import Rng

ACCEPTANCE_LINES = []


def tiny_instance(seed, d=8, M=3, d_h=4, d_v=4, N=4, mu_norm=1.0, sigma_p=0.5, cp=1.5, sigma=0.5):
    r = Rng(seed).split("tiny")
    p = DataModelParams(d=d, M=M, mu_norm=mu_norm, sigma_p=sigma_p, cp=cp)
    data = generate_dataset(N, p, r.split("data"))
    params = init_model(InitConfig(sigma, sigma, seed=r.split("init").seed), Dims(d, d_h, d_v, M))
    return params, data


@pytest.fixture
def tiny():
    return tiny_instance(0)


@pytest.fixture
def record_acceptance():
    def rec(line):
        ACCEPTANCE_LINES.append(line)
        print(line)
    return rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
