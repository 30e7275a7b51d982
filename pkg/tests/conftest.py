import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def scalar_optimum():
    from disentangle.linear_bvae import LinearVaeParams

    return LinearVaeParams(
        Wmu=np.array([[0.5]]), bmu=np.zeros(1), Wsigma=np.zeros((1, 1)),
        bsigma=np.array([-np.log(2.0)]), D=np.array([[1.0]]), bD=np.zeros(1),
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    results = {}
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            results.update(getattr(mod, "RESULTS", {}))
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
