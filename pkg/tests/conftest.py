import numpy as np
import pytest

from r0surrogate import forecast, impact
from r0surrogate.timeseries import CalendarDay


@pytest.fixture(scope="session")
def synth_cfg():
    return forecast.SynthConfig()


@pytest.fixture(scope="session")
def period_2021(synth_cfg):
    ens = forecast.synthesize_ensemble(synth_cfg, CalendarDay(2021, 1, 1))
    return forecast.PeriodData(ens, impact.propagate(ens))


@pytest.fixture(scope="session")
def all_periods(synth_cfg):
    out = []
    for s in forecast.dataset2_starts():
        ens = forecast.synthesize_ensemble(synth_cfg, s)
        out.append(forecast.PeriodData(ens, impact.propagate(ens)))
    return out


@pytest.fixture(scope="session")
def split1(period_2021):
    return forecast.build_dataset1(period_2021.ensemble, period_2021.impacts)


@pytest.fixture(scope="session")
def split2(all_periods):
    return forecast.build_dataset2(all_periods)


def small_period(start=CalendarDay(2021, 1, 1), n_members=4, seed=3):
    cfg = forecast.SynthConfig(seed=seed, n_members=n_members)
    ens = forecast.synthesize_ensemble(cfg, start)
    return forecast.PeriodData(ens, impact.propagate(ens))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance_log():
    def log(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
