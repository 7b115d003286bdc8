import pytest

_criteria: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _criteria.setdefault(str(num), {"title": title, "ok": True, "notes": [], "ran": False})
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["ran"] = True
        if not rep.passed:
            entry["ok"] = False
        entry["notes"] += [f"{k}={v}" for k, v in item.user_properties if k != "criterion"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria, key=int):
        e = _criteria[num]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] else "SKIP")
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        tr.write_line(f"criterion {num}: {status}  {e['title']}{notes}")


# ---------------------------------------------------------------- shared studies
# Simulation studies are expensive on one core; compute each once per session.

DESIGN = dict(n=500, replicates=1000, lambda0_P=0.1, lambda0_R=1 / 60, beta=(-0.5, 0.1),
              theta=(0.5, 0.1), censor_max=200.0, policy_covariates=(1.0, 1.0), tau=5.0,
              label="frailty-free", reference_true=1.280)


def _workers():
    import os

    return max(1, min(8, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def design_study():
    from rmtenure.simulation import SimulationConfig, run_study

    return run_study(SimulationConfig(**DESIGN), workers=_workers())


@pytest.fixture(scope="session")
def frailty_studies():
    """Lazy cache of frailty-design studies keyed by (variance, replicates)."""
    from rmtenure.simulation import SimulationConfig, run_study

    cache = {}

    def get(v, replicates):
        key = (v, replicates)
        if key not in cache:
            cfg = SimulationConfig(**dict(DESIGN, frailty_variance=v, replicates=replicates,
                                          label=f"frailty-{v}", reference_true=None))
            cache[key] = run_study(cfg, workers=_workers())
        return cache[key]

    return get
