"""Desk-scale behaviour of the baseline attacks (slow: full training runs)."""

import pytest

from scenarios import first_reaching, load, max_er, run

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("name", ["random-0.1pct", "explicit-boost-0.1pct"])
def test_weak_attacks_fail_at_one_malicious_client_in_a_thousand(name):
    cfg = load(name)
    assert cfg.attack.fraction == 0.001 and cfg.train.epochs == 20
    reports, _, _ = run(name)
    assert max_er(reports) < 0.05


def test_gaussian_proxy_rises_slower_than_psmu():
    psmu, _, _ = run("psmu-1pct")
    proxy, _, _ = run("gaussian-proxy-1pct")
    a, b = first_reaching(psmu, 0.9), first_reaching(proxy, 0.9)
    assert a is not None
    assert b is None or b > a
    # never ahead of PSMU on the way up; both oscillate once saturated
    rise = proxy[: (b if b is not None else len(proxy) - 1) + 1]
    assert all(p.er_mean <= q.er_mean for p, q in zip(rise, psmu))
