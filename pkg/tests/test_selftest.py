import pytest

from hiernas.common import InvalidArgumentError
from hiernas.selftest import (
    SUITES,
    THREADS_ENV,
    run_selftest,
    suite_collapse,
    suite_counting,
    suite_viterbi,
    worker_count,
)


def test_counting_suite_passes():
    result = suite_counting()
    assert result.passed, result.detail


def test_viterbi_suite_passes():
    result = suite_viterbi(draws=20)
    assert result.passed, result.detail


def test_collapse_suite_passes():
    result = suite_collapse(samples=1)
    assert result.passed, result.detail


@pytest.mark.slow
def test_full_selftest_passes():
    results = run_selftest()
    assert [r.name for r in results] == list(SUITES)
    assert all(r.passed for r in results), [(r.name, r.detail) for r in results]


def test_worker_count_honours_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    assert worker_count(4) == 1
    monkeypatch.setenv(THREADS_ENV, "8")
    assert worker_count(2) == 2
    monkeypatch.setenv(THREADS_ENV, "zero")
    with pytest.raises(InvalidArgumentError):
        worker_count()
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(InvalidArgumentError):
        worker_count()


def test_unknown_suite_is_rejected():
    with pytest.raises(InvalidArgumentError):
        run_selftest(["nope"])


def test_crashing_suite_is_reported(monkeypatch):
    def boom():
        raise RuntimeError("exploded")

    monkeypatch.setitem(SUITES, "counting", boom)
    (result,) = run_selftest(["counting"])
    assert not result.passed
    assert "RuntimeError: exploded" in result.detail
