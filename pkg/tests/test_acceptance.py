"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.  A failing
criterion is reported as a failure; nothing here is marked xfail."""
import pytest

from tricrit_rg import acceptance


@pytest.mark.parametrize("cid", sorted(acceptance.CHECKS))
def test_criterion(cid, cache_dir, capsys):
    r = acceptance.run([cid], cache_dir=cache_dir)[0]
    with capsys.disabled():
        print("\n" + r.line())
    assert r.passed, r.details
