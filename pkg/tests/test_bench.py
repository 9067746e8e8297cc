import pytest

from dwpt_auth.bench import PRIMITIVES, bench_primitives


def test_report_shape():
    report = bench_primitives(5, seed=1)
    assert [r.primitive for r in report.rows] == list(PRIMITIVES)
    for r in report.rows:
        assert 0 <= r.min_ms <= r.avg_ms <= r.max_ms
    assert report.to_csv().splitlines()[0] == "primitive,avg_ms,min_ms,max_ms"
    assert len(report.to_markdown().splitlines()) == 6
    assert report.row("T_pair") is report.rows[2]
    with pytest.raises(KeyError):
        report.row("T_sqrt")


def test_rejects_zero_iterations():
    with pytest.raises(ValueError):
        bench_primitives(0)
