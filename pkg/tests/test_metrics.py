from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenwalk.metrics import (TRACE_COLUMNS, Trace, TraceRecord, comparison_table, emit_csv,
                               emit_plot_data, fit_log_slope, predict, read_csv, stop_error,
                               trace_to_csv_text)

errs = st.floats(0, 1e300, allow_nan=False)


@st.composite
def traces(draw):
    n = draw(st.integers(0, 12))
    tr = Trace("x")
    t = comm = 0
    grads = 0.0
    for _ in range(n):
        t += draw(st.integers(0, 1000))
        comm += draw(st.integers(0, 1000))
        grads += draw(st.floats(0, 1e6))
        et = draw(st.one_of(errs, st.just(float("nan"))))
        tr.append(TraceRecord(t, draw(errs), et, comm, draw(st.floats(0, 1e9)), grads,
                              draw(st.floats(0, 1e12))))
    return tr


def _same(a: TraceRecord, b: TraceRecord) -> bool:
    return all((x == y) or (x != x and y != y) for x, y in zip(a.__dict__.values(), b.__dict__.values()))


@given(traces())
def test_csv_round_trip(tmp_path_factory, trace):
    path = emit_csv(trace, tmp_path_factory.mktemp("csv") / "t.csv")
    back = read_csv(path)
    assert len(back.records) == len(trace.records)
    assert all(_same(a, b) for a, b in zip(trace.records, back.records))
    assert all(isinstance(r.t, int) and isinstance(r.comm_total, int) for r in back.records)


def test_csv_header_exact(tmp_path):
    tr = Trace("a", [TraceRecord(0, 1.0, float("nan"), 0, 0.0, 0.0, 0.0)])
    text = trace_to_csv_text(tr)
    assert text.splitlines()[0] == "t,err_node,err_token,comm_total,comm_per_token,grads_per_node,time"
    assert TRACE_COLUMNS == tuple(text.splitlines()[0].split(","))
    bad = tmp_path / "bad.csv"
    bad.write_text("t,err\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(bad)


def test_record_and_trace_invariants():
    with pytest.raises(ValueError):
        TraceRecord(0, -1.0, 0.0, 0, 0.0, 0.0, 0.0)
    tr = Trace("a")
    tr.append(TraceRecord(5, 1.0, 1.0, 10, 5.0, 3.0, 1.0))
    with pytest.raises(ValueError):
        tr.append(TraceRecord(6, 1.0, 1.0, 9, 5.0, 3.0, 1.0))
    with pytest.raises(ValueError):
        tr.append(TraceRecord(4, 1.0, 1.0, 10, 5.0, 3.0, 1.0))


def test_stop_error_and_first_reaching():
    assert stop_error(1.0, 2.0) == 2.0
    assert stop_error(1.0, 2.0, "node") == 1.0
    assert stop_error(1.0, 2.0, "token") == 2.0
    assert stop_error(1.0, float("nan"), "token") == 1.0
    tr = Trace("a", [TraceRecord(t, 10.0 ** -t, 10.0 ** (1 - t), 0, 0.0, 0.0, 0.0) for t in range(6)])
    assert tr.first_reaching(1e-3).t == 4
    assert tr.first_reaching(1e-3, "node").t == 3
    assert tr.first_reaching(1e-30) is None


def test_plot_emission(tmp_path):
    tr = Trace("tgd K=2", [TraceRecord(0, 1.0, 2.0, 0, 0.0, 0.0, 0.0),
                           TraceRecord(4, 0.5, 0.25, 3, 1.5, 2.0, 1003.0)])
    paths = emit_plot_data({"tgd K=2": tr}, "time", tmp_path)
    assert [p.name for p in paths] == ["tgd_K_2_time.csv"]
    assert paths[0].read_text().splitlines() == ["time,err_node,err_token", "0.0,1.0,2.0",
                                                 "1003.0,0.5,0.25"]
    comm = emit_plot_data({"a": tr}, "comm", tmp_path)[0].read_text().splitlines()
    assert comm[2].startswith("3,")
    with pytest.raises(ValueError):
        emit_plot_data({"a": tr}, "memory", tmp_path)
    assert not list(tmp_path.glob(".*tmp"))


def test_predictions():
    assert predict("tgd", 10, 20, 2, 100.0, 50.0).comm_per_token == 500.0
    assert predict("tgd", 10, 20, 2, 100.0, 50.0).grads_per_node == 2000.0
    p = predict("TVR", 10, 20, 2, 100.0, 50.0)
    assert (p.comm_per_token, p.grads_per_node) == (250.0, 70.0)
    a = predict("tavr", 4, 9, 1, 0.0, 16.0)
    assert (a.comm_per_token, a.grads_per_node) == (16.0, 21.0)
    with pytest.raises(ValueError):
        predict("extra", 1, 1, 1, 1.0, 1.0)


def test_comparison_table_columns():
    text = comparison_table([{"algo": "tgd", "ratio": 1 / 3}, {"algo": "tvr", "K": 2}])
    assert text.splitlines() == ["algo,ratio,K", "tgd,0.333333,", "tvr,,2"]
    assert comparison_table([]) == ""


def test_fit_log_slope():
    t = np.arange(50.0)
    assert fit_log_slope(t, 3.0 * np.exp(-0.2 * t)) == pytest.approx(-0.2, rel=1e-10)
    assert math.isnan(fit_log_slope([0.0, 1.0], [1.0, 0.0]))
