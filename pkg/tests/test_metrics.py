import pytest

from lps.metrics import MetricsParseError, MetricsWriter, make_record, read_metrics


def test_roundtrip(tmp_path):
    recs = [make_record(s, loss_mf=0.5 * s, eval_return_mean=-float(s)) for s in (1, 2, 5)]
    with MetricsWriter(tmp_path / "m.jsonl", dict(config={"a": 1})) as w:
        for r in recs:
            w.emit(r)
    header, back = read_metrics(tmp_path / "m.jsonl")
    assert header == {"config": {"a": 1}}
    assert back == recs


def test_non_finite_becomes_null(tmp_path):
    with MetricsWriter(tmp_path / "m.jsonl") as w:
        w.emit(make_record(1, loss_mf=float("nan")))
    assert read_metrics(tmp_path / "m.jsonl")[1][0]["loss_mf"] is None


def test_out_of_order(tmp_path):
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.emit(make_record(2))
    with pytest.raises(ValueError):
        w.emit(make_record(2))
    w.close()
    p = tmp_path / "bad.jsonl"
    p.write_text('{"step":3}\n{"step":1}\n')
    with pytest.raises(MetricsParseError) as info:
        read_metrics(p)
    assert info.value.lineno == 2


def test_malformed_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"type":"header"}\n{"step":1}\n{"step": 2,\n')
    with pytest.raises(MetricsParseError) as info:
        read_metrics(p)
    assert info.value.lineno == 3 and ":3:" in str(info.value)


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert read_metrics(p) == (None, [])


def test_unknown_field():
    with pytest.raises(ValueError):
        make_record(1, accuracy=1.0)
