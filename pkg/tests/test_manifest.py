import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from weathergen import manifest as mf
from weathergen.errors import DuplicateIndex, ParseError, RefusesResume, ValidationError
from weathergen.sampler import ConditionGrid, make_plan, write_plan, write_table


def entry(index=0, status=mf.SUCCEEDED, cls="car", weather="snowy", time="daytime", **kw):
    fields = dict(
        index=index, class_name=cls, weather=weather, time=time,
        base_prompt="A photo of V* driving scene, car, snowy, daytime",
        enriched_prompt="A photo of V* driving scene, car, snowy, daytime, snow",
        prompt_source="fallback_bank", seed=99, status=status,
    )
    if status == mf.SUCCEEDED:
        fields.update(image_path=f"images/{index:06d}.png", image_digest="ab" * 32)
    else:
        fields.update(error="boom")
    fields.update(kw)
    return mf.ManifestEntry(**fields)


def test_entry_invariants():
    with pytest.raises(ValidationError):
        mf.ManifestEntry(0, "car", "s", "d", "b", "e", "llm", 1, mf.SUCCEEDED)
    with pytest.raises(ValidationError):
        entry(status=mf.FAILED, image_path="x.png", image_digest="00")
    with pytest.raises(ValidationError):
        entry(status="done")
    with pytest.raises(ValidationError):
        entry(attempt_count=0)


def test_append_then_load(tmp_path):
    path = tmp_path / "m.jsonl"
    e = entry(3, attempt_count=2)
    mf.append(path, e)
    assert mf.load(path).entries == [e]


text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=40)


@given(
    st.integers(0, 10**6), text, text, st.integers(0, 2**64 - 1),
    st.sampled_from([mf.SUCCEEDED, mf.FAILED]), st.integers(1, 9),
)
def test_round_trip_property(index, base, enriched, seed, status, attempts):
    e = entry(index, status, base_prompt=base, enriched_prompt=enriched, seed=seed, attempt_count=attempts)
    line = e.to_line()
    assert line.count("\n") == 1
    assert mf.ManifestEntry.from_dict(json.loads(line)) == e


def test_truncated_tail_dropped_on_load(tmp_path, caplog):
    path = tmp_path / "m.jsonl"
    mf.append(path, entry(0))
    mf.append(path, entry(1))
    with open(path, "a") as fh:
        fh.write(entry(2).to_line()[:37])
    loaded = mf.load(path)
    assert [e.index for e in loaded.entries] == [0, 1]
    assert loaded.dropped_tail
    assert "truncated" in caplog.text


def test_truncated_tail_repaired_on_open(tmp_path):
    path = tmp_path / "m.jsonl"
    mf.append(path, entry(0))
    with open(path, "a") as fh:
        fh.write('{"index": 1, "cla')
    mf.append(path, entry(1))
    loaded = mf.load(path)
    assert [e.index for e in loaded.entries] == [0, 1]
    assert not loaded.dropped_tail


def test_duplicate_index_on_load(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(entry(4).to_line() + entry(4).to_line())
    with pytest.raises(DuplicateIndex):
        mf.load(path)


def test_duplicate_index_on_append(tmp_path):
    path = tmp_path / "m.jsonl"
    mf.append(path, entry(4))
    with pytest.raises(DuplicateIndex):
        mf.append(path, entry(4, status=mf.FAILED))
    assert len(mf.load(path).entries) == 1


def test_corrupt_middle_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(entry(0).to_line() + "{oops\n" + entry(1).to_line())
    with pytest.raises(ParseError) as info:
        mf.load(path)
    assert info.value.location.endswith(":2")


def test_header_mismatch_refuses(tmp_path):
    path = tmp_path / "m.jsonl"
    with mf.ManifestWriter(path, mf.ManifestHeader("a" * 64, "t")) as w:
        w.append(entry(0))
    with pytest.raises(RefusesResume):
        mf.ManifestWriter(path, mf.ManifestHeader("b" * 64, "t"))
    with mf.ManifestWriter(path, mf.ManifestHeader("a" * 64, "t")) as w:
        assert w.indices == {0}


def test_drop_failed(tmp_path):
    path = tmp_path / "m.jsonl"
    with mf.ManifestWriter(path, mf.ManifestHeader("p", "t")) as w:
        w.append(entry(0))
        w.append(entry(1, mf.FAILED))
        w.append(entry(2))
    assert mf.drop_entries(path) == [1]
    loaded = mf.load(path)
    assert loaded.header == mf.ManifestHeader("p", "t")
    assert [e.index for e in loaded.entries] == [0, 2]


# -- reports ------------------------------------------------------------------

def write_inputs(tmp_path, table, plan, entries):
    write_table(table, tmp_path / "table.json")
    write_plan(plan, tmp_path / "plan.tsv")
    with mf.ManifestWriter(tmp_path / "m.jsonl", mf.ManifestHeader(plan.digest, table.digest), fsync=False) as w:
        for e in entries:
            w.append(e)
    return tmp_path / "m.jsonl", tmp_path / "plan.tsv", tmp_path / "table.json"


def entries_for(plan, fail=()):
    return [
        entry(it.index, mf.FAILED if it.index in fail else mf.SUCCEEDED, it.class_name, it.weather, it.time)
        for it in plan.items
    ]


def test_report_full_run(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 6000, 3)
    rep = mf.report(*write_inputs(tmp_path, table, plan, entries_for(plan)))
    assert set(rep.cell_counts.values()) == {1000}
    assert rep.cell_balance_ok
    assert rep.plan_cell_counts == rep.cell_counts
    assert rep.succeeded == 6000 and rep.failed == 0


def test_report_statistical_bound(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 100_000, 8)
    rep = mf.report(*write_inputs(tmp_path, table, plan, entries_for(plan)))
    assert rep.max_class_deviation < 0.01


def test_report_no_data(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 12, 3)
    rep = mf.report(*write_inputs(tmp_path, table, plan, entries_for(plan, fail=range(12))))
    assert rep.no_data
    assert rep.class_freq == {}
    assert rep.max_class_deviation is None
    assert rep.failed == 12
    assert sum(rep.failed_cell_counts.values()) == 12
    assert "no data" in rep.format_table()


def test_report_counts_failures_per_cell(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 12, 3)
    rep = mf.report(*write_inputs(tmp_path, table, plan, entries_for(plan, fail={0, 6})))
    assert rep.failed_cell_counts["snowy/daytime"] == 2
    assert rep.cell_counts["snowy/daytime"] == 0
    assert not rep.cell_balance_ok
    assert rep.succeeded == 10


def test_report_digest_mismatch(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 12, 3)
    m, p, t = write_inputs(tmp_path, table, plan, entries_for(plan))
    other = make_plan(table, ConditionGrid(), 12, 4)
    write_plan(other, p)
    with pytest.raises(ValidationError):
        mf.report(m, p, t)


def test_report_is_pure(tmp_path, table):
    plan = make_plan(table, ConditionGrid(), 30, 3)
    paths = write_inputs(tmp_path, table, plan, entries_for(plan, fail={4}))
    assert mf.report(*paths) == mf.report(*paths)
    assert json.loads(json.dumps(mf.report(*paths).to_dict()))["succeeded"] == 29
