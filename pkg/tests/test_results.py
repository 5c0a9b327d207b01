import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrbench.results import (
    AccuracyRecord, DatasetMeta, IngestError, ModelMeta, ResultsTable, dump, ingest, query,
)

HEADER = "model_id,backbone_id,dataset_id,resolution,top1,top5\n"


def _meta(tmp_path):
    (tmp_path / "datasets.json").write_text(json.dumps(
        [{"id": "aircraft", "num_classes": 100}, {"id": "eurosat", "num_classes": 10}]))
    (tmp_path / "models.json").write_text(json.dumps(
        [{"id": "albef-4m", "backbone": "ViT-B/16", "hr_resolution": 224},
         {"id": "clip-l14", "backbone": "ViT-L/14", "hr_resolution": 336}]))


def _write(tmp_path, body, name="r.csv"):
    _meta(tmp_path)
    p = tmp_path / name
    p.write_text(body)
    return p


def test_aircraft_row_gets_one_percent_chance(tmp_path):
    t = ingest(_write(tmp_path, HEADER + "albef-4m,ViT-B/16,aircraft,224,0.027,\n"))
    assert t.query("albef-4m", "aircraft", 224) == 0.027
    assert t.datasets["aircraft"].a_rand == pytest.approx(0.01, abs=0)


def test_header_only_file_gives_empty_table(tmp_path):
    t = ingest(_write(tmp_path, HEADER))
    assert len(t) == 0 and t.coverage() == set()


def test_duplicate_key_rejected_at_second_row(tmp_path):
    body = HEADER + "albef-4m,ViT-B/16,aircraft,16,0.01,\n" + "albef-4m,ViT-B/16,aircraft,16,0.02,\n"
    with pytest.raises(IngestError) as e:
        ingest(_write(tmp_path, body))
    assert e.value.row == 2
    assert "aircraft" in str(e.value)


@pytest.mark.parametrize("line, row", [
    ("albef-4m,ViT-B/16,aircraft,16,1.2,", 1),
    ("albef-4m,ViT-B/16,aircraft,16,-0.1,", 1),
    ("albef-4m,ViT-B/16,aircraft,16,0.5,0.4", 1),  # top5 < top1
    ("albef-4m,ViT-B/16,mnist,16,0.5,", 1),
    ("nobody,ViT-B/16,aircraft,16,0.5,", 1),
    ("albef-4m,ViT-B/16,aircraft,20,0.5,", 1),
])
def test_invalid_rows(tmp_path, line, row):
    with pytest.raises(IngestError) as e:
        ingest(_write(tmp_path, HEADER + line + "\n"))
    assert e.value.row == row


def test_percent_header_scales_to_fractions(tmp_path):
    t = ingest(_write(tmp_path, "# unit=percent\n" + HEADER + "albef-4m,ViT-B/16,aircraft,224,2.7,\n"))
    assert t.query("albef-4m", "aircraft", 224) == pytest.approx(0.027)
    with pytest.raises(IngestError):
        ingest(_write(tmp_path, "# unit=percent\n" + HEADER + "albef-4m,ViT-B/16,aircraft,224,101,\n"))


def test_json_formats(tmp_path):
    _meta(tmp_path)
    rec = {"model_id": "albef-4m", "backbone_id": "ViT-B/16", "dataset_id": "aircraft",
           "resolution": 16, "top1": 1.0}
    (tmp_path / "a.json").write_text(json.dumps({"unit": "percent", "records": [rec]}))
    (tmp_path / "b.json").write_text(json.dumps([dict(rec, top1=0.01)]))
    assert ingest(tmp_path / "a.json") == ingest(tmp_path / "b.json")


def test_query_missing_is_none(data_dir):
    t = ingest(data_dir / "abnormal_robustness.csv")
    assert query(t, "albef-4m", "cars", 16) == pytest.approx(0.006)
    assert query(t, "albef-4m", "cars", 512) is None
    assert query(t, "nobody", "cars", 16) is None


def test_every_ingested_key_is_queryable(data_dir):
    t = ingest(data_dir / "abnormal_robustness.csv")
    keys = {r.key for r in t}
    assert len(keys) == len(t) == 70
    assert all(t.query(*k) is not None for k in keys)
    assert t.coverage() == keys


def test_meta_validation():
    with pytest.raises(ValueError):
        DatasetMeta("x", 0)
    with pytest.raises(ValueError):
        ModelMeta("m", "b", 300)
    d = DatasetMeta("x", 7)
    assert d.a_rand * d.num_classes == pytest.approx(1.0, rel=1e-15)


_ids = st.sampled_from(["albef-4m", "clip-l14"])
_ds = st.sampled_from(["aircraft", "eurosat"])
_res = st.sampled_from([16, 32, 64, 128, "hr"])
_acc = st.floats(0, 1, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(_ids, _ds, _res, _acc, st.one_of(st.none(), _acc)), max_size=20),
       st.sampled_from(["csv", "json"]))
def test_round_trip(tmp_path_factory, rows, fmt):
    tmp = tmp_path_factory.mktemp("rt")
    _meta(tmp)
    t = ResultsTable(
        datasets={"aircraft": DatasetMeta("aircraft", 100), "eurosat": DatasetMeta("eurosat", 10)},
        models={"albef-4m": ModelMeta("albef-4m", "ViT-B/16", 224),
                "clip-l14": ModelMeta("clip-l14", "ViT-L/14", 336)},
    )
    seen = set()
    for m, d, n, a, a5 in rows:
        n = t.models[m].hr_resolution if n == "hr" else n
        if (m, d, n) in seen:
            continue
        seen.add((m, d, n))
        top5 = None if a5 is None else max(a, a5)
        t.add(AccuracyRecord(m, "b", d, n, a, top5))
    path = tmp / f"out.{fmt}"
    dump(t, path)
    assert ingest(path) == t
