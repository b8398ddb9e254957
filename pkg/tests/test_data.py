from dataclasses import replace

import numpy as np
import pytest

from evicvr.data import (
    DataError,
    Dataset,
    FieldSchema,
    SyntheticConfig,
    batches,
    calibrate_shifts,
    expected_rates,
    generate_synthetic,
    load_log,
    save_log,
    split,
)


@pytest.fixture(scope="module")
def default_ds():
    return generate_synthetic(SyntheticConfig())


def test_default_preset_rates(default_ds):
    s = default_ds.summary()
    assert s["n"] == 100_000
    assert abs(s["click_rate"] - 0.04) < 0.005
    assert abs(s["conversion_rate_given_click"] - 0.02) < 0.006


def test_no_confounding_gives_independent_click_and_conversion():
    cfg = replace(SyntheticConfig(), confounder_strength_ctr=0.0, confounder_strength_cvr=0.0)
    ds = generate_synthetic(cfg)
    corr = np.corrcoef(ds.click, ds.oracle_conv_all)[0, 1]
    assert abs(corr) < 0.02


def test_confounding_makes_clicked_users_convert_more(default_ds):
    ds = default_ds
    clicked = ds.click == 1
    gap = ds.oracle_cvr[clicked].mean() - ds.oracle_cvr[~clicked].mean()
    assert gap > 0.01
    # click-space conversion rate exceeds the entire-space counterfactual rate
    assert ds.conversion[clicked].mean() > ds.oracle_conv_all.mean()


def test_conversion_rate_matches_monte_carlo_estimate():
    cfg = replace(SyntheticConfig(), base_cvr_logit_shift=-4.0)
    ds = generate_synthetic(cfg)
    _, mc_cvr = expected_rates(cfg)
    observed = ds.conversion[ds.click == 1].mean()
    assert abs(observed - mc_cvr) <= 0.2 * mc_cvr


def test_calibration_hits_targets():
    cfg = calibrate_shifts(SyntheticConfig(seed=3), 0.1, 0.05)
    ctr, cvr = expected_rates(cfg)
    assert ctr == pytest.approx(0.1, abs=0.003)
    assert cvr == pytest.approx(0.05, abs=0.003)


def test_generation_is_bitwise_reproducible():
    cfg = SyntheticConfig(n_records=2000, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for col in ("features", "click", "conversion", "oracle_ctr", "oracle_cvr", "oracle_conv_all"):
        assert getattr(a, col).tobytes() == getattr(b, col).tobytes()


def test_funnel_invariant_holds(default_ds):
    assert np.all(default_ds.conversion <= default_ds.click)
    assert np.array_equal(default_ds.conversion, default_ds.click * default_ds.oracle_conv_all)


def test_degenerate_config_is_rejected():
    with pytest.raises(DataError, match="degenerate"):
        generate_synthetic(replace(SyntheticConfig(n_records=500), base_ctr_logit_shift=-60.0))
    with pytest.raises(DataError):
        generate_synthetic(replace(SyntheticConfig(), confounder_dim=2))


def test_oracle_columns_all_or_nothing():
    schema = FieldSchema((3,))
    with pytest.raises(DataError, match="all present"):
        Dataset(schema, np.zeros((2, 1), int), np.array([1, 0]), np.array([0, 0]), oracle_ctr=np.array([0.5, 0.5]))


def test_record_view(default_ds):
    rec = default_ds.record(0)
    assert len(rec.feature_ids) == 8
    assert rec.feature_ids[3][0] == 3
    assert rec.oracle_conversion_all in (0, 1)


def _write(tmp_path, text):
    p = tmp_path / "log.csv"
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "f0,f1,click,conversion\n0,1,1,1\n2,0,0,0\n1,1,1,0\n")
    ds = load_log(p, FieldSchema((3, 2)))
    assert len(ds) == 3
    assert not ds.has_oracle
    assert ds.click.tolist() == [1, 0, 1]


def test_load_rejects_funnel_violation(tmp_path):
    p = _write(tmp_path, "f0,click,conversion\n0,1,0\n1,0,1\n")
    with pytest.raises(DataError, match="row 3: funnel"):
        load_log(p)


def test_load_reports_malformed_row(tmp_path):
    p = _write(tmp_path, "f0,click,conversion\n0,1,0\nx,0,0\n")
    with pytest.raises(DataError, match="row 3"):
        load_log(p)
    p = _write(tmp_path, "f0,click,conversion\n0,1\n")
    with pytest.raises(DataError, match="row 2"):
        load_log(p)


def test_load_rejects_category_outside_schema(tmp_path):
    p = _write(tmp_path, "f0,click,conversion\n5,1,0\n")
    with pytest.raises(DataError, match="cardinality"):
        load_log(p, FieldSchema((3,)))


def test_oracle_columns_roundtrip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_records=300, seed=4))
    p = tmp_path / "syn.csv"
    save_log(ds, p)
    back = load_log(p, ds.schema)
    assert back.has_oracle
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.oracle_conv_all, ds.oracle_conv_all)
    assert np.allclose(back.oracle_cvr, ds.oracle_cvr, rtol=1e-8, atol=0)
    assert p.read_text().splitlines()[0].endswith("oracle_ctr,oracle_cvr,oracle_conv_all")


def test_split_sizes_and_determinism():
    ds = generate_synthetic(SyntheticConfig(n_records=1000, seed=2, base_ctr_logit_shift=-1.0))
    a, b = split(ds, 0.8, seed=7)
    assert (len(a), len(b)) == (800, 200)
    a2, _ = split(ds, 0.8, seed=7)
    assert np.array_equal(a.features, a2.features)
    merged = sorted(map(tuple, np.vstack([a.features, b.features]).tolist()))
    assert merged == sorted(map(tuple, ds.features.tolist()))


def test_split_rejects_empty_space():
    schema = FieldSchema((2,))
    ds = Dataset(schema, np.zeros((10, 1), int), np.array([1] + [0] * 9), np.zeros(10, int))
    with pytest.raises(DataError):
        split(ds, 0.5, seed=0)
    with pytest.raises(DataError):
        split(ds, 1.0, seed=0)


def test_batches_cover_each_record_once():
    blocks = batches(10, 4, seed=0, epoch=1)
    assert [len(b) for b in blocks] == [4, 4, 2]
    assert sorted(np.concatenate(blocks).tolist()) == list(range(10))
    again = batches(10, 4, seed=0, epoch=1)
    assert all(np.array_equal(x, y) for x, y in zip(blocks, again))


def test_batches_reshuffle_each_epoch():
    a = np.concatenate(batches(1000, 100, seed=0, epoch=1))
    b = np.concatenate(batches(1000, 100, seed=0, epoch=2))
    assert not np.array_equal(a, b)
