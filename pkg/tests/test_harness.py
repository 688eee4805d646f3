import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from pflcombo.harness.config import (
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    demo_config_path,
    dump_config,
    parse_config,
)
from pflcombo.harness.experiment import ExperimentError, partition_manifest_rows, prepare_data, run_experiment, run_experiment_detailed
from pflcombo.harness.report import (
    APPROACHES,
    MetricsRecord,
    MetricsTable,
    ReportError,
    compare_local_vs_fl,
    emit_report,
    read_metrics_csv,
    render_csv,
    render_markdown,
    table_from_averages,
)


def test_minimal_config_gets_documented_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("data:\n  source: synthetic\nmodel:\n  hidden_dim: 8\n")
    cfg = parse_config(path)
    assert cfg.model.hidden_dim == 8
    assert cfg.partition.dirichlet_alpha == 0.9
    assert cfg.partition.split_ratios == (0.8, 0.1, 0.1)
    assert cfg.federation.rounds == 50 and cfg.federation.local_epochs == 2
    assert cfg.federation.local_lr == 0.05 and cfg.federation.eta == 1.0
    assert cfg.federation.regime == "cross_silo"
    assert cfg.federation.enabled_scenarios() == ["fl", "ra_fl"]
    p = cfg.personalization
    assert p.rows == tuple(range(1, 14)) and p.ft_epochs == 5
    assert (p.lam, p.kd_alpha, p.kd_temperature, p.moe_alpha) == (1.0, 0.5, 2.0, "tuned")
    assert p.baseline_epochs == 5 and p.eval_clients is None
    assert cfg.seed == 0 and cfg.output.formats == ("csv", "markdown")
    assert ExperimentConfig() == cfg.replace(model=ExperimentConfig().model)


def test_empty_file_is_all_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert parse_config(path) == ExperimentConfig()


def test_dp_in_cross_silo_rejected():
    with pytest.raises(ConfigError, match="cross_device"):
        config_from_dict({"federation": {"dp_fl": {"enabled": True}}})
    ok = config_from_dict({"federation": {"regime": "cross_device", "sample_size": 3, "dp_fl": {"enabled": True}}})
    assert ok.federation.policy_for("dp_fl").dp.noise_sd == 0.05


def test_unknown_keys_listed():
    with pytest.raises(ConfigError) as e:
        config_from_dict({"foo": 1, "data": {"bar": 2}, "federation": {"ra_fl": {"baz": 3}}})
    msg = str(e.value)
    for key in ("foo", "data.bar", "federation.ra_fl.baz"):
        assert key in msg


def test_malformed_yaml_reports_position(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("data:\n  source: [synthetic\nmodel: {}\n")
    with pytest.raises(ConfigError, match=r"bad\.yaml:\d+:\d+"):
        parse_config(path)


def test_named_invariant_violations():
    with pytest.raises(ConfigError, match="num_clients"):
        config_from_dict({"partition": {"num_clients": 1}})
    with pytest.raises(ConfigError, match="rows"):
        config_from_dict({"personalization": {"rows": [0]}})
    with pytest.raises(ConfigError, match="sample_size"):
        config_from_dict({"federation": {"regime": "cross_device", "sample_size": 50}})
    with pytest.raises(ConfigError, match="csv_path"):
        config_from_dict({"data": {"source": "csv"}})
    with pytest.raises(ConfigError, match="method"):
        config_from_dict({"federation": {"ra_fl": {"method": "krum"}}})
    with pytest.raises(ConfigError):
        config_from_dict({"personalization": {"kd_alpha": 2.0}})


def test_rows_by_flag_set():
    cfg = config_from_dict({"personalization": {"rows": [{"fb": True, "mtl": True, "moe": True}, 1]}})
    assert cfg.personalization.rows == (13, 1)
    with pytest.raises(ConfigError, match="no combination"):
        config_from_dict({"personalization": {"rows": [{"kd": True}]}})


def test_demo_config_parses_and_round_trips():
    cfg = parse_config(demo_config_path())
    assert cfg.partition.dirichlet_alpha == 0.9 and cfg.federation.rounds == 50
    assert cfg.federation.local_epochs == 2 and cfg.partition.num_clients == 10
    assert cfg.data.num_classes == 10 and cfg.data.input_dim == 20
    assert config_from_dict(yaml.safe_load(dump_config(cfg))) == cfg


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    alpha=st.floats(0.01, 100),
    rounds=st.integers(1, 100),
    lam=st.floats(0, 10),
    rows=st.lists(st.integers(1, 13), min_size=1, max_size=13, unique=True),
    moe=st.one_of(st.just("tuned"), st.floats(0, 1)),
    regime=st.sampled_from(["cross_silo", "cross_device"]),
    hidden=st.integers(0, 32),
)
def test_round_trip_property(tmp_path_factory, seed, alpha, rounds, lam, rows, moe, regime, hidden):
    raw = {
        "seed": seed,
        "partition": {"dirichlet_alpha": alpha},
        "model": {"hidden_dim": hidden},
        "federation": {"rounds": rounds, "regime": regime, "dp_fl": {"enabled": regime == "cross_device"}},
        "personalization": {"lambda": lam, "rows": rows, "moe_alpha": moe},
    }
    cfg = config_from_dict(raw)
    path = tmp_path_factory.mktemp("rt") / "c.yaml"
    path.write_text(dump_config(cfg))
    assert parse_config(path) == cfg


def test_counting_example(small_config):
    cfg = small_config(federation={"ra_fl": {"enabled": False}}, personalization={"rows": [1, 7]})
    table = run_experiment(cfg)
    assert len(table) == 3 * (1 + 1 + 2) == 12
    assert table.scenarios() == ["fl"]
    assert table.approaches() == ["local", "fl", "row1", "row7"]


def test_same_config_identical_tables(small_config):
    cfg = small_config(personalization={"rows": [1, 8, 13]})
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a == b
    assert [r.accuracy for r in a.records] == [r.accuracy for r in b.records]


def test_worker_count_does_not_change_results(small_config):
    cfg = small_config(personalization={"rows": [2, 9]})
    assert render_csv(run_experiment(cfg)) == render_csv(run_experiment(cfg.replace(workers=3)))


def test_record_completeness_and_ordering(small_config):
    cfg = small_config(
        federation={"regime": "cross_device", "sample_size": 2, "dp_fl": {"enabled": True}},
        personalization={"rows": [3, 1, 12]},
    )
    res = run_experiment_detailed(cfg)
    keys = [(r.scenario, r.approach, r.client_id) for r in res.table.records]
    expected = [
        (s, a, c)
        for s in ("fl", "dp_fl", "ra_fl")
        for a in ("local", "fl", "row1", "row3", "row12")
        for c in res.evaluated_ids
    ]
    assert keys == expected
    for (s, a), v in res.table.averages.items():
        recs = [r.accuracy for r in res.table.select(s, a)]
        assert abs(v - sum(recs) / len(recs)) <= 1e-9
    # local records repeat across scenarios
    locals_ = {s: [r.accuracy for r in res.table.select(s, "local")] for s in ("fl", "dp_fl", "ra_fl")}
    assert locals_["fl"] == locals_["dp_fl"] == locals_["ra_fl"]


def test_cross_silo_report_has_no_dp_column(small_config):
    md = render_markdown(run_experiment(small_config(personalization={"rows": [1]})))
    assert "DP-FL" not in md.splitlines()[0] and "RA-FL" in md.splitlines()[0]


def test_disabling_a_scenario_does_not_perturb_others(small_config):
    both = run_experiment(small_config(personalization={"rows": [1, 7]}))
    fl_only = run_experiment(small_config(federation={"ra_fl": {"enabled": False}}, personalization={"rows": [1, 7]}))
    assert both.select("fl") == fl_only.select("fl")


def test_eval_client_subsample(small_config):
    cfg = small_config(partition={"num_clients": 6}, personalization={"rows": [1], "eval_clients": 2})
    res = run_experiment_detailed(cfg)
    assert len(res.evaluated_ids) == 2
    assert {r.client_id for r in res.table.records} == set(res.evaluated_ids)
    assert res.evaluated_ids == run_experiment_detailed(cfg).evaluated_ids


def test_shared_test_mode_and_manifest(small_config):
    cfg = small_config(partition={"shared_test": True, "shared_test_fraction": 0.3, "split_ratios": [0.9, 0.1, 0.0]}, personalization={"rows": [1]})
    data = prepare_data(cfg)
    assert data.shared_test is not None and len(data.shared_test) == 27
    rows = partition_manifest_rows(data)
    assert sorted(r[2] for r in rows) == list(range(90))
    assert sum(r[1] == "shared_test" for r in rows) == 27
    table = run_experiment(cfg)
    assert len(table.select("fl", "row1")) == len([c for c in data.clients if len(c.train)])


def test_errors_carry_context(small_config, monkeypatch):
    import pflcombo.harness.experiment as exp

    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(exp, "personalize_client", boom)
    with pytest.raises(ExperimentError, match=r"scenario=fl approach=row1 client=0.*kaput"):
        run_experiment(small_config(personalization={"rows": [1]}))


def test_csv_data_source(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["f1,f2,cls"]
    for i in range(60):
        c = i % 3
        lines.append(f"{rng.normal() + 2 * c},{rng.normal()},k{c}")
    path = tmp_path / "d.csv"
    path.write_text("\n".join(lines) + "\n")
    cfg = config_from_dict(
        {
            "data": {"source": "csv", "csv_path": str(path), "label_column": "cls"},
            "partition": {"num_clients": 2},
            "model": {"hidden_dim": 0},
            "federation": {"rounds": 2},
            "personalization": {"rows": [4], "ft_epochs": 1, "baseline_epochs": 1},
        }
    )
    table = run_experiment(cfg)
    assert table.approaches() == ["local", "fl", "row4"]


# --- reports -------------------------------------------------------------------

CROSS_SECTOR = {
    "local": 64.13, "fl": 63.44, "row1": 64.58, "row2": 63.99, "row3": 64.33, "row4": 64.11,
    "row5": 63.48, "row6": 63.73, "row7": 65.90, "row8": 67.01, "row9": 65.91, "row10": 66.05,
    "row11": 66.26, "row12": 65.82, "row13": 65.97,
}


def bolded(md):
    out = []
    for line in md.splitlines()[2:]:
        cells = [c.strip() for c in line.strip("|").split("|")]
        out.extend((cells[0], c) for c in cells[1:] if c.startswith("**"))
    return out


def test_markdown_three_row_example():
    table = table_from_averages({("fl", "local"): 0.6413, ("fl", "fl"): 0.6344, ("fl", "row8"): 0.6701})
    md = render_markdown(table)
    body = md.splitlines()[2:]
    assert [l.split("|")[1].strip() for l in body] == ["Local Model", "FL", "FL + FT + MoE"]
    assert bolded(md) == [("FL + FT + MoE", "**67.01**")]
    assert "64.13" in body[0] and "63.44" in body[1]


def test_markdown_full_column_order_and_bold():
    table = table_from_averages({("fl", a): v / 100 for a, v in CROSS_SECTOR.items()})
    md = render_markdown(table)
    labels = [l.split("|")[1].strip() for l in md.splitlines()[2:]]
    assert labels[:3] == ["Local Model", "FL", "FL + FT"]
    assert labels[-1] == "FL + FB + MTL + MoE" and len(labels) == 15
    assert bolded(md) == [("FL + FT + MoE", "**67.01**")]


def test_markdown_ties_all_bold_and_local_never_bold():
    table = table_from_averages({("fl", "local"): 0.9, ("fl", "fl"): 0.5, ("fl", "row1"): 0.6, ("fl", "row2"): 0.6})
    assert [b[0] for b in bolded(render_markdown(table))] == ["FL + FT", "FL + FT + KD"]


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [MetricsRecord(s, a, c, float(rng.random())) for s in ("fl", "ra_fl") for a in APPROACHES for c in (0, 4, 2)]
    table = MetricsTable(recs)
    path = emit_report(table, "csv", tmp_path / "m.csv")
    text = path.read_text()
    assert text.splitlines()[0] == "scenario,approach,client_id,accuracy"
    assert "#averages" in text
    again = read_metrics_csv(path)
    assert again == table
    assert render_csv(again) == text


def test_csv_tampered_average_detected(tmp_path):
    table = table_from_averages({("fl", "fl"): 0.5})
    path = emit_report(table, "csv", tmp_path / "m.csv")
    path.write_text(path.read_text().replace("fl,fl,0.5,1", "fl,fl,0.6,1"))
    with pytest.raises(ReportError, match="average"):
        read_metrics_csv(path)


def test_report_errors(tmp_path):
    with pytest.raises(ReportError, match="empty"):
        emit_report(MetricsTable([]), "markdown", tmp_path / "x.md")
    table = table_from_averages({("fl", "fl"): 0.5})
    with pytest.raises(ReportError, match="cannot write"):
        emit_report(table, "csv", tmp_path / "missing" / "x.csv")
    with pytest.raises(ReportError):
        emit_report(table, "html", tmp_path / "x.html")


def test_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord("fl", "fl", 0, 1.5)
    with pytest.raises(ValueError):
        MetricsRecord("xx", "fl", 0, 0.5)
    with pytest.raises(ValueError):
        MetricsRecord("fl", "row14", 0, 0.5)
    with pytest.raises(ValueError):
        MetricsTable([MetricsRecord("fl", "fl", 0, 0.5)] * 2)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 30), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30, unique_by=lambda t: t[0]))
def test_compare_local_vs_fl_recount(rows):
    recs = []
    for cid, loc, fl in rows:
        recs += [MetricsRecord("fl", "local", cid, loc), MetricsRecord("fl", "fl", cid, fl)]
    s = compare_local_vs_fl(MetricsTable(recs))
    assert s.local_better == sum(1 for _, loc, fl in rows if loc > fl)
    assert math.isclose(s.fraction_local_better, s.local_better / len(rows))
    assert s.local_better + s.fl_better + s.ties == len(rows)
    assert math.isclose(s.mean_local, sum(r[1] for r in rows) / len(rows), abs_tol=1e-12)


def test_compare_examples():
    table = table_from_averages({("fl", "local"): 0.6413, ("fl", "fl"): 0.6344})
    assert round(100 * compare_local_vs_fl(table).mean_delta, 2) == -0.69
    recs = [MetricsRecord("fl", a, c, v) for c in range(3) for a, v in (("local", 0.2), ("fl", 0.7))]
    assert compare_local_vs_fl(MetricsTable(recs)).fraction_local_better == 0.0
    with pytest.raises(ReportError, match="paired"):
        compare_local_vs_fl(MetricsTable(recs + [MetricsRecord("fl", "local", 9, 0.1)]))
    with pytest.raises(ReportError):
        compare_local_vs_fl(MetricsTable(recs), "ra_fl")
