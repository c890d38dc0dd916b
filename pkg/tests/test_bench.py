from __future__ import annotations

import json
import xml.dom.minidom

import numpy as np
import pytest

import gada.bench as bench
from gada.autodiff import ContractError
from gada.bench import (
    ExperimentConfig,
    VARIANT_TOGGLES,
    apply_variant,
    cli_main,
    cluster_separation_metric,
    config_from_keys,
    emit_scatter_svg,
    export_features,
    load_config,
    make_dataset,
    parse_config_text,
    pca_projection,
    render_config,
    run_ablation,
    run_experiment,
)
from gada.data import CsvParseError, ShiftSpec
from gada.trainer import HyperParams, TrainingAbort, train


def _tiny_hp(**kw):
    base = dict(steps=6, eval_interval=3, batch_size=16,
                g_hidden=(16, 16), h_hidden=(8,), disc_hidden=(8,),
                gen_hidden=(16, 16), d_z=4, dirt_steps=4,
                dirt_refresh_interval=2)
    base.update(kw)
    return HyperParams(**base)


def _tiny_config(**kw):
    base = dict(hyper=_tiny_hp(),
                data=ShiftSpec(n_source=120, n_target=120, n_test=120),
                variant="gada", seeds=(0,), out_dir="unused")
    base.update(kw)
    return ExperimentConfig(**base)


# -- variants -----------------------------------------------------------------


def test_source_only_zeroes_every_weight():
    hp = apply_variant(HyperParams(), "source_only")
    w = hp.weights
    assert (w.lambda_d, w.lambda_s, w.lambda_t, w.lambda_u) == (0, 0, 0, 0)
    assert not (hp.use_domain or hp.use_entropy or hp.use_vat
                or hp.use_unsupervised)


def test_gada_keeps_canonical_defaults():
    hp = apply_variant(HyperParams(), "gada")
    assert hp.weights.lambda_d == 1e-2
    assert hp.weights.lambda_s == 1.0
    assert hp.weights.lambda_t == 1e-2
    assert hp.weights.lambda_u == 1.0
    assert hp.lr_cls == hp.lr_disc == hp.lr_gen == 2e-4
    assert hp.use_domain and hp.use_entropy and hp.use_vat
    assert hp.use_unsupervised


def test_entropy_only_variant_keeps_target_weight():
    hp = apply_variant(HyperParams(), "dann_e")
    assert hp.weights.lambda_t == 1e-2
    assert hp.weights.lambda_s == 0.0


def test_unknown_variant_rejected():
    with pytest.raises(ContractError):
        apply_variant(HyperParams(), "gadda")
    with pytest.raises(ContractError):
        ExperimentConfig(hyper=HyperParams(), data=ShiftSpec(),
                         variant="gadda")


def test_variant_table_is_total():
    assert set(VARIANT_TOGGLES) == {
        "source_only", "dann", "dann_e", "dann_v", "dann_u", "vada",
        "gada", "gada_dirtt"}


# -- config files -------------------------------------------------------------


def test_config_render_parse_round_trip():
    cfg = _tiny_config(seeds=(3, 1, 2), out_dir="elsewhere",
                       ablate_variants=("dann", "gada"), export_n=17)
    assert config_from_keys(parse_config_text(render_config(cfg))) == cfg


def test_config_comments_and_blanks_ignored():
    kv = parse_config_text("# head\n\na = 1\n  # indented comment\nb = x=y\n")
    assert kv == {"a": "1", "b": "x=y"}


def test_config_line_without_equals_rejected():
    with pytest.raises(ContractError, match="line 2"):
        parse_config_text("a = 1\nbroken line\n")


def test_config_duplicate_key_rejected():
    with pytest.raises(ContractError, match="duplicate"):
        parse_config_text("a = 1\na = 2\n")


def test_config_unknown_key_rejected():
    with pytest.raises(ContractError, match="hyper.velocity"):
        config_from_keys({"data.family": "two_moons",
                          "hyper.velocity": "9"})


def test_config_bad_boolean_rejected():
    with pytest.raises(ContractError, match="boolean"):
        config_from_keys({"data.family": "two_moons",
                          "hyper.use_vat": "maybe"})


def test_config_needs_exactly_one_data_source():
    with pytest.raises(ContractError):
        ExperimentConfig(hyper=HyperParams(), data=None, csv_paths=None)
    with pytest.raises(ContractError):
        ExperimentConfig(hyper=HyperParams(), data=ShiftSpec(),
                         csv_paths={k: "x" for k in (
                             "source_x", "source_y", "target_x", "test_x",
                             "test_y")})


def test_config_empty_seed_list_rejected():
    with pytest.raises(ContractError):
        ExperimentConfig(hyper=HyperParams(), data=ShiftSpec(), seeds=())


def test_csv_config_loads_generated_data(tmp_path):
    gen_dir = tmp_path / "csv"
    assert cli_main(["gen-data", "--config",
                     _write_cfg(tmp_path, _tiny_config()),
                     "--out", str(gen_dir)]) == 0
    paths = {k: str(gen_dir / ("%s.csv" % k)) for k in (
        "source_x", "source_y", "target_x", "test_x", "test_y")}
    cfg = _tiny_config()
    csv_cfg = ExperimentConfig(hyper=cfg.hyper, data=None, csv_paths=paths)
    ds = make_dataset(csv_cfg, seed=0)
    ref = make_dataset(cfg, seed=cfg.data.seed)
    assert np.array_equal(ds.source_x, ref.source_x)
    assert np.array_equal(ds.source_y, ref.source_y)
    assert ds.K == ref.K


def test_generated_dataset_reseeds_per_run():
    cfg = _tiny_config()
    a = make_dataset(cfg, seed=4)
    b = make_dataset(cfg, seed=5)
    assert not np.array_equal(a.source_x, b.source_x)
    assert np.array_equal(a.source_x, make_dataset(cfg, seed=4).source_x)


# -- orchestration ------------------------------------------------------------


def _write_cfg(tmp_path, cfg, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(render_config(cfg), encoding="utf-8")
    return str(path)


def test_run_experiment_writes_the_artifact_set(tmp_path):
    cfg = _tiny_config(variant="source_only", seeds=(7,),
                       out_dir=str(tmp_path / "out"))
    results = run_experiment(cfg)
    assert len(results) == 1 and "error" not in results[0]
    stem = tmp_path / "out" / "source_only_seed7"
    for suffix in ("_metrics.json", "_confusion.txt", "_model.ckpt",
                   "_features.csv", "_timing.json"):
        assert (stem.parent / (stem.name + suffix)).exists()
    doc = json.loads((stem.parent / (stem.name + "_metrics.json")).read_text())
    assert doc["config"]["variant"] == "source_only"
    assert doc["config"]["seed"] == 7
    assert doc["config"]["hyper"]["lambda_d"] == 0.0
    assert doc["config"]["hyper"]["lambda_u"] == 0.0
    assert doc["config"]["data"]["family"] == "two_moons"


def test_run_experiment_metrics_bytes_reproduce(tmp_path):
    cfg_a = _tiny_config(seeds=(1,), out_dir=str(tmp_path / "a"))
    cfg_b = _tiny_config(seeds=(1,), out_dir=str(tmp_path / "b"))
    run_experiment(cfg_a)
    run_experiment(cfg_b)
    a = (tmp_path / "a" / "gada_seed1_metrics.json").read_bytes()
    b = (tmp_path / "b" / "gada_seed1_metrics.json").read_bytes()
    assert a == b


def test_run_experiment_records_abort_and_continues(tmp_path, monkeypatch):
    calls = []
    real = bench.train

    def flaky(hp, dataset):
        calls.append(hp.seed)
        if hp.seed == 1:
            raise TrainingAbort("classification", 3, float("nan"))
        return real(hp, dataset)

    monkeypatch.setattr(bench, "train", flaky)
    cfg = _tiny_config(variant="dann", seeds=(1, 2),
                       out_dir=str(tmp_path / "out"))
    results = run_experiment(cfg)
    assert calls == [1, 2]
    assert "error" in results[0] and "error" not in results[1]
    assert (tmp_path / "out" / "dann_seed1_error.txt").exists()
    assert (tmp_path / "out" / "dann_seed2_metrics.json").exists()


def test_ablation_needs_five_seeds():
    with pytest.raises(ContractError, match="5 seeds"):
        run_ablation(_tiny_config(seeds=(0, 1, 2, 3)))


@pytest.fixture(scope="module")
def tiny_table():
    cfg = _tiny_config(seeds=(0, 1, 2, 3, 4),
                       ablate_variants=("source_only", "gada", "gada_dirtt"))
    return cfg, run_ablation(cfg, keep_states=True)


def test_ablation_every_cell_present(tiny_table):
    cfg, table = tiny_table
    for variant in cfg.ablate_variants:
        for seed in cfg.seeds:
            assert (variant, seed) in table.cells
            assert "accuracy" in table.cells[(variant, seed)]


def test_ablation_median_invariant_to_seed_order(tiny_table):
    cfg, table = tiny_table
    shuffled = _tiny_config(seeds=(4, 2, 0, 3, 1),
                            ablate_variants=("source_only",))
    other = run_ablation(shuffled)
    assert other.median("source_only") == table.median("source_only")
    q = table.iqr("source_only")
    assert other.iqr("source_only") == q and q[0] <= q[1]


def test_ablation_refined_cell_differs_from_base(tiny_table):
    cfg, table = tiny_table
    a = table.states[("gada", 0)].bundle.classifier.params["g.W0"].data
    b = table.states[("gada_dirtt", 0)].bundle.classifier.params["g.W0"].data
    assert not np.array_equal(a, b)
    assert table.states[("gada", 0)].step == cfg.hyper.steps
    assert table.states[("gada_dirtt", 0)].step == \
        cfg.hyper.steps + cfg.hyper.dirt_steps


def test_ablation_json_and_text_tables(tiny_table):
    cfg, table = tiny_table
    doc = json.loads(table.to_json())
    assert set(doc["variants"]) == set(cfg.ablate_variants)
    entry = doc["variants"]["gada"]
    assert "median" in entry and len(entry["iqr"]) == 2
    assert len(entry["cells"]) == len(cfg.seeds)
    text = table.to_text()
    assert "gada_dirtt" in text and "median" in text


def test_ablation_failed_cell_is_diagnosed(monkeypatch):
    real = bench.train

    def flaky(hp, dataset):
        if hp.seed == 2 and not hp.use_domain:
            raise TrainingAbort("entropy", 5, float("inf"))
        return real(hp, dataset)

    monkeypatch.setattr(bench, "train", flaky)
    cfg = _tiny_config(seeds=(0, 1, 2, 3, 4),
                       ablate_variants=("source_only",))
    table = run_ablation(cfg)
    cell = table.cells[("source_only", 2)]
    assert "entropy" in cell["error"]
    assert len(table.accuracies("source_only")) == 4
    assert "FAILED" in table.to_text()
    json.loads(table.to_json())


# -- feature export -----------------------------------------------------------


@pytest.fixture(scope="module")
def trained_pair():
    cfg = _tiny_config()
    ds = make_dataset(cfg, seed=0)
    state, _ = train(apply_variant(cfg.hyper, "gada"), ds)
    return state, ds


def test_pca_of_2d_features_preserves_pairwise_distances():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((40, 2))
    proj = pca_projection(rows)
    d_in = np.linalg.norm(rows[:, None] - rows[None, :], axis=2)
    d_out = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
    assert np.max(np.abs(d_in - d_out)) < 1e-9


def test_pca_sign_convention_is_deterministic():
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((30, 6))
    a = pca_projection(rows)
    b = pca_projection(rows.copy())
    assert np.array_equal(a, b)
    for i in range(2):
        assert np.std(a[:, i]) > 0


def test_export_rows_and_labels(trained_pair):
    state, ds = trained_pair
    text = export_features(state, ds, 30)
    lines = text.strip().split("\n")
    header = lines[0].split(",")
    q = state.bundle.classifier.phi_dim
    assert header == ["split", "label"] + \
        ["f%d" % (i + 1) for i in range(q)] + ["pc1", "pc2"]
    assert len(lines) == 1 + 3 * 30
    gen_rows = [l for l in lines[1:] if l.startswith("generated,")]
    assert len(gen_rows) == 30
    assert all(r.split(",")[1] == "-1" for r in gen_rows)


def test_export_clips_to_available_rows(trained_pair):
    state, ds = trained_pair
    text = export_features(state, ds, 500)
    lines = text.strip().split("\n")[1:]
    n_src = sum(1 for l in lines if l.startswith("source,"))
    n_tst = sum(1 for l in lines if l.startswith("target_test,"))
    assert n_src == ds.source_x.shape[0]
    assert n_tst == ds.test_x.shape[0]


def test_export_is_deterministic(trained_pair):
    state, ds = trained_pair
    assert export_features(state, ds, 20) == export_features(state, ds, 20)


# -- separation metric --------------------------------------------------------


def _feature_csv(rows):
    lines = ["split,label,f1,f2,pc1,pc2"]
    for split, label, f1, f2 in rows:
        lines.append("%s,%d,%r,%r,0.0,0.0"
                     % (split, label, float(f1), float(f2)))
    return "\n".join(lines) + "\n"


def test_separation_point_masses_far_apart():
    text = _feature_csv([
        ("target_test", 1, 0.0, 0.0), ("target_test", 1, 0.0, 0.0),
        ("target_test", 2, 10.0, 0.0), ("target_test", 2, 10.0, 0.0)])
    assert cluster_separation_metric(text) > 1e6


def test_separation_single_cluster_is_order_one():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((200, 2))
    rows = [("target_test", 1 + (i % 2), pts[i, 0], pts[i, 1])
            for i in range(200)]
    ratio = cluster_separation_metric(_feature_csv(rows))
    assert 0.0 < ratio < 1.0


def test_separation_rotation_invariant():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((60, 2)) + np.repeat([[0, 0], [4, 1]], 30,
                                                   axis=0)
    theta = 0.7
    q = np.array([[np.cos(theta), -np.sin(theta)],
                  [np.sin(theta), np.cos(theta)]])
    labels = np.repeat([1, 2], 30)
    plain = _feature_csv([("target_test", labels[i], pts[i, 0], pts[i, 1])
                          for i in range(60)])
    spun = pts @ q.T
    rotated = _feature_csv([("target_test", labels[i], spun[i, 0], spun[i, 1])
                            for i in range(60)])
    a = cluster_separation_metric(plain)
    b = cluster_separation_metric(rotated)
    assert abs(a - b) < 1e-9


def test_separation_ignores_other_splits_and_generated():
    base = [("target_test", 1, 0.0, 0.0), ("target_test", 1, 0.2, 0.0),
            ("target_test", 2, 5.0, 0.0), ("target_test", 2, 5.2, 0.0)]
    noise = [("source", 1, 99.0, 99.0), ("generated", -1, -99.0, 0.0)]
    assert cluster_separation_metric(_feature_csv(base)) == \
        cluster_separation_metric(_feature_csv(base + noise))


def test_separation_small_class_excluded_with_warning():
    rows = [("target_test", 1, 0.0, 0.0), ("target_test", 1, 0.1, 0.0),
            ("target_test", 2, 5.0, 0.0), ("target_test", 2, 5.1, 0.0),
            ("target_test", 3, 50.0, 0.0)]
    with pytest.warns(UserWarning, match="class 3"):
        with_singleton = cluster_separation_metric(_feature_csv(rows))
    assert with_singleton == cluster_separation_metric(_feature_csv(rows[:4]))


def test_separation_needs_two_surviving_classes():
    rows = [("target_test", 1, 0.0, 0.0), ("target_test", 1, 0.1, 0.0),
            ("target_test", 2, 5.0, 0.0)]
    with pytest.warns(UserWarning):
        with pytest.raises(ContractError):
            cluster_separation_metric(_feature_csv(rows))


# -- SVG ----------------------------------------------------------------------


def test_svg_point_count_matches_rows(tmp_path, trained_pair):
    state, ds = trained_pair
    text = export_features(state, ds, 15)
    out = tmp_path / "scatter.svg"
    emit_scatter_svg(text, out)
    doc = xml.dom.minidom.parse(str(out))
    assert doc.documentElement.tagName == "svg"
    body = out.read_text()
    n_rows = len(text.strip().split("\n")) - 1
    labels = {line.split(",")[1] for line in text.strip().split("\n")[1:]}
    n_markers = sum(body.count("<" + tag)
                    for tag in ("circle", "rect", "polygon"))
    # Overhead: 3 legend split markers, one legend dot per distinct label,
    # plus the background and frame rects.
    assert n_markers == n_rows + 3 + len(labels) + 2


def test_svg_empty_body_is_legend_only(tmp_path):
    out = tmp_path / "empty.svg"
    emit_scatter_svg("split,label,f1,f2,pc1,pc2\n", out)
    content = out.read_text()
    xml.dom.minidom.parseString(content)
    assert "source" in content and "target_test" in content
    assert "pc1 [" not in content  # no axis ranges without data


def test_svg_malformed_csv_rejected(tmp_path):
    with pytest.raises(CsvParseError):
        emit_scatter_svg("not,a,feature,header\n1,2,3,4\n",
                         tmp_path / "x.svg")
    with pytest.raises(CsvParseError, match="line 2"):
        emit_scatter_svg("split,label,f1,f2,pc1,pc2\nsource,1,0.0,0.0\n",
                         tmp_path / "y.svg")
    with pytest.raises(CsvParseError, match="line 3"):
        emit_scatter_svg(
            "split,label,f1,f2,pc1,pc2\n"
            "source,1,0.0,0.0,0.0,0.0\n"
            "source,one,0.0,0.0,0.0,0.0\n",
            tmp_path / "z.svg")


# -- CLI ----------------------------------------------------------------------


def test_cli_unknown_subcommand_exits_one(capsys):
    assert cli_main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_flag_exits_one(capsys):
    assert cli_main(["train", "--config", "x.cfg", "--frob"]) == 1
    capsys.readouterr()


def test_cli_missing_config_exits_one(tmp_path, capsys):
    assert cli_main(["train", "--config",
                     str(tmp_path / "absent.cfg")]) == 1
    assert "absent.cfg" in capsys.readouterr().err


def test_cli_train_eval_round_trip(tmp_path, capsys):
    cfg = _tiny_config(variant="dann", seeds=(3,),
                       out_dir=str(tmp_path / "out"))
    path = _write_cfg(tmp_path, cfg)
    assert cli_main(["train", "--config", path]) == 0
    ckpt = str(tmp_path / "out" / "dann_seed3_model.ckpt")
    capsys.readouterr()
    assert cli_main(["eval", "--config", path, "--checkpoint", ckpt]) == 0
    doc = json.loads(capsys.readouterr().out)
    metrics = json.loads(
        (tmp_path / "out" / "dann_seed3_metrics.json").read_text())
    assert doc["target_accuracy"] == metrics["final_accuracy"]
    assert doc["confusion"] == metrics["final_confusion"]


def test_cli_export_and_plot(tmp_path, capsys):
    cfg = _tiny_config(variant="source_only", seeds=(0,),
                       out_dir=str(tmp_path / "out"), export_n=12)
    path = _write_cfg(tmp_path, cfg)
    assert cli_main(["train", "--config", path]) == 0
    ckpt = str(tmp_path / "out" / "source_only_seed0_model.ckpt")
    feats = str(tmp_path / "f.csv")
    svg = str(tmp_path / "f.svg")
    assert cli_main(["export-features", "--config", path,
                     "--checkpoint", ckpt, "--out", feats]) == 0
    assert cli_main(["plot", "--features", feats, "--out", svg]) == 0
    capsys.readouterr()
    xml.dom.minidom.parse(svg)


def test_cli_refine_writes_new_checkpoint(tmp_path, capsys):
    cfg = _tiny_config(variant="vada", seeds=(1,),
                       out_dir=str(tmp_path / "out"))
    path = _write_cfg(tmp_path, cfg)
    assert cli_main(["train", "--config", path]) == 0
    ckpt = str(tmp_path / "out" / "vada_seed1_model.ckpt")
    assert cli_main(["refine", "--config", path,
                     "--checkpoint", ckpt]) == 0
    capsys.readouterr()
    assert (tmp_path / "out" / "refined_seed1_metrics.json").exists()
    assert (tmp_path / "out" / "refined_seed1_model.ckpt").exists()


def test_cli_ablate_writes_tables(tmp_path, capsys):
    cfg = _tiny_config(seeds=(0, 1, 2, 3, 4),
                       ablate_variants=("source_only", "dann"),
                       out_dir=str(tmp_path / "out"))
    path = _write_cfg(tmp_path, cfg)
    assert cli_main(["ablate", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "source_only" in out and "dann" in out
    json.loads((tmp_path / "out" / "ablation.json").read_text())
    assert (tmp_path / "out" / "ablation.txt").exists()


def test_cli_plot_missing_features_exits_one(tmp_path, capsys):
    assert cli_main(["plot", "--features", str(tmp_path / "no.csv"),
                     "--out", str(tmp_path / "no.svg")]) == 1
    capsys.readouterr()


def test_cli_missing_data_csv_exits_one(tmp_path, capsys):
    cfg_text = "\n".join(
        ["data.family = csv"]
        + ["data.csv_%s = %s" % (k, tmp_path / ("%s.csv" % k))
           for k in ("source_x", "source_y", "target_x", "test_x", "test_y")]
        + ["run.variant = source_only", "run.seeds = 0",
           "run.out_dir = %s" % (tmp_path / "out")]) + "\n"
    path = tmp_path / "csv.cfg"
    path.write_text(cfg_text, encoding="utf-8")
    assert cli_main(["train", "--config", str(path)]) == 1
    assert "file error" in capsys.readouterr().err


def test_load_config_reports_bad_file(tmp_path):
    path = tmp_path / "broken.cfg"
    path.write_text("hyper.steps 40\n", encoding="utf-8")
    with pytest.raises(ContractError, match="line 1"):
        load_config(str(path))
