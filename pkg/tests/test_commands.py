import json
import math

import numpy as np
import pytest

from dpsynth.commands import (
    RunConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_make_reference_data,
    cmd_preprocess,
    cmd_sweep_epsilon,
    cmd_train,
    resolve_dp,
    selection_metric,
    spearman,
)
from dpsynth.encoding import Table, load_matrix
from dpsynth.errors import ConfigError, RunError
from dpsynth.gan import GanConfig
from dpsynth.privacy import Accountant, DpConfig
from dpsynth.reference import (
    LabelMechanism,
    MixtureSpec,
    ReferenceDataSpec,
    default_spec,
    make_reference_data,
    sample_columns,
)
from dpsynth.schema import Schema

TINY_GAN = dict(
    noise_dim=8,
    gen_hidden=[8, 8, 8],
    critic_hidden=[8, 8, 8],
    batch_size=64,
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Reference data + preprocess artifacts shared by the command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cmd_make_reference_data(root / "data", seed=11, n_rows=900)
    prep = cmd_preprocess(
        root / "data" / "reference.csv", root / "data" / "schema.json", root / "prep", seed=11
    )
    return root, prep


# ---------------------------------------------------------------------------
# reference data


def test_reference_data_deterministic(tmp_path):
    a = cmd_make_reference_data(tmp_path / "a", seed=3, n_rows=300)
    b = cmd_make_reference_data(tmp_path / "b", seed=3, n_rows=300)
    assert open(a["csv"], "rb").read() == open(b["csv"], "rb").read()
    assert open(a["schema"], "rb").read() == open(b["schema"], "rb").read()
    c = cmd_make_reference_data(tmp_path / "c", seed=4, n_rows=300)
    assert open(a["csv"], "rb").read() != open(c["csv"], "rb").read()


def test_reference_bernoulli_concentration():
    spec = default_spec(20000)
    cols = sample_columns(spec, seed=5)
    for name, p in spec.bernoulli.items():
        assert abs(np.mean(cols[name]) - p) < 0.01, name
    for name, cats in spec.categorical.items():
        counts = np.bincount(cols[name], minlength=len(cats)) / spec.n_rows
        assert np.max(np.abs(counts - np.array(list(cats.values())))) < 0.015, name


def test_reference_null_label_mechanism_is_independent():
    spec = default_spec(20000)
    spec.label.coefficients = {k: 0.0 for k in spec.label.coefficients}
    spec.label.intercept = -0.4
    cols = sample_columns(spec, seed=6)
    y = cols[spec.label.name]
    assert abs(np.mean(y) - 1.0 / (1.0 + math.exp(0.4))) < 0.01
    # label carries no signal about any feature
    for name in spec.bernoulli:
        x = cols[name]
        gap = abs(np.mean(y[x == 1]) - np.mean(y[x == 0]))
        assert gap < 0.03, name


def test_reference_label_mechanism_matches_declared_logits():
    spec = default_spec(5000)
    cols = sample_columns(spec, seed=7)
    z = spec.label.logits(cols)
    # strong-signal rows should almost always carry their implied label
    sure_pos = z > 4.0
    if sure_pos.sum() > 20:
        assert np.mean(cols[spec.label.name][sure_pos]) > 0.95


def test_reference_year_split_fraction():
    spec = default_spec(1200)
    cols = sample_columns(spec, seed=8)
    years = np.bincount(cols["year"] - 2012)
    assert years.tolist() == [200] * 6


def test_reference_spec_validation():
    with pytest.raises(ConfigError):
        ReferenceDataSpec(n_rows=0, label=LabelMechanism("y", 0.0, {}))
    with pytest.raises(ConfigError):
        ReferenceDataSpec(bernoulli={"a": 1.5}, label=LabelMechanism("y", 0.0, {}))
    with pytest.raises(ConfigError):
        ReferenceDataSpec(
            categorical={"c": {"a": 0.6, "b": 0.6}}, label=LabelMechanism("y", 0.0, {})
        )
    with pytest.raises(ConfigError):
        MixtureSpec(weights=[0.5, 0.6], means=[0, 1], sigmas=[1, 1], lo=0, hi=1)
    with pytest.raises(ConfigError):
        MixtureSpec(weights=[1.0], means=[0], sigmas=[-1], lo=0, hi=1)
    with pytest.raises(ConfigError):
        # duplicate column name across blocks
        ReferenceDataSpec(
            bernoulli={"dup": 0.5},
            continuous={"dup": MixtureSpec([1.0], [0.0], [1.0], -1, 1)},
            label=LabelMechanism("y", 0.0, {}),
        )
    with pytest.raises(ConfigError):
        LabelMechanism("y", 0.0, {}, standardize={"age": (0.0, 1.0)})


def test_reference_spec_json_round_trip():
    spec = default_spec(500)
    again = ReferenceDataSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again.to_json() == spec.to_json()
    cols_a = sample_columns(spec, seed=9)
    cols_b = sample_columns(again, seed=9)
    for k in cols_a:
        assert np.array_equal(cols_a[k], cols_b[k])


def test_reference_schema_shape():
    spec = default_spec(100)
    schema = spec.schema()
    assert schema.split_column == "year"
    assert schema.label_feature.name == "outcome"
    assert schema.feature("age").count is True
    # 10 bernoulli + (3+5+7+12) one-hot + 2*(5+1) continuous + label
    assert schema.encoded_width == 10 + 27 + 12 + 1


def test_make_reference_data_custom_spec_file(tmp_path):
    spec = default_spec(120)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_json()))
    out = cmd_make_reference_data(tmp_path / "custom", seed=1, spec_path=path)
    assert len(Table.read_csv(out["csv"])) == 120


# ---------------------------------------------------------------------------
# preprocess


def test_preprocess_outputs(pipeline):
    root, prep = pipeline
    assert prep["rows_train"] == 750 and prep["rows_test"] == 150
    matrix = load_matrix(prep["paths"]["matrix"])
    assert matrix.shape == (750, prep["encoded_width"])
    fitted = Schema.load(prep["paths"]["schema"])
    assert fitted.feature("age").gmm is not None
    # encoded matrix lives in [0, 1]
    assert matrix.min() >= 0.0 and matrix.max() <= 1.0
    # the split column holds only the last year in the test csv
    test_table = Table.read_csv(prep["paths"]["test_csv"])
    assert set(test_table.column("year")) == {"2017"}


def test_preprocess_idempotent(pipeline, tmp_path):
    root, prep = pipeline
    again = cmd_preprocess(
        root / "data" / "reference.csv", root / "data" / "schema.json", tmp_path / "p2", seed=11
    )
    for key in ("matrix", "schema", "train_csv"):
        assert (
            open(prep["paths"][key], "rb").read() == open(again["paths"][key], "rb").read()
        ), key


def test_preprocess_missing_artifact(tmp_path):
    with pytest.raises(FileNotFoundError):
        cmd_preprocess(tmp_path / "nope.csv", tmp_path / "nope.json", tmp_path / "out", seed=0)


# ---------------------------------------------------------------------------
# train / generate


def run_config(pipeline_prep, out, **overrides):
    width = load_matrix(pipeline_prep["paths"]["matrix"]).shape[1]
    gan = GanConfig(out_width=width, variant=overrides.pop("variant", "wgan_gp"), **TINY_GAN)
    defaults = dict(
        data_matrix=pipeline_prep["paths"]["matrix"],
        schema=pipeline_prep["paths"]["schema"],
        out_dir=str(out),
        seed=13,
        epochs=2,
        gan=gan,
        validation_rows=400,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def test_train_checkpoints_and_selection(pipeline, tmp_path):
    root, prep = pipeline
    manifest = cmd_train(run_config(prep, tmp_path / "run"))
    assert manifest["epochs_run"] == 2
    ckpts = [r["checkpoint"] for r in manifest["epochs"]]
    assert all(open(c, "rb").read(8) == b"DPSCKPT1" for c in ckpts)
    sel = manifest["selected"]
    assert sel["checkpoint"] in ckpts
    metrics = [r["selection_metric"] for r in manifest["epochs"]]
    assert sel["selection_metric"] == min(metrics)
    selected_file = json.load(open(tmp_path / "run" / "selected.json"))
    assert selected_file == sel


def test_train_is_deterministic(pipeline, tmp_path):
    root, prep = pipeline
    m1 = cmd_train(run_config(prep, tmp_path / "r1"))
    m2 = cmd_train(run_config(prep, tmp_path / "r2"))
    c1 = open(m1["selected"]["checkpoint"], "rb").read()
    c2 = open(m2["selected"]["checkpoint"], "rb").read()
    assert c1 == c2
    assert m1["epochs"][0]["selection_metric"] == m2["epochs"][0]["selection_metric"]


def test_train_width_mismatch(pipeline, tmp_path):
    root, prep = pipeline
    cfg = run_config(prep, tmp_path / "bad")
    cfg.gan = GanConfig(out_width=7, variant="wgan_gp", **TINY_GAN)
    with pytest.raises(ConfigError):
        cmd_train(cfg)


def test_dp_requires_wgan_gp_unless_overridden(pipeline, tmp_path):
    root, prep = pipeline
    dp = DpConfig(epsilon=5.0, noise_multiplier=2.0)
    with pytest.raises(ConfigError):
        run_config(prep, tmp_path / "x", variant="vanilla", dp=dp)
    cfg = run_config(prep, tmp_path / "x", variant="vanilla", dp=dp, allow_dp_any_variant=True)
    assert cfg.gan.variant == "vanilla"


def test_train_budget_exhausted_first_epoch(pipeline, tmp_path):
    root, prep = pipeline
    # epsilon so small the very first accounted step overshoots it
    dp = DpConfig(epsilon=0.05, noise_multiplier=1.5, clip_norm=1.0)
    cfg = run_config(prep, tmp_path / "dpfail", dp=dp)
    with pytest.raises(RunError) as err:
        cmd_train(cfg)
    assert "before the first epoch" in str(err.value)
    dump = json.load(open(tmp_path / "dpfail" / "accountant_dump.json"))
    assert dump["steps"] >= 1


def test_train_dp_calibration_and_privacy_log(pipeline, tmp_path):
    root, prep = pipeline
    dp = DpConfig(epsilon=3.0, noise_multiplier=0.0, clip_norm=1.0)  # 0 -> calibrate
    manifest = cmd_train(run_config(prep, tmp_path / "dprun", dp=dp))
    sigma = manifest["config"]["dp"]["noise_multiplier"]
    assert sigma > 0.3
    assert manifest["budget_stopped"] is False
    from dpsynth.privacy import PrivacyLog

    rows = PrivacyLog.read(tmp_path / "dprun" / "privacy_log.csv")
    assert len(rows) == manifest["critic_steps"]
    eps = [float(r["epsilon"]) for r in rows]
    assert eps == sorted(eps) and eps[-1] <= 3.0
    acct = Accountant.from_json(manifest["accountant"])
    assert acct.epsilon_at(1e-5) == pytest.approx(eps[-1])


def test_generate_rows_and_header(pipeline, tmp_path):
    root, prep = pipeline
    manifest = cmd_train(run_config(prep, tmp_path / "g"))
    out = cmd_generate(
        manifest["selected"]["checkpoint"], prep["paths"]["schema"], tmp_path / "synth.csv", 123, seed=13
    )
    table = Table.read_csv(out)
    schema = Schema.load(prep["paths"]["schema"])
    assert len(table) == 123
    assert table.columns == [f.name for f in schema.features]
    again = cmd_generate(
        manifest["selected"]["checkpoint"], prep["paths"]["schema"], tmp_path / "synth2.csv", 123, seed=13
    )
    assert open(out, "rb").read() == open(again, "rb").read()


def test_selection_metric_mixes_discrete_divergences(pipeline):
    root, prep = pipeline
    schema = Schema.load(prep["paths"]["schema"])
    x = load_matrix(prep["paths"]["matrix"])
    assert selection_metric(x, x, schema) == 0.0
    flipped = x.copy()
    col = schema.block_slices()["sex"].start
    flipped[:, col] = 1.0 - flipped[:, col]
    assert selection_metric(x, flipped, schema) > 0.0


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_real_vs_real_is_zero(pipeline, tmp_path):
    root, prep = pipeline
    res = cmd_evaluate(
        prep["paths"]["train_csv"],
        prep["paths"]["test_csv"],
        prep["paths"]["train_csv"],
        prep["paths"]["schema"],
        tmp_path / "rr",
        seed=13,
        reps=1,
    )
    fid = res["fidelity"]
    assert fid["bernoulli_divergence"] == 0.0
    assert fid["categorical_divergence"] == 0.0
    assert fid["frobenius_divergence"] == 0.0
    assert fid["category_sum_deviation"] == 0.0


def test_evaluate_outputs_and_subpopulations(pipeline, tmp_path):
    root, prep = pipeline
    manifest = cmd_train(run_config(prep, tmp_path / "t"))
    synth = cmd_generate(
        manifest["selected"]["checkpoint"], prep["paths"]["schema"], tmp_path / "s.csv", 750, seed=13
    )
    res = cmd_evaluate(
        prep["paths"]["train_csv"],
        prep["paths"]["test_csv"],
        synth,
        prep["paths"]["schema"],
        tmp_path / "ev",
        seed=13,
        reps=2,
    )
    for f in ("fidelity.json", "utility.json", "subpopulation.json", "pca.csv", "report.txt"):
        assert (tmp_path / "ev" / f).exists(), f
    assert len(res["utility_synthetic"]["auroc"]["reps"]) == 2
    sub = res["subpopulation"]
    assert set(sub) == {"female", "male", "age_0_18", "age_19_50", "age_51_plus"}
    present = [m for m in sub.values() if m is not None]
    assert sum(m["n"] for m in present if m) >= 150  # both partitions cover the test rows
    lines = (tmp_path / "ev" / "pca.csv").read_text().splitlines()
    assert lines[0] == "dataset_label,pc1,pc2"


# ---------------------------------------------------------------------------
# sweep


def test_sweep_epsilon_runs_and_summarizes(pipeline, tmp_path):
    root, prep = pipeline
    summary = cmd_sweep_epsilon(
        prep["paths"]["matrix"],
        prep["paths"]["schema"],
        prep["paths"]["test_csv"],
        tmp_path / "sweep",
        seed=13,
        epochs=1,
        epsilons=(4.0, math.inf),
        n_seeds=1,
        gan_kwargs=TINY_GAN,
        synth_rows=300,
    )
    assert summary["epsilons"] == ["4", "inf"]
    assert set(summary["mean_auroc"]) == {"4", "inf"}
    lines = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    scatter = (tmp_path / "sweep" / "bernoulli_scatter.csv").read_text().splitlines()
    assert len(scatter) == 1 + 2 * 11  # 10 bernoulli features + label, per leg
    # the inf leg trained without any privacy machinery
    inf_manifest = json.load(open(tmp_path / "sweep" / "seed_13" / "eps_inf" / "manifest.json"))
    assert "dp" not in inf_manifest["config"]
    assert inf_manifest["accountant"] is None


def test_sweep_failure_preserves_partials(pipeline, tmp_path):
    root, prep = pipeline
    with pytest.raises(RunError) as err:
        cmd_sweep_epsilon(
            prep["paths"]["matrix"],
            prep["paths"]["schema"],
            prep["paths"]["test_csv"],
            tmp_path / "sw2",
            seed=13,
            epochs=1,
            # below the accountant's delta-conversion floor: uncalibratable
            epsilons=(math.inf, 0.01),
            n_seeds=1,
            gan_kwargs=TINY_GAN,
            synth_rows=200,
        )
    assert "partial results" in str(err.value)
    lines = (tmp_path / "sw2" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2  # header + the completed inf leg


# ---------------------------------------------------------------------------
# helpers


def test_spearman_basics():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    # monotone in rank despite nonlinear scale
    assert spearman([1, 10, 100, 1000], [0.1, 0.2, 0.3, 0.31]) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        spearman([1, 1, 1], [1, 2, 3])


def test_resolve_dp_calibration():
    dp = DpConfig(epsilon=2.0, delta=1e-5, noise_multiplier=0.0)
    solved = resolve_dp(dp, q=0.02, planned_steps=200)
    acct = Accountant()
    acct.record(q=0.02, sigma=solved.noise_multiplier, steps=200)
    assert acct.epsilon_at(1e-5) <= 2.0
    # explicitly chosen multipliers pass through untouched
    dp2 = DpConfig(epsilon=2.0, noise_multiplier=1.7)
    assert resolve_dp(dp2, q=0.02, planned_steps=200).noise_multiplier == 1.7
    with pytest.raises(ConfigError):
        resolve_dp(DpConfig(epsilon=math.inf, noise_multiplier=0.0), 0.02, 10)


def test_run_config_hash_tracks_fields(pipeline):
    root, prep = pipeline
    a = run_config(prep, "out")
    b = run_config(prep, "out")
    assert a.config_hash() == b.config_hash()
    c = run_config(prep, "out", seed=99)
    assert a.config_hash() != c.config_hash()
    with pytest.raises(ConfigError):
        run_config(prep, "out", epochs=0)
