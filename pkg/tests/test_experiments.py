import math

import numpy as np
import pytest

from ssmgen import experiments as ex
from ssmgen.initialization import InitConfig, init_hippo
from ssmgen.ssm import SSMLayerParams
from ssmgen.train import METRIC_COLUMNS


def tiny_plan(**kw):
    base = dict(b_values=(1.0, 0.1), arms=("baseline", "rescale_only"), repeats=2, length=16, m=4,
                epochs=3, n_train=10, n_test=20, lengths=(1, 4, 16))
    base.update(kw)
    return ex.ExperimentPlan(**base)


def scalar_layer():
    return SSMLayerParams.full([[-1.0]], [1.0], [[1.0]], [0.01])


# golden headers: changing any of these is a schema change
GOLDEN = {
    "matrix": "schema_version,config_hash,b,arm,repeat,data_seed,init_seed,status,train_mse,test_mse,psi_sq_over_sqrt_n",
    "summary": "schema_version,config_hash,b,arm,n_ok,n_diverged,train_mse_mean,train_mse_stderr,"
               "test_mse_mean,test_mse_stderr,psi_sq_over_sqrt_n_mean,psi_sq_over_sqrt_n_stderr",
    "prop1": "schema_version,config_hash,variant,b,length,mean_abs_output",
    "padding": "schema_version,horizon,pad,left,right",
    "report": "schema_version,arm,b,n_ok,n_diverged,train_mse_mean,train_mse_stderr,"
              "test_mse_mean,test_mse_stderr,psi_sq_over_sqrt_n_mean,psi_sq_over_sqrt_n_stderr",
    "metrics": "epoch,train_mse,test_mse,tau_total,grad_norm,lr",
}


def test_golden_headers():
    assert ",".join(ex.MATRIX_COLUMNS) == GOLDEN["matrix"]
    assert ",".join(ex.SUMMARY_COLUMNS) == GOLDEN["summary"]
    assert ",".join(ex.PROP1_COLUMNS) == GOLDEN["prop1"]
    assert ",".join(ex.PADDING_COLUMNS) == GOLDEN["padding"]
    assert ",".join(ex.REPORT_COLUMNS) == GOLDEN["report"]
    assert ",".join(METRIC_COLUMNS) == GOLDEN["metrics"]
    assert ex.SCHEMA_VERSION == 1


def test_plan_defaults_and_validation():
    plan = ex.ExperimentPlan()
    assert (plan.length, plan.m, plan.epochs) == (128, 16, 50)
    assert ex.ExperimentPlan(profile="paper").length == 1000
    assert plan.lengths[0] == 1 and plan.lengths[-1] == 1000
    assert plan.config_hash() == ex.ExperimentPlan().config_hash()
    assert plan.config_hash() != ex.ExperimentPlan(seed=1).config_hash()
    for bad in (dict(profile="huge"), dict(arms=("magic",)), dict(repeats=0), dict(b_values=(0.0,)),
                dict(lengths=(0,)), dict(n_train=1)):
        with pytest.raises(ValueError):
            ex.ExperimentPlan(**bad)


def test_seed_table_shares_data_across_arms_and_init_across_b():
    plan = tiny_plan()
    rows = ex.run_matrix(plan).rows
    by = {(r["b"], r["arm"], r["repeat"]): r for r in rows}
    assert by[(1.0, "baseline", 0)]["data_seed"] == by[(1.0, "rescale_only", 0)]["data_seed"]
    assert by[(1.0, "baseline", 0)]["data_seed"] != by[(0.1, "baseline", 0)]["data_seed"]
    assert by[(1.0, "baseline", 0)]["init_seed"] == by[(0.1, "baseline", 0)]["init_seed"]
    assert by[(1.0, "baseline", 0)]["init_seed"] != by[(1.0, "baseline", 1)]["init_seed"]


def test_matrix_outputs_and_determinism(tmp_path):
    plan = tiny_plan()
    a = ex.run_matrix(plan, tmp_path / "a")
    ex.run_matrix(plan, tmp_path / "b", workers=2)
    assert len(a.rows) == 2 * 2 * 2 and len(a.summary) == 4
    for name in ("matrix.csv", "summary.csv", "matrix.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "matrix.csv").read_text().splitlines()
    assert lines[0] == GOLDEN["matrix"]
    assert all(plan.config_hash() in line for line in lines[1:])


def test_single_repeat_has_zero_stderr():
    res = ex.run_matrix(tiny_plan(repeats=1, arms=("baseline",)))
    for row in res.summary:
        assert row["test_mse_stderr"] == 0.0 and row["n_ok"] == 1


def test_divergence_is_recorded_per_cell(monkeypatch):
    from ssmgen.train import TrainingDiverged

    real_train = ex.train

    def flaky(train_ds, test_ds, config, model, out_dir=None):
        if config.lambda_reg == 0.0 and train_ds.spec.b == 0.1:
            raise TrainingDiverged("diverged at epoch 1", None)
        return real_train(train_ds, test_ds, config, model, out_dir)

    monkeypatch.setattr(ex, "train", flaky)
    res = ex.run_matrix(tiny_plan(repeats=1))
    assert res.n_diverged == 2
    cell = res.cell(0.1, "baseline")
    assert cell["n_diverged"] == 1 and cell["n_ok"] == 0 and math.isnan(cell["test_mse_mean"])
    assert res.cell(1.0, "baseline")["n_ok"] == 1


def test_prop1_sweep_rows(tmp_path):
    plan = tiny_plan(repeats=1)
    rows = ex.prop1_sweep(plan, tmp_path)
    assert len(rows) == 2 * 2 * 3
    assert all(np.isfinite(r["mean_abs_output"]) and r["mean_abs_output"] > 0 for r in rows)
    assert ex.prop1_spread(rows, "rescaled", 1) >= 1.0
    assert (tmp_path / "prop1.csv").read_text().splitlines()[0] == GOLDEN["prop1"]
    with pytest.raises(KeyError):
        ex.prop1_spread(rows, "rescaled", 999)


def test_prop1_single_prefix_matches_direct_rescale():
    # the profile shortcut equals rescaling a length-L model separately
    from ssmgen.initialization import rescale_all_layers
    from ssmgen.seqgen import ProcessSpec, sample_batch
    from ssmgen.ssm import forward

    plan = tiny_plan(repeats=1, b_values=(0.1,), lengths=(5, 16))
    rows = ex.prop1_sweep(plan)
    train_seed, test_seed, init_seed = ex._seed_table(plan, 0, 0)
    for L in (5, 16):
        fit = sample_batch(ProcessSpec(length=16, b=0.1, seed=train_seed), plan.n_train).inputs[:, :L]
        ev = sample_batch(ProcessSpec(length=16, b=0.1, seed=test_seed), plan.n_test).inputs[:, :L]
        model, _ = rescale_all_layers(init_hippo(InitConfig(kind=plan.kind, m=plan.m, seed=init_seed)), fit)
        ref = np.mean(np.abs(forward(model[0], ev)[:, -1, 0]))
        got = [r for r in rows if r["variant"] == "rescaled" and r["length"] == L][0]["mean_abs_output"]
        assert got == pytest.approx(ref, rel=1e-9)


def test_padding_demo_scalar(tmp_path):
    rows = ex.padding_demo(scalar_layer(), [5, 10, 20, 40], horizon=10.0, out_dir=tmp_path)
    assert len(rows) == 4
    rights = [r["right"] for r in rows]
    assert all(a > b for a, b in zip(rights, rights[1:]))
    assert len({r["left"] for r in rows}) == 1
    assert (tmp_path / "padding.csv").read_text().splitlines()[0] == GOLDEN["padding"]


def test_transfer_factor_one_is_exact():
    (p,) = init_hippo(InitConfig(m=4, seed=0))
    rep = ex.transfer_demo(p, factor=1, step=1e-2, horizon=2.0)
    assert rep.output_deviation == 0.0 and rep.measure_deviation == 0.0
    with pytest.raises(ValueError):
        ex.transfer_demo(p, factor=0)


def test_transfer_scalar_coarse(tmp_path):
    rep = ex.transfer_demo(scalar_layer(), factor=2, step=1e-2, horizon=3.0, out_dir=tmp_path)
    assert rep.output_deviation < 1e-3
    assert rep.measure_deviation < 1e-6
    assert (tmp_path / "transfer.json").exists()


def test_report_table_and_markdown(tmp_path):
    plan = tiny_plan(repeats=1)
    ex.run_matrix(plan, tmp_path / "run")
    rows = ex.read_csv(tmp_path / "run" / "matrix.csv")
    table = ex.report_table(rows + rows)
    assert len(table) == 4
    assert all(r["n_ok"] == 2 for r in table)
    md = ex.report_markdown(table)
    assert "| baseline |" in md and "b=0.1" in md


def test_json_writer_maps_nan_to_null(tmp_path):
    path = ex.write_json(tmp_path / "x.json", {"a": math.nan, "b": np.float64(1.5), "c": np.arange(2)})
    assert path.read_text() == '{\n "a": null,\n "b": 1.5,\n "c": [\n  0,\n  1\n ]\n}\n'
