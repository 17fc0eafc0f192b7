"""Multistage training: loss semantics, stage freezing, abort paths and
the end-to-end efficacy contract against the solver package."""

import copy
import subprocess

import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from jcddsim import gf2code, modem, tuner
from jcddsim import jcdd_gaussian as jg

from trainer_autodiff import codes, dataset, tables
from trainer_autodiff.stacks import DifferentiableLayerStack, beamspace_dft
from trainer_autodiff.training import (TrainSettings, evaluate_loss,
                                       frames_to_tensors, train_multistage,
                                       unfolded_loss)

from conftest import JCDDSIM


def _stack_g(alist, records, l_max):
    poly = codes.build_parity_polytope(codes.load_alist(alist))
    return DifferentiableLayerStack("jcddnet-g", l_max, poly, 2,
                                    dataset.common_sigma2(records))


def _settings_g(l_max, **kw):
    base = dict(network="jcddnet-g", l_max=l_max, l_part=2, batch_size=40,
                epochs=10, lr=0.01, seed=5)
    base.update(kw)
    return TrainSettings(**base)


def test_unfolded_loss_matches_solver_tuner():
    rng = np.random.default_rng(13)
    traj_np = [rng.uniform(0, 1, size=24) for _ in range(5)]
    bits = rng.integers(0, 2, size=24)
    for window in ((1, 5), (2, 4), (3, 3), (4, 8)):
        ref = tuner.unfolded_loss(traj_np, bits, 150.0, window)
        ours = unfolded_loss([torch.as_tensor(t) for t in traj_np],
                             torch.as_tensor(bits, dtype=torch.float64),
                             150.0, window).item()
        assert ours == pytest.approx(ref, rel=1e-12), window


def test_unfolded_loss_batch_mean():
    traj = [torch.zeros((4, 6), dtype=torch.float64)]
    bits = torch.zeros((4, 6), dtype=torch.float64)
    one = unfolded_loss([traj[0][:1]], bits[:1], 200.0, (1, 1)).item()
    four = unfolded_loss(traj, bits, 200.0, (1, 1)).item()
    assert four == pytest.approx(one)
    with pytest.raises(ValueError, match="bad layer window"):
        unfolded_loss(traj, bits, 200.0, (2, 1))
    with pytest.raises(ValueError, match="empty trajectory"):
        unfolded_loss([], bits, 200.0, (1, 1))


def test_stage_windows():
    assert _settings_g(4).stages == [(1, 2), (3, 4)]
    assert TrainSettings(network="jcddnet-g", l_max=5,
                         l_part=2).stages == [(1, 2), (3, 4), (5, 5)]
    assert TrainSettings(network="jcddnet-g", l_max=3,
                         l_part=20).stages == [(1, 3)]
    with pytest.raises(ValueError, match="unknown network"):
        TrainSettings(network="x", l_max=4)
    with pytest.raises(ValueError):
        TrainSettings(network="jcddnet-g", l_max=0)
    with pytest.raises(ValueError):
        TrainSettings(network="jcddnet-g", l_max=4, lr=0.0)


def test_training_reduces_holdout_loss_and_bler(alist96, ds_train, ds_fresh,
                                                tmp_path):
    """Acceptance: strictly positive holdout loss reduction over the default
    table on the N=96 setup, and no BLER degradation at the training SNR
    when the exported table drives the solver package (paired one-sided
    test)."""
    _, records = dataset.load_dataset(ds_train)
    train, hold = records[:120], records[120:]
    l_max = 4
    stack = _stack_g(alist96, records, l_max)
    init = tables.default_columns("jcddnet-g", l_max)
    result = train_multistage(stack, train, _settings_g(l_max), init=init,
                              holdout=hold)
    assert not result.aborted
    assert result.table["provenance"] == "trained"

    hold_t = frames_to_tensors(hold)
    loss_default = evaluate_loss(stack, hold_t, init)
    loss_trained = evaluate_loss(stack, hold_t, result.columns)
    assert loss_trained < loss_default

    # the exported file must pass the solver package's own validation
    table_path = tmp_path / "trained_g.json"
    tables.export_table(result.table, table_path)
    proc = subprocess.run([JCDDSIM, "validate-table", "--params",
                           str(table_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr

    # drive the solver with the trained table on fresh frames, paired
    # against the default table at the training SNR
    ref_code = gf2code.load_alist(alist96)
    ref_poly = gf2code.build_parity_polytope(ref_code)
    spec = modem.constellation("qpsk")
    p_def = tuner.to_layer_params(tuner.default_table("jcddnet-g", l_max))
    p_tr = tuner.to_layer_params(tuner.import_table(table_path))
    _, fresh = dataset.load_dataset(ds_fresh)
    n01 = n10 = 0
    for rec in fresh:
        args = (rec["y"], rec["s_p"], ref_code, ref_poly, 1.0, rec["sigma2"],
                spec)
        bits = np.asarray(rec["bits"], dtype=np.uint8)
        err_def = not np.array_equal(
            jg.solve(*args, params=p_def, max_iter=l_max).bits, bits)
        err_tr = not np.array_equal(
            jg.solve(*args, params=p_tr, max_iter=l_max).bits, bits)
        n01 += err_def and not err_tr
        n10 += err_tr and not err_def
    if n01 + n10:
        p_worse = binomtest(n10, n01 + n10, 0.5,
                            alternative="greater").pvalue
        assert p_worse > 0.05, (n01, n10)


def test_stage_freeze_is_bit_identical(alist96, ds_train):
    """Stage 2 must not move stage-1 layers at all."""
    _, records = dataset.load_dataset(ds_train)
    stack = _stack_g(alist96, records[:80], 4)
    init = tables.default_columns("jcddnet-g", 4)
    result = train_multistage(stack, records[:80],
                              _settings_g(4, epochs=4, batch_size=20),
                              init=init)
    assert not result.aborted
    assert len(result.stage_columns) == 2
    after_stage1 = result.stage_columns[0]
    for name in tables.PARAM_NAMES["jcddnet-g"]:
        assert np.array_equal(after_stage1[name][:2], result.columns[name][:2]), name
        # and stage 1 left the later layers at their warm start
        assert np.array_equal(after_stage1[name][2:],
                              np.asarray(init[name], dtype=float)[2:]), name
    # stage 2 actually trained something
    moved = any(not np.array_equal(after_stage1[name][2:],
                                   result.columns[name][2:])
                for name in tables.PARAM_NAMES["jcddnet-g"])
    assert moved


def test_nan_frames_abort_with_initial_checkpoint(alist96, ds_g):
    _, records = dataset.load_dataset(ds_g)
    poisoned = [dict(rec) for rec in records]
    for rec in poisoned:
        rec["y"] = np.full_like(rec["y"], np.nan)
    stack = _stack_g(alist96, records, 2)
    init = tables.default_columns("jcddnet-g", 2)
    result = train_multistage(stack, poisoned,
                              _settings_g(2, epochs=3, batch_size=4),
                              init=init)
    assert result.aborted
    # the NaN surfaces either as a non-finite loss or inside the layer's
    # factorization; both take the abort path in the first epoch
    assert "stage 1 epoch 1" in result.abort_reason
    for name in tables.PARAM_NAMES["jcddnet-g"]:
        assert np.array_equal(result.columns[name],
                              np.asarray(init[name], dtype=float)), name
    # the checkpoint table still exports and validates
    tables.validate_table(result.table)


def test_infeasible_sweep_aborts_with_last_good(alist96, ds_g):
    _, records = dataset.load_dataset(ds_g)
    stack = _stack_g(alist96, records, 2)
    init = tables.default_columns("jcddnet-g", 2)
    init["alpha"] = np.full(2, 1e9)
    result = train_multistage(stack, records,
                              _settings_g(2, epochs=2, batch_size=4),
                              init=init)
    assert result.aborted
    assert "non-positive bit-update denominator" in result.abort_reason
    assert "stage 1 epoch 1" in result.abort_reason
    for name in tables.PARAM_NAMES["jcddnet-g"]:
        assert np.array_equal(result.columns[name],
                              np.asarray(init[name], dtype=float)), name


def test_abort_mid_run_restores_last_clean_epoch(alist96, ds_g):
    """An explosion after a clean epoch rolls back to that epoch, not to
    the warm start. Full batches with an absurd learning rate detonate
    deterministically: epoch 1 steps from the feasible defaults, epoch 2
    then sweeps with the exploded alpha and hits the infeasibility guard."""
    _, records = dataset.load_dataset(ds_g)
    stack = _stack_g(alist96, records, 2)
    init = tables.default_columns("jcddnet-g", 2)

    bad = train_multistage(stack, records,
                           _settings_g(2, epochs=4, batch_size=99, lr=50.0),
                           init=init)
    assert bad.aborted
    assert "stage 1 epoch 2" in bad.abort_reason
    assert "non-positive bit-update denominator" in bad.abort_reason

    ref = train_multistage(stack, records,
                           _settings_g(2, epochs=1, batch_size=99, lr=50.0),
                           init=init)
    assert not ref.aborted
    for name in tables.PARAM_NAMES["jcddnet-g"]:
        assert np.array_equal(bad.columns[name], ref.columns[name]), name
    moved = any(not np.array_equal(bad.columns[n],
                                   np.asarray(init[n], dtype=float))
                for n in tables.PARAM_NAMES["jcddnet-g"])
    assert moved


def test_log_space_positivity_under_aggressive_steps(alist96, ds_g):
    _, records = dataset.load_dataset(ds_g)
    stack = _stack_g(alist96, records, 2)
    init = tables.default_columns("jcddnet-g", 2)
    init["mu"] = np.full(2, 1e-3)
    result = train_multistage(stack, records,
                              _settings_g(2, epochs=8, batch_size=4, lr=0.5),
                              init=init)
    assert not result.aborted
    for name in tables.STRICT_POSITIVE["jcddnet-g"]:
        assert np.all(result.columns[name] > 0), name
    tables.validate_table(result.table)


def test_rejects_nonpositive_warm_start_for_log_names(alist96, ds_g):
    _, records = dataset.load_dataset(ds_g)
    stack = _stack_g(alist96, records, 2)
    init = tables.default_columns("jcddnet-g", 2)
    init["alpha"] = np.zeros(2)
    with pytest.raises(ValueError, match="positive warm start"):
        train_multistage(stack, records, _settings_g(2, epochs=1), init=init)


def test_train_input_validation(alist96, ds_g):
    _, records = dataset.load_dataset(ds_g)
    stack = _stack_g(alist96, records, 2)
    good = tables.default_columns("jcddnet-g", 2)
    with pytest.raises(ValueError, match="init"):
        train_multistage(stack, records, _settings_g(2))
    with pytest.raises(ValueError, match="length 2"):
        train_multistage(stack, records, _settings_g(2),
                         init=tables.default_columns("jcddnet-g", 3))
    with pytest.raises(ValueError, match="l_max"):
        train_multistage(stack, records, _settings_g(3), init=good)
    s_settings = TrainSettings(network="jcddnet-s", l_max=2)
    with pytest.raises(ValueError, match="does not match stack"):
        train_multistage(stack, records, s_settings, init=good)


def test_sparse_training_runs_and_exports(alist96, ds_train_s, tmp_path):
    _, records = dataset.load_dataset(ds_train_s)
    poly = codes.build_parity_polytope(codes.load_alist(alist96))
    f_r = beamspace_dft(4, 2)
    f_t = beamspace_dft(2, 2)
    stack = DifferentiableLayerStack("jcddnet-s", 4, poly, 2,
                                     dataset.common_sigma2(records),
                                     f_r=f_r, f_t=f_t)
    tau = tables.DEFAULT_TAU_SCALE * tables.default_tau(records[0]["s_p"], f_t)
    init = tables.default_columns("jcddnet-s", 4, tau=tau)
    settings = TrainSettings(network="jcddnet-s", l_max=4, l_part=2,
                             batch_size=30, epochs=6, lr=0.01, seed=7)
    train, hold = records[:60], records[60:]
    result = train_multistage(stack, train, settings, init=init, holdout=hold)
    assert not result.aborted
    hold_t = frames_to_tensors(hold)
    assert evaluate_loss(stack, hold_t, result.columns) <= \
        evaluate_loss(stack, hold_t, init)
    for name in tables.STRICT_POSITIVE["jcddnet-s"]:
        assert np.all(result.columns[name] > 0), name
    table_path = tmp_path / "trained_s.json"
    tables.export_table(result.table, table_path)
    proc = subprocess.run([JCDDSIM, "validate-table", "--params",
                           str(table_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_holdout_history_uses_cumulative_window(alist96, ds_train):
    _, records = dataset.load_dataset(ds_train)
    stack = _stack_g(alist96, records[:60], 4)
    init = tables.default_columns("jcddnet-g", 4)
    result = train_multistage(stack, records[:40],
                              _settings_g(4, epochs=2, batch_size=20),
                              init=init, holdout=records[40:60])
    assert [h["stage"] for h in result.history] == [1, 2]
    assert [h["window"] for h in result.history] == [(1, 2), (3, 4)]
    hold_t = frames_to_tensors(records[40:60])
    expect = evaluate_loss(stack, hold_t, result.columns, window=(1, 4))
    assert result.history[1]["holdout_loss"] == pytest.approx(expect)
    assert len(result.history[0]["epoch_losses"]) == 2
