import numpy as np
import pytest

from mfm import driver, flow, targets
from mfm.driver import MfmConfig
from mfm.errors import DimensionMismatch
from mfm.kernels import MalaConfig


def smoke_config(**kw):
    defaults = dict(iters=6, particles=8, k_q=3, hidden=8, seed=0,
                    diag_samples=32, ode=flow.OdeConfig(n_steps=4))
    defaults.update(kw)
    return MfmConfig(**defaults)


def test_flow_iteration_branch_arithmetic():
    k_q = 10
    fired = [k for k in range(1, 101) if driver.is_flow_iteration(k, k_q)]
    assert len(fired) == 100 // k_q
    assert fired[0] == 9 and fired[-1] == 99
    # k_q = 1: every iteration is a flow step
    assert all(driver.is_flow_iteration(k, 1) for k in range(1, 20))


def test_smoke_run_completes_and_logs():
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    art = driver.run_mfm(base, target, smoke_config(iters=1, particles=1))
    assert len(art.log_rows) == 1
    assert art.ensemble.positions.shape == (1, 2)
    assert np.all(np.isfinite(flow.flow_to_vector(art.flow_params)))


def test_run_mfm_deterministic():
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    a = driver.run_mfm(base, target, smoke_config(iters=10))
    b = driver.run_mfm(base, target, smoke_config(iters=10))
    assert np.array_equal(a.ensemble.positions, b.ensemble.positions)
    assert np.array_equal(flow.flow_to_vector(a.flow_params),
                          flow.flow_to_vector(b.flow_params))
    assert a.log_rows == b.log_rows


def test_tempering_disabled_keeps_beta_one():
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    art = driver.run_mfm(base, target, smoke_config(temper=False, iters=5))
    assert all(row["beta"] == 1.0 for row in art.log_rows)
    assert art.ensemble.temper.history == []


def test_beta_monotone_and_fresh_each_iteration():
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    art = driver.run_mfm(base, target, smoke_config(iters=30, particles=64))
    betas = [row["beta"] for row in art.log_rows]
    assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:]))
    hist = art.ensemble.temper.history
    assert all(b2 > b1 for b1, b2 in zip(hist, hist[1:]))


def test_mixed_kernels_accounting():
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    cfg = smoke_config(iters=9, k_q=3, particles=4)
    art = driver.run_mfm(base, target, cfg)
    # flow fires at k = 2, 5, 8 -> 3 of 9 iterations
    assert art.ensemble.flow_proposed == 3 * 4
    assert art.ensemble.local_proposed == 6 * 4
    assert len(art.log_rows) == 9


@pytest.mark.parametrize("kernel", ["imh", "cis"])
def test_alternative_nonlocal_kernels_run(kernel):
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    art = driver.run_mfm(base, target,
                         smoke_config(nonlocal_kernel=kernel, iters=6, k_q=2))
    assert np.all(np.isfinite(art.ensemble.positions))


def test_dim_mismatch_rejected():
    with pytest.raises(DimensionMismatch):
        driver.run_mfm(targets.standard_normal(3), targets.make_gmm4(),
                       smoke_config())


def test_init_override_controls_start():
    base = targets.standard_normal(2)
    target = targets.make_gmm16(0)
    cfg = smoke_config(iters=1, particles=16, init_mean=np.array([-14.0, -14.0]),
                       init_scale=0.5, k_q=100)
    art = driver.run_mfm(base, target, cfg)
    # after one MALA step at beta_1 the particles are still near the init blob
    assert np.all(np.abs(art.ensemble.positions - (-14.0)) < 5.0)


# -- AT-SMC baseline -----------------------------------------------------------------

def test_atsmc_identical_base_and_target_single_jump(rng):
    std = targets.standard_normal(2)
    cfg = smoke_config(iters=1, particles=32, k_q=2, mala=MalaConfig(0.5))
    ens, rows = driver.run_atsmc(std, std, cfg)
    assert ens.temper.history == [1.0]
    # one resampling level plus the final sweep
    assert len(rows) == 2
    assert np.all(np.isfinite(ens.positions))


def test_atsmc_moments_1d():
    target = targets.standard_normal(1)
    base = targets.gaussian(np.zeros(1), 3.0)
    cfg = MfmConfig(iters=1, particles=4096, k_q=20, mala=MalaConfig(0.5),
                    seed=3, hidden=8, diag_samples=16)
    ens, rows = driver.run_atsmc(base, target, cfg)
    assert abs(ens.positions.var() - 1.0) <= 0.1
    betas = [r["beta"] for r in rows]
    increasing = [b for b in betas if b < 1.0] + [1.0]
    assert all(b2 > b1 for b1, b2 in zip(increasing, increasing[1:]))
    assert betas[-1] == 1.0


def test_atsmc_weights_match_ess_solve(rng):
    # the incremental weights the resampler uses are exactly the ESS weights
    from mfm import tempering
    base = targets.standard_normal(2)
    target = targets.make_gmm4()
    x = rng.standard_normal((64, 2))
    lr = target.log_density(x) - base.log_density(x)
    state = tempering.next_beta(lr, tempering.TemperState(0.0, 0.5))
    log_w = (state.beta - 0.0) * lr
    w = np.exp(log_w - log_w.max())
    ess = (w.sum() ** 2) / (64 * (w ** 2).sum())
    assert ess == pytest.approx(tempering.ess_fraction(lr, 0.0, state.beta),
                                rel=1e-12)


# -- FM oracle ------------------------------------------------------------------------

def test_fm_oracle_requires_sampler():
    spec = targets.LgcpSpec(m_side=4)
    lgcp = targets.make_lgcp(spec, targets.synthetic_lgcp_counts(spec, seed=0))
    with pytest.raises(ValueError):
        driver.run_fm_oracle(lgcp, smoke_config())


def test_fm_oracle_smoke_gmm4():
    art = driver.run_fm_oracle(targets.make_gmm4(), smoke_config(iters=5))
    assert len(art.log_rows) == 5
    assert np.all(np.isfinite(flow.flow_to_vector(art.flow_params)))


def test_diagnose_flow_reproducible():
    target = targets.make_gmm4()
    cfg = smoke_config(iters=3)
    art = driver.run_mfm(targets.standard_normal(2), target, cfg)
    r1 = driver.diagnose_flow(art.flow_params, target, cfg)
    r2 = driver.diagnose_flow(art.flow_params, target, cfg)
    assert r1.mmd2_unbiased == r2.mmd2_unbiased
    assert r1.ksd_u == r2.ksd_u
    assert r1.mean_logpi == r2.mean_logpi
