import math

import numpy as np
import pytest

from core import harness
from core.harness import (
    PROFILES, TABLE_COLUMNS, BochnerReport, StudyConfig, TimeProfile, bochner_check,
    coupling_holds, level_plan, run_level, run_study
)
from core.rates import fit_rates
from core.stepper import TimeGrid
from core.structure import StructureParams
from utils.error_handler import ConfigError
from utils.process_pool import LevelPool


class TestStudyConfig:
    def test_defaults(self):
        cfg = StudyConfig(params=StructureParams(p=2.0))
        assert cfg.kind == 'coupled'
        assert cfg.mms == 'trig'
        assert cfg.levels == 4

    def test_mms_default_follows_kind(self):
        assert StudyConfig(StructureParams(p=2.0), kind='temporal').mms == 'affine'

    @pytest.mark.parametrize("overrides", [
        {'kind': 'adaptive'},
        {'mms': 'gaussian'},
        {'levels': 2},
        {'base_n': 0},
        {'final_time': 0.0},
        {'sigma0': -1.0},
        {'tol': 0.0},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            StudyConfig(params=StructureParams(p=2.0), **overrides)

    def test_to_dict(self):
        payload = StudyConfig(StructureParams(p=1.5, delta=0.1)).to_dict()
        assert payload['params'] == {'p': 1.5, 'delta': 0.1, 'epsilon': 0.0}


class TestLevelPlan:
    def test_linear_coupled(self):
        plans, sigma0 = level_plan(StudyConfig(StructureParams(p=2.0)))
        assert [pl.M for pl in plans] == [4, 8, 16, 32]
        assert [pl.n for pl in plans] == [4, 8, 16, 32]
        assert sigma0 == 1.0

    def test_subquadratic_coupled(self):
        plans, sigma0 = level_plan(StudyConfig(StructureParams(p=1.5, delta=1e-4)))
        assert [pl.M for pl in plans] == [4 * 2 ** k for k in range(4)]
        for pl in plans:
            assert coupling_holds(pl.h, pl.kappa, 1.5, sigma0)

    def test_coupling_violation(self):
        with pytest.raises(ConfigError) as info:
            level_plan(StudyConfig(StructureParams(p=2.0), sigma0=1e-3))
        assert info.value.code == 'CFG_002'

    def test_temporal_keeps_mesh_fixed(self):
        cfg = StudyConfig(StructureParams(p=2.0), kind='temporal', base_n=2, levels=3)
        plans, _ = level_plan(cfg)
        assert {pl.n for pl in plans} == {8}
        assert [pl.M for pl in plans] == [4, 8, 16]

    def test_spatial_keeps_steps_fixed(self):
        cfg = StudyConfig(StructureParams(p=2.0), kind='spatial', base_n=2, levels=3)
        plans, sigma0 = level_plan(cfg)
        assert [pl.n for pl in plans] == [2, 4, 8]
        assert {pl.M for pl in plans} == {32}
        assert sigma0 == pytest.approx(max(pl.h ** 2 / pl.kappa for pl in plans))

    def test_coupling_formula(self):
        # h^(4/p') with p' = 2 for p = 2
        assert coupling_holds(0.5, 0.25, 2.0, 1.0)
        assert not coupling_holds(0.5, 0.2, 2.0, 1.0)


class TestStudies:
    def test_run_level_row(self):
        cfg = StudyConfig(StructureParams(p=2.0), base_n=2, levels=3)
        plans, _ = level_plan(cfg)
        row = run_level(cfg, plans[0])
        assert set(TABLE_COLUMNS) <= set(row)
        assert row['notes'] == f"n={plans[0].n};M={plans[0].M}"
        assert row['newton_total'] == plans[0].M
        assert row['err_max_l2'] > 0 and row['err_f_sq'] > 0

    def test_run_level_notes_regularized_steps(self, indefinite_tangent):
        cfg = StudyConfig(StructureParams(p=2.0), base_n=2, levels=3)
        plans, _ = level_plan(cfg)
        row = run_level(cfg, plans[0])
        assert row['notes'].startswith(f"n={plans[0].n};M={plans[0].M};regularized=")
        assert 1 <= int(row['notes'].rsplit('=', 1)[1]) <= plans[0].M

    def test_non_monotone_acceptance_is_recorded(self, monkeypatch):
        errors = [1.0, 0.1, 0.2]

        def fake_level(cfg, plan):
            return {'level': plan.level, 'h': plan.h, 'kappa': plan.kappa,
                    'err_max_l2': errors[plan.level], 'err_f_sq': 0.0, 'newton_total': 1,
                    'notes': '', 'energy_bound': 1.0, 'seconds': 0.0}

        monkeypatch.setattr(harness, 'run_level', fake_level)
        table = run_study(StudyConfig(StructureParams(p=2.0), levels=3), pool=LevelPool(1))
        assert table.meta['passed']
        assert not table.meta['monotone_decay']
        assert table.meta['accepted_non_monotone']

    def test_small_coupled_study(self):
        cfg = StudyConfig(StructureParams(p=2.0), levels=3)
        table = run_study(cfg, pool=LevelPool(1))
        assert len(table) == 3
        assert list(table.frame.columns) == TABLE_COLUMNS
        assert list(table.column('newton_total')) == [4, 8, 16]
        assert table.meta['axis'] == 'kappa'
        assert table.meta['monotone_decay']
        assert set(table.slopes) == {'err_max_l2', 'err_f', 'total'}
        assert len(table.meta['energy_bounds']) == 3

    def test_temporal_affine_study(self):
        cfg = StudyConfig(StructureParams(p=2.0), kind='temporal', base_n=2, levels=3)
        table = run_study(cfg, pool=LevelPool(1))
        assert table.meta['passed']
        assert table.meta['monotone_decay']
        assert not table.meta['accepted_non_monotone']
        assert table.slopes['total'].slope >= 0.85
        np.testing.assert_allclose(table.column('h'), math.sqrt(2.0) / 8)

    @pytest.mark.slow
    @pytest.mark.parametrize("p,delta", [(2.0, 0.0), (1.5, 1e-4), (1.5, 1.0)])
    def test_coupled_acceptance(self, p, delta):
        table = run_study(StudyConfig(StructureParams(p=p, delta=delta)), pool=LevelPool(1))
        assert table.meta['passed'], table.to_dict()['slopes']
        assert table.meta['monotone_decay']
        bounds = table.meta['energy_bounds']
        assert abs(bounds[-1] - bounds[-2]) <= 0.1 * bounds[-2]

    @pytest.mark.slow
    @pytest.mark.parametrize("p,delta", [(2.0, 0.0), (1.5, 1e-4), (1.5, 1.0)])
    def test_spatial_acceptance(self, p, delta):
        cfg = StudyConfig(StructureParams(p=p, delta=delta), kind='spatial')
        assert cfg.levels == 4
        table = run_study(cfg, pool=LevelPool(1))
        assert len(table) == 4
        assert table.meta['axis'] == 'h'
        assert table.meta['passed'], table.to_dict()['slopes']


class TestBochner:
    def test_constant_profile(self):
        report = bochner_check('constant', TimeGrid(1.0, 8))
        assert report.lhs1 == pytest.approx(0.0, abs=1e-14)
        assert report.lhs2 == pytest.approx(0.0, abs=1e-14)
        assert report.rhs == 0.0
        assert report.passed

    @pytest.mark.parametrize("M", [4, 16, 64])
    def test_linear_profile_closed_form(self, M):
        report = bochner_check('linear', TimeGrid(1.0, M))
        kappa = 1.0 / M
        assert report.rhs == pytest.approx(5.25 * kappa ** 2)
        assert report.lhs1 == pytest.approx(5.25 * kappa ** 2 / 6)
        assert report.lhs2 == pytest.approx(5.25 * kappa ** 2 / 3)

    @pytest.mark.parametrize("name", ['linear', 'sine', 'mms'])
    @pytest.mark.parametrize("M", [4, 16, 64])
    def test_averages_bounded(self, name, M):
        report = bochner_check(name, TimeGrid(1.0, M))
        assert report.passed, report.to_dict()

    @pytest.mark.parametrize("name", ['linear', 'sine'])
    def test_second_order_in_kappa(self, name):
        kappas, lhs = [], []
        for M in (4, 8, 16, 32, 64):
            report = bochner_check(name, TimeGrid(1.0, M))
            kappas.append(report.kappa)
            lhs.append(report.lhs2)
        assert fit_rates(kappas, lhs).slope == pytest.approx(2.0, abs=0.1)

    def test_custom_profile(self):
        profile = TimeProfile('quadratic', lambda t: t * t, lambda t: 2 * t)
        report = bochner_check(profile, TimeGrid(2.0, 10), norm='l2', mesh_n=4)
        assert report.passed
        assert isinstance(report, BochnerReport)
        assert report.to_dict()['passed']

    def test_unknown_profile_and_norm(self):
        with pytest.raises(ConfigError):
            bochner_check('cosine', TimeGrid(1.0, 4))
        with pytest.raises(ConfigError):
            bochner_check(PROFILES['linear'], TimeGrid(1.0, 4), norm='h1')
