import json

import pytest
from click.testing import CliRunner

from cli import cli, load_stress_plugin
from utils.error_handler import ConfigError

STUDY_COLUMNS = 'level,h,kappa,err_max_l2,err_f_sq,newton_total,notes'


@pytest.fixture
def runner():
    return CliRunner()


class TestCheck:
    def test_canonical_linear_stress(self, runner, tmp_path):
        out = tmp_path / 'check.json'
        result = runner.invoke(cli, ['check', '--p', '2', '--samples', '500', '--out', str(out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert payload['pass'] is True
        assert payload['stress'] == 'canonical'
        lo, hi = payload['equivalence']['brackets']['r1']
        assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)
        assert 'young' not in payload

    def test_with_inequalities(self, runner, tmp_path):
        out = tmp_path / 'check.json'
        result = runner.invoke(cli, ['check', '--p', '1.5', '--delta', '0.01', '--samples', '200',
                                     '--inequalities', '--out', str(out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert set(payload['young']) == {'0.1', '1.0'}
        assert set(payload['shift_change']) == {'0.1', '1.0'}
        assert all(r['passed'] for r in payload['young'].values())
        assert all(r['passed'] for r in payload['shift_change'].values())

    def test_single_inequality_eps(self, runner, tmp_path):
        out = tmp_path / 'check.json'
        result = runner.invoke(cli, ['check', '--p', '1.2', '--samples', '200', '--inequalities',
                                     '--eps', '0.1', '--out', str(out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert list(payload['young']) == ['0.1']

    def test_nonpositive_inequality_eps(self, runner):
        result = runner.invoke(cli, ['check', '--samples', '200', '--inequalities', '--eps', '0'])
        assert result.exit_code == 64


    def test_bad_plugin_fails_check(self, runner, tmp_path, monkeypatch):
        (tmp_path / 'bad_stress.py').write_text("def negated(P):\n    return -P\n")
        monkeypatch.syspath_prepend(str(tmp_path))
        result = runner.invoke(cli, ['check', '--p', '1.5', '--samples', '200',
                                     '--stress-plugin', 'bad_stress:negated'])
        assert result.exit_code == 2

    def test_invalid_p(self, runner):
        result = runner.invoke(cli, ['check', '--p', '0.9'])
        assert result.exit_code == 64
        assert 'p must exceed 1' in result.output


@pytest.mark.parametrize("target", ['no_colon', 'math:', 'missing_module_xyz:fn', 'math:nope', 'math:pi'])
def test_plugin_resolution_errors(target):
    with pytest.raises(ConfigError):
        load_stress_plugin(target)


class TestStudy:
    ARGS = ['study', '--kind', 'temporal', '--workers', '1', '--base-n', '2', '--base-m', '4',
            '--levels', '3']

    def test_invalid_p_is_config_error(self, runner):
        result = runner.invoke(cli, ['study', '--p', '0.9'])
        assert result.exit_code == 64
        assert 'p must exceed 1' in result.output

    def test_coupling_violation(self, runner):
        result = runner.invoke(cli, ['study', '--sigma0', '1e-3', '--levels', '3'])
        assert result.exit_code == 64
        assert 'coupling' in result.output

    def test_temporal_study_outputs(self, runner, tmp_path):
        out = tmp_path / 'temporal.csv'
        result = runner.invoke(cli, self.ARGS + ['--out', str(out)])
        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == STUDY_COLUMNS
        assert len(lines) == 4
        sidecar = json.loads((tmp_path / 'temporal.json').read_text())
        assert set(sidecar) == {'config', 'slopes', 'seed', 'runtime_seconds', 'pass',
                                'monotone_decay', 'accepted_non_monotone', 'energy_bounds'}
        assert sidecar['pass'] is True
        assert sidecar['accepted_non_monotone'] is False
        assert sidecar['config']['kind'] == 'temporal'
        assert sidecar['config']['sigma0'] == 1.0

        again = tmp_path / 'again.csv'
        assert runner.invoke(cli, self.ARGS + ['--out', str(again)]).exit_code == 0
        assert again.read_bytes() == out.read_bytes()

    def test_json_format(self, runner, tmp_path):
        out = tmp_path / 'temporal.json'
        result = runner.invoke(cli, self.ARGS + ['--format', 'json', '--out', str(out)])
        assert result.exit_code == 0, result.output
        payload = json.loads(out.read_text())
        assert len(payload['table']['rows']) == 3
        assert 'total' in payload['slopes']

    def test_config_file(self, runner, tmp_path):
        config = tmp_path / 'study.cfg'
        config.write_text("# temporal refinement\nkind = temporal\nbase-n = 2\nlevels = 3\n")
        out = tmp_path / 'from_config.csv'
        result = runner.invoke(cli, ['study', '--config', str(config), '--workers', '1',
                                     '--out', str(out)])
        assert result.exit_code == 0, result.output
        sidecar = json.loads((tmp_path / 'from_config.json').read_text())
        assert sidecar['config']['kind'] == 'temporal'
        assert sidecar['config']['levels'] == 3

    @pytest.mark.parametrize("text", ["levels = many\n", "colour = blue\n", "levels\n"])
    def test_bad_config_file(self, runner, tmp_path, text):
        config = tmp_path / 'bad.cfg'
        config.write_text(text)
        result = runner.invoke(cli, ['study', '--config', str(config)])
        assert result.exit_code == 64


class TestInterp:
    def test_rates(self, runner, tmp_path):
        out = tmp_path / 'interp.csv'
        result = runner.invoke(cli, ['interp', '--levels', '4', '--out', str(out)])
        assert result.exit_code == 0, result.output
        assert out.read_text().splitlines()[0] == 'level,h,value,slope_to_prev'
        sidecar = json.loads((tmp_path / 'interp.json').read_text())
        assert sidecar['config']['j_max'] == 1
        assert sidecar['config']['predicted'] == 2.0

    def test_non_compact_embedding(self, runner):
        result = runner.invoke(cli, ['interp', '--ell', '1', '--q', '1', '--r', '2'])
        assert result.exit_code == 64

    def test_too_few_levels(self, runner):
        assert runner.invoke(cli, ['interp', '--levels', '1']).exit_code == 64
        result = runner.invoke(cli, ['interp', '--levels', '2'])
        assert result.exit_code == 64
        assert 'at least 3' in result.output


    def test_fmap_to_stdout(self, runner):
        result = runner.invoke(cli, ['interp', '--which', 'fmap', '--p', '1.5', '--delta', '0.001',
                                     '--levels', '4', '--format', 'json'])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.stdout)
        assert payload['config']['which'] == 'fmap'
        assert payload['pass'] is True


class TestMesh:
    def test_levels(self, runner):
        result = runner.invoke(cli, ['mesh', '--n', '2', '--levels', '3'])
        assert result.exit_code == 0, result.output
        levels = json.loads(result.stdout)['levels']
        assert [entry['cells'] for entry in levels] == [8, 32, 128]
        assert [entry['level'] for entry in levels] == [0, 1, 2]

    def test_config_file_and_override(self, runner, tmp_path):
        config = tmp_path / 'mesh.cfg'
        config.write_text("n = 2\n")
        from_file = json.loads(runner.invoke(cli, ['mesh', '--config', str(config)]).stdout)
        assert from_file['levels'][0]['vertices'] == 9
        override = json.loads(runner.invoke(cli, ['mesh', '--config', str(config), '--n', '3']).stdout)
        assert override['levels'][0]['vertices'] == 16

    def test_nonpositive_size(self, runner):
        assert runner.invoke(cli, ['mesh', '--n', '0']).exit_code == 64


class TestUsageErrors:
    @pytest.mark.parametrize("args", [
        ['study', '--bogus', '1'],
        ['study', '--kind', 'weird'],
        ['study', '--p', 'abc'],
        ['check', '--samples', 'many'],
        ['mesh', '--levels'],
        ['nosuchcommand'],
    ])
    def test_usage_error_exits_with_config_code(self, runner, args):
        result = runner.invoke(cli, args)
        assert result.exit_code == 64, result.output
        assert 'Usage:' in result.output

    def test_help_still_exits_ok(self, runner):
        result = runner.invoke(cli, ['study', '--help'])
        assert result.exit_code == 0
        assert '--kind' in result.output
        assert runner.invoke(cli, ['--help']).exit_code == 0
