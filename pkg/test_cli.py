"""
CLI tests
Exit codes, output tables and instance directories through lowramp.cli.main
"""
import csv
import io
import json

import numpy as np
import pytest

from lowramp.cli import EXIT_CONFIG, EXIT_OK, main
from lowramp.cli.commands import COMPARE_COLUMNS, format_value, natural_symmetry, render_rows
from lowramp.cli.parser import parse_args, parse_grid, read_config_file
from lowramp.models import AmpVariant, PriorSpec, Symmetry
from lowramp.validation import ConfigError

GEN_ARGS = ['--prior', 'gaussian', '--channel', 'gaussian', '--delta', '0.2', '--n', '40', '--seed', '5']


@pytest.fixture(autouse=True)
def testing_profile(monkeypatch):
    monkeypatch.setenv('LOWRAMP_ENV', 'testing')


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestExitCodes:

    def test_missing_rho(self, tmp_path, capsys):
        code = main(['gen', '--prior', 'gauss_bernoulli', '--channel', 'gaussian', '--delta', '0.1',
                     '--n', '20', '-o', str(tmp_path / 'inst')])
        assert code == EXIT_CONFIG
        assert 'rho' in capsys.readouterr().err

    def test_empty_grid(self, capsys):
        code = main(['se', '--prior', 'gaussian', '--channel', 'gaussian', '--delta', '0.5', '--delta-grid', ','])
        assert code == EXIT_CONFIG
        assert 'delta_grid' in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(['fit']) == EXIT_CONFIG

    def test_missing_instance_directory(self, tmp_path):
        assert main(['amp', '--instance', str(tmp_path / 'absent')]) == EXIT_CONFIG


class TestGen:

    def test_same_seed_same_meta(self, tmp_path):
        first, second = tmp_path / 'a', tmp_path / 'b'
        assert main(['gen', *GEN_ARGS, '-o', str(first)]) == EXIT_OK
        assert main(['gen', *GEN_ARGS, '-o', str(second)]) == EXIT_OK
        assert (first / 'meta.json').read_bytes() == (second / 'meta.json').read_bytes()
        assert (first / 'Y.bin').read_bytes() == (second / 'Y.bin').read_bytes()

    def test_default_output_directory(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(['gen', *GEN_ARGS]) == EXIT_OK
        assert (tmp_path / 'instances' / 'gaussian_5' / 'meta.json').is_file()

    @pytest.mark.slow
    def test_documented_example_without_output(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code = main(['gen', '--prior', 'gauss_bernoulli_joint', '--rho', '0.1', '--channel', 'gaussian',
                     '--delta', '0.005', '--n', '20000', '--seed', '7'])
        assert code == EXIT_OK
        meta = json.loads((tmp_path / 'instances' / 'gauss_bernoulli_joint_7' / 'meta.json').read_text())
        assert meta['y_sha256']

    def test_amp_on_saved_instance(self, tmp_path):
        instance, out = tmp_path / 'inst', tmp_path / 'run'
        assert main(['gen', *GEN_ARGS, '-o', str(instance)]) == EXIT_OK
        assert main(['amp', '--instance', str(instance), '--max-iters', '50', '-o', str(out)]) == EXIT_OK
        rows = _csv((out / 'trace.csv').read_text())
        assert list(rows[0]) == ['t', 'conv', 'mse', 'free_energy']
        assert np.fromfile(out / 'x_hat.bin', dtype='<f8').size == 40


class TestTables:

    def test_phase_scan_columns(self, capsys):
        assert main(['phase-scan', '--model', 'gauss_bernoulli', '--rho-grid', '0.1,0.5']) == EXIT_OK
        text = capsys.readouterr().out
        assert text.splitlines()[0] == 'rho,delta_c,delta_alg,delta_it,delta_dyn'
        rows = _csv(text)
        assert float(rows[0]['delta_it']) == pytest.approx(0.0153, abs=2e-4)
        assert rows[1]['delta_it'] == ''
        assert float(rows[1]['delta_c']) == pytest.approx(0.25)

    def test_phase_scan_rescaled(self, capsys):
        assert main(['phase-scan', '--model', 'gauss_bernoulli', '--rho-grid', '0.5', '--rescale', 'rho2']) == EXIT_OK
        assert float(_csv(capsys.readouterr().out)[0]['delta_c']) == pytest.approx(1.0)

    def test_se_json(self, capsys):
        code = main(['se', '--prior', 'gaussian', '--channel', 'gaussian', '--delta', '0.5',
                     '--delta-grid', '0.25,0.5', '--format', 'json'])
        assert code == EXIT_OK
        rows = json.loads(capsys.readouterr().out)
        assert [row['delta'] for row in rows] == [0.25, 0.5]
        for row in rows:
            assert row['mse_informative'] == pytest.approx(row['delta'], abs=1e-6)
            assert row['mse_uninformative'] == pytest.approx(row['delta'], abs=1e-6)

    def test_se_config_file_and_override(self, tmp_path, capsys):
        path = tmp_path / 'se.cfg'
        path.write_text("# gaussian estimation\nprior = gaussian\nchannel=gaussian\ndelta = 0.4\n"
                        "delta-grid = 0.4\n")
        assert main(['se', '--config', str(path), '--delta-grid', '0.3']) == EXIT_OK
        row = _csv(capsys.readouterr().out)[0]
        assert float(row['delta']) == pytest.approx(0.3)
        assert float(row['mse_informative']) == pytest.approx(0.3, abs=1e-6)

    def test_compare(self, capsys):
        code = main(['compare', '--prior', 'gaussian', '--n', '1000', '--delta-grid', '0.3',
                     '--max-iters', '300', '--seed', '2'])
        assert code == EXIT_OK
        row = _csv(capsys.readouterr().out)[0]
        assert list(row) == COMPARE_COLUMNS
        assert float(row['mse_se_informative']) == pytest.approx(0.3, abs=1e-6)
        assert float(row['mse_se_uninformative']) == pytest.approx(0.3, abs=1e-6)
        assert float(row['mse_pca']) == pytest.approx(0.3, abs=1e-6)
        for label in ('uninformative', 'informative'):
            assert float(row[f'mse_amp_{label}']) == pytest.approx(float(row[f'mse_se_{label}']), abs=0.05)

    def test_compare_aligns_random_init_with_the_sign_symmetry(self, capsys):
        code = main(['compare', '--prior', 'rademacher_bernoulli', '--rho', '0.5', '--n', '400',
                     '--delta-grid', '0.05', '--max-iters', '300', '--seed', '3'])
        assert code == EXIT_OK
        row = _csv(capsys.readouterr().out)[0]
        uninformative = float(row['mse_amp_uninformative'])
        # an estimate converging to -x0 would score about 4 <x^2> = 2 without alignment
        assert uninformative < 0.25
        assert uninformative == pytest.approx(float(row['mse_se_uninformative']), abs=0.05)

    def test_natural_symmetry(self):
        assert natural_symmetry(PriorSpec.rademacher_bernoulli(0.2)) is Symmetry.SIGN
        assert natural_symmetry(PriorSpec.bernoulli(0.2)) is Symmetry.NONE
        assert natural_symmetry(PriorSpec.community(3)) is Symmetry.PERMUTATION

    def test_spectral(self, capsys):
        assert main(['spectral', *GEN_ARGS[:-4], '--n', '300']) == EXIT_OK
        rows = _csv(capsys.readouterr().out)
        assert [row['matrix'] for row in rows] == ['S', 'Y']
        assert float(rows[0]['overlap']) == pytest.approx(0.8, abs=0.1)
        assert float(rows[0]['predicted_overlap']) == pytest.approx(0.8, abs=1e-6)


class TestHelpers:

    def test_format_value(self):
        assert format_value(None) == ''
        assert format_value(float('nan')) == ''
        assert format_value(True) == 'true'
        assert format_value(1 / 3) == '0.333333333333'
        assert format_value(7) == '7'

    def test_render_json_drops_nan(self):
        rows = json.loads(render_rows([{'a': float('nan'), 'b': 2.0}], ['a', 'b'], 'json'))
        assert rows == [{'a': None, 'b': 2.0}]

    def test_parse_grid(self):
        assert parse_grid('log:1e-3:1e-1:3', 'g') == pytest.approx((1e-3, 1e-2, 1e-1))
        assert parse_grid('lin:1:2:3', 'g') == pytest.approx((1.0, 1.5, 2.0))
        with pytest.raises(ConfigError):
            parse_grid('log:a:b:3', 'g')
        with pytest.raises(ConfigError):
            parse_grid(None, 'g')

    def test_read_config_file(self, tmp_path):
        path = tmp_path / 'bad.cfg'
        path.write_text('prior gaussian\n')
        with pytest.raises(ConfigError):
            read_config_file(path)

    @pytest.mark.parametrize('name,variant', [
        ('full', AmpVariant.FULL),
        ('self-averaged', AmpVariant.SELF_AVERAGED),
        ('bayes', AmpVariant.BAYES_OPTIMAL),
        ('bayes_optimal', AmpVariant.BAYES_OPTIMAL),
    ])
    def test_variant_spellings(self, tmp_path, name, variant):
        cfg = parse_args(['amp', '--instance', str(tmp_path), '--variant', name])
        assert cfg.amp.variant is variant

    def test_unknown_variant(self, tmp_path):
        with pytest.raises(SystemExit):
            parse_args(['amp', '--instance', str(tmp_path), '--variant', 'self_avg'])
