import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import config
from errors import ConfigError, NotSubcritical, ParseError, TruncationTooCoarse
from experiment import default_tail, parse_config, run_acceptance, run_command
from io_utils import CheckResult, _format_check, format_acceptance_report, sha256_file
from main import main
from oracle import choose_cap


class TestBifieldSystem(unittest.TestCase):
    def setUp(self):
        """Set up a scratch directory and a small experiment"""
        self.workdir = Path(tempfile.mkdtemp())
        self.experiment = {
            'model': {'d': 1, 'kappa': 1.0, 'mu': 1.0, 'beta': [0.3], 'gamma': 0.1},
            'sim': {'torus_side': 8, 't_max': 1.0, 'record_times': [0.5, 1.0], 'replicates': 50},
            'hierarchy': {'torus_side': 8, 'k_max': 2, 'dt': 0.1},
            'output_dir': str(self.workdir / 'runs'),
            'seed': 3,
        }

    def tearDown(self):
        shutil.rmtree(self.workdir, ignore_errors=True)

    def write(self, payload, name='experiment.json'):
        path = self.workdir / name
        text = payload if isinstance(payload, str) else json.dumps(payload, indent=2)
        path.write_text(text, encoding='utf-8')
        return path

    def test_parse_config_resolves_defaults(self):
        """Test that omitted blocks fall back to defaults and the echo is written"""
        cfg = parse_config(self.write(self.experiment))
        self.assertAlmostEqual(cfg.validated.delta, 0.7)
        self.assertEqual(cfg.sim.sim.record_times, (0.5, 1.0))
        self.assertEqual(cfg.hierarchy.t_max, 1.0)
        self.assertEqual(cfg.oracle.torus_side, 3)
        self.assertEqual(cfg.resolved['model']['tail'], default_tail([0.3]))
        echo = json.loads((self.workdir / 'runs' / config.RESOLVED_CONFIG_NAME).read_text())
        self.assertAlmostEqual(echo['model']['derived']['delta'], 0.7)

    def test_default_tail(self):
        self.assertEqual(default_tail([0.3]), {'beta': 0.3 / 0.25, 'delta': 0.5})
        self.assertEqual(default_tail([]), {'beta': 1.0, 'delta': 0.5})

    def test_unknown_key_reports_field_and_line(self):
        text = json.dumps(self.experiment, indent=2).replace('"gamma"', '"gama"')
        with self.assertRaises(ParseError) as ctx:
            parse_config(self.write(text))
        self.assertEqual(ctx.exception.field, 'model.gama')
        self.assertIsNotNone(ctx.exception.line)

    def test_malformed_files(self):
        with self.assertRaises(ParseError) as ctx:
            parse_config(self.write('{\n  "seed": 1,\n}'))
        self.assertEqual(ctx.exception.line, 3)
        with self.assertRaises(ParseError):
            parse_config(self.write('{"seed": 1, "seed": 2}'))
        with self.assertRaises(ParseError):
            parse_config(self.write({'seed': 'zero'}))
        with self.assertRaises(ParseError):
            parse_config(self.workdir / 'missing.json')

    def test_consistency_checks(self):
        """Hierarchy horizon must cover the record times; replicates must be at least 2"""
        self.experiment['hierarchy']['t_max'] = 0.5
        with self.assertRaises(ParseError):
            parse_config(self.write(self.experiment))
        self.experiment['hierarchy']['t_max'] = 1.0
        self.experiment['sim']['replicates'] = 1
        with self.assertRaises(ParseError):
            parse_config(self.write(self.experiment))

    def test_overrides(self):
        path = self.write(self.experiment)
        cfg = parse_config(path, ['model.gamma=0.2', 'seed=9', 'kernel.radius=4'])
        self.assertEqual(cfg.model.gamma, 0.2)
        self.assertEqual(cfg.seed, 9)
        self.assertEqual(cfg.kernel.radius, 4)
        with self.assertRaises(NotSubcritical):
            parse_config(path, ['model.beta=[1.0]', 'model.tail={"beta": 10, "delta": 0.5}'])
        with self.assertRaises(ParseError):
            parse_config(path, ['no_equals_sign'])

    def test_cli_exit_codes(self):
        """Test the mapping from error families to process status"""
        path = self.write(self.experiment)
        self.assertEqual(main(['validate', str(path), '--quiet']), 0)
        self.assertEqual(main(['validate', str(path), '--model.mu=0.2']), 3)
        self.assertEqual(main(['validate', str(path), '--set', 'model.colour=1']), 2)
        self.assertEqual(main(['validate', str(path), 'stray']), 2)

    def test_simulate_writes_manifest(self):
        cfg = parse_config(self.write(self.experiment))
        self.assertEqual(run_command('simulate', cfg, progress=False), 0)
        out = self.workdir / 'runs' / 'simulate'
        manifest = json.loads((out / config.MANIFEST_NAME).read_text())
        self.assertEqual(manifest['seed'], 3)
        self.assertEqual(manifest['exit_code'], 0)
        listed = {entry['path']: entry['sha256'] for entry in manifest['files']}
        self.assertIn('ensemble.csv', listed)
        self.assertEqual(listed['histograms.csv'], sha256_file(out / 'histograms.csv'))
        header = (out / 'ensemble.csv').read_text().splitlines()[0]
        self.assertTrue(header.startswith('t,site,mean,variance,m1'))

    def test_simulation_is_reproducible(self):
        """Same seed gives byte-identical artifacts"""
        cfg = parse_config(self.write(self.experiment))
        run_command('simulate', cfg, progress=False)
        first = sha256_file(self.workdir / 'runs' / 'simulate' / 'ensemble.csv')
        run_command('simulate', cfg, progress=False)
        self.assertEqual(sha256_file(self.workdir / 'runs' / 'simulate' / 'ensemble.csv'), first)

    def test_moments_and_bounds_verbs(self):
        cfg = parse_config(self.write(self.experiment))
        self.assertEqual(run_command('moments', cfg, progress=False), 0)
        self.assertEqual(run_command('bounds', cfg, progress=False), 0)
        margins = json.loads((self.workdir / 'runs' / 'bounds' / 'margins.json').read_text())
        self.assertEqual(margins['violations'], [])

    def test_manifest_written_on_failure(self):
        """An oracle torus beyond the state budget still leaves a manifest with the failure status"""
        self.experiment['oracle'] = {'torus_side': 12, 'cap': 4}
        cfg = parse_config(self.write(self.experiment))
        with self.assertRaises(TruncationTooCoarse):
            run_command('oracle', cfg, progress=False)
        manifest = json.loads((self.workdir / 'runs' / 'oracle' / config.MANIFEST_NAME).read_text())
        self.assertEqual(manifest['exit_code'], 4)


    def test_cumulants_verb(self):
        """Steady-state cumulants on L and 2L land in cumulants.json with chi_1 at gamma/Delta"""
        self.experiment['cumulants'] = {'l_max': 2, 'tol': 1e-7, 'torus_side': 8, 'dt': 0.05}
        cfg = parse_config(self.write(self.experiment))
        self.assertEqual(run_command('cumulants', cfg, progress=False), 0)
        out = self.workdir / 'runs' / 'cumulants'
        manifest = json.loads((out / config.MANIFEST_NAME).read_text())
        self.assertEqual({entry['path'] for entry in manifest['files']}, {'cumulant_curve.csv', 'cumulants.json'})
        self.assertEqual((out / 'cumulant_curve.csv').read_text().splitlines()[0], 't,chi1,chi2')
        report = json.loads((out / 'cumulants.json').read_text())
        self.assertEqual(sorted(report['steady_state']), ['16', '8'])
        limit = 0.1 / 0.7
        self.assertAlmostEqual(report['first_cumulant_limit'], limit)
        for record in report['steady_state'].values():
            self.assertEqual(record['time'], 'infinity')
            self.assertAlmostEqual(record['values'][0], limit, delta=1e-5 * limit)
            self.assertGreater(record['values'][1], 0)
        self.assertEqual(len(report['finite_volume_delta']), 2)
        self.assertLess(abs(report['finite_volume_delta'][0]), 1e-5 * limit)

    def test_oracle_agreement_solves_once(self):
        """The master equation is solved once for both the fit and the negative control"""
        self.experiment['acceptance'] = {'oracle_replicates': 2000}
        cfg = parse_config(self.write(self.experiment), write_echo=False)
        with patch('experiment.choose_cap', wraps=choose_cap) as solver:
            results = run_acceptance(cfg, progress=False, only=[8])
        self.assertEqual([r.number for r in results], [8])
        self.assertEqual(solver.call_count, 1)
    def test_fast_acceptance_criteria(self):
        cfg = parse_config(self.write(self.experiment), write_echo=False)
        results = run_acceptance(cfg, progress=False, only=[4, 5])
        self.assertEqual([r.number for r in results], [4, 5])
        self.assertTrue(all(r.passed for r in results), [r.detail for r in results])

    def test_thread_cap(self):
        with patch.dict('os.environ', {'BIFIELD_THREADS': '3'}):
            self.assertEqual(config.get_thread_cap(), 3)
        with patch.dict('os.environ', {'BIFIELD_THREADS': 'many'}):
            with self.assertRaises(ConfigError):
                config.get_thread_cap()

    def test_check_formatting(self):
        """Test acceptance report formatting for output"""
        result = CheckResult(number=4, name='D_k recursion and growth', passed=True, detail='D_2(1/2) = 2',
                             seconds=0.34)
        formatted = _format_check(result)
        self.assertIn('D_k recursion', formatted)
        self.assertIn('✅', formatted)
        self.assertIn('(0.3s)', formatted)
        report = format_acceptance_report([result, CheckResult(5, 'Cumulant transforms', False, 'failed')])
        self.assertIn('1/2 criteria passed', report)
        self.assertIn('❌', report)


if __name__ == '__main__':
    unittest.main()
