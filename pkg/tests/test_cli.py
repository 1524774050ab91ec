import json
import struct

import pytest
from click.testing import CliRunner

import engine.trainer as trainer
from app import cli
from utils.constants import LOSS_KINDS


def invoke(*args):
    return CliRunner().invoke(cli, ['--log-level', 'ERROR', *[str(a) for a in args]])


@pytest.fixture
def corpus_file(tmp_path, tiny_run_config_file):
    path = tmp_path / 'corpus.json'
    result = invoke('gen', '--config', tiny_run_config_file, '--out', path)
    assert result.exit_code == 0, result.output
    return path


@pytest.fixture
def trained(tmp_path, tiny_run_config_file, corpus_file):
    out = tmp_path / 'run-a'
    result = invoke('train', '--config', tiny_run_config_file, '--corpus', corpus_file, '--out-dir', out)
    assert result.exit_code == 0, result.output
    return out


def write_config(tmp_path, base_file, **sections):
    data = json.loads(base_file.read_text())
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    path = tmp_path / 'custom.json'
    path.write_text(json.dumps(data))
    return path


class TestGen:
    def test_summary(self, tmp_path, tiny_run_config_file):
        out = tmp_path / 'corpus.json'
        result = invoke('gen', '--config', tiny_run_config_file, '--out', out)
        assert result.exit_code == 0, result.output
        assert 'streams: 40' in result.output
        assert 'held_out_streams: 10' in result.output
        assert json.loads(out.read_text())['format'] == 'milnce-corpus'

    def test_identical_bytes_on_rerun(self, tmp_path, tiny_run_config_file):
        a, b = tmp_path / 'a.json', tmp_path / 'b.json'
        invoke('gen', '--config', tiny_run_config_file, '--out', a)
        invoke('gen', '--config', tiny_run_config_file, '--out', b)
        assert a.read_bytes() == b.read_bytes()

    def test_clean_corpus(self, tmp_path, tiny_run_config_file):
        config = write_config(tmp_path, tiny_run_config_file, gen={'p_aligned': 1.0})
        result = invoke('gen', '--config', config, '--out', tmp_path / 'c.json')
        assert result.exit_code == 0, result.output
        assert 'misaligned_fraction: 0.0000' in result.output

    def test_seed_flag_overrides(self, tmp_path, tiny_run_config_file):
        a, b = tmp_path / 'a.json', tmp_path / 'b.json'
        invoke('gen', '--config', tiny_run_config_file, '--out', a)
        invoke('gen', '--config', tiny_run_config_file, '--out', b, '--seed', 99)
        assert json.loads(b.read_text())['config']['seed'] == 99
        assert a.read_bytes() != b.read_bytes()

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / 'bad.json'
        bad.write_text('{\n  "seed": 1,\n  "gen": {\n')
        result = invoke('gen', '--config', bad, '--out', tmp_path / 'c.json')
        assert result.exit_code == 2
        assert 'line' in result.output

    def test_unknown_key(self, tmp_path, tiny_run_config_file):
        config = write_config(tmp_path, tiny_run_config_file, gen={'colour': 'red'})
        result = invoke('gen', '--config', config, '--out', tmp_path / 'c.json')
        assert result.exit_code == 2
        assert 'colour' in result.output

    def test_invalid_value(self, tmp_path, tiny_run_config_file):
        config = write_config(tmp_path, tiny_run_config_file, gen={'p_aligned': 2.0})
        assert invoke('gen', '--config', config, '--out', tmp_path / 'c.json').exit_code == 2

    @pytest.mark.parametrize('sections', [
        {'gen': {'p_aligned': 'half'}},
        {'gen': {'num_streams': 40.5}},
        {'train': {'log_wall_time': 'yes'}},
        {'eval': {'ks': [1, 'five']}},
    ])
    def test_wrong_type(self, tmp_path, tiny_run_config_file, sections):
        config = write_config(tmp_path, tiny_run_config_file, **sections)
        result = invoke('gen', '--config', config, '--out', tmp_path / 'c.json')
        assert result.exit_code == 2
        assert 'must be' in result.output

    @pytest.mark.parametrize('train', [{'batch_size': 31}, {'K': 9}])
    def test_train_config_larger_than_corpus(self, tmp_path, tiny_run_config_file, train):
        config = write_config(tmp_path, tiny_run_config_file, train=train)
        assert invoke('gen', '--config', config, '--out', tmp_path / 'c.json').exit_code == 2


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / 'checkpoint.bin').read_bytes()[:8] == b'MILNCE\x00\x01'
        lines = (trained / 'metrics.jsonl').read_text().splitlines()
        assert 'config' in json.loads(lines[0])
        assert [json.loads(line)['step'] for line in lines[1:]] == [0, 4, 8, 11]

    def test_identical_bytes_on_rerun(self, tmp_path, tiny_run_config_file, corpus_file, trained):
        other = tmp_path / 'run-b'
        result = invoke('train', '--config', tiny_run_config_file, '--corpus', corpus_file, '--out-dir', other)
        assert result.exit_code == 0, result.output
        for name in ('checkpoint.bin', 'metrics.jsonl'):
            assert (trained / name).read_bytes() == (other / name).read_bytes()

    def test_zero_steps(self, tmp_path, tiny_run_config_file, corpus_file):
        config = write_config(tmp_path, tiny_run_config_file, train={'total_steps': 0})
        out = tmp_path / 'zero'
        result = invoke('train', '--config', config, '--corpus', corpus_file, '--out-dir', out)
        assert result.exit_code == 0, result.output
        assert len((out / 'metrics.jsonl').read_text().splitlines()) == 1

    def test_intermediate_checkpoints_and_resume(self, tmp_path, tiny_run_config_file, corpus_file, trained):
        config = write_config(tmp_path, tiny_run_config_file, train={'checkpoint_every': 6})
        out = tmp_path / 'ckpt'
        assert invoke('train', '--config', config, '--corpus', corpus_file, '--out-dir', out).exit_code == 0
        assert (out / 'checkpoint-step6.bin').exists()
        resumed = tmp_path / 'resumed'
        result = invoke('train', '--config', config, '--corpus', corpus_file, '--out-dir', resumed,
                        '--resume', out / 'checkpoint-step6.bin')
        assert result.exit_code == 0, result.output
        assert (resumed / 'checkpoint.bin').read_bytes() == (out / 'checkpoint.bin').read_bytes()

    def test_numeric_abort(self, tmp_path, tiny_run_config_file, corpus_file, monkeypatch):
        real = trainer.batch_loss_and_grads

        def poisoned(*args, **kwargs):
            batch, grads = real(*args, **kwargs)
            batch.loss = float('nan')
            return batch, grads

        monkeypatch.setattr(trainer, 'batch_loss_and_grads', poisoned)
        result = invoke('train', '--config', tiny_run_config_file, '--corpus', corpus_file,
                        '--out-dir', tmp_path / 'nan')
        assert result.exit_code == 3
        assert 'step 0' in result.output

    def test_wrong_corpus_version(self, tmp_path, tiny_run_config_file, corpus_file):
        data = json.loads(corpus_file.read_text())
        data['version'] = 99
        bad = tmp_path / 'old.json'
        bad.write_text(json.dumps(data))
        result = invoke('train', '--config', tiny_run_config_file, '--corpus', bad, '--out-dir', tmp_path / 'x')
        assert result.exit_code == 5

    def test_batch_larger_than_loaded_corpus(self, tmp_path, tiny_run_config_file, corpus_file):
        config = write_config(tmp_path, tiny_run_config_file, gen={'num_streams': 200}, train={'batch_size': 31})
        result = invoke('train', '--config', config, '--corpus', corpus_file, '--out-dir', tmp_path / 'x')
        assert result.exit_code == 2
        assert 'batch_size 31' in result.output

    def test_corpus_missing_streams(self, tmp_path, tiny_run_config_file, corpus_file):
        data = json.loads(corpus_file.read_text())
        del data['streams']
        bad = tmp_path / 'partial.json'
        bad.write_text(json.dumps(data))
        result = invoke('train', '--config', tiny_run_config_file, '--corpus', bad, '--out-dir', tmp_path / 'x')
        assert result.exit_code == 5

    def test_corpus_not_json(self, tmp_path, tiny_run_config_file):
        bad = tmp_path / 'junk.json'
        bad.write_text('{"format": "milnce-corpus", ')
        result = invoke('train', '--config', tiny_run_config_file, '--corpus', bad, '--out-dir', tmp_path / 'x')
        assert result.exit_code == 5


class TestEval:
    def test_oracle(self, tmp_path, corpus_file, trained):
        out = tmp_path / 'oracle.json'
        result = invoke('eval', '--checkpoint', trained / 'checkpoint.bin', '--corpus', corpus_file,
                        '--out', out, '--oracle')
        assert result.exit_code == 0, result.output
        metrics = json.loads(out.read_text())['metrics']
        assert metrics['text_to_video']['R@1'] == 1.0
        assert metrics['localization_recall'] == 1.0

    def test_identical_bytes_on_repeat(self, tmp_path, corpus_file, trained):
        a, b = tmp_path / 'a.json', tmp_path / 'b.json'
        for out in (a, b):
            result = invoke('eval', '--checkpoint', trained / 'checkpoint.bin', '--corpus', corpus_file,
                            '--out', out)
            assert result.exit_code == 0, result.output
        assert a.read_bytes() == b.read_bytes()
        report = json.loads(a.read_text())
        assert report['checkpoint_step'] == 12
        assert report['eval_config']['pool_streams'] == 5

    def test_bad_checkpoint_version(self, tmp_path, corpus_file, trained):
        payload = (trained / 'checkpoint.bin').read_bytes()
        bad = tmp_path / 'bad.bin'
        bad.write_bytes(payload[:8] + struct.pack('<I', 7) + payload[12:])
        result = invoke('eval', '--checkpoint', bad, '--corpus', corpus_file)
        assert result.exit_code == 5

    def test_not_a_checkpoint(self, tmp_path, corpus_file):
        bad = tmp_path / 'junk.bin'
        bad.write_bytes(b'\x00' * 64)
        assert invoke('eval', '--checkpoint', bad, '--corpus', corpus_file).exit_code == 5

    def test_truncated_checkpoint(self, tmp_path, corpus_file, trained):
        payload = (trained / 'checkpoint.bin').read_bytes()
        bad = tmp_path / 'half.bin'
        bad.write_bytes(payload[:len(payload) // 2])
        result = invoke('eval', '--checkpoint', bad, '--corpus', corpus_file)
        assert result.exit_code == 5

    def test_candidate_selection_reported(self, tmp_path, corpus_file, trained):
        out = tmp_path / 'oracle.json'
        result = invoke('eval', '--checkpoint', trained / 'checkpoint.bin', '--corpus', corpus_file,
                        '--out', out, '--oracle')
        assert result.exit_code == 0, result.output
        assert json.loads(out.read_text())['metrics']['candidate_selection'] == 1.0

    def test_all_narrations_irrelevant(self, tmp_path, tiny_run_config_file):
        config = write_config(tmp_path, tiny_run_config_file, gen={'p_irrelevant': 1.0}, train={'total_steps': 0})
        corpus = tmp_path / 'noise.json'
        assert invoke('gen', '--config', config, '--out', corpus).exit_code == 0
        run = tmp_path / 'noise-run'
        assert invoke('train', '--config', config, '--corpus', corpus, '--out-dir', run).exit_code == 0
        out = tmp_path / 'noise-eval.json'
        result = invoke('eval', '--checkpoint', run / 'checkpoint.bin', '--corpus', corpus, '--out', out)
        assert result.exit_code == 0, result.output
        metrics = json.loads(out.read_text())['metrics']
        assert metrics['queries'] == 0
        assert metrics['text_to_video']['R@1'] is None
        assert metrics['video_to_text']['MedR'] is None
        assert metrics['localization_recall'] == 0.0
        assert metrics['candidate_selection'] is None


class TestGradcheck:
    def test_all_kinds_pass(self, tmp_path):
        out = tmp_path / 'gradcheck.json'
        result = invoke('gradcheck', '--out', out)
        assert result.exit_code == 0, result.output
        lines = [line for line in result.output.splitlines() if 'max_rel_error' in line]
        assert len(lines) == len(LOSS_KINDS)
        assert all(line.endswith('ok') for line in lines)
        assert len(json.loads(out.read_text())['reports']) == len(LOSS_KINDS)

    def test_corrupted_gradient_fails(self):
        result = invoke('gradcheck', '--loss', 'mil-nce', '--corrupt')
        assert result.exit_code == 4
        assert 'FAIL' in result.output


class TestAblate:
    def test_grid(self, tmp_path, tiny_run_config_file, corpus_file):
        grid = tmp_path / 'grid.json'
        grid.write_text(json.dumps({
            'axes': {'K': [1, 3, 5]},
            'seeds': [0, 1, 2, 3, 4],
            'run': json.loads(tiny_run_config_file.read_text()),
        }))
        out = tmp_path / 'ablation'
        result = invoke('ablate', '--grid', grid, '--corpus', corpus_file, '--out-dir', out, '--xlsx', '--pdf')
        assert result.exit_code == 0, result.output
        assert 'rows: 15 (+3 medians)' in result.output
        assert 'failed: 0' in result.output

        lines = (out / 'ablation.csv').read_text().splitlines()
        assert lines[0].startswith('# config: ')
        assert 'selection' in lines[1].split(',')
        assert len(lines) == 2 + 18
        summary = json.loads((out / 'ablation.json').read_text())
        assert summary['rows'] == 15
        assert [m['cell'] for m in summary['medians']] == ['K=1', 'K=3', 'K=5']
        assert (out / 'ablation.xlsx').stat().st_size > 0
        assert (out / 'ablation.pdf').read_bytes()[:4] == b'%PDF'

    def test_failed_cells_are_counted(self, tmp_path, tiny_run_config_file, corpus_file):
        grid = tmp_path / 'grid.json'
        grid.write_text(json.dumps({
            'axes': {'loss_kind': ['cat-nce'], 'bag_side': ['text', 'video']},
            'seeds': [0],
            'run': json.loads(tiny_run_config_file.read_text()),
        }))
        result = invoke('ablate', '--grid', grid, '--corpus', corpus_file, '--out-dir', tmp_path / 'abl')
        assert result.exit_code == 0, result.output
        assert 'failed: 1' in result.output
        summary = json.loads((tmp_path / 'abl' / 'ablation.json').read_text())
        assert summary['failed'][0]['cell'] == 'loss_kind=cat-nce,bag_side=video'
        assert summary['medians'][1]['t2v_R@1'] is None

    def test_seed_axis_rejected(self, tmp_path, tiny_run_config_file):
        grid = tmp_path / 'grid.json'
        grid.write_text(json.dumps({'axes': {'seed': [1, 2]}, 'run': json.loads(tiny_run_config_file.read_text())}))
        assert invoke('ablate', '--grid', grid, '--out-dir', tmp_path / 'x').exit_code == 2


def test_exit_codes_are_failures_only():
    from utils import constants
    codes = {k: v for k, v in vars(constants).items() if k.startswith('EXIT_')}
    assert codes == {'EXIT_CONFIG': 2, 'EXIT_NUMERIC': 3, 'EXIT_GRADCHECK': 4, 'EXIT_ARTIFACT': 5}
    assert not hasattr(constants, 'resolve_loss_kind')
