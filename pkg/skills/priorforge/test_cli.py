#!/usr/bin/env python3
"""
End-to-end tests for the priorforge command line on synthetic data
"""

import json
import sys
import tempfile
from pathlib import Path

# Add scripts directory to path
scripts_dir = Path(__file__).parent / 'scripts'
templates_dir = Path(__file__).parent / 'templates'
sys.path.insert(0, str(scripts_dir))
sys.path.insert(0, str(templates_dir))

import matplotlib
matplotlib.use('Agg')

import matplotlib.image as mpimg

from checkpoint import _PREAMBLE, load_checkpoint
from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from priorforge import main
from sampling import load_latents

TRAIN_FLAGS = ['--dataset', 'synthetic', '--dataset-size', '32', '--batch-size', '8',
               '--code-dim', '12', '--log-every', '1000']


def _train(out: Path, mode: str = 'supervised', *extra) -> int:
    return main(['train', '--mode', mode, '--output-dir', str(out), '--epochs', '1'] + TRAIN_FLAGS + list(extra))


def test_train_and_generate():
    """train writes one checkpoint per epoch; generate is deterministic; grids are rows x K"""
    print("Testing train and generate...")
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp) / 'run'
        assert _train(run) == 0
        assert (run / 'ckpt_epoch_1.ckpt').exists() and (run / 'metrics.csv').exists()
        assert not (run / 'ckpt_epoch_2.ckpt').exists()
        config = load_checkpoint(str(run / 'ckpt_epoch_1.ckpt')).config
        assert (config['num_classes'], config['noise_dim']) == (4, 8)
        print("  supervised run: 1 checkpoint, classes taken from the dataset")

        ckpt = str(run / 'ckpt_epoch_1.ckpt')
        a, b = Path(tmp) / 'a.png', Path(tmp) / 'b.png'
        assert main(['generate', ckpt, '--n', '16', '--seed', '1', '--out', str(a)]) == 0
        assert main(['generate', ckpt, '--n', '16', '--seed', '1', '--out', str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        print("  generate twice with one seed -> identical files")

        grid = Path(tmp) / 'grid.png'
        assert main(['generate', ckpt, '--grid', '--rows', '3', '--out', str(grid)]) == 0
        assert mpimg.imread(str(grid)).shape[:2] == (3 * 32, 4 * 32)
        print("  --grid -> 3 x 4 tile")

        sweep = Path(tmp) / 'sweep.png'
        assert main(['generate', ckpt, '--label', 'sweep', '--n', '2', '--out', str(sweep)]) == 0
        assert mpimg.imread(str(sweep)).shape[:2] == (4 * 32, 2 * 32)
        print("  --label sweep -> one row per class")
    print("[PASS] Train and generate")


def test_config_errors_exit_2():
    """Invalid configurations exit with status 2"""
    print("\nTesting config errors...")
    with tempfile.TemporaryDirectory() as tmp:
        assert _train(Path(tmp) / 'x', 'unconditional', '--num-classes', '10') == 2
        print("  unconditional with --num-classes 10 -> 2")

        cfg = Path(tmp) / 'bad.cfg'
        cfg.write_text("mode = supervised\nflavour = vanilla\n")
        assert main(['train', '--config', str(cfg), '--dataset', 'synthetic']) == 2
        print("  unknown config key -> 2")

        assert main(['train', '--dataset', 'synthetic']) == 2
        print("  missing mode -> 2")

        run = Path(tmp) / 'uncond'
        assert _train(run, 'unconditional') == 0
        out = Path(tmp) / 'labelled.png'
        assert main(['generate', str(run / 'ckpt_epoch_1.ckpt'), '--label', '1', '--out', str(out)]) == 2
        assert not out.exists()
        print("  --label on an unconditional checkpoint -> 2, no file")
    print("[PASS] Config errors")


def test_config_precedence():
    """CLI flag beats file value beats default"""
    print("\nTesting config precedence...")
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp) / 'run'
        cfg = Path(tmp) / 'run.cfg'
        cfg.write_text(
            "# precedence check\n"
            "mode = unconditional\n"
            "dataset = synthetic\n"
            "dataset_size = 32\n"
            "batch_size = 8\n"
            "code_dim = 10\n"
            "epochs = 3\n"
            f"output_dir = {run}\n"
        )
        assert main(['train', '--config', str(cfg), '--epochs', '1']) == 0
        config = load_checkpoint(str(run / 'ckpt_epoch_1.ckpt')).config
        assert config['epochs'] == 1
        assert config['code_dim'] == 10
        assert config['lambda_rec'] == 1.0
        assert not (run / 'ckpt_epoch_2.ckpt').exists()
        print("  epochs from CLI, code_dim from file, lambda_rec default")
    print("[PASS] Config precedence")


def test_missing_checkpoint_exit_3():
    """Unreadable inputs exit with status 3 and write nothing"""
    print("\nTesting missing inputs...")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / 'never.png'
        assert main(['generate', str(Path(tmp) / 'missing.ckpt'), '--out', str(out)]) == 3
        assert not out.exists()
        print("  missing checkpoint -> 3, no partial file")

        bogus = Path(tmp) / 'bogus.ckpt'
        bogus.write_bytes(b'NOPE' + bytes(20))
        assert main(['generate', str(bogus), '--out', str(out)]) == 3
        print("  corrupted checkpoint -> 3")

        partial = Path(tmp) / 'partial.ckpt'
        header = json.dumps({'tensors': []}).encode('utf-8')
        partial.write_bytes(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header)
        assert main(['generate', str(partial), '--out', str(out)]) == 3
        assert not out.exists()
        print("  header missing keys -> 3, no file")

        assert main(['train', '--mode', 'unconditional', '--dataset', 'folder',
                     '--data-path', str(Path(tmp) / 'nowhere')]) == 3
        print("  missing dataset -> 3")
    print("[PASS] Missing inputs")


def test_evaluate_and_export():
    """train-classifier, evaluate report schema and latent exports"""
    print("\nTesting evaluate and export...")
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp) / 'run'
        assert _train(run) == 0
        ckpt = str(run / 'ckpt_epoch_1.ckpt')

        clf = Path(tmp) / 'clf.ckpt'
        assert main(['train-classifier', '--dataset', 'synthetic', '--dataset-size', '128',
                     '--num-classes', '4', '--epochs', '1', '--min-accuracy', '0', '--out', str(clf)]) == 0
        assert load_checkpoint(str(clf)).kind == 'classifier'
        print("  classifier checkpoint written")

        report_path = Path(tmp) / 'score.json'
        assert main(['evaluate', ckpt, '--classifier', str(clf), '--n', '40', '--splits', '1',
                     '--per-class', '10', '--out', str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert set(report) == {'is_mean', 'is_std', 'splits', 'n', 'cond_accuracy'}
        assert 1.0 <= report['is_mean'] <= 4.0 and report['is_std'] == 0.0
        assert report['n'] == 40 and report['splits'] == 1
        print(f"  report keys ok, is_mean {report['is_mean']:.3f}")

        wrong = Path(tmp) / 'clf3.ckpt'
        assert main(['train-classifier', '--dataset', 'synthetic', '--dataset-size', '96',
                     '--num-classes', '3', '--epochs', '1', '--min-accuracy', '0', '--out', str(wrong)]) == 0
        assert main(['evaluate', ckpt, '--classifier', str(wrong), '--n', '40']) == 2
        print("  class-count mismatch -> 2")

        floor = Path(tmp) / 'floor.ckpt'
        assert main(['train-classifier', '--dataset', 'synthetic', '--dataset-size', '64',
                     '--num-classes', '4', '--epochs', '1', '--min-accuracy', '1.5', '--out', str(floor)]) == 4
        assert not floor.exists()
        print("  accuracy floor missed -> 4")

        enc = Path(tmp) / 'enc.csv'
        assert main(['export-latents', ckpt, '--source', 'encoder', '--dataset', 'synthetic',
                     '--dataset-size', '24', '--out', str(enc)]) == 0
        codes, labels = load_latents(str(enc))
        assert codes.shape == (24, 12) and labels.shape == (24,)

        gen = Path(tmp) / 'gen.csv'
        assert main(['export-latents', ckpt, '--source', 'code_generator', '--n', '50', '--out', str(gen)]) == 0
        assert load_latents(str(gen))[0].shape == (50, 12)
        assert main(['export-latents', ckpt, '--source', 'encoder', '--out', str(Path(tmp) / 'x.csv')]) == 2
        print("  encoder and code generator dumps; encoder without dataset -> 2")
    print("[PASS] Evaluate and export")


def test_report():
    """report prints per-epoch means and writes the loss chart"""
    print("\nTesting report...")
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp) / 'run'
        assert main(['train', '--mode', 'unsupervised', '--num-classes', '4', '--output-dir', str(run),
                     '--epochs', '2'] + TRAIN_FLAGS) == 0
        assert main(['report', str(run)]) == 0
        assert (run / 'losses.png').exists()
        print("  loss chart written")
        assert main(['report', str(Path(tmp) / 'empty')]) == 3
        print("  run without metrics -> 3")
    print("[PASS] Report")


def main_tests():
    """Run all tests"""
    print("PriorForge - CLI Tests")
    print("=" * 50)

    tests = [
        test_train_and_generate,
        test_config_errors_exit_2,
        test_config_precedence,
        test_missing_checkpoint_exit_3,
        test_evaluate_and_export,
        test_report,
    ]

    passed = 0
    for test in tests:
        try:
            test()
            passed += 1
        except Exception as e:
            print(f"[FAIL] {test.__name__}: {e}")

    print(f"\n{'=' * 50}")
    print(f"Test Results: {passed}/{len(tests)} passed")
    return 0 if passed == len(tests) else 1


if __name__ == '__main__':
    sys.exit(main_tests())
