from ..davis_sim import load_split
from ..detection.train import Trainer, gradcheck_audit
from .misc import ExitCode, write_json

import selftest
test = selftest.get_tester(__name__)


def train_plugin(next, config, out_dir, dataset=None, steps=None, resume=None, gradcheck=False, seeds=10, **etc):
    """ Trains on the train split, or with gradcheck only audits gradients. """
    if steps is not None and steps < 0:
        raise ValueError(f"steps must not be negative, got {steps}")
    if gradcheck and seeds < 1:
        raise ValueError(f"gradcheck needs at least one seed, got {seeds}")

    def audit():
        failures = gradcheck_audit(range(seeds))
        write_json(out_dir/'gradcheck.json', {
            'seeds': seeds,
            'failures': [{'seed': seed, 'report': str(report)} for seed, report in failures]})
        for seed, report in failures:
            print(f"seed {seed}: {report}")
        print(f"gradcheck: {seeds - len(failures)}/{seeds} seeds pass")
        return ExitCode.NUMERICAL if failures else ExitCode.OK

    def train():
        sequences = load_split(dataset or config.paths.dataset, 'train')
        trainer = Trainer.resume(config, resume, out_dir) if resume else Trainer(config, out_dir)
        rows = trainer.run(sequences, steps)
        if rows:
            last = rows[-1]
            print(f"step {last['step']}: loss {last['total']:.4f} (cls {last['cls']:.4f}, "
                  f"l1 {last['l1']:.4f}, giou {last['giou']:.4f})")
        print(f"{out_dir/'checkpoints'/'final'}")
        return ExitCode.OK

    return audit if gradcheck else train


@test
def gradient_audit_passes(tmp_path, stdout):
    import json
    from ..detection.model import micro_config
    code = train_plugin(None, micro_config(), tmp_path, gradcheck=True, seeds=1)()
    test.eq(ExitCode.OK, code)
    test.eq("gradcheck: 1/1 seeds pass\n", stdout.getvalue())
    test.eq([], json.loads((tmp_path/'gradcheck.json').read_text())['failures'])


@test
def failing_audit_exits_nonzero(tmp_path, stdout):
    from unittest import mock
    from ..tensorcore.gradcheck import GradReport
    from ..detection.model import micro_config
    report = GradReport(checked=4, max_error=0.5, failures=['head.box.2[0]: analytic 1 numeric 0.5'])
    with mock.patch(f"{__name__}.gradcheck_audit", lambda seeds: [(0, report)]):
        code = train_plugin(None, micro_config(), tmp_path, gradcheck=True, seeds=1)()
    test.eq(ExitCode.NUMERICAL, code)
    test.contains(stdout.getvalue(), "seed 0: 4 elements, max error 0.5, 1 failures")
    test.contains(stdout.getvalue(), "gradcheck: 0/1 seeds pass")


@test
def trains_on_the_train_split(tmp_path, stdout):
    from ..davis_sim import CameraModel, simulate_suite
    from ..detection.train import toy_config
    config = toy_config()
    simulate_suite('desk-tiny', CameraModel.from_config(config.sensor), 3, tmp_path/'data')
    train_plugin(None, config, tmp_path/'run', dataset=tmp_path/'data', steps=2)()
    test.truth((tmp_path/'run'/'checkpoints'/'final'/'manifest.json').exists())
    test.eq(3, len((tmp_path/'run'/'loss.csv').read_text().splitlines()))
    test.contains(stdout.getvalue(), "step 2: loss ")


@test
def missing_dataset(tmp_path):
    from ..davis_sim import MissingInputError
    from ..detection.train import toy_config
    with test.raises(MissingInputError, f"no dataset at {tmp_path/'none'}"):
        train_plugin(None, toy_config(), tmp_path/'run', dataset=tmp_path/'none', steps=1)()
