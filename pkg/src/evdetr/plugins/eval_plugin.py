import csv

from ..davis_sim import MissingInputError, load_split
from ..evaluation import evaluate, frame_keep, frame_rate_sweep as sweep_frame_rates, model_detector
from .misc import load_model

import selftest
test = selftest.get_tester(__name__)


SWEEP_COLUMNS = ['frame_rate', 'mAP', 'mAP50', 'mAP75', 'mAP_S', 'mAP_M', 'mAP_L', 'runtime_ms', 'queries']


def eval_plugin(next, config, out_dir, checkpoint=None, dataset=None, split='test', scenario=None,
                cadence=None, frame_rate=None, frame_rate_sweep=None, **etc):
    """ Scores a checkpoint on one split: metrics.json, or frame_rate_sweep.csv for a sweep. """
    if checkpoint is None:
        raise ValueError("eval needs --checkpoint")
    if cadence is not None and cadence <= 0:
        raise ValueError(f"cadence must be positive, got {cadence}")
    for rate in (frame_rate_sweep or ()) + ((frame_rate,) if frame_rate else ()):
        frame_keep(rate)
    data_dir = dataset or config.paths.dataset

    def main():
        store = load_model(config, checkpoint)
        sequences = load_split(data_dir, split, scenario)
        if not sequences:
            raise MissingInputError(f"no {scenario} sequences in split {split!r} of {data_dir}")
        detector = model_detector(store, config)
        if frame_rate_sweep:
            path = write_sweep(out_dir/'frame_rate_sweep.csv',
                               sweep_frame_rates(detector, sequences, config, frame_rate_sweep))
            print(path)
            return
        report = evaluate(detector, sequences, config, frame_rate=frame_rate, cadence_hz=cadence)
        path = report.write(out_dir/'metrics.json')
        print(f"{path}: mAP50 {fmt(report.mAP50)}, mAP {fmt(report.mAP)}, "
              f"{report.queries} queries, median {fmt(report.runtime_ms)} ms per query")

    return main


def fmt(value):
    return 'n/a' if value is None else f"{value:.4f}"


def write_sweep(path, reports):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, SWEEP_COLUMNS)
        writer.writeheader()
        for rate, report in reports:
            row = {'frame_rate': rate, **report.summary(), 'runtime_ms': report.runtime_ms, 'queries': report.queries}
            writer.writerow({k: ('' if v is None else v) for k, v in row.items()})
    return path


@test
def sweep_rates_checked_before_io(tmp_path):
    from ..detection.train import toy_config
    with test.raises(ValueError, "frame rate 10.0 is not 25.0 divided by a whole number"):
        eval_plugin(None, toy_config(), tmp_path, checkpoint='x', frame_rate_sweep=(25.0, 10.0))
    with test.raises(ValueError, "eval needs --checkpoint"):
        eval_plugin(None, toy_config(), tmp_path)


@test
def missing_checkpoint(tmp_path):
    from ..detection.train import toy_config
    main = eval_plugin(None, toy_config(), tmp_path, checkpoint=tmp_path/'ckpt', dataset=tmp_path)
    with test.raises(FileNotFoundError, f"no checkpoint at {tmp_path/'ckpt'}"):
        main()


@test
def sweep_table(tmp_path):
    from ..evaluation.metrics import MetricsReport
    reports = [(rate, MetricsReport({}, 0.5, 0.7, 0.4, None, 0.5, None, runtime_ms=2.0, queries=10))
               for rate in (25.0, 12.5, 8.33, 6.25)]
    rows = write_sweep(tmp_path/'sweep.csv', reports).read_text().splitlines()
    test.eq(','.join(SWEEP_COLUMNS), rows[0])
    test.eq(5, len(rows))
    test.eq('8.33,0.5,0.7,0.4,,0.5,,2.0,10', rows[3])


@test
def sweep_writes_one_row_per_rate(tmp_path, stdout):
    from unittest import mock
    from ..evaluation.evaluate import desk_config, label_sequences, oracle_detector
    config = desk_config()
    main = eval_plugin(None, config, tmp_path, checkpoint=tmp_path/'ckpt', frame_rate_sweep=(25.0, 12.5, 6.25))
    with mock.patch(f"{__name__}.load_model", lambda config, path: None), \
         mock.patch(f"{__name__}.load_split", lambda *a: label_sequences(2, count=3)), \
         mock.patch(f"{__name__}.model_detector", lambda store, config: oracle_detector):
        test.eq(None, main())
    rows = (tmp_path/'frame_rate_sweep.csv').read_text().splitlines()
    test.eq(4, len(rows))
    test.eq(['25.0', '12.5', '6.25'], [r.split(',')[0] for r in rows[1:]])
    test.eq({'1.0'}, {r.split(',')[2] for r in rows[1:]})
