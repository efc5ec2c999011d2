""" Ablation tables: one trained and evaluated variant per row.

    Every variant starts from the same configuration and seed and changes a
    few keys. A variant that fails is written as a failed row; the others
    still run. Directional checks compare rows that exist.
"""

import csv
import dataclasses
import json
import logging
import pathlib

from .evaluate import evaluate, frame_rate_sweep, model_detector

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


ABLATION_COLUMNS = ['axis', 'variant', 'status', 'mAP50', 'mAP', 'mAP75', 'mAP50_normal',
                    'mAP50_motion_blur', 'mAP50_low_light', 'runtime_ms', 'error']

FRAME_RATES = (25.0, 12.5, 8.33, 6.25)


@dataclasses.dataclass(frozen=True)
class Variant:
    axis: str
    name: str
    overrides: dict


AXES = {
    'fusion': [Variant('fusion', m, {'fusion.mode': m}) for m in ('attention', 'averaging', 'concatenation')],
    'aggregation': [Variant('aggregation', str(k), {'attention.aggregation': k}) for k in (1, 3, 5, 9)],
    'representation': [Variant('representation', r, {'representation.kind': r})
                       for r in ('event_image', 'voxel_grid', 'timestamp_sigmoid')],
    'encoder_layers': [Variant('encoder_layers', str(n), {'attention.encoder_layers': n}) for n in (1, 2, 4)],
    'decoder_layers': [Variant('decoder_layers', str(n), {'attention.decoder_layers': n}) for n in (1, 2, 4)],
    'components': [
        Variant('components', 'frames', {'fusion.modality': 'frames'}),
        Variant('components', 'events', {'fusion.modality': 'events'}),
        Variant('components', 'both-spatial', {'attention.aggregation': 1}),
        Variant('components', 'both', {}),
    ],
    'frame_rate': [Variant('frame_rate', m, {'fusion.modality': m}) for m in ('both', 'frames')],
}


def default_train(config, sequences, steps):
    from ..detection.train import Trainer
    trainer = Trainer(config)
    trainer.run(sequences, steps=steps)
    return trainer.store


def report_row(axis, name, report):
    row = {'axis': axis, 'variant': name, 'status': 'ok', **{k: getattr(report, k) for k in ('mAP50', 'mAP', 'mAP75')},
           'runtime_ms': report.runtime_ms, 'error': ''}
    for scenario in ('normal', 'motion_blur', 'low_light'):
        row[f"mAP50_{scenario}"] = report.scenarios.get(scenario, {}).get('mAP50')
    return row


def run_variant(base, variant, train, test_sequences, steps, train_fn=default_train):
    """ Rows of one variant; the frame-rate axis evaluates one model at every rate. """
    config = base.with_values(variant.overrides).validate()
    store = train_fn(config, train, steps)
    detector = model_detector(store, config)
    if variant.axis == 'frame_rate':
        return [report_row(variant.axis, f"{variant.name}@{rate:g}", report)
                for rate, report in frame_rate_sweep(detector, test_sequences, config, FRAME_RATES)]
    return [report_row(variant.axis, variant.name, evaluate(detector, test_sequences, config))]


def run_ablation(base, train, test_sequences, out_dir, axes=None, steps=None, train_fn=default_train):
    """ Writes ablation.csv and ablation_checks.json into out_dir; returns the rows. """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = set(axes or ()) - set(AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes: {', '.join(sorted(unknown))}")
    rows = []
    for axis in axes or AXES:
        for variant in AXES[axis]:
            logger.info("ablation %s=%s", axis, variant.name)
            try:
                rows.extend(run_variant(base, variant, train, test_sequences, steps, train_fn))
            except (ValueError, LookupError, ArithmeticError) as e:
                logger.warning("ablation %s=%s failed: %s", axis, variant.name, e)
                rows.append({'axis': axis, 'variant': variant.name, 'status': 'failed', 'error': str(e)})
            write_table(out_dir/'ablation.csv', rows)
    checks = ordering_checks(rows)
    (out_dir/'ablation_checks.json').write_text(json.dumps(checks, indent=1))
    return rows


def write_table(path, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows({c: ('' if row.get(c) is None else row.get(c)) for c in ABLATION_COLUMNS} for row in rows)


def _score(rows, axis, variant, column='mAP50'):
    for row in rows:
        if row['axis'] == axis and row['variant'] == variant and row['status'] == 'ok':
            return row.get(column)
    return None


def ordering_checks(rows):
    """ Directional comparisons between variants, for the rows that succeeded. """
    checks = []

    def check(name, values, holds):
        if any(v is None for v in values.values()):
            return
        checks.append({'check': name, 'holds': bool(holds(**values)), 'values': values})

    both, frames, events = (_score(rows, 'components', v) for v in ('both', 'frames', 'events'))
    check('fused >= best single modality - 0.02', {'both': both, 'frames': frames, 'events': events},
          lambda both, frames, events: both >= max(frames, events) - 0.02)
    for scenario in ('motion_blur', 'low_light'):
        column = f"mAP50_{scenario}"
        check(f"fused > frames on {scenario}",
              {'both': _score(rows, 'components', 'both', column), 'frames': _score(rows, 'components', 'frames', column)},
              lambda both, frames: both > frames)
    check('attention >= averaging >= concatenation - 0.03',
          {m: _score(rows, 'fusion', m) for m in ('attention', 'averaging', 'concatenation')},
          lambda attention, averaging, concatenation: attention >= averaging >= concatenation - 0.03)
    for modality in ('both', 'frames'):
        values = {f"r{k}": _score(rows, 'frame_rate', f"{modality}@{rate:g}") for k, rate in enumerate(FRAME_RATES)}
        check(f"{modality} non-increasing with lower frame rate", values,
              lambda **v: all(a >= b for a, b in zip(list(v.values()), list(v.values())[1:])))
    drop = lambda m: (_score(rows, 'frame_rate', f"{m}@25"), _score(rows, 'frame_rate', f"{m}@6.25"))
    (b25, b6), (f25, f6) = drop('both'), drop('frames')
    check('fused loses less than frames at 6.25 Hz', {'b25': b25, 'b6': b6, 'f25': f25, 'f6': f6},
          lambda b25, b6, f25, f6: b25 - b6 <= f25 - f6)
    return checks


def fake_train(config, sequences, steps):
    from ..detection.model import init_model
    if config.attention.aggregation == 5:
        raise ArithmeticError("non-finite loss at step 0")
    return init_model(config, config.training.seed)


@test
def axes_cover_the_tables():
    test.eq(['attention', 'averaging', 'concatenation'], [v.name for v in AXES['fusion']])
    test.eq(['1', '3', '5', '9'], [v.name for v in AXES['aggregation']])
    test.eq(['event_image', 'voxel_grid', 'timestamp_sigmoid'], [v.name for v in AXES['representation']])


@test
def failed_variant_is_recorded(tmp_path):
    from ..detection.train import toy_config, toy_sequence
    config = toy_config()
    sequences = [toy_sequence(config, frames=4)]
    rows = run_ablation(config, sequences, sequences, tmp_path, axes=['aggregation'], train_fn=fake_train)
    test.eq(['1', '3', '5', '9'], [r['variant'] for r in rows])
    test.eq(['ok', 'ok', 'failed', 'ok'], [r['status'] for r in rows])
    test.eq('non-finite loss at step 0', rows[2]['error'])
    with open(tmp_path/'ablation.csv', newline='') as f:
        table = list(csv.DictReader(f))
    test.eq(4, len(table))
    test.eq(ABLATION_COLUMNS, list(table[0]))
    test.eq([], json.loads((tmp_path/'ablation_checks.json').read_text()))
    with test.raises(ValueError, "unknown ablation axes: colour"):
        run_ablation(config, sequences, sequences, tmp_path, axes=['colour'])


@test
def frame_rate_axis_sweeps_one_model(tmp_path):
    from ..detection.train import toy_config, toy_sequence
    config = toy_config()
    sequences = [toy_sequence(config, frames=4)]
    rows = run_ablation(config, sequences, sequences, tmp_path, axes=['frame_rate'], train_fn=fake_train)
    test.eq(['both@25', 'both@12.5', 'both@8.33', 'both@6.25',
             'frames@25', 'frames@12.5', 'frames@8.33', 'frames@6.25'], [r['variant'] for r in rows])
    checks = json.loads((tmp_path/'ablation_checks.json').read_text())
    test.eq(['both non-increasing with lower frame rate', 'frames non-increasing with lower frame rate',
             'fused loses less than frames at 6.25 Hz'], [c['check'] for c in checks])


@test
def ordering_checks_on_known_rows():
    def ok(axis, variant, score, **extra):
        return {'axis': axis, 'variant': variant, 'status': 'ok', 'mAP50': score, **extra}
    rows = [ok('components', 'both', 0.6, mAP50_motion_blur=0.5, mAP50_low_light=0.4),
            ok('components', 'frames', 0.61, mAP50_motion_blur=0.3, mAP50_low_light=0.45),
            ok('components', 'events', 0.4, mAP50_motion_blur=0.35, mAP50_low_light=0.3),
            ok('fusion', 'attention', 0.6), ok('fusion', 'averaging', 0.55), ok('fusion', 'concatenation', 0.57),
            {'axis': 'frame_rate', 'variant': 'both@25', 'status': 'failed'}]
    checks = {c['check']: c['holds'] for c in ordering_checks(rows)}
    test.eq({'fused >= best single modality - 0.02': True,
             'fused > frames on motion_blur': True,
             'fused > frames on low_light': False,
             'attention >= averaging >= concatenation - 0.03': True}, checks)
