""" Separate module to allow inspecting args before running selftests """

import argparse
import logging
import sys

import selftest


silent = argparse.ArgumentParser(add_help=False, exit_on_error=False)
silent.add_argument('--run-python-tests', help="Also run in-source Python tests.", action='store_true')


LOG_FORMAT = '%(levelname)s %(name)s: %(message)s'


def maybe_silence_tester(argv=None):
    args, unknown = silent.parse_known_args(argv)
    if not args.run_python_tests:
        try:
            # must be called first and can only be called once, but, when
            # we are imported from another app that also uses --silent,
            # that app might already have called basic_config()
            selftest.basic_config(run=False)
        except AssertionError:
            root = selftest.get_tester(None)
            CR = '\n'
            assert not root.option_get('run'), "In order to NOT run Python tests, " \
                f"Tester {root}{CR} must have been configured to NOT run tests."
    return unknown


def floats(text):
    try:
        return tuple(float(v) for v in text.split(',') if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def names(text):
    return tuple(v.strip() for v in text.split(',') if v.strip())


def common_options():
    common = argparse.ArgumentParser(add_help=False, exit_on_error=False)
    common.add_argument('--profile', choices=('desk', 'full'), default='desk',
                        help="Configuration profile: scaled down 'desk' or published 'full' settings.")
    common.add_argument('--config', dest='config_path', metavar='JSON', help="Configuration file.")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override one configuration key, e.g. attention.aggregation=5.")
    common.add_argument('--out', metavar='DIR', help="Output directory (default paths.out, for simulate paths.dataset).")
    common.add_argument('-v', '--verbose', dest='verbosity', action='count', default=0)
    common.add_argument('-q', '--quiet', dest='quiet', action='store_true')
    return common


def build_parser():
    common = common_options()
    parser = argparse.ArgumentParser(
            prog='evdetr',
            parents=[silent],
            exit_on_error=False,
            description='Streaming object detection from DAVIS events and frames.')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')

    def command(name, help):
        return commands.add_parser(name, parents=[common], exit_on_error=False, help=help, description=help)

    simulate = command('simulate', "Simulate a DAVIS dataset suite.")
    simulate.add_argument('--suite', default='desk-small')
    simulate.add_argument('--seed', type=int, help="Default training.seed.")

    train = command('train', "Train a detector on the train split of a dataset.")
    train.add_argument('--dataset', metavar='DIR')
    train.add_argument('--steps', type=int, help="Total steps (default epochs x steps_per_epoch).")
    train.add_argument('--resume', metavar='CHECKPOINT', help="Continue from a checkpoint.")
    train.add_argument('--gradcheck', action='store_true', help="Only run the gradient audit on the micro configuration.")
    train.add_argument('--seeds', type=int, default=10, help="Number of seeds for --gradcheck.")

    evaluate = command('eval', "Evaluate a checkpoint on a dataset split.")
    evaluate.add_argument('--checkpoint', metavar='DIR')
    evaluate.add_argument('--dataset', metavar='DIR')
    evaluate.add_argument('--split', default='test')
    evaluate.add_argument('--scenario', choices=('normal', 'motion_blur', 'low_light'))
    evaluate.add_argument('--cadence', type=float, metavar='HZ', help="Query cadence (default eval.cadence_hz).")
    evaluate.add_argument('--frame-rate', type=float, metavar='HZ', help="Subsample frames to this rate.")
    evaluate.add_argument('--frame-rate-sweep', type=floats, metavar='HZ,...', help="One evaluation per frame rate.")

    infer = command('infer', "Run a checkpoint over one recorded sequence.")
    infer.add_argument('--checkpoint', metavar='DIR')
    infer.add_argument('--sequence', metavar='DIR')
    infer.add_argument('--at', type=float, metavar='SECONDS', help="Single query at this time.")
    infer.add_argument('--cadence', type=float, metavar='HZ')
    infer.add_argument('--output', metavar='FILE', help="Detections file; .json for JSON, else CSV.")
    infer.add_argument('--threshold', type=float, help="Minimum confidence (default eval.confidence).")

    ablate = command('ablate', "Train and evaluate ablation variants.")
    ablate.add_argument('--dataset', metavar='DIR')
    ablate.add_argument('--axes', type=names, metavar='AXIS,...')
    ablate.add_argument('--steps', type=int)
    return parser


def parse_arguments(argv=None):
    """ Parsed arguments; argparse.ArgumentError for anything argparse would exit on. """
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    if unknown:
        raise argparse.ArgumentError(None, f"unrecognized arguments: {' '.join(unknown)}")
    if args.command is None:
        raise argparse.ArgumentError(None, f"choose a command: {', '.join(('simulate', 'train', 'eval', 'infer', 'ablate'))}")
    if args.quiet:
        args.verbosity = -1
    return args


def configure_logging(verbosity=0):
    level = {-1: logging.WARNING, 0: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)

