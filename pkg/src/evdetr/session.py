""" Commands as chains of plugins.

    A plugin is a factory called with the next plugin as first argument,
    followed by keyword arguments. It returns a main() callable, usually
    after calling next() with the keyword arguments it adds or keeps.
    Everything before main() runs is validation; main() does the I/O.
"""

import argparse
import json

import selftest
test = selftest.get_tester(__name__)

from .arguments import parse_arguments, silent
from .plugins.misc import ExitCode
from .plugins import (
    exitcode_plugin,
    config_plugin,
    manifest_plugin,
    simulate_plugin,
    train_plugin,
    eval_plugin,
    infer_plugin,
    ablate_plugin,
)


def session(plugins=(), **etc):
    """ Calls each plugin (factory) with the next one as first argument, followed by **etc.
        The first plugin must return a callable which is called immediately. """
    assert len(plugins) > 0, plugins
    def get_plugin_func(i):
        def get_plugin(**etc):
            assert i < len(plugins), f"No more plugins after '{plugins[-1].__name__}'"
            return plugins[i](get_plugin_func(i+1), **etc)
        return get_plugin
    return get_plugin_func(0)(**etc)()


@test
def test_session():
    def hello_plugin(next, name=None):
        with test.raises(AssertionError, "No more plugins after 'hello_plugin'"):
            next()
        def hello():
            return f"Hello {name}"
        return hello
    test.eq("Hello John", session(plugins=(hello_plugin,), name="John"))


@test
def test_session_sequencing():
    trace = []
    def adds_config_plugin(next, **etc):
        trace.append('build config')
        _main = next(config=42, **etc)
        def main():
            trace.append('config main')
            return _main()
        return main
    def command_plugin(next, config=None, name=None):
        trace.append('build command')
        def main():
            trace.append(f"{name} with {config}")
            return 0
        return main
    test.eq(0, session(plugins=(adds_config_plugin, command_plugin), name="John"))
    test.eq(['build config', 'build command', 'config main', 'John with 42'], trace)


common_plugins = (
    exitcode_plugin,
    config_plugin,
    manifest_plugin,
)

COMMANDS = {
    'simulate': simulate_plugin,
    'train': train_plugin,
    'eval': eval_plugin,
    'infer': infer_plugin,
    'ablate': ablate_plugin,
}


def command_session(command, **kwargs):
    """ Runs one CLI command; returns its ExitCode. """
    return session(plugins=(*common_plugins, COMMANDS[command]), command=command, **kwargs)


def cli_kwargs(args):
    """ Session keyword arguments from parsed command line arguments. """
    kwargs = vars(args).copy()
    for name in ('run_python_tests', 'quiet'):
        kwargs.pop(name, None)
    return kwargs


def run_command(*argv):
    return command_session(**cli_kwargs(parse_arguments(argv)))


def micro_argv():
    from .plugins.misc import micro_settings
    settings = micro_settings(**{'optimizer.lr': 1e-2, 'training.steps_per_epoch': 10, 'training.checkpoint_every': 2})
    return [a for s in settings for a in ('--set', s)] + ['-q']


@test
def parse_common_and_command():
    args = parse_arguments(['eval', '--checkpoint', 'runs/a', '--set', 'eval.cadence_hz=100',
                            '--set', 'fusion.mode=averaging', '--frame-rate-sweep', '25,12.5,8.33,6.25', '-vv'])
    test.eq('eval', args.command)
    test.eq('runs/a', args.checkpoint)
    test.eq(['eval.cadence_hz=100', 'fusion.mode=averaging'], args.overrides)
    test.eq((25.0, 12.5, 8.33, 6.25), args.frame_rate_sweep)
    test.eq(2, args.verbosity)
    test.eq('desk', args.profile)
    test.eq(-1, parse_arguments(['simulate', '-q']).verbosity)
    test.eq(('fusion', 'aggregation'), parse_arguments(['ablate', '--axes', 'fusion,aggregation']).axes)


@test
def parse_errors_do_not_exit():
    with test.raises(argparse.ArgumentError, "unrecognized arguments: --colour"):
        parse_arguments(['simulate', '--colour'])
    with test.raises(argparse.ArgumentError, "choose a command: simulate, train, eval, infer, ablate"):
        parse_arguments([])


@test
def python_tests_flag_is_removed():
    test.eq(['train', '--steps', '3'], silent.parse_known_args(['--run-python-tests', 'train', '--steps', '3'])[1])


@test
def invalid_config_before_any_io(tmp_path, stderr):
    code = run_command('simulate', '--out', str(tmp_path/'bad'), '--set', 'sensor.threshold=0', *micro_argv())
    test.eq(ExitCode.INVALID, code)
    test.comp.truth((tmp_path/'bad').exists())
    test.contains(stderr.getvalue(), "evdetr: ConfigError: sensor.threshold must be positive, got 0.0")


@test
def simulate_train_eval_infer(tmp_path, stdout, stderr):
    data, run = tmp_path/'data', tmp_path/'run'
    test.eq(ExitCode.OK, run_command('simulate', '--suite', 'desk-tiny', '--seed', '3', '--out', str(data), *micro_argv()))
    test.eq('simulate', json.loads((data/'run_manifest.json').read_text())['command'])
    test.eq(['test000', 'test001', 'test002'], json.loads((data/'dataset.json').read_text())['splits']['test'])

    test.eq(ExitCode.OK, run_command('train', '--dataset', str(data), '--steps', '2', '--out', str(run), *micro_argv()))
    test.eq(['step', 'total', 'cls', 'l1', 'giou', 'lr'], (run/'loss.csv').read_text().splitlines()[0].split(','))
    test.eq(ExitCode.OK, run_command('train', '--dataset', str(data), '--resume', str(run/'checkpoints'/'000002'),
                                     '--steps', '4', '--out', str(run), *micro_argv()))
    test.eq(5, len((run/'loss.csv').read_text().splitlines()))
    test.eq('ok', json.loads((run/'run_end.json').read_text())['status'])

    test.eq(ExitCode.OK, run_command('eval', '--checkpoint', str(run), '--dataset', str(data),
                                     '--scenario', 'low_light', '--out', str(tmp_path/'eval'), *micro_argv()))
    metrics = json.loads((tmp_path/'eval'/'metrics.json').read_text())
    test.eq(['low_light'], list(metrics['scenarios']))
    test.eq(10 + 9, metrics['queries'])     # cadence bins, plus one per label they miss

    test.eq(ExitCode.OK, run_command('eval', '--checkpoint', str(run), '--dataset', str(data),
                                     '--frame-rate-sweep', '25,12.5', '--out', str(tmp_path/'sweep'), *micro_argv()))
    test.eq(3, len((tmp_path/'sweep'/'frame_rate_sweep.csv').read_text().splitlines()))

    output = tmp_path/'detections.json'
    test.eq(ExitCode.OK, run_command('infer', '--checkpoint', str(run), '--sequence', str(data/'test000'),
                                     '--at', '0.2', '--output', str(output), '--threshold', '0',
                                     '--out', str(tmp_path/'infer'), *micro_argv()))
    records = json.loads(output.read_text())
    test.eq([200_000], [r['t_us'] for r in records])
    test.eq(3, len(records[0]['detections']))


@test
def missing_checkpoint_exits_two(tmp_path, stderr):
    code = run_command('infer', '--checkpoint', str(tmp_path/'none'), '--sequence', str(tmp_path),
                       '--out', str(tmp_path/'infer'), *micro_argv())
    test.eq(ExitCode.MISSING_INPUT, code)
    test.contains(stderr.getvalue(), f"evdetr: FileNotFoundError: no checkpoint at {tmp_path/'none'}")
    test.eq('failed', json.loads((tmp_path/'infer'/'run_end.json').read_text())['status'])
