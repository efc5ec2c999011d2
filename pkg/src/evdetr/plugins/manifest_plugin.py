import dataclasses
import datetime
import itertools
import logging
import pathlib

from .misc import write_json, version

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


INPUTS = ('dataset', 'checkpoint', 'resume', 'sequence')


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    version: str
    seed: int
    config: dict
    paths: dict
    started: str = None


def now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')


def output_dir(command, config, out=None):
    if out is not None:
        return pathlib.Path(out)
    return pathlib.Path(config.paths.dataset if command == 'simulate' else config.paths.out)


def run_files(out_dir):
    """ run_manifest.json and run_end.json, numbered when earlier runs used out_dir. """
    for n in itertools.count():
        suffix = '' if n == 0 else f".{n}"
        if not (out_dir/f"run_manifest{suffix}.json").exists():
            return out_dir/f"run_manifest{suffix}.json", out_dir/f"run_end{suffix}.json"


def manifest_plugin(next, config, command=None, out=None, **etc):
    """ Writes run_manifest.json into the output directory before the command
        writes anything, and run_end.json after it finished or failed. """
    out_dir = output_dir(command, config, out)
    _main = next(config=config, out_dir=out_dir, **etc)
    seed = etc.get('seed')
    manifest = RunManifest(
        command=command,
        version=version(),
        seed=config.training.seed if seed is None else seed,
        config=config.to_dict(),
        paths={'out': str(out_dir), **{k: str(etc[k]) for k in INPUTS if etc.get(k) is not None}})

    def main():
        manifest_path, end_path = run_files(out_dir)
        write_json(manifest_path, dataclasses.asdict(dataclasses.replace(manifest, started=now())))
        logger.info("%s run in %s", command, out_dir)
        end = {'status': 'failed'}
        try:
            code = _main()
            end = {'status': 'ok', 'exit_code': int(code or 0)}
            return code
        except Exception as e:
            end['error'] = f"{type(e).__name__}: {e}"
            raise
        finally:
            write_json(end_path, {'ended': now(), **end})

    return main


@test
def manifest_written_before_command(tmp_path):
    import json
    from ..config import load_config
    seen = []
    def command(config=None, out_dir=None, dataset=None):
        def main():
            seen.append((out_dir/'run_manifest.json').exists())
            return 0
        return main
    main = manifest_plugin(command, load_config(), command='train', out=tmp_path/'run', dataset='data/x')
    test.comp.truth((tmp_path/'run').exists())
    test.eq(0, main())
    test.eq([True], seen)
    manifest = json.loads((tmp_path/'run'/'run_manifest.json').read_text())
    test.eq('train', manifest['command'])
    test.eq(0, manifest['seed'])
    test.eq({'out': str(tmp_path/'run'), 'dataset': 'data/x'}, manifest['paths'])
    test.eq(128, manifest['config']['sensor']['width'])
    end = json.loads((tmp_path/'run'/'run_end.json').read_text())
    test.eq(('ok', 0), (end['status'], end['exit_code']))


@test
def failure_recorded_in_run_end(tmp_path):
    import json
    from ..config import load_config
    def command(**etc):
        def main():
            raise ValueError("no sequence holds a window of 9 labeled timestamps")
        return main
    main = manifest_plugin(command, load_config(), command='train', out=tmp_path)
    with test.raises(ValueError, "no sequence holds a window of 9 labeled timestamps"):
        main()
    end = json.loads((tmp_path/'run_end.json').read_text())
    test.eq('failed', end['status'])
    test.eq("ValueError: no sequence holds a window of 9 labeled timestamps", end['error'])


@test
def simulate_writes_into_dataset_dir():
    from ..config import load_config
    test.eq(pathlib.Path('data/desk-small'), output_dir('simulate', load_config()))
    test.eq(pathlib.Path('runs/latest'), output_dir('eval', load_config()))


@test
def later_runs_get_numbered_files(tmp_path):
    from ..config import load_config
    for _ in range(3):
        manifest_plugin(lambda **etc: lambda: 0, load_config(), command='train', out=tmp_path)()
    test.eq(['run_end.1.json', 'run_end.2.json', 'run_end.json',
             'run_manifest.1.json', 'run_manifest.2.json', 'run_manifest.json'],
            sorted(p.name for p in tmp_path.iterdir()))
