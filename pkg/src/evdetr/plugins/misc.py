import enum
import importlib.metadata
import json
import pathlib

from ..tensorcore import NonFiniteError, load_checkpoint, restore
from ..detection.model import init_model, MICRO
from ..detection.train import NumericalAbort, latest_checkpoint

import selftest
test = selftest.get_tester(__name__)


class ExitCode(enum.IntEnum):
    OK            = 0   # command completed
    INVALID       = 1   # validation or configuration error
    MISSING_INPUT = 2   # dataset, sequence or checkpoint not found
    NUMERICAL     = 3   # non-finite loss or failed gradient audit


def exit_code(exc):
    """ ExitCode for a known exception, None for anything else. """
    if isinstance(exc, FileNotFoundError):
        return ExitCode.MISSING_INPUT
    if isinstance(exc, (NumericalAbort, NonFiniteError)):
        return ExitCode.NUMERICAL
    if isinstance(exc, (ValueError, LookupError)):
        return ExitCode.INVALID
    return None


def version():
    try:
        return importlib.metadata.version('evdetr')
    except importlib.metadata.PackageNotFoundError:
        return 'unknown'


def write_json(path, data):
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True))
    return path


def load_model(config, path):
    """ Parameters from a checkpoint directory or from the final checkpoint of a run directory. """
    path = latest_checkpoint(path)
    arrays, _, meta = load_checkpoint(path)
    store = init_model(config, config.training.seed)
    try:
        restore(store, arrays)
    except ValueError as e:
        e.add_note(f"checkpoint {path} was written at step {meta.get('step')} with another configuration")
        raise
    return store


def micro_settings(**overrides):
    """ --set arguments for the micro configuration. """
    return [f"{k}={v}" for k, v in {**MICRO, **overrides}.items()]


@test
def exceptions_map_to_exit_codes():
    from ..config import ConfigError
    from ..davis_sim import MissingInputError
    test.eq(ExitCode.MISSING_INPUT, exit_code(MissingInputError("no dataset")))
    test.eq(ExitCode.MISSING_INPUT, exit_code(FileNotFoundError("no checkpoint")))
    test.eq(ExitCode.NUMERICAL, exit_code(NumericalAbort("non-finite loss at step 3")))
    test.eq(ExitCode.NUMERICAL, exit_code(NonFiniteError("nan")))
    test.eq(ExitCode.INVALID, exit_code(ConfigError("unknown config key: x")))
    test.eq(ExitCode.INVALID, exit_code(KeyError('x')))
    test.eq(None, exit_code(ZeroDivisionError()))
    test.eq(None, exit_code(RuntimeError()))


@test
def model_from_run_directory(tmp_path):
    from ..detection.model import micro_config
    from ..tensorcore import save_checkpoint
    config = micro_config()
    store = init_model(config, seed=5)
    save_checkpoint(tmp_path/'checkpoints'/'final', store, meta={'step': 7})
    loaded = load_model(config, tmp_path)
    test.eq(store.names(), loaded.names())
    test.truth(all((a.values == b.values).all() for a, b in zip(store, loaded)))
    with test.raises(FileNotFoundError, f"no checkpoint at {tmp_path/'nothing'}"):
        load_model(config, tmp_path/'nothing')
