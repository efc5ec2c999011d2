import sys

from .misc import ExitCode, exit_code

import selftest
test = selftest.get_tester(__name__)


def exitcode_plugin(next, **etc):
    """ Outermost plugin: builds and runs the rest of the chain, turning known
        exceptions into an exit code and a one-line diagnostic on stderr. """

    def main():
        try:
            code = next(**etc)()
        except Exception as e:
            code = exit_code(e)
            if code is None:
                raise
            message = '; '.join([str(e), *getattr(e, '__notes__', ())])
            print(f"evdetr: {type(e).__name__}: {message}", file=sys.stderr)
            return code
        return ExitCode.OK if code is None else ExitCode(code)

    return main


@test
def success_is_zero():
    def command(**etc):
        return lambda: None
    test.eq(ExitCode.OK, exitcode_plugin(command)())


@test
def errors_while_building_are_reported(stderr):
    from ..config import ConfigError
    def failing(**etc):
        raise ConfigError("sensor.threshold must be positive, got 0.0")
    test.eq(ExitCode.INVALID, exitcode_plugin(failing)())
    test.eq("evdetr: ConfigError: sensor.threshold must be positive, got 0.0\n", stderr.getvalue())


@test
def errors_while_running_carry_notes(stderr):
    from ..detection.train import NumericalAbort
    def command(**etc):
        def main():
            e = NumericalAbort("non-finite loss at step 4")
            e.add_note("batch dumped to abort-step4.npz")
            raise e
        return main
    test.eq(ExitCode.NUMERICAL, exitcode_plugin(command)())
    test.eq("evdetr: NumericalAbort: non-finite loss at step 4; batch dumped to abort-step4.npz\n",
            stderr.getvalue())


@test
def unknown_errors_propagate():
    def command(**etc):
        def main():
            raise RuntimeError("bug")
        return main
    with test.raises(RuntimeError, "bug"):
        exitcode_plugin(command)()


@test
def commands_may_return_a_code():
    test.eq(ExitCode.NUMERICAL, exitcode_plugin(lambda **etc: lambda: 3)())
