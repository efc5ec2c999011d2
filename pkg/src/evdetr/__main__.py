""" Command line entry point, as defined in pyproject.toml.

    Tests of the commands are in session.py to keep this module importable
    with choice of running tests or not.
"""

import sys


# this function is directly executed by pip installed code wrapper, see pyproject.toml
def evdetr_main(argv=None):

    from .arguments import maybe_silence_tester
    remaining = maybe_silence_tester(argv)

    import argparse
    from .arguments import parse_arguments
    from .plugins.misc import ExitCode
    try:
        args = parse_arguments(remaining)
    except argparse.ArgumentError as e:
        print(f"evdetr: {e}", file=sys.stderr)
        return ExitCode.INVALID

    from .session import command_session, cli_kwargs
    return command_session(**cli_kwargs(args))


if __name__ == '__main__':
    sys.exit(evdetr_main())
