import logging

from ..arguments import configure_logging
from ..config import load_config

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


def config_plugin(next, profile='desk', config_path=None, overrides=(), verbosity=None, **etc):
    """ Configures logging and builds the validated RunConfig before anything touches the disk. """
    if verbosity is not None:
        configure_logging(verbosity)
    config = load_config(profile, config_path, overrides)
    logger.debug("configuration (%s profile):\n%s", profile, config.describe())
    return next(config=config, **etc)


@test
def config_passed_on():
    seen = {}
    def command(config=None, other=None):
        seen.update(config=config, other=other)
        return lambda: 'done'
    main = config_plugin(command, overrides=['attention.aggregation=3'], other='kept')
    test.eq(3, seen['config'].attention.aggregation)
    test.eq('kept', seen['other'])
    test.eq('done', main())


@test
def invalid_config_stops_the_chain():
    from ..config import ConfigError
    def command(**etc):
        raise AssertionError("must not be built")
    with test.raises(ConfigError, "sensor.threshold must be positive, got -1.0"):
        config_plugin(command, overrides=['sensor.threshold=-1'])
