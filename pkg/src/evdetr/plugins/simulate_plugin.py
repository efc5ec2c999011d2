from ..davis_sim import CameraModel, SUITES, simulate_suite

import selftest
test = selftest.get_tester(__name__)


def simulate_plugin(next, config, out_dir, suite='desk-small', seed=None, **etc):
    """ Writes a simulated suite; camera settings come from the sensor section. """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}, choose from {', '.join(SUITES)}")
    camera = CameraModel.from_config(config.sensor)
    seed = config.training.seed if seed is None else seed

    def main():
        index = simulate_suite(suite, camera, seed, out_dir)
        counts = ', '.join(f"{split} {len(names)}" for split, names in index['splits'].items())
        print(f"{out_dir}: {sum(len(n) for n in index['splits'].values())} sequences ({counts})")

    return main


@test
def tiny_suite(tmp_path, stdout):
    import json
    from ..detection.model import micro_config
    main = simulate_plugin(None, micro_config(), tmp_path, suite='desk-tiny', seed=3)
    test.comp.truth((tmp_path/'dataset.json').exists())
    main()
    test.eq(f"{tmp_path}: 7 sequences (train 3, val 1, test 3)\n", stdout.getvalue())
    index = json.loads((tmp_path/'dataset.json').read_text())
    test.eq(('desk-tiny', 3), (index['suite'], index['seed']))


@test
def unknown_suite_before_io(tmp_path):
    from ..detection.model import micro_config
    with test.raises(ValueError, "unknown suite 'huge', choose from desk-small, desk-tiny, desk-empty"):
        simulate_plugin(None, micro_config(), tmp_path/'x', suite='huge')
    test.comp.truth((tmp_path/'x').exists())
