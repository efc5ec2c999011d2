from ..davis_sim import load_split
from ..evaluation import AXES, run_ablation

import selftest
test = selftest.get_tester(__name__)


def ablate_plugin(next, config, out_dir, dataset=None, axes=None, steps=None, **etc):
    """ Trains and evaluates every variant of the chosen axes: ablation.csv plus ablation_checks.json. """
    unknown = set(axes or ()) - set(AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes: {', '.join(sorted(unknown))}")
    data_dir = dataset or config.paths.dataset

    def main():
        train, test_split = load_split(data_dir, 'train'), load_split(data_dir, 'test')
        rows = run_ablation(config, train, test_split, out_dir, axes=axes, steps=steps)
        failed = [f"{r['axis']}={r['variant']}" for r in rows if r['status'] != 'ok']
        print(f"{out_dir/'ablation.csv'}: {len(rows)} rows" + (f", failed: {', '.join(failed)}" if failed else ""))

    return main


@test
def axes_checked_before_io(tmp_path):
    from ..detection.train import toy_config
    with test.raises(ValueError, "unknown ablation axes: depth"):
        ablate_plugin(None, toy_config(), tmp_path/'x', axes=('fusion', 'depth'))
    test.comp.truth((tmp_path/'x').exists())
