from ..davis_sim import load_sequence
from ..detection.infer import infer_at, run_stream, query_bins, write_detections
from .misc import load_model

import selftest
test = selftest.get_tester(__name__)


def infer_plugin(next, config, out_dir, checkpoint=None, sequence=None, at=None, cadence=None,
                 output=None, threshold=None, **etc):
    """ Detections for one sequence: a single query with at (seconds), else a query stream. """
    if checkpoint is None or sequence is None:
        raise ValueError("infer needs --checkpoint and --sequence")
    if at is not None and at <= 0:
        raise ValueError(f"query time must be positive, got {at} s")
    cadence = cadence or config.eval.cadence_hz
    threshold = config.eval.confidence if threshold is None else threshold
    path = output or out_dir/'detections.csv'

    def main():
        store = load_model(config, checkpoint)
        recording = load_sequence(sequence)
        if at is not None:
            results = infer_at(store, config, recording, round(at * 1e6))
        else:
            bins = query_bins(recording, cadence, config.representation)
            results = run_stream(store, config, recording, bins, height=config.eval.resize)
        written = write_detections(path, results, recording.geometry, threshold)
        print(f"{written}: {len(results)} record sets, "
              f"{sum(len(r.confident(threshold)) for r in results)} detections")

    return main


@test
def missing_checkpoint(tmp_path):
    from ..detection.train import toy_config
    main = infer_plugin(None, toy_config(), tmp_path, checkpoint=tmp_path/'gone', sequence=tmp_path)
    with test.raises(FileNotFoundError, f"no checkpoint at {tmp_path/'gone'}"):
        main()
    test.comp.truth((tmp_path/'detections.csv').exists())


@test
def arguments_checked(tmp_path):
    from ..detection.train import toy_config
    with test.raises(ValueError, "infer needs --checkpoint and --sequence"):
        infer_plugin(None, toy_config(), tmp_path, checkpoint='x')
    with test.raises(ValueError, "query time must be positive, got -1.0 s"):
        infer_plugin(None, toy_config(), tmp_path, checkpoint='x', sequence='y', at=-1.0)
