""" Training: windows of consecutive labeled timestamps, Adam, checkpoints and loss log.

    Within a window the earlier timestamps only build the encoder histories
    and the frame cache; they run without a tape. The loss is taken at the
    last timestamp, or at every timestamp with training.loss_all_timestamps.
"""

import contextlib
import csv
import dataclasses
import logging
import pathlib

import numpy as np

from ..tensorcore import (AdamState, RngStream, adam_step, scheduled_lr, no_grad, save_checkpoint,
                          load_checkpoint, restore)
from ..events import EventStream, Geometry
from ..backbone import random_height
from ..davis_sim.scene import LabelBox, GroundTruthLabel
from ..davis_sim.dataset import Sequence
from .boxes import from_pixels
from .losses import set_loss
from .model import init_model, forward, event_input, StreamState, micro_config, pipeline_gradcheck

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


LOSS_COLUMNS = ['step', 'total', 'cls', 'l1', 'giou', 'lr']


class NumericalAbort(ArithmeticError):
    pass


@dataclasses.dataclass
class Window:
    sequence: Sequence
    times: list

    def __str__(self):
        return f"{self.sequence.name}[{self.times[0]}..{self.times[-1]}]"


def windows(sequence, length):
    """ Every run of `length` consecutive labeled timestamps. """
    times = [label.t for label in sequence.labels]
    return [Window(sequence, times[k - length + 1:k + 1]) for k in range(length - 1, len(times))]


def targets(label, geometry):
    """ Classes and normalized (cx, cy, w, h) boxes of a label record. """
    classes = [b.class_id for b in label.boxes]
    boxes = np.array([from_pixels((b.x, b.y, b.w, b.h), geometry.width, geometry.height) for b in label.boxes])
    return classes, boxes.reshape(-1, 4)


def window_forward(store, config, window, rng=None, training=True, height=None):
    """ Runs the window and returns the per-timestamp losses that carry a tape. """
    sequence = window.sequence
    frames = dict(zip(sequence.frame_times, sequence.frames))
    state = StreamState.new(config)
    losses = []
    for i, t in enumerate(window.times):
        supervised = i == len(window.times) - 1 or config.training.loss_all_timestamps
        with contextlib.nullcontext() if supervised else no_grad():
            ev = event_input(sequence.events, sequence.geometry, t, config.representation)
            logits, boxes = forward(store, config, state, t, ev, frames.get(t), rng, training, height)
        if supervised:
            if not (np.isfinite(logits.values).all() and np.isfinite(boxes.values).all()):
                raise NumericalAbort(f"non-finite predictions at t={t}")
            classes, gt = targets(sequence.labels_at(t), sequence.geometry)
            loss, _ = set_loss(logits, boxes, classes, gt, config.training)
            losses.append(loss)
    return losses


def mean_loss(losses):
    total = losses[0].total
    for loss in losses[1:]:
        total = total + loss.total
    n = len(losses)
    return dataclasses.replace(losses[0], total=total * (1.0 / n),
                               cls=sum(l.cls for l in losses) / n,
                               l1=sum(l.l1 for l in losses) / n,
                               giou=sum(l.giou for l in losses) / n)


def dump_batch(path, window, config):
    sequence = window.sequence
    events = [event_input(sequence.events, sequence.geometry, t, config.representation) for t in window.times]
    frames = dict(zip(sequence.frame_times, sequence.frames))
    np.savez(path, sequence=sequence.name, times=np.array(window.times), events=np.stack(events),
             frames=np.stack([frames[t] for t in window.times if t in frames] or [np.zeros((0, 0))]))


class Trainer:
    """ Model parameters, optimizer state and random stream of one training run. """

    def __init__(self, config, out_dir=None, store=None, adam=None, rng=None, step=0):
        self.config = config
        self.out_dir = None if out_dir is None else pathlib.Path(out_dir)
        self.store = init_model(config, config.training.seed) if store is None else store
        o = config.optimizer
        self.adam = adam or AdamState(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay)
        self.rng = rng or RngStream(config.training.seed).spawn(1)
        self.step = step

    @classmethod
    def resume(cls, config, path, out_dir=None):
        arrays, adam, meta = load_checkpoint(path)
        trainer = cls(config, out_dir, adam=adam, rng=RngStream.from_state(meta['rng']), step=meta['step'])
        try:
            restore(trainer.store, arrays)
        except ValueError as e:
            e.add_note(f"resuming from {path}")
            raise
        logger.info("resumed %s at step %d", path, trainer.step)
        return trainer

    def lr(self, step=None):
        o, t = self.config.optimizer, self.config.training
        return scheduled_lr(o.lr, self.step if step is None else step, t.steps_per_epoch, o.decay_epoch, o.decay_factor)

    def sample(self, sequences):
        length = self.config.window
        candidates = [s for s in sequences if len(s.labels) >= length]
        if not candidates:
            raise ValueError(f"no sequence holds a window of {length} labeled timestamps")
        choices = windows(candidates[self.rng.choice(len(candidates))], length)
        return choices[self.rng.choice(len(choices))]

    def train_step(self, window):
        t = self.config.training
        height = random_height(self.rng, t) if t.resize else None
        lr = self.lr()
        if self.step and lr != self.lr(self.step - 1):
            logger.info("step %d: learning rate now %g", self.step, lr)
        self.store.zero_grad()
        try:
            loss = mean_loss(window_forward(self.store, self.config, window, self.rng, True, height))
            if not np.isfinite(loss.total.values):
                raise NumericalAbort(f"non-finite loss at step {self.step}")
        except NumericalAbort as err:
            err.add_note(f"step {self.step}, window {window}")
            if self.out_dir is not None:
                path = self.out_dir/f"abort-step{self.step}.npz"
                dump_batch(path, window, self.config)
                err.add_note(f"batch dumped to {path}")
            raise
        loss.total.backward()
        adam_step(self.store, self.adam, lr)
        self.step += 1
        return loss, lr

    def checkpoint(self, path=None):
        path = path or self.out_dir/'checkpoints'/f"{self.step:06d}"
        meta = {'step': self.step, 'rng': self.rng.state(), 'config': self.config.to_dict()}
        return save_checkpoint(path, self.store, self.adam, meta)

    def run(self, sequences, steps=None, window=None):
        """ Trains until `steps` total steps; a fixed window replaces sampling. """
        t = self.config.training
        steps = t.epochs * t.steps_per_epoch if steps is None else steps
        log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir/'loss.csv'
            fresh = not log_path.exists() or self.step == 0
            log = open(log_path, 'w' if fresh else 'a', newline='')
        rows = []
        try:
            writer = csv.writer(log) if log else None
            if writer and fresh:
                writer.writerow(LOSS_COLUMNS)
            while self.step < steps:
                loss, lr = self.train_step(window or self.sample(sequences))
                row = {'step': self.step, **loss.row(), 'lr': lr}
                rows.append(row)
                if writer:
                    writer.writerow([row[c] for c in LOSS_COLUMNS])
                    log.flush()
                if self.step % t.steps_per_epoch == 0:
                    logger.info("epoch %d done, loss %.4f", self.step // t.steps_per_epoch, row['total'])
                if self.out_dir is not None and self.step % t.checkpoint_every == 0:
                    self.checkpoint()
        finally:
            if log:
                log.close()
        if self.out_dir is not None:
            self.checkpoint(self.out_dir/'checkpoints'/'final')
        return rows


def latest_checkpoint(run_dir):
    path = pathlib.Path(run_dir)/'checkpoints'/'final'
    return path if path.exists() else pathlib.Path(run_dir)


def gradcheck_audit(seeds=range(10)):
    """ Pipeline gradient audit per seed; returns the failing seeds with their reports. """
    failures = []
    for seed in seeds:
        _, report = pipeline_gradcheck(seed)
        logger.info("gradcheck seed %d: %s", seed, report)
        if not report.ok:
            failures.append((seed, report))
    return failures


def toy_sequence(config, seed=0, frames=4, period=10_000, name='toy', empty=False):
    """ A square crossing the image, with matching frames, events and labels. """
    w, h = config.sensor.width, config.sensor.height
    geometry = Geometry(w, h)
    rng = np.random.default_rng(seed)
    size = max(2, w // 4)
    times = [k * period for k in range(frames)]
    images, labels, ts, xs, ys, ps = [], [], [], [], [], []
    for k, t in enumerate(times):
        x0 = (2 + 2 * k) % (w - size)
        y0 = h // 3
        image = np.full((h, w), 60, dtype=np.uint8)
        if not empty:
            image[y0:y0 + size, x0:x0 + size] = 200
            n = 40
            ts.append(rng.integers(max(0, t - period), t + 1, n))
            xs.append(rng.integers(x0, x0 + size, n))
            ys.append(rng.integers(y0, y0 + size, n))
            ps.append(rng.choice([-1, 1], n))
        images.append(image)
        boxes = () if empty else (LabelBox(0, float(x0), float(y0), float(size), float(size), 1),)
        labels.append(GroundTruthLabel(t, boxes))
    cat = lambda parts: np.concatenate(parts) if parts else []
    events = EventStream.from_arrays(geometry, cat(ts), cat(xs), cat(ys), cat(ps))
    return Sequence(name, geometry, times, images, events, labels, 'normal', {'name': name})


def toy_config(**overrides):
    return micro_config(**{'optimizer.lr': 1e-2, 'training.steps_per_epoch': 10,
                           'training.checkpoint_every': 2, **overrides})


@test
def windows_of_consecutive_labels():
    config = toy_config()
    sequence = toy_sequence(config, frames=4)
    w = windows(sequence, 2)
    test.eq([[0, 10_000], [10_000, 20_000], [20_000, 30_000]], [x.times for x in w])
    test.eq([], windows(sequence, 5))
    test.eq("toy[0..10000]", str(w[0]))


@test
def targets_are_normalized():
    config = toy_config()
    sequence = toy_sequence(config)
    classes, boxes = targets(sequence.labels[0], sequence.geometry)
    test.eq([1], classes)
    test.eq([[0.25, 0.4375, 0.25, 0.25]], boxes.tolist())
    classes, boxes = targets(GroundTruthLabel(0, ()), sequence.geometry)
    test.eq(([], (0, 4)), (classes, boxes.shape))


@test
def loss_decreases_on_fixed_window():
    config = toy_config()
    sequence = toy_sequence(config)
    trainer = Trainer(config)
    rows = trainer.run([sequence], steps=50, window=windows(sequence, 2)[-1])
    test.eq(50, len(rows))
    test.eq(list(range(1, 51)), [r['step'] for r in rows])
    test.lt(rows[-1]['total'], rows[0]['total'])
    test.lt(min(r['total'] for r in rows[-10:]), rows[0]['total'])


@test
def loss_log_and_bit_exact_resume(tmp_path):
    config = toy_config(**{'attention.dropout': 0.1})
    sequences = [toy_sequence(config, seed=1), toy_sequence(config, seed=2, name='toy2')]
    straight = Trainer(config, tmp_path/'a')
    straight.run(sequences, steps=3)
    with open(tmp_path/'a'/'loss.csv', newline='') as f:
        rows = list(csv.reader(f))
    test.eq(LOSS_COLUMNS, rows[0])
    test.eq(['1', '2', '3'], [r[0] for r in rows[1:]])
    resumed = Trainer.resume(config, tmp_path/'a'/'checkpoints'/'000002', tmp_path/'b')
    test.eq(2, resumed.step)
    resumed.run(sequences, steps=3)
    for p in straight.store:
        test.truth(np.array_equal(p.values, resumed.store[p.name].values))
    test.eq(straight.adam.step, resumed.adam.step)
    test.eq(straight.rng.state(), resumed.rng.state())


@test
def lr_drops_after_twenty_epochs():
    config = toy_config(**{'optimizer.lr': 2e-4})
    trainer = Trainer(config, step=199)
    test.eq(2e-4, trainer.lr())
    trainer.step = 200
    test.lt(abs(trainer.lr() - 2e-5), 1e-18)


@test
def non_finite_loss_aborts_with_dump(tmp_path):
    config = toy_config()
    sequence = toy_sequence(config)
    trainer = Trainer(config, tmp_path)
    trainer.store["head.class.bias"].values[...] = np.nan
    with test.raises(NumericalAbort, "non-finite predictions at t=10000"):
        trainer.train_step(windows(sequence, 2)[0])
    test.truth((tmp_path/'abort-step0.npz').exists())
    test.eq(0, trainer.step)


@test
def sampling_needs_long_enough_sequences():
    config = toy_config()
    trainer = Trainer(config)
    with test.raises(ValueError, "no sequence holds a window of 2 labeled timestamps"):
        trainer.sample([toy_sequence(config, frames=1)])
