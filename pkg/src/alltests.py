#!/usr/bin/env python3

import coverage
coverage = coverage.Coverage(source_pkgs=["evdetr"])
coverage.erase()
coverage.start()

import evdetr.tensorcore.tensor
import evdetr.tensorcore.rng
import evdetr.tensorcore.ops
import evdetr.tensorcore.params
import evdetr.tensorcore.optim
import evdetr.tensorcore.gradcheck
import evdetr.tensorcore.checkpoint
import evdetr.events
import evdetr.config
import evdetr.davis_sim.scene
import evdetr.davis_sim.emulator
import evdetr.davis_sim.dataset
import evdetr.davis_sim.suites
import evdetr.backbone
import evdetr.attention
import evdetr.fusion
import evdetr.detection.boxes
import evdetr.detection.matching
import evdetr.detection.losses
import evdetr.detection.model
import evdetr.detection.train
import evdetr.detection.infer
import evdetr.evaluation.metrics
import evdetr.evaluation.evaluate
import evdetr.evaluation.ablation
import evdetr.arguments
import evdetr.plugins
import evdetr.session
import evdetr.__main__


coverage.stop()
coverage.save()
coverage.html_report()
