"""
Learning to predict merges from simulated traffic
=================================================

Record a few minutes of the ramp-merge simulator, cut lane changes into
scenes, and train the graph model with each adjacency kernel. Training is
kept short here; the acceptance tests run the full 100 epochs.
"""

import time

from lcew import evaluation as ev
from lcew import stgcnn
from lcew.microsim import SimConfig

t0 = time.perf_counter()
corpus = ev.build_corpus(SimConfig(seed=100, warmup=60.0, duration=180.0), T=20, F=40, min_scenes=100)
print(f"{len(corpus)} scenes from {len(corpus.events)} lane changes ({time.perf_counter() - t0:.0f} s)")

report = ev.compare_kernels(corpus, stgcnn.ModelConfig(epochs=20), horizons=(15, 40), seed=0)
print(report["split"])
print(ev.table_text(report))
for (model, h), win in ev.beats_persistence(report).items():
    print(f"{model:>12} at {h} steps beats last-position baseline: {win}")
