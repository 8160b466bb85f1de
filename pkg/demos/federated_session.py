"""
Three workers, one averaged model
=================================

A synchronous federated round: every worker computes a private gradient
release on its own shard, the coordinator averages the vectors in
worker-id order, and every replica applies the same update. The wire
transport is incidental, so the same session runs here twice: once in
process and once over real TCP sockets, ending in bitwise identical
models.
"""

import hashlib
import threading

import numpy as np

from dpfed.data import SynthSpec, filter_speakers, synth_generate
from dpfed.dpsgd import DpSgdConfig
from dpfed.federation import Coordinator, SessionConfig, WorkerSpec, inproc_session, worker_run
from dpfed.network import NetworkDims
from dpfed.privacy import PrivacyParams
from dpfed.rng import RandomSource

rng = RandomSource(7)
corpus = synth_generate(
    SynthSpec(feature_dim=6, num_classes=5, n_speakers=6,
              sequences_per_speaker=3, frames_per_sequence=15),
    rng.derive("corpus"),
)

dims = NetworkDims(input_dim=6, hidden_dim=8, output_dim=5)
cfg = SessionConfig(n_workers=3, total_steps=8, learning_rate=0.05, dims=dims, init_seed=99)
dp = DpSgdConfig(clip_bound=1.0, step_params=PrivacyParams(100.0, 1e-6),
                 learning_rate=0.05, batch_size=3, noise_override=0.05)
specs = [
    WorkerSpec(worker_id=w, dp_config=dp,
               dataset=filter_speakers(corpus, [2 * w, 2 * w + 1]),
               budget=PrivacyParams(1000.0, 0.01), seed=100 + w)
    for w in range(3)
]


def digest(net):
    return hashlib.sha256(net.flatten().tobytes()).hexdigest()[:12]


def on_round(step, nets):
    tags = {digest(n) for n in nets.values()}
    mark = "in sync" if len(tags) == 1 else "DIVERGED"
    print(f"  round {step}: {sorted(tags)[0]} ({mark})")


print("in-process session:")
inproc = inproc_session(cfg, specs, on_round=on_round)
print(f"finished {inproc.summary.steps_completed} steps, aborted={inproc.summary.aborted}")

print("\nsame session over TCP:")
coord = Coordinator(cfg)
address = coord.bind()
print(f"coordinator listening on {address[0]}:{address[1]}")
box = {}
threads = [threading.Thread(target=lambda: box.setdefault("summary", coord.run()))]
results = {}
threads += [
    threading.Thread(target=lambda s=s: results.setdefault(s.worker_id, worker_run(address, s)))
    for s in specs
]
for t in threads:
    t.start()
for t in threads:
    t.join()
print(f"finished {box['summary'].steps_completed} steps, aborted={box['summary'].aborted}")

for w in sorted(results):
    same = np.array_equal(results[w].network.flatten(), inproc.networks[w].flatten())
    print(f"worker {w}: TCP model identical to in-process model: {same}")

print("\nworker 0 ledger after the TCP session:")
print(results[0].ledger.report())
