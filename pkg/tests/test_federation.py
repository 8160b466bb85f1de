import re
import threading
from fractions import Fraction

import numpy as np
import pytest

from dpfed.data import SynthSpec, synth_generate
from dpfed.dpsgd import BatchSampler, DpSgdConfig, GradientRelease, per_example_gradients
from dpfed.errors import InvalidValue, ProtocolError
from dpfed.federation import (
    Coordinator,
    SessionConfig,
    WorkerSpec,
    average_releases,
    inproc_session,
    worker_run,
    write_transcript,
)
from dpfed.network import NetworkDims, apply_update, init_network
from dpfed.privacy import PrivacyParams
from dpfed.rng import RandomSource
from dpfed.wire import ABORT_BUDGET

DIMS = NetworkDims(3, 4, 5)


def worker_dataset(seed):
    spec = SynthSpec(
        feature_dim=3,
        num_classes=5,
        n_speakers=1,
        sequences_per_speaker=4,
        frames_per_sequence=5,
    )
    return synth_generate(spec, RandomSource(seed))


def make_spec(worker_id, noisy=True, budget_eps=1000.0, clip=1.0):
    cfg = DpSgdConfig(
        clip_bound=clip,
        step_params=PrivacyParams(0.5, 1e-6),
        learning_rate=0.05,
        batch_size=2,
        noise_override=0.01 if noisy else None,
        noisy=noisy,
    )
    return WorkerSpec(
        worker_id=worker_id,
        dp_config=cfg,
        dataset=worker_dataset(100 + worker_id),
        budget=PrivacyParams(budget_eps, 1e-2),
        seed=200 + worker_id,
    )


def session_cfg(n_workers, steps, **over):
    base = dict(
        n_workers=n_workers,
        total_steps=steps,
        learning_rate=0.05,
        dims=DIMS,
        init_seed=7,
        timeout=20.0,
    )
    base.update(over)
    return SessionConfig(**base)


def run_tcp(cfg, specs):
    coord = Coordinator(cfg)
    address = coord.bind()
    box = {}

    def coord_main():
        box["summary"] = coord.run()

    threads = [threading.Thread(target=coord_main)]
    results = {}

    def worker_main(spec):
        results[spec.worker_id] = worker_run(address, spec, timeout=cfg.timeout)

    threads += [threading.Thread(target=worker_main, args=(s,)) for s in specs]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
        assert not t.is_alive(), "session deadlocked"
    return box["summary"], results, coord.transcript


def test_average_releases_order_and_checks():
    mk = lambda step, vec: GradientRelease(step, np.array(vec), PrivacyParams(0.0, 0.0), 1.0, 1, False)
    avg = average_releases([mk(0, [1.0, 2.0]), mk(0, [3.0, 4.0])])
    assert np.array_equal(avg, np.array([2.0, 3.0]))
    with pytest.raises(ProtocolError):
        average_releases([mk(0, [1.0]), mk(1, [1.0])])
    with pytest.raises(ProtocolError):
        average_releases([mk(0, [1.0]), mk(0, [1.0, 2.0])])
    with pytest.raises(InvalidValue):
        average_releases([])


def test_session_config_validation():
    with pytest.raises(InvalidValue):
        session_cfg(0, 1)
    with pytest.raises(InvalidValue):
        session_cfg(1, 1, init_seed=None)
    with pytest.raises(InvalidValue):
        session_cfg(1, 1, init_parameters=np.zeros(DIMS.parameter_count))  # both sources


def test_zero_steps_returns_init_model():
    cfg = session_cfg(1, 0)
    result = inproc_session(cfg, [make_spec(0)])
    expected = init_network(DIMS, RandomSource(7))
    assert np.array_equal(result.networks[0].flatten(), expected.flatten())
    assert result.summary.clean
    assert result.summary.steps_completed == 0


def test_single_worker_plain_session_equals_local_sgd():
    # noisy off and a clip far above any norm: federated averaging over one
    # worker must reproduce plain mini-batch SGD bit for bit
    steps, lr = 10, 0.05
    spec = make_spec(0, noisy=False, clip=1e9)
    cfg = session_cfg(1, steps, learning_rate=lr)
    result = inproc_session(cfg, [spec])

    net = init_network(DIMS, RandomSource(7))
    sampler = BatchSampler(spec.dataset.sequences, spec.dp_config.batch_size, RandomSource(spec.seed).derive("batches"))
    for _ in range(steps):
        batch = sampler.next_batch()
        grads = per_example_gradients(net, batch)
        acc = np.zeros_like(grads[0])
        for g in grads:
            acc += g
        acc /= len(grads)
        net = apply_update(net, acc, lr)

    diff = np.abs(result.networks[0].flatten() - net.flatten()).max()
    assert diff == 0.0


def test_inproc_replicas_stay_identical():
    specs = [make_spec(0, noisy=True), make_spec(1, noisy=False), make_spec(2, noisy=True)]
    cfg = session_cfg(3, 6)
    seen = []

    def check(step, nets):
        flats = [nets[w].flatten() for w in sorted(nets)]
        assert all(np.array_equal(flats[0], f) for f in flats[1:])
        seen.append(step)

    result = inproc_session(cfg, specs, on_round=check)
    assert seen == list(range(6))
    assert result.summary.clean
    # every worker ends with the same bits
    flats = [result.networks[w].flatten() for w in sorted(result.networks)]
    assert all(np.array_equal(flats[0], f) for f in flats[1:])


def test_inproc_transcript_shape():
    specs = [make_spec(i) for i in range(3)]
    result = inproc_session(session_cfg(3, 4), specs)
    kinds = "".join(e.kind[0] for e in result.transcript)  # H, I, G, A, D
    assert re.fullmatch(r"H{3}I{3}(G{3}A{3}){4}D{3}", kinds)
    lines = [e.line() for e in result.transcript]
    assert all(len(l.split("\t")) == 5 for l in lines)


def test_inproc_ledger_accounting():
    specs = [make_spec(0, noisy=True), make_spec(1, noisy=False)]
    result = inproc_session(session_cfg(2, 5), specs)
    assert len(result.ledgers[0].entries) == 5
    # the correctly rounded sum of five copies of the double 1e-6
    exact_delta = float(Fraction(1e-6) * 5)
    assert result.ledgers[0].spent == PrivacyParams(2.5, exact_delta)
    assert len(result.ledgers[1].entries) == 0
    assert result.summary.per_worker_spent[0] == PrivacyParams(2.5, exact_delta)
    assert result.summary.per_worker_spent[1] == PrivacyParams(0.0, 0.0)


def test_inproc_budget_abort_after_exact_steps():
    # budget admits exactly 3 noisy steps of (0.5, 1e-6)
    spec = make_spec(0, noisy=True, budget_eps=1.5)
    cfg = session_cfg(1, 10)
    result = inproc_session(cfg, [spec])
    assert result.summary.aborted == ABORT_BUDGET
    assert result.summary.steps_completed == 3
    assert len(result.ledgers[0].entries) == 3
    assert result.ledgers[0].spent.epsilon == 1.5
    kinds = [e.kind for e in result.transcript]
    assert kinds.count("ABORT") == 2  # one received, one broadcast back
    assert kinds[-1] == "ABORT"


def test_write_transcript(tmp_path):
    result = inproc_session(session_cfg(1, 1), [make_spec(0)])
    path = tmp_path / "transcript.tsv"
    write_transcript(result.transcript, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(result.transcript)
    first = lines[0].split("\t")
    assert first[0] == "recv" and first[2] == "HELLO"


def test_tcp_session_matches_inproc_bit_for_bit():
    specs = [make_spec(0, noisy=True), make_spec(1, noisy=False), make_spec(2, noisy=True)]
    cfg = session_cfg(3, 5)
    local = inproc_session(cfg, specs)
    summary, results, transcript = run_tcp(cfg, specs)

    assert summary.clean
    assert summary.steps_completed == 5
    for wid in (0, 1, 2):
        assert results[wid].clean
        assert np.array_equal(results[wid].network.flatten(), local.networks[wid].flatten())
        assert results[wid].ledger.spent == local.ledgers[wid].spent
    assert summary.per_worker_spent == local.summary.per_worker_spent
    grads = [e for e in transcript if e.kind == "GRAD"]
    assert len(grads) == 15


def test_tcp_budget_abort_propagates():
    # worker 1 can afford exactly 2 steps; everyone must stop at step 2
    specs = [make_spec(0, noisy=True), make_spec(1, noisy=True, budget_eps=1.0)]
    cfg = session_cfg(2, 8)
    summary, results, _ = run_tcp(cfg, specs)
    assert summary.aborted == ABORT_BUDGET
    assert summary.steps_completed == 2
    assert results[1].aborted == ABORT_BUDGET
    assert results[1].steps_completed == 2
    assert len(results[1].ledger.entries) == 2
    assert results[0].aborted == ABORT_BUDGET  # relayed
    # the completed rounds were still applied identically on both workers
    assert np.array_equal(results[0].network.flatten(), results[1].network.flatten())


def test_duplicate_worker_ids_rejected():
    cfg = session_cfg(2, 3)
    ids = [s.worker_id for s in [make_spec(0), make_spec(0)]]
    with pytest.raises(InvalidValue):
        inproc_session(cfg, [make_spec(0), make_spec(0)])
