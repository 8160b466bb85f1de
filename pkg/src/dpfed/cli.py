"""Command line front end for the whole pipeline.

Subcommands: ``synth`` and ``inspect`` for corpora, ``warm-start`` for
public pretraining, ``coordinator`` and ``worker`` for a real TCP
session, ``simulate`` for the same session in one process, and ``eval``
for accuracy reports and the membership gap probe.

Every training or synthesis command takes an explicit --seed; there is
no ambient randomness. Flags may also be supplied through a flat
key=value config file (flags override the file).

Exit codes: 0 success, 2 usage or validation error, 3 transport setup
failure, 4 protocol abort, 5 privacy budget exhaustion.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .data import (
    Dataset,
    OutlierSpec,
    SynthSpec,
    filter_speakers,
    read_dataset,
    synth_generate,
    write_dataset,
)
from .dpsgd import DpSgdConfig, warm_start
from .errors import (
    BudgetExceeded,
    DecodeError,
    DpFedError,
    ProtocolError,
    TimedOut,
    TransportError,
    UsageError,
)
from .evaluation import accuracy, cross_evaluate, membership_gap
from .federation import (
    Coordinator,
    SessionConfig,
    WorkerSpec,
    inproc_session,
    worker_run,
    write_transcript,
)
from .network import Network, NetworkDims, init_network
from .privacy import PrivacyParams
from .rng import RandomSource
from .wire import ABORT_BUDGET, abort_name

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRANSPORT = 3
EXIT_PROTOCOL = 4
EXIT_BUDGET = 5

CONFIG_KEYS = frozenset(
    {
        "dp.epsilon_step",
        "dp.delta_step",
        "dp.clip",
        "dp.noise_override",
        "dp.noisy",
        "train.lr",
        "train.batch",
        "train.epochs",
        "fed.addr",
        "fed.workers",
        "fed.steps",
        "fed.worker_id",
        "model.input_dim",
        "model.hidden",
        "model.classes",
        "budget.eps",
        "budget.delta",
        "data.path",
        "seed",
    }
)

SYNTH_KEYS = frozenset(
    {
        "feature_dim",
        "num_classes",
        "n_speakers",
        "sequences_per_speaker",
        "frames_per_sequence",
        "speaker_offset_scale",
        "noise_scale",
        "outlier.speaker",
        "outlier.multiplier",
    }
)


def _read_kv(path: str, known: frozenset[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _as_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise UsageError(f"expected an integer, got {text!r}") from exc


def _as_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise UsageError(f"expected a number, got {text!r}") from exc
    if not math.isfinite(value):
        raise UsageError(f"expected a finite number, got {text!r}")
    return value


def _as_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise UsageError(f"expected true or false, got {text!r}")


def _bool_flag(text: str) -> bool:
    try:
        return _as_bool(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


_MISSING = object()


def _pick(flag_value, cfg: dict[str, str], key: str, cast, default=_MISSING):
    """Resolve one setting: flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    if key in cfg:
        return cast(cfg[key])
    if default is _MISSING:
        raise UsageError(f"missing required setting {key} (flag or config)")
    return default


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise UsageError(f"address must be host:port, got {text!r}")
    return host, _as_int(port)


def _load_config(path: str | None) -> dict[str, str]:
    return _read_kv(path, CONFIG_KEYS) if path else {}


def _require_seed(args, cfg: dict[str, str]) -> int:
    seed = _pick(args.seed, cfg, "seed", _as_int, None)
    if seed is None:
        raise UsageError("--seed is required (no ambient randomness)")
    return seed


def _dp_config(args, cfg: dict[str, str]) -> DpSgdConfig:
    return DpSgdConfig(
        clip_bound=_pick(args.clip, cfg, "dp.clip", _as_float, 1.0),
        step_params=PrivacyParams(
            _pick(args.epsilon_step, cfg, "dp.epsilon_step", _as_float, 100.0),
            _pick(args.delta_step, cfg, "dp.delta_step", _as_float, 1e-6),
        ),
        learning_rate=_pick(args.lr, cfg, "train.lr", _as_float, 1e-4),
        batch_size=_pick(args.batch, cfg, "train.batch", _as_int, 4),
        noise_override=_pick(args.noise_override, cfg, "dp.noise_override", _as_float, None),
        noisy=_pick(args.noisy, cfg, "dp.noisy", _as_bool, True),
    )


def _print_summary(summary) -> None:
    status = "clean" if summary.clean else f"aborted: {abort_name(summary.aborted)}"
    print(f"steps completed  {summary.steps_completed}")
    print(f"status           {status}")
    for wid in sorted(summary.per_worker_spent):
        spent = summary.per_worker_spent[wid]
        print(f"worker {wid} spent   eps={spent.epsilon:g} delta={spent.delta:g}")


def _abort_exit(aborted: int | None) -> int:
    if aborted is None:
        return EXIT_OK
    return EXIT_BUDGET if aborted == ABORT_BUDGET else EXIT_PROTOCOL


def cmd_synth(args) -> int:
    values = _read_kv(args.spec, SYNTH_KEYS) if args.spec else {}
    outlier = None
    if "outlier.speaker" in values or "outlier.multiplier" in values:
        if not ("outlier.speaker" in values and "outlier.multiplier" in values):
            raise UsageError("outlier.speaker and outlier.multiplier go together")
        outlier = OutlierSpec(
            speaker_index=_as_int(values["outlier.speaker"]),
            offset_multiplier=_as_float(values["outlier.multiplier"]),
        )
    spec = SynthSpec(
        feature_dim=_as_int(values.get("feature_dim", "13")),
        num_classes=_as_int(values.get("num_classes", "32")),
        n_speakers=_as_int(values.get("n_speakers", "6")),
        sequences_per_speaker=_as_int(values.get("sequences_per_speaker", "10")),
        frames_per_sequence=_as_int(values.get("frames_per_sequence", "50")),
        speaker_offset_scale=_as_float(values.get("speaker_offset_scale", "0.35")),
        noise_scale=_as_float(values.get("noise_scale", "0.25")),
        outlier=outlier,
    )
    if args.seed is None:
        raise UsageError("--seed is required (no ambient randomness)")
    dataset = synth_generate(spec, RandomSource(args.seed))
    write_dataset(dataset, args.out)
    print(f"wrote {args.out}")
    print(f"speakers   {spec.n_speakers}")
    print(f"sequences  {dataset.n_sequences}")
    print(f"frames     {dataset.n_frames}")
    if outlier is not None:
        print(f"outlier    speaker {outlier.speaker_index} offset x{outlier.offset_multiplier:g}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    dataset = read_dataset(args.data)
    print(f"feature_dim  {dataset.feature_dim}")
    print(f"classes      {dataset.num_classes}")
    print(f"sequences    {dataset.n_sequences}")
    print(f"frames       {dataset.n_frames}")
    for spk in dataset.speaker_ids:
        seqs = [s for s in dataset.sequences if s.speaker_id == spk]
        frames = sum(s.n_frames for s in seqs)
        print(f"speaker {spk:>4}  {len(seqs)} sequences, {frames} frames")
    return EXIT_OK


def cmd_warm_start(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    dataset = read_dataset(_pick(args.data, cfg, "data.path", str))
    if dataset.n_sequences == 0:
        raise UsageError("dataset has no sequences to train on")
    epochs = _pick(args.epochs, cfg, "train.epochs", _as_int, 51)
    lr = _pick(args.lr, cfg, "train.lr", _as_float, 1e-4)
    batch = _pick(args.batch, cfg, "train.batch", _as_int, 4)
    root = RandomSource(seed)
    if args.init_model:
        net = Network.load(args.init_model)
    else:
        dims = NetworkDims(
            input_dim=_pick(None, cfg, "model.input_dim", _as_int, dataset.feature_dim),
            hidden_dim=_pick(args.hidden, cfg, "model.hidden", _as_int, 16),
            output_dim=_pick(None, cfg, "model.classes", _as_int, dataset.num_classes),
        )
        net = init_network(dims, root.derive("init"))
    trained = warm_start(net, dataset.sequences, epochs, lr, batch, root.derive("warm"))
    trained.save(args.out)
    print(f"wrote {args.out}")
    print(f"epochs     {epochs}")
    print(f"parameters {trained.parameter_count}")
    return EXIT_OK


def cmd_coordinator(args) -> int:
    cfg = _load_config(args.config)
    host, port = _parse_addr(_pick(args.listen, cfg, "fed.addr", str, "127.0.0.1:0"))
    init_seed = None
    init_parameters = None
    if args.init_model:
        start = Network.load(args.init_model)
        dims = start.dims
        init_parameters = start.flatten()
    else:
        seed_val = _pick(args.seed, cfg, "seed", _as_int, None)
        if seed_val is None:
            raise UsageError("need --init-model or --seed for the initial model")
        init_seed = seed_val
        dims = NetworkDims(
            input_dim=_pick(args.input_dim, cfg, "model.input_dim", _as_int),
            hidden_dim=_pick(args.hidden, cfg, "model.hidden", _as_int),
            output_dim=_pick(args.classes, cfg, "model.classes", _as_int),
        )
    session = SessionConfig(
        n_workers=_pick(args.workers, cfg, "fed.workers", _as_int),
        total_steps=_pick(args.steps, cfg, "fed.steps", _as_int),
        learning_rate=_pick(args.lr, cfg, "train.lr", _as_float, 1e-4),
        dims=dims,
        init_seed=init_seed,
        init_parameters=init_parameters,
        host=host,
        port=port,
        timeout=args.timeout,
    )
    coordinator = Coordinator(session)
    bound_host, bound_port = coordinator.bind()
    print(f"listening on {bound_host}:{bound_port}", flush=True)
    summary = coordinator.run()
    if args.transcript:
        write_transcript(coordinator.transcript, args.transcript)
        print(f"wrote {args.transcript}")
    _print_summary(summary)
    return _abort_exit(summary.aborted)


def cmd_worker(args) -> int:
    cfg = _load_config(args.config)
    seed = _require_seed(args, cfg)
    address = _parse_addr(_pick(args.connect, cfg, "fed.addr", str))
    dataset = read_dataset(_pick(args.data, cfg, "data.path", str))
    spec = WorkerSpec(
        worker_id=_pick(args.worker_id, cfg, "fed.worker_id", _as_int),
        dp_config=_dp_config(args, cfg),
        dataset=dataset,
        budget=PrivacyParams(
            _pick(args.budget_eps, cfg, "budget.eps", _as_float),
            _pick(args.budget_delta, cfg, "budget.delta", _as_float),
        ),
        seed=seed,
    )
    result = worker_run(address, spec, timeout=args.timeout)
    if args.out:
        result.network.save(args.out)
        print(f"wrote {args.out}")
    if args.ledger:
        Path(args.ledger).write_text(result.ledger.report() + "\n")
        print(f"wrote {args.ledger}")
    status = "clean" if result.clean else f"aborted: {abort_name(result.aborted)}"
    print(f"steps completed  {result.steps_completed}")
    print(f"status           {status}")
    return _abort_exit(result.aborted)


def cmd_simulate(args) -> int:
    worker_cfgs = [_load_config(path) for path in args.workers_config]
    datasets = [read_dataset(_pick(None, cfg, "data.path", str)) for cfg in worker_cfgs]
    feature_dims = {ds.feature_dim for ds in datasets}
    class_counts = {ds.num_classes for ds in datasets}
    if len(feature_dims) != 1 or len(class_counts) != 1:
        raise UsageError("worker datasets disagree on feature_dim or classes")
    root = RandomSource(args.seed)
    first = worker_cfgs[0]
    if args.init_model:
        start = Network.load(args.init_model)
        dims = start.dims
        init_seed, init_parameters = None, start.flatten()
    else:
        dims = NetworkDims(
            input_dim=feature_dims.pop(),
            hidden_dim=_pick(args.hidden, first, "model.hidden", _as_int, 16),
            output_dim=class_counts.pop(),
        )
        init_seed, init_parameters = root.derive_seed("init"), None
    steps = args.steps

    def budget(cfg: dict[str, str], dp: DpSgdConfig) -> PrivacyParams:
        # default budget covers exactly the requested steps, summed the
        # same way the ledger will sum them
        eps = _pick(None, cfg, "budget.eps", _as_float, None)
        delta = _pick(None, cfg, "budget.delta", _as_float, None)
        if eps is None:
            eps = math.fsum([dp.step_params.epsilon] * steps)
        if delta is None:
            delta = math.fsum([dp.step_params.delta] * steps)
        return PrivacyParams(eps, delta)

    class _NoFlags:
        clip = epsilon_step = delta_step = lr = batch = noise_override = noisy = None

    specs = []
    for wid, cfg in enumerate(worker_cfgs):
        dp = _dp_config(_NoFlags, cfg)
        specs.append(
            WorkerSpec(
                worker_id=wid,
                dp_config=dp,
                dataset=datasets[wid],
                budget=budget(cfg, dp),
                seed=_pick(None, cfg, "seed", _as_int, root.derive_seed("worker", wid)),
            )
        )
    session = SessionConfig(
        n_workers=len(specs),
        total_steps=steps,
        learning_rate=_pick(args.lr, first, "train.lr", _as_float, 1e-4),
        dims=dims,
        init_seed=init_seed,
        init_parameters=init_parameters,
    )
    result = inproc_session(session, specs)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        for wid in sorted(result.networks):
            result.networks[wid].save(out_dir / f"worker_{wid}.net")
            ledger_path = out_dir / f"worker_{wid}.ledger.txt"
            ledger_path.write_text(result.ledgers[wid].report() + "\n")
        write_transcript(result.transcript, out_dir / "transcript.tsv")
        print(f"wrote models, ledgers and transcript under {out_dir}")
    report = cross_evaluate(
        [(f"worker{wid}", result.networks[wid]) for wid in sorted(result.networks)],
        [(f"data{wid}", datasets[wid]) for wid in range(len(datasets))],
    )
    if args.report:
        Path(args.report).write_text(report.render_tsv())
        print(f"wrote {args.report}")
    print(report.render_text())
    _print_summary(result.summary)
    return _abort_exit(result.summary.aborted)


def cmd_eval(args) -> int:
    net = Network.load(args.model)
    dataset = read_dataset(args.data)
    print(accuracy(net, dataset).render_text())
    if (args.baseline is None) != (args.probe_speaker is None):
        raise UsageError("--baseline and --probe-speaker go together")
    if args.baseline is not None:
        baseline = Network.load(args.baseline)
        probe_set = filter_speakers(dataset, [args.probe_speaker])
        probe = membership_gap(net, baseline, probe_set)
        print(
            f"speaker {args.probe_speaker} gap {probe.gap_points:+.1f} points"
            f" vs baseline: {probe.verdict()}"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfed",
        description="Differentially private federated training of a frame classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic SENO corpus")
    p.add_argument("--spec", help="key=value synthesis recipe file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, help="generator seed (required)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="summarize a SENO dataset file")
    p.add_argument("--data", required=True, help="dataset path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("warm-start", help="non-private pretraining on public data")
    p.add_argument("--data", help="training dataset path")
    p.add_argument("--epochs", type=int, help="training epochs (default 51)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--batch", type=int, help="batch size (default 4)")
    p.add_argument("--hidden", type=int, help="hidden units when initializing fresh (default 16)")
    p.add_argument("--init-model", help="start from this model instead of a fresh init")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int, help="training seed (required)")
    p.add_argument("--config", help="key=value config file")
    p.set_defaults(func=cmd_warm_start)

    p = sub.add_parser("coordinator", help="run the TCP session coordinator")
    p.add_argument("--listen", help="host:port to listen on (default 127.0.0.1:0)")
    p.add_argument("--workers", type=int, help="number of workers to wait for")
    p.add_argument("--steps", type=int, help="federated steps to run")
    p.add_argument("--lr", type=float, help="learning rate sent in INIT (default 1e-4)")
    p.add_argument("--init-model", help="initial model file; otherwise --seed initializes")
    p.add_argument("--seed", type=int, help="init seed when no --init-model")
    p.add_argument("--input-dim", type=int, help="model input dim (with --seed)")
    p.add_argument("--hidden", type=int, help="model hidden units (with --seed)")
    p.add_argument("--classes", type=int, help="model classes (with --seed)")
    p.add_argument("--timeout", type=float, default=60.0, help="socket timeout seconds")
    p.add_argument("--transcript", help="write the message transcript here")
    p.add_argument("--config", help="key=value config file")
    p.set_defaults(func=cmd_coordinator)

    p = sub.add_parser("worker", help="run one TCP worker")
    p.add_argument("--connect", help="coordinator host:port")
    p.add_argument("--data", help="private dataset path")
    p.add_argument("--worker-id", type=int, help="unique worker id")
    p.add_argument("--budget-eps", type=float, help="total epsilon budget")
    p.add_argument("--budget-delta", type=float, help="total delta budget")
    p.add_argument("--epsilon-step", type=float, help="per-release epsilon (default 100)")
    p.add_argument("--delta-step", type=float, help="per-release delta (default 1e-6)")
    p.add_argument("--clip", type=float, help="L2 clip bound (default 1)")
    p.add_argument("--noise-override", type=float, help="noise sigma override")
    p.add_argument("--noisy", type=_bool_flag, help="true for private releases (default true)")
    p.add_argument("--lr", type=float, help="worker-side learning rate bookkeeping")
    p.add_argument("--batch", type=int, help="batch size (default 4)")
    p.add_argument("--out", help="write the final model here")
    p.add_argument("--ledger", help="write the ledger report here")
    p.add_argument("--timeout", type=float, default=60.0, help="socket timeout seconds")
    p.add_argument("--seed", type=int, help="worker seed (required)")
    p.add_argument("--config", help="key=value config file")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("simulate", help="run a whole session in one process")
    p.add_argument(
        "--workers-config", nargs="+", required=True, metavar="FILE",
        help="one key=value config file per worker (needs data.path)",
    )
    p.add_argument("--steps", type=int, required=True, help="federated steps to run")
    p.add_argument("--seed", type=int, required=True, help="session seed")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--hidden", type=int, help="hidden units for a fresh init (default 16)")
    p.add_argument("--init-model", help="initial model file; otherwise seeded init")
    p.add_argument("--report", help="write the accuracy table here as TSV")
    p.add_argument("--out-dir", help="write models, ledgers and transcript here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="accuracy report and membership gap probe")
    p.add_argument("--model", required=True, help="model to evaluate")
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--baseline", help="baseline model for the gap probe")
    p.add_argument("--probe-speaker", type=int, help="speaker id to probe")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BudgetExceeded as exc:
        print(f"dpfed: budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ProtocolError, DecodeError) as exc:
        print(f"dpfed: protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (TransportError, TimedOut) as exc:
        print(f"dpfed: transport failure: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except DpFedError as exc:
        print(f"dpfed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"dpfed: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
