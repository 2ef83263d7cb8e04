"""Command-line front end: configure mock model pairs, run strategies, report.

Subcommands
    run      execute each configured strategy ``trials`` times, writing
             ``<out>/<run-id>/tokens.json``, ``stats.json`` and ``trace.csv``
             per run, and printing a summary (plus a comparison table when
             two or more strategies ran).
    compare  run all strategies on identical prompts/seeds, refuse to print
             timings unless their token outputs are identical, then emit a
             speedup table against the first strategy.
    trace    re-emit a previous run's tokens-over-time series as CSV on
             stdout (columns ``t_ms,verified_tokens``).

The config file is JSON with ``prompt``, ``model``, ``decode``, ``latency``
and ``execution`` sections; ``--seed``, ``--backend`` and ``--out-dir``
override the corresponding fields. All randomness flows from the single
config seed, and with the simulate backend equal configs produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .engines import (
    DecodeConfig,
    DecodeResult,
    ThreadExecutor,
    decode_autoregressive,
    decode_speculative_async,
    decode_speculative_sync,
)
from .errors import ConfigError, ProtocolViolationError, SpecDecError
from .metrics import (
    DecodeTrace,
    compare_runs,
    export_timeline,
    read_trace_csv,
    timeline_to_csv,
    trace_to_csv,
)
from .models import (
    HashChainModel,
    MockModel,
    ScriptedModel,
    load_script,
    make_agreement_pair,
)
from .simulator import (
    ENGINE_ASYNC,
    ENGINE_AUTOREGRESSIVE,
    ENGINE_KINDS,
    ENGINE_SYNC,
    LatencyModel,
    simulate,
)

BACKEND_SIMULATE = "simulate"
BACKEND_CONCURRENT = "concurrent"
BACKENDS = (BACKEND_SIMULATE, BACKEND_CONCURRENT)

MODEL_KINDS = ("agreement_pair", "hash_chain", "scripted")

DEFAULT_PROMPT = [1, 2, 3, 4]


@dataclass(frozen=True)
class ModelSection:
    kind: str = "agreement_pair"
    seed: int = 0
    vocab_size: int = 32000
    eos_token: int = 2
    rho: float = 0.8
    exclude_eos: bool = False
    script_path: str | None = None
    eos_position: int | None = None


@dataclass(frozen=True)
class DecodeSection:
    max_new_tokens: int = 256
    draft_window_k: int = 4
    max_draft_lead: int | None = None


@dataclass(frozen=True)
class ExecutionSection:
    backend: str = BACKEND_SIMULATE
    strategies: tuple[str, ...] = ENGINE_KINDS
    out_dir: str = "runs"
    trials: int = 1
    sleep_injection: bool = False
    poll_jitter_ms: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    prompt: tuple[int, ...] = tuple(DEFAULT_PROMPT)
    model: ModelSection = ModelSection()
    decode: DecodeSection = DecodeSection()
    latency: LatencyModel = LatencyModel()
    execution: ExecutionSection = ExecutionSection()

    def to_dict(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "model": dataclasses.asdict(self.model),
            "decode": dataclasses.asdict(self.decode),
            "latency": dataclasses.asdict(self.latency),
            "execution": {
                **dataclasses.asdict(self.execution),
                "strategies": list(self.execution.strategies),
            },
        }


def _section(data: dict, name: str, cls, post=None):
    raw = data.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key '{name}.{sorted(unknown)[0]}'")
    if post:
        raw = post(dict(raw))
    try:
        return cls(**raw)
    except SpecDecError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    """Validate a raw config dict. Error messages name the offending field."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - {"prompt", "model", "decode", "latency", "execution"}
    if unknown:
        raise ConfigError(f"unknown top-level key '{sorted(unknown)[0]}'")

    prompt = data.get("prompt", DEFAULT_PROMPT)
    if not isinstance(prompt, list) or not prompt or not all(isinstance(t, int) for t in prompt):
        raise ConfigError("prompt must be a non-empty list of integers")

    model = _section(data, "model", ModelSection)
    if model.kind not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {model.kind!r}")
    if not isinstance(model.seed, int):
        raise ConfigError("model.seed must be an integer")
    if model.vocab_size < 2:
        raise ConfigError(f"model.vocab_size must be >= 2, got {model.vocab_size}")
    if not 0 <= model.eos_token < model.vocab_size:
        raise ConfigError(
            f"model.eos_token must be in [0, {model.vocab_size}), got {model.eos_token}"
        )
    if not 0.0 <= model.rho <= 1.0:
        raise ConfigError(f"model.rho must be in [0, 1], got {model.rho}")
    if model.kind == "scripted" and not model.script_path:
        raise ConfigError("model.script_path is required when model.kind is 'scripted'")

    decode = _section(data, "decode", DecodeSection)
    if decode.max_new_tokens < 1:
        raise ConfigError(f"decode.max_new_tokens must be >= 1, got {decode.max_new_tokens}")
    if decode.draft_window_k < 1:
        raise ConfigError(f"decode.draft_window_k must be >= 1, got {decode.draft_window_k}")
    if decode.max_draft_lead is not None and decode.max_draft_lead < 1:
        raise ConfigError(
            f"decode.max_draft_lead must be >= 1 when set, got {decode.max_draft_lead}"
        )

    raw_latency = data.get("latency", {})
    known = {f.name for f in dataclasses.fields(LatencyModel)}
    unknown = set(raw_latency) - known
    if unknown:
        raise ConfigError(f"unknown key 'latency.{sorted(unknown)[0]}'")
    for name, value in raw_latency.items():
        if not isinstance(value, (int, float)) or value < 0:
            raise ConfigError(f"latency.{name} must be a non-negative number, got {value!r}")
    latency = LatencyModel(**raw_latency)

    execution = _section(
        data, "execution", ExecutionSection,
        post=lambda raw: {**raw, "strategies": tuple(raw.get("strategies", ENGINE_KINDS))},
    )
    if execution.backend not in BACKENDS:
        raise ConfigError(
            f"execution.backend must be one of {BACKENDS}, got {execution.backend!r}"
        )
    if not execution.strategies:
        raise ConfigError("execution.strategies must list at least one strategy")
    for strategy in execution.strategies:
        if strategy not in ENGINE_KINDS:
            raise ConfigError(
                f"execution.strategies entry {strategy!r} is not one of {ENGINE_KINDS}"
            )
    if execution.trials < 1:
        raise ConfigError(f"execution.trials must be >= 1, got {execution.trials}")
    if execution.poll_jitter_ms < 0:
        raise ConfigError(
            f"execution.poll_jitter_ms must be non-negative, got {execution.poll_jitter_ms}"
        )

    return RunConfig(
        prompt=tuple(prompt), model=model, decode=decode, latency=latency, execution=execution
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config(data)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- #
# Model construction and strategy execution
# --------------------------------------------------------------------------- #


def build_models(model: ModelSection, seed: int) -> tuple[MockModel, MockModel]:
    """Build the (draft, verify) pair described by the model section."""
    if model.kind == "agreement_pair":
        return make_agreement_pair(
            seed, model.rho, model.vocab_size, model.eos_token, model.exclude_eos
        )
    if model.kind == "hash_chain":
        verify = HashChainModel(seed, model.vocab_size, model.eos_token, model.exclude_eos)
        draft = HashChainModel(seed, model.vocab_size, model.eos_token, model.exclude_eos)
        return draft, verify
    script = load_script(model.script_path)
    verify = ScriptedModel(script, model.vocab_size, model.eos_token, model.eos_position)
    draft = ScriptedModel(script, model.vocab_size, model.eos_token, model.eos_position)
    return draft, verify


def run_strategy(
    strategy: str,
    draft: MockModel,
    verify: MockModel,
    prompt: list[int],
    decode_config: DecodeConfig,
    config: RunConfig,
) -> DecodeResult:
    if config.execution.backend == BACKEND_SIMULATE:
        result, _ = simulate(strategy, draft, verify, prompt, decode_config, config.latency)
        return result
    if strategy == ENGINE_AUTOREGRESSIVE:
        return decode_autoregressive(verify, prompt, decode_config)
    if strategy == ENGINE_SYNC:
        return decode_speculative_sync(draft, verify, prompt, decode_config)
    executor = ThreadExecutor(
        poll_jitter_ms=config.execution.poll_jitter_ms,
        jitter_seed=decode_config.seed,
        sleep_latency=config.latency if config.execution.sleep_injection else None,
    )
    return decode_speculative_async(draft, verify, prompt, decode_config, executor=executor)


def _decode_config(config: RunConfig, seed: int) -> DecodeConfig:
    return DecodeConfig(
        max_new_tokens=config.decode.max_new_tokens,
        draft_window_k=config.decode.draft_window_k,
        max_draft_lead=config.decode.max_draft_lead,
        seed=seed,
    )


def run_id(strategy: str, trial: int) -> str:
    return f"{strategy}-t{trial}"


def _write_run_outputs(out_dir: Path, rid: str, result: DecodeResult, prompt_length: int) -> None:
    run_dir = out_dir / rid
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "tokens.json").write_text(
        json.dumps(
            {
                "finished_by": result.finished_by,
                "prompt_length": prompt_length,
                "tokens": result.tokens,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    (run_dir / "stats.json").write_text(
        json.dumps(result.stats.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (run_dir / "trace.csv").write_text(trace_to_csv(result.trace), encoding="utf-8")


def _aggregate_mean(stats_list) -> float:
    total_ms = sum(s.total_ms for s in stats_list)
    total_tokens = sum(s.generated_tokens for s in stats_list)
    return total_ms / total_tokens


class _MeanStats:
    """Duck-typed stand-in for DecodeStats inside comparison tables."""

    def __init__(self, mean_ms_per_token: float) -> None:
        self.mean_ms_per_token = mean_ms_per_token


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def cmd_run(config: RunConfig) -> int:
    out_dir = Path(config.execution.out_dir)
    prompt = list(config.prompt)
    per_strategy: dict[str, list] = {s: [] for s in config.execution.strategies}
    for trial in range(config.execution.trials):
        seed = config.model.seed + trial
        decode_config = _decode_config(config, seed)
        for strategy in config.execution.strategies:
            draft, verify = build_models(config.model, seed)
            rid = run_id(strategy, trial)
            try:
                result = run_strategy(strategy, draft, verify, prompt, decode_config, config)
            except ProtocolViolationError as exc:
                (out_dir / rid).mkdir(parents=True, exist_ok=True)
                (out_dir / rid / "FAILED").write_text(f"{exc}\n", encoding="utf-8")
                print(f"FAILED {rid}: protocol violation: {exc}", file=sys.stderr)
                return 1
            _write_run_outputs(out_dir, rid, result, len(prompt))
            per_strategy[strategy].append(result.stats)
            print(
                f"{rid}: {len(result.tokens)} tokens ({result.finished_by}), "
                f"{result.stats.mean_ms_per_token:.3f} ms/token, "
                f"{result.stats.rollbacks} rollbacks"
            )
    if len(config.execution.strategies) >= 2:
        entries = [
            (strategy, _MeanStats(_aggregate_mean(stats)))
            for strategy, stats in per_strategy.items()
        ]
        print()
        print(compare_runs(entries).to_text())
    return 0


def cmd_compare(config: RunConfig) -> int:
    if len(config.execution.strategies) < 2:
        print("compare requires at least two strategies in execution.strategies", file=sys.stderr)
        return 2
    prompt = list(config.prompt)
    per_strategy: dict[str, list] = {s: [] for s in config.execution.strategies}
    for trial in range(config.execution.trials):
        seed = config.model.seed + trial
        decode_config = _decode_config(config, seed)
        outputs: dict[str, list[int]] = {}
        for strategy in config.execution.strategies:
            draft, verify = build_models(config.model, seed)
            result = run_strategy(strategy, draft, verify, prompt, decode_config, config)
            outputs[strategy] = result.tokens
            per_strategy[strategy].append(result.stats)
        baseline_strategy = config.execution.strategies[0]
        for strategy in config.execution.strategies[1:]:
            if outputs[strategy] != outputs[baseline_strategy]:
                print(
                    f"CORRECTNESS BUG: trial {trial}: {strategy} output differs from "
                    f"{baseline_strategy}; refusing to print timings",
                    file=sys.stderr,
                )
                return 1
    entries = [
        (strategy, _MeanStats(_aggregate_mean(stats)))
        for strategy, stats in per_strategy.items()
    ]
    table = compare_runs(entries)
    print(table.to_text())
    out_dir = Path(config.execution.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.json").write_text(
        json.dumps({"baseline": table.baseline, "rows": table.to_records()}, sort_keys=True, indent=2)
        + "\n",
        encoding="utf-8",
    )
    return 0


def cmd_trace(config: RunConfig, rid: str) -> int:
    run_dir = Path(config.execution.out_dir) / rid
    trace_path = run_dir / "trace.csv"
    tokens_path = run_dir / "tokens.json"
    stats_path = run_dir / "stats.json"
    if not (trace_path.exists() and tokens_path.exists() and stats_path.exists()):
        print(f"no run artifacts found for id {rid!r} under {run_dir.parent}", file=sys.stderr)
        return 1
    meta = json.loads(tokens_path.read_text(encoding="utf-8"))
    stats = json.loads(stats_path.read_text(encoding="utf-8"))
    trace: DecodeTrace = read_trace_csv(trace_path, stats["clock"], meta["prompt_length"])
    sys.stdout.write(timeline_to_csv(export_timeline(trace)))
    return 0


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specdec", description="Speculative-decoding engines and simulator benchmark."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run the configured strategies and write per-run artifacts"),
        ("compare", "run all strategies, check output equality, print a speedup table"),
        ("trace", "emit a prior run's tokens-over-time CSV on stdout"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to the JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override model.seed")
        p.add_argument("--backend", choices=BACKENDS, default=None, help="override execution.backend")
        p.add_argument("--out-dir", default=None, help="override execution.out_dir")
        if name == "trace":
            p.add_argument("run_id", help="run id, e.g. async_speculative-t0")
    return parser


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        config = dataclasses.replace(
            config, model=dataclasses.replace(config.model, seed=args.seed)
        )
    if args.backend is not None:
        config = dataclasses.replace(
            config, execution=dataclasses.replace(config.execution, backend=args.backend)
        )
    if args.out_dir is not None:
        config = dataclasses.replace(
            config, execution=dataclasses.replace(config.execution, out_dir=args.out_dir)
        )
    return config


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "compare":
            return cmd_compare(config)
        return cmd_trace(config, args.run_id)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SpecDecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
