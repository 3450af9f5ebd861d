"""Command-line entry points.

Commands: ``decompose`` (structure a free-form prompt), ``optimize`` (run the
refinement loop), ``eval`` (score a prompt on a dataset), ``compare`` (line
up result files), ``diff`` (per-section prompt diff). Exit codes: 0 success,
1 semantic difference (``diff`` only), 2 input error, 3 aborted run.

Settings come from an INI config file and command-line flags; flags win.
Backends run in one of three modes: ``mock`` (deterministic built-ins, the
default), ``live`` (HTTP, needs a base URL), or ``replay`` (serve responses
from a recorded transcript).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .backends import (
    BackendError,
    CriticBackend,
    HTTPBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    Transcript,
)
from .critic import TextualGradient
from .evaluation import (
    DATASET_FORMATS,
    DatasetError,
    DatasetMismatch,
    EvalResult,
    EvaluationAborted,
    compare,
    evaluate,
    load_dataset,
    sample_items,
)
from .mocks import HeadingRuleExtractor, MockCritic, MockSolver
from .optimizer import (
    DedupMode,
    OptimizationAborted,
    OptimizerConfig,
    RunHistory,
    growth_metrics,
    optimize,
)
from .schema import (
    EmptyInput,
    ExtractorFailure,
    PromptState,
    SchemaError,
    decompose_unstructured,
    diff_states,
    parse_structured_prompt,
    render_prompt,
)
from .templating import PromptTemplate, load_template

logger = logging.getLogger(__name__)

MODES = ("mock", "live", "replay")
TEMPLATE_NAMES = ("gradient", "consolidate", "decompose", "rewrite", "question")


class CLIError(Exception):
    """User-facing failure with an exit code."""

    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Merged settings from built-in defaults, the config file, and flags."""

    mode: str = "mock"
    base_url: str | None = None
    critic_model: str = "critic"
    solver_model: str = "solver"
    extractor_model: str = "extractor"
    timeout: float = 60.0
    iterations: int = 3
    dedup: DedupMode = DedupMode.LEXICAL
    concurrency: int = 1
    max_section_tokens: int = 800
    dataset_format: str = "generic_jsonl"
    split: str = "test"
    limit: int | None = None
    seed: int = 0
    out_dir: Path = Path("mpo-run")
    record: bool = False
    replay_path: Path | None = None
    templates: dict[str, Path] = field(default_factory=dict)

    def optimizer_config(self) -> OptimizerConfig:
        try:
            return OptimizerConfig(
                iterations=self.iterations,
                dedup_mode=self.dedup,
                concurrency_width=self.concurrency,
                max_section_tokens=self.max_section_tokens,
            )
        except ValueError as exc:
            raise CLIError(str(exc)) from exc

    def template(self, name: str) -> PromptTemplate | None:
        path = self.templates.get(name)
        if path is None:
            return None
        try:
            return load_template(path)
        except OSError as exc:
            raise CLIError(f"cannot read template {name!r}: {exc}") from exc


_CONFIG_SCHEMA = {
    "backend": ("mode", "base_url", "critic_model", "solver_model", "extractor_model", "timeout"),
    "optimizer": ("iterations", "dedup", "concurrency", "max_section_tokens"),
    "eval": ("dataset_format", "split", "limit", "seed"),
    "templates": TEMPLATE_NAMES,
}


def load_config_file(path: Path) -> dict:
    """Read the INI config into a flat dict of known keys."""
    parser = configparser.ConfigParser()
    try:
        with path.open("r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise CLIError(f"cannot read config file: {exc}") from exc
    except configparser.Error as exc:
        raise CLIError(f"invalid config file: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise CLIError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in _CONFIG_SCHEMA[section]:
                raise CLIError(f"unknown config key {key!r} in [{section}]")
            if section == "templates":
                values.setdefault("templates", {})[key] = Path(value)
            else:
                values[key] = value
    return values


def _parse_int(value, name: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise CLIError(f"{name} must be an integer, got {value!r}") from None


def build_run_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    file_values: dict = {}
    if getattr(args, "config", None):
        file_values = load_config_file(Path(args.config))

    for key in ("base_url", "critic_model", "solver_model", "extractor_model", "split"):
        if key in file_values:
            setattr(config, key, file_values[key])
    if "timeout" in file_values:
        try:
            config.timeout = float(file_values["timeout"])
        except ValueError:
            raise CLIError(f"timeout must be a number, got {file_values['timeout']!r}") from None
    for key in ("iterations", "concurrency", "max_section_tokens", "seed"):
        if key in file_values:
            setattr(config, key, _parse_int(file_values[key], key))
    if "limit" in file_values:
        config.limit = _parse_int(file_values["limit"], "limit")
    if "dedup" in file_values:
        config.dedup = _parse_dedup(file_values["dedup"])
    if "dataset_format" in file_values:
        config.dataset_format = file_values["dataset_format"]
    if "templates" in file_values:
        config.templates = file_values["templates"]
    file_mode = file_values.get("mode")
    if file_mode is not None and file_mode not in ("mock", "live"):
        raise CLIError(f"config mode must be 'mock' or 'live', got {file_mode!r}")

    # Flags override the file; mode flags take precedence in a fixed order.
    if getattr(args, "replay", None):
        config.mode = "replay"
        config.replay_path = Path(args.replay)
    elif getattr(args, "mock", False):
        config.mode = "mock"
    elif getattr(args, "live", False):
        config.mode = "live"
    elif file_mode is not None:
        config.mode = file_mode

    if getattr(args, "out", None):
        config.out_dir = Path(args.out)
    if getattr(args, "record", False):
        config.record = True
    if getattr(args, "iterations", None) is not None:
        config.iterations = args.iterations
    if getattr(args, "dedup", None) is not None:
        config.dedup = _parse_dedup(args.dedup)
    if getattr(args, "limit", None) is not None:
        config.limit = args.limit
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "format", None) is not None:
        config.dataset_format = args.format
    if getattr(args, "split", None) is not None:
        config.split = args.split

    if config.dataset_format not in DATASET_FORMATS:
        raise CLIError(
            f"dataset format must be one of {DATASET_FORMATS}, got {config.dataset_format!r}"
        )
    if config.mode == "replay" and config.record:
        logger.warning("--record has no effect during replay; ignoring")
        config.record = False
    return config


def _parse_dedup(value: str) -> DedupMode:
    try:
        return DedupMode(value)
    except ValueError:
        choices = ", ".join(mode.value for mode in DedupMode)
        raise CLIError(f"dedup must be one of {choices}, got {value!r}") from None


@dataclass
class BackendBundle:
    """The three model roles plus the shared transcript when recording."""

    critic: CriticBackend
    solver: CriticBackend
    extractor: CriticBackend
    transcript: Transcript | None = None


def build_backends(config: RunConfig) -> BackendBundle:
    if config.mode == "replay":
        try:
            store = Transcript.load(config.replay_path)
        except OSError as exc:
            raise CLIError(f"cannot read transcript: {exc}") from exc
        except (json.JSONDecodeError, KeyError) as exc:
            raise CLIError(f"malformed transcript {config.replay_path}: {exc}") from exc
        replay = ReplayBackend(store)
        return BackendBundle(critic=replay, solver=replay, extractor=replay)
    if config.mode == "mock":
        bundle = BackendBundle(
            critic=MockCritic(), solver=MockSolver(), extractor=HeadingRuleExtractor()
        )
    else:
        try:
            bundle = BackendBundle(
                critic=HTTPBackend(config.critic_model, config.base_url, timeout=config.timeout),
                solver=HTTPBackend(config.solver_model, config.base_url, timeout=config.timeout),
                extractor=HTTPBackend(
                    config.extractor_model, config.base_url, timeout=config.timeout
                ),
            )
        except ValueError as exc:
            raise CLIError(str(exc)) from exc
    if config.record:
        transcript = Transcript()
        bundle = BackendBundle(
            critic=RecordingBackend(bundle.critic, transcript),
            solver=RecordingBackend(bundle.solver, transcript),
            extractor=RecordingBackend(bundle.extractor, transcript),
            transcript=transcript,
        )
    return bundle


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read {path}: {exc}") from exc


def _load_state(path: Path) -> PromptState:
    try:
        return parse_structured_prompt(_read_text(path))
    except SchemaError as exc:
        raise CLIError(f"{path} is not a structured prompt: {exc}") from exc


def _ensure_out_dir(config: RunConfig) -> Path:
    try:
        config.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {config.out_dir}: {exc}") from exc
    return config.out_dir


def _save_transcript(bundle: BackendBundle, out_dir: Path) -> None:
    if bundle.transcript is not None:
        bundle.transcript.save(out_dir / "transcript.jsonl")


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _state_line(state: PromptState) -> dict:
    return {
        "iteration": state.iteration,
        "digest": state.digest,
        "parent_digest": state.parent_digest,
        "sections": [
            {
                "kind": section.kind.value,
                "content": section.content,
                "provenance": section.provenance.value,
            }
            for section in state.sections
        ],
    }


def _gradient_line(index: int, gradients: tuple[TextualGradient, ...], failures) -> dict:
    return {
        "iteration": index,
        "gradients": [
            {
                "target": gradient.target.value,
                "directives": list(gradient.directives),
                "critic_identity": gradient.critic_identity,
            }
            for gradient in gradients
        ],
        "failures": [
            {"section": kind.value, "reason": reason} for kind, reason in failures
        ],
    }


def _write_run_artifacts(history: RunHistory, out_dir: Path) -> None:
    with (out_dir / "history.jsonl").open("w", encoding="utf-8") as handle:
        for state in history.states:
            handle.write(json.dumps(_state_line(state), ensure_ascii=False) + "\n")
    failure_rounds = history.failures or tuple(() for _ in history.gradients)
    with (out_dir / "gradients.jsonl").open("w", encoding="utf-8") as handle:
        for index, gradients in enumerate(history.gradients):
            line = _gradient_line(index, gradients, failure_rounds[index])
            handle.write(json.dumps(line, ensure_ascii=False) + "\n")
    metrics = {
        "iterations": history.iterations,
        "digests": list(history.digests),
        "failure_count": sum(len(round_) for round_ in failure_rounds),
        "growth": growth_metrics(history).to_dict(),
    }
    _write_json(out_dir / "metrics.json", metrics)
    (out_dir / "final_prompt.txt").write_text(render_prompt(history.final), encoding="utf-8")


def cmd_decompose(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    bundle = build_backends(config)
    out_dir = _ensure_out_dir(config)
    text = _read_text(Path(args.input))
    try:
        state = decompose_unstructured(text, bundle.extractor, template=config.template("decompose"))
    except (EmptyInput, ExtractorFailure, SchemaError) as exc:
        raise CLIError(f"decomposition failed: {exc}") from exc
    _save_transcript(bundle, out_dir)
    out_path = out_dir / "decomposed_prompt.txt"
    out_path.write_text(render_prompt(state), encoding="utf-8")
    for section in state.sections:
        marker = " (empty)" if section.is_empty else ""
        print(f"{section.kind.display_name}: {section.provenance.value}{marker}")
    print(f"wrote {out_path}")
    return 0


def cmd_optimize(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    bundle = build_backends(config)
    out_dir = _ensure_out_dir(config)
    state = _load_state(Path(args.input))
    try:
        history = optimize(
            state,
            bundle.critic,
            config.optimizer_config(),
            gradient_template=config.template("gradient"),
            consolidate_template=config.template("consolidate"),
        )
    except OptimizationAborted as exc:
        _save_transcript(bundle, out_dir)
        _write_run_artifacts(exc.history, out_dir)
        print(f"aborted: {exc}", file=sys.stderr)
        print(f"partial artifacts kept in {out_dir}", file=sys.stderr)
        return 3
    _save_transcript(bundle, out_dir)
    _write_run_artifacts(history, out_dir)
    initial, final = history.initial, history.final
    print(f"iterations: {history.iterations}")
    print(f"tokens: {initial.total_tokens} -> {final.total_tokens}")
    print(f"final digest: {final.digest}")
    print(f"wrote {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = build_run_config(args)
    bundle = build_backends(config)
    out_dir = _ensure_out_dir(config)
    state = _load_state(Path(args.prompt))
    try:
        dataset = load_dataset(
            Path(args.dataset), config.dataset_format, split=config.split
        )
    except (DatasetError, OSError) as exc:
        raise CLIError(f"cannot load dataset: {exc}") from exc
    if not dataset.items:
        raise CLIError(f"dataset {args.dataset} has no items")
    if config.limit is not None:
        try:
            dataset = sample_items(dataset, config.limit, config.seed)
        except ValueError as exc:
            raise CLIError(str(exc)) from exc

    def finish(result: EvalResult, path_name: str) -> Path:
        _save_transcript(bundle, out_dir)
        path = out_dir / path_name
        _write_json(path, result.to_dict())
        return path

    try:
        result = evaluate(
            state,
            dataset,
            bundle.solver,
            concurrency=config.concurrency,
            template=config.template("question"),
        )
    except EvaluationAborted as exc:
        path = finish(exc.result, "eval_result.partial.json")
        print(f"aborted: {exc}", file=sys.stderr)
        print(f"partial result kept in {path}", file=sys.stderr)
        return 3
    except DatasetError as exc:
        raise CLIError(str(exc)) from exc
    path = finish(result, "eval_result.json")
    print(f"accuracy: {result.accuracy * 100:.2f}%")
    if result.unparseable:
        print(f"unparseable: {result.unparseable}/{result.total}")
    for subject, (_, _, acc) in result.per_subject.items():
        print(f"{subject}: {acc * 100:.2f}%")
    print(f"wrote {path}")
    return 0


def _result_labels(paths: list[Path]) -> list[str]:
    stems = [path.stem for path in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"{path.parent.name}/{path.stem}" for path in paths]


def cmd_compare(args: argparse.Namespace) -> int:
    paths = [Path(p) for p in args.results]
    if len(paths) < 2:
        raise CLIError("compare needs at least two result files")
    results = []
    for label, path in zip(_result_labels(paths), paths):
        try:
            data = json.loads(_read_text(path))
            results.append((label, EvalResult.from_dict(data)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CLIError(f"{path} is not an evaluation result file: {exc}") from exc
    try:
        comparison = compare(results)
    except DatasetMismatch as exc:
        raise CLIError(str(exc)) from exc
    print(comparison.to_text())
    if getattr(args, "out", None):
        out_dir = Path(args.out)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CLIError(f"cannot create output directory {out_dir}: {exc}") from exc
        path = out_dir / "comparison.json"
        _write_json(path, comparison.to_dict())
        print(f"wrote {path}")
    return 0


def cmd_diff(args: argparse.Namespace) -> int:
    state_a = _load_state(Path(args.a))
    state_b = _load_state(Path(args.b))
    report = diff_states(state_a, state_b)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, ensure_ascii=False))
    else:
        print(report.to_text())
    return 1 if report.changed else 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="INI config file; flags override it")
    shared.add_argument("--out", metavar="DIR", help="output directory (default mpo-run)")
    shared.add_argument(
        "--record", action="store_true", help="record backend calls to OUT/transcript.jsonl"
    )
    shared.add_argument(
        "--replay", metavar="PATH", help="serve backend calls from a recorded transcript"
    )
    shared.add_argument("--mock", action="store_true", help="use the deterministic mock backends")
    shared.add_argument("--live", action="store_true", help="use the HTTP backends")
    shared.add_argument("--limit", type=int, metavar="N", help="evaluate at most N sampled items")
    shared.add_argument("--seed", type=int, metavar="N", help="seed for dataset sampling")
    shared.add_argument("--iterations", type=int, metavar="N", help="refinement iterations")
    shared.add_argument(
        "--dedup",
        choices=[mode.value for mode in DedupMode],
        help="de-duplication mode after each update",
    )

    parser = argparse.ArgumentParser(
        prog="mpo",
        description="Section-wise prompt refinement and multiple-choice evaluation.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    decompose = commands.add_parser(
        "decompose", parents=[shared], help="structure a free-form prompt into tagged sections"
    )
    decompose.add_argument("input", help="prompt file, free-form or already tagged")
    decompose.set_defaults(func=cmd_decompose)

    optimize_cmd = commands.add_parser(
        "optimize", parents=[shared], help="run the refinement loop on a structured prompt"
    )
    optimize_cmd.add_argument("input", help="structured prompt file")
    optimize_cmd.set_defaults(func=cmd_optimize)

    eval_cmd = commands.add_parser(
        "eval", parents=[shared], help="score a structured prompt on a dataset"
    )
    eval_cmd.add_argument("prompt", help="structured prompt file")
    eval_cmd.add_argument("dataset", help="dataset file")
    eval_cmd.add_argument("--format", choices=DATASET_FORMATS, help="dataset file format")
    eval_cmd.add_argument("--split", help="split label recorded in the result")
    eval_cmd.set_defaults(func=cmd_eval)

    compare_cmd = commands.add_parser(
        "compare", parents=[shared], help="compare evaluation result files"
    )
    compare_cmd.add_argument("results", nargs="+", help="two or more result files")
    compare_cmd.set_defaults(func=cmd_compare)

    diff_cmd = commands.add_parser(
        "diff", parents=[shared], help="per-section diff of two structured prompts"
    )
    diff_cmd.add_argument("a", help="baseline prompt file")
    diff_cmd.add_argument("b", help="changed prompt file")
    diff_cmd.add_argument("--json", action="store_true", help="emit the diff as JSON")
    diff_cmd.set_defaults(func=cmd_diff)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ReplayMiss as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except BackendError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
