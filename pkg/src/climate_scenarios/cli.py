"""Command line entry point: one subcommand per pipeline stage plus ``run-all``.

Settings resolve in three layers, later ones winning: a JSON config file,
``CPSG_*`` environment variables, then command line flags. Every artifact
written carries the run's config hash and prompt-template hashes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from .corpus import ChunkingConfig, Chunk, chunk_corpus, load_corpus
from .errors import ArtifactIOError, BackendError, ConfigError, PipelineError, ValidationError
from .evaluation import EvaluationItem, Evaluator, MetricScore, evaluate_all
from .gateway import BACKEND_URL_ENV, DEFAULT_BACKEND_URL, ModelGateway, ModelRef
from .index import EmbeddingIndex, IndexEntry
from .jsonl import canonical_json, read_jsonl, sha256_file, sha256_text, write_jsonl
from .ratings import annotate, combine_validations, load_ratings, load_validations, ratings_to_scores
from .scenario import FollowupError, ScenarioGenerator, ScenarioResponse, load_prompts
from .stats import (
    DEFAULT_CONSISTENCY_THRESHOLD,
    CorrelationRow,
    ScoreMatrix,
    SummaryRow,
    correlation_table,
    render_report,
    summarize,
)
from .templates import template_hashes

log = logging.getLogger("climate_scenarios")

ENV_PREFIX = "CPSG_"
MODES = ("live", "record", "replay")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BACKEND = 4
EXIT_VALIDATION = 5

# artifact file names inside output_dir
CHUNKS = "chunks.jsonl"
INDEX = "index.jsonl"
THEMES = "themes.jsonl"
RESPONSES = "responses.jsonl"
FOLLOWUPS = "responses_followups.jsonl"
SCORES = "scores.jsonl"
STATS = "stats.json"
REPORT_TXT = "report.txt"
REPORT_JSON = "report.json"

# settings that change where or how a run talks to the backend, not what it computes
_UNHASHED = frozenset({"output_dir", "mode", "cassette_path", "backend_url", "max_in_flight", "timeout", "config_file"})
_PATH_FIELDS = ("corpus_manifest", "index_path", "prompts_path", "cassette_path", "output_dir", "validation_path", "ratings_path")


@dataclass(frozen=True)
class JudgeSpec:
    evaluator_id: str
    model: str


@dataclass
class RunConfig:
    corpus_manifest: str | None = None
    index_path: str | None = None
    prompts_path: str | None = None
    backend_url: str = DEFAULT_BACKEND_URL
    generator_model: str = "llama3.2:3b"
    followup_model: str = "llama3:8b"
    embedding_model: str = "nomic-embed-text"
    judges: tuple[JudgeSpec, ...] = ()
    chunk_size: int = 1000
    overlap: int = 100
    retrieval_k: int = 4
    n_themes: int = 5
    n_questions: int = 3
    followup_enabled: bool = True
    mode: str = "live"
    cassette_path: str | None = None
    output_dir: str = "out"
    validation_path: str | None = None
    ratings_path: str | None = None
    seed: int = 0
    max_tokens: int = 2048
    max_in_flight: int = 4
    timeout: float = 300.0
    consistency_threshold: float = DEFAULT_CONSISTENCY_THRESHOLD
    config_file: str | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.mode in ("record", "replay") and not self.cassette_path:
            raise ConfigError(f"mode {self.mode} needs a cassette_path")
        try:
            ChunkingConfig(self.chunk_size, self.overlap)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("retrieval_k", "n_themes", "n_questions", "max_tokens", "max_in_flight"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        ids = [j.evaluator_id for j in self.judges]
        if len(set(ids)) != len(ids) or "human" in ids:
            raise ConfigError(f"judge evaluator ids must be unique and not 'human': {ids}")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def index_file(self) -> Path:
        return Path(self.index_path) if self.index_path else self.out / INDEX

    def model(self, role: str) -> ModelRef:
        name = {"generator": self.generator_model, "followup_generator": self.followup_model, "embedder": self.embedding_model}[role]
        return ModelRef(self.backend_url, name, role)

    def chunking(self) -> ChunkingConfig:
        return ChunkingConfig(self.chunk_size, self.overlap)

    def hashed_settings(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if k not in _UNHASHED}

    def input_hashes(self) -> dict[str, str]:
        out = {}
        for name in ("corpus_manifest", "prompts_path", "validation_path", "ratings_path"):
            p = getattr(self, name)
            if p and Path(p).is_file():
                out[name] = sha256_file(p)
        return out

    def config_hash(self) -> str:
        # input paths are location-dependent; their content hashes stand in for them
        settings = {k: v for k, v in self.hashed_settings().items() if k not in _PATH_FIELDS}
        return sha256_text(canonical_json({"settings": settings, "inputs": self.input_hashes(), "templates": template_hashes()}))


# -- config resolution ----------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    if name == "judges":
        return _parse_judges(value)
    kind = type(getattr(RunConfig(), name))
    if name in _PATH_FIELDS or name == "config_file":
        return None if value in (None, "") else str(value)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind.__name__}") from None


def _parse_judges(value: Any) -> tuple[JudgeSpec, ...]:
    """Accept a list of {"evaluator_id", "model"} objects or "id=model,id=model"."""
    if isinstance(value, str):
        items = []
        for part in filter(None, (p.strip() for p in value.split(","))):
            ev, sep, model = part.partition("=")
            if not sep or not ev or not model:
                raise ConfigError(f"judge must look like evaluator_id=model, got {part!r}")
            items.append({"evaluator_id": ev, "model": model})
        value = items
    try:
        return tuple(JudgeSpec(str(j["evaluator_id"]), str(j["model"])) for j in value)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"judges: expected evaluator_id and model for each entry ({exc})") from None


def _read_config_file(path: str) -> dict:
    p = Path(path)
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    unknown = set(data) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    # relative paths in a config file are relative to the file itself
    for name in _PATH_FIELDS:
        if data.get(name) and not Path(data[name]).is_absolute():
            data[name] = str(p.parent / data[name])
    return data


def _env_layer(env: Mapping[str, str]) -> dict:
    out = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in env and name != "config_file":
            out[name] = env[key]
    if BACKEND_URL_ENV in env:
        out["backend_url"] = env[BACKEND_URL_ENV]
    return out


def resolve_config(flags: Mapping[str, Any], env: Mapping[str, str] | None = None) -> RunConfig:
    """File, then environment, then flags; the later layer wins per field."""
    env = os.environ if env is None else env
    config_file = flags.get("config_file") or env.get(ENV_PREFIX + "CONFIG")
    merged: dict[str, Any] = {}
    if config_file:
        merged.update(_read_config_file(config_file))
    merged.update(_env_layer(env))
    merged.update({k: v for k, v in flags.items() if k in _FIELDS and v is not None})
    merged["config_file"] = config_file
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    cfg.validate()
    return cfg


# -- shared plumbing -----------------------------------------------------------


@dataclass
class Context:
    cfg: RunConfig
    command: str
    client: httpx.Client | None = None
    _gateway: ModelGateway | None = field(default=None, repr=False)

    def provenance(self) -> dict:
        return {"command": self.command, "config_hash": self.cfg.config_hash(), "templates": template_hashes()}

    @property
    def gateway(self) -> ModelGateway:
        if self._gateway is None:
            self._gateway = ModelGateway(
                self.cfg.mode,
                self.cfg.cassette_path,
                client=self.client,
                max_in_flight=self.cfg.max_in_flight,
                timeout=self.cfg.timeout,
            )
        return self._gateway

    def close(self) -> None:
        if self._gateway is not None:
            self._gateway.close()

    def path(self, name: str) -> Path:
        return self.cfg.out / name

    def write(self, name: str, records: Sequence[dict]) -> Path:
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        write_jsonl(p, records, provenance=self.provenance())
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(json.dumps({**payload, "provenance": self.provenance()}, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
        os.replace(tmp, p)
        return p

    def read(self, name: str, produced_by: str) -> list[dict]:
        p = self.path(name)
        if not p.is_file():
            raise ConfigError(f"{p} not found; run `{produced_by}` first")
        return read_jsonl(p)

    def responses(self) -> list[ScenarioResponse]:
        return [ScenarioResponse.from_record(r) for r in self.read(RESPONSES, "generate")]

    def index(self) -> EmbeddingIndex:
        p = self.cfg.index_file()
        if not p.is_file():
            raise ConfigError(f"{p} not found; run `index` first")
        return EmbeddingIndex.load(p)

    def generator(self) -> ScenarioGenerator:
        return ScenarioGenerator(
            self.gateway,
            self.index(),
            self.cfg.model("generator"),
            self.cfg.model("embedder"),
            k=self.cfg.retrieval_k,
            seed=self.cfg.seed,
            max_tokens=self.cfg.max_tokens,
            max_workers=self.cfg.max_in_flight,
        )


def _prompts(ctx: Context):
    return load_prompts(ctx.cfg.prompts_path)


def _valid_ids(cfg: RunConfig) -> set[str] | None:
    if not cfg.validation_path:
        return None
    p = Path(cfg.validation_path)
    if not p.is_file():
        raise ConfigError(f"validation file {p} not found")
    return {rid for rid, ok in combine_validations(load_validations(p)).items() if ok}


# -- commands -------------------------------------------------------------------


def cmd_ingest(ctx: Context) -> str:
    if not ctx.cfg.corpus_manifest:
        raise ConfigError("corpus_manifest is not set")
    docs = load_corpus(ctx.cfg.corpus_manifest)
    chunks = chunk_corpus(docs, ctx.cfg.chunking())
    ctx.write(CHUNKS, [c.to_record() for c in chunks])
    return f"{len(docs)} documents -> {len(chunks)} chunks"


def cmd_index(ctx: Context) -> str:
    chunks = [Chunk.from_record(r) for r in ctx.read(CHUNKS, "ingest")]
    embedder = ctx.cfg.model("embedder")
    index = EmbeddingIndex()
    for c in chunks:
        index.upsert(IndexEntry(c.chunk_id, ctx.gateway.embed_text(embedder, c.text), c.text))
    dest = ctx.cfg.index_file()
    dest.parent.mkdir(parents=True, exist_ok=True)
    index.save(dest, provenance=ctx.provenance())
    return f"indexed {len(index)} chunks (dim {index.dim})"


def cmd_themes(ctx: Context) -> str:
    themes = ctx.generator().elicit_themes(ctx.cfg.n_themes)
    ctx.write(THEMES, [{"rank": i, "theme": t} for i, t in enumerate(themes, 1)])
    return f"{len(themes)} themes"


def cmd_generate(ctx: Context) -> str:
    prompts = _prompts(ctx)
    responses = ctx.generator().generate_all(prompts)
    ctx.write(RESPONSES, [r.to_record() for r in responses])
    return f"{len(responses)} of {len(prompts)} prompts generated"


def cmd_followup(ctx: Context) -> str:
    if not ctx.cfg.followup_enabled:
        return "follow-ups disabled"
    followups = {p.prompt_id: p.followups for p in _prompts(ctx)}
    gen, model = ctx.generator(), ctx.cfg.model("followup_generator")
    out, failure = [], None
    for resp in ctx.responses():
        try:
            out.append(gen.run_followups(resp, model, followups.get(resp.prompt_id, ())))
        except FollowupError as exc:
            # keep what was produced so far, then report the failure
            out.append(exc.partial)
            failure = exc
            break
    ctx.write(FOLLOWUPS, [r.to_record() for r in out])
    if failure is not None:
        raise failure
    return f"follow-ups for {len(out)} responses"


def cmd_annotate(ctx: Context, validator_id: str, redo: bool = False) -> str:
    cfg = ctx.cfg
    if not cfg.validation_path or not cfg.ratings_path:
        raise ConfigError("annotate needs validation_path and ratings_path")
    prompts = {p.prompt_id: p.text for p in _prompts(ctx)}
    n_valid, n_rated = annotate(ctx.responses(), cfg.validation_path, cfg.ratings_path, validator_id, prompts=prompts, redo=redo, input_fn=input)
    return f"{n_valid} validation decisions, {n_rated} ratings recorded"


def cmd_evaluate(ctx: Context) -> str:
    cfg = ctx.cfg
    if not cfg.judges:
        raise ConfigError("no judges configured")
    prompts = {p.prompt_id: p.text for p in _prompts(ctx)}
    responses = ctx.responses()
    valid = _valid_ids(cfg)
    if valid is not None:
        responses = [r for r in responses if r.response_id in valid]
    index = ctx.index()
    items = []
    for r in responses:
        if r.prompt_id not in prompts:
            raise ValidationError(f"{r.response_id}: prompt {r.prompt_id} not in prompt file")
        items.append(EvaluationItem(r.response_id, prompts[r.prompt_id], r.cleaned_text, tuple(index.get(c).text for c in r.retrieved_chunk_ids)))
    evaluators = [
        Evaluator(ctx.gateway, ModelRef(cfg.backend_url, j.model, "judge"), cfg.model("embedder"), j.evaluator_id, n_questions=cfg.n_questions, seed=cfg.seed, max_tokens=cfg.max_tokens)
        for j in cfg.judges
    ]
    scores = evaluate_all(items, evaluators, max_workers=cfg.max_in_flight)
    ctx.write(SCORES, [s.to_record() for s in scores])
    return f"{len(scores)} scores for {len(items)} responses x {len(evaluators)} judges"


def cmd_stats(ctx: Context) -> str:
    cfg = ctx.cfg
    if not ctx.path(SCORES).is_file():
        raise ConfigError(f"no scores file at {ctx.path(SCORES)}; run `evaluate` first")
    scores = [MetricScore.from_record(r) for r in read_jsonl(ctx.path(SCORES))]
    if cfg.ratings_path:
        if not Path(cfg.ratings_path).is_file():
            raise ConfigError(f"ratings file {cfg.ratings_path} not found")
        scores += ratings_to_scores(load_ratings(cfg.ratings_path))
    matrix = ScoreMatrix.from_scores(scores)
    validation = None
    valid = _valid_ids(cfg)
    if valid is not None:
        decisions = combine_validations(load_validations(cfg.validation_path))
        validation = {"valid": sum(decisions.values()), "total": len(decisions)}
        matrix = matrix.restrict(valid)
    summary = summarize(matrix, cfg.consistency_threshold)
    correlations = correlation_table(matrix)
    ctx.write_json(
        STATS,
        {
            "summary": [dataclasses.asdict(r) for r in summary],
            "correlations": [dataclasses.asdict(r) for r in correlations],
            "validation": validation,
            "consistency_threshold": cfg.consistency_threshold,
        },
    )
    return f"{len(summary)} summary rows, {len(correlations)} correlation rows"


def cmd_report(ctx: Context) -> str:
    p = ctx.path(STATS)
    if not p.is_file():
        raise ConfigError(f"{p} not found; run `stats` first")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
        summary = [SummaryRow(**r) for r in data["summary"]]
        correlations = [CorrelationRow(**r) for r in data["correlations"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArtifactIOError(f"{p} is not a stats file: {exc}") from exc
    v = data.get("validation")
    metadata = {"config_hash": ctx.cfg.config_hash(), "stats_config_hash": data.get("provenance", {}).get("config_hash"), "templates": template_hashes()}
    text, payload = render_report(summary, correlations, (v["valid"], v["total"]) if v else None, metadata, data.get("consistency_threshold", ctx.cfg.consistency_threshold))
    ctx.cfg.out.mkdir(parents=True, exist_ok=True)
    ctx.path(REPORT_TXT).write_text(text, encoding="utf-8")
    ctx.write_json(REPORT_JSON, payload)
    return text.rstrip("\n")


RUN_ALL = ("ingest", "index", "themes", "generate", "followup", "evaluate", "stats", "report")


def cmd_run_all(ctx: Context) -> str:
    last = ""
    for name in RUN_ALL:
        log.info("stage %s", name)
        ctx.command = name
        last = COMMANDS[name](ctx)
        log.info("%s: %s", name, last.splitlines()[0] if last else "")
    ctx.command = "run-all"
    return last


COMMANDS: dict[str, Callable[[Context], str]] = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "themes": cmd_themes,
    "generate": cmd_generate,
    "followup": cmd_followup,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


# -- argument parsing -----------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (override config file and environment)")
    g.add_argument("--config", dest="config_file", metavar="FILE", help="JSON config file")
    for name, f in _FIELDS.items():
        if name in ("config_file", "judges"):
            continue
        flag = "--" + name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            g.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif name == "mode":
            g.add_argument(flag, dest=name, choices=MODES, default=None)
        else:
            metavar = "PATH" if name in _PATH_FIELDS else name.upper()
            g.add_argument(flag, dest=name, metavar=metavar, default=None)
    g.add_argument("--judges", dest="judges", metavar="ID=MODEL[,ID=MODEL]", default=None, help="judge models, e.g. gemma2-2B=gemma2:2b")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="climate-scenarios", description="RAG scenario generation and multi-evaluator scoring pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "ingest": "load the corpus manifest and write deduplicated chunks",
        "index": "embed chunks into the retrieval index",
        "themes": "elicit energy-transition themes from the corpus",
        "generate": "generate one scenario response per prompt",
        "followup": "run the follow-up prompts against each response",
        "annotate": "interactively validate and rate responses",
        "evaluate": "score valid responses with every configured judge",
        "stats": "mean, SD, consistency and Spearman tables from scores and ratings",
        "report": "render the text and JSON report",
        "run-all": "ingest through report in one go",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        _add_config_flags(sp)
        if name == "annotate":
            sp.add_argument("--validator-id", required=True)
            sp.add_argument("--redo", action="store_true", help="revisit responses already decided")
    return parser


def _exit_code(exc: PipelineError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, ArtifactIOError):
        return EXIT_IO
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    return EXIT_VALIDATION


def main(argv: Sequence[str] | None = None, *, client: httpx.Client | None = None, env: Mapping[str, str] | None = None) -> int:
    """Run one command; returns the process exit code.

    ``client`` lets callers substitute the HTTP transport (tests, fixture recording).
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    ctx = None
    try:
        cfg = resolve_config(vars(args), env)
        ctx = Context(cfg, args.command, client)
        if args.command == "annotate":
            message = cmd_annotate(ctx, args.validator_id, args.redo)
        else:
            message = COMMANDS[args.command](ctx)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    finally:
        if ctx is not None:
            ctx.close()
    if message:
        print(message)
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
