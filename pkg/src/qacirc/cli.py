"""Command-line entry point: ``qacirc <subcommand> [flags]``.

Every subcommand writes its artifact atomically together with
``<artifact>.manifest.json`` (resolved config, input and output SHA-256).
Exit codes: 0 success, 1 validation error, 2 internal error.

Seeds: the global ``--seed`` (default ``$QACIRC_SEED``, else 0) is expanded
per stage as ``SeedSequence([seed, STAGE_INDEX[stage]]).generate_state(1)[0]``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribute import AttributionConfig, attn_attrib, head_entropy_profile, select_attribution_head
from .circuit import CircuitReport, extract_hierarchy
from .errors import QACircError
from .evalmetrics import evaluate_suite, metrics_csv, metrics_json
from .model import FixtureConfig, build_fixture, load_fixture
from .model.io import atomic_write_bytes, encode_model
from .probe import ProbeConfig, dumps_jsonl, generate, read_jsonl
from .steer import SteerSpec, switch_experiment

log = logging.getLogger("qacirc")

STAGE_INDEX = {"build-fixture": 0, "gen-probe": 1, "extract": 2, "profile-heads": 3,
               "attribute": 4, "steer": 5, "eval": 6, "report": 7}
# Execution-only settings that never change artifact bytes.
_NOT_IN_MANIFEST = {"jobs", "config", "verbose", "func"}
_STEER_MODES = {"attn": "attn_upweight", "attn_upweight": "attn_upweight",
                "mlp_zero": "mlp_zero", "mlp_mean": "mlp_mean"}


class UsageError(QACircError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([seed, STAGE_INDEX[stage]]).generate_state(1)[0])


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return value.lower() in ("1", "true", "yes", "on")
    return action.type(value) if action.type else value


def apply_config(sub: argparse.ArgumentParser, values: dict) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key not in actions or key in ("help",):
            raise UsageError(f"unknown config key {key!r}")
        defaults[key] = _coerce(actions[key], value)
    sub.set_defaults(**defaults)


class Context:
    """Resolved inputs shared by the subcommands."""

    def __init__(self, args):
        self.args = args
        self.inputs: dict[str, str] = {}
        self._fixture = None

    def fixture(self):
        if self._fixture is None:
            path = getattr(self.args, "model", None)
            if path:
                self._fixture = load_fixture(path)
                self.inputs["model"] = sha256_file(path)
            else:
                cfg, w, table = build_fixture()
                self._fixture = (cfg, w, table)
                self.inputs["model"] = sha256_bytes(encode_model(cfg, w, {"memory_table": table.to_dict()}))
            if self._fixture[2] is None:
                raise UsageError("model file carries no memory table; build it with build-fixture")
        return self._fixture

    @property
    def weights(self):
        return self.fixture()[1]

    def probe(self):
        path = self.args.probe
        if not path:
            raise UsageError("--probe is required")
        self.inputs["probe"] = sha256_file(path)
        data = read_jsonl(path)
        if not data:
            raise UsageError(f"{path} holds no examples")
        return data

    def circuit(self, required=False):
        path = getattr(self.args, "circuit", None)
        if not path:
            if required:
                raise UsageError("--circuit is required")
            return None
        self.inputs["circuit"] = sha256_file(path)
        doc = json.loads(Path(path).read_text())
        return [CircuitReport.from_json(r) for r in doc["reports"]]

    def stamp(self, payload: dict) -> dict:
        payload = dict(payload)
        payload["tool"] = {"name": "qacirc", "version": __version__}
        payload["inputs"] = dict(sorted(self.inputs.items()))
        return payload


def write_artifact(ctx: Context, path, data: bytes, extra_outputs=()) -> None:
    atomic_write_bytes(path, data)
    outputs = {str(path): sha256_bytes(data)}
    for p, d in extra_outputs:
        atomic_write_bytes(p, d)
        outputs[str(p)] = sha256_bytes(d)
    args = {k: v for k, v in sorted(vars(ctx.args).items()) if k not in _NOT_IN_MANIFEST}
    manifest = {
        "tool": {"name": "qacirc", "version": __version__},
        "command": ctx.args.command,
        "config": args,
        "inputs": dict(sorted(ctx.inputs.items())),
        "outputs": outputs,
    }
    atomic_write_bytes(f"{path}.manifest.json", dump_json(manifest))


def _parse_head(text: str) -> tuple[int, int]:
    try:
        layer, head = text.replace(",", ".").split(".")
        return int(layer), int(head)
    except ValueError:
        raise argparse.ArgumentTypeError(f"head must look like LAYER.HEAD, got {text!r}") from None


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def cmd_build_fixture(ctx: Context) -> None:
    a = ctx.args
    # The shipped fixture is seed-independent unless a filler seed is requested.
    fcfg = FixtureConfig() if a.fixture_seed is None else FixtureConfig(seed=a.fixture_seed)
    cfg, w, table = build_fixture(fcfg)
    data = encode_model(cfg, w, {"memory_table": table.to_dict(), "fixture": fcfg.to_dict(),
                                 "tool": {"name": "qacirc", "version": __version__}})
    write_artifact(ctx, a.out, data)


def cmd_gen_probe(ctx: Context) -> None:
    a = ctx.args
    _, w, table = ctx.fixture()
    pcfg = ProbeConfig(n=a.n)
    examples, rejected = generate(pcfg, stage_seed(a.seed, "gen-probe"), table, w)
    log.info("generated %d examples, %d rejected draws", len(examples), rejected)
    write_artifact(ctx, a.out, dumps_jsonl(examples))


def cmd_extract(ctx: Context) -> None:
    a = ctx.args
    data = ctx.probe()
    reports = extract_hierarchy(ctx.weights, data, a.hierarchy, a.delta, a.mode, a.granularity,
                                jobs=a.jobs, seed=stage_seed(a.seed, "extract"))
    payload = ctx.stamp({"reports": [r.to_json() for r in reports]})
    write_artifact(ctx, a.out, dump_json(payload))


def _candidate_heads(ctx: Context, data) -> list[tuple[int, int]]:
    """Hierarchy-0 heads of the copy circuit, from ``--circuit`` or extracted on the fly."""
    reports = ctx.circuit()
    if not reports:
        reports = extract_hierarchy(ctx.weights, data, 0, 0.95, "copy", "head", jobs=ctx.args.jobs)
    heads = [(c.layer, c.head) for c in reports[0].components if c.head is not None]
    if not heads:
        raise UsageError("the circuit contains no attention heads")
    return heads


def cmd_profile_heads(ctx: Context) -> None:
    a = ctx.args
    data = ctx.probe()
    cfg = ctx.fixture()[0]
    candidates = _candidate_heads(ctx, data)
    every = [(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    profiles = head_entropy_profile(ctx.weights, data, every, mode=a.mode)
    best = select_attribution_head([p for p in profiles if p.head in candidates])
    rows = []
    for p in profiles:
        row = p.to_json()
        row["in_circuit"] = p.head in candidates
        rows.append(row)
    payload = ctx.stamp({"mode": a.mode, "profiles": rows, "selected": {"layer": best[0], "head": best[1]}})
    write_artifact(ctx, a.out, dump_json(payload))


def _attribution_config(ctx: Context) -> AttributionConfig:
    a = ctx.args
    head = a.head
    if head is None:
        data = ctx.probe()
        head = select_attribution_head(head_entropy_profile(ctx.weights, data, _candidate_heads(ctx, data)))
    return AttributionConfig(head=head, span_length=a.slength, top_k=a.top_k,
                             answer_length=a.answer_length, span_mode=a.span_mode)


def cmd_attribute(ctx: Context) -> None:
    a = ctx.args
    data = ctx.probe()
    cfg = _attribution_config(ctx)
    results = []
    for ex in data:
        res = attn_attrib(ctx.weights, ex.context(a.variant), ex.question, cfg)
        results.append(res.to_json(question_id=ex.id, head=cfg.head))
    payload = ctx.stamp({"head": {"layer": cfg.head[0], "head": cfg.head[1]}, "variant": a.variant,
                         "attributions": results})
    write_artifact(ctx, a.out, dump_json(payload))


def cmd_steer(ctx: Context) -> None:
    a = ctx.args
    data = ctx.probe()
    mode = _STEER_MODES.get(a.mode)
    if mode is None:
        raise UsageError(f"unknown steering mode {a.mode!r}")
    layers, mlps = a.layers, a.mlps
    reports = ctx.circuit()
    if mode == "attn_upweight" and not layers:
        if not reports:
            raise UsageError("attn steering needs --layers or a --circuit")
        layers = (reports[0].components[0].layer,)
    if mode != "attn_upweight" and not mlps:
        if not reports or reports[0].granularity != "mlp":
            raise UsageError("mlp steering needs --mlps or an mlp-granularity --circuit")
        mlps = (reports[0].components[0].layer,)
    mean_source = tuple(ex.clean_prompt("memory") for ex in data) if mode == "mlp_mean" else None
    spec = SteerSpec(mode, a.beta, target_layers=layers, target_mlps=mlps, mean_source=mean_source)
    report = switch_experiment(ctx.weights, data, spec, jobs=a.jobs)
    write_artifact(ctx, a.out, dump_json(ctx.stamp(report.to_json())))


def cmd_eval(ctx: Context) -> None:
    a = ctx.args
    data = ctx.probe()
    cfg = _attribution_config(ctx)
    rows = evaluate_suite(ctx.weights, data, cfg, stage_seed(a.seed, "eval"), gradient=not a.no_gradient)
    json_path = Path(a.out).with_suffix(".json")
    write_artifact(ctx, a.out, metrics_csv(rows).encode(),
                   extra_outputs=[(json_path, metrics_json(rows).encode())])


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def cmd_report(ctx: Context) -> None:
    """Plot-ready CSV tables from earlier artifacts."""
    a = ctx.args
    if not a.circuit and not a.profile:
        raise UsageError("report needs --circuit and/or --profile")
    out = Path(a.out)
    extras = []
    summary = {}
    if a.circuit:
        reports = ctx.circuit(required=True)
        rows = []
        for r in reports:
            for k, v in enumerate(r.prefix_scores, 1):
                rows.append([r.hierarchy, r.granularity, r.mode, k, repr(float(v))])
        extras.append((out.with_name(out.stem + "_score_vs_k.csv"),
                       _csv_bytes(["hierarchy", "granularity", "mode", "k", "combined_score"], rows)))
        summary["circuits"] = [{"hierarchy": r.hierarchy, "k": len(r.selected),
                                "combined_score": r.combined_score, "delta_unmet": r.delta_unmet,
                                "selected": [c.label() for c in r.components]} for r in reports]
    if a.profile:
        ctx.inputs["profile"] = sha256_file(a.profile)
        doc = json.loads(Path(a.profile).read_text())
        rows = [[p["layer"], p["head"], repr(float(p["entropy"])), repr(float(p["accuracy"]))]
                for p in doc["profiles"]]
        extras.append((out.with_name(out.stem + "_entropy_vs_accuracy.csv"),
                       _csv_bytes(["layer", "head", "entropy", "accuracy"], rows)))
        summary["attribution_head"] = doc.get("selected")
    write_artifact(ctx, out, dump_json(ctx.stamp(summary)), extra_outputs=extras)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=int(os.environ.get("QACIRC_SEED", "0")))
    common.add_argument("--config", help="key=value file; command-line flags take precedence")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-example work")
    common.add_argument("--out", help="artifact path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qacirc", description="Circuit analysis and attention attribution on a toy QA transformer.")
    parser.add_argument("--version", action="version", version=f"qacirc {__version__}")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    def sub(name, func, help_text, model=True, probe=False):
        p = subs.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        if model:
            p.add_argument("--model", help="model file (default: the built-in fixture)")
        if probe:
            p.add_argument("--probe", help="probe JSONL")
        return p

    p = sub("build-fixture", cmd_build_fixture, "write the analytic fixture model", model=False)
    p.add_argument("--fixture-seed", type=int, default=None, help="seed for the random filler weights")

    p = sub("gen-probe", cmd_gen_probe, "generate a validity-filtered probe set")
    p.add_argument("--n", type=int, default=200)

    p = sub("extract", cmd_extract, "rank components and select a circuit", probe=True)
    p.add_argument("--mode", choices=["copy", "memory"], default="copy")
    p.add_argument("--granularity", choices=["head", "layer", "mlp"], default="head")
    p.add_argument("--delta", type=float, default=0.95)
    p.add_argument("--hierarchy", type=int, default=0, help="highest hierarchy level (0 or 1)")

    p = sub("profile-heads", cmd_profile_heads, "entropy/accuracy profile of attention heads", probe=True)
    p.add_argument("--circuit", help="circuit.json whose hierarchy-0 heads are the selection candidates")
    p.add_argument("--mode", choices=["copy", "memory"], default="copy")

    for name, func, text in (("attribute", cmd_attribute, "attention-head attribution per question"),
                             ("eval", cmd_eval, "attribution and faithfulness metrics")):
        p = sub(name, func, text, probe=True)
        p.add_argument("--head", type=_parse_head, default=None, help="LAYER.HEAD (default: lowest-entropy circuit head)")
        p.add_argument("--circuit", help="circuit.json used to pick the attribution head")
        p.add_argument("--slength", type=int, default=1)
        p.add_argument("--top-k", type=int, default=1)
        p.add_argument("--answer-length", type=int, default=1)
        p.add_argument("--span-mode", choices=["window", "delimiter"], default="window")
        if name == "attribute":
            p.add_argument("--variant", choices=["copy", "orig", "memory"], default="copy")
        else:
            p.add_argument("--no-gradient", action="store_true", help="skip the gradient baseline")

    p = sub("steer", cmd_steer, "memory-to-context switch experiment", probe=True)
    p.add_argument("--mode", default="attn", help="attn | mlp_zero | mlp_mean")
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--layers", type=_int_list, default=(), help="comma-separated attention layers")
    p.add_argument("--mlps", type=_int_list, default=(), help="comma-separated MLP layers")
    p.add_argument("--circuit", help="circuit.json supplying default targets")

    p = sub("report", cmd_report, "plot-ready tables from earlier artifacts", model=False)
    p.add_argument("--circuit")
    p.add_argument("--profile")
    return parser


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a subcommand is required")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        apply_config(sub, read_config_file(args.config))
        args = parser.parse_args(argv)
    if not args.out:
        raise UsageError("--out is required")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return args


def _diagnose(kind: str, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"level": "error", "kind": kind, "type": type(exc).__name__,
                                 "message": str(exc)}) + "\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        _diagnose("usage", exc)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(Context(args))
    except (QACircError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        _diagnose("validation", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        log.debug("internal error", exc_info=True)
        _diagnose("internal", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
