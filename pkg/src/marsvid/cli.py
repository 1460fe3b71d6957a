"""``marsvid`` command line: sample, run, eval, report, sweep.

Every flag has a config-file equivalent (``--config file.yaml|json``); flags
given on the command line override the file. The effective configuration is
written next to the results it produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .domain import ManifestError, load_manifest, write_manifest, VideoRecord
from .evalharness import (
    EvalReport, EvaluationError, evaluate, make_folds, parse_machine_report, read_predictions,
    render_decision, render_report, write_predictions,
)
from .prompts import PromptError, PromptSet
from .provider import MockScript, ProviderConfig, ProviderError, make_provider
from .reasoner import ABLATIONS, STRATEGIES, DetectionResult, MetaDecision, StrategyConfig, run_manifest
from .sampler import SamplingError, load_frames, save_frames
from .store import RunStore, StoreError, condition_dirname

logger = logging.getLogger("marsvid")

DEFAULTS = {
    "manifest": None,
    "out": "runs/default",
    "jobs": 4,
    "report": "table",
    "label_scheme": "auto",
    "include_content": False,
    "exclude_failures": False,
    "strategy": {"name": "mars", "ablation": "none", "frames": 16, "model": "mock", "temperature": 0.0,
                 "max_output": 1024, "cot_single_call": False, "prompts_dir": None},
    "provider": {"kind": "mock", "endpoint": ProviderConfig.endpoint, "credential_env": ProviderConfig.credential_env,
                 "max_in_flight": 4, "requests_per_minute": 60.0, "max_retries": 3, "backoff_base": 1.0,
                 "mock_script": None, "replay_from": None},
    "folds": {"k": 5, "seed": 0},
    "sweep": {"frames": [8, 16, 32], "ablations": ["none", "no_objdesc", "no_assumption"]},
}

# argparse dest -> location in the nested config
FLAG_PATHS = {
    "manifest": ("manifest",), "out": ("out",), "jobs": ("jobs",), "report": ("report",),
    "label_scheme": ("label_scheme",), "include_content": ("include_content",),
    "exclude_failures": ("exclude_failures",),
    "strategy": ("strategy", "name"), "ablation": ("strategy", "ablation"), "frames": ("strategy", "frames"),
    "model": ("strategy", "model"), "temperature": ("strategy", "temperature"),
    "max_output": ("strategy", "max_output"), "cot_single_call": ("strategy", "cot_single_call"),
    "prompts_dir": ("strategy", "prompts_dir"),
    "provider": ("provider", "kind"), "endpoint": ("provider", "endpoint"),
    "api_key_env": ("provider", "credential_env"), "max_in_flight": ("provider", "max_in_flight"),
    "rpm": ("provider", "requests_per_minute"), "max_retries": ("provider", "max_retries"),
    "backoff_base": ("provider", "backoff_base"), "mock_script": ("provider", "mock_script"),
    "replay_from": ("provider", "replay_from"),
    "k": ("folds", "k"), "seed": ("folds", "seed"),
    "sweep_frames": ("sweep", "frames"), "sweep_ablations": ("sweep", "ablations"),
}

STRATEGY_ORDER = {s: i for i, s in enumerate(STRATEGIES)}
ABLATION_ORDER = {a: i for i, a in enumerate(ABLATIONS)}
ABLATION_NAMES = {"none": "Full", "no_objdesc": "w/o ObjDesc", "no_assumption": "w/o Assumption"}


class CliError(RuntimeError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = json.loads(json.dumps(base))
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _ablation_list(text: str) -> list[str]:
    items = [x.strip().replace("-", "_") for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in ABLATIONS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown ablations {bad}")
    return items


def effective_config(args: argparse.Namespace) -> dict:
    cfg = DEFAULTS
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise CliError(f"config file {path} must hold a mapping")
        cfg = _deep_merge(cfg, loaded)
    else:
        cfg = _deep_merge(cfg, {})
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = cfg
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    cfg["strategy"]["ablation"] = str(cfg["strategy"]["ablation"]).replace("-", "_")
    return cfg


def _strategy_config(cfg: dict, *, frames: int | None = None, ablation: str | None = None) -> StrategyConfig:
    s = cfg["strategy"]
    prompts = PromptSet.load(s["prompts_dir"]) if s.get("prompts_dir") else PromptSet.load()
    return StrategyConfig(
        strategy=s["name"], ablation=ablation if ablation is not None else s["ablation"],
        frames_n=int(frames if frames is not None else s["frames"]), prompts=prompts, model_id=s["model"],
        temperature=float(s["temperature"]), max_output=int(s["max_output"]),
        cot_single_call=bool(s["cot_single_call"]),
    )


def _provider(cfg: dict, sc: StrategyConfig):
    p = cfg["provider"]
    pconf = ProviderConfig(kind=p["kind"], endpoint=p["endpoint"], credential_env=p["credential_env"],
                           max_in_flight=int(p["max_in_flight"]), requests_per_minute=float(p["requests_per_minute"]),
                           max_retries=int(p["max_retries"]), backoff_base=float(p["backoff_base"]))
    script = MockScript.load(p["mock_script"]) if p.get("mock_script") else None
    store = None
    condition = None
    if pconf.kind == "replay":
        if not p.get("replay_from"):
            raise CliError("--provider replay needs --replay-from <run dir>")
        store = RunStore(p["replay_from"])
        condition = dict(ablation=sc.ablation, model_id=sc.model_id, prompt_hash=sc.prompt_hash, frames_n=sc.frames_n)
    return make_provider(pconf, script=script, store=store, replay_condition=condition)


def _condition_dir(out: Path, sc: StrategyConfig) -> Path:
    return out / condition_dirname(sc.strategy, sc.ablation, sc.model_id, sc.frames_n, sc.prompt_hash)


def _load(cfg: dict):
    if not cfg.get("manifest"):
        raise CliError("a manifest is required (--manifest or config 'manifest')")
    return load_manifest(cfg["manifest"])


def execute_run(cfg: dict, manifest, sc: StrategyConfig) -> list[DetectionResult]:
    out = Path(cfg["out"])
    store = RunStore(out)
    provider = _provider(cfg, sc)
    records = [manifest.resolve_media(r) for r in manifest]
    results = run_manifest(records, sc, provider, store, jobs=int(cfg["jobs"]))
    cond = _condition_dir(out, sc)
    cond.mkdir(parents=True, exist_ok=True)
    write_predictions(results, cond / "predictions.jsonl")
    with (cond / "results.jsonl").open("w", encoding="utf-8") as fh:
        for r in results:
            fh.write(r.canonical_json() + "\n")
    errors = [r.video_id for r in results if r.status != "ok"]
    meta = {
        "condition": sc.condition(),
        "manifest": str(Path(cfg["manifest"]).resolve()),
        "label_scheme": cfg["label_scheme"],
        "dataset_size": len(records),
        "empty_transcripts": [r.video_id for r in results if "empty_transcript" in r.flags],
        "errors": errors,
        "parse_failures": [r.video_id for r in results if r.decision.parse_failed],
        "provider_kind": cfg["provider"]["kind"],
        "config": cfg,
    }
    (cond / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    calls = sum(r.call_count for r in results)
    print(f"{sc.strategy}/{sc.ablation} N={sc.frames_n}: {len(results)} videos, {calls} provider calls, "
          f"{len(errors)} errors -> {cond}")
    return results


def _condition_sort_key(cond: dict):
    return (STRATEGY_ORDER.get(cond.get("strategy"), 99), ABLATION_ORDER.get(cond.get("ablation"), 99),
            int(cond.get("frames_n", 0)), str(cond.get("model_id")), str(cond.get("prompt_hash")))


def evaluate_condition(cond_dir: Path, cfg: dict, name: str = "") -> EvalReport:
    meta = json.loads((cond_dir / "run.json").read_text(encoding="utf-8"))
    manifest = load_manifest(cfg.get("manifest") or meta["manifest"])
    golds = manifest.gold_labels(meta.get("label_scheme", cfg["label_scheme"]))
    plan = make_folds(manifest, int(cfg["folds"]["k"]), int(cfg["folds"]["seed"]))
    preds = read_predictions(cond_dir / "predictions.jsonl")
    report = evaluate(preds, golds, plan, meta["condition"], name=name)
    (cond_dir / "eval.json").write_text(render_report([report], "machine"), encoding="utf-8")
    return report


def _condition_dirs(out: Path) -> list[Path]:
    dirs = [p.parent for p in out.glob("*/run.json")]
    conds = {d: json.loads((d / "run.json").read_text(encoding="utf-8"))["condition"] for d in dirs}
    return sorted(dirs, key=lambda d: _condition_sort_key(conds[d]))


def _echo_config(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _render(reports: list[EvalReport], cfg: dict) -> str:
    if cfg["report"] == "table" and cfg.get("exclude_failures"):
        reports = [EvalReport(r.per_fold, r.failure_excluded or r.mean, r.std, r.condition, r.name, r.dataset_size)
                   for r in reports]
    return render_report(reports, cfg["report"])


# -- subcommands --------------------------------------------------------------------

def cmd_sample(cfg: dict, args) -> int:
    manifest = _load(cfg)
    out = Path(cfg["out"]) / "frames"
    n = int(cfg["strategy"]["frames"])
    sampled = []
    for rec in manifest:
        frames = load_frames(manifest.resolve_media(rec), n)
        target = out / rec.id
        save_frames(frames, target)
        sampled.append(VideoRecord(rec.id, rec.transcript, rec.gold_label, rec.language, frames_dir=str(target.resolve())))
        short = " (short sample)" if frames.flags else ""
        print(f"{rec.id}: {len(frames)} frames {frames.indices}{short}")
    write_manifest(sampled, out / "manifest.jsonl")
    print(f"frame manifest written to {out / 'manifest.jsonl'}")
    return 0


def cmd_run(cfg: dict, args) -> int:
    manifest = _load(cfg)
    _echo_config(cfg)
    execute_run(cfg, manifest, _strategy_config(cfg))
    return 0


def cmd_eval(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    dirs = _condition_dirs(out)
    if not dirs:
        raise CliError(f"no completed runs under {out}")
    reports = [evaluate_condition(d, cfg) for d in dirs]
    sys.stdout.write(_render(reports, cfg))
    return 0


def cmd_report(cfg: dict, args) -> int:
    roots = [Path(p) for p in (args.runs or [cfg["out"]])]
    reports = []
    decisions = []
    for root in roots:
        for d in _condition_dirs(root):
            if not (d / "eval.json").exists():
                raise CliError(f"{d} has not been evaluated; run `marsvid eval --out {root}` first")
            reports.extend(parse_machine_report((d / "eval.json").read_text(encoding="utf-8")))
            if args.decisions:
                decisions.extend(_read_results(d / "results.jsonl"))
    if not reports:
        raise CliError("no evaluated runs found")
    sys.stdout.write(_render(reports, cfg))
    for result in decisions:
        sys.stdout.write("\n" + render_decision(result, include_content=bool(cfg["include_content"])))
    return 0


def _read_results(path: Path) -> list[DetectionResult]:
    results = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            results.append(DetectionResult(d["video_id"], d["strategy"], d["ablation"], d["stage_outputs"],
                                           MetaDecision.from_dict(d["decision"]), status=d["status"],
                                           error=d["error"], flags=tuple(d["flags"])))
    return results


def cmd_sweep(cfg: dict, args) -> int:
    manifest = _load(cfg)
    _echo_config(cfg)
    cfg["strategy"]["name"] = "mars"
    base_frames = int(cfg["strategy"]["frames"])
    frame_rows, ablation_rows = [], []
    for n in cfg["sweep"]["frames"]:
        sc = _strategy_config(cfg, frames=n, ablation="none")
        execute_run(cfg, manifest, sc)
        frame_rows.append(evaluate_condition(_condition_dir(Path(cfg["out"]), sc), cfg, name=f"{n} frames"))
    for ablation in cfg["sweep"]["ablations"]:
        sc = _strategy_config(cfg, frames=base_frames, ablation=ablation)
        execute_run(cfg, manifest, sc)
        ablation_rows.append(evaluate_condition(_condition_dir(Path(cfg["out"]), sc), cfg,
                                                name=ABLATION_NAMES[ablation]))
    if cfg["report"] == "machine":
        sys.stdout.write(render_report(ablation_rows + frame_rows, "machine"))
        return 0
    if ablation_rows:
        sys.stdout.write(f"\nComponent ablation ({base_frames} frames)\n\n")
        sys.stdout.write(_render(ablation_rows, cfg))
    if frame_rows:
        sys.stdout.write("\nFrame count\n\n")
        sys.stdout.write(_render(frame_rows, cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marsvid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config file; flags override it")
    common.add_argument("--manifest", help="JSON-lines dataset manifest")
    common.add_argument("--out", help="run directory")
    common.add_argument("--label-scheme", dest="label_scheme", choices=["auto", "hatemm", "mhc", "binary"])
    common.add_argument("--report", choices=["table", "machine"])
    common.add_argument("--k", type=int, help="number of folds")
    common.add_argument("--seed", type=int, help="fold shuffle seed")
    common.add_argument("--exclude-failures", dest="exclude_failures", action="store_true", default=None,
                        help="table shows metrics with parse failures excluded instead of scored as non-hateful")

    exe = argparse.ArgumentParser(add_help=False)
    exe.add_argument("--strategy", choices=list(STRATEGIES))
    exe.add_argument("--ablation", choices=["none", "no-objdesc", "no-assumption", "no_objdesc", "no_assumption"])
    exe.add_argument("--model", help="model id sent to the provider")
    exe.add_argument("--temperature", type=float)
    exe.add_argument("--max-output", dest="max_output", type=int)
    exe.add_argument("--cot-single-call", dest="cot_single_call", action="store_true", default=None)
    exe.add_argument("--prompts-dir", dest="prompts_dir", help="directory of prompt templates")
    exe.add_argument("--provider", choices=["http", "mock", "replay"])
    exe.add_argument("--endpoint", help="OpenAI-compatible chat completions URL")
    exe.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the API key")
    exe.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    exe.add_argument("--rpm", type=float, help="requests per minute")
    exe.add_argument("--max-retries", dest="max_retries", type=int)
    exe.add_argument("--backoff-base", dest="backoff_base", type=float)
    exe.add_argument("--mock-script", dest="mock_script", help="JSON mock script for --provider mock")
    exe.add_argument("--replay-from", dest="replay_from", help="run directory to replay responses from")
    exe.add_argument("--jobs", type=int, help="videos processed concurrently")

    p = sub.add_parser("sample", parents=[common], help="materialise uniformly sampled frame sets")
    p.add_argument("--frames", type=int, help="frames per video (default 16)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", parents=[common, exe], help="run a strategy over a manifest")
    p.add_argument("--frames", type=int, help="frames per video (default 16)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="fold-wise metrics for every run under --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render tables from evaluated runs")
    p.add_argument("runs", nargs="*", help="run directories (default: --out)")
    p.add_argument("--decisions", action="store_true", help="append per-video decision cards")
    p.add_argument("--include-content", dest="include_content", action="store_true", default=None,
                   help="show model-quoted content in decision cards (redacted by default)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", parents=[common, exe], help="frame-count and ablation sweep for mars")
    p.add_argument("--frames", dest="sweep_frames", type=_int_list, help="comma-separated frame counts (8,16,32)")
    p.add_argument("--ablations", dest="sweep_ablations", type=_ablation_list,
                   help="comma-separated ablations (none,no-objdesc,no-assumption)")
    p.add_argument("--base-frames", dest="frames", type=int, help="frame count for the ablation rows (default 16)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return args.func(cfg, args)
    except (CliError, ManifestError, EvaluationError, StoreError, ProviderError, SamplingError,
            PromptError, FileNotFoundError, ValueError) as exc:
        print(f"marsvid: error: {exc}", file=sys.stderr)
        return 1


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
