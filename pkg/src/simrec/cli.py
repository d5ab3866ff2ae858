"""Command-line entry point for reproducible runs.

Five subcommands: ``augment`` (caption items through the perception
pipeline), ``eval-rec`` (leave-one-out ranking metrics), ``simulate`` (score
an endpoint's behavior on exported episodes), ``train-toy`` (desk-scale
grouped policy optimization), and ``rerank`` (before/after metrics around
feedback augmentation).

Every command resolves its settings as defaults < --config JSON < explicit
flags, writes the resolved config plus input-file digests into
``<out>/manifest.json``, and exits 0 on success, 2 on usage/input errors, and
1 on internal errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import Judgment, Selection, attach_captions, load_interactions
from .env import EnvConfig, SyntheticEpisodeSource, derive_seed, generate_synthetic_world, load_episodes
from .grpo import (
    GrpoConfig,
    ToySoftmaxPolicy,
    curriculum_switch_iteration,
    evaluate_policy,
    train,
)
from .fixtures import simulation_request
from .ipagent import DEFAULT_CAPTION_MODEL, batch_augment
from .llmclient import (
    ClientError,
    EndpointConfig,
    HttpTransport,
    RecordingTransport,
    ReplayTransport,
    Transport,
    complete_batch,
)
from .recommender import (
    MetricReport,
    RandomGenerator,
    augment_with_feedback,
    classification_metrics,
    evaluate_leave_one_out,
    fit_embedding,
    fit_markov,
    fit_popularity,
    load_feedback,
    load_item_features,
)
from .rewards import Select, Verdict, parse_response, total_reward


class InputError(ValueError):
    """Bad flags or bad input files; maps to exit code 2."""


_GENERATORS = {"popularity": fit_popularity, "markov": fit_markov, "embedding": fit_embedding}


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[str | Path]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {
            str(p): _sha256(Path(p)) for p in sorted(map(str, inputs)) if Path(p).is_file()
        },
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < --config file < explicit flags."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(file_cfg, dict):
            raise InputError("config file must hold a JSON object")
        if set(file_cfg) == {"command", "config", "inputs", "version"}:
            # a manifest from a previous run reruns with its resolved config
            file_cfg = file_cfg["config"]
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, default)
        resolved[key] = value
    return resolved


def _out_dir(resolved: dict) -> Path:
    out = resolved.get("out")
    if not out:
        raise InputError("an output directory is required (--out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_file(path_str: str | None, what: str) -> Path:
    if not path_str:
        raise InputError(f"{what} is required")
    path = Path(path_str)
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _endpoint_config(resolved: dict) -> EndpointConfig:
    return EndpointConfig(
        base_url=resolved.get("endpoint") or "",
        timeout=resolved["timeout"],
        max_retries=resolved["retries"],
        max_in_flight=resolved["in_flight"],
    )


def _transport(resolved: dict, cfg: EndpointConfig) -> Transport:
    if resolved.get("replay"):
        transport: Transport = ReplayTransport(_require_file(resolved["replay"], "replay file"))
    elif resolved.get("endpoint"):
        transport = HttpTransport(cfg)
    else:
        raise InputError("provide --endpoint URL or --replay FILE")
    if resolved.get("record"):
        transport = RecordingTransport(transport, resolved["record"])
    return transport


def _ks(spec: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in str(spec).split(","))
    except ValueError as exc:
        raise InputError(f"bad k list {spec!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise InputError(f"bad k list {spec!r}")
    return ks


def _load_catalog_histories(resolved: dict):
    interactions = _require_file(resolved["interactions"], "interactions file")
    catalog, histories = load_interactions(interactions)
    if resolved.get("captions"):
        catalog = attach_captions(catalog, _require_file(resolved["captions"], "captions file"))
    if resolved.get("features"):
        catalog = load_item_features(catalog, _require_file(resolved["features"], "features file"))
    return catalog, histories, interactions


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

_AUGMENT_DEFAULTS = {
    "interactions": None,
    "frame_scores": None,
    "out": None,
    "endpoint": None,
    "replay": None,
    "record": None,
    "model": DEFAULT_CAPTION_MODEL,
    "parallelism": 1,
    "timeout": 30.0,
    "retries": 3,
    "in_flight": 4,
}


def cmd_augment(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _AUGMENT_DEFAULTS)
    out = _out_dir(resolved)
    interactions = _require_file(resolved["interactions"], "interactions file")
    frame_scores = _require_file(resolved["frame_scores"], "frame-scores file")
    catalog, _ = load_interactions(interactions)
    cfg = _endpoint_config(resolved)
    transport = _transport(resolved, cfg)

    captions_path = out / "captions.jsonl"
    report = batch_augment(
        catalog,
        frame_scores,
        cfg,
        transport,
        captions_path,
        model=resolved["model"],
        parallelism=resolved["parallelism"],
    )
    (out / "failures.json").write_text(
        json.dumps([{"item": i, "stage": s} for i, s in report.failures], indent=2) + "\n",
        encoding="utf-8",
    )
    _write_manifest(out, "augment", resolved, [interactions, frame_scores])
    print(f"captions: {captions_path}")
    print(f"written: {report.written} skipped: {report.skipped} failed: {len(report.failures)}")
    return 0


# ---------------------------------------------------------------------------
# eval-rec
# ---------------------------------------------------------------------------

_EVAL_DEFAULTS = {
    "interactions": None,
    "captions": None,
    "features": None,
    "model": "popularity",
    "k": "10,20",
    "slice": "all,cold",
    "seed": 0,
    "out": None,
}


def cmd_eval_rec(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _EVAL_DEFAULTS)
    out = _out_dir(resolved)
    if resolved["model"] not in _GENERATORS:
        raise InputError(f"unknown model {resolved['model']!r}")
    catalog, histories, interactions = _load_catalog_histories(resolved)
    ks = _ks(resolved["k"])
    slices = tuple(str(resolved["slice"]).split(","))
    train_views = [h.training_view() for h in histories]

    generator = _GENERATORS[resolved["model"]](train_views, catalog)
    reports = evaluate_leave_one_out(generator, histories, ks=ks, slices=slices)

    baseline = RandomGenerator(seed=int(resolved["seed"]))
    baseline.fit(train_views, catalog)
    baseline_reports = evaluate_leave_one_out(baseline, histories, ks=ks, slices=slices)

    payload = {
        "model": resolved["model"],
        "slices": {tag: rep.to_dict() for tag, rep in reports.items()},
        "random_baseline": {tag: rep.to_dict() for tag, rep in baseline_reports.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(
        out,
        "eval-rec",
        resolved,
        [p for p in (interactions, resolved.get("captions"), resolved.get("features")) if p],
    )
    for tag, rep in reports.items():
        for k in ks:
            print(f"{resolved['model']} [{tag}] HR@{k}={rep.hr[k]:.4f} NDCG@{k}={rep.ndcg[k]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_SIMULATE_DEFAULTS = {
    "episodes": None,
    "task": None,
    "m": None,
    "endpoint": None,
    "replay": None,
    "record": None,
    "model": "user-sim",
    "temperature": 0.0,
    "timeout": 30.0,
    "retries": 3,
    "in_flight": 4,
    "out": None,
}


def cmd_simulate(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _SIMULATE_DEFAULTS)
    out = _out_dir(resolved)
    episodes_path = _require_file(resolved["episodes"], "episodes file")
    episodes = load_episodes(episodes_path)
    if resolved.get("task"):
        kind = resolved["task"]
        if kind not in ("judgment", "selection"):
            raise InputError(f"unknown task {kind!r}")
        episodes = [
            ep
            for ep in episodes
            if isinstance(ep.task, Judgment if kind == "judgment" else Selection)
        ]
    if resolved.get("m") is not None:
        m = int(resolved["m"])
        episodes = [
            ep
            for ep in episodes
            if not isinstance(ep.task, Selection) or ep.task.candidates.size - 1 == m
        ]
    if not episodes:
        raise InputError("no episodes left after filtering")

    cfg = _endpoint_config(resolved)
    transport = _transport(resolved, cfg)
    requests = [
        simulation_request(ep.prompt, model=resolved["model"], temperature=resolved["temperature"])
        for ep in episodes
    ]
    replies = complete_batch(requests, cfg, transport=transport)

    transcripts = []
    judgment_preds: list[str] = []
    judgment_truths: list[str] = []
    parse_failures = 0
    selection_hits: dict[int, list[int]] = {}
    totals = []
    for episode, reply in zip(episodes, replies):
        text = reply if isinstance(reply, str) else ""
        parsed = parse_response(text, episode.task)
        breakdown = total_reward(text, episode.task, episode.truth)
        totals.append(breakdown.total)
        action: str | int | None
        if isinstance(parsed.action, Verdict):
            action = parsed.action.value
        elif isinstance(parsed.action, Select):
            action = parsed.action.index
        else:
            action = None
        if isinstance(episode.task, Judgment):
            if parsed.action is None:
                parse_failures += 1
            judgment_preds.append("like" if parsed.action is Verdict.YES else "dislike")
            judgment_truths.append(str(episode.truth))
        else:
            m_here = episode.task.candidates.size - 1
            selection_hits.setdefault(m_here, []).append(
                int(isinstance(parsed.action, Select) and parsed.action.index == episode.truth)
            )
        transcripts.append(
            {
                "user": episode.user,
                "task": "judgment" if isinstance(episode.task, Judgment) else "selection",
                "truth": episode.truth,
                "response": text if isinstance(reply, str) else f"<error: {reply}>",
                "action": action,
                "r_format": breakdown.r_format,
                "r_task": breakdown.r_task,
                "total": breakdown.total,
            }
        )

    report = MetricReport(slice_tag="all", n_users=len({ep.user for ep in episodes}))
    if judgment_truths:
        cls = classification_metrics(judgment_preds, judgment_truths)
        report.acc, report.precision, report.recall, report.f1 = cls
    if selection_hits:
        report.selection_acc = {m: float(np.mean(hits)) for m, hits in sorted(selection_hits.items())}
    metrics: dict = {
        "n_episodes": len(episodes),
        "mean_total_reward": float(np.mean(totals)),
        **report.to_dict(),
    }
    if judgment_truths:
        metrics["parse_failures"] = parse_failures

    with (out / "transcripts.jsonl").open("w", encoding="utf-8") as handle:
        for row in transcripts:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "simulate", resolved, [episodes_path])
    print(json.dumps(metrics, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "world_spec": None,
    "grpo_config": None,
    "iters": 1000,
    "seed": 0,
    "task": "selection",
    "curriculum": "off",
    "curriculum_fraction": 0.5,
    "m": 3,
    "eval_episodes": 400,
    "out": None,
    # world spec defaults (overridable in the --world-spec file)
    "n_users": 40,
    "n_items": 300,
    "dim": 8,
    "world_seed": 11,
    "history_length": 6,
    "pool_size": 10,
    "noise": 0.0,
    "like_threshold": 0.0,
    "temperature": 2.5,
}

_WORLD_KEYS = (
    "n_users",
    "n_items",
    "dim",
    "world_seed",
    "history_length",
    "pool_size",
    "noise",
    "like_threshold",
)
_GRPO_KEYS = ("group_size", "clip_epsilon", "kl_coefficient", "learning_rate", "std_floor", "discount")


def cmd_train_toy(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    out = _out_dir(resolved)
    inputs = []
    if resolved.get("world_spec"):
        spec_path = _require_file(resolved["world_spec"], "world-spec file")
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
        unknown = set(spec) - set(_WORLD_KEYS) - {"m"}
        if unknown:
            raise InputError(f"unknown world-spec keys: {sorted(unknown)}")
        for key in _WORLD_KEYS:
            if key in spec:
                resolved[key] = spec[key]
        if "m" in spec:
            resolved["m"] = spec["m"]
        inputs.append(spec_path)

    grpo_kwargs: dict = {}
    if resolved.get("grpo_config"):
        grpo_path = _require_file(resolved["grpo_config"], "grpo-config file")
        grpo_kwargs = json.loads(grpo_path.read_text(encoding="utf-8"))
        unknown = set(grpo_kwargs) - set(_GRPO_KEYS)
        if unknown:
            raise InputError(f"unknown grpo-config keys: {sorted(unknown)}")
        inputs.append(grpo_path)
    try:
        grpo_cfg = GrpoConfig(**grpo_kwargs)
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    task = str(resolved["task"])
    if task not in ("judgment", "selection", "mixed"):
        raise InputError(f"unknown task {task!r}")
    curriculum_on = str(resolved["curriculum"]) == "on"
    if curriculum_on:
        task = "mixed"

    world, catalog, histories = generate_synthetic_world(
        n_users=int(resolved["n_users"]),
        n_items=int(resolved["n_items"]),
        dim=int(resolved["dim"]),
        seed=int(resolved["world_seed"]),
        history_length=resolved["history_length"]
        if isinstance(resolved["history_length"], int)
        else tuple(resolved["history_length"]),
        pool_size=int(resolved["pool_size"]),
        like_threshold=float(resolved["like_threshold"]),
        noise=float(resolved["noise"]),
    )
    env_cfg = EnvConfig(top_k=int(resolved["pool_size"]), m=int(resolved["m"]), seed=int(resolved["seed"]))
    source = SyntheticEpisodeSource(world, catalog, histories, env_cfg, pool_size=int(resolved["pool_size"]))
    policy = ToySoftmaxPolicy(world, dim=int(resolved["dim"]), temperature=float(resolved["temperature"]))

    iterations = int(resolved["iters"])
    report_every = max(1, iterations // 10)

    def report_progress(entry: dict) -> None:
        if entry["iter"] % report_every == 0 or entry["iter"] == iterations - 1:
            print(
                f"iter {entry['iter']:>5} [{entry['task']}] "
                f"mean_reward {entry['mean_reward']:+.3f} accuracy {entry['accuracy']:.2f}"
            )

    trace = train(
        source,
        policy,
        grpo_cfg,
        iterations=iterations,
        seed=int(resolved["seed"]),
        task=task,
        curriculum_fraction=float(resolved["curriculum_fraction"]),
        trace_path=out / "trace.jsonl",
        progress=report_progress,
    )

    eval_rng = np.random.default_rng(derive_seed(int(resolved["seed"]), "held-out"))
    n_eval = int(resolved["eval_episodes"])
    heldout: dict[str, float] = {}
    kinds = ("judgment", "selection") if task == "mixed" else (task,)
    for kind in kinds:
        episodes = [source.sample(eval_rng, kind) for _ in range(n_eval)]
        heldout[kind] = evaluate_policy(policy, episodes)

    np.savez(out / "policy.npz", W=policy.W)
    summary = {
        "iterations": iterations,
        "task": task,
        "heldout_accuracy": heldout,
        "final_mean_reward": trace[-1]["mean_reward"],
        "switch_iteration": curriculum_switch_iteration(
            iterations, float(resolved["curriculum_fraction"])
        )
        if task == "mixed"
        else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "train-toy", resolved, inputs)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# rerank
# ---------------------------------------------------------------------------

_RERANK_DEFAULTS = {
    "interactions": None,
    "feedback": None,
    "captions": None,
    "features": None,
    "model": "markov",
    "k": "10,20",
    "out": None,
}


def cmd_rerank(args: argparse.Namespace) -> int:
    resolved = _resolve(args, _RERANK_DEFAULTS)
    out = _out_dir(resolved)
    if resolved["model"] not in _GENERATORS:
        raise InputError(f"unknown model {resolved['model']!r}")
    catalog, histories, interactions = _load_catalog_histories(resolved)
    feedback_path = _require_file(resolved["feedback"], "feedback file")
    feedback = load_feedback(feedback_path)
    ks = _ks(resolved["k"])

    train_views = [h.training_view() for h in histories]
    fit = _GENERATORS[resolved["model"]]
    before = evaluate_leave_one_out(fit(train_views, catalog), histories, ks=ks)
    augmented = augment_with_feedback(train_views, feedback, catalog)
    after = evaluate_leave_one_out(fit(augmented, catalog), histories, ks=ks)

    payload = {
        "model": resolved["model"],
        "n_feedback": len(feedback),
        "before": {tag: rep.to_dict() for tag, rep in before.items()},
        "after": {tag: rep.to_dict() for tag, rep in after.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "rerank", resolved, [interactions, feedback_path])
    for k in ks:
        print(
            f"HR@{k}: before={before['all'].hr[k]:.4f} after={after['all'].hr[k]:.4f}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override its keys")
    sub.add_argument("--out", help="output directory for this run")


def _add_endpoint_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--endpoint", help="chat-completion base URL")
    sub.add_argument("--replay", help="replay transcript file instead of a live endpoint")
    sub.add_argument("--record", help="record request/response pairs to this file")
    sub.add_argument("--model", help="model name sent with each request")
    sub.add_argument("--timeout", type=float)
    sub.add_argument("--retries", type=int)
    sub.add_argument("--in-flight", dest="in_flight", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simrec",
        description="User-simulation harness and recommendation environment.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command")

    aug = commands.add_parser("augment", help="caption items via the perception pipeline")
    _add_common(aug)
    _add_endpoint_flags(aug)
    aug.add_argument("--interactions")
    aug.add_argument("--frame-scores", dest="frame_scores")
    aug.add_argument("--parallelism", type=int)
    aug.set_defaults(func=cmd_augment)

    ev = commands.add_parser("eval-rec", help="leave-one-out ranking metrics")
    _add_common(ev)
    ev.add_argument("--interactions")
    ev.add_argument("--captions")
    ev.add_argument("--features")
    ev.add_argument("--model", choices=sorted(_GENERATORS))
    ev.add_argument("--k")
    ev.add_argument("--slice")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_eval_rec)

    sim = commands.add_parser("simulate", help="score an endpoint on exported episodes")
    _add_common(sim)
    _add_endpoint_flags(sim)
    sim.add_argument("--episodes")
    sim.add_argument("--task", choices=("judgment", "selection"))
    sim.add_argument("--m", type=int)
    sim.add_argument("--temperature", type=float)
    sim.set_defaults(func=cmd_simulate)

    tr = commands.add_parser("train-toy", help="desk-scale grouped policy optimization")
    _add_common(tr)
    tr.add_argument("--world-spec", dest="world_spec")
    tr.add_argument("--grpo-config", dest="grpo_config")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--task", choices=("judgment", "selection", "mixed"))
    tr.add_argument("--curriculum", choices=("on", "off"))
    tr.add_argument("--curriculum-fraction", dest="curriculum_fraction", type=float)
    tr.add_argument("--m", type=int)
    tr.add_argument("--eval-episodes", dest="eval_episodes", type=int)
    tr.set_defaults(func=cmd_train_toy)

    rr = commands.add_parser("rerank", help="before/after metrics around liked feedback")
    _add_common(rr)
    rr.add_argument("--interactions")
    rr.add_argument("--feedback")
    rr.add_argument("--captions")
    rr.add_argument("--features")
    rr.add_argument("--model", choices=sorted(_GENERATORS))
    rr.add_argument("--k")
    rr.set_defaults(func=cmd_rerank)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ClientError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
