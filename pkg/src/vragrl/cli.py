"""Command-line entry point.

Every command writes ``run_manifest.json`` into its output directory before
doing any work, and fills in output hashes when it is done. ``replay``
re-runs a manifest and compares hashes.

Exit codes: 0 success, 2 configuration error, 3 environment or endpoint
error, 4 quality threshold not met.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import statistics
import sys
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .clients import BadCompletion, ChatClient, EndpointUnreachable, FunctionModel, ImageStore
from .config import ConfigError, RunConfig
from .expert import BudgetExhausted, ExpertClients, InvalidTargets, synthesize_dataset, to_sft_record
from .grpo import GrpoConfig, ToyPolicy, config_dict, save_checkpoint
from .prompts import JUDGE_SYSTEM_PROMPT, PROMPTS, prompt_hash
from .retrieval import (
    RemoteRetriever,
    RetrievalError,
    SimulatedRetriever,
    corpus_fingerprint,
    load_corpus,
    make_planted_corpus,
    save_corpus,
)
from .reward import ExactMatchJudge, JudgeUnreachable, score_batch, score_trajectory
from .rollout import ChatPolicy, EnvironmentBundle, OraclePolicy, derive_seed, rollout_group
from .toy import N_STATES, TEMPLATES, enumerate_optimum, make_toy_task, train_toy, write_curve
from .trajectory import EmptyBatch, FinishReason, compute_metrics, iter_jsonl, read_jsonl, write_jsonl

logger = logging.getLogger("vragrl")

EXIT_OK, EXIT_CONFIG, EXIT_ENV, EXIT_QUALITY = 0, 2, 3, 4
MANIFEST = "run_manifest.json"
MAX_CORRUPT_FRACTION = 0.10


class QualityFailure(Exception):
    pass


class EnvironmentFailure(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def output_hashes(out: Path) -> dict:
    return {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST
    }


class Run:
    """Owns the output directory and its manifest."""

    def __init__(self, command: str, config: RunConfig, args: dict):
        self.command = command
        self.config = config
        self.out = Path(config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "args": args,
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "prompt_hash": prompt_hash(PROMPTS[config.system_prompt]),
            "judge_prompt_hash": prompt_hash(JUDGE_SYSTEM_PROMPT),
            "version": _version(),
            "endpoints": {
                "policy": config.policy.endpoint,
                "judge": config.judge.endpoint,
                "search": config.search_endpoint,
            },
            "status": "running",
            "outputs": {},
        }
        self.write()

    def write(self) -> None:
        (self.out / MANIFEST).write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    def close(self, status: str = "ok", **extra) -> None:
        self.manifest.update(extra)
        self.manifest["status"] = status
        self.manifest["outputs"] = output_hashes(self.out)
        self.write()


# --- building blocks ------------------------------------------------------------


def _environment(config: RunConfig, corpus, store: ImageStore) -> EnvironmentBundle:
    if config.search_endpoint:
        retriever = RemoteRetriever(config.search_endpoint)
    else:
        retriever = SimulatedRetriever(corpus, seed=config.seed)
    return EnvironmentBundle(retriever, config.encoder, PROMPTS[config.system_prompt], store)


def _policy(config: RunConfig, tasks, store: ImageStore):
    if config.policy.kind == "oracle":
        return OraclePolicy(tasks)
    client = ChatClient(
        config.policy.endpoint,
        model=config.policy.model,
        temperature=config.rollout.temperature,
        max_tokens=config.rollout.max_response_tokens,
        timeout=config.policy.timeout,
        backoff=config.policy.backoff,
        store=store,
    )
    return ChatPolicy(client)


def _judge(config: RunConfig, no_judge: bool):
    if no_judge:
        return None
    if config.judge.kind == "exact-match":
        return ExactMatchJudge()
    return ChatClient(
        config.judge.endpoint, model=config.judge.model, timeout=config.judge.timeout, backoff=config.judge.backoff
    )


def _load_tasks(config: RunConfig):
    path = cfgmod.require_corpus(config)
    try:
        return load_corpus(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("corpus", f"cannot load {path}: {exc}") from exc


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def _score_rows(trajs, breakdowns, no_judge: bool) -> list[dict]:
    rows = []
    for i, (t, b) in enumerate(zip(trajs, breakdowns)):
        row = {"index": i, "task_id": t.task_id, **b.to_dict()}
        if no_judge:
            row.pop("r_ans")
            row.pop("r_total")
        rows.append(row)
    return rows


def _aggregate(rows: list[dict]) -> dict:
    agg = {}
    for key in ("r_ret", "r_ans", "r_pat", "r_total"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            agg[key] = statistics.fmean(vals)
    return agg


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _print_table(metrics: dict) -> None:
    width = max(len(k) for k in metrics)
    for k in sorted(metrics):
        v = metrics[k]
        print(f"{k:<{width}}  {_fmt(v) if isinstance(v, float) else v}")


def _plot_bars(path: Path, values: dict, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    keys = sorted(values)
    ax.bar(keys, [values[k] for k in keys], color="#4c72b0")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _plot_curve(path: Path, curve, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [p.step for p in curve]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.plot(steps, [p.mean_reward for p in curve], lw=0.8, alpha=0.5, label="group mean reward")
    if len(curve) >= 2:
        w = min(25, len(curve))
        smooth = np.convolve([p.mean_reward for p in curve], np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1 :], smooth, lw=1.5, label=f"moving mean ({w})")
    ax.plot(steps, [p.greedy_reward for p in curve], lw=1.0, ls="--", label="greedy reward")
    ax.set_xlabel("update")
    ax.set_ylabel("reward")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


# --- commands -------------------------------------------------------------------


def cmd_make_corpus(config: RunConfig, args: dict) -> int:
    run = Run("make-corpus", config, args)
    corpus, tasks = make_planted_corpus(
        n_docs=args["n_docs"], n_tasks=args["n_tasks"], golden_per_task=args["golden_per_task"], seed=config.seed
    )
    save_corpus(run.out, corpus, tasks, write_images=args["images"])
    print(f"wrote {len(corpus)} pages and {len(tasks)} tasks to {run.out}")
    run.close(corpus_fingerprint=corpus_fingerprint(corpus))
    return EXIT_OK


def cmd_rollout(config: RunConfig, args: dict, plot: bool = False) -> int:
    corpus, tasks = _load_tasks(config)
    run = Run("evaluate" if plot else "rollout", config, args)
    run.manifest["corpus_fingerprint"] = corpus_fingerprint(corpus)
    run.write()
    store = ImageStore(run.out / "images")
    env = _environment(config, corpus, store)
    policy = _policy(config, tasks, store)
    judge = _judge(config, args.get("no_judge", False))

    trajs = []
    for i, task in enumerate(sorted(tasks, key=lambda t: t.id)):
        group = rollout_group(
            task, policy, env, config.rollout, config.grpo.group_size, derive_seed(config.seed, i), config.workers
        )
        trajs.extend(group)
    write_jsonl(run.out / "trajectories.jsonl", trajs)
    if not trajs:
        raise ConfigError("corpus", "corpus has no tasks")

    fatal = [t for t in trajs if t.finish_reason is FinishReason.FATAL_ERROR]
    by_id = {t.id: t for t in tasks}
    try:
        breakdowns = score_batch(
            trajs, by_id, judge, config.reward_weights(), workers=config.workers, judge_attempts=config.judge.attempts
        )
    except JudgeUnreachable as exc:
        run.close("failed", error=str(exc))
        raise EnvironmentFailure(f"judge unreachable: {exc}") from exc
    rows = _score_rows(trajs, breakdowns, judge is None)
    _write_rows(run.out / "scores.jsonl", rows)
    m = compute_metrics(trajs)
    metrics = {
        "finish_rate": m.finish_rate,
        "invalid_action_rate": m.invalid_action_rate,
        "mean_steps": m.mean_steps,
        "n_trajectories": len(trajs),
        **{f"mean_{k}": v for k, v in _aggregate(rows).items()},
    }
    (run.out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    if plot:
        bars = {k: v for k, v in metrics.items() if k.startswith("mean_r_") or k == "finish_rate"}
        _plot_bars(run.out / "rewards.png", bars, "reward breakdown")
    _print_table(metrics)
    if fatal:
        run.close("failed", error=fatal[0].error)
        raise EnvironmentFailure(f"{len(fatal)} of {len(trajs)} rollouts hit a fatal error: {fatal[0].error}")
    run.close()
    return EXIT_OK


def cmd_score(config: RunConfig, args: dict) -> int:
    corpus, tasks = _load_tasks(config)
    run = Run("score", config, args)
    judge = _judge(config, args["no_judge"])
    by_id = {t.id: t for t in tasks}
    trajs, skipped, total = [], 0, 0
    for lineno, item in iter_jsonl(args["input"]):
        total += 1
        if isinstance(item, Exception):
            logger.warning("%s:%d: skipping corrupt record (%s)", args["input"], lineno, item)
            skipped += 1
        elif item.task_id not in by_id:
            logger.warning("%s:%d: unknown task %s, skipping", args["input"], lineno, item.task_id)
            skipped += 1
        else:
            trajs.append(item)
    try:
        breakdowns = [
            score_trajectory(t, by_id[t.task_id], judge, config.reward_weights(), config.judge.attempts) for t in trajs
        ]
    except JudgeUnreachable as exc:
        run.close("failed", error=str(exc))
        raise EnvironmentFailure(f"judge unreachable: {exc}") from exc
    rows = _score_rows(trajs, breakdowns, judge is None)
    _write_rows(run.out / "scores.jsonl", rows)
    summary = {"n_scored": len(rows), "n_skipped": skipped, **{f"mean_{k}": v for k, v in _aggregate(rows).items()}}
    (run.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    for row in rows:
        print("  ".join(f"{k}={_fmt(row[k]) if isinstance(row[k], float) else row[k]}" for k in ("task_id", "r_ret", "r_ans", "r_pat", "r_total") if k in row))
    _print_table(summary)
    if total and skipped / total > MAX_CORRUPT_FRACTION:
        run.close("failed", error=f"{skipped} of {total} records skipped")
        raise QualityFailure(f"{skipped} of {total} records were corrupt or unknown")
    run.close()
    return EXIT_OK


def cmd_train_toy(config: RunConfig, args: dict) -> int:
    run = Run("train-toy", config, args)
    toy = make_toy_task(config.seed, n_docs=config.toy.n_docs, max_steps=config.toy.max_steps)
    grpo = GrpoConfig(
        group_size=config.grpo.group_size,
        clip_epsilon=config.grpo.clip_epsilon,
        kl_coefficient=config.grpo.kl_coefficient,
        learning_rate=config.toy.learning_rate,
        advantage_std_floor=config.grpo.advantage_std_floor,
    )
    weights = config.reward_weights()
    optimum, best = enumerate_optimum(toy, weights)
    policy = ToyPolicy.uniform(N_STATES, len(TEMPLATES))
    result = train_toy(toy, policy, grpo, steps=config.toy.steps, seed=config.seed, weights=weights)
    write_curve(run.out / "curve.csv", result.curve)
    _plot_curve(run.out / "curve.png", result.curve, f"toy GRPO, seed {config.seed}")
    save_checkpoint(run.out / "checkpoint.bin", {"params": result.policy.params}, config_dict(grpo), config.seed)
    final = result.curve[-1].greedy_reward if result.curve else None
    summary = {
        "optimum": optimum,
        "optimal_sequence": [TEMPLATES[a] for a in best],
        "final_greedy_reward": final,
        "updates": len(result.curve),
        "diverged": result.diverged,
    }
    (run.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _print_table({k: v for k, v in summary.items() if not isinstance(v, list)})
    if result.diverged:
        run.close("failed", error="loss became non-finite")
        raise QualityFailure("training diverged")
    run.close()
    return EXIT_OK


class _OracleGrounder:
    """Points at the whole image it is shown."""

    def complete(self, messages, **params) -> str:
        view = messages[-1]["images"][-1].view
        return f"<bbox>[0, 0, {view.enc_width}, {view.enc_height}]</bbox>"


def cmd_synthesize(config: RunConfig, args: dict) -> int:
    corpus, tasks = _load_tasks(config)
    run = Run("synthesize", config, args)
    store = ImageStore(run.out / "images")
    env = _environment(config, corpus, store)
    spec = config.synthesis
    if spec.guide == "oracle":
        oracle = OraclePolicy(tasks)
        guide = FunctionModel(lambda m: oracle.generate(m))
    else:
        guide = ChatClient(spec.guide, store=store, temperature=1.0)
    grounder = _OracleGrounder() if spec.grounder == "oracle" else ChatClient(spec.grounder, store=store)
    judge = _judge(config, False)
    try:
        manifest, kept = synthesize_dataset(
            sorted(tasks, key=lambda t: t.id),
            ExpertClients(guide, grounder),
            env,
            spec.targets,
            judge,
            out_dir=run.out,
            max_attempts=spec.max_attempts,
            weights=config.reward_weights(),
            seed=config.seed,
            workers=spec.workers,
        )
    except InvalidTargets as exc:
        raise ConfigError("synthesis.targets", str(exc)) from exc
    except BudgetExhausted as exc:
        _print_table({"attempts": exc.manifest.attempts, "exported": len(exc.manifest.records)})
        run.close("failed", error=str(exc))
        raise QualityFailure(str(exc)) from exc
    except (EndpointUnreachable, BadCompletion, JudgeUnreachable) as exc:
        run.close("failed", error=str(exc))
        raise EnvironmentFailure(str(exc)) from exc
    _print_table({"attempts": manifest.attempts, "exported": len(kept)})
    run.close()
    return EXIT_OK


def cmd_export_sft(config: RunConfig, args: dict) -> int:
    run = Run("export-sft", config, args)
    trajs = read_jsonl(args["input"])
    with open(run.out / "sft.jsonl", "w") as fh:
        for t in trajs:
            fh.write(json.dumps(to_sft_record(t, args["image_prefix"]), sort_keys=True, ensure_ascii=False) + "\n")
    print(f"wrote {len(trajs)} records")
    run.close()
    return EXIT_OK


def replay(manifest_path: str, out: Optional[str] = None) -> tuple[bool, dict, dict]:
    """Re-run a manifest into ``out`` and compare output hashes."""
    recorded = json.loads(Path(manifest_path).read_text())
    data = dict(recorded["config"])
    data["out"] = out or tempfile.mkdtemp(prefix="vragrl-replay-")
    config = cfgmod.from_dict(data)
    try:
        COMMANDS[recorded["command"]](config, dict(recorded["args"]))
    except (QualityFailure, EnvironmentFailure):
        pass
    fresh = output_hashes(Path(config.out))
    return fresh == recorded["outputs"], recorded["outputs"], fresh


def cmd_replay(args: argparse.Namespace) -> int:
    same, old, new = replay(args.manifest, args.out)
    for name in sorted(set(old) | set(new)):
        status = "same" if old.get(name) == new.get(name) else "DIFFERENT"
        print(f"{status:9}  {name}")
    print("bit-identical" if same else "outputs differ")
    return EXIT_OK if same else EXIT_QUALITY


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "rollout": cmd_rollout,
    "evaluate": lambda c, a: cmd_rollout(c, a, plot=True),
    "score": cmd_score,
    "train-toy": cmd_train_toy,
    "synthesize": cmd_synthesize,
    "export-sft": cmd_export_sft,
}


# --- argument parsing -----------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus", help="corpus directory (as written by make-corpus)")
    p.add_argument("--policy-endpoint", help="OpenAI-compatible base URL of the policy model")
    p.add_argument("--judge-endpoint", help="OpenAI-compatible base URL of the judge model")
    p.add_argument("--weights-profile", choices=["post-sft", "cold-start", "custom"])
    p.add_argument("--weights", type=float, nargs=3, metavar=("ALPHA", "BETA", "GAMMA"))
    p.add_argument("--group-size", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vragrl", description="Visual retrieval agent RL toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a seeded synthetic corpus with planted tasks")
    _common(p)
    p.add_argument("--n-docs", type=int, default=20)
    p.add_argument("--n-tasks", type=int, default=4)
    p.add_argument("--golden-per-task", type=int, default=1)
    p.add_argument("--no-images", dest="images", action="store_false", help="pages are drawn on demand")

    for name, help_text in (
        ("rollout", "run rollouts and report metrics"),
        ("evaluate", "rollouts, metrics and a reward bar chart"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--no-judge", action="store_true")

    p = sub.add_parser("score", help="score a trajectory file")
    _common(p)
    p.add_argument("input")
    p.add_argument("--no-judge", action="store_true")

    p = sub.add_parser("train-toy", help="GRPO on the toy planted task")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--kl", type=float)

    p = sub.add_parser("synthesize", help="build a balanced guided dataset")
    _common(p)
    p.add_argument("--guide", help="guide endpoint URL or 'oracle'")
    p.add_argument("--grounder", help="grounding endpoint URL or 'oracle'")
    p.add_argument("--targets", help="bucket counts, e.g. 2=4,3=2")
    p.add_argument("--max-attempts", type=int)

    p = sub.add_parser("export-sft", help="convert trajectories to chat fine-tuning records")
    _common(p)
    p.add_argument("input")
    p.add_argument("--image-prefix", default="images/")

    p = sub.add_parser("replay", help="re-run a run manifest and compare output hashes")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _parse_targets(text: Optional[str]) -> Optional[dict]:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        key, sep, n = part.partition("=")
        if not sep:
            raise ConfigError("synthesis.targets", f"bad bucket {part!r}, expected STEPS=COUNT")
        out[key.strip()] = int(n)
    return out


def flags_from_args(ns: argparse.Namespace) -> dict:
    g = lambda name: getattr(ns, name, None)  # noqa: E731
    flags = {
        "seed": g("seed"),
        "corpus": str(Path(ns.corpus).resolve()) if g("corpus") else None,
        "out": g("out"),
        "weights_profile": g("weights_profile"),
        "weights": g("weights"),
        "grpo.group_size": g("group_size"),
        "rollout.max_iterations": g("max_steps"),
        "workers": g("workers"),
        "toy.steps": g("steps"),
        "toy.learning_rate": g("lr"),
        "grpo.kl_coefficient": g("kl"),
        "synthesis.guide": g("guide"),
        "synthesis.grounder": g("grounder"),
        "synthesis.targets": _parse_targets(g("targets")),
        "synthesis.max_attempts": g("max_attempts"),
    }
    if g("policy_endpoint"):
        flags.update({"policy.endpoint": ns.policy_endpoint, "policy.kind": "endpoint"})
    if g("judge_endpoint"):
        flags.update({"judge.endpoint": ns.judge_endpoint, "judge.kind": "endpoint"})
    return flags


def command_args(ns: argparse.Namespace) -> dict:
    keep = ("input", "no_judge", "n_docs", "n_tasks", "golden_per_task", "images", "image_prefix")
    args = {k: getattr(ns, k) for k in keep if hasattr(ns, k)}
    if "input" in args:
        args["input"] = str(Path(args["input"]).resolve())
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if ns.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if ns.command == "replay":
            return cmd_replay(ns)
        config = cfgmod.resolve(ns.config, flags_from_args(ns))
        return COMMANDS[ns.command](config, command_args(ns))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvironmentFailure, EndpointUnreachable, JudgeUnreachable, RetrievalError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (QualityFailure, EmptyBatch) as exc:
        print(f"quality check failed: {exc}", file=sys.stderr)
        return EXIT_QUALITY


if __name__ == "__main__":
    sys.exit(main())
