"""Command line entry point: ``flis run``, ``flis sweep``, ``flis report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np

from flis.config import ExperimentConfig, SweepSection, build_data, load_config
from flis.errors import ConfigError, FlisError
from flis.federation import RoundRecord, personalize_unseen, run, train_from_scratch
from flis.metrics import comm_cost, rounds_to_target, summarize, sweep, sweep_csv

log = logging.getLogger("flis")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _resolve(cfg: ExperimentConfig, seed: int | None, out: str | None) -> ExperimentConfig:
    """Apply command-line overrides so the echoed config reproduces the run."""
    upd = {}
    if seed is not None:
        upd["seed"] = seed
        upd["output"] = cfg.output.model_copy(update={"repeats": 1})
    if out is not None:
        upd["output"] = upd.get("output", cfg.output).model_copy(update={"dir": out})
    return cfg.model_copy(update=upd)


def _prepare_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    log.info("resolved config:\n%s", cfg.to_json().rstrip())
    return out


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every configured seed, write rounds.jsonl and summary.json, return the summary."""
    out = _prepare_dir(cfg)
    seeds = [cfg.seed + i for i in range(cfg.output.repeats)]
    runs = []
    with open(out / "rounds.jsonl", "w") as fh:
        for seed in seeds:
            clients, unseen, server = build_data(cfg, seed)
            result = run(cfg.federation_config(seed), clients, server)
            for rec in result.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            truth = {c.client_id: c.distribution_id for c in clients}
            entry = summarize(result.records, truth, cfg.output.targets).to_dict()
            entry["a_max_first_round"] = result.records[0].a_max
            if unseen:
                f = cfg.federation
                kw = dict(epochs=cfg.output.personalize_epochs, lr=f.lr, batch_size=f.batch_size, seed=seed)
                tuned = personalize_unseen(unseen, result.models, **kw)
                scratch = train_from_scratch(unseen, result.initial, **kw)
                entry["unseen"] = {
                    "clients": sorted(tuned),
                    "personalized_accuracy": float(np.mean(list(tuned.values()))),
                    "from_scratch_accuracy": float(np.mean(list(scratch.values()))),
                }
            runs.append(entry)
            log.info("seed %d: final accuracy %.4f", seed, entry["final_accuracy"])
    finals = [r["final_accuracy"] for r in runs]
    summary = {
        "mode": cfg.federation.mode,
        "seeds": seeds,
        "runs": runs,
        "mean_final_accuracy": float(np.mean(finals)),
        # population std over the seeds, not over clients
        "accuracy_std_over_seeds": float(np.std(finals)),
        "mean_comm_cost_mb": float(np.mean([r["comm_cost_mb"] for r in runs])),
    }
    (out / "summary.json").write_text(_dump(summary))
    return summary


def run_sweep(cfg: ExperimentConfig) -> str:
    out = _prepare_dir(cfg)
    grid = cfg.sweep or SweepSection()
    clients, _, server = build_data(cfg, cfg.seed)
    base = replace(cfg.federation_config(cfg.seed), mode="DC")
    rows = sweep(base, grid.betas, grid.epochs, clients, server)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text)
    return text


def _load_records(root: Path) -> dict[tuple[str, str, int], list[RoundRecord]]:
    files = [root] if root.is_file() else sorted(root.rglob("rounds.jsonl"))
    if not files:
        raise FileNotFoundError(f"no rounds.jsonl under {root}")
    groups: dict[tuple[str, str, int], list[RoundRecord]] = defaultdict(list)
    for path in files:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = RoundRecord.from_dict(json.loads(line))
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{n}: bad round record: {exc}") from exc
                groups[(str(path.parent), rec.mode, rec.seed)].append(rec)
    return groups


def report(root: str | Path, targets: list[float]) -> str:
    """Rounds and Mb needed to reach each target, one row per (run, mode, seed)."""
    groups = _load_records(Path(root))
    head = ["run", "mode", "seed"]
    for t in targets:
        head += [f"rounds@{t:g}", f"Mb@{t:g}"]
    head.append("total_Mb")
    rows = [head]
    for (where, mode, seed), recs in groups.items():
        recs.sort(key=lambda r: r.round)
        series = [r.mean_accuracy for r in recs]
        row = [where, mode, str(seed)]
        for t in targets:
            k = rounds_to_target(series, t)
            row += ["--", "--"] if k is None else [str(k), f"{comm_cost(recs[:k]):.3f}"]
        row.append(f"{comm_cost(recs):.3f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log the resolved config and progress")
    p = argparse.ArgumentParser(prog="flis", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run the configured federation mode")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="single seed, overrides seed and repeats")
    r.add_argument("--out", default=None, help="output directory")
    s = sub.add_parser("sweep", parents=[common], help="DC mode over the beta x local-epoch grid")
    s.add_argument("config")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    rep = sub.add_parser("report", parents=[common], help="rounds and traffic to reach target accuracies")
    rep.add_argument("dir")
    rep.add_argument("--target", type=float, action="append", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            sys.stdout.write(report(args.dir, args.target))
            return 0
        cfg = _resolve(load_config(args.config), args.seed, args.out)
        if args.command == "run":
            s = run_experiment(cfg)
            print(f"{s['mode']}: mean final accuracy {s['mean_final_accuracy']:.4f} "
                  f"(std over {len(s['seeds'])} seeds {s['accuracy_std_over_seeds']:.4f}) -> {cfg.output.dir}")
        else:
            run_sweep(cfg)
            print(f"sweep written to {Path(cfg.output.dir) / 'sweep.csv'}")
        return 0
    except ConfigError as exc:
        print(f"flis: config error: {exc}", file=sys.stderr)
        return 2
    except (FlisError, ValueError, OSError) as exc:
        print(f"flis: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
