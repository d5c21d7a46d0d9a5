"""Command-line entry point.

Exit codes: 0 success, 1 chain verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import ledger
from .metrics import MetricsSample
from .scenario import SUMMARY_COLUMNS, ScenarioError, load_scenario, run_scenario, summarize

EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2


def _table(rows: list[dict], columns: list[str]) -> str:
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*columns)] + [fmt.format(*row) for row in cells])


def cmd_run(args) -> int:
    env = dict(os.environ)
    if args.seed is not None:
        env["DELIBCHAIN_SEED"] = str(args.seed)
    if args.output_dir is not None:
        env["DELIBCHAIN_OUTPUT_DIR"] = str(Path(args.output_dir).resolve())
    try:
        sc = load_scenario(args.scenario, env)
        result = run_scenario(sc)
    except (ScenarioError, OSError) as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(_table(result.summary, SUMMARY_COLUMNS))
    print(f"wrote {len(result.chain_paths)} chains to {sc.output_dir}")
    if not result.chains_valid:
        print("error: at least one chain failed verification", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def verify_chain_cmd(path) -> tuple[bool, str]:
    """Replay a chain file from genesis and describe the result."""
    try:
        chain = ledger.load_chain(path)
    except ledger.VerificationFailed as exc:
        return False, f"invalid at height {exc.height}: {exc.reason}"
    lines = [f"valid, height {chain.height}"]
    lines += [f"  {b.height}: {b.outcome} ({b.size} bytes)" for b in chain]
    return True, "\n".join(lines)


def cmd_verify(args) -> int:
    if not Path(args.file).exists():
        print(f"error: {args.file} does not exist", file=sys.stderr)
        return EXIT_CONFIG
    ok, report = verify_chain_cmd(args.file)
    print(report)
    return EXIT_OK if ok else EXIT_INVALID


def describe_block(block: ledger.Block) -> dict:
    rec = block.record
    return {
        "height": block.height,
        "hash": block.hash.hex(),
        "prev_hash": block.header.prev_hash.hex(),
        "timestamp": block.header.timestamp,
        "size": block.size,
        "outcome": str(rec.outcome),
        "problem": {"id": rec.problem.id, "kind": rec.problem.kind.name.lower(), "statement": rec.problem.statement},
        "agents": rec.agents,
        "confidence": str(rec.confidence),
        "theta": str(rec.theta),
        "completed_at": rec.completed_at,
        "payoff": {a: str(v) for a, v in rec.payoff.items()},
        "rounds": len(rec.actions_by_round),
        "transcript": [
            {"round": u.round.name.lower(), "turn": u.turn, "agent": u.agent, "digest": u.digest.hex(),
             "body": u.body}
            for u in block.transcript
        ],
    }


def cmd_inspect(args) -> int:
    try:
        frames = ledger.read_frames(Path(args.file).read_bytes())
    except (OSError, ledger.VerificationFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not 1 <= args.height <= len(frames):
        print(f"error: height {args.height} outside 1..{len(frames)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        block = ledger.deserialize_block(frames[args.height - 1])
    except (ValueError, ledger.OversizeBlock) as exc:
        print(f"error: block {args.height} is undecodable: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(describe_block(block), indent=2))
    return EXIT_OK


def _read_samples(path: Path) -> list[MetricsSample]:
    samples = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc = row["accuracy_per_turn"]
            samples.append(
                MetricsSample(
                    problem_id=row["problem_id"], agents=int(row["agents"]), turns=int(row["turns"]),
                    outcome=row["outcome"], confidence=float(row["confidence"]),
                    turns_used=int(row["turns_used"]), initial_latency=int(row["initial_latency"]),
                    reflection_latency=int(row["reflection_latency"]), prompt_time=int(row["prompt_time"]),
                    block_size=int(row["block_size"]), block_height=int(row["block_height"]),
                    participation=float(row["participation"]),
                    accuracy_per_turn=[float(x) for x in acc.split(";")] if acc else None,
                    honest_outcome=row["honest_outcome"],
                )
            )
    return samples


def cmd_metrics(args) -> int:
    path = Path(args.dir) / "samples.csv"
    if not path.exists():
        print(f"error: no samples.csv in {args.dir}", file=sys.stderr)
        return EXIT_CONFIG
    samples = _read_samples(path)
    cells: dict[tuple[int, int], list[MetricsSample]] = {}
    for s in samples:
        cells.setdefault((s.agents, s.turns), []).append(s)
    rows = [summarize(n, t, group) for (n, t), group in sorted(cells.items())]
    print(_table(rows, SUMMARY_COLUMNS))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="delibchain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every sweep cell of a scenario file")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-chain", help="replay a chain file from genesis")
    p.add_argument("file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect-block", help="print one block as JSON")
    p.add_argument("file")
    p.add_argument("height", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("metrics", help="summarize samples.csv from a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
