"""Machine-readable result records and the plain-text success table."""

from __future__ import annotations

import json
import os

from ..sim import TASKS


def make_record(kind: str, method: str, task: str, seed: int, env_seeds: list[int],
                successes: int, trials: int, config_hash: str, **extra) -> dict:
    rec = {
        "kind": kind,
        "method": method,
        "task": task,
        "seed": seed,
        "env_seeds": [int(s) for s in env_seeds],
        "successes": int(successes),
        "trials": int(trials),
        "success_rate": round(successes / trials, 6) if trials else 0.0,
        "config_hash": config_hash,
    }
    for key, val in extra.items():
        rec[key] = round(val, 6) if isinstance(val, float) else val
    return rec


def write_records(path: str, records: list[dict], append: bool = False) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def success_table(records: list[dict], tasks: tuple[str, ...] = TASKS) -> str:
    """Method-by-task success grid with per-method averages and trial counts."""
    by_method: dict[str, dict[str, list[dict]]] = {}
    for rec in records:
        by_method.setdefault(rec["method"], {}).setdefault(rec["task"], []).append(rec)
    width = max([len(m) for m in by_method] + [8])
    cols = [t[:9] for t in tasks]
    lines = ["  ".join([f"{'method':<{width}}"] + [f"{c:>9}" for c in cols]
                       + [f"{'average':>9}", f"{'trials':>7}", "seeds"])]
    for method in sorted(by_method):
        cells = []
        rates = []
        trials = 0
        seeds: set[int] = set()
        for task in tasks:
            recs = by_method[method].get(task, [])
            if recs:
                rate = sum(r["successes"] for r in recs) / sum(r["trials"] for r in recs)
                rates.append(rate)
                trials += sum(r["trials"] for r in recs)
                seeds.update(r["seed"] for r in recs)
                cells.append(f"{rate:>9.2f}")
            else:
                cells.append(f"{'-':>9}")
        avg = f"{sum(rates) / len(rates):>9.2f}" if rates else f"{'-':>9}"
        seed_list = ",".join(str(s) for s in sorted(seeds))
        lines.append("  ".join([f"{method:<{width}}"] + cells
                               + [avg, f"{trials:>7}", seed_list]))
    return "\n".join(lines)


def method_average(records: list[dict], method: str,
                   tasks: tuple[str, ...] | None = None) -> float:
    """Mean per-task success rate for a method (tasks equally weighted)."""
    picked: dict[str, list[dict]] = {}
    for rec in records:
        if rec["method"] == method and (tasks is None or rec["task"] in tasks):
            picked.setdefault(rec["task"], []).append(rec)
    if not picked:
        raise ValueError(f"no records for method {method!r}")
    rates = [sum(r["successes"] for r in recs) / sum(r["trials"] for r in recs)
             for recs in picked.values()]
    return sum(rates) / len(rates)
