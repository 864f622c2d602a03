"""Metrics emission: fixed-column CSV logs and JSON summaries."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from ..policy import iqm

TRAIN_COLUMNS = ("step", "wall_clock_s", "loss", "consistency_loss", "reward_loss",
                 "actor_objective", "critic_loss", "eval_reward_iqm", "eval_reward_mean")

__all__ = ["TRAIN_COLUMNS", "iqm", "write_csv", "read_csv", "summarize", "write_summary", "read_summary"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, columns=TRAIN_COLUMNS) -> None:
    """One row per log entry; absent fields are left empty. An empty log gives a header-only file."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize(final_rewards) -> dict:
    """Final-reward summary over seeds."""
    x = np.asarray(final_rewards, dtype=np.float64)
    if x.size == 0:
        return dict(n=0, iqm=None, mean=None, std=None, median=None)
    return dict(n=int(x.size), iqm=iqm(x), mean=float(x.mean()), std=float(x.std()), median=float(np.median(x)))


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def read_summary(path) -> dict:
    with open(path) as f:
        return json.load(f)
