"""Episode metrics (success, sum-of-costs, makespan, collision rate) and
grouped aggregation into CSV/JSON tables."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .policy import EpisodeRecord

GROUP_KEYS = ("size", "n_agents", "density", "advisor", "fraction")


class InconsistentRecord(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    soc: float | None
    makespan: float | None
    collision_rate: float | None
    n_collisions: int
    duration: int


def episode_metrics(record: EpisodeRecord, soc_cap_failures: bool = False) -> EpisodeMetrics:
    """Metrics of one episode. SoC, makespan and collision rate are only
    defined for successful episodes; with ``soc_cap_failures`` a failed
    episode gets SoC with unfinished agents charged the horizon."""
    try:
        record.check()
    except ValueError as exc:
        raise InconsistentRecord(str(exc)) from exc
    arrivals = record.arrival_times
    success = all(a is not None and a <= record.horizon for a in arrivals)
    n_coll = len(record.collisions)
    if success:
        soc = float(sum(arrivals))
        ms = float(max(arrivals)) if arrivals else 0.0
        cr = n_coll / ms if ms else 0.0
        return EpisodeMetrics(True, soc, ms, cr, n_coll, record.duration)
    soc = float(sum(a if a is not None else record.horizon for a in arrivals)) if soc_cap_failures else None
    return EpisodeMetrics(False, soc, None, None, n_coll, record.duration)


def _mean_ci(xs: Sequence[float]):
    if not xs:
        return None, None
    m = sum(xs) / len(xs)
    if len(xs) < 2:
        return m, 0.0
    var = sum((x - m) ** 2 for x in xs) / (len(xs) - 1)
    return m, 1.96 * math.sqrt(var / len(xs))


def _wilson(k: int, n: int, z: float = 1.96):
    if n == 0:
        return None, None
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, mid - half), min(1.0, mid + half)


def _sort_key(v):
    # None sorts first; mixed types fall back to their string form
    return (v is not None, v if isinstance(v, (int, float)) else str(v))


def aggregate(
    rows: Iterable[tuple[dict, EpisodeRecord | EpisodeMetrics]],
    keys: Sequence[str] = GROUP_KEYS,
    soc_cap_failures: bool = False,
    groups: Iterable[tuple] = (),
) -> list[dict]:
    """One summary row per group of ``keys``, sorted by key values.

    ``groups`` lists key tuples that must appear even without episodes;
    they come out with zero counts and undefined (None) aggregates.
    """
    buckets: dict[tuple, list[EpisodeMetrics]] = {tuple(g): [] for g in groups}
    for meta, rec in rows:
        m = rec if isinstance(rec, EpisodeMetrics) else episode_metrics(rec, soc_cap_failures)
        buckets.setdefault(tuple(meta.get(k) for k in keys), []).append(m)
    table = []
    for gk in sorted(buckets, key=lambda t: tuple(_sort_key(v) for v in t)):
        ms = buckets[gk]
        ok = [m for m in ms if m.success]
        row = dict(zip(keys, gk))
        row["episodes"] = len(ms)
        row["successes"] = len(ok)
        csr = len(ok) / len(ms) if ms else None
        row["csr"] = row["sr"] = csr
        row["csr_lo"], row["csr_hi"] = _wilson(len(ok), len(ms))
        soc_pool = [m for m in ms if m.soc is not None] if soc_cap_failures else ok
        row["soc"], row["soc_ci"] = _mean_ci([m.soc for m in soc_pool])
        row["makespan"], row["makespan_ci"] = _mean_ci([m.makespan for m in ok])
        row["collision_rate"], row["collision_rate_ci"] = _mean_ci([m.collision_rate for m in ok])
        table.append(row)
    return table


def table2_rows(table: Sequence[dict]) -> list[dict]:
    """Env size / agents / method with MS, SR (%) and CR columns."""
    out = []
    for r in table:
        method = "DT" if r.get("advisor") in (None, "none") else f"DT + {r['advisor']}"
        if r.get("fraction") is not None:
            method += f" ({r['fraction']:g})"
        out.append(
            {
                "env_size": r.get("size"),
                "n_agents": r.get("n_agents"),
                "method": method,
                "MS": r["makespan"],
                "SR": None if r["sr"] is None else 100.0 * r["sr"],
                "CR": r["collision_rate"],
            }
        )
    return out


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def write_csv(table: Sequence[dict], path) -> None:
    if not table:
        raise ValueError("empty table")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]))
        w.writeheader()
        for r in table:
            w.writerow({k: _cell(v) for k, v in r.items()})


def write_json(table: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        json.dump(list(table), f, indent=1, sort_keys=False)
