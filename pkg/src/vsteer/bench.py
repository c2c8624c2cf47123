"""Experiment harness: seeded evaluation with Wilson confidence intervals,
paired baseline/steered comparisons, ablation sweeps, decision-latency
profiles, and CSV report consolidation.

Every row carries a hash of the configuration that produced it, so a rerun
with the same hash must reproduce all non-latency columns bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .rerank import SteeringConfig, run_policy_episode, steer_episode

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# columns whose values are timing-dependent and exempt from reproducibility
LATENCY_COLUMNS = ("mean_decision_seconds",)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """Closed-form Wilson score interval for a binomial proportion."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= successes <= n):
        raise ValueError("successes must lie in [0, n]")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, center - half), min(1.0, center + half)


def config_hash(config: dict) -> str:
    """Stable short hash of a configuration dictionary."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    flagged: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_csv(self, path) -> None:
        frame = self.to_frame()
        frame.insert(0, "schema", SCHEMA_VERSION)
        frame.to_csv(path, index=False)

    def pooled(self, label: str, task_id=None) -> dict:
        """Aggregate success over all seeds (and tasks unless one is given)."""
        rows = [r for r in self.rows
                if r["label"] == label and (task_id is None or r["task_id"] == task_id)]
        if not rows:
            raise KeyError(f"no rows with label {label!r}")
        n = sum(r["n_episodes"] for r in rows)
        k = sum(r["n_success"] for r in rows)
        lo, hi = wilson_interval(k, n)
        return {"label": label, "n_episodes": n, "n_success": k,
                "success_rate": k / n, "ci_low": lo, "ci_high": hi,
                "invalid_count": sum(r["invalid_count"] for r in rows)}


def _episode_rng(seed: int, task_id: int, episode: int) -> np.random.Generator:
    # both arms of a paired comparison get this same stream
    return np.random.default_rng([seed, task_id, episode])


def evaluate(env, policy, tasks, n_episodes: int, seeds,
             scorer=None, steering: SteeringConfig | None = None,
             label: str = "baseline", t_max: int = 60,
             experiment_tag: str = "", extra_config: dict | None = None) -> EvalReport:
    """Run ``n_episodes`` per task per seed and aggregate with Wilson CIs.

    With ``scorer`` and ``steering`` the episodes are critic-steered;
    otherwise the raw policy runs. Episode rng streams depend only on
    (seed, task, episode index), so a steered arm evaluated with the same
    seeds is paired with its baseline.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seeds must be non-empty")
    steered = scorer is not None and steering is not None
    if steered:
        steering.validate()
    config = {
        "label": label, "tasks": list(tasks), "n_episodes": n_episodes,
        "seeds": seeds, "t_max": t_max, "env": type(env).__name__,
        "steering": None if not steered else
            {"num_candidates": steering.num_candidates, "beta": steering.beta},
    }
    if extra_config:
        config.update(extra_config)
    chash = config_hash(config)

    report = EvalReport()
    total = invalid_total = 0
    for seed in seeds:
        for task_id in tasks:
            n_success = invalid = 0
            decision_seconds = []
            for ep in range(n_episodes):
                rng = _episode_rng(seed, task_id, ep)
                if steered:
                    res = steer_episode(env, policy, scorer, task_id, steering,
                                        rng, t_max=t_max)
                    decision_seconds.extend(res.decision_seconds)
                else:
                    res = run_policy_episode(env, policy, task_id, rng, t_max=t_max)
                n_success += res.success
                invalid += res.invalid
            lo, hi = wilson_interval(n_success, n_episodes)
            report.rows.append({
                "label": label,
                "experiment_tag": experiment_tag,
                "task_id": task_id,
                "seed": seed,
                "n_episodes": n_episodes,
                "n_success": n_success,
                "success_rate": n_success / n_episodes,
                "ci_low": lo,
                "ci_high": hi,
                "mean_decision_seconds":
                    float(np.mean(decision_seconds)) if decision_seconds else 0.0,
                "invalid_count": invalid,
                "config_hash": chash,
            })
            total += n_episodes
            invalid_total += invalid
    if invalid_total > 0.01 * total:
        report.flagged = True
        log.error("evaluation flagged: %d/%d episodes invalid", invalid_total, total)
    return report


def improvement_rows(steered: EvalReport, baseline: EvalReport, tasks) -> list[dict]:
    """Paired comparison rows: absolute and relative success-rate change."""
    out = []
    for task_id in tasks:
        s = steered.pooled(steered.rows[0]["label"], task_id)
        b = baseline.pooled(baseline.rows[0]["label"], task_id)
        rel = float("inf") if b["success_rate"] == 0 else \
            100.0 * (s["success_rate"] - b["success_rate"]) / b["success_rate"]
        out.append({
            "task_id": task_id,
            "baseline_rate": b["success_rate"],
            "steered_rate": s["success_rate"],
            "improvement_abs": s["success_rate"] - b["success_rate"],
            "improvement_rel_pct": rel,
            "ci_separated": s["ci_low"] > b["ci_high"],
        })
    return out


def sweep(arms: list[dict], env, tasks, n_episodes: int, seeds,
          t_max: int = 60) -> EvalReport:
    """Evaluate several arms with shared episode seeds for paired comparison.

    Each arm is a dict with keys ``label``, ``policy`` and optionally
    ``scorer``, ``steering``, ``experiment_tag``. Per-arm failures are
    recorded and the sweep continues.
    """
    if not arms:
        raise ValueError("sweep needs at least one arm")
    merged = EvalReport()
    for arm in arms:
        try:
            rep = evaluate(env, arm["policy"], tasks, n_episodes, seeds,
                           scorer=arm.get("scorer"), steering=arm.get("steering"),
                           label=arm["label"], t_max=t_max,
                           experiment_tag=arm.get("experiment_tag", ""),
                           extra_config=arm.get("extra_config"))
            merged.rows.extend(rep.rows)
            merged.flagged = merged.flagged or rep.flagged
        except Exception as exc:  # noqa: BLE001 - isolate arm failures
            log.error("sweep arm %r failed: %s", arm.get("label"), exc)
            merged.rows.append({"label": arm.get("label"), "error": str(exc)})
            merged.flagged = True
    return merged


def timing_profile(env, policy, scorer, task_id: int, k_list,
                   n_decisions: int = 200, warmup: int = 20,
                   seed: int = 0, t_max: int = 60) -> pd.DataFrame:
    """Per-decision latency (median, p95) for each candidate count.

    A decision is the full sample-K / score / select step measured in place
    on states visited by the policy. The ``overhead`` column is relative to
    a raw policy decision (one sample, no scoring).
    """
    if n_decisions < 100:
        raise ValueError("need at least 100 decisions per point")
    resolution = time.get_clock_info("perf_counter").resolution

    def visit_states(rng):
        while True:
            state = env.reset(task_id, rng)
            for _ in range(t_max):
                yield state
                action = np.asarray(policy.sample(state, task_id, 1, rng))[0]
                state, _, _ = env.step(state, action, rng, task_id)
                if env.success(state, task_id):
                    break

    def measure(k):
        rng = np.random.default_rng(seed)
        times = []
        states = visit_states(rng)
        for i in range(n_decisions + warmup):
            state = next(states)
            t0 = time.perf_counter()
            if k == 0:  # raw policy decision
                policy.sample(state, task_id, 1, rng)
            else:
                candidates = np.asarray(policy.sample(state, task_id, k, rng))
                scores = np.asarray(scorer(state, candidates, task_id))
                int(np.argmax(scores))
            times.append(time.perf_counter() - t0)
        return np.array(times[warmup:])

    raw = measure(0)
    raw_median = float(np.median(raw))
    rows = []
    for k in k_list:
        t = measure(int(k))
        median = float(np.median(t))
        if median < 50 * resolution:
            log.warning("K=%d median latency %.3g s is under 50x the timer "
                        "resolution %.3g s", k, median, resolution)
        rows.append({
            "num_candidates": int(k),
            "median_seconds": median,
            "p95_seconds": float(np.percentile(t, 95)),
            "raw_policy_median_seconds": raw_median,
            "overhead": median / raw_median,
        })
    return pd.DataFrame(rows)


def report(run_directory, output_path=None, figures: bool = True) -> pd.DataFrame:
    """Merge every evaluation CSV under a run directory into one table.

    Duplicate rows (same config hash, seed, task) are deduplicated and
    flagged in the log; a schema-version mismatch is rejected.
    """
    run_directory = Path(run_directory)
    frames = []
    for path in sorted(run_directory.glob("*.csv")):
        frame = pd.read_csv(path)
        if "schema" not in frame.columns:
            continue  # not an evaluation table (e.g. timing or curve CSV)
        bad = frame[frame["schema"] != SCHEMA_VERSION]
        if len(bad):
            raise ValueError(
                f"{path.name}: schema version {bad['schema'].iloc[0]} != {SCHEMA_VERSION}")
        frames.append(frame)
    if frames:
        merged = pd.concat(frames, ignore_index=True)
        key_cols = [c for c in ("config_hash", "label", "task_id", "seed")
                    if c in merged.columns]
        dups = merged.duplicated(subset=key_cols)
        if dups.any():
            log.warning("report: dropped %d duplicate rows", int(dups.sum()))
            merged = merged[~dups].reset_index(drop=True)
        merged = merged.sort_values(key_cols).reset_index(drop=True)
    else:
        merged = pd.DataFrame(columns=["schema", "label", "experiment_tag",
                                       "task_id", "seed", "n_episodes",
                                       "n_success", "success_rate", "ci_low",
                                       "ci_high", "mean_decision_seconds",
                                       "invalid_count", "config_hash"])
    if output_path is None:
        output_path = run_directory / "report.csv"
    merged.to_csv(output_path, index=False)
    _write_summary(merged, Path(output_path).with_suffix(".txt"))
    if figures and len(merged):
        from . import figures as fig
        fig.success_rate_bars(merged.to_dict("records"),
                              Path(output_path).with_suffix(".success.png"))
        timing_csvs = sorted(run_directory.glob("*timing*.csv"))
        if timing_csvs:
            t = pd.read_csv(timing_csvs[0])
            fig.timing_curve(t.to_dict("records"),
                             Path(output_path).with_suffix(".timing.png"))
    return merged


def _write_summary(frame: pd.DataFrame, path: Path) -> None:
    lines = [f"evaluation summary ({len(frame)} rows)", ""]
    if len(frame):
        grouped = frame.groupby(["experiment_tag", "label"], dropna=False)
        for (tag, label), g in grouped:
            n = int(g["n_episodes"].sum())
            k = int(g["n_success"].sum())
            lo, hi = wilson_interval(k, n)
            lines.append(f"[{tag or '-'}] {label}: {k}/{n} = {k / n:.3f} "
                         f"(95% CI [{lo:.3f}, {hi:.3f}])")
    path.write_text("\n".join(lines) + "\n")


# -------------------------------------------------------------- config files


def parse_config(path, _seen=None) -> dict:
    """Flat ``key = value`` config file with ``include <relative-path>``."""
    path = Path(path)
    _seen = _seen or set()
    resolved = path.resolve()
    if resolved in _seen:
        raise ValueError(f"config include cycle at {path}")
    _seen.add(resolved)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            out.update(parse_config(path.parent / line.split(None, 1)[1], _seen))
            continue
        if "=" not in line:
            raise ValueError(f"{path.name}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out
