"""File formats and persistence: JSON artifacts, JSONL trajectories, CSV ledgers.

Floats are serialized through Python's shortest round-trip ``repr`` (the
default for ``json`` and ``str``), so every save/load cycle reproduces the
in-memory doubles exactly.  All writers go through an atomic
temp-file-then-rename so an interrupted run never leaves a truncated file
at a final path.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bisim import PairwiseMetric, scalarize
from .estimation import TrajectoryBatch
from .exceptions import MissingColumnError, ShapeMismatchError, ValidationError
from .mdp import FiniteMdp, Policy, validate
from .prefilter import BoundFit, CostReport, ExperimentRun, TrainerSpec
from .wireless import CandidateDT, EnvSpec

LEDGER_COLUMNS = ("candidate_id", "family", "params", "bsm_scalar",
                  "train_subopt", "deploy_subopt", "deploy_value",
                  "selected_by")


def atomic_write_text(path: str, text: str) -> None:
    """Write text via a sibling temp file and rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-",
                               suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


# ---------------------------------------------------------------------------
# MDP files
# ---------------------------------------------------------------------------


def mdp_to_dict(mdp: FiniteMdp) -> dict:
    doc = {
        "version": 1,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "rewards": mdp.rewards.tolist(),
        "transitions": mdp.transitions.tolist(),
    }
    if mdp.state_labels is not None:
        doc["state_labels"] = list(mdp.state_labels)
    if mdp.action_labels is not None:
        doc["action_labels"] = list(mdp.action_labels)
    return doc


def mdp_from_dict(doc: dict) -> FiniteMdp:
    mdp = FiniteMdp(
        transitions=np.asarray(doc["transitions"], dtype=np.float64),
        rewards=np.asarray(doc["rewards"], dtype=np.float64),
        gamma=float(doc["gamma"]),
        state_labels=tuple(doc["state_labels"]) if "state_labels" in doc else None,
        action_labels=tuple(doc["action_labels"]) if "action_labels" in doc else None,
    )
    if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
        raise ValidationError(["declared n_states/n_actions do not match arrays"])
    violations = validate(mdp)
    if violations:
        raise ValidationError(violations)
    return mdp


def save_mdp(path: str, mdp: FiniteMdp) -> None:
    atomic_write_text(path, _dump_json(mdp_to_dict(mdp)))


def load_mdp(path: str) -> FiniteMdp:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Metric files
# ---------------------------------------------------------------------------


def save_metric(path: str, metric: PairwiseMetric) -> None:
    """Metric file: scalar summaries (null when no identity pairing) + d."""
    try:
        report = scalarize(metric, "worst_case")
        scalar_max: Optional[float] = report.scalar_max
        scalar_avg: Optional[float] = report.scalar_avg
    except ShapeMismatchError:
        scalar_max = None
        scalar_avg = None
    doc = {
        "scalar_max": scalar_max,
        "scalar_avg": scalar_avg,
        "iterations": metric.iterations,
        "residual": metric.residual,
        "converged": metric.converged,
        "d": metric.d.tolist(),
    }
    atomic_write_text(path, _dump_json(doc))


def load_metric(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc["d"] = np.asarray(doc["d"], dtype=np.float64)
    return doc


# ---------------------------------------------------------------------------
# Trajectory files (JSON Lines)
# ---------------------------------------------------------------------------


def save_trajectories(path: str, batch: TrajectoryBatch) -> None:
    buf = _io.StringIO()
    buf.write(json.dumps({"seed": batch.seed, "behavior": batch.behavior}))
    buf.write("\n")
    for i in range(len(batch)):
        buf.write(json.dumps({
            "t": int(batch.t[i]), "s": int(batch.s[i]), "a": int(batch.a[i]),
            "r": float(batch.r[i]), "sn": int(batch.sn[i]),
            "episode": int(batch.episode[i]),
        }))
        buf.write("\n")
    atomic_write_text(path, buf.getvalue())


def load_trajectories(path: str) -> TrajectoryBatch:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    return TrajectoryBatch(
        t=np.array([r["t"] for r in rows], dtype=np.int64),
        s=np.array([r["s"] for r in rows], dtype=np.int64),
        a=np.array([r["a"] for r in rows], dtype=np.int64),
        r=np.array([r["r"] for r in rows], dtype=np.float64),
        sn=np.array([r["sn"] for r in rows], dtype=np.int64),
        episode=np.array([r["episode"] for r in rows], dtype=np.int64),
        seed=int(header["seed"]), behavior=str(header["behavior"]))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


def save_policy(path: str, policy: Policy) -> None:
    if policy.kind == "deterministic":
        doc = {"version": 1, "kind": "deterministic",
               "actions": policy.actions.tolist()}
    else:
        doc = {"version": 1, "kind": "stochastic",
               "probs": policy.probs.tolist()}
    atomic_write_text(path, _dump_json(doc))


def load_policy(path: str) -> Policy:
    with open(path) as fh:
        doc = json.load(fh)
    if doc["kind"] == "deterministic":
        return Policy("deterministic",
                      actions=np.asarray(doc["actions"], dtype=np.int64))
    return Policy("stochastic", probs=np.asarray(doc["probs"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Environment specs and candidate pools
# ---------------------------------------------------------------------------


def save_envspec(path: str, spec: EnvSpec) -> None:
    atomic_write_text(path, _dump_json(asdict(spec)))


def envspec_from_dict(doc: dict) -> EnvSpec:
    doc = dict(doc)
    for key in ("weights", "arrival_profiles"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return EnvSpec(**doc)


def load_envspec(path: str) -> EnvSpec:
    with open(path) as fh:
        return envspec_from_dict(json.load(fh))


def save_pool(outdir: str, candidates: Sequence[CandidateDT],
              seed: int) -> str:
    """Write candidate MDP files plus the pool manifest; returns manifest path."""
    cand_dir = os.path.join(outdir, "candidates")
    os.makedirs(cand_dir, exist_ok=True)
    entries = []
    for cand in candidates:
        rel = os.path.join("candidates", f"cand_{cand.id:03d}.json")
        save_mdp(os.path.join(outdir, rel), cand.mdp)
        entries.append({"id": cand.id, "family": cand.family,
                        "params": cand.params, "file": rel})
    manifest = os.path.join(outdir, "pool_manifest.json")
    atomic_write_text(manifest, _dump_json({"seed": seed,
                                            "candidates": entries}))
    return manifest


def load_pool(manifest_path: str) -> list[CandidateDT]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        doc = json.load(fh)
    out = []
    for entry in doc["candidates"]:
        mdp = load_mdp(os.path.join(base, entry["file"]))
        out.append(CandidateDT(id=int(entry["id"]), mdp=mdp,
                               family=entry["family"],
                               params=entry["params"], seed=int(doc["seed"])))
    return out


# ---------------------------------------------------------------------------
# Run ledgers (CSV) and full run records (JSON)
# ---------------------------------------------------------------------------


def ledger_text(runs: Sequence[ExperimentRun],
                candidates: Sequence[CandidateDT],
                selected: Optional[dict[str, Sequence[int]]] = None) -> str:
    """Render the run ledger CSV; ``selected`` maps strategy -> id subset."""
    meta = {c.id: c for c in candidates}
    selected = selected or {}
    marks: dict[int, list[str]] = {}
    for strategy in sorted(selected):
        for cid in selected[strategy]:
            marks.setdefault(cid, []).append(strategy)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LEDGER_COLUMNS)
    for run in runs:
        cand = meta[run.candidate_id]
        writer.writerow([
            run.candidate_id,
            cand.family,
            json.dumps(cand.params, sort_keys=True),
            repr(run.bsm_scalar),
            repr(run.train_suboptimality),
            repr(run.deploy_suboptimality),
            repr(run.deploy_value),
            "|".join(marks.get(run.candidate_id, [])),
        ])
    return buf.getvalue()


def write_ledger(path: str, runs: Sequence[ExperimentRun],
                 candidates: Sequence[CandidateDT],
                 selected: Optional[dict[str, Sequence[int]]] = None) -> None:
    atomic_write_text(path, ledger_text(runs, candidates, selected))


def read_ledger(path: str) -> list[dict]:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    for row in rows:
        for col in ("candidate_id",):
            row[col] = int(row[col])
        for col in ("bsm_scalar", "train_subopt", "deploy_subopt",
                    "deploy_value"):
            row[col] = float(row[col])
    return rows


def save_runs(path: str, runs: Sequence[ExperimentRun],
              candidates: Sequence[CandidateDT], v_star_rho: float,
              seed: int) -> None:
    """Full per-run records; superset of the ledger, needed by reward selection."""
    meta = {c.id: c for c in candidates}
    doc = {
        "version": 1,
        "seed": seed,
        "v_star_rho": v_star_rho,
        "runs": [{
            "candidate_id": r.candidate_id,
            "family": meta[r.candidate_id].family,
            "params": meta[r.candidate_id].params,
            "bsm_scalar": r.bsm_scalar,
            "train_suboptimality": r.train_suboptimality,
            "deploy_suboptimality": r.deploy_suboptimality,
            "deploy_value": r.deploy_value,
            "train_value": r.train_value,
            "training_effort": r.training_effort,
        } for r in runs],
    }
    atomic_write_text(path, _dump_json(doc))


def load_runs(path: str) -> tuple[list[ExperimentRun], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    runs = [ExperimentRun(candidate_id=int(r["candidate_id"]),
                          bsm_scalar=float(r["bsm_scalar"]),
                          train_suboptimality=float(r["train_suboptimality"]),
                          deploy_suboptimality=float(r["deploy_suboptimality"]),
                          deploy_value=float(r["deploy_value"]),
                          train_value=float(r["train_value"]),
                          training_effort=int(r["training_effort"]))
            for r in doc["runs"]]
    return runs, doc


def save_bound(path: str, fit: BoundFit) -> None:
    doc = {"alpha": fit.alpha, "beta": fit.beta,
           "fit_ids": list(fit.fit_ids), "holdout_ids": list(fit.holdout_ids),
           "holdout_violation_rate": fit.holdout_violation_rate}
    atomic_write_text(path, _dump_json(doc))


def save_cost_report(path: str, report: CostReport) -> None:
    atomic_write_text(path, _dump_json(asdict(report)))


def save_subset(path: str, strategy: str, ratio: float,
                subset: Sequence[int]) -> None:
    atomic_write_text(path, _dump_json({"strategy": strategy, "ratio": ratio,
                                        "ids": list(subset)}))


def load_subset(path: str) -> list[int]:
    with open(path) as fh:
        return [int(i) for i in json.load(fh)["ids"]]


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def emit_plot_data(ledger_rows: Sequence[dict], kind: str,
                   bars: Optional[Sequence[dict]] = None) -> str:
    """CSV plot data: per-candidate scatter or per-strategy prefilter bars."""
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if kind == "scatter":
        for col in ("bsm_scalar", "deploy_value"):
            if ledger_rows and col not in ledger_rows[0]:
                raise MissingColumnError(f"ledger lacks column {col!r}")
        writer.writerow(["bsm_scalar", "deploy_value"])
        for row in ledger_rows:
            writer.writerow([repr(float(row["bsm_scalar"])),
                             repr(float(row["deploy_value"]))])
    elif kind == "prefilter_bars":
        writer.writerow(["strategy", "ratio", "best_deploy_value",
                         "testing_cost", "training_cost_reduction"])
        for bar in bars or []:
            writer.writerow([bar["strategy"], repr(float(bar["ratio"])),
                             repr(float(bar["best_deploy_value"])),
                             repr(float(bar["testing_cost"])),
                             repr(float(bar["training_cost_reduction"]))])
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Configuration of the end-to-end experiment command."""

    env_spec: Optional[dict] = None  # inline EnvSpec fields; None = defaults
    pool: int = 120
    ratio: float = 0.05
    strategies: tuple = ("evaluation", "reward", "random", "brute_force")
    trainer: Optional[dict] = None  # TrainerSpec fields; None = exact
    tol_plan: float = 1e-8
    tol_metric: float = 1e-6
    solver: str = "exact"
    random_resamplings: int = 100
    save_candidates: bool = False

    def __post_init__(self):
        if self.pool < 1:
            raise ValidationError(["pool must be >= 1"])
        if not (0.0 < self.ratio <= 1.0):
            raise ValidationError(["ratio must be in (0, 1]"])
        if self.solver not in ("exact", "sinkhorn"):
            raise ValidationError([f"unknown solver {self.solver!r}"])

    def make_env_spec(self) -> EnvSpec:
        return envspec_from_dict(self.env_spec) if self.env_spec else EnvSpec()

    def make_trainer(self) -> TrainerSpec:
        if not self.trainer:
            return TrainerSpec()
        doc = dict(self.trainer)
        if "episodes" in doc and isinstance(doc["episodes"], list):
            doc["episodes"] = tuple(doc["episodes"])
        return TrainerSpec(**doc)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        doc = json.load(fh)
    if "strategies" in doc:
        doc["strategies"] = tuple(doc["strategies"])
    return RunConfig(**doc)
