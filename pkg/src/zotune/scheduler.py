"""Round-by-round study driver: ingest feedback, pick winners, assign traffic.

Each round the scheduler absorbs whatever delayed feedback has arrived
(rounds never block on missing data), reruns Thompson selection over the
measured candidates, optionally proposes one brand-new candidate through
the GP surrogate, and emits a traffic plan: a reserved control slice plus
the remainder split across winners in proportion to how many repetitions
each one won.  All state (candidate bucket, absorbed statistics, round
counter, rng stream) round-trips through plain-text storage so a run can be
stopped and resumed exactly.
"""

from __future__ import annotations

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .deltastats import (
    DegenerateBaseError,
    DeltaStat,
    DuplicateRoundError,
    EstimateRecord,
    GroupReading,
    TaylorMode,
    hourly_delta_stat,
)
from .gp import GpSurrogate
from .optimizer import SelectionResult, propose, select
from .problem import HyperParam, TuningProblem, problem_from_dict, problem_to_dict

FORMAT_VERSION = 1

PLAN_SUM_TOL = 1e-12

NORMALIZATION_MODES = ("delta", "raw")


class ColdStartError(RuntimeError):
    """Selection was requested before the initial bucket was ever scheduled."""


class RestoreError(RuntimeError):
    """Stored state is missing, inconsistent, or from an unknown version."""


@dataclass(frozen=True)
class RoundPlan:
    """Traffic assignment for one round.

    ``assignments`` maps candidate ids to exposure fractions, sorted by id;
    together with ``control_fraction`` the fractions sum to one.
    """

    round: int
    control_fraction: float
    assignments: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "round", int(self.round))
        object.__setattr__(self, "control_fraction", float(self.control_fraction))
        assignments = tuple(
            (int(cid), float(frac)) for cid, frac in self.assignments
        )
        object.__setattr__(self, "assignments", assignments)
        if not 0.0 < self.control_fraction < 1.0:
            raise ValueError("control fraction must be strictly inside (0, 1)")
        ids = [cid for cid, _ in assignments]
        if ids != sorted(set(ids)):
            raise ValueError("assignments must be sorted by unique candidate id")
        for cid, frac in assignments:
            if frac <= 0.0:
                raise ValueError(f"candidate {cid} has nonpositive fraction")
        total = self.control_fraction + sum(frac for _, frac in assignments)
        if assignments and abs(total - 1.0) > PLAN_SUM_TOL:
            raise ValueError(f"fractions sum to {total}, not 1")

    def fraction_of(self, candidate_id: int) -> float:
        for cid, frac in self.assignments:
            if cid == candidate_id:
                return frac
        return 0.0

    def candidate_ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.assignments)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "control_fraction": self.control_fraction,
            "assignments": [[cid, frac] for cid, frac in self.assignments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundPlan":
        return cls(
            round=d["round"],
            control_fraction=d["control_fraction"],
            assignments=tuple((int(c), float(f)) for c, f in d["assignments"]),
        )


@dataclass(frozen=True)
class InboundBatch:
    """Delayed feedback for one candidate and one origin round.

    ``readings`` pairs the candidate's test-group reading with the shared
    control-group reading, one pair per metric.
    """

    origin_round: int
    arrival_round: int
    readings: tuple[tuple[GroupReading, GroupReading], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin_round", int(self.origin_round))
        object.__setattr__(self, "arrival_round", int(self.arrival_round))
        object.__setattr__(self, "readings", tuple(self.readings))
        if self.arrival_round < self.origin_round:
            raise ValueError("a batch cannot arrive before its origin round")
        for test, ctrl in self.readings:
            if test.round != self.origin_round or ctrl.round != self.origin_round:
                raise ValueError("readings must carry the batch origin round")

    def to_dict(self) -> dict:
        def reading(r: GroupReading) -> list:
            return [
                r.candidate_id,
                r.metric,
                r.round,
                r.sample_mean,
                r.sample_var,
                r.group_size,
            ]

        return {
            "origin_round": self.origin_round,
            "arrival_round": self.arrival_round,
            "readings": [[reading(t), reading(c)] for t, c in self.readings],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InboundBatch":
        def reading(row: list) -> GroupReading:
            return GroupReading(
                candidate_id=int(row[0]),
                metric=str(row[1]),
                round=int(row[2]),
                sample_mean=float(row[3]),
                sample_var=float(row[4]),
                group_size=int(row[5]),
            )

        return cls(
            origin_round=d["origin_round"],
            arrival_round=d["arrival_round"],
            readings=tuple(
                (reading(t), reading(c)) for t, c in d["readings"]
            ),
        )


@dataclass(frozen=True)
class BucketInit:
    """How the initial candidate bucket is built.

    ``random`` draws ``size`` configurations uniformly from the bounds box;
    ``grid`` lays ``nodes_per_dim`` nodes per dimension (endpoints
    included); ``explicit`` takes the given vectors verbatim.
    """

    mode: str = "random"
    size: int = 100
    nodes_per_dim: int = 10
    vectors: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("random", "grid", "explicit"):
            raise ValueError(f"unknown bucket init mode {self.mode!r}")
        if self.mode == "random" and self.size < 1:
            raise ValueError("random init needs a positive size")
        if self.mode == "grid" and self.nodes_per_dim < 1:
            raise ValueError("grid init needs at least one node per dimension")
        if self.mode == "explicit":
            if not self.vectors:
                raise ValueError("explicit init needs at least one vector")
            object.__setattr__(
                self,
                "vectors",
                tuple(tuple(float(x) for x in v) for v in self.vectors),
            )

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "size": self.size, "nodes_per_dim": self.nodes_per_dim}
        if self.vectors is not None:
            d["vectors"] = [list(v) for v in self.vectors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BucketInit":
        return cls(
            mode=d.get("mode", "random"),
            size=int(d.get("size", 100)),
            nodes_per_dim=int(d.get("nodes_per_dim", 10)),
            vectors=tuple(tuple(v) for v in d["vectors"]) if "vectors" in d else None,
        )


@dataclass(frozen=True)
class SchedulerConfig:
    """Knobs of the round loop."""

    select_count: int = 1000        # Thompson repetitions per round
    proposal_samples: int = 600     # uniform samples scored per proposal
    proposal_prob: float = 1.0      # chance of proposing each decided round
    control_fraction: float = 0.2
    taylor_mode: TaylorMode = TaylorMode.DELTA_METHOD
    normalization: str = "delta"    # "delta": lift vs control; "raw": test stats as-is
    init: BucketInit = field(default_factory=BucketInit)

    def __post_init__(self) -> None:
        object.__setattr__(self, "taylor_mode", TaylorMode(self.taylor_mode))
        if self.select_count < 1:
            raise ValueError("select_count must be positive")
        if self.proposal_samples < 1:
            raise ValueError("proposal_samples must be positive")
        if not 0.0 <= self.proposal_prob <= 1.0:
            raise ValueError("proposal_prob must lie in [0, 1]")
        if not 0.0 < self.control_fraction < 1.0:
            raise ValueError("control_fraction must be strictly inside (0, 1)")
        if self.normalization not in NORMALIZATION_MODES:
            raise ValueError(f"normalization must be one of {NORMALIZATION_MODES}")

    def to_dict(self) -> dict:
        return {
            "select_count": self.select_count,
            "proposal_samples": self.proposal_samples,
            "proposal_prob": self.proposal_prob,
            "control_fraction": self.control_fraction,
            "taylor_mode": self.taylor_mode.value,
            "normalization": self.normalization,
            "init": self.init.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerConfig":
        return cls(
            select_count=int(d["select_count"]),
            proposal_samples=int(d["proposal_samples"]),
            proposal_prob=float(d["proposal_prob"]),
            control_fraction=float(d["control_fraction"]),
            taylor_mode=TaylorMode(d["taylor_mode"]),
            normalization=d["normalization"],
            init=BucketInit.from_dict(d["init"]),
        )


def _fmt(x: float) -> str:
    """Shortest decimal string that parses back to the exact float."""
    return repr(float(x))


class Scheduler:
    """Owns the bucket, the estimate record, the rng stream, and the round loop."""

    def __init__(
        self,
        problem: TuningProblem,
        config: SchedulerConfig,
        rng: np.random.Generator,
        *,
        bucket: dict[int, HyperParam],
        created_round: dict[int, int],
        record: EstimateRecord,
        raw_log: list[tuple[GroupReading, GroupReading]],
        round_no: int,
        next_id: int,
        exposed: bool,
        last_plan: RoundPlan | None,
        store_dir: str | None = None,
    ) -> None:
        self.problem = problem
        self.config = config
        self.rng = rng
        self._bucket = bucket
        self._created_round = created_round
        self.record = record
        self._raw_log = raw_log
        self._round = round_no
        self._next_id = next_id
        self._exposed = exposed
        self._last_plan = last_plan
        self.store_dir = store_dir
        self.last_selection: SelectionResult | None = None

    # Construction

    @classmethod
    def bootstrap(
        cls,
        problem: TuningProblem,
        config: SchedulerConfig,
        rng: np.random.Generator | int,
        store_dir: str | None = None,
    ) -> "Scheduler":
        """Build the initial bucket and stand ready to emit the round-0 plan."""
        rng = np.random.default_rng(rng)
        bounds = problem.base.bounds
        init = config.init
        if init.mode == "explicit":
            vectors = list(init.vectors)
        elif init.mode == "grid":
            axes = [
                np.linspace(lo, hi, init.nodes_per_dim) for lo, hi in bounds
            ]
            mesh = np.meshgrid(*axes, indexing="ij")
            vectors = [
                tuple(float(m[idx]) for m in mesh)
                for idx in np.ndindex(mesh[0].shape)
            ]
        else:
            lo = np.array([b[0] for b in bounds])
            hi = np.array([b[1] for b in bounds])
            vectors = [
                tuple(v) for v in rng.uniform(lo, hi, size=(init.size, len(bounds)))
            ]
        if not vectors:
            raise ValueError("initial bucket must not be empty")
        bucket = {}
        created = {}
        for i, vec in enumerate(vectors, start=1):
            hp = HyperParam(id=i, theta=vec, bounds=bounds)
            bucket[hp.id] = hp
            created[hp.id] = 0
        sched = cls(
            problem,
            config,
            rng,
            bucket=bucket,
            created_round=created,
            record=EstimateRecord(),
            raw_log=[],
            round_no=0,
            next_id=len(vectors) + 1,
            exposed=False,
            last_plan=None,
            store_dir=store_dir,
        )
        return sched

    # Views

    @property
    def bucket(self) -> tuple[HyperParam, ...]:
        return tuple(self._bucket[cid] for cid in sorted(self._bucket))

    @property
    def round(self) -> int:
        return self._round

    @property
    def next_id(self) -> int:
        return self._next_id

    def created_round(self, candidate_id: int) -> int:
        return self._created_round[candidate_id]

    @property
    def last_plan(self) -> RoundPlan | None:
        return self._last_plan

    # Round loop

    def _uniform_plan(self, round_no: int) -> RoundPlan:
        cf = self.config.control_fraction
        ids = sorted(self._bucket)
        frac = (1.0 - cf) / len(ids)
        return RoundPlan(
            round=round_no,
            control_fraction=cf,
            assignments=tuple((cid, frac) for cid in ids),
        )

    def _plan_from_units(self, round_no: int, units: Counter) -> RoundPlan:
        cf = self.config.control_fraction
        total = sum(units.values())
        assignments = tuple(
            (cid, (1.0 - cf) * units[cid] / total) for cid in sorted(units)
        )
        return RoundPlan(round=round_no, control_fraction=cf, assignments=assignments)

    def initial_plan(self) -> RoundPlan:
        """Uniform exposure of the initial bucket (round 0).  Idempotent."""
        if self._exposed and self._last_plan is not None and self._round == 0:
            return self._last_plan
        if self._round != 0:
            raise ValueError("initial plan is only available at round 0")
        plan = self._uniform_plan(0)
        self._exposed = True
        self._last_plan = plan
        if self.store_dir:
            self.persist(self.store_dir)
        return plan

    def ingest(self, batches: Iterable[InboundBatch]) -> int:
        """Absorb feedback rows; duplicates are skipped (first write wins).

        Returns the number of rows newly absorbed.  Batches may arrive in
        any order and for any origin round.
        """
        absorbed = 0
        for batch in batches:
            for test, ctrl in batch.readings:
                if self.config.normalization == "raw":
                    stat = DeltaStat(
                        mean=test.sample_mean,
                        var=test.sample_var / test.group_size,
                        weight=test.group_size,
                    )
                else:
                    try:
                        stat = hourly_delta_stat(test, ctrl, self.config.taylor_mode)
                    except DegenerateBaseError:
                        # A control mean at zero admits no lift estimate;
                        # drop the hour rather than poison the record.
                        continue
                try:
                    self.record.absorb(test.candidate_id, test.metric, test.round, stat)
                except DuplicateRoundError:
                    continue
                self._raw_log.append((test, ctrl))
                absorbed += 1
        return absorbed

    def run_round(self, inbound: Iterable[InboundBatch] = ()) -> RoundPlan:
        """Advance one round: absorb, select, maybe propose, plan, persist.

        Rounds never block on missing feedback.  Before any data has been
        absorbed the previous uniform exposure is re-emitted, provided the
        initial bucket was scheduled at least once.
        """
        round_no = self._round + 1
        self.ingest(inbound)
        measured = set(self.record.candidates_with_data(self.problem.metrics))
        eligible = [cid for cid in sorted(self._bucket) if cid in measured]

        if not eligible:
            if not self._exposed:
                raise ColdStartError(
                    "no candidate has data and the initial bucket was never "
                    "scheduled; emit the initial plan first"
                )
            plan = self._uniform_plan(round_no)
            self.last_selection = None
        else:
            sel = select(
                [self._bucket[cid] for cid in eligible],
                self.record,
                self.problem,
                self.config.select_count,
                self.rng,
            )
            self.last_selection = sel
            units = Counter(sel.winners)
            u = self.rng.random()
            if u < self.config.proposal_prob:
                surrogate = GpSurrogate.fit(
                    [self._bucket[cid] for cid in eligible], sel.beliefs_used
                )
                prop = propose(
                    surrogate,
                    self.problem,
                    self.config.proposal_samples,
                    self.problem.base.bounds,
                    self.rng,
                    new_id=self._next_id,
                )
                newcomer = prop.proposed
                if newcomer.id in self._bucket or newcomer.id == self.problem.base.id:
                    raise ValueError(f"proposed id {newcomer.id} is not fresh")
                self._bucket[newcomer.id] = newcomer
                self._created_round[newcomer.id] = round_no
                self._next_id += 1
                units[newcomer.id] += 1  # one winner-unit of traffic
            plan = self._plan_from_units(round_no, units)

        self._round = round_no
        self._last_plan = plan
        if self.store_dir:
            self.persist(self.store_dir)
        return plan

    # Persistence

    def persist(self, store_dir: str | None = None) -> None:
        """Write manifest, bucket, raw readings, and derived stats to disk."""
        store_dir = store_dir or self.store_dir
        if not store_dir:
            raise ValueError("no storage directory configured")
        os.makedirs(store_dir, exist_ok=True)

        manifest = {
            "format_version": FORMAT_VERSION,
            "round": self._round,
            "next_id": self._next_id,
            "exposed": self._exposed,
            "rng_state": self.rng.bit_generator.state,
            "config": self.config.to_dict(),
            "problem": problem_to_dict(self.problem),
            "last_plan": self._last_plan.to_dict() if self._last_plan else None,
        }
        with open(os.path.join(store_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

        dim = len(self.problem.base.theta)
        with open(os.path.join(store_dir, "hyperparams.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["candidate_id", "created_round"] + [f"theta{i}" for i in range(dim)]
            )
            for cid in sorted(self._bucket):
                hp = self._bucket[cid]
                writer.writerow(
                    [cid, self._created_round[cid]] + [_fmt(x) for x in hp.theta]
                )

        with open(os.path.join(store_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "candidate_id", "metric", "round",
                    "test_mean", "test_var", "test_n",
                    "control_mean", "control_var", "control_n",
                ]
            )
            for test, ctrl in self._raw_log:
                writer.writerow(
                    [
                        test.candidate_id, test.metric, test.round,
                        _fmt(test.sample_mean), _fmt(test.sample_var), test.group_size,
                        _fmt(ctrl.sample_mean), _fmt(ctrl.sample_var), ctrl.group_size,
                    ]
                )

        with open(os.path.join(store_dir, "deltas_hourly.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["candidate_id", "metric", "round", "mean", "var", "weight"])
            for cid, metric, round_no, stat in self.record.rows():
                writer.writerow(
                    [cid, metric, round_no, _fmt(stat.mean), _fmt(stat.var), _fmt(stat.weight)]
                )

        with open(os.path.join(store_dir, "deltas_agg.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["candidate_id", "metric", "mean", "var", "weight"])
            for cid in sorted(self._bucket):
                for metric in self.problem.metrics:
                    agg = self.record.aggregate(cid, metric)
                    if agg is None:
                        continue
                    writer.writerow(
                        [cid, metric, _fmt(agg.mean), _fmt(agg.var), _fmt(agg.weight)]
                    )

    @classmethod
    def restore(cls, store_dir: str, new_store_dir: str | None = None) -> "Scheduler":
        """Rebuild a scheduler from storage, byte-for-byte equivalent.

        ``new_store_dir`` (default: the source directory) is where the
        restored scheduler will keep persisting.
        """
        def _path(name: str) -> str:
            p = os.path.join(store_dir, name)
            if not os.path.exists(p):
                raise RestoreError(f"missing storage file {name!r} in {store_dir}")
            return p

        try:
            with open(_path("manifest.json"), "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RestoreError(f"corrupt manifest: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise RestoreError(
                f"unsupported storage version {manifest.get('format_version')!r}"
            )

        problem = problem_from_dict(manifest["problem"])
        config = SchedulerConfig.from_dict(manifest["config"])
        rng = np.random.default_rng()
        rng.bit_generator.state = manifest["rng_state"]

        bucket: dict[int, HyperParam] = {}
        created: dict[int, int] = {}
        bounds = problem.base.bounds
        with open(_path("hyperparams.csv"), "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:2] != ["candidate_id", "created_round"]:
                raise RestoreError("malformed hyperparams.csv header")
            for row in reader:
                cid = int(row[0])
                theta = tuple(float(x) for x in row[2:])
                bucket[cid] = HyperParam(id=cid, theta=theta, bounds=bounds)
                created[cid] = int(row[1])

        record = EstimateRecord()
        with open(_path("deltas_hourly.csv"), "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                record.absorb(
                    int(row[0]),
                    row[1],
                    int(row[2]),
                    DeltaStat(mean=float(row[3]), var=float(row[4]), weight=float(row[5])),
                )

        raw_log: list[tuple[GroupReading, GroupReading]] = []
        with open(_path("metrics.csv"), "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                cid, metric, round_no = int(row[0]), row[1], int(row[2])
                test = GroupReading(
                    candidate_id=cid, metric=metric, round=round_no,
                    sample_mean=float(row[3]), sample_var=float(row[4]),
                    group_size=int(row[5]),
                )
                ctrl = GroupReading(
                    candidate_id=problem.base.id, metric=metric, round=round_no,
                    sample_mean=float(row[6]), sample_var=float(row[7]),
                    group_size=int(row[8]),
                )
                raw_log.append((test, ctrl))

        # Cross-check the derived aggregate table against the replayed record.
        with open(_path("deltas_agg.csv"), "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for row in reader:
                agg = record.aggregate(int(row[0]), row[1])
                if agg is None or (
                    _fmt(agg.mean) != row[2]
                    or _fmt(agg.var) != row[3]
                    or _fmt(agg.weight) != row[4]
                ):
                    raise RestoreError(
                        f"aggregate table disagrees with replayed stats for "
                        f"candidate {row[0]} metric {row[1]!r}"
                    )

        last_plan = (
            RoundPlan.from_dict(manifest["last_plan"])
            if manifest.get("last_plan")
            else None
        )
        return cls(
            problem,
            config,
            rng,
            bucket=bucket,
            created_round=created,
            record=record,
            raw_log=raw_log,
            round_no=int(manifest["round"]),
            next_id=int(manifest["next_id"]),
            exposed=bool(manifest["exposed"]),
            last_plan=last_plan,
            store_dir=new_store_dir or store_dir,
        )
