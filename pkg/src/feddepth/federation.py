"""Federated averaging of DepthNet and PoseNet over simulated participants.

Local updates run in-process, one after another; each one works on private
copies of the global snapshot, so the order of execution cannot leak into
the result.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
import torch

from .data import PartitionPlan, Sample, make_batches
from .errors import AggregationError, EmptyValidityError, InvalidArgument, NonFiniteLossError
from .metrics import comm_lower_bound, comm_upper_bound
from .models import ArchConfig, ParameterSet, build_networks, parameter_bytes
from .training import LossSettings, batch_loss, derive_seed, evaluate_model

log = logging.getLogger(__name__)


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(value).limit_denominator(1000)


@dataclass
class RoundConfig:
    num_participants: int
    fraction: Fraction = Fraction(1)
    local_epochs: int = 1
    total_rounds: int = 12
    batches_per_epoch: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    policy: str = "iid"
    persist_optimizer_state: bool = True

    def __post_init__(self):
        self.fraction = as_fraction(self.fraction)
        if self.num_participants < 1:
            raise InvalidArgument("need at least one participant")
        if not 0 < self.fraction <= 1:
            raise InvalidArgument(f"fraction must be in (0, 1], got {self.fraction}")
        if self.local_epochs < 1 or self.total_rounds < 1:
            raise InvalidArgument("local epochs and rounds must be at least 1")
        if self.batches_per_epoch < 1 or self.batch_size < 1:
            raise InvalidArgument("batches per epoch and batch size must be at least 1")
        if self.policy not in ("iid", "niid"):
            raise InvalidArgument(f"unknown selection policy {self.policy!r}")

    @property
    def per_round(self) -> int:
        return max(math.floor(self.fraction * self.num_participants), 1)


@dataclass
class ParticipantState:
    id: int
    sample_ids: list[str]
    seed: int = 0

    def __post_init__(self):
        if not self.sample_ids:
            raise InvalidArgument(f"participant {self.id} holds no samples")

    @property
    def m_c(self) -> int:
        return len(self.sample_ids)


@dataclass
class GlobalModel:
    depth_params: ParameterSet
    pose_params: ParameterSet
    version: int = 0


@dataclass
class LocalResult:
    participant: int
    depth_params: ParameterSet
    pose_params: ParameterSet
    m_c: int
    epochs: int
    batches: int
    metrics: dict
    optimizer_state: dict | None = None

    @property
    def steps(self) -> int:
        return self.epochs * self.batches


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    steps: dict[int, int]
    epochs: dict[int, int]
    batches: dict[int, int]
    val_loss: float | None
    val_abs_rel: float | None
    best_val_loss: float | None
    cum_w_max: float
    cum_w_min: float
    cum_steps: int
    version: int
    failed: list[int] = field(default_factory=list)
    aborted: bool = False
    local: dict = field(default_factory=dict)


def select_participants(config: RoundConfig, pool: list[ParticipantState], round_index: int, policy=None):
    """Pick the ids trained in ``round_index`` (1-based).

    ``iid`` draws a fresh random subset each round. ``niid`` walks shuffled
    cycles over the pool without replacement, so every participant is visited
    once before anyone is visited twice.
    """
    if not pool:
        raise InvalidArgument("participant pool is empty")
    policy = policy or config.policy
    ids = sorted(p.id for p in pool)
    l = min(config.per_round, len(ids))
    if round_index < 1:
        raise InvalidArgument("rounds are numbered from 1")
    if policy == "iid":
        rng = np.random.default_rng(derive_seed(config.seed, "select", round_index))
        return sorted(int(i) for i in rng.choice(ids, size=l, replace=False))
    if policy != "niid":
        raise InvalidArgument(f"unknown selection policy {policy!r}")

    cycle_no, queue, chosen = 0, [], []
    for r in range(1, round_index + 1):
        chosen = []
        while len(chosen) < l:
            if not queue:
                cycle_no += 1
                rng = np.random.default_rng(derive_seed(config.seed, "cycle", cycle_no))
                queue = [int(i) for i in rng.permutation(ids)]
            pick = next((i for i in queue if i not in chosen), None)
            if pick is None:
                # Current cycle only holds ids already chosen this round; start the next one.
                queue = []
                continue
            queue.remove(pick)
            chosen.append(pick)
    return sorted(chosen)


def fedavg(updates, version: int = 0) -> GlobalModel:
    """Sample-count weighted average of ``(depth_params, pose_params, m_c)`` updates."""
    updates = list(updates)
    if not updates:
        raise AggregationError("no updates to aggregate")
    ref_d, ref_p = updates[0][0], updates[0][1]
    for d, p, m in updates[1:]:
        ref_d.check_compatible(d)
        ref_p.check_compatible(p)
    m_total = sum(u[2] for u in updates)
    if m_total <= 0:
        raise AggregationError("participant sample counts must be positive")

    def average(index):
        ref = updates[0][index]
        out = {}
        for name, arr in ref.items():
            acc = np.zeros(arr.shape, dtype=np.float64)
            for u in updates:
                acc += (u[2] / m_total) * u[index][name].astype(np.float64)
            out[name] = acc.astype(arr.dtype)
        return ParameterSet(out)

    if len(updates) == 1:
        return GlobalModel(ref_d, ref_p, version + 1)
    return GlobalModel(average(0), average(1), version + 1)


@dataclass(frozen=True)
class Validation:
    loss: float
    abs_rel: float


class TrainingEnv:
    """Everything a participant needs to train: sample store, validation set, model recipe."""

    def __init__(self, samples: list[Sample], validation: list[Sample], arch=ArchConfig(),
                 settings=LossSettings(), on_event: Callable | None = None):
        self.store = {s.sample_id: s for s in samples}
        self.validation = validation
        self.arch = arch
        self.settings = settings
        self.on_event = on_event or (lambda *a: None)
        self.val_batch = 8
        self._nets = build_networks(arch)

    def networks(self, model: GlobalModel):
        depth_net, pose_net = copy.deepcopy(self._nets)
        model.depth_params.load_into(depth_net)
        model.pose_params.load_into(pose_net)
        return depth_net, pose_net

    def initial_model(self) -> GlobalModel:
        d, p = self._nets
        return GlobalModel(ParameterSet.from_module(d), ParameterSet.from_module(p), 0)

    def validate(self, depth_net, pose_net) -> "Validation":
        """Mean L_Self and median-scaled AbsRel on the shared validation set."""
        if not self.validation:
            return Validation(math.nan, math.nan)
        depth_net.eval()
        pose_net.eval()
        gen = torch.Generator().manual_seed(derive_seed(0, "validation"))
        losses = []
        with torch.no_grad():
            for i in range(0, len(self.validation), self.val_batch):
                chunk = self.validation[i : i + self.val_batch]
                try:
                    losses.append((float(batch_loss(depth_net, pose_net, chunk, self.settings, gen).l_self), len(chunk)))
                except EmptyValidityError:
                    continue
        loss = sum(l * n for l, n in losses) / sum(n for _, n in losses) if losses else math.nan
        scored = [s for s in self.validation if s.gt_depth is not None]
        abs_rel = evaluate_model(depth_net, scored).abs_rel if scored else math.nan
        return Validation(loss, abs_rel)


def _train_epoch(env, depth_net, pose_net, optimizer, sample_ids, config, seed):
    batches = make_batches(sample_ids, config.batches_per_epoch, config.batch_size, seed)
    gen = torch.Generator().manual_seed(seed)
    losses, skipped = [], 0
    depth_net.train()
    pose_net.train()
    for ids in batches:
        try:
            breakdown = batch_loss(depth_net, pose_net, [env.store[i] for i in ids], env.settings, gen)
        except EmptyValidityError:
            log.warning("batch without valid pixels skipped")
            skipped += 1
            continue
        optimizer.zero_grad()
        breakdown.l_self.backward()
        optimizer.step()
        losses.append(float(breakdown.l_self.detach()))
    return losses, skipped


def local_update(participant: ParticipantState, model: GlobalModel, config: RoundConfig, env: TrainingEnv,
                 round_index: int = 1, optimizer_state=None) -> LocalResult:
    """Train private copies of the global networks for ``local_epochs`` epochs.

    Raises :class:`NonFiniteLossError` if any step diverges; the caller drops
    the participant from the round.
    """
    depth_net, pose_net = env.networks(model)
    params = [*depth_net.parameters(), *pose_net.parameters()]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    epoch_losses, val_losses, val_abs_rel, skipped = [], [], [], 0
    for epoch in range(config.local_epochs):
        seed = derive_seed(config.seed, "batches", participant.id, round_index, epoch)
        losses, n_skip = _train_epoch(env, depth_net, pose_net, optimizer, participant.sample_ids, config, seed)
        skipped += n_skip
        epoch_losses.extend(losses)
        check = env.validate(depth_net, pose_net)
        val_losses.append(check.loss)
        val_abs_rel.append(check.abs_rel)
        env.on_event("epoch", participant.id, round_index, epoch)

    k = max(1, len(epoch_losses) // 10)
    metrics = {
        "train_loss_first": float(np.mean(epoch_losses[:k])) if epoch_losses else math.nan,
        "train_loss_last": float(np.mean(epoch_losses[-k:])) if epoch_losses else math.nan,
        "val_loss": val_losses,
        "val_abs_rel": val_abs_rel,
        "skipped_batches": skipped,
    }
    return LocalResult(
        participant=participant.id,
        depth_params=ParameterSet.from_module(depth_net),
        pose_params=ParameterSet.from_module(pose_net),
        m_c=participant.m_c,
        epochs=config.local_epochs,
        batches=config.batches_per_epoch,
        metrics=metrics,
        optimizer_state=copy.deepcopy(optimizer.state_dict()),
    )


def participants_from_plan(plan: PartitionPlan, seed: int = 0) -> list[ParticipantState]:
    return [ParticipantState(pid, list(ids), derive_seed(seed, "participant", pid))
            for pid, ids in sorted(plan.assignment.items())]


@dataclass
class FederationState:
    """Resumable orchestrator state between rounds."""

    model: GlobalModel
    records: list[RoundRecord] = field(default_factory=list)
    optimizer_states: dict[int, dict] = field(default_factory=dict)


def run_federation(config: RoundConfig, plan: PartitionPlan, initial: GlobalModel, env: TrainingEnv,
                   state: FederationState | None = None, on_round: Callable | None = None) -> list[RoundRecord]:
    """Run rounds ``len(state.records) + 1 .. total_rounds`` of federated averaging."""
    if plan.num_participants != config.num_participants:
        raise InvalidArgument(f"plan has {plan.num_participants} participants, config expects {config.num_participants}")
    pool = participants_from_plan(plan, config.seed)
    by_id = {p.id: p for p in pool}
    state = state or FederationState(initial)
    omega = parameter_bytes(initial.depth_params, initial.pose_params)
    C = config.num_participants

    for r in range(len(state.records) + 1, config.total_rounds + 1):
        selected = select_participants(config, pool, r)
        env.on_event("select", tuple(selected), r)
        results, failed = [], []
        for pid in selected:
            participant = by_id[pid]
            try:
                res = local_update(participant, state.model, config, env, r, state.optimizer_states.get(pid))
            except NonFiniteLossError as exc:
                log.error("participant %d failed in round %d: %s", pid, r, exc)
                failed.append(pid)
                continue
            env.on_event("local_update", pid, r)
            results.append(res)

        prev = state.records[-1] if state.records else None
        prev_best = prev.best_val_loss if prev else None
        prev_steps = prev.cum_steps if prev else 0
        if not results:
            rec = RoundRecord(r, selected, {}, {}, {}, None, None, prev_best,
                              comm_upper_bound(r, C, omega), float(comm_lower_bound(r, C, config.fraction, omega)),
                              prev_steps, state.model.version, failed, aborted=True)
        else:
            state.model = fedavg([(x.depth_params, x.pose_params, x.m_c) for x in results], state.model.version)
            env.on_event("fedavg", r, state.model.version)
            if config.persist_optimizer_state:
                for x in results:
                    state.optimizer_states[x.participant] = x.optimizer_state
            check = env.validate(*env.networks(state.model))
            val = check.loss
            best = val if prev_best is None or not (prev_best <= val) else prev_best
            steps = {x.participant: x.steps for x in results}
            rec = RoundRecord(
                round=r,
                selected=selected,
                steps=steps,
                epochs={x.participant: x.epochs for x in results},
                batches={x.participant: x.batches for x in results},
                val_loss=val,
                val_abs_rel=check.abs_rel,
                best_val_loss=best,
                cum_w_max=comm_upper_bound(r, C, omega),
                cum_w_min=float(comm_lower_bound(r, C, config.fraction, omega)),
                cum_steps=prev_steps + sum(steps.values()),
                version=state.model.version,
                failed=failed,
                local={x.participant: x.metrics for x in results},
            )
        state.records.append(rec)
        if on_round is not None:
            on_round(rec, state)
    return state.records


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    cum_steps: int
    val_loss: float
    val_abs_rel: float
    best_val_loss: float
    train_loss_first: float
    train_loss_last: float


def run_centralized(config: RoundConfig, samples, initial: GlobalModel, env: TrainingEnv, epochs: int,
                    start: tuple | None = None, on_epoch: Callable | None = None):
    """Train one model on the pooled data, one record per epoch.

    Runs as a single always-selected participant (id 0), epoch ``e`` playing
    the part of round ``e``, so its batch stream matches a one-participant
    federation with one local epoch per round.
    """
    ids = [s.sample_id if isinstance(s, Sample) else s for s in samples]
    if not ids:
        raise InvalidArgument("centralized training needs data")
    participant = ParticipantState(0, ids)
    one_epoch = RoundConfig(1, 1, 1, epochs, config.batches_per_epoch, config.batch_size,
                            config.learning_rate, config.seed, "iid", True)
    model, opt_state, records = initial, None, []
    if start is not None:
        model, opt_state, records = start
    for e in range(len(records) + 1, epochs + 1):
        res = local_update(participant, model, one_epoch, env, e, opt_state)
        model = GlobalModel(res.depth_params, res.pose_params, model.version + 1)
        opt_state = res.optimizer_state
        val = res.metrics["val_loss"][-1]
        prev_best = records[-1].best_val_loss if records else None
        best = val if prev_best is None or not (prev_best <= val) else prev_best
        cum = (records[-1].cum_steps if records else 0) + res.steps
        rec = EpochRecord(e, res.steps, cum, val, res.metrics["val_abs_rel"][-1], best,
                          res.metrics["train_loss_first"], res.metrics["train_loss_last"])
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, (model, opt_state, records))
    return records, model
