"""
The round loop: trainers train in windows, servers aggregate at their chosen
frequency and gossip transactions, and at every block tick an elected miner
proposes the global model, which the servers agree on before the next interval.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Final

import numpy as np
import numpy.typing as npt

from aggchain.aggregation import (
    StrategyParams,
    local_aggregate,
    local_weights,
    offload_decision,
)
from aggchain.config import ScenarioConfig, StrategyMode
from aggchain.consensus import (
    Commit,
    ConsensusEvent,
    ConsensusRound,
    PrePrepare,
    Prepare,
    RoundDeadline,
    TrustState,
    apply_round,
    drive_round,
    elect_miner,
    election_distribution,
    round_deadline,
)
from aggchain.drl import (
    DdpgAgent,
    DdpgHyper,
    Experience,
    SharedReplayBuffer,
    build_state,
    compute_reward,
    random_action,
)
from aggchain.errors import AggchainError, ScheduleError
from aggchain.ledger import (
    Chain,
    GlobalAggBlock,
    LocalAggTransaction,
    explain_block,
    make_transaction,
)
from aggchain.rng import SeedStreams
from aggchain.sim import Behavior, EventKind, FaultProfile, Kernel, Message, SimEvent
from aggchain.training import (
    Dataset,
    Model,
    ModelParams,
    SgdResult,
    TrainerProfile,
    build_model,
    evaluate,
    evaluate_loss,
    generate_task,
    partition_noniid,
    train_sgd,
    train_until_converged,
)

logger = logging.getLogger(__name__)

LEDGER_TARGET: Final[str] = "ledger"
THRESHOLD_FRACTION: Final[float] = 0.95
# server-side training streams sit above any realistic trainer index
_SERVER_STREAM_BASE: Final[int] = 1_000_000


# ---------------------------------------------------------------------------
# message bodies and events


@dataclass(frozen=True)
class TrainRequest:
    window: float


@dataclass(frozen=True, eq=False)
class TrainerReport:
    trainer_id: str
    params: ModelParams
    untrained: npt.NDArray[np.int64]
    visits: int

    def scrambled(self, rng: np.random.Generator) -> TrainerReport:
        return replace(self, params=rng.normal(0.0, 1.0, size=len(self.params)))


@dataclass(frozen=True, eq=False)
class TxAnnounce:
    tx: LocalAggTransaction

    def scrambled(self, rng: np.random.Generator) -> TxAnnounce:
        noisy = rng.normal(0.0, 1.0, size=len(self.tx.params))
        return TxAnnounce(replace(self.tx, params=noisy))


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class ServerRoundStat:
    server_id: str
    local_acc: float
    pi: float
    trust: float
    reward: float
    action: StrategyParams
    local_rounds: int
    offloaded: int


@dataclass(frozen=True)
class RoundRecord:
    k: int
    miner_id: str
    finalized: bool
    global_acc: float
    global_loss: float
    sim_time: float
    visits: int
    servers: tuple[ServerRoundStat, ...]


@dataclass
class TrainerState:
    profile: TrainerProfile
    server_id: str
    params: ModelParams
    rng: np.random.Generator
    last_trained: ModelParams | None = None
    visits: int = 0

    @property
    def trainer_id(self) -> str:
        return self.profile.trainer_id


@dataclass
class ServerState:
    server_id: str
    trainer_ids: list[str]
    params: ModelParams
    chain: Chain
    rng: np.random.Generator
    local_acc: float
    scored_acc: float
    action: StrategyParams
    pool: list[int] = field(default_factory=list)
    reports: dict[str, TrainerReport] = field(default_factory=dict)
    tx_pool: list[LocalAggTransaction] = field(default_factory=list)
    last_tx_time: float | None = None
    local_round: int = 0
    rounds_this_interval: int = 0
    offloaded_this_interval: int = 0
    visits: int = 0
    state_vec: npt.NDArray[np.float64] | None = None


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    records: list[RoundRecord]
    chain: Chain
    chains: dict[str, Chain]
    trust: TrustState
    buffer: SharedReplayBuffer
    agents: dict[str, DdpgAgent]
    trainers: dict[str, TrainerState]
    servers: dict[str, ServerState]
    event_digest: str
    model: Model
    train: Dataset
    test: Dataset
    consensus_log: list[ConsensusEvent] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].global_acc if self.records else float("nan")

    def miner_histogram(self) -> dict[str, int]:
        hist = {s: 0 for s in self.config.server_ids}
        for rec in self.records:
            if rec.finalized:
                hist[rec.miner_id] += 1
        return hist

    def elected_histogram(self) -> dict[str, int]:
        hist = {s: 0 for s in self.config.server_ids}
        for rec in self.records:
            hist[rec.miner_id] += 1
        return hist


def trainer_ids_for(server_id: str, n: int) -> list[str]:
    return [f"{server_id}.v{j}" for j in range(1, n + 1)]


def aggregation_times(start: float, tick: float, f_i: float, block_interval: float, max_rounds: int) -> list[float]:
    """Local aggregation instants in (start, tick]; at least one, at the tick, when the window is short."""
    f_eff = max(f_i, block_interval / max_rounds)
    count = int(math.floor((tick - start) / f_eff + 1e-9))
    if count < 1:
        return [tick]
    return [min(start + m * f_eff, tick) for m in range(1, count + 1)]


# ---------------------------------------------------------------------------
# simulation


class Simulation:
    def __init__(self, cfg: ScenarioConfig) -> None:
        self.cfg = cfg
        self.F = cfg.block_interval
        self.streams = SeedStreams(cfg.seed)
        t = cfg.task
        self.train, self.test = generate_task(
            cfg.seed, t.n_classes, t.dim, t.n_train, t.n_test, t.separation, t.clusters_per_class
        )
        self.model = build_model(t.model, t.dim, t.n_classes, t.hidden)
        self.theta0 = self.model.init_params(self.streams.stream("init"))

        self.kernel = Kernel(
            noise_rng=self.streams.stream("noise"),
            link_rng=self.streams.stream("link"),
            default_latency=cfg.consensus.latency,
            loss_rate=cfg.consensus.loss_rate,
        )

        all_trainers = [
            tid
            for sid, scfg in cfg.servers.items()
            for tid in trainer_ids_for(sid, len(scfg.cpu_speeds))
        ]
        shards = partition_noniid(self.train, all_trainers, t.skew, cfg.seed)
        initial_acc = evaluate(self.model, self.theta0, self.test)

        links: dict[tuple[str, str], float] = {}
        self.trainers: dict[str, TrainerState] = {}
        self.servers: dict[str, ServerState] = {}
        trainer_index = 0
        for s_index, (sid, scfg) in enumerate(cfg.servers.items()):
            self.kernel.register(sid, FaultProfile(sid, frozenset(scfg.faults)))
            tids = trainer_ids_for(sid, len(scfg.cpu_speeds))
            for j, (tid, speed) in enumerate(zip(tids, scfg.cpu_speeds, strict=True), start=1):
                fault = scfg.trainer_faults.get(j)
                self.kernel.register(tid, FaultProfile(tid, frozenset({fault}) if fault else frozenset()))
                links[(tid, sid)] = 0.0
                self.trainers[tid] = TrainerState(
                    profile=TrainerProfile(tid, speed, shards[tid]),
                    server_id=sid,
                    params=self.theta0.copy(),
                    rng=self.streams.stream("train", trainer_index),
                )
                trainer_index += 1
            self.servers[sid] = ServerState(
                server_id=sid,
                trainer_ids=tids,
                params=self.theta0.copy(),
                chain=Chain(self.theta0, self.F),
                rng=self.streams.stream("train", _SERVER_STREAM_BASE + s_index),
                local_acc=initial_acc,
                scored_acc=initial_acc,
                action=StrategyParams.fedavg(self.F),
            )
        self.kernel.link_latency = links
        self.max_trainers = max(len(s.cpu_speeds) for s in cfg.servers.values())

        self.trust = TrustState.initial(cfg.server_ids)
        self.election_rng = self.streams.stream("election")
        self.action_rng = self.streams.stream("drl", 0)
        self.update_rng = self.streams.stream("drl", 1)
        self.buffer = SharedReplayBuffer(cfg.drl.capacity)
        self.agents: dict[str, DdpgAgent] = {}
        if cfg.strategy is StrategyMode.LEARNED:
            d = cfg.drl
            hyper = DdpgHyper(d.gamma, d.tau, d.batch_size, d.actor_lr, d.critic_lr, d.hidden, d.noise)
            for s_index, sid in enumerate(cfg.server_ids):
                self.agents[sid] = DdpgAgent(sid, self.F, self.streams.stream("init", s_index + 1), hyper)

        self.global_acc = initial_acc
        self.global_params = self.theta0.copy()
        self.global_loss = evaluate_loss(self.model, self.theta0, self.test)
        self.visits = 0
        self.records: list[RoundRecord] = []
        self.consensus_log: list[ConsensusEvent] = []

    # -- helpers -----------------------------------------------------------

    def _profile(self, actor_id: str) -> FaultProfile:
        return self.kernel.profile(actor_id)

    def _data_fraction(self, srv: ServerState) -> float:
        held = sum(len(self.trainers[t].profile.shard) for t in srv.trainer_ids) + len(srv.pool)
        return min(1.0, held / len(self.train))

    def _state_for(self, srv: ServerState) -> npt.NDArray[np.float64]:
        return build_state(
            self.global_acc,
            srv.local_acc,
            self._data_fraction(srv),
            len(srv.trainer_ids) / self.max_trainers,
        )

    def _exploration(self, k: int) -> float:
        d = self.cfg.drl
        if self.cfg.rounds == 1:
            return d.explore_start
        frac = (k - 1) / (self.cfg.rounds - 1)
        return d.explore_start + (d.explore_end - d.explore_start) * frac

    def _choose_action(self, k: int, srv: ServerState) -> StrategyParams:
        mode = self.cfg.strategy
        if mode is StrategyMode.FIXED or (mode is StrategyMode.RANDOM and k == 1):
            return StrategyParams.fedavg(self.F)
        if mode is StrategyMode.RANDOM:
            return random_action(self.F, self.action_rng)
        return self.agents[srv.server_id].select_action(
            srv.state_vec, self._exploration(k), self.action_rng
        )

    def _record_visits(self, res: SgdResult) -> None:
        self.visits += res.visits

    # -- event handlers ----------------------------------------------------

    def dispatch(self, event: SimEvent) -> None:
        payload = event.payload
        if event.kind is EventKind.TRAINER_REPORT:
            if isinstance(payload, TrainRequest):
                self._train(event.target, payload.window)
            elif isinstance(payload, Message) and isinstance(payload.body, TrainerReport):
                self.servers[payload.recipient].reports[payload.body.trainer_id] = payload.body
            else:
                raise ScheduleError(f"unexpected trainer event payload {type(payload).__name__}")
        elif event.kind is EventKind.LOCAL_AGGREGATION:
            self._aggregate(event.target)
        elif event.kind is EventKind.MESSAGE_DELIVERY and isinstance(payload, Message):
            if isinstance(payload.body, TxAnnounce):
                self.servers[payload.recipient].tx_pool.append(payload.body.tx)
            elif not isinstance(payload.body, PrePrepare | Prepare | Commit):
                raise ScheduleError(f"unexpected message body {type(payload.body).__name__}")
            # consensus traffic for an already resolved round is dropped
        elif event.kind is EventKind.PHASE_TIMEOUT and isinstance(payload, RoundDeadline):
            pass
        else:
            raise ScheduleError(f"no handler for {event.kind.name} event at t={event.at}")

    def _train(self, trainer_id: str, window: float) -> None:
        tr = self.trainers[trainer_id]
        prof = self._profile(trainer_id)
        if prof.has(Behavior.SILENT):
            return
        if prof.has(Behavior.NO_TRAIN):
            report = TrainerReport(trainer_id, tr.params.copy(), np.empty(0, dtype=np.int64), 0)
        else:
            t = self.cfg.task
            res = train_sgd(
                self.model,
                tr.params,
                self.train,
                tr.profile.shard.indices,
                tr.profile.cpu_speed * window,
                t.lr,
                tr.rng,
                t.batch_size,
                t.l2,
            )
            tr.params = res.params
            tr.last_trained = res.params.copy()
            tr.visits += res.visits
            self._record_visits(res)
            report = TrainerReport(trainer_id, res.params, res.untrained, res.visits)
        self.kernel.deliver(Message(trainer_id, tr.server_id, report), kind=EventKind.TRAINER_REPORT)

    def _maybe_offload(self, srv: ServerState, tr: TrainerState, report: TrainerReport, metric: float) -> None:
        if not self.cfg.offload.enabled or len(report.untrained) == 0:
            return
        shard_size = len(tr.profile.shard)
        candidates = np.intersect1d(report.untrained, tr.profile.shard.indices)
        upload = candidates[: max(0, min(len(candidates), shard_size - 1))]
        if len(upload) == 0:
            return
        a = srv.action
        if offload_decision(self.cfg.offload.sigma, len(upload) / shard_size, metric, a.h_i1, a.a_i):
            tr.profile.offload(upload)
            srv.pool.extend(int(i) for i in upload)
            srv.offloaded_this_interval += len(upload)

    def _aggregate(self, server_id: str) -> None:
        srv = self.servers[server_id]
        reports = [srv.reports.pop(t) for t in sorted(srv.reports)]
        models: list[ModelParams] = []
        sizes: list[float] = []
        metrics: list[float] = []
        for report in reports:
            tr = self.trainers[report.trainer_id]
            metric = evaluate(self.model, report.params, self.test)
            self._maybe_offload(srv, tr, report, metric)
            models.append(report.params)
            sizes.append(float(len(tr.profile.shard)))
            metrics.append(metric)

        if srv.pool:
            t = self.cfg.task
            res = train_sgd(
                self.model,
                srv.params,
                self.train,
                np.array(sorted(srv.pool), dtype=np.int64),
                1.0,
                t.lr,
                srv.rng,
                t.batch_size,
                t.l2,
            )
            srv.visits += res.visits
            self._record_visits(res)
            models.append(res.params)
            sizes.append(float(len(srv.pool)))
            metrics.append(evaluate(self.model, res.params, self.test))

        if not models:
            logger.debug("%s: nothing to aggregate at t=%s", server_id, self.kernel.now)
            return

        a = srv.action
        weights = local_weights(sizes, metrics, a.w_i0, a.w_i1, a.b_i)
        theta = local_aggregate(models, weights)
        srv.params = theta
        srv.local_acc = evaluate(self.model, theta, self.test)
        srv.local_round += 1
        srv.rounds_this_interval += 1
        for tid in srv.trainer_ids:
            self.trainers[tid].params = theta.copy()

        tx = make_transaction(
            server_id,
            self.kernel.now,
            theta,
            local_round=srv.local_round,
            last_timestamp=srv.last_tx_time,
            dim=len(self.theta0),
        )
        srv.last_tx_time = tx.timestamp
        srv.tx_pool.append(tx)
        self.kernel.broadcast(server_id, self.cfg.server_ids, TxAnnounce(tx))

    # -- interval ----------------------------------------------------------

    def _schedule_interval(self, k: int, start: float) -> None:
        tick = k * self.F
        for srv in self.servers.values():
            srv.rounds_this_interval = 0
            srv.offloaded_this_interval = 0
            if self._profile(srv.server_id).has(Behavior.NO_TRAIN):
                continue
            prev = start
            for t in aggregation_times(start, tick, srv.action.f_i, self.F, self.cfg.max_local_rounds):
                for tid in srv.trainer_ids:
                    self.kernel.schedule(SimEvent(t, tid, EventKind.TRAINER_REPORT, TrainRequest(t - prev)))
                self.kernel.schedule(SimEvent(t, srv.server_id, EventKind.LOCAL_AGGREGATION, k))
                prev = t
        self.kernel.schedule(SimEvent(tick, LEDGER_TARGET, EventKind.BLOCK_TICK, k))

    def _candidate(self, k: int, miner: ServerState) -> GlobalAggBlock | None:
        lo, hi = (k - 1) * self.F, k * self.F
        txs = [tx for tx in miner.tx_pool if lo < tx.timestamp <= hi]
        if not txs:
            return None
        try:
            return miner.chain.assemble(miner.server_id, k, txs)
        except AggchainError as exc:
            logger.warning("round %d: miner %s could not build a block: %s", k, miner.server_id, exc)
            return None

    def _live_servers(self, k: int, miner_id: str) -> frozenset[str]:
        """Servers whose interval-k transaction must have reached the miner by the tick."""
        if self.kernel.loss_rate > 0.0:
            return frozenset()
        lo, hi = (k - 1) * self.F, k * self.F
        live = set()
        for sid, srv in self.servers.items():
            if self._profile(sid).has(Behavior.SILENT):
                continue
            lag = 0.0 if sid == miner_id else self.kernel.latency(sid, miner_id)
            if any(tx.server_id == sid and lo < tx.timestamp <= hi - lag for tx in srv.tx_pool):
                live.add(sid)
        return frozenset(live)

    def _reference_chain(self) -> Chain:
        for sid in self.cfg.server_ids:
            if self._profile(sid).honest:
                return self.servers[sid].chain
        return self.servers[self.cfg.server_ids[0]].chain

    def run_interval(self, k: int) -> RoundRecord:
        start = self.kernel.now
        for srv in self.servers.values():
            srv.state_vec = self._state_for(srv)
            srv.action = self._choose_action(k, srv)
        self._schedule_interval(k, start)

        while True:
            event = self.kernel.advance()
            if event.kind is EventKind.BLOCK_TICK and event.payload == k:
                break
            if event.kind is EventKind.SCENARIO_END:
                raise ScheduleError(f"event queue drained before block tick {k}")
            self.dispatch(event)

        dist = election_distribution(self.trust)
        miner_id = elect_miner(dist, self.election_rng)
        block = self._candidate(k, self.servers[miner_id])
        chains = {sid: srv.chain for sid, srv in self.servers.items()}
        deadline = round_deadline(self.kernel.now, self.cfg.consensus.phase_timeout * self.F)
        validator = partial(explain_block, required=self._live_servers(k, miner_id))
        round_ = ConsensusRound(self.kernel, k, miner_id, chains, dist, deadline, validator)
        round_.start(block)
        outcome = drive_round(round_, on_other=self.dispatch)
        self.consensus_log.extend(outcome.events)

        prev_global_acc = self.global_acc
        pis = {sid: 0.0 for sid in self.servers}
        if outcome.block is not None:
            final = outcome.block
            self.global_params = final.global_params.copy()
            self.global_acc = evaluate(self.model, self.global_params, self.test)
            self.global_loss = evaluate_loss(self.model, self.global_params, self.test)
            for sid, tx in final.latest_by_server().items():
                srv = self.servers[sid]
                block_acc = evaluate(self.model, tx.params, self.test)
                pis[sid] = block_acc - srv.scored_acc
                srv.scored_acc = block_acc
            for srv in self.servers.values():
                if srv.chain.head.block_hash == final.block_hash:
                    srv.params = self.global_params.copy()
                    for tid in srv.trainer_ids:
                        self.trainers[tid].params = self.global_params.copy()
            logger.info(
                "round %d: miner %s finalized block %d, global acc %.4f",
                k,
                miner_id,
                final.height,
                self.global_acc,
            )
        else:
            logger.info("round %d: miner %s failed to finalize a block", k, miner_id)

        d = self.cfg.consensus
        self.trust = apply_round(self.trust, outcome, pis, d.delta1, d.delta2)

        stats = []
        experiences = []
        for sid, srv in self.servers.items():
            _, _, reward = compute_reward(
                srv.local_acc, prev_global_acc, self.global_acc, self.cfg.drl.p, self.cfg.drl.q
            )
            if self.agents:
                experiences.append(
                    Experience(srv.state_vec, srv.action.as_vector(), reward, self._state_for(srv), sid)
                )
            stats.append(
                ServerRoundStat(
                    server_id=sid,
                    local_acc=srv.local_acc,
                    pi=pis[sid],
                    trust=self.trust.scores[sid],
                    reward=reward,
                    action=srv.action,
                    local_rounds=srv.rounds_this_interval,
                    offloaded=srv.offloaded_this_interval,
                )
            )
        for exp in experiences:
            self.buffer.store(exp)
        for sid in sorted(self.agents):
            self.agents[sid].update(self.buffer, self.update_rng)

        hi = k * self.F
        for srv in self.servers.values():
            srv.tx_pool = [tx for tx in srv.tx_pool if tx.timestamp > hi]

        record = RoundRecord(
            k=k,
            miner_id=miner_id,
            finalized=outcome.block is not None,
            global_acc=self.global_acc,
            global_loss=self.global_loss,
            sim_time=self.kernel.now,
            visits=self.visits,
            servers=tuple(stats),
        )
        self.records.append(record)
        return record

    def run(self) -> ScenarioResult:
        logger.info(
            "scenario %s: seed %d, %d servers, %d trainers, %s strategy, %d rounds",
            self.cfg.name,
            self.cfg.seed,
            len(self.servers),
            len(self.trainers),
            self.cfg.strategy.value,
            self.cfg.rounds,
        )
        for k in range(1, self.cfg.rounds + 1):
            self.run_interval(k)
        self.kernel.schedule(SimEvent(self.kernel.now, LEDGER_TARGET, EventKind.SCENARIO_END))
        while (event := self.kernel.advance()).kind is not EventKind.SCENARIO_END:
            self.dispatch(event)
        logger.info("scenario %s: final global acc %.4f", self.cfg.name, self.global_acc)
        return ScenarioResult(
            config=self.cfg,
            records=self.records,
            chain=self._reference_chain(),
            chains={sid: srv.chain for sid, srv in self.servers.items()},
            trust=self.trust,
            buffer=self.buffer,
            agents=self.agents,
            trainers=self.trainers,
            servers=self.servers,
            event_digest=self.kernel.log_digest(),
            model=self.model,
            train=self.train,
            test=self.test,
            consensus_log=self.consensus_log,
        )


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    return Simulation(cfg).run()


# ---------------------------------------------------------------------------
# strategy comparison


@dataclass(frozen=True)
class ModeRow:
    mode: str
    final_mean: float
    final_sd: float
    curve: tuple[float, ...]
    rounds_to_threshold: float
    reached: int
    runs: int
    speedup: float | None


@dataclass(frozen=True)
class Comparison:
    threshold: float
    seeds: tuple[int, ...]
    rows: tuple[ModeRow, ...]


def _accuracy_curve(cfg: ScenarioConfig) -> list[float]:
    return [r.global_acc for r in run_scenario(cfg).records]


def central_curve(cfg: ScenarioConfig) -> list[float]:
    """Centralized SGD on the pooled training set with the federation's per-round visit budget."""
    sim = Simulation(cfg)
    t = cfg.task
    per_round = sum(
        tr.profile.cpu_speed * len(tr.profile.shard) * cfg.block_interval for tr in sim.trainers.values()
    )
    epochs = per_round / len(sim.train)
    indices = np.arange(len(sim.train), dtype=np.int64)
    rng = sim.streams.stream("train", 2 * _SERVER_STREAM_BASE)
    params = sim.theta0.copy()
    curve = []
    for _ in range(cfg.rounds):
        params = train_sgd(sim.model, params, sim.train, indices, epochs, t.lr, rng, t.batch_size, t.l2).params
        curve.append(evaluate(sim.model, params, sim.test))
    return curve


def run_curves(cfgs: Sequence[ScenarioConfig], jobs: int = 1, central: bool = False) -> list[list[float]]:
    """Accuracy curves for ``cfgs``, in input order; ``jobs > 1`` fans out over processes."""
    fn = central_curve if central else _accuracy_curve
    if jobs <= 1 or len(cfgs) <= 1:
        return [fn(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, cfgs))


def rounds_to_threshold(curve: Sequence[float], threshold: float) -> float:
    for k, acc in enumerate(curve, start=1):
        if acc >= threshold:
            return float(k)
    return math.inf


def compare_strategies(
    cfg: ScenarioConfig,
    modes: Sequence[StrategyMode | str],
    repeats: int = 10,
    jobs: int = 1,
    central: bool = False,
) -> Comparison:
    if len(modes) < 2:
        raise AggchainError("comparison needs at least two strategy modes")
    seeds = tuple(cfg.seed + r for r in range(repeats))
    labels = [StrategyMode(m).value for m in modes]

    curves: dict[int, list[list[float]]] = {}
    for i, label in enumerate(labels):
        cfgs = [cfg.with_overrides(strategy=label, seed=s) for s in seeds]
        curves[i] = run_curves(cfgs, jobs)
    if central:
        cfgs = [cfg.with_overrides(seed=s) for s in seeds]
        curves[len(labels)] = run_curves(cfgs, jobs, central=True)
        labels.append("central")

    finals = {i: np.array([c[-1] for c in cs]) for i, cs in curves.items()}
    if StrategyMode.FIXED.value in labels:
        base_idx = labels.index(StrategyMode.FIXED.value)
    else:
        base_idx = max(finals, key=lambda i: float(finals[i].mean()))
    threshold = THRESHOLD_FRACTION * float(finals[base_idx].mean())

    def rtt(i: int) -> tuple[float, int]:
        per_seed = [rounds_to_threshold(c, threshold) for c in curves[i]]
        hit = [r for r in per_seed if math.isfinite(r)]
        return (float(np.mean(hit)) if hit else math.inf), len(hit)

    base_rtt, _ = rtt(base_idx)
    rows = []
    for i, label in enumerate(labels):
        mode_rtt, reached = rtt(i)
        speedup = None
        if math.isfinite(base_rtt) and math.isfinite(mode_rtt):
            speedup = (base_rtt - mode_rtt) / base_rtt
        rows.append(
            ModeRow(
                mode=label,
                final_mean=float(finals[i].mean()),
                final_sd=float(finals[i].std(ddof=1)) if len(finals[i]) > 1 else 0.0,
                curve=tuple(float(v) for v in np.mean(np.array(curves[i]), axis=0)),
                rounds_to_threshold=mode_rtt,
                reached=reached,
                runs=len(curves[i]),
                speedup=speedup,
            )
        )
    return Comparison(threshold=threshold, seeds=seeds, rows=tuple(rows))


# ---------------------------------------------------------------------------
# early stopping


@dataclass(frozen=True)
class EarlyStopRow:
    label: str
    final_acc: float
    sim_time: float
    visits: int
    aggregations: int


def _single_aggregator_run(cfg: ScenarioConfig, aggregations: int, epochs_cap: float | None) -> EarlyStopRow:
    sim = Simulation(cfg)
    t = cfg.task
    params = sim.theta0.copy()
    trainers = list(sim.trainers.values())
    sizes = [float(len(tr.profile.shard)) for tr in trainers]
    sim_time = 0.0
    visits = 0
    for _ in range(aggregations):
        models = []
        slowest = 0.0
        for tr in trainers:
            if epochs_cap is None:
                res = train_until_converged(
                    sim.model, params, sim.train, tr.profile.shard.indices, t.lr, tr.rng, t.batch_size, t.l2
                )
            else:
                res = train_sgd(
                    sim.model, params, sim.train, tr.profile.shard.indices, epochs_cap, t.lr, tr.rng, t.batch_size, t.l2
                )
            models.append(res.params)
            visits += res.visits
            slowest = max(slowest, res.epochs / tr.profile.cpu_speed)
        sim_time += slowest
        params = local_aggregate(models, local_weights(sizes, [0.0] * len(sizes), 1.0, 0.0, 0.0))
    label = "till-converged" if epochs_cap is None else f"capped-{epochs_cap:g}-epochs"
    return EarlyStopRow(label, evaluate(sim.model, params, sim.test), sim_time, visits, aggregations)


def early_stop_demo(cfg: ScenarioConfig, epochs_cap: float = 1.0, aggregations: int = 20) -> tuple[EarlyStopRow, EarlyStopRow]:
    if epochs_cap <= 0:
        raise AggchainError(f"epochs_cap must be > 0, got {epochs_cap}")
    if aggregations < 1:
        raise AggchainError(f"aggregations must be >= 1, got {aggregations}")
    converged = _single_aggregator_run(cfg, aggregations, None)
    capped = _single_aggregator_run(cfg, aggregations, epochs_cap)
    return converged, capped
