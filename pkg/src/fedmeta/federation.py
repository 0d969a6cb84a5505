"""Synchronous federated meta-learning over simulated clients.

Each communication round has two stages: every client starts from the
broadcast global meta-parameters and runs a fixed number of local
meta-batches on its own data, then the server forms the FedAvg weighted mean
(weights m_i / sum m_j) of the returned (theta, alpha) pairs.

Clients only ever hand back parameters; the server reads nothing but their
example counts.  Client randomness comes from ``stream(seed, "client", id,
round)`` so results are independent of scheduling.

Checkpoint layout (little endian)::

    offset  size  field
    0       8     magic b"FMETACK\\0"
    8       4     format version (uint32, currently 1)
    12      8     round index (uint64)
    20      32    SHA-256 of the model config (see ModelConfig.digest)
    52      8     parameter count n (uint64)
    60      8n    theta, float64
    60+8n   8n    alpha, float64
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import EpisodeSpec, LabeledDataset, sample_episode
from .meta import MetaConfig, MetaParams, evaluate, init_meta, maml_step, metadpsgd_step, metasgd_step
from .metrics import MetricsReport, summarize_episodes
from .rng import stream

log = logging.getLogger(__name__)

LEARNERS = ("maml", "metasgd", "metadpsgd")

CKPT_MAGIC = b"FMETACK\0"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ32sQ")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    learner: str = "metasgd"
    episode: EpisodeSpec = EpisodeSpec()
    meta: MetaConfig = MetaConfig()
    rounds: int = 100
    local_batches: int = 10
    eval_every: int = 10
    eval_tasks: int = 100
    seed: int = 0
    workers: int = 1
    alpha_range: tuple[float, float] = (0.005, 0.1)
    negative_label: int | None = None

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.rounds < 0 or self.local_batches < 0 or self.eval_every < 0:
            raise ValueError("rounds, local_batches and eval_every must be non-negative")


@dataclass
class ClientState:
    client_id: int
    dataset: LabeledDataset

    def __post_init__(self):
        if len(self.dataset) == 0:
            raise ValueError(f"client {self.client_id} has an empty dataset")

    @property
    def size(self) -> int:
        return len(self.dataset)


@dataclass
class ServerState:
    global_meta: MetaParams
    round_index: int = 0


@dataclass
class RoundReport:
    round_index: int
    client_ids: list[int]
    losses: list[float]
    sizes: list[int]
    weights: list[float]
    checksum: str
    sigma: float
    evals: dict[str, MetricsReport] = field(default_factory=dict)


def checksum(meta: MetaParams) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(meta.theta, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(meta.alpha, dtype="<f8").tobytes())
    return h.hexdigest()


def fedavg(params_list: list[MetaParams], weights, client_ids=None) -> MetaParams:
    """Weighted mean of (theta, alpha) pairs with weights m_i / sum(m).

    Computed as ``ref + sum_i w_i (p_i - ref)`` with ``ref`` the lowest client
    id and terms added in ascending id order.  Coordinates where all clients
    agree therefore come back bitwise unchanged, signed zeros included.
    """
    if not params_list:
        raise ValueError("nothing to aggregate")
    if len(weights) != len(params_list):
        raise ValueError("one weight per client required")
    w = [float(x) for x in weights]
    if min(w) <= 0 or not all(math.isfinite(x) for x in w):
        raise ValueError("weights must be positive and finite")
    n = params_list[0].theta.size
    if any(p.theta.size != n for p in params_list):
        raise ValueError("parameter vectors differ in length")
    ids = list(range(len(w))) if client_ids is None else list(client_ids)
    total = math.fsum(w)
    order = sorted(range(len(w)), key=lambda i: ids[i])
    ref = params_list[order[0]].flat()
    delta = np.zeros_like(ref)
    for i in order[1:]:
        delta += (w[i] / total) * (params_list[i].flat() - ref)
    out = ref + delta
    np.copyto(out, ref, where=delta == 0)
    return MetaParams(out[:n].copy(), out[n:].copy())


def initial_meta(model, config: TrainingConfig) -> MetaParams:
    meta = init_meta(model, stream(config.seed, "init"), config.alpha_range)
    if config.learner == "maml":
        meta = MetaParams(meta.theta, np.full_like(meta.theta, config.meta.maml_inner_rate))
    return meta


def _step(model, meta, episodes, config: TrainingConfig, rng, trace):
    if config.learner == "metasgd":
        return metasgd_step(model, meta, episodes, config.meta, trace)
    if config.learner == "metadpsgd":
        return metadpsgd_step(model, meta, episodes, config.meta, rng, trace)
    return maml_step(model, meta, episodes, config.meta, trace)


def local_round(model, client: ClientState, global_meta: MetaParams, rounds_local: int, rng,
                config: TrainingConfig) -> tuple[MetaParams, list[float]]:
    """Run ``rounds_local`` meta-batches on the client's own data."""
    meta = global_meta
    trace: list[float] = []
    for _ in range(rounds_local):
        episodes = [sample_episode(client.dataset, config.episode, rng)
                    for _ in range(config.meta.tasks_per_batch)]
        meta = _step(model, meta, episodes, config, rng, trace)
    return meta, trace


def _client_rng(config: TrainingConfig, client_id: int, round_index: int):
    return stream(config.seed, "client", client_id, round_index)


def run_round(model, server: ServerState, clients: list[ClientState],
              config: TrainingConfig) -> tuple[ServerState, RoundReport]:
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    clients = sorted(clients, key=lambda c: c.client_id)
    r = server.round_index

    def work(client):
        return local_round(model, client, server.global_meta, config.local_batches,
                           _client_rng(config, client.client_id, r), config)

    if config.workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]

    sizes = [c.size for c in clients]
    total = sum(sizes)
    new_meta = fedavg([m for m, _ in results], sizes, [c.client_id for c in clients])
    if not new_meta.is_finite():
        raise FloatingPointError(f"non-finite parameters after round {r}")
    report = RoundReport(
        round_index=r + 1,
        client_ids=[c.client_id for c in clients],
        losses=[float(np.mean(t)) if t else math.nan for _, t in results],
        sizes=sizes,
        weights=[s / total for s in sizes],
        checksum=checksum(new_meta),
        sigma=config.meta.sigma if config.learner == "metadpsgd" else 0.0,
    )
    return ServerState(new_meta, r + 1), report


def eval_episodes(dataset: LabeledDataset, config: TrainingConfig, name: str):
    rng = stream(config.seed, "eval", name)
    return [sample_episode(dataset, config.episode, rng) for _ in range(config.eval_tasks)]


def positive_class(episode, negative_label: int | None) -> int:
    """Episode label treated as 'positive': the lowest original label that is
    not the designated negative one."""
    originals = sorted(episode.class_map)
    candidates = [c for c in originals if c != negative_label] or originals
    return episode.class_map[candidates[0]]


def evaluate_sets(model, meta: MetaParams, eval_sets: dict[str, list], config: TrainingConfig):
    out = {}
    for name, episodes in eval_sets.items():
        results = evaluate(model, meta, episodes, config.meta)
        positives = [positive_class(ep, config.negative_label) for ep in episodes]
        out[name] = summarize_episodes(results, positives)[1]
    return out


def run_training(model, clients: list[ClientState], config: TrainingConfig,
                 eval_data: dict[str, LabeledDataset] | None = None,
                 init: MetaParams | None = None, on_round=None):
    """Iterate communication rounds; evaluate every ``eval_every`` rounds and
    after the last one.  ``on_round(server, report)`` is called after each round.
    """
    server = ServerState(init if init is not None else initial_meta(model, config), 0)
    eval_sets = {name: eval_episodes(ds, config, name) for name, ds in (eval_data or {}).items()}
    history: list[RoundReport] = []
    for r in range(config.rounds):
        server, report = run_round(model, server, clients, config)
        last = r + 1 == config.rounds
        if eval_sets and (last or (config.eval_every and report.round_index % config.eval_every == 0)):
            report.evals = evaluate_sets(model, server.global_meta, eval_sets, config)
        log.debug("round %d loss %s", report.round_index, report.losses)
        history.append(report)
        if on_round is not None:
            on_round(server, report)
    return history, server


def train_centralized(model, dataset: LabeledDataset, config: TrainingConfig,
                      init: MetaParams | None = None) -> MetaParams:
    """Single-site training consuming the same random streams as client 0."""
    meta = init if init is not None else initial_meta(model, config)
    client = ClientState(0, dataset)
    for r in range(config.rounds):
        meta, _ = local_round(model, client, meta, config.local_batches, _client_rng(config, 0, r), config)
    return meta


# -- checkpoints -------------------------------------------------------------


def encode_checkpoint(meta: MetaParams, model_digest: bytes, round_index: int) -> bytes:
    if len(model_digest) != 32:
        raise ValueError("model digest must be 32 bytes")
    n = meta.theta.size
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, round_index, model_digest, n)
    return (header + np.ascontiguousarray(meta.theta, dtype="<f8").tobytes()
            + np.ascontiguousarray(meta.alpha, dtype="<f8").tobytes())


def decode_checkpoint(data: bytes, model_digest: bytes | None = None) -> tuple[MetaParams, int]:
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, round_index, digest, n = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if model_digest is not None and digest != model_digest:
        raise CheckpointError("checkpoint was written for a different model config")
    body = data[_CKPT_HEADER.size:]
    if len(body) != 16 * n:
        raise CheckpointError(f"expected {16 * n} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return MetaParams(values[:n].copy(), values[n:].copy()), round_index


def save_checkpoint(path, meta: MetaParams, model_digest: bytes, round_index: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(meta, model_digest, round_index))
    tmp.replace(path)


def load_checkpoint(path, model_digest: bytes | None = None) -> tuple[MetaParams, int]:
    return decode_checkpoint(Path(path).read_bytes(), model_digest)
