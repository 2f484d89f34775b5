"""Communication rounds: local training, weighting, aggregation, global update.

One round ``t`` for the participating clients ``C_t``:

1. every client starts from the global model ``w_t`` and trains ``E_i`` epochs;
2. it returns ``delta_i = w_t - w_i`` and ``|D_i| * dL_i`` where ``dL_i`` is the
   spread (max - min) of its per-epoch mean training losses;
3. the server turns those into weights ``p_i`` (size, equal, loss-reduction
   only, or lorar: ``|D_i| dL_i / sum_j |D_j| dL_j``);
4. ``delta = sum_i p_i delta_i`` is fed to the server optimizer as a
   pseudo-gradient.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import models
from .datagen import ClientDataset
from .errors import DegenerateWeights, DimensionMismatch, EmptyDataset, EmptyInput, InvalidSpec, NonFiniteResult
from .models import ModelSpec
from .optim import ClientOptimizerSpec, OptState, ServerOptimizerSpec, init_state, raw_step, server_step
from .tensor import ParamVector, as_vector, l2_norm_sq, weighted_sum

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedopt", "fedprox")
MECHANISMS = ("size", "equal", "loss-reduction-only", "lorar")
_MECHANISM_ALIASES = {"lr": "loss-reduction-only", "loss-reduction": "loss-reduction-only"}


@dataclass(frozen=True)
class WeightingMechanism:
    kind: str = "size"

    def __post_init__(self):
        kind = _MECHANISM_ALIASES.get(self.kind, self.kind)
        if kind not in MECHANISMS:
            raise InvalidSpec(f"unknown weighting mechanism {self.kind!r}")
        object.__setattr__(self, "kind", kind)


def default_local_epochs(sizes: Sequence[int], large: int = 6, other: int = 12) -> tuple[int, ...]:
    """Fewer local epochs for the two largest clients, more for everyone else."""
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    largest = set(order[:2]) if len(sizes) > 2 else set()
    return tuple(large if i in largest else other for i in range(len(sizes)))


def default_batch_sizes(sizes: Sequence[int], large: int = 16, other: int = 8) -> tuple[int, ...]:
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    largest = set(order[:2]) if len(sizes) > 2 else set()
    return tuple(large if i in largest else other for i in range(len(sizes)))


def _default_server_opt(kind: str) -> ServerOptimizerSpec:
    if kind == "fedopt":
        return ServerOptimizerSpec("sgd-momentum", learning_rate=1.0, momentum=0.9)
    return ServerOptimizerSpec("sgd", learning_rate=1.0, momentum=0.0)


@dataclass(frozen=True)
class AlgorithmSpec:
    """Which FL algorithm to run and how.

    ``local_epochs`` and ``batch_sizes`` are per-client tuples indexed by
    client_id, a single int for every client, or ``None`` for the default
    large/other split computed from the population sizes.
    """

    kind: str = "fedopt"
    weighting: WeightingMechanism = field(default_factory=WeightingMechanism)
    mu: float = 1e-4
    client_opt: ClientOptimizerSpec = field(default_factory=ClientOptimizerSpec)
    server_opt: ServerOptimizerSpec | None = None
    local_epochs: tuple[int, ...] | int | None = None
    batch_sizes: tuple[int, ...] | int | None = None
    rounds: int = 60

    def __post_init__(self):
        if self.kind not in ALGORITHMS:
            raise InvalidSpec(f"unknown algorithm {self.kind!r}")
        if isinstance(self.weighting, str):
            object.__setattr__(self, "weighting", WeightingMechanism(self.weighting))
        if self.kind == "fedavg":
            # FedAvg's server rule is a plain unit-rate step.
            object.__setattr__(self, "server_opt", ServerOptimizerSpec("sgd", 1.0, momentum=0.0))
        elif self.server_opt is None:
            object.__setattr__(self, "server_opt", _default_server_opt(self.kind))
        if self.mu < 0:
            raise InvalidSpec("mu must be nonnegative")
        if self.rounds < 0:
            raise InvalidSpec("rounds must be nonnegative")
        for name in ("local_epochs", "batch_sizes"):
            value = getattr(self, name)
            if isinstance(value, list):
                value = tuple(value)
                object.__setattr__(self, name, value)
            values = (value,) if isinstance(value, int) else (value or ())
            if any(int(v) < 1 for v in values):
                raise InvalidSpec(f"{name} entries must be >= 1")

    @property
    def proximal_mu(self) -> float:
        return self.mu if self.kind == "fedprox" else 0.0

    def epochs_for(self, client_id: int, sizes: Sequence[int] | None = None) -> int:
        return _per_client(self.local_epochs, client_id, sizes, default_local_epochs)

    def batch_size_for(self, client_id: int, sizes: Sequence[int] | None = None) -> int:
        return _per_client(self.batch_sizes, client_id, sizes, default_batch_sizes)


def _per_client(value, client_id, sizes, default_rule) -> int:
    if isinstance(value, int):
        return value
    if value is None:
        if sizes is None:
            raise InvalidSpec("population sizes are needed to resolve per-client defaults")
        value = default_rule(sizes)
    if client_id >= len(value):
        raise InvalidSpec(f"no per-client setting for client {client_id}")
    return int(value[client_id])


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParamVector
    weighted_loss_reduction: float
    train_size: int
    epoch_losses: tuple[float, ...] = ()

    def __post_init__(self):
        if self.weighted_loss_reduction < 0:
            raise InvalidSpec("weighted_loss_reduction must be nonnegative")
        if self.train_size < 1:
            raise InvalidSpec("train_size must be >= 1")

    @property
    def loss_reduction(self) -> float:
        return self.weighted_loss_reduction / self.train_size


@dataclass
class RoundRecord:
    round_index: int
    client_ids: list[int]
    weights: list[float]
    aggregate_norm: float
    epoch_losses: list[list[float]]
    weighted_loss_reductions: list[float]
    weighting: str
    degenerate: bool = False
    dev_metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "client_ids": list(self.client_ids),
            "weights": list(self.weights),
            "aggregate_norm": self.aggregate_norm,
            "epoch_losses": [list(x) for x in self.epoch_losses],
            "weighted_loss_reductions": list(self.weighted_loss_reductions),
            "weighting": self.weighting,
            "degenerate": self.degenerate,
            "dev_metrics": self.dev_metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round_index=d["round"],
            client_ids=list(d["client_ids"]),
            weights=list(d["weights"]),
            aggregate_norm=d["aggregate_norm"],
            epoch_losses=[list(x) for x in d["epoch_losses"]],
            weighted_loss_reductions=list(d["weighted_loss_reductions"]),
            weighting=d["weighting"],
            degenerate=d["degenerate"],
            dev_metrics=d["dev_metrics"],
        )

    @classmethod
    def from_json(cls, line: str) -> "RoundRecord":
        return cls.from_dict(json.loads(line))


def records_to_jsonl(records: Sequence[RoundRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def records_from_jsonl(text: str) -> list[RoundRecord]:
    return [RoundRecord.from_json(line) for line in text.splitlines() if line.strip()]


def round_seed(seed: int, round_index: int, client_id: int) -> int:
    """Seed for client ``client_id``'s shuffling in round ``round_index``."""
    ss = np.random.SeedSequence([seed % 2**64, round_index, client_id])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _raw_proximal(model, w, anchor, mu, X, y):
    value, grad = models.raw_loss_and_grad(model, w, X, y)
    diff = w - anchor
    return value + 0.5 * mu * float(diff @ diff), grad + mu * diff


def proximal_loss_and_grad(
    model: ModelSpec,
    w: ParamVector,
    anchor: ParamVector,
    mu: float,
    batch: models.Batch,
) -> tuple[float, ParamVector]:
    """The FedProx local objective ``f(w) + mu/2 * ||w - anchor||^2`` and its gradient."""
    if mu < 0:
        raise InvalidSpec("mu must be nonnegative")
    w, anchor = np.asarray(w, dtype=np.float64), np.asarray(anchor, dtype=np.float64)
    if w.shape != anchor.shape:
        raise DimensionMismatch(f"anchor dim {anchor.shape} != parameter dim {w.shape}")
    models.loss_and_grad(model, w, batch)  # shape and target checks
    value, grad = _raw_proximal(model, w, anchor, mu, batch.inputs, batch.targets)
    if not np.isfinite(value):
        raise NonFiniteResult("proximal objective is not finite")
    return value, as_vector(grad)


def local_training(
    client_id: int,
    global_w: ParamVector,
    dataset: ClientDataset,
    algo: AlgorithmSpec,
    round_seed: int,
    model: ModelSpec,
    sizes: Sequence[int] | None = None,
) -> ClientUpdate:
    """Run ``E_i`` epochs of minibatch steps from ``global_w`` and summarize them."""
    global_w = np.asarray(global_w, dtype=np.float64)
    if global_w.shape != (models.param_dim(model),):
        raise DimensionMismatch(f"global model dim {global_w.shape} does not match the model spec")
    n = dataset.size
    if n == 0:
        raise EmptyDataset(f"client {client_id} has no training data")
    epochs = algo.epochs_for(client_id, sizes)
    batch_size = algo.batch_size_for(client_id, sizes)
    mu = algo.proximal_mu
    prox = algo.kind == "fedprox"

    X, y = dataset.train.inputs, dataset.train.targets
    if X.shape[1] != model.input_dim:
        raise DimensionMismatch(f"client {client_id} inputs have {X.shape[1]} features, model expects {model.input_dim}")
    if model.is_classifier:
        models.check_targets(model, y)
    rng = np.random.default_rng(round_seed)
    state: OptState = init_state(algo.client_opt)
    w = global_w.copy()
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if prox:
                value, grad = _raw_proximal(model, w, global_w, mu, X[idx], y[idx])
            else:
                value, grad = models.raw_loss_and_grad(model, w, X[idx], y[idx])
            batch_losses.append(value)
            state, w = raw_step(algo.client_opt, state, w, grad)
        if not np.all(np.isfinite(w)):
            raise NonFiniteResult(f"client {client_id} diverged during local training")
        epoch_losses.append(math.fsum(batch_losses) / len(batch_losses))

    reduction = max(epoch_losses) - min(epoch_losses)
    return ClientUpdate(
        client_id=client_id,
        delta=as_vector(global_w - w),
        weighted_loss_reduction=n * reduction,
        train_size=n,
        epoch_losses=tuple(epoch_losses),
    )


def compute_weights(updates: Sequence[ClientUpdate], mechanism: WeightingMechanism | str) -> list[float]:
    """Aggregation weights, in the order of ``updates``.

    Raises ``DegenerateWeights`` when the mechanism's normalizer is zero.
    """
    if isinstance(mechanism, str):
        mechanism = WeightingMechanism(mechanism)
    if len(updates) == 0:
        raise EmptyInput("compute_weights needs at least one update")
    kind = mechanism.kind
    if kind == "size":
        scores = [float(u.train_size) for u in updates]
    elif kind == "equal":
        scores = [1.0] * len(updates)
    elif kind == "loss-reduction-only":
        scores = [u.weighted_loss_reduction / u.train_size for u in updates]
    else:
        scores = [float(u.weighted_loss_reduction) for u in updates]
    total = math.fsum(scores)
    if not total > 0:
        raise DegenerateWeights(f"{kind} weights have a zero normalizer")
    return [s / total for s in scores]


def aggregate_and_update(
    server_state: OptState | None,
    global_w: ParamVector,
    updates: Sequence[ClientUpdate],
    weights: Sequence[float],
    algo: AlgorithmSpec,
) -> tuple[OptState, ParamVector]:
    """Weighted sum of local changes (ascending client_id), then one server step."""
    if len(updates) != len(weights):
        raise DimensionMismatch(f"{len(weights)} weights for {len(updates)} updates")
    return server_step(server_state, global_w, aggregate(updates, weights), algo.server_opt)


def aggregate(updates: Sequence[ClientUpdate], weights: Sequence[float]) -> ParamVector:
    """``sum_i p_i * delta_i`` summed in ascending client_id order."""
    pairs = sorted(zip(updates, weights), key=lambda p: p[0].client_id)
    return weighted_sum([p for _, p in pairs], [u.delta for u, _ in pairs])


def weigh_round(updates: Sequence[ClientUpdate], mechanism: WeightingMechanism) -> tuple[list[float], str, bool]:
    """Weights with the size fallback applied when the mechanism degenerates."""
    try:
        return compute_weights(updates, mechanism), mechanism.kind, False
    except DegenerateWeights:
        log.warning("%s weights degenerate this round; falling back to size weights", mechanism.kind)
        return compute_weights(updates, WeightingMechanism("size")), "size", True


class FederatedResult(NamedTuple):
    final: ParamVector
    best: ParamVector
    records: list[RoundRecord]


TrainRound = Callable[[int, ParamVector], Sequence[ClientUpdate]]
Evaluator = Callable[[ParamVector], dict]


def serve_rounds(
    algo: AlgorithmSpec,
    init_w: ParamVector,
    train_round: TrainRound,
    evaluate: Evaluator | None = None,
    eval_every: int = 5,
    on_record: Callable[[RoundRecord], None] | None = None,
) -> FederatedResult:
    """Server-side loop shared by the in-process and socket runners.

    ``train_round(t, w)`` returns the updates of every participating client;
    it is the round barrier. The global model is scored with ``evaluate``
    every ``eval_every`` rounds and after the last round; the best one by
    ``micro_avg`` is kept (earliest wins ties).
    """
    if eval_every < 1:
        raise InvalidSpec("eval_every must be positive")
    w = as_vector(init_w)
    best_w, best_score = w, -math.inf
    state: OptState | None = None
    records: list[RoundRecord] = []
    for t in range(algo.rounds):
        updates = sorted(train_round(t, w), key=lambda u: u.client_id)
        if not updates:
            raise EmptyInput(f"no client updates arrived in round {t}")
        weights, used, degenerate = weigh_round(updates, algo.weighting)
        delta = aggregate(updates, weights)
        state, w = server_step(state, w, delta, algo.server_opt)
        record = RoundRecord(
            round_index=t,
            client_ids=[u.client_id for u in updates],
            weights=weights,
            aggregate_norm=math.sqrt(l2_norm_sq(delta)),
            epoch_losses=[list(u.epoch_losses) for u in updates],
            weighted_loss_reductions=[u.weighted_loss_reduction for u in updates],
            weighting=used,
            degenerate=degenerate,
        )
        if evaluate is not None and ((t + 1) % eval_every == 0 or t == algo.rounds - 1):
            record.dev_metrics = evaluate(w)
            score = record.dev_metrics["micro_avg"]
            if score > best_score:
                best_w, best_score = w, score
        if evaluate is None:
            best_w = w
        records.append(record)
        if on_record is not None:
            on_record(record)
        log.info(
            "round %d: |delta|=%.4g weighting=%s%s",
            t, record.aggregate_norm, used,
            f" dev micro={record.dev_metrics['micro_avg'] * 100:.2f}" if record.dev_metrics else "",
        )
    if best_score == -math.inf:
        best_w = w
    return FederatedResult(final=w, best=best_w, records=records)


def dev_evaluator(model: ModelSpec, population: Sequence[ClientDataset]) -> Evaluator:
    """Score a global model on the merged dev split of ``population``."""
    from .metrics import evaluate_all

    def evaluate(w: ParamVector) -> dict:
        report = evaluate_all(model, w, population, split="dev")
        return {"macro_avg": report.macro_avg, "micro_avg": report.micro_avg}

    return evaluate


def run_federated(
    algo: AlgorithmSpec,
    population: Sequence[ClientDataset],
    seed: int,
    eval_every: int = 5,
    model: ModelSpec | None = None,
    init_w: ParamVector | None = None,
    sampler: Callable[[int, list[int]], Sequence[int]] | None = None,
    max_workers: int = 1,
    on_record: Callable[[RoundRecord], None] | None = None,
) -> FederatedResult:
    """Simulate ``algo.rounds`` rounds in-process.

    ``sampler(t, client_ids)`` picks the participating clients of round ``t``;
    the default is full participation. ``max_workers > 1`` trains clients on a
    thread pool; updates are sorted by client_id before aggregation, so the
    result does not depend on completion order.
    """
    if len(population) == 0:
        raise EmptyInput("population is empty")
    if model is None:
        raise InvalidSpec("a model spec is required")
    by_id = {d.client_id: d for d in population}
    sizes = population_sizes(population)
    if init_w is None:
        init_w = models.init_params(model, seed)

    def train_one(t: int, w: ParamVector, cid: int) -> ClientUpdate:
        return local_training(cid, w, by_id[cid], algo, round_seed(seed, t, cid), model, sizes)

    def train_round(t: int, w: ParamVector) -> list[ClientUpdate]:
        ids = sorted(by_id)
        if sampler is not None:
            ids = sorted(sampler(t, ids))
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                return list(pool.map(lambda cid: train_one(t, w, cid), ids))
        return [train_one(t, w, cid) for cid in ids]

    evaluate = dev_evaluator(model, population) if model.is_classifier else None
    return serve_rounds(algo, init_w, train_round, evaluate, eval_every, on_record)


def population_sizes(population: Sequence[ClientDataset]) -> list[int]:
    """Train sizes indexed by client_id (ids are expected to be 0..N-1)."""
    sizes = [0] * (max(d.client_id for d in population) + 1)
    for d in population:
        sizes[d.client_id] = d.size
    return sizes
