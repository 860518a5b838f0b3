"""Round-synchronous federated loop: sampling, local training, aggregation.

Strategies:
  fedavg          size-weighted averaging of local models
  fedprox         fedavg plus a proximal term anchoring locals to the global model
  fedpdc          locals scored on the server's balanced public set; aggregation
                  weights proportional to those accuracies, and the local loss
                  reports an accuracy penalty lam*(1-p)
  fedpdc_adaptive fedpdc with lam = 0.5 * round_number

The accuracy penalty is constant in the weights, so under the default
penalty_mode="literal" it changes reported losses but not updates;
penalty_mode="scaled_ce" instead multiplies the cross-entropy (and its
gradient) by (1 + lam*(1-p)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import LabeledDataset, ServerSet
from .diagnostics import global_objective
from .errors import (
    AggregationError,
    ConfigError,
    DivergenceError,
    EvaluationError,
    StateError,
)
from .nn import (
    Batch,
    ParamVector,
    backward,
    cross_entropy,
    evaluate_accuracy,
    forward,
    init_optimizer,
    sgd_step,
)
from .seeding import TAG_LOCAL, TAG_SAMPLE, stream

STRATEGIES = ("fedavg", "fedprox", "fedpdc", "fedpdc_adaptive")
PENALTY_MODES = ("literal", "scaled_ce")


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str
    lam: float = 1.0
    mu_prox: float = 0.0
    penalty_mode: str = "literal"
    tau: float = 1.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ConfigError(f"penalty_mode must be one of {PENALTY_MODES}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.lam < 0 or self.mu_prox < 0:
            raise ConfigError("lam and mu_prox must be >= 0")

    @property
    def scores_on_server(self) -> bool:
        return self.strategy in ("fedpdc", "fedpdc_adaptive")


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    rounds: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")


@dataclass(frozen=True)
class ClientState:
    """One participant: its id, private data, and the accuracy it is assumed
    to have when it was not scored in the previous round (1.0)."""

    id: int
    data: LabeledDataset
    last_accuracy: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.last_accuracy <= 1.0:
            raise StateError("client accuracy must lie in [0, 1]")


@dataclass(frozen=True)
class ServerState:
    model: ParamVector
    server_set: ServerSet | None
    round: int
    ledger: tuple[float, ...]
    prev_selected: tuple[int, ...] = ()
    global_accuracy: float = math.nan

    def __post_init__(self) -> None:
        if self.round < 0:
            raise StateError("round must be >= 0")
        if any(not 0.0 <= p <= 1.0 for p in self.ledger):
            raise StateError("ledger accuracies must lie in [0, 1]")


def make_server_state(
    model: ParamVector, server_set: ServerSet | None, num_clients: int
) -> ServerState:
    acc = evaluate_accuracy(model, server_set.data) if server_set is not None else math.nan
    return ServerState(
        model=model,
        server_set=server_set,
        round=0,
        ledger=(1.0,) * num_clients,
        global_accuracy=acc,
    )


@dataclass(frozen=True)
class RoundRecord:
    """Telemetry for one communication round."""

    round: int
    selected: tuple[int, ...]
    sent_accuracies: dict[int, float]
    measured_accuracies: dict[int, float]
    agg_weights: dict[int, float]
    mean_local_loss: float
    global_acc_server: float
    global_acc_test: float
    flags: tuple[str, ...] = ()
    global_loss: float | None = None
    global_grad_sqnorm: float | None = None
    global_loss_after: float | None = None


@dataclass(frozen=True)
class GradRule:
    """How the strategy turns the cross-entropy gradient into the update
    gradient: scale it, then add prox_weight * (w - w_global)."""

    ce_scale: float = 1.0
    prox_weight: float = 0.0


def sample_clients(num_clients: int, tau: float, round_index: int, seed: int) -> tuple[int, ...]:
    """max(floor(tau*N), 1) client ids, drawn without replacement from a
    stream keyed by (seed, round) so every round is independently reproducible."""
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    # epsilon guards floor() against binary representation of taus like 0.3
    count = int(math.floor(tau * num_clients + 1e-9))
    count = min(max(count, 1), num_clients)
    rng = stream(TAG_SAMPLE, seed, round_index)
    picked = rng.choice(num_clients, size=count, replace=False)
    return tuple(sorted(int(c) for c in picked))


def local_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    strategy: StrategyConfig,
    p: float,
    w: ParamVector,
    w_global: ParamVector,
) -> tuple[float, GradRule]:
    """Strategy loss on one batch plus the rule for building its gradient."""
    if not 0.0 <= p <= 1.0:
        raise StateError(f"accuracy p must lie in [0, 1], got {p}")
    ce = cross_entropy(logits, labels)
    if strategy.strategy == "fedavg":
        return ce, GradRule()
    if strategy.strategy == "fedprox":
        if strategy.mu_prox == 0.0:
            return ce, GradRule()
        diff = w.values - w_global.values
        return ce + 0.5 * strategy.mu_prox * float(diff @ diff), GradRule(
            prox_weight=strategy.mu_prox
        )
    # fedpdc / fedpdc_adaptive
    penalty = strategy.lam * (1.0 - p)
    if strategy.penalty_mode == "literal":
        # constant in w: reported loss includes it, the gradient does not
        loss = ce + penalty if penalty != 0.0 else ce
        return loss, GradRule()
    scale = 1.0 + penalty
    if scale == 1.0:
        return ce, GradRule()
    return scale * ce, GradRule(ce_scale=scale)


def local_train(
    client: ClientState,
    w_global: ParamVector,
    p_in: float,
    train: TrainConfig,
    strategy: StrategyConfig,
    round_index: int,
) -> tuple[ParamVector, list[float]]:
    """Minibatch SGD on the strategy loss for local_epochs epochs.

    The per-epoch shuffle stream is keyed by (seed, round) only, so clients
    holding identical data produce identical local models. Returns the final
    local model and every batch's reported loss in order.
    """
    n = len(client.data)
    model = w_global
    opt = init_optimizer(w_global, train.lr, train.momentum, train.weight_decay)
    rng = stream(TAG_LOCAL, train.seed, round_index)
    losses: list[float] = []
    for _epoch in range(train.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, train.batch_size):
            idx = perm[start : start + train.batch_size]
            batch = Batch(client.data.features[idx], client.data.labels[idx])
            logits = forward(model, batch)
            loss, rule = local_loss(logits, batch.labels, strategy, p_in, model, w_global)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"client {client.id} hit a non-finite loss in round {round_index}"
                )
            grad = backward(model, batch)
            if rule.ce_scale != 1.0:
                grad = rule.ce_scale * grad
            if rule.prox_weight != 0.0:
                grad = grad + rule.prox_weight * (model.values - w_global.values)
            try:
                model, opt = sgd_step(model, grad, opt)
            except StateError:
                # the update itself left the finite domain
                raise DivergenceError(
                    f"client {client.id} hit non-finite parameters in round {round_index}"
                ) from None
            losses.append(loss)
    return model, losses


def _combine(models: list[ParamVector], weights: np.ndarray) -> ParamVector:
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise AggregationError("all models must share one architecture")
    stacked = np.stack([m.values for m in models])
    return ParamVector(arch, weights @ stacked)


def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise AggregationError("nothing to aggregate")
    if np.any(sizes <= 0):
        raise AggregationError("dataset sizes must be positive")
    return sizes / sizes.sum()


def fedpdc_weights(accuracies) -> tuple[np.ndarray, bool]:
    """Accuracy-proportional weights; all-zero accuracies fall back to uniform."""
    accs = np.asarray(accuracies, dtype=np.float64)
    if accs.size == 0:
        raise AggregationError("nothing to aggregate")
    if np.any((accs < 0) | (accs > 1)):
        raise AggregationError("accuracies must lie in [0, 1]")
    total = accs.sum()
    if total == 0.0:
        return np.full(accs.size, 1.0 / accs.size), True
    return accs / total, False


def aggregate_fedavg(models: list[ParamVector], sizes) -> ParamVector:
    """Average weighted by local dataset size over the selected set."""
    weights = fedavg_weights(sizes)
    if len(models) != weights.size:
        raise AggregationError("models and sizes must have equal length")
    return _combine(models, weights)


def aggregate_fedpdc(models: list[ParamVector], accuracies) -> ParamVector:
    """Average weighted by each local model's public-set accuracy."""
    weights, _fallback = fedpdc_weights(accuracies)
    if len(models) != weights.size:
        raise AggregationError("models and accuracies must have equal length")
    return _combine(models, weights)


def adaptive_lambda(round_number: int) -> float:
    """Sensitivity schedule 0.5 * n for the n-th communication round (1-based)."""
    if round_number < 1:
        raise ConfigError("round_number must be >= 1")
    return 0.5 * round_number


def _mean_or_nan(values: list[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def run_round(
    server: ServerState,
    clients: list[ClientState],
    strategy: StrategyConfig,
    train: TrainConfig,
    test_data: LabeledDataset | None = None,
    instrument_global_loss: bool = False,
) -> tuple[ServerState, RoundRecord]:
    """One communication round: sample, train locals, score, aggregate.

    Local models for distinct clients are independent, so training order
    cannot affect the result; everything is reduced in ascending client id.
    """
    num_clients = len(clients)
    if num_clients == 0:
        raise ConfigError("need at least one client")
    if any(c.id != i for i, c in enumerate(clients)):
        raise StateError("clients must be listed in id order 0..N-1")
    if len(server.ledger) != num_clients:
        raise StateError("ledger length must match the number of clients")
    has_server_set = server.server_set is not None and len(server.server_set) > 0
    if strategy.scores_on_server and not has_server_set:
        raise EvaluationError(f"{strategy.strategy} requires a nonempty server set")

    eff_strategy = strategy
    if strategy.strategy == "fedpdc_adaptive":
        eff_strategy = replace(strategy, lam=adaptive_lambda(server.round + 1))

    global_loss = grad_sqnorm = None
    if instrument_global_loss:
        datasets = [c.data for c in clients]
        sizes = [len(c.data) for c in clients]
        global_loss, grad = global_objective(server.model, datasets, sizes)
        grad_sqnorm = float(grad @ grad)

    selected = sample_clients(num_clients, strategy.tau, server.round, train.seed)
    sent: dict[int, float] = {}
    local_models: dict[int, ParamVector] = {}
    per_client_loss: dict[int, float] = {}
    for cid in selected:
        p_in = (
            server.ledger[cid] if cid in server.prev_selected else clients[cid].last_accuracy
        )
        sent[cid] = p_in
        model_i, batch_losses = local_train(
            clients[cid], server.model, p_in, train, eff_strategy, server.round
        )
        local_models[cid] = model_i
        per_client_loss[cid] = _mean_or_nan(batch_losses)

    measured: dict[int, float] = {}
    new_ledger = list(server.ledger)
    if has_server_set:
        for cid in selected:
            p_i = evaluate_accuracy(local_models[cid], server.server_set.data)
            measured[cid] = p_i
            new_ledger[cid] = p_i

    flags: list[str] = []
    models = [local_models[cid] for cid in selected]
    if eff_strategy.scores_on_server:
        weights, fallback = fedpdc_weights([measured[cid] for cid in selected])
        if fallback:
            flags.append("uniform_weights_zero_accuracy")
    else:
        weights = fedavg_weights([len(clients[cid].data) for cid in selected])
    new_model = _combine(models, weights)

    acc_server = (
        evaluate_accuracy(new_model, server.server_set.data) if has_server_set else math.nan
    )
    acc_test = evaluate_accuracy(new_model, test_data) if test_data is not None else math.nan

    loss_after = None
    if instrument_global_loss:
        loss_after, _ = global_objective(
            new_model, [c.data for c in clients], [len(c.data) for c in clients]
        )

    record = RoundRecord(
        round=server.round,
        selected=selected,
        sent_accuracies=sent,
        measured_accuracies=measured,
        agg_weights={cid: float(w) for cid, w in zip(selected, weights)},
        mean_local_loss=_mean_or_nan([per_client_loss[cid] for cid in selected]),
        global_acc_server=acc_server,
        global_acc_test=acc_test,
        flags=tuple(flags),
        global_loss=global_loss,
        global_grad_sqnorm=grad_sqnorm,
        global_loss_after=loss_after,
    )
    new_server = replace(
        server,
        model=new_model,
        round=server.round + 1,
        ledger=tuple(new_ledger),
        prev_selected=selected,
        global_accuracy=acc_server,
    )
    return new_server, record
