"""Uncertainty-driven aggregation weights between clients.

A single affine layer maps the vector of client mean uncertainties to one
score per client.  Row ``t`` of the weight matrix is the softmax of those
scores with entry ``t`` masked out, so every row is a distribution over the
other clients.  Client ``t`` then receives ``p_t + mu * sum_k w_tk p_k``.

The layer is fitted by plain gradient ascent on the summed log Dirichlet-mean
probability of each client's evaluation answers under its aggregated prompts.
Client prompts and heads stay fixed while the weights are fitted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from evifed import autodiff as ad
from evifed.autodiff import Tensor
from evifed.errors import ConfigError, DimensionError, InvalidInputError, ProtocolError
from evifed.messages import ClientPublish, LikelihoodReport, MessageBus, ServerDistribute
from evifed.model import PromptSet

MASK = -1e300


class WeightNet:
    def __init__(self, n_clients: int):
        if n_clients < 2:
            raise ConfigError("the weight network needs at least two clients")
        self.n = n_clients
        self.weight = Tensor(np.zeros((n_clients, n_clients)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_clients), requires_grad=True)
        self._mask = np.where(np.eye(n_clients, dtype=bool), MASK, 0.0)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def _check_u(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.n,):
            raise DimensionError(f"expected {self.n} uncertainties, got shape {u.shape}")
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise InvalidInputError("client uncertainties must lie in (0, 1)")
        return u

    def weight_matrix(self, u) -> Tensor:
        """(T, T) tensor; row t is the masked softmax of the shared scores."""
        u = self._check_u(u)
        scores = ad.add(ad.reshape(ad.matmul(self.weight, Tensor(u.reshape(-1, 1))), (self.n,)),
                        self.bias)
        rows = ad.concat([ad.reshape(scores, (1, self.n))] * self.n, axis=0)
        return ad.softmax_rows(ad.add(rows, Tensor(self._mask)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"dluc.weight": self.weight.data, "dluc.bias": self.bias.data}


def weights_for_client(net: WeightNet, u, t: int) -> np.ndarray:
    if not 0 <= t < net.n:
        raise IndexError(f"client index {t} out of range for {net.n} clients")
    with ad.no_grad():
        return net.weight_matrix(u).data[t].copy()


def uniform_weights(n_clients: int) -> np.ndarray:
    w = np.full((n_clients, n_clients), 1.0 / (n_clients - 1))
    np.fill_diagonal(w, 0.0)
    return w


def aggregate_prompts(t: int, prompts: Sequence[PromptSet], w, mu: float) -> PromptSet:
    """p_t + mu * sum_{k != t} w_k p_k, entrywise over every prompt array."""
    if not 0 <= t < len(prompts):
        raise IndexError(f"client index {t} out of range for {len(prompts)} prompt sets")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (len(prompts),):
        raise DimensionError(f"weight vector shape {w.shape} != ({len(prompts)},)")
    base = prompts[t]
    for p in prompts:
        if not base.compatible(p):
            raise DimensionError("prompt sets have incompatible layouts")
    if mu == 0.0:
        return base.copy()
    mixed = np.zeros_like(base.flat())
    for k, p in enumerate(prompts):
        if k != t:
            mixed = mixed + w[k] * p.flat()
    return base.from_flat(base.flat() + mu * mixed)


class LikelihoodScorer(Protocol):
    client_id: int

    def log_likelihood(self, prompts: PromptSet) -> Tensor:
        """Summed log(alpha_true / S) over the client's evaluation batch."""


def likelihood_objective(scorers: Sequence[LikelihoodScorer], prompts: Sequence[PromptSet],
                         net: WeightNet | np.ndarray, u, mu: float,
                         bus: MessageBus | None = None, iteration: int = 0) -> Tensor:
    """sum_t log-likelihood of client t's evaluation answers under p_t + mu p_t^S.

    ``net`` may be a fixed weight matrix instead of a network.  Gradients reach
    only the network parameters: prompts enter as constants.
    """
    T = len(scorers)
    if len(prompts) != T:
        raise DimensionError(f"{len(prompts)} prompt sets for {T} clients")
    W = net.weight_matrix(u) if isinstance(net, WeightNet) else Tensor(np.asarray(net, float))
    if mu == 0.0:
        aggregated = [p.from_flat(p.flat(), requires_grad=False) for p in prompts]
    else:
        P = np.stack([p.flat() for p in prompts])
        mixed = ad.add(Tensor(P), ad.scale(ad.matmul(W, Tensor(P)), mu))
        aggregated = [_split_row(base, ad.index(mixed, t)) for t, base in enumerate(prompts)]
    total = None
    for scorer, agg in zip(scorers, aggregated):
        ll = scorer.log_likelihood(agg)
        if bus is not None:
            bus.send(LikelihoodReport(scorer.client_id, iteration, ll.item()))
        total = ll if total is None else ad.add(total, ll)
    return total


def _split_row(base: PromptSet, row: Tensor) -> PromptSet:
    pieces, pos = [], 0
    for ref in base.tensors():
        pieces.append(ad.reshape(ad.index(row, slice(pos, pos + ref.size)), ref.shape))
        pos += ref.size
    return base.with_tensors(pieces)


def objective_ascent_grad(scorers: Sequence[LikelihoodScorer], prompts: Sequence[PromptSet],
                          net: WeightNet, u, mu: float, bus: MessageBus | None = None,
                          iteration: int = 0) -> float:
    """Value of :func:`likelihood_objective`, accumulating its gradient into ``net``.

    Same gradient as backpropagating the joint objective, but each client's
    forward graph is built and freed on its own: first d ll_t / d(aggregated
    row t), then one pass through the mixing step P + mu W P.  Peak memory is
    one client's graph instead of all T.
    """
    T = len(scorers)
    if len(prompts) != T:
        raise DimensionError(f"{len(prompts)} prompt sets for {T} clients")
    P = np.stack([p.flat() for p in prompts])
    with ad.no_grad():
        mixed = P + mu * (net.weight_matrix(u).data @ P) if mu != 0.0 else P
    row_grads = np.zeros_like(P)
    total = 0.0
    for t, (scorer, base) in enumerate(zip(scorers, prompts)):
        row = Tensor(mixed[t].copy(), requires_grad=mu != 0.0)
        with ad.Graph() as g:
            ll = scorer.log_likelihood(_split_row(base, row))
        if mu != 0.0:
            ad.backward(ll, g)
            row_grads[t] = row.grad
        if bus is not None:
            bus.send(LikelihoodReport(scorer.client_id, iteration, ll.item()))
        total += ll.item()
    if mu != 0.0:
        with ad.Graph() as g:
            W = net.weight_matrix(u)
            surrogate = ad.sum_all(ad.mul(ad.scale(ad.matmul(W, Tensor(P)), mu), Tensor(row_grads)))
        ad.backward(surrogate, g)
    return total


@dataclass
class DLUCState:
    net: WeightNet
    mu: float = 0.2
    lr: float = 0.01
    lr_decay: float = 0.1
    equal_weights: bool = False
    W: np.ndarray = field(default=None)
    objective_trace: list[float] = field(default_factory=list)
    phases: int = 0

    def __post_init__(self) -> None:
        if self.mu < 0:
            raise ConfigError(f"aggregation rate must be nonnegative, got {self.mu}")
        if self.W is None:
            self.W = uniform_weights(self.net.n)


def communication_phase(state: DLUCState, publishes: Sequence[ClientPublish],
                        scorers: Sequence[LikelihoodScorer], layout: PromptSet, step_c: int,
                        bus: MessageBus | None = None) -> list[ServerDistribute]:
    """Fit the weights for ``step_c`` ascent steps, then emit aggregated prompts."""
    if step_c < 1:
        raise ConfigError("step_c must be >= 1")
    T = state.net.n
    by_id = {p.client_id: p for p in publishes}
    for t in range(T):
        if t not in by_id:
            raise ProtocolError(f"client {t} did not publish before the communication phase")
    u = np.array([by_id[t].mean_uncertainty for t in range(T)])
    prompts = [layout.from_flat(_flat_from_arrays(layout, by_id[t].prompt_arrays()),
                                requires_grad=False) for t in range(T)]
    trace = []
    if not state.equal_weights:
        for it in range(step_c):
            trace.append(objective_ascent_grad(scorers, prompts, state.net, u, state.mu, bus, it))
            for p in state.net.parameters():
                if p.grad is not None:
                    p.data = p.data + state.lr * p.grad
                p.grad = None
        with ad.no_grad():
            state.W = state.net.weight_matrix(u).data.copy()
    else:
        state.W = uniform_weights(T)
    state.objective_trace = trace
    out = []
    for t in range(T):
        agg = aggregate_prompts(t, prompts, state.W[t], state.mu)
        msg = ServerDistribute.build(t, agg.named_arrays(), state.W[t])
        out.append(bus.send(msg) if bus is not None else msg)
    state.lr *= state.lr_decay
    state.phases += 1
    return out


def _flat_from_arrays(layout: PromptSet, arrays: dict[str, np.ndarray]) -> np.ndarray:
    names = list(layout.named_arrays())
    if set(names) != set(arrays):
        raise ProtocolError(f"published prompt arrays {sorted(arrays)} do not match layout")
    parts = [np.asarray(arrays[n], dtype=np.float64).ravel() for n in names]
    return np.concatenate(parts) if parts else np.zeros(0)
