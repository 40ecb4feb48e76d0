"""Client lifecycle: local evidential training interleaved with DLUC rounds.

A round is one local phase on every client (independent, parallelisable)
followed by one communication phase on the server.  Clients only ever hand
the server a :class:`~evifed.messages.ClientPublish` and a log-likelihood
scalar; they only ever receive a :class:`~evifed.messages.ServerDistribute`.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from evifed import autodiff as ad
from evifed.dluc import DLUCState, WeightNet, communication_phase
from evifed.errors import ConfigError, InvalidInputError, ProtocolError
from evifed.evidential import (LossConfig, alpha_from_logits, dirichlet_mean_loglik,
                               evidential_output, one_hot, total_loss)
from evifed.messages import ClientPublish, MessageBus
from evifed.model import (AnswerHead, Backbone, BackboneConfig, PromptSet, build_backbone,
                          client_forward)
from evifed.optim import Adam
from evifed.synthdata import ClientData, VQABatch

WEIGHTINGS = ("dluc", "equal")


@dataclass
class FedConfig:
    T: int = 4
    rounds: int = 10
    step_l: int = 20
    step_c: int = 5
    mu: float = 0.05
    weighting: str = "dluc"
    lam: float = 0.1
    lambda_ramp: int | None = None
    prompt_len: int = 8
    prompted_blocks: tuple[int, ...] = (0, 1, 2, 3)
    prompt_init_std: float = 0.0
    head_hidden: int = 64
    dropout: float = 0.2
    prompt_lr: float = 0.01
    head_lr: float = 0.01
    local_lr_decay: float = 0.5
    dluc_lr: float = 0.01
    dluc_lr_decay: float = 0.1
    batch_size: int = 16
    per_client_n: int = 200
    hidden_dim: int = 32
    blocks: int = 4
    heads: int = 4
    seed_data: int = 0
    seed_init: int = 0
    seed_shuffle: int = 0
    deterministic: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        self.prompted_blocks = tuple(int(b) for b in self.prompted_blocks)
        problems = []
        if self.T < 2:
            problems.append(("T", "must be >= 2"))
        for name in ("rounds", "step_l", "step_c", "batch_size", "workers"):
            if getattr(self, name) < 1:
                problems.append((name, "must be >= 1"))
        for name in ("mu", "lam", "prompt_lr", "head_lr", "dluc_lr", "prompt_init_std"):
            if getattr(self, name) < 0:
                problems.append((name, "must be >= 0"))
        if not 0.0 <= self.dropout < 1.0:
            problems.append(("dropout", "must lie in [0, 1)"))
        if self.weighting not in WEIGHTINGS:
            problems.append(("weighting", f"must be one of {WEIGHTINGS}"))
        if self.prompt_len < 0 or self.prompt_len % 2:
            problems.append(("prompt_len", "must be even and >= 0"))
        if any(b < 0 or b >= self.blocks for b in self.prompted_blocks):
            problems.append(("prompted_blocks", f"must lie in [0, {self.blocks})"))
        if self.per_client_n < 30:
            problems.append(("per_client_n", "must be >= 30"))
        if problems:
            raise ConfigError("; ".join(f"{k}: {v}" for k, v in problems))

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(hidden_dim=self.hidden_dim, blocks=self.blocks, heads=self.heads,
                              seed=self.seed_init)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.lambda_ramp)

    def replace(self, **changes) -> "FedConfig":
        d = asdict(self)
        d.update(changes)
        return FedConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompted_blocks"] = list(self.prompted_blocks)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class EvalResult(NamedTuple):
    closed_acc: float | None
    open_acc: float | None
    mean_u: float
    accuracy: float


@dataclass
class ClientState:
    client_id: int
    data: ClientData
    backbone: Backbone
    prompts: PromptSet
    head: AnswerHead
    prompt_opt: Adam
    head_opt: Adam
    phases_done: int = 0
    last_mean_u: float | None = None
    last_eval_acc: float | None = None

    def trainable(self) -> list:
        return self.prompts.tensors() + self.head.tensors()

    def trainable_count(self) -> int:
        return self.prompts.n_scalars + self.head.n_scalars

    def log_likelihood(self, prompts: PromptSet) -> ad.Tensor:
        """Evaluation-batch log-likelihood with this client's head held fixed."""
        batch = self.data.eval
        if len(batch) == 0:
            raise InvalidInputError(f"client {self.client_id} has an empty evaluation batch")
        frozen = AnswerHead(*(ad.Tensor(t.data) for t in self.head.tensors()), dropout=0.0)
        logits = client_forward(self.backbone, prompts, frozen, batch.images, batch.questions)
        return dirichlet_mean_loglik(alpha_from_logits(logits), batch.answers)

    def publish(self) -> ClientPublish:
        if self.last_mean_u is None:
            raise ProtocolError(f"client {self.client_id} has not finished a local phase")
        return ClientPublish.build(self.client_id, self.prompts.named_arrays(),
                                   self.last_mean_u, self.last_eval_acc)


@dataclass
class ClientLog:
    client: int
    accuracy: float
    closed_acc: float | None
    open_acc: float | None
    mean_u: float
    eval_accuracy: float


@dataclass
class RoundLog:
    round: int
    clients: list[ClientLog]
    weights: list[list[float]]
    objective: list[float] = field(default_factory=list)
    duration: float | None = None


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def make_client(cfg: FedConfig, t: int, data: ClientData, backbone: Backbone) -> ClientState:
    """Every client starts from the same prompt and head initialisation."""
    if len(data.train) == 0:
        raise ConfigError(f"client {t} has an empty training partition")
    init = _rng(cfg.seed_init, 1)
    prompts = PromptSet.init(backbone.cfg, cfg.prompt_len, cfg.prompted_blocks, init,
                             cfg.prompt_init_std)
    head = AnswerHead.init(backbone.cfg.feature_dim, backbone.cfg.answer_count,
                           cfg.head_hidden, cfg.dropout, init)
    return ClientState(t, data, backbone, prompts, head, Adam(cfg.prompt_lr), Adam(cfg.head_lr))


def evaluate_client(client: ClientState, split: str | VQABatch = "test",
                    prompts: PromptSet | None = None) -> EvalResult:
    batch = client.data.splits()[split] if isinstance(split, str) else split
    if len(batch) == 0:
        raise ConfigError("cannot evaluate an empty split")
    use = prompts if prompts is not None else client.prompts
    with ad.no_grad():
        logits = client_forward(client.backbone, use, client.head, batch.images, batch.questions)
    out = evidential_output(logits)
    correct = out.prediction() == batch.answers

    def frac(mask):
        return float(correct[mask].mean()) if mask.any() else None

    return EvalResult(frac(batch.closed), frac(~batch.closed), float(out.uncertainty.mean()),
                      float(correct.mean()))


def local_phase(client: ClientState, cfg: FedConfig, loss_cfg: LossConfig | None = None,
                round_idx: int | None = None) -> ClientState:
    """``step_l`` minibatch steps on prompts and head, then lr decay and evaluation."""
    loss_cfg = loss_cfg or cfg.loss_config()
    train = client.data.train
    n = len(train)
    if n == 0:
        raise ConfigError(f"client {client.client_id} has an empty training partition")
    r = client.phases_done if round_idx is None else round_idx
    rng = _rng(cfg.seed_shuffle, client.client_id, r)
    drop_rng = None if cfg.deterministic else rng
    size = min(cfg.batch_size, n)
    for _ in range(cfg.step_l):
        idx = np.sort(rng.choice(n, size=size, replace=False))
        batch = train.subset(idx)
        with ad.Graph() as g:
            logits = client_forward(client.backbone, client.prompts, client.head,
                                    batch.images, batch.questions, drop_rng)
            loss = total_loss(alpha_from_logits(logits),
                              one_hot(batch.answers, logits.shape[-1]), loss_cfg, epoch=r)
        ad.backward(loss, g)
        client.prompt_opt.step(client.prompts.tensors())
        client.head_opt.step(client.head.tensors())
    client.prompt_opt.lr *= cfg.local_lr_decay
    client.head_opt.lr *= cfg.local_lr_decay
    client.phases_done += 1
    ev = evaluate_client(client, "eval")
    client.last_mean_u = ev.mean_u
    client.last_eval_acc = ev.accuracy
    return client


def cross_evaluate(clients: list[ClientState], split: str = "test") -> np.ndarray:
    """Entry (i, j): accuracy on client i's split using client j's prompts and i's head."""
    T = len(clients)
    out = np.zeros((T, T))
    for i, ci in enumerate(clients):
        for j, cj in enumerate(clients):
            out[i, j] = evaluate_client(ci, split, prompts=cj.prompts).accuracy
    return out


class Federation:
    """Holds clients, server state and logs for one run."""

    def __init__(self, cfg: FedConfig, data: list[ClientData], bus: MessageBus | None = None):
        if len(data) != cfg.T:
            raise ConfigError(f"config T={cfg.T} but {len(data)} data partitions")
        self.cfg = cfg
        self.bus = bus if bus is not None else MessageBus(record=False)
        self.backbone = build_backbone(cfg.backbone_config())
        self.clients = [make_client(cfg, t, d, self.backbone) for t, d in enumerate(data)]
        self.server = DLUCState(WeightNet(cfg.T), mu=cfg.mu, lr=cfg.dluc_lr,
                                lr_decay=cfg.dluc_lr_decay,
                                equal_weights=cfg.weighting == "equal")
        self.logs: list[RoundLog] = []

    def _local_all(self) -> None:
        def work(c):
            return local_phase(c, self.cfg)

        try:
            if self.cfg.workers > 1:
                with ThreadPoolExecutor(self.cfg.workers) as pool:
                    list(pool.map(work, self.clients))
            else:
                for c in self.clients:
                    work(c)
        except Exception as exc:
            raise ProtocolError(f"local phase failed, round aborted: {exc}") from exc

    def run_round(self) -> RoundLog:
        start = time.perf_counter()
        r = len(self.logs)
        self._local_all()
        entries = []
        for c in self.clients:
            test = evaluate_client(c, "test")
            entries.append(ClientLog(c.client_id, test.accuracy, test.closed_acc, test.open_acc,
                                     c.last_mean_u, c.last_eval_acc))
        publishes = [self.bus.send(c.publish()) for c in self.clients]
        layout = self.clients[0].prompts
        distributed = communication_phase(self.server, publishes, self.clients, layout,
                                          self.cfg.step_c, self.bus)
        for msg in distributed:
            client = self.clients[msg.client_id]
            client.prompts = client.prompts.from_flat(
                _ordered_flat(client.prompts, msg.prompt_arrays()))
        log = RoundLog(r, entries, self.server.W.tolist(), list(self.server.objective_trace),
                       time.perf_counter() - start)
        self.logs.append(log)
        return log

    def run(self) -> list[RoundLog]:
        for _ in range(self.cfg.rounds):
            self.run_round()
        return self.logs

    def cross_evaluate(self, split: str = "test") -> np.ndarray:
        return cross_evaluate(self.clients, split)

    def trainable_count(self) -> int:
        return sum(c.trainable_count() for c in self.clients)


def _ordered_flat(layout: PromptSet, arrays: dict[str, np.ndarray]) -> np.ndarray:
    parts = [np.asarray(arrays[name], dtype=np.float64).ravel() for name in layout.named_arrays()]
    return np.concatenate(parts) if parts else np.zeros(0)


def run_federation(cfg: FedConfig, data: list[ClientData],
                   bus: MessageBus | None = None) -> list[RoundLog]:
    return Federation(cfg, data, bus).run()


def run_isolated(cfg: FedConfig, data: list[ClientData], t: int) -> list[ClientLog]:
    """Client ``t`` trained alone with the same seeds; one log entry per round."""
    backbone = build_backbone(cfg.backbone_config())
    client = make_client(cfg, t, data[t], backbone)
    out = []
    for _ in range(cfg.rounds):
        local_phase(client, cfg)
        test = evaluate_client(client, "test")
        out.append(ClientLog(t, test.accuracy, test.closed_acc, test.open_acc,
                             client.last_mean_u, client.last_eval_acc))
    return out


def run_pooled(cfg: FedConfig, data: list[ClientData]) -> list[RoundLog]:
    """One model on the union of all partitions, scored on each client's test split."""
    pooled = ClientData(data[0].spec,
                        VQABatch.concat(d.train for d in data),
                        VQABatch.concat(d.eval for d in data),
                        VQABatch.concat(d.test for d in data))
    backbone = build_backbone(cfg.backbone_config())
    model = make_client(cfg, 0, pooled, backbone)
    logs = []
    for r in range(cfg.rounds):
        start = time.perf_counter()
        local_phase(model, cfg)
        entries = []
        for t, d in enumerate(data):
            test = evaluate_client(model, d.test)
            ev = evaluate_client(model, d.eval)
            entries.append(ClientLog(t, test.accuracy, test.closed_acc, test.open_acc,
                                     ev.mean_u, ev.accuracy))
        logs.append(RoundLog(r, entries, [], [], time.perf_counter() - start))
    return logs


def final_accuracies(logs: list[RoundLog]) -> np.ndarray:
    return np.array([c.accuracy for c in logs[-1].clients])
