"""Server and client state machines for synchronous FedAvg rounds, and their drivers.

A round is: the server broadcasts the global parameters, every node trains
locally for ``local_epochs`` epochs and reports its parameters with its
sample count, and the server replaces the global model by their FedAvg.

Seeds: the global model is built from ``Rng(seed)``. Node ``i`` shuffles and
trains with ``Rng(splitmix64(seed ^ i))`` unless the node is given an
explicit seed ``s``, in which case ``Rng(splitmix64(s))`` is used. The
centralized baseline uses the node-0 derivation, so a one-node federation
and ``train_local`` consume identical random streams.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .errors import AlignmentError, ProtocolError, RoundTimeout, TransportError, UsageError
from .federation import FedConfig, FedMessage, Kind, decode, diff_norm, encode, fedavg
from .params import ParameterSet
from .tensor import MASK64, Rng, splitmix64
from .transport import Connection, InProcListener, Mailbox, TcpListener, tcp_connect
from .unet import UNet, UNetConfig, train_step

log = logging.getLogger(__name__)

LOSS_ENTRY = "_meta.mean_loss"


def node_seed(seed: int, node_id: int, explicit: int | None = None) -> int:
    if explicit is not None:
        return splitmix64(explicit & MASK64)
    return splitmix64((seed ^ node_id) & MASK64)


def batches(order, batch_size):
    """Split an index order into batches; a trailing batch of one is dropped."""
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if out and len(out[-1]) < 2:
        log.warning("dropping trailing batch of 1 sample (batch-norm needs 2)")
        out.pop()
    return out


class LocalTrainer:
    """A node's model copy, optimizer state and data-order stream.

    Adam state persists across rounds; only parameters are replaced when a
    new global model arrives.
    """

    def __init__(self, model_config: UNetConfig, dataset: Dataset, fed: FedConfig, seed: int,
                 dtype=np.float32):
        if len(dataset) == 0:
            raise UsageError("a node needs a non-empty dataset")
        model_config.check_input(*dataset.image_shape[1:])
        self.model_config = model_config
        self.images = dataset.images().astype(dtype)
        self.masks = dataset.masks().astype(dtype)
        self.fed = fed
        self.rng = Rng(seed)
        self.state = nn.AdamState(lr=fed.lr)
        self.steps = 0

    def __len__(self):
        return len(self.images)

    def fit(self, params: ParameterSet, epochs: int):
        """Train from ``params``; returns ``(new_params, mean_loss)``."""
        model = UNet(self.model_config, params)
        losses = []
        for _ in range(epochs):
            for b in batches(self.rng.permutation(len(self.images)), self.fed.batch_size):
                loss, model, self.state = train_step(model, self.images[b], self.masks[b],
                                                     self.state)
                losses.append(loss)
                self.steps += 1
        return model.params, float(np.mean(losses)) if losses else float("nan")


# --- state machines ------------------------------------------------------------


class ServerPhase(enum.Enum):
    INIT = "init"
    BROADCAST = "broadcast"
    COLLECT = "collect"
    AGGREGATE = "aggregate"
    DONE = "done"


@dataclass
class RoundState:
    round: int
    expected: list
    received: dict = field(default_factory=dict)  # node_id -> (params, count, loss)

    def missing(self):
        return [n for n in self.expected if n not in self.received]


class ServerMachine:
    """Init -> (Broadcast -> Collect -> Aggregate) x rounds -> Done."""

    def __init__(self, fed: FedConfig, initial: ParameterSet):
        self.fed = fed
        self.global_params = initial
        self.phase = ServerPhase.INIT
        self.counts = {}  # node_id -> sample count announced in HELLO
        self.round = 0
        self.current: RoundState | None = None
        self.log = []
        self._t0 = None

    @property
    def registered(self):
        return len(self.counts) == self.fed.nodes

    def expected_ids(self):
        return list(range(self.fed.nodes))

    def on_hello(self, msg: FedMessage):
        if self.phase != ServerPhase.INIT:
            raise ProtocolError(f"HELLO from node {msg.node_id} after registration closed")
        if msg.kind != Kind.HELLO:
            raise ProtocolError(f"expected HELLO, got {msg.kind.name} from node {msg.node_id}")
        if msg.node_id not in self.expected_ids():
            raise ProtocolError(f"unknown node id {msg.node_id}")
        if msg.node_id in self.counts:
            raise ProtocolError(f"node {msg.node_id} registered twice")
        self.counts[msg.node_id] = msg.sample_count

    def broadcast(self):
        """Open the next round; returns the GLOBAL_MODEL message for each node id."""
        if self.phase not in (ServerPhase.INIT, ServerPhase.AGGREGATE) or not self.registered:
            raise UsageError(f"cannot broadcast in phase {self.phase.value}")
        self.round += 1
        self.phase = ServerPhase.BROADCAST
        self.current = RoundState(self.round, self.expected_ids())
        out = [(n, FedMessage(Kind.GLOBAL_MODEL, self.round, n, 0, self.global_params))
               for n in self.expected_ids()]
        self.phase = ServerPhase.COLLECT
        self._t0 = time.perf_counter()
        return out

    def on_update(self, msg: FedMessage):
        """Record one LOCAL_UPDATE; aggregates and returns the round record once all arrived."""
        if msg.kind == Kind.ERROR:
            raise ProtocolError(f"node {msg.node_id} reported an error: {msg.error_text}")
        if self.phase != ServerPhase.COLLECT:
            raise ProtocolError(f"{msg.kind.name} from node {msg.node_id} outside collection")
        if msg.kind != Kind.LOCAL_UPDATE:
            raise ProtocolError(f"expected LOCAL_UPDATE, got {msg.kind.name} from node {msg.node_id}")
        if msg.round != self.round:
            raise ProtocolError(
                f"node {msg.node_id} answered round {msg.round} during round {self.round}")
        if msg.node_id not in self.current.expected:
            raise ProtocolError(f"update from unregistered node {msg.node_id}")
        if msg.node_id in self.current.received:
            raise ProtocolError(f"node {msg.node_id} reported twice in round {self.round}")
        params, loss = split_loss(msg.params)
        try:
            self.global_params.check_aligned(params)
        except AlignmentError as e:
            raise ProtocolError(f"node {msg.node_id} sent misaligned parameters: {e}") from e
        self.current.received[msg.node_id] = (params, msg.sample_count, loss)
        if self.current.missing():
            return None
        return self._aggregate()

    def _aggregate(self):
        self.phase = ServerPhase.AGGREGATE
        ids = sorted(self.current.received)
        updates = [self.current.received[n][:2] for n in ids]
        new = fedavg(updates, self.fed.weighting)
        record = {
            "round": self.round,
            "node_losses": {str(n): self.current.received[n][2] for n in ids},
            "sample_counts": {str(n): int(self.current.received[n][1]) for n in ids},
            "global_diff_norm": diff_norm(new, self.global_params),
            "wall_ms": round((time.perf_counter() - self._t0) * 1000.0, 3),
        }
        self.global_params = new
        self.log.append(record)
        if self.round == self.fed.rounds:
            self.phase = ServerPhase.DONE
        return record

    def done_messages(self):
        return [(n, FedMessage(Kind.DONE, self.round, n)) for n in self.expected_ids()]


class ClientPhase(enum.Enum):
    HELLO = "hello"
    AWAIT_MODEL = "await_model"
    TRAIN = "train"
    REPORT = "report"
    DONE = "done"


class ClientMachine:
    def __init__(self, node_id: int, trainer: LocalTrainer):
        self.node_id = node_id
        self.trainer = trainer
        self.phase = ClientPhase.HELLO
        self.rounds_done = 0

    def hello(self) -> FedMessage:
        if self.phase != ClientPhase.HELLO:
            raise UsageError("HELLO already sent")
        self.phase = ClientPhase.AWAIT_MODEL
        return FedMessage(Kind.HELLO, 0, self.node_id, len(self.trainer))

    def handle(self, msg: FedMessage) -> FedMessage | None:
        if msg.kind == Kind.DONE:
            self.phase = ClientPhase.DONE
            return None
        if msg.kind == Kind.ERROR:
            self.phase = ClientPhase.DONE
            raise ProtocolError(f"server aborted: {msg.error_text}")
        if msg.kind != Kind.GLOBAL_MODEL or self.phase != ClientPhase.AWAIT_MODEL:
            raise ProtocolError(f"node {self.node_id}: unexpected {msg.kind.name} "
                                f"in phase {self.phase.value}")
        self.phase = ClientPhase.TRAIN
        params, loss = self.trainer.fit(msg.params, self.trainer.fed.local_epochs)
        self.phase = ClientPhase.REPORT
        reply = FedMessage(Kind.LOCAL_UPDATE, msg.round, self.node_id, len(self.trainer),
                           attach_loss(params, loss))
        self.rounds_done += 1
        self.phase = ClientPhase.AWAIT_MODEL
        return reply


def attach_loss(params: ParameterSet, loss: float) -> ParameterSet:
    return ParameterSet(list(params.items()) + [(LOSS_ENTRY, np.array([loss], dtype=np.float64))])


def split_loss(params: ParameterSet):
    if LOSS_ENTRY not in params:
        return params, None
    loss = float(params[LOSS_ENTRY][0])
    return ParameterSet((n, t) for n, t in params.items() if n != LOSS_ENTRY), loss


# --- round bookkeeping -------------------------------------------------------------


class RoundWriter:
    """Writes ``round_<k>.fdlc`` and appends to ``round_log.jsonl`` as rounds finish."""

    def __init__(self, output_dir=None, on_round=None):
        self.dir = Path(output_dir) if output_dir is not None else None
        self.on_round = on_round
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "round_log.jsonl").write_text("")

    def __call__(self, record, params):
        if self.on_round is not None:
            extra = self.on_round(record["round"], params)
            if extra:
                record.update(extra)
        log.info("round %d: diff_norm=%.6g losses=%s", record["round"],
                 record["global_diff_norm"], record["node_losses"])
        if self.dir is None:
            return
        params.save(self.dir / f"round_{record['round']}.fdlc")
        with open(self.dir / "round_log.jsonl", "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RunResult:
    params: ParameterSet
    log: list


# --- drivers ---------------------------------------------------------------------


def run_server(fed: FedConfig, listener, initial: ParameterSet, output_dir=None,
               on_round=None) -> RunResult:
    """Drive the server over real connections until all rounds are aggregated.

    Raises ``RoundTimeout`` when a node is silent for ``fed.timeout_s`` within
    a round (round 0 is registration) and ``ProtocolError`` on any protocol
    violation; in both cases connected clients receive an ERROR first.
    """
    machine = ServerMachine(fed, initial)
    writer = RoundWriter(output_dir, on_round)
    mailbox = Mailbox()
    conns: dict = {}
    pending = []
    try:
        deadline = time.monotonic() + fed.timeout_s
        for i in range(fed.nodes):
            remaining = deadline - time.monotonic()
            try:
                conn = listener.accept(timeout=max(remaining, 0.001))
            except TimeoutError:
                raise RoundTimeout(0, [n for n in machine.expected_ids() if n >= i]) from None
            pending.append(conn)
            mailbox.attach(conn, conn)
        while not machine.registered:
            conn, msg = mailbox.get(deadline, 0,
                                    [n for n in machine.expected_ids() if n not in machine.counts])
            if isinstance(msg, Exception):
                raise msg
            machine.on_hello(msg)
            conns[msg.node_id] = conn
        for _ in range(fed.rounds):
            for node_id, msg in machine.broadcast():
                conns[node_id].send(msg)
            deadline = time.monotonic() + fed.timeout_s
            record = None
            while record is None:
                conn, msg = mailbox.get(deadline, machine.round, machine.current.missing())
                if isinstance(msg, Exception):
                    raise msg
                expected_conn = conns.get(msg.node_id)
                if expected_conn is not conn and msg.kind != Kind.ERROR:
                    raise ProtocolError(f"node id {msg.node_id} sent on another node's connection")
                record = machine.on_update(msg)
            writer(record, machine.global_params)
        for node_id, msg in machine.done_messages():
            conns[node_id].send(msg)
        return RunResult(machine.global_params, machine.log)
    except (ProtocolError, RoundTimeout, TransportError) as e:
        for conn in pending:
            try:
                conn.send(FedMessage(Kind.ERROR, machine.round, 0, error_text=str(e)))
            except Exception:  # noqa: BLE001  best effort, peer may be gone
                pass
        raise
    finally:
        for conn in pending:
            conn.close()


def run_client(node_id: int, dataset: Dataset, fed: FedConfig, model_config: UNetConfig,
               connect, seed: int | None = None, dtype=np.float32) -> int:
    """Run one node until DONE; ``connect()`` returns a ``Connection``.

    Returns the number of rounds trained.
    """
    trainer = LocalTrainer(model_config, dataset, fed, node_seed(fed.seed, node_id, seed), dtype)
    machine = ClientMachine(node_id, trainer)
    conn: Connection = connect()
    try:
        conn.send(machine.hello())
        while machine.phase != ClientPhase.DONE:
            try:
                msg = conn.recv(timeout=fed.timeout_s * max(fed.nodes, 1))
            except TimeoutError:
                raise RoundTimeout(machine.rounds_done + 1, [node_id]) from None
            reply = machine.handle(msg)
            if reply is not None:
                conn.send(reply)
        return machine.rounds_done
    finally:
        conn.close()


def build_initial(model_config: UNetConfig, seed: int, dtype=np.float32) -> UNet:
    return UNet.build(model_config, Rng(seed), dtype)


def simulate(model_config: UNetConfig, fed: FedConfig, datasets, node_seeds=None,
             mode="reference", output_dir=None, on_round=None, dtype=np.float32,
             host="127.0.0.1", port=0) -> RunResult:
    """Run a whole federation in one process.

    ``mode`` is ``"reference"`` (single thread, clients stepped in node-id
    order), ``"concurrent"`` (clients on threads over in-process channels) or
    ``"tcp"`` (clients on threads over loopback sockets). All three produce
    bit-identical results for the same seeds.
    """
    if len(datasets) != fed.nodes:
        raise UsageError(f"federation expects {fed.nodes} node(s), got {len(datasets)} dataset(s)")
    node_seeds = list(node_seeds) if node_seeds is not None else [None] * len(datasets)
    initial = build_initial(model_config, fed.seed, dtype).params
    if mode == "reference":
        return _simulate_reference(model_config, fed, datasets, node_seeds, initial,
                                   output_dir, on_round, dtype)
    if mode == "concurrent":
        listener = InProcListener()
        connect = listener.connect
    elif mode == "tcp":
        listener = TcpListener(host, port)
        host, port = listener.address
        def connect():
            return tcp_connect(host, port, fed.retries)
    else:
        raise UsageError(f"unknown simulate mode {mode!r}")
    errors = []

    def client(i):
        try:
            run_client(i, datasets[i], fed, model_config, connect, node_seeds[i], dtype)
        except Exception as e:  # noqa: BLE001  surfaced through the server or re-raised below
            errors.append(e)

    threads = [threading.Thread(target=client, args=(i,), daemon=True) for i in range(fed.nodes)]
    for t in threads:
        t.start()
    try:
        result = run_server(fed, listener, initial, output_dir, on_round)
    finally:
        listener.close()
    for t in threads:
        t.join(timeout=fed.timeout_s)
    if errors:
        raise errors[0]
    return result


def _wire(msg):
    return decode(encode(msg))


def _simulate_reference(model_config, fed, datasets, node_seeds, initial, output_dir, on_round,
                        dtype):
    server = ServerMachine(fed, initial)
    writer = RoundWriter(output_dir, on_round)
    clients = [ClientMachine(i, LocalTrainer(model_config, ds, fed,
                                             node_seed(fed.seed, i, node_seeds[i]), dtype))
               for i, ds in enumerate(datasets)]
    for c in clients:
        server.on_hello(_wire(c.hello()))
    for _ in range(fed.rounds):
        record = None
        for node_id, msg in server.broadcast():
            reply = clients[node_id].handle(_wire(msg))
            record = server.on_update(_wire(reply))
        writer(record, server.global_params)
    for node_id, msg in server.done_messages():
        clients[node_id].handle(_wire(msg))
    return RunResult(server.global_params, server.log)


def pooled(datasets) -> Dataset:
    samples = [s for ds in datasets for s in ds.samples]
    name = "+".join(ds.domain for ds in datasets)
    return Dataset(name, samples, datasets[0].split if datasets else "train")


def train_local(model_config: UNetConfig, fed: FedConfig, datasets, output_dir=None,
                dtype=np.float32) -> RunResult:
    """Centralized baseline: all node data pooled, ``rounds * local_epochs`` epochs.

    Uses the same initial model and the node-0 random stream as ``simulate``;
    one checkpoint and log record per ``local_epochs`` block of epochs.
    """
    data = pooled(datasets)
    params = build_initial(model_config, fed.seed, dtype).params
    trainer = LocalTrainer(model_config, data, fed, node_seed(fed.seed, 0), dtype)
    writer = RoundWriter(output_dir)
    log_records = []
    for r in range(1, fed.rounds + 1):
        t0 = time.perf_counter()
        new, loss = trainer.fit(params, fed.local_epochs)
        record = {"round": r, "node_losses": {"0": loss}, "sample_counts": {"0": len(trainer)},
                  "global_diff_norm": diff_norm(new, params),
                  "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
        params = new
        log_records.append(record)
        writer(record, params)
    return RunResult(params, log_records)
