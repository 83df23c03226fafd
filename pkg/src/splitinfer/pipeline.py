"""Operation phase: route test samples client/server, account accuracy and cost.

The server side is reachable either in-process or over a TCP transport
with 4-byte big-endian length-prefixed JSON frames. Elapsed time is
modeled, not measured: ``elapsed(f) = (1 - f) * t_client + f * t_server``
where f is the fraction of samples sent.
"""

from __future__ import annotations

import csv
import io
import json
import socket
import socketserver
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import Dataset, PosteriorVector, SplitInferError, argmax_class
from .decision_unit import DuConfig, MetaRecord, label_rule, route, train_du
from .fusion import Ensemble, ensemble_predict
from .gbdt import GbdtModel, predict_proba

MAX_FRAME_BYTES = 16 * 1024 * 1024


class TransportFailure(SplitInferError):
    """The socket transport failed mid-run."""


class RemotePredictionError(TransportFailure):
    """The server answered a request with an error frame."""


class BindFailure(SplitInferError):
    """The server endpoint could not be bound."""


@dataclass(frozen=True)
class CostModel:
    """Per-sample processing cost on each side, in seconds."""

    t_client: float = 0.308
    t_server: float = 2.51

    def __post_init__(self) -> None:
        if self.t_client <= 0 or self.t_server <= 0:
            raise ValueError("costs must be positive")

    def elapsed(self, fraction_sent: float) -> float:
        return (1.0 - fraction_sent) * self.t_client + fraction_sent * self.t_server


@dataclass(frozen=True)
class SweepRecord:
    """Metrics for one operating point."""

    epsilon: float
    fraction_sent: float
    accuracy: float
    tpr: float
    fpr: float
    elapsed_per_sample: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction_sent <= 1.0:
            raise ValueError("fraction_sent must be in [0, 1]")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    """Operation-phase settings.

    `transport` is "in-process" or "socket:HOST:PORT". With
    `fallback_on_failure` a failed remote call keeps the sample on the
    client instead of aborting the run.
    """

    comm_available: bool = True
    threshold: float = 0.5
    cost: CostModel = CostModel()
    seed: int = 0
    transport: str = "in-process"
    fallback_on_failure: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.transport != "in-process":
            self.endpoint()  # validates

    def endpoint(self) -> tuple[str, int]:
        parts = self.transport.split(":")
        if len(parts) != 3 or parts[0] != "socket" or not parts[1]:
            raise ValueError(f"bad transport {self.transport!r}; use 'socket:HOST:PORT'")
        try:
            port = int(parts[2])
        except ValueError:
            raise ValueError(f"bad port in transport {self.transport!r}") from None
        if not 0 < port < 65536:
            raise ValueError(f"bad port in transport {self.transport!r}")
        return parts[1], port


@dataclass(frozen=True)
class SampleOutcome:
    """Everything observed for one test sample during a run."""

    sample_id: str
    true_label: int
    embedded_class: int
    embedded_probs: PosteriorVector
    du_score: float
    sent: bool
    final_class: int
    networked_class: Optional[int] = None
    networked_probs: Optional[PosteriorVector] = None


def _send_frame(sock: socket.socket, payload: dict) -> None:
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    sock.sendall(len(body).to_bytes(4, "big") + body)


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(n - got)
        if not part:
            raise TransportFailure("connection closed mid-frame")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> dict:
    header = _recv_exactly(sock, 4)
    length = int.from_bytes(header, "big")
    if length > MAX_FRAME_BYTES:
        raise TransportFailure(f"frame of {length} bytes exceeds limit")
    body = _recv_exactly(sock, length)
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TransportFailure(f"undecodable response frame: {exc}") from exc


class SocketLink:
    """Client end of the prediction wire protocol."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportFailure(f"cannot connect to {host}:{port}: {exc}") from exc

    def predict(self, sample_id: str, features: Sequence[float]) -> tuple[tuple[float, ...], int]:
        try:
            _send_frame(self._sock, {"op": "predict", "id": sample_id, "features": list(features)})
            reply = _recv_frame(self._sock)
        except OSError as exc:
            raise TransportFailure(str(exc)) from exc
        if "error" in reply:
            raise RemotePredictionError(f"id {sample_id!r}: {reply['error']}")
        return tuple(float(p) for p in reply["probs"]), int(reply["class"])

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "SocketLink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class InProcessLink:
    """Transport-free server link used for in-process runs."""

    def __init__(self, ensemble: Ensemble):
        self._ensemble = ensemble

    def predict(self, sample_id: str, features: Sequence[float]) -> tuple[tuple[float, ...], int]:
        from .core import Sample

        probs, cls = ensemble_predict(self._ensemble, Sample(sample_id, tuple(features)))
        return probs.probs, cls

    def close(self) -> None:
        pass


def make_link(cfg: RunConfig, ensemble: Optional[Ensemble]) -> Union[InProcessLink, SocketLink]:
    if cfg.transport == "in-process":
        if ensemble is None:
            raise ValueError("in-process transport needs an ensemble")
        return InProcessLink(ensemble)
    host, port = cfg.endpoint()
    return SocketLink(host, port)


class _PredictionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock = self.request
        while True:
            try:
                header = _recv_exactly(sock, 4)
            except TransportFailure:
                return  # client closed between frames
            length = int.from_bytes(header, "big")
            if length > MAX_FRAME_BYTES:
                _send_frame(sock, {"id": "", "error": f"frame of {length} bytes exceeds limit"})
                return
            try:
                body = _recv_exactly(sock, length)
            except TransportFailure:
                return
            reply = self._answer(body)
            try:
                _send_frame(sock, reply)
            except OSError:
                return

    def _answer(self, body: bytes) -> dict:
        try:
            request = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return {"id": "", "error": f"malformed frame: {exc}"}
        if not isinstance(request, dict):
            return {"id": "", "error": "malformed frame: payload is not an object"}
        sample_id = request.get("id", "")
        if request.get("op") != "predict":
            return {"id": sample_id, "error": f"unknown op {request.get('op')!r}"}
        features = request.get("features")
        if not isinstance(features, list):
            return {"id": sample_id, "error": "missing features list"}
        from .core import Sample

        try:
            probs, cls = ensemble_predict(
                self.server.ensemble, Sample(str(sample_id), tuple(float(v) for v in features))
            )
        except (SplitInferError, ValueError, TypeError) as exc:
            return {"id": sample_id, "error": f"{type(exc).__name__}: {exc}"}
        return {"id": sample_id, "probs": list(probs.probs), "class": cls}


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], ensemble: Ensemble):
        super().__init__(address, _PredictionHandler)
        self.ensemble = ensemble


@dataclass
class ServerHandle:
    """A running prediction server; close() shuts it down."""

    host: str
    port: int
    _server: _Server
    _thread: threading.Thread

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve_ensemble(ensemble: Ensemble, host: str = "127.0.0.1", port: int = 0) -> ServerHandle:
    """Start answering prediction requests on a background thread.

    Port 0 binds an ephemeral port; the handle reports the resolved one.
    """
    try:
        server = _Server((host, port), ensemble)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    bound_host, bound_port = server.server_address[:2]
    return ServerHandle(host=bound_host, port=bound_port, _server=server, _thread=thread)


def run_split(
    test: Dataset,
    embedded: GbdtModel,
    du: GbdtModel,
    ensemble: Optional[Ensemble],
    cfg: RunConfig,
    epsilon_label: float = float("nan"),
) -> tuple[list[SampleOutcome], SweepRecord]:
    """Route every test sample and account accuracy, rates, and modeled cost.

    When communication is available the server is also queried for kept
    samples so routing quality (TPR/FPR against the ideal keep/send labels)
    can be reported; those bookkeeping queries do not count as sends. With
    communication off the server is never contacted and both rates are 0.
    """
    if not test.labeled:
        raise ValueError("test dataset must be labeled")
    link = make_link(cfg, ensemble) if cfg.comm_available else None
    outcomes: list[SampleOutcome] = []
    try:
        for sample in test.samples:
            probs = predict_proba(embedded, sample)
            emb_class = argmax_class(probs)
            decision = route(du, probs, cfg.comm_available, cfg.threshold)
            net_probs: Optional[PosteriorVector] = None
            net_class: Optional[int] = None
            sent = decision.send
            if link is not None:
                try:
                    raw, net_class = link.predict(sample.id, sample.features)
                    net_probs = PosteriorVector(raw)
                except TransportFailure:
                    if cfg.fallback_on_failure:
                        sent = False
                        net_class = None
                    else:
                        raise
            final = net_class if (sent and net_class is not None) else emb_class
            outcomes.append(
                SampleOutcome(
                    sample_id=sample.id,
                    true_label=int(sample.label),  # type: ignore[arg-type]
                    embedded_class=emb_class,
                    embedded_probs=probs,
                    du_score=decision.du_score,
                    sent=sent,
                    final_class=final,
                    networked_class=net_class,
                    networked_probs=net_probs,
                )
            )
    finally:
        if link is not None:
            link.close()

    n = len(outcomes)
    sent_count = sum(1 for o in outcomes if o.sent)
    fraction = sent_count / n
    accuracy = sum(1 for o in outcomes if o.final_class == o.true_label) / n
    tp = fp = pos = neg = 0
    for o in outcomes:
        if o.networked_class is None:
            continue
        should_send = label_rule(o.embedded_class, o.networked_class, o.true_label)
        if should_send:
            pos += 1
            tp += o.sent
        else:
            neg += 1
            fp += o.sent
    record = SweepRecord(
        epsilon=epsilon_label,
        fraction_sent=fraction,
        accuracy=accuracy,
        tpr=tp / pos if pos else 0.0,
        fpr=fp / neg if neg else 0.0,
        elapsed_per_sample=cfg.cost.elapsed(fraction),
    )
    return outcomes, record


def epsilon_sweep(
    eps_grid: Sequence[float],
    meta_records: Sequence[MetaRecord],
    test: Dataset,
    embedded: GbdtModel,
    ensemble: Optional[Ensemble],
    du_cfg: DuConfig,
    run_cfg: RunConfig,
) -> list[SweepRecord]:
    """Retrain the routing classifier per epsilon and run each operating point.

    Meta records are generated once by the caller; every point reuses them
    and the same training seed, so the sweep isolates the effect of epsilon.
    """
    if not eps_grid:
        raise ValueError("epsilon grid must be non-empty")
    records = []
    for eps in eps_grid:
        du = train_du(meta_records, replace(du_cfg, epsilon=float(eps)))
        _, record = run_split(
            test, embedded, du, ensemble, run_cfg, epsilon_label=float(eps)
        )
        records.append(record)
    return records


@dataclass(frozen=True)
class BaselineResult:
    fraction: float
    mean_accuracy: float
    stddev: float
    trials: int


def random_baseline(
    test: Dataset,
    embedded: GbdtModel,
    ensemble: Ensemble,
    fraction: float,
    trials: int = 100,
    seed: int = 0,
) -> BaselineResult:
    """Accuracy of routing a uniformly random fraction of samples to the server.

    Each trial sends round(fraction * n) distinct samples; reports the mean
    and population standard deviation over trials.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not test.labeled:
        raise ValueError("test dataset must be labeled")
    n = len(test)
    emb = np.array([argmax_class(predict_proba(embedded, s)) for s in test.samples])
    net = np.array([ensemble_predict(ensemble, s)[1] for s in test.samples])
    truth = test.labels_array()
    k = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    accs = np.empty(trials)
    for t in range(trials):
        chosen = rng.choice(n, size=k, replace=False)
        final = emb.copy()
        final[chosen] = net[chosen]
        accs[t] = float(np.mean(final == truth))
    return BaselineResult(
        fraction=fraction,
        mean_accuracy=float(accs.mean()),
        stddev=float(accs.std()),
        trials=trials,
    )


REPORT_COLUMNS = ("epsilon", "fraction_sent", "accuracy", "tpr", "fpr", "elapsed_per_sample")


def report(records: Sequence[SweepRecord]) -> str:
    """Render sweep records as CSV with a fixed column order."""
    if not records:
        raise ValueError("no records to report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in records:
        writer.writerow(
            [
                repr(r.epsilon),
                repr(r.fraction_sent),
                repr(r.accuracy),
                repr(r.tpr),
                repr(r.fpr),
                repr(r.elapsed_per_sample),
            ]
        )
    return buf.getvalue()


def write_report(records: Sequence[SweepRecord], path: Union[str, Path]) -> None:
    Path(path).write_text(report(records), encoding="utf-8")


def parse_report(source: Union[str, Path]) -> list[SweepRecord]:
    """Parse a report CSV (path or literal text) back into records."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text(
        encoding="utf-8"
    )
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != list(REPORT_COLUMNS):
        raise SplitInferError(f"bad report header {header!r}")
    records = []
    for row in reader:
        if len(row) != len(REPORT_COLUMNS):
            raise SplitInferError(f"bad report row {row!r}")
        records.append(SweepRecord(*(float(v) for v in row)))
    return records


def summarize(records: Sequence[SweepRecord]) -> str:
    """Human-readable digest of a sweep."""
    if not records:
        return "no records"
    best = max(records, key=lambda r: r.accuracy)
    lines = [
        f"{len(records)} operating points",
        f"fraction sent spans [{min(r.fraction_sent for r in records):.3f}, "
        f"{max(r.fraction_sent for r in records):.3f}]",
        f"accuracy spans [{min(r.accuracy for r in records):.4f}, "
        f"{max(r.accuracy for r in records):.4f}]",
        f"best accuracy {best.accuracy:.4f} at epsilon {best.epsilon:g} "
        f"(sent {best.fraction_sent:.3f}, {best.elapsed_per_sample:.3f} s/sample)",
    ]
    return "\n".join(lines)
