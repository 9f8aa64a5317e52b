"""System wiring: build the three services plus queues, stores and samplers
from one PipelineConfig, start/stop worker pods, and drive batches to
quiescence. Used by the profiler, the CLI and the test suites.
"""

from __future__ import annotations

import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .clocks import Clock, WallClock
from .config import PipelineConfig
from .events import EventLog
from .gateway import GatewayService, IngestFaults, Submission
from .inference import InferenceClient, InferenceService, InProcessInferenceClient
from .mqueue import MessageQueue
from .store import BlobStore, TrackingStore
from .worker import FaultHooks, OwnershipProbe, StaleSweeper, WorkerPod
from .worldgen import (
    CalibrationSet,
    GeneratedDocument,
    analytic_p99_doc_seconds,
    default_calibration,
)


class QuiescenceTimeout(Exception):
    def __init__(self, message: str, pending: list[str]) -> None:
        super().__init__(message)
        self.pending = pending


def resolve_stale_threshold(config: PipelineConfig, calibration: CalibrationSet) -> float:
    """Config value, or 2x the analytic P99 document time when set to auto."""
    if config.stale_threshold > 0:
        return config.stale_threshold
    doc_type = config.default_doc_type
    p99 = analytic_p99_doc_seconds(calibration, config.steps_for(doc_type), pages=8)
    return 2.0 * p99


@dataclass
class System:
    config: PipelineConfig
    seed: int
    time_scale: float
    root: Path
    clock: Clock
    calibration: CalibrationSet
    blobs: BlobStore
    tracking: TrackingStore
    worker_queue: MessageQueue
    status_queue: MessageQueue
    ingestion_queue: MessageQueue
    event_log: EventLog
    inference: InferenceService
    inference_client: InferenceClient
    gateway: GatewayService
    ownership_probe: OwnershipProbe
    stale_threshold: float
    pods: list[WorkerPod] = field(default_factory=list)
    _tmp: Optional[tempfile.TemporaryDirectory] = None

    # -- pods ----------------------------------------------------------------

    def start_pods(
        self,
        total_tasks: Optional[int] = None,
        fault_hooks: Optional[FaultHooks] = None,
        poll_wait: float = 0.02,
    ) -> list[WorkerPod]:
        """Start pods covering *total_tasks* concurrent executors
        (pods x tasks_per_pod, last pod possibly partial)."""
        if total_tasks is None:
            total_tasks = self.config.pods * self.config.tasks_per_pod
        per_pod = self.config.tasks_per_pod
        sizes = []
        left = total_tasks
        while left > 0:
            sizes.append(min(per_pod, left))
            left -= sizes[-1]
        for i, size in enumerate(sizes):
            pod = WorkerPod(
                pod_id=f"pod-{i}",
                worker_queue=self.worker_queue,
                status_queue=self.status_queue,
                tracking=self.tracking,
                inference=self.inference_client,
                config=self.config,
                event_log=self.event_log,
                seed=self.seed,
                time_scale=self.time_scale,
                clock=self.clock,
                tasks=size,
                fault_hooks=fault_hooks,
                ownership_probe=self.ownership_probe,
                calibration=self.calibration,
                poll_wait=poll_wait,
            )
            pod.start()
            self.pods.append(pod)
        return self.pods

    def stop_pods(self) -> None:
        for pod in self.pods:
            pod.stop()
        self.pods = []

    def stale_sweeper(self) -> StaleSweeper:
        return StaleSweeper(
            self.tracking,
            self.stale_threshold * self.time_scale,
            self.event_log,
            self.clock,
        )

    # -- batch driving -----------------------------------------------------------

    def submit_corpus(self, corpus: Sequence[GeneratedDocument]) -> list[str]:
        ids = []
        for gd in corpus:
            submission = Submission(
                pages=[page.payload() for page in gd.pages],
                doc_type=gd.document.doc_type,
                document_id=gd.document.id,
            )
            ids.append(self.gateway.submit(submission))
        return ids

    def wait_quiescent(
        self,
        document_ids: Sequence[str],
        timeout: float = 300.0,
        poll: float = 0.02,
    ) -> None:
        """Block until every document is terminal and the queues are empty."""
        deadline = time.monotonic() + timeout
        ids = list(document_ids)
        while True:
            pending = [
                i for i in ids if not self.tracking.get(i).status.terminal
            ]
            if not pending:
                depth = self.worker_queue.depth()
                if depth.visible == 0 and depth.in_flight == 0:
                    return
            if time.monotonic() > deadline:
                raise QuiescenceTimeout(
                    f"{len(pending)} documents still pending after {timeout}s", pending
                )
            time.sleep(poll)

    def shutdown(self) -> None:
        self.stop_pods()
        self.gateway.stop()
        self.worker_queue.close()
        self.status_queue.close()
        self.ingestion_queue.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


def build_system(
    config: PipelineConfig,
    seed: Optional[int] = None,
    time_scale: Optional[float] = None,
    root: Optional[str | Path] = None,
    clock: Optional[Clock] = None,
    gpu_slots: Optional[int] = None,
    api_concurrency: Optional[int] = None,
    inference_client: Optional[InferenceClient] = None,
    ingest_faults: Optional[IngestFaults] = None,
    start_gateway: bool = True,
) -> System:
    """Assemble a full system on a fresh store root.

    The inference client defaults to the in-process transport; pass an
    ``HttpInferenceClient`` to run workers against the HTTP surface instead.
    """
    seed = config.seed if seed is None else seed
    time_scale = config.time_scale if time_scale is None else time_scale
    clock = clock or WallClock()
    tmp = None
    if root is None:
        tmp = tempfile.TemporaryDirectory(prefix="docflow-")
        root = tmp.name
    root = Path(root)

    calibration = default_calibration(
        config.profile_overrides or None, config.confidence_model
    )
    blobs = BlobStore(root)
    tracking = TrackingStore(root, blobs, clock=clock)
    event_log = EventLog(clock=clock)
    worker_queue = MessageQueue("worker", clock=clock, max_delivery=config.max_delivery)
    status_queue = MessageQueue("status", clock=clock)
    ingestion_queue = MessageQueue("ingestion", clock=clock)

    inference = InferenceService(
        blobs=blobs,
        calibration=calibration,
        labels=config.labels(),
        seed=seed,
        time_scale=time_scale,
        gpu_slots=gpu_slots if gpu_slots is not None else config.gpu_slots,
        api_concurrency=(
            api_concurrency if api_concurrency is not None else config.api_concurrency
        ),
        clock=clock,
        clip_confidence_threshold=config.clip_confidence_threshold,
        malformed_output_rate=config.malformed_output_rate,
        queue_cap=config.inference_queue_cap,
    )
    gateway = GatewayService(
        tracking=tracking,
        worker_queue=worker_queue,
        status_queue=status_queue,
        ingestion_queue=ingestion_queue,
        config=config,
        event_log=event_log,
        clock=clock,
        time_scale=time_scale,
        faults=ingest_faults,
    )
    if start_gateway:
        gateway.start()

    system = System(
        config=config,
        seed=seed,
        time_scale=time_scale,
        root=root,
        clock=clock,
        calibration=calibration,
        blobs=blobs,
        tracking=tracking,
        worker_queue=worker_queue,
        status_queue=status_queue,
        ingestion_queue=ingestion_queue,
        event_log=event_log,
        inference=inference,
        inference_client=inference_client or InProcessInferenceClient(inference),
        gateway=gateway,
        ownership_probe=OwnershipProbe(clock),
        stale_threshold=resolve_stale_threshold(config, calibration),
        _tmp=tmp,
    )
    return system
