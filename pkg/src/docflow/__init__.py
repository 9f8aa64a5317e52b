"""docflow: a three-service document-understanding pipeline (gateway, worker,
inference) with simulated model backends, plus a batch profiler.

Module map:

- ``domain``         core types, document status machine
- ``config``         pipeline configuration (YAML) parsing and validation
- ``mqueue``         in-process message queue with visibility-timeout leases
- ``store``          filesystem blob store + tracking store + step checkpoints
- ``worldgen``       synthetic corpus generator and stochastic backend samplers
- ``inference``      capacity-limited inference service (clip/vlm/ocr/detect/parse)
- ``worker``         pipeline orchestration pods with checkpoint/resume
- ``gateway``        ingestion + status service
- ``profiler``       concurrency sweeps, metrics, bottleneck classification
- ``runtime``        wiring helpers that assemble a full system
"""

__version__ = "0.1.0"
