"""Dual-branch transformer for VM performance degradation prediction.

Subpackages cover the full pipeline: trace data model and on-disk format
(`traceio`), synthetic labeled datasets (`synthgen`), normalization and
batching (`preprocess`), the tensor/autodiff core (`nncore`), the model
itself (`model`), training (`train`), comparison methods (`baselines`),
and the evaluation harness (`evalreport`). The `cli` module wires them
together behind one executable.
"""

__version__ = "0.1.0"
