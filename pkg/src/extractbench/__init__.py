"""Desk-scale workbench for mounting and measuring model extraction attacks.

Subsystems:
  tensor / network   float64 operator kernels and trainable operator DAGs
  zoo                architecture specs, model building, MAdd, checkpoints
  datasets           synthetic labeled data with a tunable difficulty knob
  query_attacks      query-based extraction and model inversion
  sidechannel        simulated kernel traces and cache-symbol fingerprinting
  similarity         fidelity, PWCCA, noise sensitivity, distillation
  orchestrator       scenarios, threat gating, scheduling, runs, reports
"""

__version__ = "0.1.0"
