"""Multimodal failure diagnosis for microservice systems.

Alerts from metrics, traces and logs are embedded per instance, encoded by
one graph network per modality and fed to a root-cause ranker and a
failure-type classifier trained jointly with contrastive objectives.
"""

from ._accel import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
