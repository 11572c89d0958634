"""annolab: a self-hostable human-in-the-loop annotation backend.

A REST service with a model registry, correction-dataset uploads,
resource-classed task queues, distributable plugin-hosting workers, and
reference plugins for speaker diarization and OCR post-correction.
"""

__version__ = "0.1.0"
