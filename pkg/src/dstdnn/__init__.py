"""Dual-stream TDNN speaker embeddings with dynamic global filters.

Submodules: ``frontend`` (audio, features, synthetic corpus), ``spectral``
and ``dynamic`` (global filter layers), ``network``, ``training``,
``backend`` (scoring and metrics), ``filters`` and ``bench`` (analysis),
``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
