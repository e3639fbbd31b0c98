"""Far-field meeting transcription toolkit.

Continuous speech separation, mask-based MVDR beamforming, spectral
clustering diarization, meeting-mixture simulation and tcpWER scoring.
"""

from dasr.errors import DasrError, InvalidInputError

__version__ = "0.1.0"

__all__ = ["DasrError", "InvalidInputError", "__version__"]
