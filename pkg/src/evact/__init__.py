"""Adaptive event slicing and text-guided uncertainty-aware event/text embeddings."""

import os as _os

# single-threaded BLAS unless asked otherwise: keeps runs bitwise reproducible
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _os.environ.get("EVACT_THREADS", "1"))

from .errors import (DegenerateSplit, DegenerateStd, EvactError, FormatError, IoError, ShapeError,
                     StateError, TrainingDiverged, ValidationError, VocabError)
from .events import (Event, EventStream, Segment, StreamSlice, SyntheticScene, generate_scene,
                     read_stream, write_stream)
from .representation import (PRESETS, AfeConfig, AfeTree, CountImage, FrameStack, afe_slice,
                             count_image, difference_rate, fixed_count_slice, fixed_duration_slice,
                             render_frames, voxel_slice)

__version__ = "0.1.0"
