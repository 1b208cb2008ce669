"""Process-wide instrumentation counters.

Used to assert the retrieval-cost contract (one encoder invocation per
gallery item per pass) and the quadratic growth of temporal attention
score computation with frame count.
"""

from dataclasses import dataclass, field


@dataclass
class Counters:
    video_encodes: int = 0
    text_encodes: int = 0
    temporal_scores: int = 0
    spatial_scores: int = 0

    def reset(self) -> None:
        self.video_encodes = 0
        self.text_encodes = 0
        self.temporal_scores = 0
        self.spatial_scores = 0

    @property
    def encoder_calls(self) -> int:
        return self.video_encodes + self.text_encodes


COUNTERS = Counters()
