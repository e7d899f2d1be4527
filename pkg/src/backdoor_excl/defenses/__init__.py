"""Desk-scale Neural Cleanse and STRIP."""

from .neural_cleanse import (NCConfig, NCVerdict, ReversedTrigger, nc_anomaly_index,
                             nc_reverse_trigger, nc_scan, save_trigger_image)
from .strip import (StripConfig, StripVerdict, blend, histogram_overlap, shannon_entropy, strip_entropy,
                    strip_scan)
