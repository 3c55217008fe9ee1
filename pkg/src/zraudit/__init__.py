"""Zero-rating audit toolkit.

Plans power-of-two payload schedules so a single quota delta identifies the
billed subset, drives verify / ip-probe / host-probe traffic over HTTP,
HTTPS and HTTP3, and validates the whole pipeline against a simulated
operator middlebox (classifier, quota meter, roaming modes, origin).
"""

__version__ = "0.1.0"


class ZrAuditError(Exception):
    """Base class for all toolkit errors."""
