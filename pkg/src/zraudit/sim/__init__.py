"""Simulated mobile-operator middlebox: classifier, meter, gateway, origin."""

from .rules import (  # noqa: F401
    ALL_CLASSES,
    ClassificationRule,
    FlowClass,
    OperatorProfile,
    SessionKind,
    classify_flow,
)
