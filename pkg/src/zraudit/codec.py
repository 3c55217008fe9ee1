"""Billing attribution codec.

Assigns each test payload a traffic amount of ``base_unit * 2**index`` plus
a control payload of ``base_unit * 2**n`` that is always billed, so a single
remaining-quota delta decodes into a per-payload billed/zero-rated bitmask.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ZrAuditError
from .quota import QuotaSnapshot

MAX_PAYLOADS = 16


class CodecError(ZrAuditError):
    pass


class GranularityTooCoarse(CodecError):
    """Quota reporting is too coarse to disambiguate payloads."""


class PlanTooLarge(CodecError):
    """Planned traffic exceeds the caller-supplied remaining-quota bound."""


class ControlNotBilled(CodecError):
    """Delta below the control size: billing records not updated yet."""


class UnattributableDelta(CodecError):
    """Delta cannot be explained by any payload subset within tolerance."""


class NegativeDelta(CodecError):
    """Quota increased mid-session (top-up or reset)."""


@dataclass(frozen=True)
class PayloadPlan:
    """Size schedule for one billing-attribution session.

    ``sizes[i] == base_unit * 2**i``; the control payload uses the next
    exponent so one decoder covers it as well.
    """

    base_unit: int
    payload_count: int
    sizes: tuple[int, ...]
    control_size: int
    slack_budget: int = 0

    @property
    def total_bytes(self) -> int:
        """Planned traffic including control: base_unit * (2**(n+1) - 1)."""
        return self.base_unit * (2 ** (self.payload_count + 1) - 1)


@dataclass(frozen=True)
class BillingBitmask:
    """Decoded billing outcome; flags[i] is True when payload i was billed."""

    flags: tuple[bool, ...]
    residual: int


def plan_session(
    payload_count: int,
    base_unit: int,
    granularity: int,
    slack_budget: int = 0,
    remaining_quota: int | None = None,
) -> PayloadPlan:
    """Build the power-of-two size schedule for ``payload_count`` payloads."""
    if not 1 <= payload_count <= MAX_PAYLOADS:
        raise CodecError(f"payload_count must be in 1..{MAX_PAYLOADS}, got {payload_count}")
    if base_unit <= 0:
        raise CodecError("base_unit must be positive")
    if granularity <= 0:
        raise CodecError("granularity must be positive")
    if slack_budget < 0:
        raise CodecError("slack_budget must be >= 0")
    if base_unit < 2 * granularity:
        raise GranularityTooCoarse(
            f"base_unit {base_unit} < 2 * granularity {granularity}; "
            "quota reporting cannot disambiguate payloads"
        )
    sizes = tuple(base_unit * 2**i for i in range(payload_count))
    plan = PayloadPlan(
        base_unit=base_unit,
        payload_count=payload_count,
        sizes=sizes,
        control_size=base_unit * 2**payload_count,
        slack_budget=slack_budget,
    )
    if remaining_quota is not None and plan.total_bytes > remaining_quota:
        raise PlanTooLarge(
            f"planned {plan.total_bytes} bytes exceeds remaining quota {remaining_quota}"
        )
    return plan


def decode_billing(
    plan: PayloadPlan, quota_before: QuotaSnapshot, quota_after: QuotaSnapshot
) -> BillingBitmask:
    """Turn the observed quota delta back into per-payload billing flags.

    The delta minus the control size is rounded to the nearest multiple of
    the base unit; the bits of that multiple are the flags.  Rounding
    tolerates reporting error up to granularity/2; slack_budget additionally
    widens the accepted positive residual (protocol overhead billed on top).
    """
    if quota_before.source != quota_after.source:
        raise CodecError("snapshots must come from the same adapter")
    if quota_before.granularity != quota_after.granularity:
        raise CodecError("snapshots must share one reporting granularity")
    granularity = quota_before.granularity

    delta = quota_before.remaining - quota_after.remaining
    if delta < 0:
        raise NegativeDelta(f"quota increased by {-delta} bytes mid-session")
    if 2 * delta < 2 * plan.control_size - granularity:
        raise ControlNotBilled(
            f"delta {delta} below control size {plan.control_size}; "
            "billing records not yet updated"
        )

    billed_amount = delta - plan.control_size
    # round-half-up to the nearest base-unit multiple, in exact integers
    decoded = (2 * billed_amount + plan.base_unit) // (2 * plan.base_unit)
    if decoded < 0:
        decoded = 0
    if decoded >= 2**plan.payload_count:
        raise UnattributableDelta(
            f"delta {delta} implies billed amount beyond all {plan.payload_count} payloads"
        )
    residual = billed_amount - decoded * plan.base_unit
    if not -granularity / 2 <= residual <= granularity / 2 + plan.slack_budget:
        raise UnattributableDelta(
            f"residual {residual} outside tolerance "
            f"[-{granularity / 2}, {granularity / 2 + plan.slack_budget}]"
        )
    flags = tuple(bool(decoded >> i & 1) for i in range(plan.payload_count))
    return BillingBitmask(flags=flags, residual=residual)


def max_payloads_for_quota(remaining: int, base_unit: int) -> int:
    """Largest n with base_unit * (2**(n+1) - 1) <= remaining; 0 = cannot run."""
    if remaining <= 0:
        raise CodecError("remaining must be positive")
    if base_unit <= 0:
        raise CodecError("base_unit must be positive")
    n = 0
    while n < MAX_PAYLOADS and base_unit * (2 ** (n + 2) - 1) <= remaining:
        n += 1
    return n
