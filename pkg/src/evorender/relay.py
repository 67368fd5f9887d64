"""Relay learning: run heuristic rendering elements for an initial fraction
of training, then hand over to their trainable counterparts. Handover is
loss-neutral by construction (offsets enabled at zero, samplers swapped
without moving the current state).
"""

from __future__ import annotations

HEURISTIC = "heuristic"
EVOLUTIVE = "evolutive"

ELEMENTS = ("gauge", "sampling", "organization")


class RelayError(RuntimeError):
    pass


class RelaySchedule:
    """Per-element switch step: floor(fraction * total_steps), default
    fraction 0.1, overridable per element."""

    def __init__(self, total_steps, relay_fraction=0.1, overrides=None):
        if total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        if not 0.0 <= relay_fraction <= 1.0:
            raise ValueError("relay_fraction must be in [0, 1]")
        self.total_steps = total_steps
        self.fractions = {el: relay_fraction for el in ELEMENTS}
        for el, frac in (overrides or {}).items():
            if el not in ELEMENTS:
                raise ValueError(f"unknown relay element {el!r}")
            if not 0.0 <= frac <= 1.0:
                raise ValueError("relay fraction must be in [0, 1]")
            self.fractions[el] = frac
        self._fired = {el: False for el in ELEMENTS}

    def relay_step(self, element):
        return int(self.fractions[element] * self.total_steps)

    def phase(self, element, step):
        """HEURISTIC strictly before the element's relay step, EVOLUTIVE
        from then on. Monotone in step by construction."""
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        return HEURISTIC if step < self.relay_step(element) else EVOLUTIVE

    def due(self, element, step):
        """True exactly once: at the first step whose phase is EVOLUTIVE
        (skipped entirely when the element starts evolutive at step 0 and
        the caller passes fire_at_zero=False semantics via due(el, 0))."""
        return (not self._fired[element]) and self.phase(element, step) == EVOLUTIVE

    def mark_fired(self, element):
        if self._fired[element]:
            raise RelayError(f"relay for {element!r} invoked twice")
        self._fired[element] = True


def on_relay(element, pipeline):
    """Mutate the pipeline at an element's relay boundary.

    gauge: enable the (zero-initialized) offset branch, so the next forward
    pass is bit-for-bit identical to the last heuristic one.
    sampling: switch to gradient-through-sampling and zero the aux loss.
    organization: flip the splat organization mode.

    pipeline is any object exposing the touched attributes; raises
    RelayError on a second invocation for the same element.
    """
    sched = pipeline.relay_schedule
    sched.mark_fired(element)
    if element == "gauge":
        gauge = pipeline.gauge
        if gauge is not None and hasattr(gauge, "enabled"):
            gauge.enabled = True
            if hasattr(gauge, "set_trainable"):
                gauge.set_trainable(True)
            if pipeline.optimizer is not None:
                for p in gauge.parameters():
                    pipeline.optimizer.add_param(p)
    elif element == "sampling":
        pipeline.sampling_mode = EVOLUTIVE
        pipeline.aux_loss_weight = 0.0
    elif element == "organization":
        pipeline.organize_mode = EVOLUTIVE
    else:
        raise ValueError(f"unknown relay element {element!r}")
    return pipeline
