"""Exception types shared across the package.

Bad arguments raise plain :class:`ValueError`; the classes below mark the
numerical failure modes callers may want to catch separately.
"""


class NumericalError(RuntimeError):
    """A numerical routine failed its own accuracy check."""


class FitError(NumericalError):
    """A resonance fit could not be performed on the given data."""


class NoResonanceError(ValueError):
    """No drive harmonic is resonant with the requested transition."""


class StepTooCoarseError(ValueError):
    """The integration step is too long for the fastest retained drive term."""

    def __init__(self, step, max_step):
        self.step = step
        self.max_step = max_step
        super().__init__(f"step {step:.3e} s too coarse; use step <= {max_step:.3e} s")
