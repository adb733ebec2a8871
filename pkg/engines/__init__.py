"""Estimation engines: exact EM, the MCEM controllers, SAEM, MCML and inference."""
from contextlib import contextmanager

from models import EstimationError, TerminationReason, Trajectory


@contextmanager
def partial_trajectory(method):
    """
    Collect trajectory records; an engine error escaping the block carries
    the records gathered so far.
    """
    records = []
    try:
        yield records
    except EstimationError as exc:
        if exc.trajectory is None:
            exc.trajectory = Trajectory(tuple(records), TerminationReason.FAILED, method)
        raise
