import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from geometry.core import PlanarPrimitive, Provenance
from ingest.dataset import ContactSequence
from stages.base_stage import BaseStage
from stages.primitive_fit import build_primitive, ransac_plane
from utils.config import PipelineConfig
from utils.errors import FitError


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ContactEvent:
    frame: int
    points: NDArray  # (N, 3) world contact positions at ``frame``
    window: Tuple[int, int]  # first and last frame of the qualifying run
    pelvis: Optional[NDArray] = None


def qualifying_runs(mask: NDArray, min_length: int) -> List[Tuple[int, int]]:
    """Maximal runs of True with at least ``min_length`` frames, as (first, last)."""
    padded = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    starts, stops = edges[0::2], edges[1::2]
    return [(int(a), int(b) - 1) for a, b in zip(starts, stops) if b - a >= min_length]


def filter_contacts(contacts: ContactSequence, window: int, tau: float, nu: float) -> List[ContactEvent]:
    """Keep contact predictions that stay confident while the body is nearly still.

    Each maximal run of at least ``window`` frames with max vertex confidence
    >= ``tau`` and body speed <= ``nu`` yields one event at the run's slowest
    frame (earliest on ties), carrying the vertices confident at that frame.
    """
    speed = contacts.body_speed
    qualifies = (contacts.max_confidence() >= tau) & (speed <= nu)
    events = []
    for first, last in qualifying_runs(qualifies, window):
        t_star = first + int(np.argmin(speed[first : last + 1]))
        confident = [c.position for c in contacts.frames[t_star] if c.confidence >= tau]
        pelvis = contacts.pelvis[t_star] if contacts.pelvis is not None else None
        events.append(ContactEvent(t_star, np.array(confident, dtype=np.float64).reshape(-1, 3), (first, last), pelvis))
    return events


def complete_from_contacts(
    events: Sequence[ContactEvent],
    inlier_tol: float = 0.02,
    iters: int = 500,
    seed: int = 0,
) -> List[PlanarPrimitive]:
    primitives = []
    for index, event in enumerate(events):
        if len(event.points) < 3:
            logger.warning("Contact event at frame %d skipped: %d contact points", event.frame, len(event.points))
            continue
        try:
            plane, inliers = ransac_plane(event.points, inlier_tol, iters, (seed, index))
            prim = build_primitive(
                plane, event.points[inliers], event.pelvis, Provenance.CONTACT_COMPLETED
            )
        except FitError as err:
            logger.warning("Contact event at frame %d skipped: %s", event.frame, err)
            continue
        primitives.append(prim)
    return primitives


class ContactCompletionStage(BaseStage):
    def __init__(self, config: PipelineConfig):
        super().__init__(role="ContactCompletion", config=config)

    def process(self, contacts: ContactSequence) -> Tuple[Any, Dict[str, Any]]:
        cfg = self.config
        events = filter_contacts(contacts, cfg.contact_window, cfg.contact_tau, cfg.contact_nu)
        primitives = complete_from_contacts(events, cfg.ransac_inlier_tol, cfg.ransac_iters, cfg.seed)
        return (events, primitives), {"events": len(events), "primitives": len(primitives)}
