import logging

import numpy as np
import pytest

from geometry.core import Provenance
from ingest.dataset import ContactPoint, ContactSequence
from stages.contact import (
    ContactCompletionStage,
    ContactEvent,
    complete_from_contacts,
    filter_contacts,
    qualifying_runs,
)
from synth.motion import SEATED_CONTACTS
from utils.config import PipelineConfig


SEAT = 0.45


def seated_points(height: float = SEAT, jitter: float = 0.0) -> np.ndarray:
    xy = np.array(list(SEATED_CONTACTS.values()))
    z = np.full(len(xy), height)
    z[::2] += jitter
    z[1::2] -= jitter
    return np.column_stack([xy, z])


def trace(confidence, speed) -> ContactSequence:
    frames = tuple(
        tuple(ContactPoint(i, float(c), tuple(p)) for i, p in enumerate(seated_points())) for c in confidence
    )
    pelvis = np.tile([0.0, 0.0, SEAT + 0.1], (len(frames), 1))
    return ContactSequence(frames, np.asarray(speed, dtype=float), pelvis)


class TestFilter:
    def test_slowest_frame(self):
        speed = np.full(40, 0.1)
        speed[17] = 0.05
        events = filter_contacts(trace(np.full(40, 0.9), speed), window=15, tau=0.5, nu=0.3)
        assert [e.frame for e in events] == [17]
        assert events[0].window == (0, 39)
        assert events[0].points.shape == (8, 3)

    def test_ties_take_earliest(self):
        speed = np.full(20, 0.1)
        speed[[6, 12]] = 0.0
        events = filter_contacts(trace(np.full(20, 0.9), speed), window=15, tau=0.5, nu=0.3)
        assert [e.frame for e in events] == [6]

    def test_confidence_dip_breaks_window(self):
        confidence = np.full(20, 0.9)
        confidence[10] = 0.2
        assert filter_contacts(trace(confidence, np.zeros(20)), window=15, tau=0.5, nu=0.3) == []

    def test_fast_body_breaks_window(self):
        speed = np.zeros(20)
        speed[5] = 1.0
        assert filter_contacts(trace(np.full(20, 0.9), speed), window=15, tau=0.5, nu=0.3) == []

    def test_two_separated_runs(self):
        confidence = np.full(50, 0.9)
        confidence[25] = 0.0
        events = filter_contacts(trace(confidence, np.zeros(50)), window=15, tau=0.5, nu=0.3)
        assert [e.window for e in events] == [(0, 24), (26, 49)]

    def test_runs(self):
        assert qualifying_runs(np.array([1, 1, 0, 1, 1, 1], dtype=bool), 2) == [(0, 1), (3, 5)]
        assert qualifying_runs(np.array([1, 1, 0, 1, 1, 1], dtype=bool), 3) == [(3, 5)]


class TestCompletion:
    def event(self, points, pelvis=(0.0, 0.0, SEAT + 0.1)):
        return ContactEvent(0, np.asarray(points, dtype=float), (0, 0), np.asarray(pelvis, dtype=float))

    def test_seat_plane(self):
        prims = complete_from_contacts([self.event(seated_points())])
        assert len(prims) == 1
        prim = prims[0]
        assert prim.provenance is Provenance.CONTACT_COMPLETED
        assert np.allclose(prim.observed_plane.normal, [0, 0, 1], atol=1e-9)
        assert prim.observed_plane.offset == pytest.approx(SEAT)
        # slab hangs below the contact surface, away from the body
        assert prim.center[2] < SEAT

    def test_two_points_skipped(self, caplog):
        with caplog.at_level(logging.WARNING):
            prims = complete_from_contacts([self.event(seated_points()[:2])])
        assert prims == []
        assert "2 contact points" in caplog.text

    def test_thickness_clamped(self):
        prims = complete_from_contacts([self.event(seated_points(jitter=0.005))])
        assert prims[0].extents[2] == pytest.approx(0.05)

    def test_stage(self):
        speed = np.full(40, 0.1)
        speed[20] = 0.0
        stage = ContactCompletionStage(PipelineConfig(workers=1))
        events, prims = stage.execute(trace(np.full(40, 0.9), speed))
        assert len(events) == 1 and events[0].frame == 20
        assert len(prims) == 1
        assert stage.counts() == {"events": 1, "primitives": 1}
