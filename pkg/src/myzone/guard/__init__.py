"""Ring of rendezvous servers and the machinery that guards registration on it."""

from .complaints import (ISOLATED, RETAINED, Complainer, Complaint, ComplaintBoard, LogRecord,  # noqa: F401
                         Notification)
from .model import (GuardParams, chain_expected_runs, detection_chain_distribution, distribution,  # noqa: F401
                    expected_runs, success_probability)
from .registration import GuardResult, RunTrace, guarded_register  # noqa: F401
from .ring import CORRECT, ChordRing, ContactInfo, MaliciousPolicy, RingNode, make_addresses  # noqa: F401
from .simulate import build_fixture, empirical_distribution, empirical_mean, simulate_runs  # noqa: F401
from .sybil import TakeoverFrequency, sybil_takeover_probe  # noqa: F401
