"""Scenarios, the simulation driver, availability metrics and reports."""

from .metrics import (collapse_retries, daily_series, group_availability, impact_ratio,  # noqa: F401
                      rank_shares, success_ratio)
from .report import write_report  # noqa: F401
from .scenario import Scenario, churn_schedule, load, pair_scenario, scaled_paper_scenario  # noqa: F401
from .scenario import social_scenario, validate  # noqa: F401
from .world import RunResult, World, run  # noqa: F401
