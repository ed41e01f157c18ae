"""Questionnaire fixtures with hand-derived scores."""

from sleepsense.psqi import ORDINAL_ITEMS, PSQIResponse

BEST = PSQIResponse(
    bedtime="23:00", latency_min=5, waketime="07:00", sleep_hours=8,
    **{name: 0 for name in ORDINAL_ITEMS},
)

WORST = PSQIResponse(
    bedtime="22:00", latency_min=90, waketime="08:00", sleep_hours=4,
    other_reason="neighbour's dog", **{name: 3 for name in ORDINAL_ITEMS},
)

# Scored by hand before the scorer existed:
#   quality 1 -> 1
#   latency 45 min -> 2, plus weekly trouble (2) = 4 -> 2
#   duration 6.5 h -> 1
#   efficiency 6.5 / 8 = 81.25 % -> 1
#   disturbances 2+2+1+1+0+2+1+2+1 = 12 -> 2
#   medication 0 -> 0
#   dysfunction 1 + 1 = 2 -> 1
#   global 8 -> poor
HAND = PSQIResponse(
    bedtime="23:00", latency_min=45, waketime="07:00", sleep_hours=6.5,
    cannot_sleep_30min=2,
    wake_middle_night=2, bathroom=2, cannot_breathe=1, cough_snore=1, too_cold=0,
    too_hot=2, bad_dreams=1, pain=2, other_frequency=1, other_reason="OCD",
    subjective_quality=1, medication=0, trouble_staying_awake=1, enthusiasm_problem=1,
)
