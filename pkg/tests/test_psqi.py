from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psqi_cases import BEST, HAND, WORST
from sleepsense.errors import DataError, EmptyEvaluation, IncompleteResponse, MissingColumn
from sleepsense.psqi import (
    DISTURBANCE_ITEMS,
    ORDINAL_ITEMS,
    PSQIRecord,
    PSQIResponse,
    SleepQuality,
    agreement_table,
    classify_sleeper,
    load_psqi_csv,
    score_components,
    sleep_efficiency_pct,
    time_in_bed_hours,
    to_prompt_text,
    write_psqi_csv,
)

GOLDEN = Path(__file__).parent / "golden"

def test_best_case_scores_zero():
    score = score_components(BEST)
    assert score.components == (0,) * 7
    assert score.global_score == 0
    assert classify_sleeper(score) is SleepQuality.GOOD


def test_worst_case_scores_twenty_one():
    score = score_components(WORST)
    assert score.components == (3,) * 7
    assert score.global_score == 21
    assert classify_sleeper(score) is SleepQuality.POOR


def test_hand_scored_fixture():
    assert sleep_efficiency_pct(HAND) == 81.25
    score = score_components(HAND)
    assert score.components == (1, 2, 1, 1, 2, 0, 1)
    assert score.global_score == 8
    assert classify_sleeper(score) is SleepQuality.POOR


def test_cutoff():
    assert classify_sleeper(0) is SleepQuality.GOOD
    assert classify_sleeper(5) is SleepQuality.GOOD
    assert classify_sleeper(6) is SleepQuality.POOR
    assert classify_sleeper(21) is SleepQuality.POOR
    with pytest.raises(DataError):
        classify_sleeper(22)


@pytest.mark.parametrize("hours,expected", [(8, 0), (7.01, 0), (7, 1), (6, 1), (5.5, 2), (5, 2), (4.99, 3)])
def test_duration_bands(hours, expected):
    assert score_components(BEST.replace(sleep_hours=hours)).duration == expected


# minute band (0-3) plus the within-30-minutes item, then the sum is banded 0 / 1-2 / 3-4 / 5-6
@pytest.mark.parametrize("minutes,q5a,expected", [
    (0, 0, 0), (15, 0, 0), (16, 0, 1), (30, 0, 1), (31, 0, 1), (60, 0, 1), (61, 0, 2),
    (15, 1, 1), (31, 1, 2), (61, 2, 3), (61, 3, 3), (10, 3, 2),
])
def test_latency_bands(minutes, q5a, expected):
    assert score_components(BEST.replace(latency_min=minutes, cannot_sleep_30min=q5a)).latency == expected


@pytest.mark.parametrize("total,expected", [(0, 0), (1, 1), (9, 1), (10, 2), (18, 2), (19, 3), (27, 3)])
def test_disturbance_bands(total, expected):
    values = [min(3, max(0, total - 3 * i)) for i in range(len(DISTURBANCE_ITEMS))]
    resp = BEST.replace(other_reason="x", **dict(zip(DISTURBANCE_ITEMS, values)))
    assert score_components(resp).disturbances == expected


def test_time_in_bed_wraps_midnight():
    assert time_in_bed_hours("23:00", "07:00") == 8
    assert time_in_bed_hours("01:30", "09:00") == 7.5
    assert time_in_bed_hours("22:00", "22:00") == 24


def test_incomplete_response_lists_items():
    with pytest.raises(IncompleteResponse) as err:
        score_components(BEST.replace(pain=None, sleep_hours=None))
    assert set(err.value.missing) == {"pain", "sleep_hours"}
    with pytest.raises(IncompleteResponse):
        to_prompt_text(BEST.replace(bedtime=None))


def test_invalid_codes_rejected():
    with pytest.raises(DataError):
        BEST.replace(pain=4)
    with pytest.raises(DataError):
        BEST.replace(sleep_hours=25)
    with pytest.raises(DataError):
        BEST.replace(bedtime="late")


responses = st.builds(
    PSQIResponse,
    bedtime=st.sampled_from(["21:30", "22:00", "23:15", "00:30", "01:00"]),
    latency_min=st.integers(0, 120).map(float),
    waketime=st.sampled_from(["06:00", "07:30", "08:00", "09:45"]),
    sleep_hours=st.floats(2.0, 7.5).map(lambda h: round(h, 2)),
    other_reason=st.sampled_from([None, "OCD"]),
    **{name: st.integers(0, 3) for name in ORDINAL_ITEMS},
)


@settings(max_examples=200, deadline=None)
@given(responses, st.sampled_from(ORDINAL_ITEMS))
def test_worsening_an_item_never_lowers_global(resp, item):
    before = score_components(resp)
    value = getattr(resp, item)
    if value < 3:
        after = score_components(resp.replace(**{item: value + 1}))
        assert after.global_score >= before.global_score
    assert before.global_score == sum(before.components)
    assert all(0 <= c <= 3 for c in before.components)


@settings(max_examples=100, deadline=None)
@given(responses, st.floats(0.0, 60.0), st.floats(0.0, 1.5))
def test_more_latency_or_less_sleep_never_lowers_global(resp, extra_latency, less_sleep):
    base = score_components(resp).global_score
    assert score_components(resp.replace(latency_min=resp.latency_min + extra_latency)).global_score >= base
    fewer = max(0.0, resp.sleep_hours - less_sleep)
    assert score_components(resp.replace(sleep_hours=fewer)).global_score >= base


# ---------------------------------------------------------------------------
# Prompt text


def test_prompt_text_snapshot():
    assert to_prompt_text(HAND) + "\n" == (GOLDEN / "psqi_hand_fixture.txt").read_text(encoding="utf-8")


def test_prompt_text_lines():
    text = to_prompt_text(HAND)
    lines = text.splitlines()
    assert all(line.startswith("During the past month, ") for line in lines)
    assert "OCD" in text
    assert lines[1].endswith(": 45 minutes")
    assert "because of another reason" not in to_prompt_text(BEST)


def test_distinct_responses_distinct_texts():
    assert to_prompt_text(HAND) != to_prompt_text(HAND.replace(pain=3))
    assert to_prompt_text(BEST) != to_prompt_text(WORST)
    assert to_prompt_text(HAND) == to_prompt_text(HAND.replace())


# ---------------------------------------------------------------------------
# CSV


def test_csv_roundtrip(tmp_path):
    records = [PSQIRecord("p01", "pre", HAND), PSQIRecord("p01", "post", BEST), PSQIRecord("p02", "pre", WORST)]
    path = tmp_path / "psqi.csv"
    write_psqi_csv(path, records)
    assert load_psqi_csv(path) == records


def test_csv_accepts_answer_wording(tmp_path):
    path = tmp_path / "psqi.csv"
    write_psqi_csv(path, [PSQIRecord("p01", "pre", HAND)])
    text = path.read_text()
    header, row = text.splitlines()
    cells = row.split(",")
    cols = header.split(",")
    cells[cols.index("q6")] = "Fairly good"
    cells[cols.index("q5b")] = "Once or twice a week"
    path.write_text(header + "\n" + ",".join(cells) + "\n")
    assert load_psqi_csv(path)[0].response == HAND


def test_csv_missing_column(tmp_path):
    path = tmp_path / "psqi.csv"
    path.write_text("participant_id,administration,bedtime\np1,pre,23:00\n")
    with pytest.raises(MissingColumn):
        load_psqi_csv(path)


# ---------------------------------------------------------------------------
# Agreement


def _table_three_inputs():
    G, P = SleepQuality.GOOD, SleepQuality.POOR
    pairs = [(G, G)] * 39 + [(P, P)] * 27 + [(P, G)] * 11
    return [s for s, _ in pairs], [p for _, p in pairs]


def test_agreement_distribution():
    table = agreement_table(*_table_three_inputs())
    assert table.total == 77
    assert abs(100 * table.agreement - 85.7) <= 0.1
    G, P = SleepQuality.GOOD, SleepQuality.POOR
    assert table.counts == {(G, G): 39, (P, P): 27, (G, P): 0, (P, G): 11}
    lines = table.to_text().splitlines()
    assert [line.split(" | ")[-1].strip() for line in lines[2:6]] == ["39", "27", "0", "11"]
    assert [tuple(c.strip() for c in line.split(" | ")[:2]) for line in lines[2:6]] == [
        ("good", "good"), ("poor", "poor"), ("good", "poor"), ("poor", "good")]
    assert lines[-1] == "Overall agreement: 85.7% (77 participants)"


def test_agreement_edges():
    G = SleepQuality.GOOD
    assert agreement_table([G, G], [G, G]).agreement == 1.0
    with pytest.raises(EmptyEvaluation):
        agreement_table([], [])


def test_sleep_quality_parse():
    assert SleepQuality.parse("Poor sleeper") is SleepQuality.POOR
    assert SleepQuality.parse(" good ") is SleepQuality.GOOD
